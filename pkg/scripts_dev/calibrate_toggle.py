"""Dev calibration: toggle-switch reward chain at reduced truncation."""
import sys, time
import numpy as np
sys.path.insert(0, "src")
from metsolver.analysis import hellinger
from metsolver.model import load_model
from metsolver.reward import RewardHyper, train_reward_set
from metsolver.statespace import ProbabilityVector, build_generator, evolve_exact

net = load_model("src/metsolver/models/toggle_switch.cme")
t0 = time.time()
ms = train_reward_set(
    net, net.default_rates, net.default_init, 5e-3, 10.0, [1.0, 3.0, 10.0],
    RewardHyper(width=64, batch=500, epochs=100, lr=1e-3, seed=0),
    progress=lambda k, n, kl: print(f"  step {k}/{n} kl={kl:.4f} ({time.time()-t0:.0f}s)", flush=True) if k % 200 == 0 else None,
)
print(f"[toggle reward] {time.time()-t0:.0f}s", flush=True)
gen = build_generator(net, net.default_rates)
p0 = ProbabilityVector.delta(gen.space, net.default_init)
states = gen.space.all_states()
for e in ms.elements:
    model = ms.model_for(e)
    approx = np.exp(model.logprob(states))
    approx /= approx.sum()
    exact = evolve_exact(gen, p0, e.t)
    for i, name in enumerate(net.species_names):
        m_approx = np.zeros(int(net.bounds[i]) + 1)
        np.add.at(m_approx, states[:, i], approx)
        h = hellinger(m_approx, exact.marginal(gen.space, i))
        print(f"t={e.t} {name}: H={h:.4f}", flush=True)
ms.save("scripts_dev/toggle_reward_set")
print("saved.", flush=True)
