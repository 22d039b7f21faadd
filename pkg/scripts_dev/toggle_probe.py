import sys, time
import numpy as np
sys.path.insert(0, "src")
from metsolver.analysis import hellinger
from metsolver.model import load_model
from metsolver.reward import RewardHyper, train_reward_set
from metsolver.statespace import ProbabilityVector, build_generator, evolve_exact

label, dt, epochs, lr, width, batch = sys.argv[1], float(sys.argv[2]), int(sys.argv[3]), float(sys.argv[4]), int(sys.argv[5]), int(sys.argv[6])
net = load_model("src/metsolver/models/toggle_switch.cme")
gen = build_generator(net, net.default_rates)
p0 = ProbabilityVector.delta(gen.space, net.default_init)
states = gen.space.all_states()
t0 = time.time()
ms = train_reward_set(
    net, net.default_rates, net.default_init, dt, 1.0, [1.0],
    RewardHyper(width=width, batch=batch, epochs=epochs, lr=lr, seed=0),
)
model = ms.model_for(ms.elements[-1])
approx = np.exp(model.logprob(states)); approx /= approx.sum()
exact = evolve_exact(gen, p0, 1.0)
hs = {}
for i, name in enumerate(net.species_names):
    m_a = np.zeros(int(net.bounds[i]) + 1); np.add.at(m_a, states[:, i], approx)
    hs[name] = hellinger(m_a, exact.marginal(gen.space, i))
print(f"[{label}] dt={dt} epochs={epochs} lr={lr} w={width} b={batch}: "
      + " ".join(f"{k}={v:.3f}" for k, v in hs.items()) + f" ({time.time()-t0:.0f}s)", flush=True)
