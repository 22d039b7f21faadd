"""Dev calibration: birth-death MET across a kd range, then rate inference."""
import sys
import time

import numpy as np

sys.path.insert(0, "src")

from metsolver.analysis import hellinger
from metsolver.diff import Schedule
from metsolver.met import METConfig, METModel, TrainHyper, build_prompt, met_sample, train_met
from metsolver.model import load_model
from metsolver.reward import RewardHyper, train_reward_grid
from metsolver.ssa import simulate
from metsolver.statespace import ProbabilityVector, build_generator, evolve_exact
from metsolver.tasks import infer_rates

net = load_model("src/metsolver/models/birth_death.cme")

kd_grid = np.geomspace(0.03, 0.3, 12)
combos = [({"kb": 1.0, "kd": float(kd)}, [0]) for kd in kd_grid]
t0 = time.time()
reward_set = train_reward_grid(
    net, combos, dt=1e-2, t_final=5.0, save_times=[1, 2, 3, 4, 5],
    hyper=RewardHyper(width=32, batch=1000, epochs=100, lr=1e-3, seed=10),
    out_dir="scripts_dev/bd_infer_reward", workers=2,
)
print(f"[reward] 12 chains in {time.time()-t0:.0f}s", flush=True)

cfg = METConfig(d_emb=48, d_ff=384, d_l=3, h=4, d_p=8)
model = METModel(net, cfg, seed=11, normalization=reward_set.prompt_stats(net))
hyper = TrainHyper(
    s_batch=1000, m_acc=20, epochs=800,
    schedule=Schedule(2e-3, warmup_steps=150, decay="inv_sqrt"), seed=12,
)
t0 = time.time()
trace = train_met(model, reward_set, net, hyper,
                  progress=lambda e, E, kl: print(f"  epoch {e}/{E} kl={kl:.4f} ({time.time()-t0:.0f}s)", flush=True) if e % 100 == 0 else None)
print(f"[met] {time.time()-t0:.0f}s", flush=True)

# fidelity across the rate cloud at an intermediate kd (0.1 not on the grid)
gen = build_generator(net, {"kb": 1.0, "kd": 0.1})
for t in (2.0, 4.0):
    prompt = build_prompt(net, {"kb": 1.0, "kd": 0.1}, [0], t)
    samples = met_sample(model, prompt, 10_000, seed=13)
    emp = np.bincount(samples[:, 0], minlength=26) / 1e4
    exact = evolve_exact(gen, ProbabilityVector.delta(gen.space, [0]), t).values
    print(f"kd=0.1 (off-grid) t={t}: H={hellinger(emp, exact):.4f}", flush=True)

data = simulate(net, {"kb": 1.0, "kd": 0.1}, [0], [1.0, 2.0, 3.0, 4.0, 5.0], n_traj=10_000, seed=101)
t0 = time.time()
chain = infer_rates(model, net, data, steps=1000, proposal_std={"kd": 0.05},
                    batch=1000, seed=7, init_rates={"kb": 1.0, "kd": 0.25})
kd = chain.rate_history("kd")[200:]
hist, edges = np.histogram(kd, bins=40)
mode = 0.5 * (edges[np.argmax(hist)] + edges[np.argmax(hist) + 1])
print(f"[infer] {time.time()-t0:.0f}s acceptance={chain.acceptance_rate():.2%} "
      f"mode={mode:.4f} median={np.median(kd):.4f} within50={0.05 <= mode <= 0.15}", flush=True)

model.save("scripts_dev/bd_met_infer.ckpt", {"experiment": "inference calibration"})
print("saved.", flush=True)
