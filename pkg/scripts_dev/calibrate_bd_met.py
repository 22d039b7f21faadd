"""Dev calibration: birth-death MET end-to-end at acceptance scale."""
import sys
import time

import numpy as np

sys.path.insert(0, "src")

from metsolver.analysis import hellinger
from metsolver.diff import Schedule
from metsolver.met import METConfig, METModel, TrainHyper, build_prompt, met_sample, train_met
from metsolver.model import parse_model
from metsolver.reward import RewardHyper, train_reward_grid
from metsolver.statespace import ProbabilityVector, build_generator, evolve_exact

BD = """species X
bound 25
reaction kb : 0 -> X
reaction kd : X -> 0
rate kb 1.0
rate kd 0.1
init X 0
time 0 100
"""

net = parse_model(BD)
rates = dict(net.default_rates)

t0 = time.time()
combos = [(rates, [x0]) for x0 in range(20)]
reward_set = train_reward_grid(
    net, combos, dt=1e-2, t_final=5.0, save_times=[1, 2, 3, 4, 5],
    hyper=RewardHyper(width=32, batch=1000, epochs=100, lr=1e-3, seed=0),
    out_dir="scripts_dev/bd_reward_set", workers=8,
)
print(f"[reward] 20 chains x 500 steps in {time.time()-t0:.0f}s", flush=True)

# sanity: reward fidelity at a few elements
gen = build_generator(net, rates)
states = np.arange(26)[:, None]
for e in reward_set.elements[:3] + reward_set.elements[-2:]:
    m = reward_set.model_for(e)
    approx = np.exp(m.logprob(states))
    exact = evolve_exact(gen, ProbabilityVector.delta(gen.space, e.x0), e.t).values
    print(f"  reward x0={e.x0} t={e.t}: H={hellinger(approx/approx.sum(), exact):.3f}", flush=True)

cfg = METConfig(d_emb=32, d_ff=128, d_l=2, h=4, d_p=8)
model = METModel(net, cfg, seed=1, normalization=reward_set.prompt_stats(net))
hyper = TrainHyper(
    s_batch=500, m_acc=20, epochs=150,
    schedule=Schedule(2e-3, warmup_steps=100, decay="inv_sqrt"), seed=2,
)
t0 = time.time()
trace = train_met(model, reward_set, net, hyper,
                  progress=lambda e, E, kl: print(f"  epoch {e}/{E} kl={kl:.4f}", flush=True) if e % 15 == 0 else None)
print(f"[met] trained in {time.time()-t0:.0f}s, updates={trace.rows[-1][0]}", flush=True)

kl = trace.kl_series()
print(f"kl first 20 mean {kl[:20].mean():.4f} -> last 100 mean {kl[-100:].mean():.4f}", flush=True)

for x0 in (0, 7, 19):
    for t in (2.5, 1.0, 5.0):
        prompt = build_prompt(net, rates, [x0], t)
        samples = met_sample(model, prompt, 10_000, seed=11)
        emp = np.bincount(samples[:, 0], minlength=26) / 1e4
        exact = evolve_exact(gen, ProbabilityVector.delta(gen.space, [x0]), t).values
        print(f"x0={x0} t={t}: H={hellinger(emp, exact):.4f}", flush=True)

model.save("scripts_dev/bd_met.ckpt", {"experiment": "calibration"})
print("saved.", flush=True)
