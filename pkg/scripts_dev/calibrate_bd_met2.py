"""Dev calibration round 2: longer MET training + trajectory rollout."""
import sys
import time

import numpy as np

sys.path.insert(0, "src")

from metsolver.analysis import hellinger, hellinger_padded
from metsolver.diff import Schedule
from metsolver.met import METConfig, METModel, TrainHyper, build_prompt, met_sample, train_met
from metsolver.model import parse_model
from metsolver.reward import RewardModelSet
from metsolver.ssa import simulate
from metsolver.statespace import ProbabilityVector, build_generator, evolve_exact
from metsolver.tasks import sample_trajectories_iterative

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
reward_set = RewardModelSet.load("scripts_dev/bd_reward_set")
print(f"loaded reward set: {len(reward_set.elements)} elements", flush=True)

cfg = METConfig(d_emb=48, d_ff=384, d_l=3, h=4, d_p=8)
model = METModel(net, cfg, seed=1, normalization=reward_set.prompt_stats(net))
hyper = TrainHyper(
    s_batch=1000, m_acc=20, epochs=600,
    schedule=Schedule(2e-3, warmup_steps=150, decay="inv_sqrt"), seed=2,
)
t0 = time.time()
trace = train_met(model, reward_set, net, hyper,
                  progress=lambda e, E, kl: print(f"  epoch {e}/{E} kl={kl:.4f} ({time.time()-t0:.0f}s)", flush=True) if e % 50 == 0 else None)
print(f"[met] trained in {time.time()-t0:.0f}s, updates={trace.rows[-1][0]}", flush=True)

gen = build_generator(net, rates)
worst = 0.0
for x0 in (0, 7, 19):
    for t in (2.5, 1.0, 5.0):
        prompt = build_prompt(net, rates, [x0], t)
        samples = met_sample(model, prompt, 10_000, seed=11)
        emp = np.bincount(samples[:, 0], minlength=26) / 1e4
        exact = evolve_exact(gen, ProbabilityVector.delta(gen.space, [x0]), t).values
        h = hellinger(emp, exact)
        worst = max(worst, h if t == 2.5 else 0)
        print(f"x0={x0} t={t}: H={h:.4f}", flush=True)
print(f"worst held-out H: {worst:.4f}", flush=True)

# trajectory rollout to t=100 vs SSA
t0 = time.time()
ens_met = sample_trajectories_iterative(model, net, rates, [0], 1.0, 100, 2000, seed=3)
print(f"[traj] MET rollout {time.time()-t0:.0f}s", flush=True)
t0 = time.time()
ens_ssa = simulate(net, rates, [0], ens_met.grid[1:], n_traj=10_000, seed=4)
print(f"[traj] SSA {time.time()-t0:.0f}s", flush=True)

mean_met = ens_met.mean_std()[0][-1, 0]
mean_ssa = ens_ssa.mean_std()[0][-1, 0]
print(f"steady-state mean MET {mean_met:.3f} vs SSA {mean_ssa:.3f} rel {abs(mean_met-mean_ssa)/mean_ssa:.3%}", flush=True)
for t in (25, 49, 98):
    mi = int(np.argmin(np.abs(ens_met.grid - t)))
    si = int(np.argmin(np.abs(ens_ssa.grid - t)))
    h = hellinger_padded(ens_met.marginal_at(mi, 0, support=25), ens_ssa.marginal_at(si, 0, support=25))
    print(f"traj marginal t={t}: H={h:.4f}", flush=True)

model.save("scripts_dev/bd_met2.ckpt", {"experiment": "calibration2"})
print("saved.", flush=True)
