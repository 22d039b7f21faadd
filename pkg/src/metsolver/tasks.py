"""Downstream workflows: parameter sweeps, rate inference, trajectory rollout.

All three ride on a trained transformer: sweeps sample states across a
rate grid and score bimodality, inference climbs the data likelihood by a
Gaussian random walk in log-rate space, and trajectory ensembles chain
one-step prompts where each step's sampled state becomes the next
initial state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .analysis import bimodality_coefficient
from .errors import DegenerateVariance
from .met import METModel, build_prompt
from .model import ReactionNetwork
from .ssa import TrajectoryEnsemble
from .util import stream


def sweep_bimodality(
    model: METModel,
    net: ReactionNetwork,
    base_rates,
    sweep_names: tuple[str, str],
    grid_x,
    grid_y,
    x0,
    t: float,
    n_samples: int,
    species: int,
    seed: int = 0,
) -> np.ndarray:
    """Bimodality coefficient of one species over a rate-pair grid.

    Cell [iy, ix] uses rates {sweep_names[0]: grid_x[ix], sweep_names[1]:
    grid_y[iy]} on top of base_rates.  Cells whose samples are degenerate
    are NaN.  Each cell runs on its own (seed, cell-index) stream.
    """
    grid_x = np.asarray(grid_x, dtype=np.float64)
    grid_y = np.asarray(grid_y, dtype=np.float64)
    out = np.full((len(grid_y), len(grid_x)), np.nan)
    for iy, gy in enumerate(grid_y):
        for ix, gx in enumerate(grid_x):
            rates = dict(base_rates)
            rates[sweep_names[0]] = float(gx)
            rates[sweep_names[1]] = float(gy)
            prompt = build_prompt(net, rates, x0, t)
            rng = stream(seed, 0x5357, iy * len(grid_x) + ix)
            samples = model.sample(prompt, n_samples, rng)
            try:
                out[iy, ix] = bimodality_coefficient(samples[:, species])
            except DegenerateVariance:
                pass
    return out


def write_sweep_csv(path, grid_x, grid_y, values: np.ndarray, names: tuple[str, str]):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{names[0]},{names[1]},bimodality\n")
        for iy, gy in enumerate(grid_y):
            for ix, gx in enumerate(grid_x):
                v = values[iy, ix]
                fh.write(f"{float(gx)!r},{float(gy)!r},{'' if np.isnan(v) else repr(float(v))}\n")


@dataclass
class InferenceChain:
    """Greedy maximum-likelihood random walk through rate space."""

    symbols: list[str]
    visited: np.ndarray  # (steps+1, n_symbols) rate values, start included
    accepted: np.ndarray  # (steps,) bool
    scores: np.ndarray  # (steps+1,) data score at each visited point
    proposal_std: dict
    seed: int

    def acceptance_rate(self) -> float:
        return float(self.accepted.mean())

    def rate_history(self, symbol: str) -> np.ndarray:
        return self.visited[:, self.symbols.index(symbol)]

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("step," + ",".join(self.symbols) + ",accepted,score\n")
            for i in range(len(self.visited)):
                acc = "" if i == 0 else str(int(self.accepted[i - 1]))
                row = ",".join(repr(float(v)) for v in self.visited[i])
                fh.write(f"{i},{row},{acc},{float(self.scores[i])!r}\n")


def infer_rates(
    model: METModel,
    net: ReactionNetwork,
    data: TrajectoryEnsemble,
    steps: int,
    proposal_std,
    batch: int,
    seed: int,
    init_rates=None,
    log_mean: bool = False,
) -> InferenceChain:
    """Recover rate constants from trajectory data by greedy ascent.

    Per step, rates take a Gaussian step in log space (per-symbol std;
    zero freezes a symbol), `batch` (time, state) pairs are drawn from the
    data by first picking time points, and the move is kept only if the
    mean probability (mean log-probability with log_mean=True) of the
    batch improves.  The chain is a pure function of (seed, data).
    """
    rng = stream(seed, 0x494E)
    symbols = [r.rate_symbol for r in net.reactions]
    seen = set()
    unique_symbols = [s for s in symbols if not (s in seen or seen.add(s))]
    if np.isscalar(proposal_std):
        proposal_std = {s: float(proposal_std) for s in unique_symbols}
    std = np.array([float(proposal_std.get(s, 0.0)) for s in unique_symbols])

    current = dict(init_rates or net.default_rates)
    x0_all = data.states[:, 0, :]

    def draw_batch():
        ti = rng.integers(0, len(data.grid), size=batch)
        ki = rng.integers(0, data.n_traj, size=batch)
        times = data.grid[ti]
        states = data.states[ki, ti, :]
        inits = x0_all[ki]
        return times, inits, states

    def score(rates, times, inits, states) -> float:
        prompts = np.concatenate(
            [
                np.repeat(
                    np.log([float(rates[s]) for s in symbols])[None, :], batch, axis=0
                ),
                inits.astype(np.float64),
                times[:, None],
            ],
            axis=1,
        )
        rows = np.concatenate([prompts, states.astype(np.float64)], axis=1)
        uniq, inverse = np.unique(rows, axis=0, return_inverse=True)
        logp = model.logprob(
            uniq[:, : model.prompt_len], uniq[:, model.prompt_len :].astype(np.int64)
        )[inverse]
        return float(np.mean(logp)) if log_mean else float(np.mean(np.exp(logp)))

    times, inits, states = draw_batch()
    visited = [np.array([current[s] for s in unique_symbols])]
    scores = [score(current, times, inits, states)]
    accepted = np.zeros(steps, dtype=bool)
    for i in range(steps):
        times, inits, states = draw_batch()
        noise = rng.normal(0.0, 1.0, size=len(std)) * std
        proposal = {
            s: float(np.exp(np.log(current[s]) + noise[j]))
            for j, s in enumerate(unique_symbols)
        }
        old = score(current, times, inits, states)
        new = score(proposal, times, inits, states)
        if new > old:
            current = proposal
            accepted[i] = True
            scores.append(new)
        else:
            scores.append(old)
        visited.append(np.array([current[s] for s in unique_symbols]))
    return InferenceChain(
        unique_symbols,
        np.array(visited),
        accepted,
        np.array(scores),
        {s: float(v) for s, v in zip(unique_symbols, std)},
        seed,
    )


def sample_trajectories_iterative(
    model: METModel,
    net: ReactionNetwork,
    rates,
    x0,
    delta_t: float,
    n_steps: int,
    n_traj: int,
    seed: int,
) -> TrajectoryEnsemble:
    """Trajectory ensemble by chaining one-step prompts.

    Step k feeds (rates, state at step k-1, delta_t) back into the model
    and samples one state per trajectory; all trajectories advance in one
    batched pass.  Per-trajectory uniforms come from (seed, trajectory)
    streams, so the ensemble is independent of batching or worker count.
    """
    x0 = np.asarray(x0, dtype=np.int64)
    grid = delta_t * np.arange(n_steps + 1)
    states = np.zeros((n_traj, n_steps + 1, net.n_species), dtype=np.int64)
    states[:, 0, :] = x0
    uniforms = np.stack(
        [stream(seed, 0x4954, k).random((n_steps, net.n_species)) for k in range(n_traj)]
    )
    logr = np.array([np.log(float(rates[r.rate_symbol])) for r in net.reactions])
    for step in range(1, n_steps + 1):
        prev = states[:, step - 1, :]
        prompts = np.concatenate(
            [
                np.repeat(logr[None, :], n_traj, axis=0),
                prev.astype(np.float64),
                np.full((n_traj, 1), delta_t),
            ],
            axis=1,
        )
        states[:, step, :] = model.sample_with_uniforms(prompts, uniforms[:, step - 1, :])
    return TrajectoryEnsemble(grid, states, seed=seed, method="MET")
