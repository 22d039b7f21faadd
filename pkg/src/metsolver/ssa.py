"""Gillespie direct-method simulation on the truncated state box.

Jumps that would leave [0, bounds] are masked out of the propensity sum,
mirroring the generator's reflecting truncation, so simulated ensembles
target exactly the same process as the exact solver.

Each trajectory runs on its own RNG stream keyed by (seed, trajectory
index); results are therefore identical no matter how trajectories are
distributed over workers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import TimeIndexOutOfRange
from .model import ReactionNetwork
from .util import parallel_map, stream

_MAGIC = b"METTRAJ1"


@dataclass
class TrajectoryEnsemble:
    """Sampled state paths on a shared time grid.

    states[k, i] is trajectory k at grid[i]; method is "SSA", "MET", or
    "RNN" depending on the generator.
    """

    grid: np.ndarray  # (T,)
    states: np.ndarray  # (n_traj, T, n_species)
    seed: int
    method: str = "SSA"

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        self.states = np.asarray(self.states, dtype=np.int64)
        if self.grid.ndim != 1 or len(self.grid) < 1:
            raise ValueError("time grid must be non-empty and 1-d")
        if np.any(np.diff(self.grid) <= 0) and len(self.grid) > 1:
            raise ValueError("time grid must be strictly increasing")

    @property
    def n_traj(self) -> int:
        return self.states.shape[0]

    def marginal_at(self, time_index: int, species: int, support: int | None = None) -> np.ndarray:
        """Empirical distribution of one species at a grid time."""
        if not -len(self.grid) <= time_index < len(self.grid):
            raise TimeIndexOutOfRange(f"time index {time_index} outside 0..{len(self.grid) - 1}")
        counts = self.states[:, time_index, species]
        hi = int(counts.max()) if support is None else support
        freq = np.bincount(counts, minlength=hi + 1).astype(np.float64)
        return freq / freq.sum()

    def mean_std(self) -> tuple[np.ndarray, np.ndarray]:
        """Ensemble mean and std per time point and species, shape (T, N)."""
        x = self.states.astype(np.float64)
        return x.mean(axis=0), x.std(axis=0)

    def save(self, path):
        header = struct.pack(
            "<8siqqqq8s",
            _MAGIC,
            1,
            self.n_traj,
            len(self.grid),
            self.states.shape[2],
            int(self.seed),
            self.method.encode("utf-8")[:8].ljust(8, b"\0"),
        )
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(self.grid.astype("<f8").tobytes())
            fh.write(np.ascontiguousarray(self.states, dtype="<i4").tobytes())

    @classmethod
    def load(cls, path) -> "TrajectoryEnsemble":
        with open(path, "rb") as fh:
            blob = fh.read()
        magic, _version, n_traj, n_times, n_species, seed, method = struct.unpack_from(
            "<8siqqqq8s", blob, 0
        )
        if magic != _MAGIC:
            raise ValueError(f"{path}: not an ensemble file")
        off = struct.calcsize("<8siqqqq8s")
        grid = np.frombuffer(blob, dtype="<f8", count=n_times, offset=off)
        off += 8 * n_times
        states = np.frombuffer(blob, dtype="<i4", count=n_traj * n_times * n_species, offset=off)
        return cls(
            grid.copy(),
            states.reshape(n_traj, n_times, n_species).astype(np.int64),
            seed=seed,
            method=method.rstrip(b"\0").decode("utf-8"),
        )

    def to_csv(self, path, names=None):
        names = names or [f"x{i}" for i in range(self.states.shape[2])]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("trajectory,time," + ",".join(names) + "\n")
            for k in range(self.n_traj):
                for i, t in enumerate(self.grid):
                    row = ",".join(str(int(v)) for v in self.states[k, i])
                    fh.write(f"{k},{float(t)!r},{row}\n")


def _simulate_one(net: ReactionNetwork, rates, x0, grid, rng) -> np.ndarray:
    # Per-reaction constants unpacked into plain Python structures; the
    # event loop below is pure scalar work.
    bounds = [int(b) for b in net.bounds]
    ks = [float(rates[r.rate_symbol]) for r in net.reactions]
    reqs = [
        [(net.species_index(n), c) for n, c in r.reactants.items()]
        for r in net.reactions
    ]
    moves = [
        [(i, int(d)) for i, d in enumerate(r.jump) if d != 0] for r in net.reactions
    ]
    M = len(ks)

    out = np.empty((len(grid), net.n_species), dtype=np.int64)
    x = [int(v) for v in x0]
    t = 0.0
    gi = 0
    n_grid = len(grid)
    a = [0.0] * M
    while gi < n_grid:
        a0 = 0.0
        for j in range(M):
            aj = ks[j]
            for idx, need in reqs[j]:
                xi = x[idx]
                if xi < need:
                    aj = 0.0
                    break
                for k in range(need):
                    aj *= xi - k
            if aj > 0.0:
                for idx, d in moves[j]:
                    xt = x[idx] + d
                    if xt < 0 or xt > bounds[idx]:
                        aj = 0.0
                        break
            a[j] = aj
            a0 += aj
        if a0 <= 0.0:
            while gi < n_grid:
                out[gi] = x
                gi += 1
            break
        dt = rng.exponential(1.0 / a0)
        while gi < n_grid and grid[gi] < t + dt:
            out[gi] = x
            gi += 1
        t += dt
        u = rng.uniform() * a0
        acc = 0.0
        j = M - 1
        for jj in range(M):
            acc += a[jj]
            if u < acc:
                j = jj
                break
        for idx, d in moves[j]:
            x[idx] += d
    return out


def simulate(
    net: ReactionNetwork,
    rates,
    x0,
    grid,
    n_traj: int,
    seed: int,
    workers: int | None = None,
) -> TrajectoryEnsemble:
    """Direct-method ensemble recorded at grid times by last-event holding."""
    grid = np.asarray(grid, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.int64)
    if np.any(x0 < 0) or np.any(x0 > net.bounds):
        raise ValueError("x0 outside bounds")
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")

    def run(k: int) -> np.ndarray:
        return _simulate_one(net, rates, x0, grid, stream(seed, k))

    paths = parallel_map(run, range(n_traj), workers=workers)
    return TrajectoryEnsemble(grid, np.stack(paths), seed=seed, method="SSA")
