"""Truncated state-space enumeration, the sparse generator, and exact evolution.

The generator T holds probability flow rates: T[target, source] is the
rate from source to target, diagonals make every column sum to zero.
Out-of-bound jumps are dropped entirely (reflecting truncation), so
probability is conserved exactly on the box.

evolve_exact computes exp(t*T) @ p by uniformization: with L >= max exit
rate, B = I + T/L is column-stochastic and

    exp(t*T) p = sum_k  Poisson(k; L*t) * B^k p

summed until the Poisson tail is negligible.  This is the ground-truth
oracle for every other solution path in the package.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import gammaln

from .errors import MalformedLine, SpaceTooLarge, UnstableStep
from .model import ReactionNetwork, propensity_matrix

EPS_FLOOR = 1e-30  # kernel results are floored here before any downstream log

DEFAULT_STATE_CAP = 2**24


class TruncatedStateSpace:
    """Bijection between state vectors in [0, bounds] and flat indices.

    Mixed-radix encoding with species 0 varying fastest:
    index = sum_i x_i * prod_{k<i} (U_k + 1).
    """

    def __init__(self, bounds):
        self.bounds = np.asarray(bounds, dtype=np.int64)
        self.radix = self.bounds + 1
        self.strides = np.concatenate(([1], np.cumprod(self.radix[:-1])))
        self.size = int(np.prod(self.radix))

    @classmethod
    def for_network(cls, net: ReactionNetwork, bounds=None) -> "TruncatedStateSpace":
        return cls(net.bounds if bounds is None else bounds)

    def encode(self, states) -> np.ndarray:
        """Flat indices for one state vector or a batch (last axis = species)."""
        states = np.asarray(states, dtype=np.int64)
        return states @ self.strides

    def decode(self, idx) -> np.ndarray:
        """State vectors for flat indices; inverse of encode."""
        idx = np.asarray(idx, dtype=np.int64)
        out = np.empty(idx.shape + (len(self.radix),), dtype=np.int64)
        rem = idx
        for i, r in enumerate(self.radix):
            out[..., i] = rem % r
            rem = rem // r
        return out

    def all_states(self) -> np.ndarray:
        """Every state in enumeration order, shape (size, n_species)."""
        return self.decode(np.arange(self.size))

    def contains(self, states) -> np.ndarray:
        states = np.asarray(states, dtype=np.int64)
        return np.all((states >= 0) & (states <= self.bounds), axis=-1)


@dataclass(frozen=True)
class GeneratorMatrix:
    """Sparse transition-rate operator on a truncated space."""

    matrix: sp.csc_matrix  # T[target, source]
    space: TruncatedStateSpace

    @property
    def size(self) -> int:
        return self.space.size

    def uniformization_rate(self) -> float:
        return float(-self.matrix.diagonal().min())


@dataclass
class ProbabilityVector:
    """Dense probability over flat indices with the time it refers to."""

    values: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if np.any(v < -1e-12):
            raise ValueError("negative probability entries")
        if abs(v.sum() - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {v.sum()!r}, not 1")
        self.values = np.maximum(v, 0.0)

    @classmethod
    def delta(cls, space: TruncatedStateSpace, x0, time: float = 0.0) -> "ProbabilityVector":
        v = np.zeros(space.size)
        v[int(space.encode(np.asarray(x0)))] = 1.0
        return cls(v, time)

    def marginal(self, space: TruncatedStateSpace, species: int) -> np.ndarray:
        """Marginal distribution of one species, length bounds[species]+1."""
        states = space.all_states()
        out = np.zeros(space.bounds[species] + 1)
        np.add.at(out, states[:, species], self.values)
        return out

    def joint2d(self, space: TruncatedStateSpace, i: int, j: int) -> np.ndarray:
        """Joint distribution of a species pair, shape (U_i+1, U_j+1)."""
        states = space.all_states()
        out = np.zeros((space.bounds[i] + 1, space.bounds[j] + 1))
        np.add.at(out, (states[:, i], states[:, j]), self.values)
        return out

    def mean_std(self, space: TruncatedStateSpace) -> tuple[np.ndarray, np.ndarray]:
        states = space.all_states().astype(np.float64)
        mean = self.values @ states
        var = self.values @ (states - mean) ** 2
        return mean, np.sqrt(np.maximum(var, 0.0))

    def to_csv(self, path, space: TruncatedStateSpace, names=None):
        states = space.all_states()
        names = names or [f"x{i}" for i in range(states.shape[1])]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("index," + ",".join(names) + ",probability\n")
            for i in range(space.size):
                row = ",".join(str(int(s)) for s in states[i])
                fh.write(f"{i},{row},{float(self.values[i])!r}\n")

    @classmethod
    def from_csv(cls, path, time: float = 0.0) -> "ProbabilityVector":
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        idx = rows[:, 0].astype(np.int64)
        values = np.zeros(len(rows))
        values[idx] = rows[:, -1]
        return cls(values, time)


def build_generator(
    net: ReactionNetwork,
    rates,
    bounds=None,
    cap: int = DEFAULT_STATE_CAP,
) -> GeneratorMatrix:
    """Assemble the sparse generator over the truncated enumeration.

    For every state mu and reaction j whose target xi = mu + jump_j stays
    in bounds, T[xi, mu] += propensity(mu, j); diagonals balance columns
    to zero.  Raises SpaceTooLarge past `cap` states.
    """
    space = TruncatedStateSpace.for_network(net, bounds)
    if space.size > cap:
        raise SpaceTooLarge(
            f"{space.size} states exceed the cap of {cap}; "
            "use the simulation or neural paths instead"
        )
    states = space.all_states()
    props = propensity_matrix(net, rates, states)

    rows, cols, vals = [], [], []
    exit_rate = np.zeros(space.size)
    for j, reaction in enumerate(net.reactions):
        targets = states + reaction.jump
        ok = np.all((targets >= 0) & (targets <= space.bounds), axis=1)
        a = props[:, j]
        live = ok & (a > 0)
        rows.append(space.encode(targets[live]))
        cols.append(np.flatnonzero(live))
        vals.append(a[live])
        exit_rate[live] += a[live]
    rows.append(np.arange(space.size))
    cols.append(np.arange(space.size))
    vals.append(-exit_rate)

    matrix = sp.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(space.size, space.size),
    )
    return GeneratorMatrix(matrix, space)


def evolve_exact(gen: GeneratorMatrix, p0: ProbabilityVector, t: float, tail: float = 1e-13) -> ProbabilityVector:
    """Propagate p0 by time t >= 0 under the generator (uniformization)."""
    if t < 0:
        raise ValueError("t must be >= 0")
    if t == 0.0:
        return ProbabilityVector(p0.values.copy(), p0.time)
    lam = gen.uniformization_rate()
    if lam == 0.0:
        return ProbabilityVector(p0.values.copy(), p0.time + t)
    a = lam * t
    B = sp.eye(gen.size, format="csr") + gen.matrix.tocsr() / lam

    # Poisson(k; a) weights accumulated in log space to survive large a.
    out = np.zeros(gen.size)
    v = p0.values.copy()
    accumulated = 0.0
    k = 0
    log_a = np.log(a)
    while accumulated < 1.0 - tail:
        logw = -a + k * log_a - gammaln(k + 1)
        if logw > -745.0:  # exp underflows below this
            w = np.exp(logw)
            out += w * v
            accumulated += w
        v = B @ v
        k += 1
        if k > a + 60 * np.sqrt(a) + 60:
            break
    return ProbabilityVector(out / out.sum(), p0.time + t)


def stationary_check(gen: GeneratorMatrix, p: ProbabilityVector, atol: float = 1e-9) -> bool:
    return bool(np.max(np.abs(gen.matrix @ p.values)) < atol)


def _kernel_values(net, rates, dt, states, logp_batch):
    """First-order kernel at a batch of states.

    (I + dt*T) applied pointwise:  p(x) + dt * [ sum_j W_j(x - nu_j) p(x - nu_j)
    - sum_j W_j(x) p(x) ], with out-of-bound predecessors skipped and
    out-of-bound targets masked from the exit sum.
    """
    states = np.asarray(states, dtype=np.int64)
    n, M = states.shape[0], net.n_reactions
    bounds = net.bounds

    # Gather x and all its in-bounds predecessors, dedupe for one batched
    # log-probability evaluation.
    preds = states[:, None, :] - net.jump_matrix()[None, :, :]
    pred_ok = np.all((preds >= 0) & (preds <= bounds), axis=2)
    stack = np.concatenate([states, preds.reshape(n * M, -1)], axis=0)
    uniq, inverse = np.unique(stack, axis=0, return_inverse=True)
    keep = np.all((uniq >= 0) & (uniq <= bounds), axis=1)
    logp_vals = np.full(uniq.shape[0], -np.inf)
    if np.any(keep):
        logp_vals[keep] = logp_batch(uniq[keep])
    p_all = np.exp(logp_vals)[inverse]
    p_x = p_all[:n]
    p_pred = p_all[n:].reshape(n, M)

    # Stability guard over x and its predecessors.
    a_x = propensity_matrix(net, rates, states)
    targets = states[:, None, :] + net.jump_matrix()[None, :, :]
    target_ok = np.all((targets >= 0) & (targets <= bounds), axis=2)
    exit_x = np.sum(a_x * target_ok, axis=1)
    total = exit_x.copy()
    for j in range(M):
        if np.any(pred_ok[:, j]):
            a_pred = propensity_matrix(net, rates, preds[pred_ok[:, j], j, :])
            t_pred = preds[pred_ok[:, j], j, :][:, None, :] + net.jump_matrix()[None, :, :]
            ok = np.all((t_pred >= 0) & (t_pred <= bounds), axis=2)
            total[pred_ok[:, j]] = np.maximum(
                total[pred_ok[:, j]], np.sum(a_pred * ok, axis=1)
            )
    if dt > 0 and np.any(dt * total >= 1.0):
        worst = float(np.max(total))
        raise UnstableStep(
            f"dt={dt} too large: dt * total propensity reaches {dt * worst:.3f} >= 1"
        )

    inflow = np.zeros(n)
    for j, reaction in enumerate(net.reactions):
        ok = pred_ok[:, j]
        if not np.any(ok):
            continue
        w = propensity_matrix(net, rates, preds[ok, j, :])[:, j]
        inflow[ok] += w * p_pred[ok, j]
    result = p_x + dt * (inflow - exit_x * p_x)
    return np.maximum(result, EPS_FLOOR)


def apply_kernel_at_state(net: ReactionNetwork, rates, dt: float, logp, x) -> float:
    """One first-order transition-kernel step evaluated at a single state.

    `logp` maps a state vector to its log-probability.  Raises UnstableStep
    when dt times the local total propensity reaches 1.
    """
    def batch(states):
        return np.array([logp(s) for s in states], dtype=np.float64)

    return float(_kernel_values(net, rates, dt, np.asarray(x)[None, :], batch)[0])


def apply_kernel_batch(net: ReactionNetwork, rates, dt: float, logp_batch, states) -> np.ndarray:
    """Vectorized kernel step; `logp_batch` maps (k, N) states to k log-probs."""
    return _kernel_values(net, rates, dt, states, logp_batch)


def apply_kernel_exact(
    net: ReactionNetwork, rates, dt: float, logp_batch, states, bounds=None
) -> np.ndarray:
    """Exact exp(dt*T) kernel step at the given states (oracle-grade, slower).

    Evaluates logp over the full enumeration, so only viable for spaces the
    generator can hold.
    """
    gen = build_generator(net, rates, bounds)
    p = np.exp(logp_batch(gen.space.all_states()))
    total = p.sum()
    evolved = evolve_exact(gen, ProbabilityVector(p / total), dt).values * total
    idx = gen.space.encode(np.asarray(states, dtype=np.int64))
    return np.maximum(evolved[idx], EPS_FLOOR)
