"""Autoregressive GRU reward models and their variational time-stepping.

A reward model factorizes the state joint distribution species by species
(declaration order): p(x) = prod_i p(x_i | x_<i), each conditional a
masked softmax over {0..U_i}.  A chain of models is trained along the
time grid t, t+dt, ...: the model at t+dt minimizes the Kullback-Leibler
divergence to the one-step kernel applied to the frozen model at t, via
the score-function gradient with a batch-mean baseline.  Checkpoints at
requested save times form a RewardModelSet, the reward source for the
transformer's reinforcement learning.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diff
from .checkpoint import load_checkpoint, save_checkpoint
from .diff import ParameterStore, Schedule, Tensor, adamw_step, backward, no_grad
from .errors import CheckpointError, DivergedLoss
from .model import ReactionNetwork, parse_model, serialize_model
from .statespace import apply_kernel_batch
from .util import init_key, rates_key, stream


@dataclass(frozen=True)
class RewardHyper:
    """Per-time-step training controls (Gillespie-free, simulation-free)."""

    width: int = 32
    batch: int = 1000
    epochs: int = 100
    lr: float = 1e-3
    pretrain_lr: float = 0.02
    pretrain_tol: float = 1e-4
    pretrain_max_steps: int = 50_000
    diverge_threshold: float = 1e3
    diverge_patience: int = 10
    seed: int = 0


class RewardModel:
    """One-hidden-layer GRU over the species sequence with a shared softmax head."""

    KIND = "reward-gru"

    def __init__(self, net: ReactionNetwork, width: int = 32, seed: int = 0):
        self.net = net
        self.width = width
        self.bounds = np.asarray(net.bounds, dtype=np.int64)
        self.n_species = net.n_species
        self.vocab = int(self.bounds.max()) + 1
        # species with tighter bounds never emit counts past their own bound
        self.invalid = np.zeros((self.n_species, self.vocab), dtype=bool)
        for i, b in enumerate(self.bounds):
            self.invalid[i, b + 1 :] = True

        rng = stream(seed, 0x4752)
        w, v = width, self.vocab
        lim = 1.0 / np.sqrt(w + v)
        self.store = ParameterStore()
        for name in ("Wz", "Wr", "Wh"):
            self.store.add(name, rng.uniform(-lim, lim, size=(w + v, w)))
        for name in ("bz", "br", "bh"):
            self.store.add(name, np.zeros(w))
        self.store.add("Wo", rng.uniform(-1.0 / np.sqrt(w), 1.0 / np.sqrt(w), size=(w, v)))
        self.store.add("bo", np.zeros(v))

    # --- forward -------------------------------------------------------------

    def _step(self, h: Tensor, inp: Tensor) -> Tensor:
        """One GRU cell update; h (B, W), inp (B, V) one-hot of the last count."""
        s = self.store
        cat = diff.concat([h, inp], axis=1)
        z = diff.sigmoid(diff.add(diff.matmul(cat, s["Wz"]), s["bz"]))
        r = diff.sigmoid(diff.add(diff.matmul(cat, s["Wr"]), s["br"]))
        cat2 = diff.concat([diff.mul(r, h), inp], axis=1)
        hh = diff.tanh(diff.add(diff.matmul(cat2, s["Wh"]), s["bh"]))
        one = Tensor(np.float64(1.0))
        return diff.add(diff.mul(z, hh), diff.mul(diff.sub(one, z), h))

    def _head(self, h: Tensor, position: int) -> Tensor:
        logits = diff.add(diff.matmul(h, self.store["Wo"]), self.store["bo"])
        if self.invalid[position].any():
            logits = diff.masked_fill(logits, self.invalid[position], -np.inf)
        return diff.log_softmax(logits)

    def _onehot(self, values: np.ndarray) -> Tensor:
        out = np.zeros((len(values), self.vocab))
        out[np.arange(len(values)), values] = 1.0
        return Tensor(out)

    def logprob_tensor(self, states: np.ndarray) -> Tensor:
        """Tape-recorded log p(x) for a batch of states, shape (B,)."""
        states = np.asarray(states, dtype=np.int64)
        B = states.shape[0]
        h = Tensor(np.zeros((B, self.width)))
        inp = Tensor(np.zeros((B, self.vocab)))
        total = None
        for i in range(self.n_species):
            h = self._step(h, inp)
            logp_i = diff.gather_log_prob(self._head(h, i), states[:, i])
            total = logp_i if total is None else diff.add(total, logp_i)
            if i + 1 < self.n_species:
                inp = self._onehot(states[:, i])
        return total

    def logprob(self, states: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.logprob_tensor(np.atleast_2d(states)).data

    def conditionals(self, prefix: np.ndarray) -> np.ndarray:
        """p(x_i | prefix) for i = prefix length; prefix shape (B, i)."""
        prefix = np.atleast_2d(np.asarray(prefix, dtype=np.int64))
        B, i = prefix.shape
        with no_grad():
            h = Tensor(np.zeros((B, self.width)))
            inp = Tensor(np.zeros((B, self.vocab)))
            for k in range(i):
                h = self._step(h, inp)
                inp = self._onehot(prefix[:, k])
            h = self._step(h, inp)
            return np.exp(self._head(h, i).data)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Ancestral samples; prefixes deduped so cost scales with support."""
        prefixes = np.zeros((1, 0), dtype=np.int64)
        counts = np.array([n], dtype=np.int64)
        for i in range(self.n_species):
            cond = self.conditionals(prefixes)
            new_p, new_c = [], []
            for k in range(len(prefixes)):
                draws = rng.multinomial(counts[k], cond[k])
                for v in np.flatnonzero(draws):
                    new_p.append(np.append(prefixes[k], v))
                    new_c.append(draws[v])
            prefixes = np.array(new_p, dtype=np.int64)
            counts = np.array(new_c, dtype=np.int64)
        samples = np.repeat(prefixes, counts, axis=0)
        return samples[rng.permutation(len(samples))]

    # --- persistence -----------------------------------------------------------

    def config(self) -> dict:
        return {
            "width": self.width,
            "n_species": self.n_species,
            "vocab": self.vocab,
            "bounds": [int(b) for b in self.bounds],
            "species": list(self.net.species_names),
        }

    def save(self, path, metadata: dict) -> str:
        meta = dict(metadata)
        meta["model_kind"] = self.KIND
        meta["config"] = self.config()
        meta["network"] = serialize_model(self.net)
        return save_checkpoint(path, self.store.state_arrays(), meta)

    @classmethod
    def load(cls, path) -> tuple["RewardModel", dict]:
        arrays, meta = load_checkpoint(path)
        if meta.get("model_kind") != cls.KIND:
            raise CheckpointError(f"{path}: not a reward model checkpoint")
        net = parse_model(meta["network"])
        model = cls(net, width=meta["config"]["width"])
        model.store.load_arrays(arrays)
        return model, meta

    def copy_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.store.state_arrays().items()}


def rm_logprob(model: RewardModel, x) -> float:
    """Log-probability of a single state under the model."""
    return float(model.logprob(np.asarray(x, dtype=np.int64)[None, :])[0])


def rm_sample(model: RewardModel, n: int, seed: int) -> np.ndarray:
    """n ancestral samples; identical sets for identical seeds."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return model.sample(n, stream(seed, 0x5A11))


# --- the model set -----------------------------------------------------------


@dataclass
class RewardElement:
    rates: dict
    x0: list
    t: float
    path: str | None = None
    sha256: str | None = None

    def key(self) -> tuple:
        return (rates_key(self.rates), init_key(self.x0), round(self.t, 9))


@dataclass
class RewardModelSet:
    """Keyed collection of reward checkpoints plus the training grid metadata."""

    dt: float
    elements: list[RewardElement] = field(default_factory=list)
    _models: dict = field(default_factory=dict, repr=False)

    def add(self, element: RewardElement, model: RewardModel | None = None):
        if any(e.key() == element.key() for e in self.elements):
            raise ValueError(f"duplicate reward element {element.key()}")
        if self.elements:
            prev = [e for e in self.elements if e.key()[:2] == element.key()[:2]]
            if prev and element.t <= max(e.t for e in prev):
                raise ValueError("save times must be strictly increasing per (rates, init)")
        self.elements.append(element)
        if model is not None:
            self._models[element.key()] = model

    def merge(self, other: "RewardModelSet"):
        if abs(other.dt - self.dt) > 1e-12:
            raise ValueError("cannot merge sets with different dt")
        for e in other.elements:
            self.add(e, other._models.get(e.key()))

    def model_for(self, element: RewardElement) -> RewardModel:
        key = element.key()
        if key not in self._models:
            if element.path is None:
                raise CheckpointError(f"element {key} has no checkpoint path")
            model, _ = RewardModel.load(element.path)
            self._models[key] = model
        return self._models[key]

    def save(self, directory) -> Path:
        """Write any in-memory models plus the JSONL manifest."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = directory / "manifest.jsonl"
        with open(manifest, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"kind": "meta", "dt": self.dt, "format": "METCKPT1"}) + "\n")
            for i, e in enumerate(self.elements):
                if e.path is None:
                    model = self._models[e.key()]
                    path = directory / f"reward_{i:04d}.ckpt"
                    e.sha256 = model.save(
                        path, {"rates": e.rates, "x0": e.x0, "t": e.t, "dt": self.dt}
                    )
                    e.path = str(path)
                rel = os.path.relpath(Path(e.path).resolve(), directory.resolve())
                fh.write(
                    json.dumps(
                        {
                            "kind": "checkpoint",
                            "rates": e.rates,
                            "init": e.x0,
                            "t": e.t,
                            "path": rel,
                            "sha256": e.sha256,
                        }
                    )
                    + "\n"
                )
        return manifest

    @classmethod
    def load(cls, manifest_path) -> "RewardModelSet":
        manifest_path = Path(manifest_path)
        if manifest_path.is_dir():
            manifest_path = manifest_path / "manifest.jsonl"
        if not manifest_path.exists():
            raise CheckpointError(f"missing reward-set manifest {manifest_path}")
        records = [json.loads(line) for line in manifest_path.read_text().splitlines() if line]
        meta = next(r for r in records if r.get("kind") == "meta")
        out = cls(dt=float(meta["dt"]))
        base = manifest_path.parent
        for r in records:
            if r.get("kind") != "checkpoint":
                continue
            path = Path(r["path"])
            if not path.is_absolute():
                path = base / path
            if not path.exists():
                raise CheckpointError(f"manifest points at missing checkpoint {path}")
            out.add(RewardElement(r["rates"], r["init"], float(r["t"]), str(path), r.get("sha256")))
        return out

    def prompt_stats(self, net: ReactionNetwork) -> dict:
        """Per-slot affine normalization of (log-rates, init, t) prompts."""
        rows = []
        for e in self.elements:
            logr = [np.log(float(e.rates[r.rate_symbol])) for r in net.reactions]
            rows.append(logr + [float(v) for v in e.x0] + [e.t + self.dt])
        rows = np.asarray(rows, dtype=np.float64)
        mean = rows.mean(axis=0)
        std = rows.std(axis=0)
        std[std < 1e-9] = 1.0
        return {"mean": mean.tolist(), "std": std.tolist()}


# --- training ----------------------------------------------------------------


def _pretrain_delta(model: RewardModel, x0: np.ndarray, hyper: RewardHyper):
    """Cross-entropy to the one-hot sequence until loss < pretrain_tol."""
    sched = Schedule(hyper.pretrain_lr, warmup_steps=0, decay="constant")
    row = np.asarray(x0, dtype=np.int64)[None, :]
    for step in range(1, hyper.pretrain_max_steps + 1):
        model.store.zero_grad()
        loss = diff.scale(model.logprob_tensor(row), -1.0)
        value = float(loss.data[0])
        if value < hyper.pretrain_tol:
            return
        backward(diff.sum_(loss))
        adamw_step(model.store, sched, step)
    raise DivergedLoss(
        f"delta pretraining stalled at loss {value:.2e} after {hyper.pretrain_max_steps} steps"
    )


def train_reward_set(
    net: ReactionNetwork,
    rates,
    x0,
    dt: float,
    t_final: float,
    save_times,
    hyper: RewardHyper = RewardHyper(),
    progress=None,
) -> RewardModelSet:
    """Train one (rates, x0) chain of reward models and checkpoint save_times.

    The chain starts from a delta distribution at x0, then repeatedly fits
    the model at t+dt to the kernel-stepped frozen model at t using the
    score-function estimator.  Raises UnstableStep if dt violates the
    kernel guard anywhere sampled, DivergedLoss if the loss estimate stays
    above the divergence threshold.
    """
    x0 = np.asarray(x0, dtype=np.int64)
    rates = {k: float(v) for k, v in dict(rates).items()}
    n_steps = int(round(t_final / dt))
    save_steps = {}
    for t in save_times:
        k = int(round(t / dt))
        if abs(k * dt - t) > 1e-6 * max(t, dt):
            raise ValueError(f"save time {t} is not a multiple of dt={dt}")
        save_steps[k] = float(t)

    model = RewardModel(net, width=hyper.width, seed=hyper.seed)
    _pretrain_delta(model, x0, hyper)

    out = RewardModelSet(dt=dt)

    def maybe_save(step_index: int):
        if step_index in save_steps:
            snap = RewardModel(net, width=hyper.width, seed=hyper.seed)
            snap.store.load_arrays(model.copy_arrays())
            element = RewardElement(rates, [int(v) for v in x0], save_steps[step_index])
            out.add(element, snap)

    maybe_save(0)
    rng = stream(hyper.seed, 0x7261)
    sched = Schedule(hyper.lr, warmup_steps=0, decay="constant")

    for k in range(1, n_steps + 1):
        frozen = RewardModel(net, width=hyper.width, seed=hyper.seed)
        frozen.store.load_arrays(model.copy_arrays())
        # optimizer state restarts with the new target
        model.store.reset_moments()

        cache: dict[bytes, float] = {}

        def ln_targets(states: np.ndarray) -> np.ndarray:
            missing = [s for s in states if s.tobytes() not in cache]
            if missing:
                stack = np.array(missing, dtype=np.int64)
                vals = apply_kernel_batch(
                    net, rates, dt, lambda xs: frozen.logprob(xs), stack
                )
                for s, v in zip(missing, np.log(vals)):
                    cache[s.tobytes()] = float(v)
            return np.array([cache[s.tobytes()] for s in states])

        bad_epochs = 0
        for epoch in range(hyper.epochs):
            samples = model.sample(hyper.batch, rng)
            states, counts = np.unique(samples, axis=0, return_counts=True)
            target = ln_targets(states)
            model.store.zero_grad()
            logp = model.logprob_tensor(states)
            gap = logp.data - target
            kl_estimate = float(counts @ gap) / hyper.batch
            baseline = kl_estimate  # batch mean of (ln p - ln target)
            weights = (gap - baseline) * counts / hyper.batch
            backward(diff.sum_(diff.mul(logp, Tensor(weights))))
            adamw_step(model.store, sched, epoch + 1)
            if not np.isfinite(kl_estimate) or kl_estimate > hyper.diverge_threshold:
                bad_epochs += 1
                if bad_epochs >= hyper.diverge_patience:
                    raise DivergedLoss(
                        f"loss estimate {kl_estimate:.3e} above "
                        f"{hyper.diverge_threshold} for {bad_epochs} epochs at step {k}"
                    )
            else:
                bad_epochs = 0
        if progress is not None:
            progress(k, n_steps, kl_estimate)
        maybe_save(k)
    return out


def _train_chain_worker(args) -> list[dict]:
    (net_text, rates, x0, dt, t_final, save_times, hyper_dict, chain_seed, out_dir, tag) = args
    net = parse_model(net_text)
    hyper = RewardHyper(**{**hyper_dict, "seed": chain_seed})
    ms = train_reward_set(net, rates, x0, dt, t_final, save_times, hyper)
    directory = Path(out_dir) / f"chain_{tag:04d}"
    ms.save(directory)
    return [
        {
            "rates": e.rates,
            "init": e.x0,
            "t": e.t,
            "path": str(e.path),
            "sha256": e.sha256,
        }
        for e in ms.elements
    ]


def train_reward_grid(
    net: ReactionNetwork,
    combos,
    dt: float,
    t_final: float,
    save_times,
    hyper: RewardHyper,
    out_dir,
    workers: int = 1,
) -> RewardModelSet:
    """Train independent (rates, x0) chains, fanning out to processes.

    combos is a sequence of (rates_dict, x0) pairs; chain i runs on seed
    stream (hyper.seed, i), so results do not depend on worker count.
    Checkpoints land under out_dir/chain_XXXX/, merged into one manifest.
    """
    out_dir = Path(out_dir)
    net_text = serialize_model(net)
    hyper_dict = {
        k: getattr(hyper, k)
        for k in ("width", "batch", "epochs", "lr", "pretrain_lr", "pretrain_tol",
                  "pretrain_max_steps", "diverge_threshold", "diverge_patience")
    }
    jobs = [
        (net_text, dict(rates), [int(v) for v in x0], dt, t_final, list(save_times),
         hyper_dict, int(np.random.SeedSequence((hyper.seed, i)).generate_state(1)[0]), str(out_dir), i)
        for i, (rates, x0) in enumerate(combos)
    ]
    if workers <= 1 or len(jobs) <= 1:
        results = [_train_chain_worker(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_train_chain_worker, jobs))

    merged = RewardModelSet(dt=dt)
    for records in results:
        for r in records:
            merged.add(
                RewardElement(r["rates"], r["init"], float(r["t"]), r["path"], r["sha256"])
            )
    merged.save(out_dir)
    return merged
