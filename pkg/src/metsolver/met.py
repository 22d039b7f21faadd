"""The prompt-conditioned transformer solver and its reinforcement training.

A query prompt [log rates.., initial state.., time] is projected by a
one-layer perceptron to a fixed-length vector, mapped row-wise into the
embedding space, and concatenated with the embedded state tokens.  A stack
of masked multi-head attention blocks (pre-norm, feed-forward sublayers)
reads the combined sequence; the LM head emits one conditional per state
position, so the joint is exactly normalized by construction and sampling
is ancestral.

Training is reinforcement learning with model feedback: states drawn from
the current model are scored by the one-step kernel applied to a frozen
reward model, and the score-function gradient with a batch-mean baseline
pushes the model toward the kernel-stepped distribution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diff
from .checkpoint import load_checkpoint, save_checkpoint
from .diff import ParameterStore, Schedule, Tensor, adamw_step, backward, no_grad
from .errors import CheckpointError, DivergedLoss, NonPositiveRate
from .model import ReactionNetwork, parse_model, serialize_model
from .reward import RewardModelSet
from .statespace import apply_kernel_batch
from .util import stream


def build_prompt(net: ReactionNetwork, rates, x0, t: float) -> np.ndarray:
    """Raw prompt vector [log rate_1..M, x0_1..N, t], length M+N+1."""
    if t < 0:
        raise ValueError("prompt time must be >= 0")
    logr = []
    for r in net.reactions:
        v = float(rates[r.rate_symbol])
        if not np.isfinite(v) or v <= 0:
            raise NonPositiveRate(f"rate {r.rate_symbol} = {v}")
        logr.append(np.log(v))
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    if x0.shape[0] != net.n_species:
        raise ValueError("x0 length mismatch")
    return np.concatenate([logr, x0, [float(t)]])


@dataclass(frozen=True)
class METConfig:
    """Architecture knobs.

    d_ff counts feed-forward neurons in the conventional 4x-expansion
    unit, so each block's hidden width is d_ff / 4; d_k = d_v = d_emb / h.
    """

    d_emb: int = 64
    d_ff: int = 1024
    d_l: int = 8
    h: int = 8
    d_p: int = 16

    def __post_init__(self):
        if self.d_emb % self.h != 0:
            raise ValueError("d_emb must be divisible by h")
        if self.d_p < 1:
            raise ValueError("d_p must be >= 1")
        if self.d_ff % 4 != 0:
            raise ValueError("d_ff must be a multiple of 4")

    @property
    def d_k(self) -> int:
        return self.d_emb // self.h

    @property
    def ff_hidden(self) -> int:
        return self.d_ff // 4

    def to_dict(self) -> dict:
        return {"d_emb": self.d_emb, "d_ff": self.d_ff, "d_l": self.d_l, "h": self.h, "d_p": self.d_p}


def _sinusoidal(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return pe


class METModel:
    """Decoder over [prompt-block | state-block] with strictly causal masking."""

    KIND = "met-transformer"

    def __init__(
        self,
        net: ReactionNetwork,
        config: METConfig = METConfig(),
        seed: int = 0,
        normalization: dict | None = None,
    ):
        self.net = net
        self.config = config
        self.bounds = np.asarray(net.bounds, dtype=np.int64)
        self.n_species = net.n_species
        self.vocab = int(self.bounds.max()) + 1
        self.prompt_len = net.n_reactions + net.n_species + 1
        self.invalid = np.zeros((self.n_species, self.vocab), dtype=bool)
        for i, b in enumerate(self.bounds):
            self.invalid[i, b + 1 :] = True
        if normalization is None:
            normalization = {"mean": [0.0] * self.prompt_len, "std": [1.0] * self.prompt_len}
        self.norm_mean = np.asarray(normalization["mean"], dtype=np.float64)
        self.norm_std = np.asarray(normalization["std"], dtype=np.float64)
        self.seed = seed

        c = config
        rng = stream(seed, 0x4D45)
        self.store = ParameterStore()
        add = self.store.add

        def init(*shape):
            return rng.normal(0.0, 0.02, size=shape)

        add("embed", init(self.vocab, c.d_emb))
        add("prompt_w", init(self.prompt_len, c.d_p))
        add("prompt_b", np.zeros(c.d_p))
        add("pscale", init(c.d_p, c.d_emb))
        add("pbias", np.zeros((c.d_p, c.d_emb)))
        for l in range(c.d_l):
            add(f"l{l}.ln1_g", np.ones(c.d_emb))
            add(f"l{l}.ln1_b", np.zeros(c.d_emb))
            for nm in ("wq", "wk", "wv", "wo"):
                add(f"l{l}.{nm}", init(c.d_emb, c.d_emb))
                add(f"l{l}.{nm}_b", np.zeros(c.d_emb))
            add(f"l{l}.ln2_g", np.ones(c.d_emb))
            add(f"l{l}.ln2_b", np.zeros(c.d_emb))
            add(f"l{l}.ff1", init(c.d_emb, c.ff_hidden))
            add(f"l{l}.ff1_b", np.zeros(c.ff_hidden))
            add(f"l{l}.ff2", init(c.ff_hidden, c.d_emb))
            add(f"l{l}.ff2_b", np.zeros(c.d_emb))
        add("lnf_g", np.ones(c.d_emb))
        add("lnf_b", np.zeros(c.d_emb))
        add("head_w", init(c.d_emb, self.vocab))
        add("head_b", np.zeros(self.vocab))

        self._posenc = _sinusoidal(c.d_p + self.n_species, c.d_emb)

    # --- forward ---------------------------------------------------------------

    def _forward_logits(self, prompts: np.ndarray, states: np.ndarray) -> Tensor:
        """Logit rows for a batch; prompts (B, P) float, states (B, n) int.

        Returns logits at every sequence position, shape (B, d_p+n, vocab);
        the conditional for state position i lives at sequence index
        d_p - 1 + i.
        """
        c = self.config
        s = self.store
        B, n = states.shape
        seq = c.d_p + n

        raw = (prompts - self.norm_mean) / self.norm_std
        p_vec = diff.tanh(diff.add(diff.matmul(Tensor(raw), s["prompt_w"]), s["prompt_b"]))
        rows = diff.reshape(p_vec, (B, c.d_p, 1))
        y = diff.add(diff.mul(rows, s["pscale"]), s["pbias"])  # (B, d_p, d)
        if n > 0:
            x = diff.embedding(s["embed"], states)
            z = diff.concat([y, x], axis=1)
        else:
            z = y
        z = diff.add(z, Tensor(self._posenc[:seq]))

        mask = np.triu(np.ones((seq, seq), dtype=bool), k=1)
        inv_sqrt = 1.0 / np.sqrt(c.d_k)
        for l in range(c.d_l):
            xn = diff.layer_norm(z, s[f"l{l}.ln1_g"], s[f"l{l}.ln1_b"])

            def heads(name):
                proj = diff.add(diff.matmul(xn, s[f"l{l}.{name}"]), s[f"l{l}.{name}_b"])
                return diff.swapaxes(diff.reshape(proj, (B, seq, c.h, c.d_k)), 1, 2)

            q, k, v = heads("wq"), heads("wk"), heads("wv")
            scores = diff.scale(diff.matmul(q, diff.swapaxes(k, 2, 3)), inv_sqrt)
            att = diff.softmax(diff.masked_fill(scores, mask, -np.inf))
            mixed = diff.reshape(diff.swapaxes(diff.matmul(att, v), 1, 2), (B, seq, c.d_emb))
            z = diff.add(z, diff.add(diff.matmul(mixed, s[f"l{l}.wo"]), s[f"l{l}.wo_b"]))

            xn = diff.layer_norm(z, s[f"l{l}.ln2_g"], s[f"l{l}.ln2_b"])
            ff = diff.relu(diff.add(diff.matmul(xn, s[f"l{l}.ff1"]), s[f"l{l}.ff1_b"]))
            ff = diff.add(diff.matmul(ff, s[f"l{l}.ff2"]), s[f"l{l}.ff2_b"])
            z = diff.add(z, ff)

        z = diff.layer_norm(z, s["lnf_g"], s["lnf_b"])
        return diff.add(diff.matmul(z, s["head_w"]), s["head_b"])

    def logprob_tensor(self, prompts: np.ndarray, states: np.ndarray) -> Tensor:
        """Tape-recorded log-probability of full states, shape (B,)."""
        states = np.asarray(states, dtype=np.int64)
        logits = self._forward_logits(np.atleast_2d(prompts), states)
        c = self.config
        picked = diff.slice_(logits, (slice(None), slice(c.d_p - 1, c.d_p - 1 + self.n_species)))
        picked = diff.masked_fill(picked, self.invalid[None, :, :], -np.inf)
        logp = diff.log_softmax(picked)
        per_pos = diff.gather_log_prob(logp, states)
        return diff.sum_(per_pos, axis=1)

    def logprob(self, prompts, states) -> np.ndarray:
        with no_grad():
            return self.logprob_tensor(prompts, states).data

    def conditionals(self, prompt: np.ndarray, x) -> np.ndarray:
        """All N conditional distributions given a full state, shape (N, vocab)."""
        return self.conditionals_batch(prompt[None, :], np.asarray(x, dtype=np.int64)[None, :])[0]

    def conditionals_batch(self, prompts: np.ndarray, states: np.ndarray) -> np.ndarray:
        """Per-position conditionals for a batch, shape (B, N, vocab)."""
        states = np.asarray(states, dtype=np.int64)
        with no_grad():
            logits = self._forward_logits(np.atleast_2d(prompts), states)
            c = self.config
            picked = logits.data[:, c.d_p - 1 : c.d_p - 1 + self.n_species]
            picked = np.where(self.invalid[None, :, :], -np.inf, picked)
            e = np.exp(picked - picked.max(axis=-1, keepdims=True))
            return e / e.sum(axis=-1, keepdims=True)

    def next_conditionals(self, prompts: np.ndarray, prefixes: np.ndarray) -> np.ndarray:
        """p(x_i | prompt, prefix) for i = prefix width; shape (B, vocab)."""
        prompts = np.atleast_2d(prompts)
        prefixes = np.asarray(prefixes, dtype=np.int64)
        i = prefixes.shape[1]
        with no_grad():
            logits = self._forward_logits(prompts, prefixes)
            row = logits.data[:, self.config.d_p - 1 + i]
            row = np.where(self.invalid[i], -np.inf, row)
            e = np.exp(row - row.max(axis=-1, keepdims=True))
            return e / e.sum(axis=-1, keepdims=True)

    # --- sampling ----------------------------------------------------------------

    def sample(self, prompt: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
        """n ancestral samples for one prompt, deduping shared prefixes."""
        prefixes = np.zeros((1, 0), dtype=np.int64)
        counts = np.array([n], dtype=np.int64)
        for i in range(self.n_species):
            conds = self.next_conditionals(
                np.repeat(prompt[None, :], len(prefixes), axis=0), prefixes
            )
            new_p, new_c = [], []
            for k in range(len(prefixes)):
                draws = rng.multinomial(counts[k], conds[k])
                for v in np.flatnonzero(draws):
                    new_p.append(np.append(prefixes[k], v))
                    new_c.append(draws[v])
            prefixes = np.array(new_p, dtype=np.int64)
            counts = np.array(new_c, dtype=np.int64)
        samples = np.repeat(prefixes, counts, axis=0)
        return samples[rng.permutation(len(samples))]

    def sample_with_uniforms(self, prompts: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
        """One state per prompt row via inverse-CDF draws, uniforms (B, N).

        Deduplicates identical (prompt, prefix) rows so the forward cost
        scales with distinct contexts, not batch size; the samples are a
        pure function of (prompts, uniforms).
        """
        prompts = np.atleast_2d(prompts)
        B = prompts.shape[0]
        out = np.zeros((B, self.n_species), dtype=np.int64)
        for i in range(self.n_species):
            ctx = np.concatenate([prompts, out[:, :i].astype(np.float64)], axis=1)
            uniq, inverse = np.unique(ctx, axis=0, return_inverse=True)
            conds = self.next_conditionals(uniq[:, : prompts.shape[1]], uniq[:, prompts.shape[1] :].astype(np.int64))
            cdf = np.cumsum(conds, axis=1)
            rows = cdf[inverse]
            out[:, i] = np.minimum(
                (uniforms[:, i][:, None] >= rows).sum(axis=1), self.vocab - 1
            )
        return out

    def sample_counts(self, prompts: np.ndarray, n_per: int, rng: np.random.Generator):
        """S_batch samples per prompt row, returned as (row, state, count) triples."""
        prompts = np.atleast_2d(prompts)
        B = prompts.shape[0]
        prefixes = [np.zeros((1, 0), dtype=np.int64) for _ in range(B)]
        counts = [np.array([n_per], dtype=np.int64) for _ in range(B)]
        for i in range(self.n_species):
            rows_p, rows_x, owner = [], [], []
            for b in range(B):
                for pref in prefixes[b]:
                    rows_p.append(prompts[b])
                    rows_x.append(pref)
                    owner.append(b)
            conds = self.next_conditionals(np.array(rows_p), np.array(rows_x, dtype=np.int64))
            new_prefixes = [[] for _ in range(B)]
            new_counts = [[] for _ in range(B)]
            flat = 0
            for b in range(B):
                for k in range(len(prefixes[b])):
                    draws = rng.multinomial(counts[b][k], conds[flat])
                    for v in np.flatnonzero(draws):
                        new_prefixes[b].append(np.append(prefixes[b][k], v))
                        new_counts[b].append(draws[v])
                    flat += 1
            prefixes = [np.array(p, dtype=np.int64) for p in new_prefixes]
            counts = [np.array(c, dtype=np.int64) for c in new_counts]
        return prefixes, counts

    # --- persistence ---------------------------------------------------------------

    def save(self, path, metadata: dict | None = None, training_step: int = 0) -> str:
        meta = dict(metadata or {})
        meta.update(
            {
                "model_kind": self.KIND,
                "config": self.config.to_dict(),
                "normalization": {"mean": self.norm_mean.tolist(), "std": self.norm_std.tolist()},
                "network": serialize_model(self.net),
                "training_step": training_step,
                "seed": self.seed,
            }
        )
        return save_checkpoint(path, self.store.state_arrays(), meta)

    @classmethod
    def load(cls, path) -> tuple["METModel", dict]:
        arrays, meta = load_checkpoint(path)
        if meta.get("model_kind") != cls.KIND:
            raise CheckpointError(f"{path}: not a MET checkpoint")
        net = parse_model(meta["network"])
        model = cls(
            net,
            METConfig(**meta["config"]),
            seed=meta.get("seed", 0),
            normalization=meta["normalization"],
        )
        model.store.load_arrays(arrays)
        return model, meta


def met_conditionals(model: METModel, prompt, x) -> np.ndarray:
    return model.conditionals(np.asarray(prompt, dtype=np.float64), x)


def met_logprob(model: METModel, prompt, x) -> float:
    return float(model.logprob(np.asarray(prompt)[None, :], np.asarray(x, dtype=np.int64)[None, :])[0])


def met_sample(model: METModel, prompt, n: int, seed: int) -> np.ndarray:
    return model.sample(np.asarray(prompt, dtype=np.float64), n, stream(seed, 0x4D53))


def parameter_count(config: METConfig, net: ReactionNetwork) -> int:
    """Closed-form trainable-parameter count for a network-specific model.

    With V = U+1, P = M+N+1, d = d_emb, w = d_ff/4, p = d_p:
      embedding        V*d
      prompt projector P*p + p  +  2*p*d
      per block        4*(d^2+d) attention + 2*2d norms + (d*w+w) + (w*d+d)
      final norm       2d
      head             d*V + V
    """
    c = config
    V = int(np.asarray(net.bounds).max()) + 1
    P = net.n_reactions + net.n_species + 1
    d, w, p = c.d_emb, c.ff_hidden, c.d_p
    block = 4 * (d * d + d) + 2 * (2 * d) + (d * w + w) + (w * d + d)
    return (
        V * d
        + (P * p + p)
        + 2 * p * d
        + c.d_l * block
        + 2 * d
        + (d * V + V)
    )


# --- training ------------------------------------------------------------------


@dataclass(frozen=True)
class TrainHyper:
    """RLMF controls: S_batch samples per element, M_acc elements per update."""

    s_batch: int = 1000
    m_acc: int = 100
    epochs: int = 100
    schedule: Schedule = Schedule(1e-3, warmup_steps=200, decay="inv_sqrt")
    weight_decay: float = 0.0
    seed: int = 0
    ppo_clip: float | None = None  # off by default; Methods-style estimator
    ppo_iters: int = 4
    diverge_threshold: float = 1e3
    diverge_patience: int = 20

    def __post_init__(self):
        if self.s_batch < 2:
            raise ValueError("s_batch must be >= 2")
        if self.m_acc < 1:
            raise ValueError("m_acc must be >= 1")


@dataclass
class LossTrace:
    rows: list = field(default_factory=list)  # (step, element_key, kl, lr)

    def record(self, step, key, kl, lr):
        self.rows.append((step, key, kl, lr))

    def kl_series(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows], dtype=np.float64)

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("step,element,kl_estimate,lr\n")
            for step, key, kl, lr in self.rows:
                fh.write(f"{step},{key},{float(kl)!r},{float(lr)!r}\n")


def train_met(
    model: METModel,
    reward_set: RewardModelSet,
    net: ReactionNetwork,
    hyper: TrainHyper,
    progress=None,
) -> LossTrace:
    """RLMF training of a MET model against a reward-model set.

    Per update: M_acc randomly-ordered set elements each contribute S_batch
    states sampled from the current model at prompt (rates, x0, t+dt); the
    per-sample reward ln(kernel-stepped reward model at t) - met log-prob
    is baselined by its element mean and turned into a score-function
    gradient; one AdamW step per M_acc elements.
    """
    dt = reward_set.dt
    elements = list(reward_set.elements)
    if not elements:
        raise ValueError("empty reward set")
    rng = stream(hyper.seed, 0x4D54)
    trace = LossTrace()
    caches: dict[tuple, dict[bytes, float]] = {e.key(): {} for e in elements}
    prompts = {
        e.key(): build_prompt(net, e.rates, e.x0, e.t + dt) for e in elements
    }

    def ln_targets(element, states: np.ndarray) -> np.ndarray:
        cache = caches[element.key()]
        missing = [s for s in states if s.tobytes() not in cache]
        if missing:
            frozen = reward_set.model_for(element)
            stack = np.array(missing, dtype=np.int64)
            vals = apply_kernel_batch(
                net, element.rates, dt, lambda xs: frozen.logprob(xs), stack
            )
            for s, v in zip(missing, np.log(vals)):
                cache[s.tobytes()] = float(v)
        return np.array([cache[s.tobytes()] for s in states])

    step = 0
    bad = 0
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(elements))
        for lo in range(0, len(order), hyper.m_acc):
            chunk = [elements[i] for i in order[lo : lo + hyper.m_acc]]
            step += 1
            prompt_block = np.array([prompts[e.key()] for e in chunk])
            prefixes, counts = model.sample_counts(prompt_block, hyper.s_batch, rng)

            rows_prompt, rows_state, rows_weight = [], [], []
            kls = []
            for b, e in enumerate(chunk):
                states_b = prefixes[b]
                counts_b = counts[b]
                target = ln_targets(e, states_b)
                logp_b = model.logprob(
                    np.repeat(prompts[e.key()][None, :], len(states_b), axis=0), states_b
                )
                gap = logp_b - target
                kl = float(counts_b @ gap) / hyper.s_batch
                kls.append(kl)
                weight = (gap - kl) * counts_b / hyper.s_batch / len(chunk)
                rows_prompt.append(np.repeat(prompts[e.key()][None, :], len(states_b), axis=0))
                rows_state.append(states_b)
                rows_weight.append(weight)
                trace.record(step, "|".join(map(str, e.key())), kl, hyper.schedule(step))

            all_p = np.concatenate(rows_prompt)
            all_x = np.concatenate(rows_state)
            all_w = np.concatenate(rows_weight)

            if hyper.ppo_clip is None:
                model.store.zero_grad()
                logp = model.logprob_tensor(all_p, all_x)
                backward(diff.sum_(diff.mul(logp, Tensor(all_w))))
                adamw_step(model.store, hyper.schedule, step, hyper.weight_decay)
            else:
                old_logp = model.logprob(all_p, all_x)
                eps = hyper.ppo_clip
                for _ in range(hyper.ppo_iters):
                    model.store.zero_grad()
                    logp = model.logprob_tensor(all_p, all_x)
                    ratio = np.exp(logp.data - old_logp)
                    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps)
                    # advantage is -(baselined reward); take the pessimistic branch
                    use = np.where(all_w * ratio >= all_w * clipped, ratio, clipped)
                    backward(diff.sum_(diff.mul(logp, Tensor(all_w * use))))
                    adamw_step(model.store, hyper.schedule, step, hyper.weight_decay)

            mean_kl = float(np.mean(kls))
            if not np.isfinite(mean_kl) or mean_kl > hyper.diverge_threshold:
                bad += 1
                if bad >= hyper.diverge_patience:
                    raise DivergedLoss(
                        f"KL estimate {mean_kl:.3e} above {hyper.diverge_threshold} "
                        f"for {bad} consecutive updates"
                    )
            else:
                bad = 0
        if progress is not None:
            progress(epoch + 1, hyper.epochs, mean_kl)
    return trace
