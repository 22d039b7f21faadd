"""Reaction networks, the plain-text model language, and mass-action propensities.

The model language is line oriented; '#' starts a comment, tokens are
whitespace separated::

    species <name>+
    bound <int>            | bound <name> <int>     (per-species override)
    reaction <rate_symbol> : <side> -> <side>
    rate <symbol> <positive float>
    init <name> <int>
    time <t0> <tT>

where ``<side>`` is ``0`` for an empty side or ``+``-joined terms, each
term an optional integer coefficient followed by a species name.  Files
use UTF-8 and the ``.cme`` extension.

Propensities follow stochastic mass action: a reaction consuming r copies
of a species with count x contributes the falling factorial
x*(x-1)*...*(x-r+1).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    DuplicateSpecies,
    MalformedLine,
    MissingRate,
    NonPositiveRate,
    UnknownSpecies,
)


@dataclass(frozen=True)
class Species:
    name: str
    index: int


@dataclass(frozen=True)
class Reaction:
    """One reaction channel: rate symbol, stoichiometry, and jump vector."""

    rate_symbol: str
    reactants: Mapping[str, int]
    products: Mapping[str, int]
    jump: np.ndarray  # integer change vector, one entry per species

    def __post_init__(self):
        object.__setattr__(self, "reactants", dict(self.reactants))
        object.__setattr__(self, "products", dict(self.products))
        j = np.asarray(self.jump, dtype=np.int64)
        j.setflags(write=False)
        object.__setattr__(self, "jump", j)


class RateMap(Mapping):
    """Immutable symbol -> rate constant mapping; values strictly positive."""

    def __init__(self, values: Mapping[str, float]):
        vals = {}
        for sym, v in values.items():
            v = float(v)
            if not np.isfinite(v) or v <= 0.0:
                raise NonPositiveRate(f"rate {sym} = {v} must be positive and finite")
            vals[sym] = v
        self._values = vals

    def __getitem__(self, key):
        return self._values[key]

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def __repr__(self):
        inner = ", ".join(f"{k}={v:g}" for k, v in self._values.items())
        return f"RateMap({inner})"

    def replace(self, **updates) -> "RateMap":
        merged = dict(self._values)
        merged.update(updates)
        return RateMap(merged)


@dataclass(frozen=True)
class ReactionNetwork:
    """Immutable reaction network: species, reactions, bounds, and defaults.

    ``bounds[i]`` is the inclusive per-species maximum count; jumps that
    would leave [0, bounds] are disabled everywhere in the package
    (reflecting truncation).
    """

    species: tuple[Species, ...]
    reactions: tuple[Reaction, ...]
    bounds: np.ndarray
    default_rates: RateMap
    default_init: np.ndarray
    t0: float
    t_final: float

    def __post_init__(self):
        b = np.asarray(self.bounds, dtype=np.int64)
        x0 = np.asarray(self.default_init, dtype=np.int64)
        b.setflags(write=False)
        x0.setflags(write=False)
        object.__setattr__(self, "bounds", b)
        object.__setattr__(self, "default_init", x0)
        if np.any(x0 < 0) or np.any(x0 > b):
            raise MalformedLine("initial state outside bounds")
        for r in self.reactions:
            if r.rate_symbol not in self.default_rates:
                raise MissingRate(f"no rate given for symbol {r.rate_symbol}")

    @property
    def n_species(self) -> int:
        return len(self.species)

    @property
    def n_reactions(self) -> int:
        return len(self.reactions)

    @property
    def species_names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.species)

    def species_index(self, name: str) -> int:
        for s in self.species:
            if s.name == name:
                return s.index
        raise UnknownSpecies(f"species {name} not declared")

    def jump_matrix(self) -> np.ndarray:
        """All jump vectors stacked, shape (n_reactions, n_species)."""
        return np.array([r.jump for r in self.reactions], dtype=np.int64)

    def with_bounds(self, bounds) -> "ReactionNetwork":
        """Copy with replaced truncation bounds (scalar or per-species)."""
        b = np.asarray(bounds, dtype=np.int64)
        if b.ndim == 0:
            b = np.full(self.n_species, int(b), dtype=np.int64)
        x0 = np.minimum(self.default_init, b)
        return ReactionNetwork(
            self.species, self.reactions, b, self.default_rates, x0, self.t0, self.t_final
        )


def _parse_side(tokens: Sequence[str], species_set: set, lineno: int) -> dict:
    """Parse one side of a reaction into {species: count}."""
    if list(tokens) == ["0"]:
        return {}
    counts: dict[str, int] = {}
    terms: list[list[str]] = [[]]
    for tok in tokens:
        if tok == "+":
            terms.append([])
        else:
            terms[-1].append(tok)
    for term in terms:
        if len(term) == 1:
            coeff, name = 1, term[0]
        elif len(term) == 2:
            try:
                coeff = int(term[0])
            except ValueError:
                raise MalformedLine(f"bad coefficient {term[0]!r}", lineno)
            name = term[1]
        else:
            raise MalformedLine(f"bad term {' '.join(term) or '(empty)'!r}", lineno)
        if coeff <= 0:
            raise MalformedLine(f"coefficient must be positive, got {coeff}", lineno)
        if name not in species_set:
            raise UnknownSpecies(f"species {name} not declared", lineno)
        counts[name] = counts.get(name, 0) + coeff
    return counts


def parse_model(text: str) -> ReactionNetwork:
    """Parse model-language source into a ReactionNetwork.

    Raises UnknownSpecies, DuplicateSpecies, MissingRate, NonPositiveRate,
    or MalformedLine (with line number) on invalid input.
    """
    lines = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if body:
            lines.append((lineno, body.split()))

    # First pass: species declarations and bounds.
    names: list[str] = []
    global_bound = None
    bound_overrides: dict[str, tuple[int, int]] = {}  # name -> (bound, lineno)
    for lineno, toks in lines:
        if toks[0] == "species":
            if len(toks) < 2:
                raise MalformedLine("species line needs at least one name", lineno)
            for name in toks[1:]:
                if name in names:
                    raise DuplicateSpecies(f"species {name} declared twice", lineno)
                names.append(name)
        elif toks[0] == "bound":
            if len(toks) == 2:
                try:
                    global_bound = int(toks[1])
                except ValueError:
                    raise MalformedLine(f"bad bound {toks[1]!r}", lineno)
            elif len(toks) == 3:
                try:
                    bound_overrides[toks[1]] = (int(toks[2]), lineno)
                except ValueError:
                    raise MalformedLine(f"bad bound {toks[2]!r}", lineno)
            else:
                raise MalformedLine("bound takes <int> or <name> <int>", lineno)
            if (global_bound is not None and global_bound < 1) or any(
                b < 1 for b, _ in bound_overrides.values()
            ):
                raise MalformedLine("bounds must be >= 1", lineno)

    if not names:
        raise MalformedLine("no species declared", 0)
    species_set = set(names)
    for name, (_, lineno) in bound_overrides.items():
        if name not in species_set:
            raise UnknownSpecies(f"species {name} not declared", lineno)
    if global_bound is None and species_set - set(bound_overrides):
        raise MalformedLine("no bound declared", 0)
    bounds = np.array(
        [bound_overrides.get(n, (global_bound, 0))[0] for n in names], dtype=np.int64
    )

    # Second pass: reactions, rates, init, time.
    index = {n: i for i, n in enumerate(names)}
    reactions: list[Reaction] = []
    rates: dict[str, float] = {}
    init = np.zeros(len(names), dtype=np.int64)
    t0, t_final = None, None
    for lineno, toks in lines:
        kind = toks[0]
        if kind in ("species", "bound"):
            continue
        if kind == "reaction":
            if len(toks) < 5 or toks[2] != ":" or "->" not in toks:
                raise MalformedLine("expected: reaction <symbol> : <side> -> <side>", lineno)
            arrow = toks.index("->")
            symbol = toks[1]
            reactants = _parse_side(toks[3:arrow], species_set, lineno)
            products = _parse_side(toks[arrow + 1 :], species_set, lineno)
            if not reactants and not products:
                raise MalformedLine("reaction with both sides empty", lineno)
            jump = np.zeros(len(names), dtype=np.int64)
            for n, c in products.items():
                jump[index[n]] += c
            for n, c in reactants.items():
                jump[index[n]] -= c
            reactions.append(Reaction(symbol, reactants, products, jump))
        elif kind == "rate":
            if len(toks) != 3:
                raise MalformedLine("expected: rate <symbol> <value>", lineno)
            try:
                value = float(toks[2])
            except ValueError:
                raise MalformedLine(f"bad rate value {toks[2]!r}", lineno)
            if not np.isfinite(value) or value <= 0.0:
                raise NonPositiveRate(f"rate {toks[1]} = {value} must be positive", lineno)
            rates[toks[1]] = value
        elif kind == "init":
            if len(toks) != 3:
                raise MalformedLine("expected: init <name> <int>", lineno)
            if toks[1] not in species_set:
                raise UnknownSpecies(f"species {toks[1]} not declared", lineno)
            try:
                init[index[toks[1]]] = int(toks[2])
            except ValueError:
                raise MalformedLine(f"bad count {toks[2]!r}", lineno)
        elif kind == "time":
            if len(toks) != 3:
                raise MalformedLine("expected: time <t0> <tT>", lineno)
            try:
                t0, t_final = float(toks[1]), float(toks[2])
            except ValueError:
                raise MalformedLine("bad time values", lineno)
            if t_final < t0:
                raise MalformedLine("final time before start time", lineno)
        else:
            raise MalformedLine(f"unknown directive {kind!r}", lineno)

    if not reactions:
        raise MalformedLine("no reactions declared", 0)
    for r in reactions:
        if r.rate_symbol not in rates:
            raise MissingRate(f"no rate given for symbol {r.rate_symbol}")
    if t_final is None:
        raise MalformedLine("no time directive", 0)

    species = tuple(Species(n, i) for i, n in enumerate(names))
    return ReactionNetwork(
        species, tuple(reactions), bounds, RateMap(rates), init, t0, t_final
    )


def _format_side(counts: Mapping[str, int]) -> str:
    if not counts:
        return "0"
    parts = []
    for name, c in counts.items():
        parts.append(name if c == 1 else f"{c} {name}")
    return " + ".join(parts)


def serialize_model(net: ReactionNetwork) -> str:
    """Emit model-language source; parse_model(serialize_model(net)) == net."""
    out = ["species " + " ".join(net.species_names)]
    b = net.bounds
    if np.all(b == b[0]):
        out.append(f"bound {int(b[0])}")
    else:
        common = int(np.max(b))
        out.append(f"bound {common}")
        for s in net.species:
            if b[s.index] != common:
                out.append(f"bound {s.name} {int(b[s.index])}")
    for r in net.reactions:
        out.append(
            f"reaction {r.rate_symbol} : {_format_side(r.reactants)} -> {_format_side(r.products)}"
        )
    for sym, v in net.default_rates.items():
        out.append(f"rate {sym} {v!r}")
    for s in net.species:
        if net.default_init[s.index] != 0:
            out.append(f"init {s.name} {int(net.default_init[s.index])}")
    out.append(f"time {net.t0!r} {net.t_final!r}")
    return "\n".join(out) + "\n"


def load_model(path) -> ReactionNetwork:
    with open(path, encoding="utf-8") as fh:
        return parse_model(fh.read())


def propensity(net: ReactionNetwork, rates: Mapping[str, float], x, j: int) -> float:
    """Mass-action propensity of reaction j at state x.

    Falling factorial over reactant counts: k * prod_i x_i*(x_i-1)*...*
    (x_i-r_ij+1); zero whenever any reactant is short.
    """
    r = net.reactions[j]
    a = float(rates[r.rate_symbol])
    for name, need in r.reactants.items():
        xi = int(x[net.species_index(name)])
        if xi < need:
            return 0.0
        for k in range(need):
            a *= xi - k
    return a


def propensity_matrix(net: ReactionNetwork, rates: Mapping[str, float], states: np.ndarray) -> np.ndarray:
    """Propensities for a batch of states, shape (n_states, n_reactions).

    Vectorized equivalent of calling propensity() per state and reaction.
    """
    states = np.asarray(states, dtype=np.int64)
    out = np.empty((states.shape[0], net.n_reactions), dtype=np.float64)
    for j, r in enumerate(net.reactions):
        a = np.full(states.shape[0], float(rates[r.rate_symbol]))
        for name, need in r.reactants.items():
            xi = states[:, net.species_index(name)]
            for k in range(need):
                a = a * np.maximum(xi - k, 0)
            a = np.where(xi >= need, a, 0.0)
        out[:, j] = a
    return out


def apply_jump(net: ReactionNetwork, x, j: int):
    """State after reaction j fires, or None when the target leaves bounds."""
    y = np.asarray(x, dtype=np.int64) + net.reactions[j].jump
    if np.any(y < 0) or np.any(y > net.bounds):
        return None
    return y
