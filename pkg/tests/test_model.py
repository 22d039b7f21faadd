import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metsolver.errors import (
    DuplicateSpecies,
    MalformedLine,
    MissingRate,
    NonPositiveRate,
    UnknownSpecies,
)
from metsolver.model import (
    RateMap,
    apply_jump,
    parse_model,
    propensity,
    propensity_matrix,
    serialize_model,
)

BIRTH_DEATH = """\
species X
bound 10
reaction kb : 0 -> X
reaction kd : X -> 0
rate kb 1.0
rate kd 0.1
init X 0
time 0 100
"""


def test_parse_birth_death():
    net = parse_model(BIRTH_DEATH)
    assert net.n_species == 1
    assert net.n_reactions == 2
    assert net.species_names == ("X",)
    assert list(net.reactions[0].jump) == [1]
    assert list(net.reactions[1].jump) == [-1]
    assert net.default_rates["kb"] == 1.0
    assert net.default_rates["kd"] == 0.1
    assert net.bounds[0] == 10
    assert net.default_init[0] == 0
    assert net.t0 == 0.0 and net.t_final == 100.0


def test_parse_negative_rate_rejected():
    with pytest.raises(NonPositiveRate):
        parse_model(BIRTH_DEATH.replace("rate kd 0.1", "rate kd -0.1"))


def test_parse_coefficient_stoichiometry():
    net = parse_model(
        "species P D\nbound 10\nreaction k : 2 P -> D\nrate k 0.5\ntime 0 1\n"
    )
    r = net.reactions[0]
    assert r.reactants == {"P": 2}
    assert r.products == {"D": 1}
    assert list(r.jump) == [-2, 1]


@pytest.mark.parametrize(
    "text,err",
    [
        ("species X X\nbound 5\nreaction k : 0 -> X\nrate k 1\ntime 0 1", DuplicateSpecies),
        ("species X\nbound 5\nreaction k : 0 -> Y\nrate k 1\ntime 0 1", UnknownSpecies),
        ("species X\nbound 5\nreaction k : 0 -> X\ntime 0 1", MissingRate),
        ("species X\nbound 5\nreaction k : 0 -> X\nrate k 0\ntime 0 1", NonPositiveRate),
        ("species X\nbound 5\nreaction k 0 -> X\nrate k 1\ntime 0 1", MalformedLine),
        ("species X\nbound 5\nreaction k : 0 -> 0\nrate k 1\ntime 0 1", MalformedLine),
        ("species X\nreaction k : 0 -> X\nrate k 1\ntime 0 1", MalformedLine),
        ("species X\nbound 5\nreaction k : 0 -> X\nrate k 1", MalformedLine),
        ("species X\nbound 5\nwibble 3\nreaction k : 0 -> X\nrate k 1\ntime 0 1", MalformedLine),
        ("species X\nbound 5\nreaction k : 0 -> X\nrate k 1\ninit X 9\ntime 0 1", MalformedLine),
    ],
)
def test_parse_errors(text, err):
    with pytest.raises(err):
        parse_model(text)


def test_malformed_line_reports_line_number():
    with pytest.raises(MalformedLine, match="line 3"):
        parse_model("species X\nbound 5\nreaction k 0 -> X\nrate k 1\ntime 0 1")


def test_comments_and_blank_lines_ignored():
    net = parse_model("# header\n\nspecies X  # trailing\nbound 3\nreaction k : 0 -> X\nrate k 2\ntime 0 1\n")
    assert net.n_species == 1
    assert net.default_rates["k"] == 2.0


def test_per_species_bound_override():
    net = parse_model(
        "species G P\nbound 50\nbound G 1\nreaction k : G -> G + P\nrate k 1\ntime 0 1\n"
    )
    assert list(net.bounds) == [1, 50]


def test_propensity_birth_death():
    net = parse_model(BIRTH_DEATH)
    rates = net.default_rates
    assert propensity(net, rates, np.array([7]), 0) == 1.0  # zeroth order
    assert propensity(net, rates, np.array([3]), 1) == pytest.approx(0.3)


def test_propensity_dimerization_falling_factorial():
    net = parse_model("species P D\nbound 10\nreaction k : 2 P -> D\nrate k 0.5\ntime 0 1\n")
    assert propensity(net, net.default_rates, np.array([4, 0]), 0) == pytest.approx(6.0)
    assert propensity(net, net.default_rates, np.array([1, 0]), 0) == 0.0


def test_propensity_matrix_matches_scalar():
    net = parse_model(
        "species A B\nbound 6\nreaction k1 : A + B -> 0\nreaction k2 : 2 A -> B\nreaction k3 : 0 -> A\n"
        "rate k1 0.3\nrate k2 0.7\nrate k3 2.0\ntime 0 1\n"
    )
    states = np.array([[a, b] for a in range(7) for b in range(7)])
    mat = propensity_matrix(net, net.default_rates, states)
    for si, x in enumerate(states):
        for j in range(net.n_reactions):
            assert mat[si, j] == pytest.approx(propensity(net, net.default_rates, x, j))


def test_propensity_monotone_in_reactant_count():
    net = parse_model("species P D\nbound 12\nreaction k : 2 P -> D\nrate k 0.5\ntime 0 1\n")
    vals = [propensity(net, net.default_rates, np.array([x, 0]), 0) for x in range(13)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_apply_jump_boundaries():
    net = parse_model(BIRTH_DEATH)
    assert apply_jump(net, np.array([0]), 1) is None  # death at empty
    assert list(apply_jump(net, np.array([9]), 0)) == [10]
    assert apply_jump(net, np.array([10]), 0) is None  # truncation boundary


def test_apply_jump_reverse_returns_original():
    net = parse_model(
        "species A B\nbound 8\nreaction k : A -> 2 B\nrate k 1\ntime 0 1\n"
    )
    x = np.array([3, 2])
    y = apply_jump(net, x, 0)
    back = y - net.reactions[0].jump
    assert list(back) == list(x)


def test_rate_map_validation():
    with pytest.raises(NonPositiveRate):
        RateMap({"k": 0.0})
    with pytest.raises(NonPositiveRate):
        RateMap({"k": float("inf")})
    rm = RateMap({"k": 1.0}).replace(k=2.5)
    assert rm["k"] == 2.5


names_st = st.lists(
    st.text(alphabet="abcdefgXYZ", min_size=1, max_size=4).filter(str.isidentifier),
    min_size=1,
    max_size=4,
    unique=True,
)


@settings(max_examples=60, deadline=None)
@given(data=st.data())
def test_serialize_parse_round_trip(data):
    names = data.draw(names_st)
    n = len(names)
    n_react = data.draw(st.integers(1, 5))
    lines = ["species " + " ".join(names), "bound 9"]
    syms = []
    for j in range(n_react):
        reac = data.draw(st.dictionaries(st.sampled_from(names), st.integers(1, 2), max_size=2))
        prod = data.draw(st.dictionaries(st.sampled_from(names), st.integers(1, 2), max_size=2))
        if not reac and not prod:
            prod = {names[0]: 1}
        sym = f"k{j}"
        syms.append(sym)
        left = " + ".join(f"{c} {s}" if c > 1 else s for s, c in reac.items()) or "0"
        right = " + ".join(f"{c} {s}" if c > 1 else s for s, c in prod.items()) or "0"
        lines.append(f"reaction {sym} : {left} -> {right}")
    for sym in syms:
        lines.append(f"rate {sym} {data.draw(st.floats(0.001, 100.0)):.6g}")
    lines.append(f"init {names[0]} {data.draw(st.integers(0, 9))}")
    lines.append("time 0 5")
    net = parse_model("\n".join(lines))
    net2 = parse_model(serialize_model(net))
    assert net2.species_names == net.species_names
    assert net2.n_reactions == net.n_reactions
    assert list(net2.bounds) == list(net.bounds)
    assert list(net2.default_init) == list(net.default_init)
    assert dict(net2.default_rates) == dict(net.default_rates)
    assert (net2.t0, net2.t_final) == (net.t0, net.t_final)
    for r1, r2 in zip(net.reactions, net2.reactions):
        assert r1.rate_symbol == r2.rate_symbol
        assert r1.reactants == r2.reactants
        assert r1.products == r2.products
        assert list(r1.jump) == list(r2.jump)
