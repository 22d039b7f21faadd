import numpy as np
import pytest

from metsolver.analysis import hellinger
from metsolver.errors import CheckpointError
from metsolver.model import parse_model
from metsolver.reward import (
    RewardElement,
    RewardHyper,
    RewardModel,
    RewardModelSet,
    rm_logprob,
    rm_sample,
    train_reward_set,
)
from metsolver.statespace import ProbabilityVector, build_generator, evolve_exact

BD = """\
species X
bound 10
reaction kb : 0 -> X
reaction kd : X -> 0
rate kb 1.0
rate kd 0.1
init X 0
time 0 100
"""

TOY = """\
species X
bound 4
reaction kb : 0 -> X
reaction kd : X -> 0
rate kb 0.5
rate kd 0.25
time 0 10
"""


@pytest.fixture(scope="module")
def bd():
    return parse_model(BD)


@pytest.fixture(scope="module")
def pretrained(bd):
    ms = train_reward_set(
        bd, bd.default_rates, [3], 1e-2, 0.0, [0.0], RewardHyper(epochs=1)
    )
    return ms.model_for(ms.elements[0])


def test_pretrained_delta_logprob(pretrained):
    assert rm_logprob(pretrained, [3]) > np.log(0.99)


def test_pretrained_delta_sampling(pretrained):
    samples = rm_sample(pretrained, 1000, seed=5)
    assert np.mean(samples[:, 0] == 3) >= 0.99


def test_enumeration_mass_is_one(bd):
    model = RewardModel(bd, width=16, seed=2)
    states = np.arange(11)[:, None]
    assert np.exp(model.logprob(states)).sum() == pytest.approx(1.0, abs=1e-6)


def test_sampling_matches_own_masses():
    net = parse_model(TOY)
    model = RewardModel(net, width=8, seed=3)
    states = np.arange(5)[:, None]
    masses = np.exp(model.logprob(states))
    samples = rm_sample(model, 10**5, seed=11)
    emp = np.bincount(samples[:, 0], minlength=5) / 1e5
    assert np.max(np.abs(emp - masses)) < 0.01


def test_sampling_deterministic(bd):
    model = RewardModel(bd, width=16, seed=4)
    a = rm_sample(model, 500, seed=21)
    b = rm_sample(model, 500, seed=21)
    assert np.array_equal(a, b)


def test_conditional_masking_respects_per_species_bounds():
    net = parse_model(
        "species G P\nbound 6\nbound G 1\nreaction k : G -> G + P\nrate k 1\ntime 0 1\n"
    )
    model = RewardModel(net, width=8, seed=0)
    cond = model.conditionals(np.zeros((1, 0), dtype=np.int64))
    assert cond.shape == (1, 7)
    assert np.all(cond[0, 2:] == 0.0)  # gene counts above 1 are masked out
    assert cond[0, :2].sum() == pytest.approx(1.0, abs=1e-12)


def test_monotone_information_flow():
    # changing a later species never changes conditionals at earlier positions
    net = parse_model(
        "species A B C\nbound 3\nreaction k : A -> B + C\nrate k 1\ntime 0 1\n"
    )
    model = RewardModel(net, width=8, seed=7)
    base = model.conditionals(np.array([[1, 2]]))
    pert = model.conditionals(np.array([[1, 2]]))  # same prefix: C is position 2
    assert np.array_equal(base, pert)
    c0 = model.conditionals(np.zeros((1, 0), dtype=np.int64))
    c0_after = model.conditionals(np.zeros((1, 0), dtype=np.int64))
    assert np.array_equal(c0, c0_after)


def test_zero_rate_network_stays_delta(bd):
    tiny = {"kb": 1e-300, "kd": 1e-300}
    ms = train_reward_set(bd, tiny, [4], 1e-2, 0.1, [0.1], RewardHyper(epochs=20))
    model = ms.model_for(ms.elements[-1])
    assert np.exp(rm_logprob(model, [4])) > 0.99


@pytest.mark.slow
def test_birth_death_chain_tracks_exact(bd):
    # Table-style hyperparameters, horizon cut at t=1 to stay test-sized.
    ms = train_reward_set(bd, bd.default_rates, [0], 1e-2, 1.0, [1.0], RewardHyper())
    model = ms.model_for(ms.elements[-1])
    gen = build_generator(bd, bd.default_rates)
    exact = evolve_exact(gen, ProbabilityVector.delta(gen.space, [0]), 1.0).values
    approx = np.exp(model.logprob(np.arange(11)[:, None]))
    assert hellinger(approx / approx.sum(), exact) < 0.05


def test_kernel_self_consistency(pretrained, bd):
    from metsolver.statespace import apply_kernel_batch

    states = np.arange(11)[:, None]
    vals = apply_kernel_batch(
        bd, bd.default_rates, 1e-2, lambda xs: pretrained.logprob(xs), states
    )
    assert vals.sum() == pytest.approx(1.0, abs=1e-6)


def test_save_time_must_align_with_dt(bd):
    with pytest.raises(ValueError):
        train_reward_set(bd, bd.default_rates, [0], 1e-2, 1.0, [0.505], RewardHyper(epochs=1))


def test_model_set_round_trip(tmp_path, bd):
    ms = train_reward_set(
        bd, bd.default_rates, [2], 1e-2, 0.02, [0.0, 0.01, 0.02], RewardHyper(epochs=2)
    )
    manifest = ms.save(tmp_path / "set")
    assert manifest.exists()
    back = RewardModelSet.load(manifest)
    assert back.dt == ms.dt
    assert len(back.elements) == 3
    model = back.model_for(back.elements[0])
    assert rm_logprob(model, [2]) > np.log(0.99)
    # times strictly increasing per (rates, init)
    times = [e.t for e in back.elements]
    assert times == sorted(times)


def test_model_set_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        RewardModelSet.load(tmp_path / "nope")


def test_model_set_rejects_duplicates(bd):
    ms = RewardModelSet(dt=0.01)
    e = RewardElement({"kb": 1.0, "kd": 0.1}, [0], 1.0, path="x")
    ms.add(e)
    with pytest.raises(ValueError):
        ms.add(RewardElement({"kb": 1.0, "kd": 0.1}, [0], 1.0, path="y"))


def test_prompt_stats_standardize(bd):
    ms = RewardModelSet(dt=0.5)
    for i, t in enumerate([0.5, 1.0, 1.5]):
        ms.add(RewardElement({"kb": 1.0, "kd": 0.1}, [i], t, path=f"p{i}"))
    stats = ms.prompt_stats(bd)
    assert len(stats["mean"]) == 2 + 1 + 1  # M log-rates, N init, time
    assert all(s > 0 for s in stats["std"])
