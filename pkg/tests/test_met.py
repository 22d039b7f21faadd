import numpy as np
import pytest

from metsolver import diff
from metsolver.diff import Schedule, Tensor, backward, finite_difference_check
from metsolver.errors import NonPositiveRate
from metsolver.met import (
    METConfig,
    METModel,
    TrainHyper,
    build_prompt,
    met_conditionals,
    met_logprob,
    met_sample,
    parameter_count,
    train_met,
)
from metsolver.model import parse_model
from metsolver.reward import RewardElement, RewardHyper, RewardModel, RewardModelSet, train_reward_set
from metsolver.statespace import apply_kernel_batch

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

N3 = """\
species A B C
bound 8
reaction k1 : 0 -> A
reaction k2 : A -> B
reaction k3 : B -> C
reaction k4 : C -> 0
rate k1 1.0
rate k2 0.5
rate k3 0.25
rate k4 0.125
time 0 5
"""

SMALL = METConfig(d_emb=16, d_ff=64, d_l=2, h=2, d_p=4)


@pytest.fixture(scope="module")
def bd():
    return parse_model(BD)


@pytest.fixture(scope="module")
def net3():
    return parse_model(N3)


def test_build_prompt_birth_death(bd):
    p = build_prompt(bd, {"kb": 1.0, "kd": 0.1}, [0], 2.0)
    assert p == pytest.approx([0.0, np.log(0.1), 0.0, 2.0])
    assert len(p) == bd.n_reactions + bd.n_species + 1


def test_build_prompt_log_of_e(bd):
    p = build_prompt(bd, {"kb": np.e, "kd": 0.1}, [3], 1.0)
    assert p[0] == pytest.approx(1.0)


def test_build_prompt_toggle_length():
    # N=4 species, M=8 reactions -> prompt length 13
    lines = ["species Gx Gy Px Py", "bound 32", "bound Gx 1", "bound Gy 1"]
    reactions = [
        "reaction kpx : Gx -> Gx + Px",
        "reaction kpy : Gy -> Gy + Py",
        "reaction kdx : Px -> 0",
        "reaction kdy : Py -> 0",
        "reaction kbx : Gx + Py -> Py",
        "reaction kby : Gy + Px -> Px",
        "reaction kux : 0 -> Gx",
        "reaction kuy : 0 -> Gy",
    ]
    rates = [f"rate {sym} 1.0" for sym in ("kpx", "kpy", "kdx", "kdy", "kbx", "kby", "kux", "kuy")]
    net = parse_model("\n".join(lines + reactions + rates + ["time 0 10"]))
    p = build_prompt(net, net.default_rates, [1, 1, 0, 0], 3.0)
    assert len(p) == 13


def test_build_prompt_rejects_bad_rates(bd):
    with pytest.raises(NonPositiveRate):
        build_prompt(bd, {"kb": 0.0, "kd": 0.1}, [0], 1.0)
    with pytest.raises(ValueError):
        build_prompt(bd, {"kb": 1.0, "kd": 0.1}, [0], -1.0)


def test_conditionals_normalized(bd):
    model = METModel(bd, SMALL, seed=0)
    prompt = build_prompt(bd, bd.default_rates, [0], 1.0)
    conds = met_conditionals(model, prompt, np.array([4]))
    assert conds.shape == (1, 11)
    assert conds.sum(axis=-1) == pytest.approx(1.0, abs=1e-12)


def test_joint_mass_full_enumeration(bd):
    model = METModel(bd, SMALL, seed=1)
    prompt = build_prompt(bd, bd.default_rates, [0], 1.0)
    states = np.arange(11)[:, None]
    mass = np.exp(model.logprob(np.repeat(prompt[None, :], 11, axis=0), states)).sum()
    assert mass == pytest.approx(1.0, abs=1e-6)


def test_causality_exhaustive_n3(net3):
    # perturbing species k never changes conditionals at positions <= k
    model = METModel(net3, SMALL, seed=2)
    prompt = build_prompt(net3, net3.default_rates, [0, 0, 0], 1.0)
    rng = np.random.default_rng(0)
    for _ in range(5):
        x = rng.integers(0, 9, size=3)
        base = model.conditionals(prompt, x)
        for j in range(3):
            for v in range(9):
                if v == x[j]:
                    continue
                y = x.copy()
                y[j] = v
                pert = model.conditionals(prompt, y)
                assert np.array_equal(pert[: j + 1], base[: j + 1])


def test_prompt_perturbation_changes_all_positions(net3):
    model = METModel(net3, SMALL, seed=3)
    p1 = build_prompt(net3, net3.default_rates, [0, 0, 0], 1.0)
    p2 = p1.copy()
    p2[-1] = 4.0  # different time
    x = np.array([1, 2, 3])
    c1 = model.conditionals(p1, x)
    c2 = model.conditionals(p2, x)
    assert np.all(np.max(np.abs(c1 - c2), axis=1) > 0)


def test_sampling_deterministic_and_consistent(bd):
    model = METModel(bd, SMALL, seed=4)
    prompt = build_prompt(bd, bd.default_rates, [2], 0.5)
    a = met_sample(model, prompt, 2000, seed=9)
    b = met_sample(model, prompt, 2000, seed=9)
    assert np.array_equal(a, b)
    # frequencies converge to the model's own masses
    states = np.arange(11)[:, None]
    masses = np.exp(model.logprob(np.repeat(prompt[None, :], 11, axis=0), states))
    big = met_sample(model, prompt, 100_000, seed=10)
    emp = np.bincount(big[:, 0], minlength=11) / 1e5
    assert np.max(np.abs(emp - masses)) < 0.01


def test_sample_with_uniforms_matches_cdf_inversion(bd):
    model = METModel(bd, SMALL, seed=5)
    prompt = build_prompt(bd, bd.default_rates, [2], 0.5)
    cond = model.next_conditionals(prompt[None, :], np.zeros((1, 0), dtype=np.int64))[0]
    cdf = np.cumsum(cond)
    us = np.array([[0.001], [0.5], [0.999]])
    vals = model.sample_with_uniforms(np.repeat(prompt[None, :], 3, axis=0), us)
    for u, v in zip(us[:, 0], vals[:, 0]):
        assert v == int(np.searchsorted(cdf, u, side="right"))


def test_met_logprob_matches_conditional_product(net3):
    model = METModel(net3, SMALL, seed=6)
    prompt = build_prompt(net3, net3.default_rates, [1, 0, 2], 2.0)
    x = np.array([2, 1, 0])
    conds = model.conditionals(prompt, x)
    expected = float(np.sum(np.log([conds[i, x[i]] for i in range(3)])))
    assert met_logprob(model, prompt, x) == pytest.approx(expected, abs=1e-10)


def test_parameter_count_reference_config(bd):
    count = parameter_count(METConfig(d_emb=64, d_ff=1024, d_l=8, h=8), bd)
    assert 0.3e6 <= count <= 0.5e6


def test_parameter_count_linear_in_depth(bd):
    c8 = parameter_count(METConfig(d_emb=64, d_ff=1024, d_l=8, h=8), bd)
    c16 = parameter_count(METConfig(d_emb=64, d_ff=1024, d_l=16, h=8), bd)
    per_block = (c16 - c8) / 8
    assert c16 - c8 == 8 * per_block
    assert per_block == 4 * (64 * 64 + 64) + 4 * 64 + (64 * 256 + 256) + (256 * 64 + 64)


def test_parameter_count_matches_store_and_checkpoint(tmp_path, bd):
    from metsolver.checkpoint import manifest_element_total

    model = METModel(bd, SMALL, seed=7)
    count = parameter_count(SMALL, bd)
    assert model.store.count() == count
    path = tmp_path / "m.ckpt"
    model.save(path)
    assert manifest_element_total(path) == count


def test_met_gradcheck_full_logprob(bd):
    model = METModel(bd, SMALL, seed=8)
    prompt = build_prompt(bd, bd.default_rates, [1], 0.5)
    x = np.array([[3]])

    def loss():
        return diff.sum_(model.logprob_tensor(prompt[None, :], x))

    assert finite_difference_check(loss, model.store, eps=1e-5, max_per_param=6) < 1e-4


def test_checkpoint_round_trip(tmp_path, bd):
    model = METModel(bd, SMALL, seed=9, normalization={"mean": [0, -2, 1, 2.5], "std": [1, 1, 2, 1.5]})
    prompt = build_prompt(bd, bd.default_rates, [1], 0.5)
    x = np.array([[3]])
    before = model.logprob(prompt[None, :], x)
    path = tmp_path / "m.ckpt"
    model.save(path, {"note": "test"}, training_step=123)
    loaded, meta = METModel.load(path)
    assert meta["training_step"] == 123
    after = loaded.logprob(prompt[None, :], x)
    assert np.array_equal(before, after)


def _delta_reward_set(net, x0, dt=0.01):
    ms = train_reward_set(
        net,
        {r.rate_symbol: 1e-300 for r in net.reactions},
        x0,
        dt,
        0.0,
        [0.0],
        RewardHyper(width=8, epochs=1),
    )
    return ms


def test_train_met_degenerate_delta_target(bd):
    # single delta reward model with zero rates: MET should reproduce delta
    ms = _delta_reward_set(bd, [4])
    model = METModel(bd, SMALL, seed=10, normalization=ms.prompt_stats(bd))
    hyper = TrainHyper(
        s_batch=200, m_acc=1, epochs=300,
        schedule=Schedule(5e-3, warmup_steps=30, decay="inv_sqrt"), seed=11,
    )
    train_met(model, ms, bd, hyper)
    e = ms.elements[0]
    prompt = build_prompt(bd, e.rates, e.x0, e.t + ms.dt)
    assert np.exp(met_logprob(model, prompt, np.array([4]))) > 0.99


def test_estimator_matches_exact_gradient_on_toy():
    # N=1, U=4 toy: score-function gradient averaged over the enumeration
    # vs autodiff gradient of the enumerated KL; cosine > 0.99.
    net = parse_model(
        "species X\nbound 4\nreaction kb : 0 -> X\nreaction kd : X -> 0\n"
        "rate kb 0.5\nrate kd 0.25\ntime 0 10\n"
    )
    model = METModel(net, SMALL, seed=12)
    reward = RewardModel(net, width=8, seed=13)
    dt = 0.05
    states = np.arange(5)[:, None]
    prompt = build_prompt(net, net.default_rates, [0], 1.0)
    prompts = np.repeat(prompt[None, :], 5, axis=0)
    target = np.log(
        apply_kernel_batch(net, net.default_rates, dt, lambda xs: reward.logprob(xs), states)
    )

    model.store.zero_grad()
    logp = model.logprob_tensor(prompts, states)
    p = diff.exp(logp)
    backward(diff.sum_(diff.mul(p, diff.sub(logp, Tensor(target)))))
    exact = np.concatenate([model.store[k].grad.reshape(-1) for k in model.store.names()])

    model.store.zero_grad()
    logp2 = model.logprob_tensor(prompts, states)
    pv = np.exp(logp2.data)
    gap = logp2.data - target
    w = pv * (gap - float(pv @ gap))
    backward(diff.sum_(diff.mul(logp2, Tensor(w))))
    est = np.concatenate([model.store[k].grad.reshape(-1) for k in model.store.names()])

    cos = est @ exact / (np.linalg.norm(est) * np.linalg.norm(exact))
    assert cos > 0.99


def test_baseline_leaves_expectation_unchanged():
    # sampled baselined vs unbaselined estimators agree at large batch
    net = parse_model(
        "species X\nbound 4\nreaction kb : 0 -> X\nreaction kd : X -> 0\n"
        "rate kb 0.5\nrate kd 0.25\ntime 0 10\n"
    )
    model = METModel(net, SMALL, seed=14)
    reward = RewardModel(net, width=8, seed=15)
    dt = 0.05
    states = np.arange(5)[:, None]
    prompt = build_prompt(net, net.default_rates, [0], 1.0)
    prompts = np.repeat(prompt[None, :], 5, axis=0)
    target = np.log(
        apply_kernel_batch(net, net.default_rates, dt, lambda xs: reward.logprob(xs), states)
    )
    n = 2_000_000
    counts = np.random.default_rng(3).multinomial(
        n, np.exp(model.logprob(prompts, states))
    )

    def grad(use_baseline):
        model.store.zero_grad()
        logp = model.logprob_tensor(prompts, states)
        gap = logp.data - target
        base = float(counts @ gap) / n if use_baseline else 0.0
        w = (gap - base) * counts / n
        backward(diff.sum_(diff.mul(logp, Tensor(w))))
        return np.concatenate([model.store[k].grad.reshape(-1) for k in model.store.names()])

    g1, g0 = grad(True), grad(False)
    assert np.linalg.norm(g1 - g0) / np.linalg.norm(g1) < 1e-3


def test_train_met_shrinks_kl(bd):
    ms = train_reward_set(
        bd, bd.default_rates, [0], 0.01, 0.05, [0.05], RewardHyper(width=16, epochs=30)
    )
    model = METModel(bd, SMALL, seed=16, normalization=ms.prompt_stats(bd))
    hyper = TrainHyper(
        s_batch=300, m_acc=1, epochs=150,
        schedule=Schedule(4e-3, warmup_steps=30, decay="inv_sqrt"), seed=17,
    )
    trace = train_met(model, ms, bd, hyper)
    kl = trace.kl_series()
    assert np.mean(kl[-20:]) < 0.1 * max(np.mean(kl[:10]), 1e-9) + 0.02


def test_ppo_flag_off_by_default_and_trainable(bd):
    ms = _delta_reward_set(bd, [4])
    assert TrainHyper(s_batch=10, m_acc=1, epochs=1, schedule=Schedule(1e-3)).ppo_clip is None
    model = METModel(bd, SMALL, seed=20, normalization=ms.prompt_stats(bd))
    hyper = TrainHyper(
        s_batch=100, m_acc=1, epochs=40,
        schedule=Schedule(3e-3, warmup_steps=10, decay="inv_sqrt"),
        seed=21, ppo_clip=0.2, ppo_iters=2,
    )
    trace = train_met(model, ms, bd, hyper)
    kl = trace.kl_series()
    assert kl[-1] < kl[0]  # clipped objective still makes progress


def test_loss_trace_csv(tmp_path, bd):
    ms = _delta_reward_set(bd, [2])
    model = METModel(bd, SMALL, seed=18, normalization=ms.prompt_stats(bd))
    hyper = TrainHyper(s_batch=50, m_acc=1, epochs=3, schedule=Schedule(1e-3), seed=19)
    trace = train_met(model, ms, bd, hyper)
    path = tmp_path / "trace.csv"
    trace.to_csv(path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "step,element,kl_estimate,lr"
    assert len(lines) == 4
