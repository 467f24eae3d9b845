import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metaopt import corruptions as C
from metaopt import learned_opt as lo
from metaopt import model
from metaopt import outer as O
from metaopt.baselines import adam_step, init_adam
from metaopt.corruptions import IDENTITY, CorruptionSpec
from metaopt.inner_loop import Adam, Learned, train_population

PAPER_SCHEDULE = O.TruncationSchedule()


def null_theta():
    theta = lo.init_learned_opt(np.random.default_rng(0))
    theta["w2"][:] = 0.0
    theta["b2"][:] = 0.0
    return theta


def divergent_theta():
    """Log-step bias 1e4 multiplies every step by e^10; directions stay those of a fresh init."""
    theta = lo.init_learned_opt(np.random.default_rng(2))
    theta["b2"][1] = 1e4
    return theta


# -- schedule --------------------------------------------------------------------


@pytest.mark.parametrize("it,expected", [(0, 100), (2500, 5050), (5000, 10_000), (12_345, 10_000)])
def test_schedule_without_jitter(it, expected):
    assert O.truncation_length(it, PAPER_SCHEDULE) == expected
    no_jitter = O.TruncationSchedule(jitter_frac=0.0)
    assert O.truncation_length(it, no_jitter, np.random.default_rng(0)) == expected


def test_schedule_jitter_bounds_10k_samples():
    rng = np.random.default_rng(0)
    for it in (0, 1234, 5000):
        base = PAPER_SCHEDULE.base(it)
        draws = np.array([O.truncation_length(it, PAPER_SCHEDULE, rng) for _ in range(10_000)])
        assert draws.min() >= 0.8 * base and draws.max() <= 1.2 * base
        assert draws.min() < base < draws.max()


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 500), st.integers(1, 20_000), st.integers(0, 5000), st.floats(0, 0.99), st.integers(0, 10**6), st.integers(0, 2**32 - 1))
def test_schedule_property(start, end, ramp, jitter, it, seed):
    sched = O.TruncationSchedule(start, end, ramp, jitter)
    n = O.truncation_length(it, sched, np.random.default_rng(seed))
    base = sched.base(it)
    assert n >= 1
    assert min(start, end) - 1 <= base <= max(start, end) + 1
    assert base * (1 - jitter) - 1e-9 <= n or n == 1
    assert n <= base * (1 + jitter) + 1e-9


def test_schedule_validation():
    with pytest.raises(ValueError):
        O.TruncationSchedule(jitter_frac=1.0)
    with pytest.raises(ValueError):
        O.TruncationSchedule(start_len=0)
    with pytest.raises(ValueError):
        O.truncation_length(-1, PAPER_SCHEDULE)


def test_es_config_validation():
    with pytest.raises(ValueError):
        O.ESConfig(sigma=0)
    with pytest.raises(ValueError):
        O.ESConfig(pairs_per_batch=0)
    with pytest.raises(ValueError):
        O.ESConfig(mode="fast")


# -- ES estimator ----------------------------------------------------------------


def test_es_constant_objective_exactly_zero(rng):
    g = O.es_gradient(rng.standard_normal(610), 0.01, 64, lambda th: np.full(len(th), 3.7), rng)
    assert np.array_equal(g, np.zeros(610))


def es_sq_error(d, n_pairs, seed, objective_kind):
    r = np.random.default_rng(seed)
    theta, target = r.standard_normal(d), r.standard_normal(d)
    if objective_kind == "quadratic":
        g = O.es_gradient(theta, 0.01, n_pairs, lambda th: np.sum((th - target) ** 2, axis=1), r)
        true = 2 * (theta - target)
    else:
        g = O.es_gradient(theta, 0.01, n_pairs, lambda th: 2.5 * th @ target, r)
        true = 2.5 * target
    return np.sum((g - true) ** 2) / np.sum(true**2)


@pytest.mark.parametrize("kind", ["quadratic", "linear"])
def test_es_error_matches_gaussian_theory(kind):
    # for Gaussian directions E|g - grad|^2 / |grad|^2 = (d + 1) / n_pairs on linear and quadratic objectives
    d, n = 610, 2048
    errs = [es_sq_error(d, n, s, kind) for s in range(12)]
    assert np.mean(errs) == pytest.approx((d + 1) / n, rel=0.1)


def test_es_error_shrinks_with_pairs():
    d = 50
    for n in (200, 3200):
        errs = [es_sq_error(d, n, s, "quadratic") for s in range(10)]
        assert np.mean(errs) == pytest.approx((d + 1) / n, rel=0.2)
    # enough pairs for the 5% relative-error target at this dimension
    assert np.sqrt(es_sq_error(d, 40_000, 0, "quadratic")) <= 0.05


def test_es_linear_cosine_with_enough_pairs():
    r = np.random.default_rng(1)
    e0 = r.standard_normal(50)
    g = O.es_gradient(np.zeros(50), 0.01, 2048, lambda th: 2.5 * th @ e0, r)
    assert g @ e0 / (np.linalg.norm(g) * np.linalg.norm(e0)) >= 0.95


def test_antithetic_interleaving(rng):
    theta, eps = rng.standard_normal(5), rng.standard_normal((3, 5))
    rows = O.antithetic_thetas(theta, eps, 0.1)
    np.testing.assert_allclose(rows[0::2] - theta, 0.1 * eps)
    np.testing.assert_allclose(rows[1::2] - theta, -0.1 * eps)
    np.testing.assert_allclose(O.es_combine(eps, np.array([3.0, 1.0] * 3), 0.1), eps.mean(axis=0) * 10.0)


def test_es_plus_adam_solves_quadratic_outer_task():
    rng = np.random.default_rng(0)
    target = rng.standard_normal(610) * 0.1
    loss = lambda th: np.sum((th - target) ** 2, axis=-1)  # noqa: E731
    theta = np.zeros(610)
    adam = init_adam(theta, 1e-2)
    start = loss(theta)
    for _ in range(200):
        g = O.es_gradient(theta, 0.01, 16, loss, rng)
        theta, adam = adam_step(adam, theta, g)
    assert loss(theta) <= start / 10


# -- outer loss and truncations --------------------------------------------------


def test_outer_loss_identity_is_plain_loss(toy, rng):
    params = model.init_inner(rng, toy.arch)
    b = toy.data.valid.full()
    assert O.outer_loss(params, toy.arch, IDENTITY, b.images, b.labels, rng) == model.loss(params, b.images, b.labels, toy.arch)


def test_outer_loss_zero_params_ln_k(toy, rng):
    zeros = {k: np.zeros(s) for k, s in toy.arch.param_shapes().items()}
    b = toy.data.valid.full()
    for spec in (IDENTITY, CorruptionSpec.gaussian(0.2), CorruptionSpec("fog", severity=5)):
        assert O.outer_loss(zeros, toy.arch, spec, b.images, b.labels, rng) == pytest.approx(np.log(4))


def test_outer_loss_grows_with_noise(toy):
    run = train_population(toy, Adam(10**-2.5), [0], 600)
    params = model.take(run.params, 0)
    b = toy.data.valid.full()
    rng = np.random.default_rng(0)
    clean = O.outer_loss(params, toy.arch, IDENTITY, b.images, b.labels, rng)
    noisy = np.mean([O.outer_loss(params, toy.arch, CorruptionSpec.gaussian(0.2), b.images, b.labels, rng) for _ in range(8)])
    assert noisy > clean


def test_null_theta_keeps_initial_loss(toy):
    unroll = O.init_unroll(toy, np.random.default_rng(3))
    mean, after, aborted = O.run_truncation(null_theta(), unroll, 1, np.random.default_rng(3), toy)
    assert not aborted
    for k in unroll.params:
        np.testing.assert_array_equal(after.params[k], unroll.params[k])
    assert mean == pytest.approx(float(unroll.initial_outer_loss[0]), rel=0.1)


def test_planted_divergent_theta_aborts_and_reinitializes(toy):
    unroll = O.init_unroll(toy, np.random.default_rng(3))
    mean, after, aborted = O.run_truncation(divergent_theta(), unroll, 20, np.random.default_rng(4), toy, eval_every=1)
    assert aborted
    # the recorded value is clipped at the abort threshold
    assert mean <= 2 * float(unroll.initial_outer_loss[0]) + 1e-12
    assert int(after.t[0]) == 0
    assert not np.any(after.opt_state.momenta["conv1_w"])
    assert not np.array_equal(after.params["conv1_w"], unroll.params["conv1_w"])
    assert np.all(after.initial_outer_loss > 0)


def test_truncation_mean_is_mean_of_evals(toy):
    streams = [np.random.default_rng(s) for s in (0, 1)]
    member_stream = np.array([0, 0, 1, 1])
    unroll = O.fresh_unrolls(toy, streams, member_stream)
    thetas = lo.theta_from_vector(np.stack([lo.theta_to_vector(lo.init_learned_opt(np.random.default_rng(i))) * 50 for i in range(4)]))
    res = O.run_truncations(thetas, unroll, np.array([23, 12]), toy, streams, member_stream, eval_every=5)
    for m, evals in enumerate(res.evals):
        assert res.mean_loss[m] == pytest.approx(np.mean(evals), rel=1e-15)
    # 23 steps: evals at 5, 10, 15, 20 and 23; 12 steps: 5, 10, 12
    assert [len(e) for e in res.evals] == [5, 5, 3, 3] or res.aborted.any()
    assert list(np.asarray(unroll.t)) == [23, 23, 12, 12] or res.aborted.any()


def test_pair_members_share_randomness(toy):
    streams = [np.random.default_rng(9)]
    unroll = O.fresh_unrolls(toy, streams, np.array([0, 0]))
    theta = lo.theta_from_vector(np.stack([lo.theta_to_vector(null_theta())] * 2))
    res = O.run_truncations(theta, unroll, np.array([7]), toy, streams, np.array([0, 0]), eval_every=3)
    assert res.evals[0] == res.evals[1]


def test_horizon_reset(toy):
    streams = [np.random.default_rng(0)]
    unroll = O.fresh_unrolls(toy, streams, np.array([0]))
    res = O.run_truncations(null_theta(), unroll, np.array([30]), toy, streams, np.array([0]), max_unroll_steps=10)
    assert res.reset[0] and not res.aborted[0]
    assert int(unroll.t[0]) == 0
    assert len(res.evals[0]) == 1  # 10 steps, eval at step 10


def test_inner_training_never_corrupts(toy):
    before = C.CALLS.count
    train_population(toy, Learned(lo.init_learned_opt(np.random.default_rng(0))), [0, 1], 25)
    assert C.CALLS.count == before


def test_truncation_corrupts_only_for_evals(toy):
    streams = [np.random.default_rng(0)]
    unroll = O.fresh_unrolls(toy, streams, np.array([0]))
    before = C.CALLS.count
    O.run_truncations(null_theta(), unroll, np.array([20]), toy, streams, np.array([0]), eval_every=10)
    assert C.CALLS.count - before == 2


# -- outer training --------------------------------------------------------------


def small_config(**kw):
    base = dict(sigma=0.01, pairs_per_batch=3, workers=1, outer_lr=3e-3, outer_iters=4, eval_every=5, checkpoint_every=2, max_unroll_steps=20)
    base.update(kw)
    return O.ESConfig(**base)


SMALL_SCHED = O.TruncationSchedule(5, 10, 4, 0.2)


def strip_wall(log):
    return [{k: v for k, v in r.items() if k != "wall_seconds"} for r in log]


def test_outer_train_deterministic(toy, tmp_path):
    a = O.outer_train(small_config(), SMALL_SCHED, toy, 5, tmp_path / "a")
    b = O.outer_train(small_config(), SMALL_SCHED, toy, 5, tmp_path / "b")
    assert np.array_equal(a.theta, b.theta)
    assert strip_wall(a.log) == strip_wall(b.log)
    for name in ("theta_000002.bin", "theta_000004.bin", "theta_final.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    c = O.outer_train(small_config(), SMALL_SCHED, toy, 6)
    assert not np.array_equal(a.theta, c.theta)


def test_outer_train_threaded_sync_matches_serial(toy):
    a = O.outer_train(small_config(), SMALL_SCHED, toy, 1)
    b = O.outer_train(small_config(workers=3), SMALL_SCHED, toy, 1)
    assert np.array_equal(a.theta, b.theta)
    assert strip_wall(a.log) == strip_wall(b.log)


def test_outer_train_log_file(toy, tmp_path):
    run = O.outer_train(small_config(), SMALL_SCHED, toy, 0, tmp_path)
    rows = O.read_log(tmp_path / "train_log.csv")
    assert [r["outer_iter"] for r in rows] == [0, 1, 2, 3]
    assert strip_wall(rows) == strip_wall(run.log)
    assert all(r["n_aborts"] >= 0 and r["mean_outer_loss"] > 0 for r in rows)
    assert np.array_equal(lo.theta_to_vector(lo.load_checkpoint(tmp_path / "theta_final.bin")), run.theta)


def test_outer_train_async_runs(toy):
    run = O.outer_train(small_config(mode="async", workers=3, staleness=1), SMALL_SCHED, toy, 0)
    assert len(run.log) == 4
    assert np.all(np.isfinite(run.theta))


def test_select_best_seed():
    assert O.select_best_seed([[2.0], [1.0], [3.0]]) == 1
    assert O.select_best_seed([[5.0]]) == 0
    assert O.select_best_seed([[1.0, 1.0], [3.0, 1.0]]) == 0
    logs = [[{"mean_outer_loss": v}] for v in (2.0, 1.0, 3.0)]
    assert O.select_best_seed(logs) == 1
    assert O.smoothed_final_loss([]) == np.inf


def test_outer_lr_schedules():
    const = O.ESConfig(outer_lr=0.01, outer_iters=100, workers=1)
    assert const.outer_lr_at(0) == const.outer_lr_at(99) == 0.01
    cos = O.ESConfig(outer_lr=0.01, outer_iters=100, workers=1, outer_lr_schedule="cosine")
    assert cos.outer_lr_at(0) == 0.01
    assert cos.outer_lr_at(50) == pytest.approx(0.005)
    assert cos.outer_lr_at(100) == pytest.approx(0.0, abs=1e-18)
    lrs = [cos.outer_lr_at(i) for i in range(101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        O.ESConfig(outer_lr_schedule="step")
    with pytest.raises(ValueError):
        O.ESConfig(outer_beta1=1.0)
