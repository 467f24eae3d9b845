import numpy as np
import pytest

from metaopt import corruptions as C
from metaopt import evaluation as E
from metaopt import learned_opt as lo
from metaopt.inner_loop import SGD, Adam, Learned
from metaopt.tasks import FixedSpec, TrainCorruptions


@pytest.fixture(scope="module")
def adam_run(toy):
    return E.inner_train(Adam(10**-2.5), toy, None, 300, 0, log_every=10)


def null_learned():
    theta = lo.init_learned_opt(np.random.default_rng(0))
    theta["w2"][:] = 0.0
    theta["b2"][:] = 0.0
    return Learned(theta)


def test_curve_length_and_finiteness(adam_run):
    assert len(adam_run.curve) == 300 // 10
    assert list(adam_run.curve_steps[:3]) == [10, 20, 30]
    assert np.all(np.isfinite(adam_run.curve)) and not adam_run.diverged


def test_inner_train_deterministic(toy, adam_run):
    again = E.inner_train(Adam(10**-2.5), toy, None, 300, 0, log_every=10)
    np.testing.assert_array_equal(again.curve, adam_run.curve)
    assert again.clean_test_loss == adam_run.clean_test_loss


def test_population_training_matches_single_runs(toy):
    runs = E.inner_train_many(Adam(1e-3), toy, None, 20, [3, 4])
    single = E.inner_train(Adam(1e-3), toy, None, 20, 4)
    np.testing.assert_allclose(runs[1].curve, single.curve, rtol=1e-12)


def test_null_learned_optimizer_keeps_initial_loss(toy):
    run = E.inner_train(null_learned(), toy, None, 40, 0, log_every=1)
    assert run.curve[-1] == pytest.approx(run.curve[0], rel=0.25)
    assert run.clean_test_loss == pytest.approx(np.log(4), rel=0.1)


def test_clean_learned_training_never_corrupts(toy):
    before = C.CALLS.count
    E.inner_train(null_learned(), toy, None, 10, 0)
    # only the clean test evaluation, which goes through the identity path, may follow
    assert C.CALLS.count == before


def test_noise_sweep_shape_and_identity_point(toy, adam_run):
    sweep = E.eval_noise_sweep(adam_run, toy, E.DEFAULT_SIGMAS, reps=3)
    assert 0.05 in [p.value for p in sweep.points]
    assert [p.value for p in sweep.points] == list(E.DEFAULT_SIGMAS)
    assert sweep.points[0].mean_loss == adam_run.clean_test_loss
    assert all(p.stderr >= 0 for p in sweep.points)
    assert sweep.points[0].stderr == 0
    assert sweep.points[-1].mean_loss > sweep.points[0].mean_loss


def test_severity_sweep(toy, adam_run):
    fog = E.eval_severity_sweep(adam_run, toy, "fog", reps=2)
    assert [p.value for p in fog.points] == [0, 1, 2, 3, 4, 5]
    assert fog.points[0].mean_loss == adam_run.clean_test_loss
    contrast = E.eval_severity_sweep(adam_run, toy, "contrast", severities=(1, 3), reps=4)
    for p in contrast.points:
        assert np.all(p.losses == p.losses[0]) and p.stderr == 0
    with pytest.raises(C.CorruptionSpecError):
        E.eval_severity_sweep(adam_run, toy, "snow")


def test_diverged_run_reports_ln_k(toy):
    run = E.inner_train(SGD(1e200), toy, None, 20, 0)
    assert run.diverged and run.clean_test_loss == pytest.approx(np.log(4))
    assert np.all(run.curve[-1] == pytest.approx(np.log(4)))
    sweep = E.eval_noise_sweep(run, toy, (0.0, 0.1), reps=2)
    assert all(p.mean_loss == pytest.approx(np.log(4)) for p in sweep.points)
    assert sweep.diverged


def test_training_on_corrupted_data(toy):
    fixed = E.inner_train(Adam(1e-3), toy, FixedSpec(C.CorruptionSpec.gaussian(0.05)), 10, 0)
    mixed = E.inner_train(Adam(1e-3), toy, TrainCorruptions(), 10, 0)
    assert fixed.mode == "gaussian_sigma:0.05" and mixed.mode == "train_corruptions"
    clean = E.inner_train(Adam(1e-3), toy, None, 10, 0)
    assert clean.mode == "clean" and not np.array_equal(clean.curve, fixed.curve)


def test_report_round_trip(tmp_path, toy, adam_run):
    sweep = E.eval_noise_sweep(adam_run, toy, (0.0, 0.1), reps=2)
    curves, sweeps = E.emit_report([adam_run], [sweep], tmp_path)
    rows = E.read_csv(curves)
    assert tuple(rows[0]) == E.CURVE_COLUMNS
    assert E.CURVE_COLUMNS[:4] == ("optimizer", "mode", "step", "loss")
    assert [float(r["loss"]) for r in rows] == list(adam_run.curve)
    srows = E.read_csv(sweeps)
    assert E.SWEEP_COLUMNS[:6] == ("optimizer", "mode", "axis_kind", "axis_value", "mean_loss", "stderr")
    assert [float(r["mean_loss"]) for r in srows] == [p.mean_loss for p in sweep.points]
    assert [float(r["stderr"]) for r in srows] == [p.stderr for p in sweep.points]


def test_empty_report_has_headers(tmp_path):
    curves, sweeps = E.emit_report([], [], tmp_path)
    assert curves.read_text().strip() == ",".join(E.CURVE_COLUMNS)
    assert sweeps.read_text().strip() == ",".join(E.SWEEP_COLUMNS)


def test_sweep_validation(toy, adam_run):
    with pytest.raises(ValueError):
        E.eval_noise_sweep(adam_run, toy, (0.0,), reps=0)
    with pytest.raises(C.CorruptionSpecError):
        E.eval_noise_sweep(adam_run, toy, (-0.1,))
