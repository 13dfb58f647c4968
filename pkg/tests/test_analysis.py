import math

import numpy as np
import pytest

from common.structs import (
    Activation,
    Distribution,
    DistributionError,
    ExitFit,
    Family,
    FamilySpec,
    NoExit,
    Party,
    PartyNet,
    SweepPoint,
    SweepResult,
    TrainConfig,
    TriangleModel,
)
from modules import (
    analysis,
    network,
    qdist,
    trainer,
)

FRITZ = FamilySpec(Family.FritzVisibility)
TINY = TrainConfig(
    batch_size=200,
    eval_batch_size=1000,
    depth=1,
    width=6,
    activation=Activation.Tanh,
    training_steps=15,
    restarts=1,
    early_stop=False,
)


def _synthetic_sweep(v_star: float, theta: float, noise: float = 0.0, seed: int = 0) -> SweepResult:
    rng = np.random.default_rng(seed)
    points = []
    for v in np.round(np.arange(0, 1.0001, 0.05), 10):
        distance = analysis.analytic_distance(FRITZ, float(v), v_star, theta)
        distance += noise * rng.uniform(-1, 1)
        points.append(SweepPoint(float(v), qdist.fritz_family(float(v)), smoothed_distance=distance))
    return SweepResult(FRITZ, TINY, points)


def test_euclidean_distance_basics():
    p = qdist.fritz_family(0.3)
    assert analysis.euclidean_distance(p, p) == 0
    a = Distribution.point_mass(2, 0, 0, 0)
    b = Distribution.point_mass(2, 1, 1, 1)
    assert analysis.euclidean_distance(a, b) == pytest.approx(math.sqrt(2))


def test_euclidean_distance_is_symmetric():
    rng = np.random.default_rng(1)
    for _ in range(50):
        p = Distribution(4, rng.dirichlet(np.ones(64)))
        q = Distribution(4, rng.dirichlet(np.ones(64)))
        assert analysis.euclidean_distance(p, q) == analysis.euclidean_distance(q, p)


def test_euclidean_distance_rejects_cardinality_mismatch():
    with pytest.raises(DistributionError):
        analysis.euclidean_distance(Distribution.uniform(2), Distribution.uniform(4))


def test_analytic_distance_flat_below_exit():
    for v in (0.0, 0.3, 0.7):
        assert analysis.analytic_distance(FRITZ, v, 0.7, 45) == 0


def test_analytic_distance_at_right_angle_is_target_gap():
    v_star = 1 / math.sqrt(2)
    expected = analysis.euclidean_distance(qdist.fritz_family(1.0), qdist.fritz_family(v_star))
    assert analysis.analytic_distance(FRITZ, 1.0, v_star, 90) == pytest.approx(expected, abs=1e-15)
    assert analysis.analytic_distance(FRITZ, 1.0, v_star, 30) == pytest.approx(expected / 2, abs=1e-12)


def test_analytic_distance_is_continuous_at_exit():
    v_star = 0.6
    assert analysis.analytic_distance(FRITZ, v_star + 1e-9, v_star, 70) < 1e-8


def test_analytic_distance_matches_direct_computation():
    # Fritz points lie on a straight line in v, so the gap is linear
    v_star = 1 / math.sqrt(2)
    direct = np.linalg.norm(qdist.fritz_family(0.9).probs - qdist.fritz_family(v_star).probs)
    assert analysis.analytic_distance(FRITZ, 0.9, v_star, 90) == pytest.approx(direct, abs=1e-15)
    full = analysis.analytic_distance(FRITZ, 1.0, v_star, 90)
    assert direct == pytest.approx(full * (0.9 - v_star) / (1 - v_star), rel=1e-9)


def test_exit_fit_recovers_noise_free_parameters():
    lattice, _ = analysis.exit_lattice(_synthetic_sweep(0.7, 60))
    v_star = float(lattice[141])
    fit = analysis.fit_exit_params(_synthetic_sweep(v_star, 60))
    assert isinstance(fit, ExitFit)
    assert fit.v_star_hat == v_star
    assert fit.theta_hat_degrees == 60
    assert fit.residual < 1e-20
    assert fit.lattice_v_star == (0.0, 1.0, 200)
    assert fit.lattice_theta == (1.0, 90.0, 90)


def test_exit_fit_tolerates_small_noise():
    fit = analysis.fit_exit_params(_synthetic_sweep(0.62, 45, noise=5e-4, seed=3))
    assert abs(fit.v_star_hat - 0.62) < 0.02
    assert abs(fit.theta_hat_degrees - 45) <= 10


def test_exit_fit_reports_flat_sweep():
    sweep = _synthetic_sweep(1.0, 90)
    for point in sweep.points:
        point.smoothed_distance = 0.001
    result = analysis.fit_exit_params(sweep)
    assert isinstance(result, NoExit)
    assert result.message == "no exit detected"


def test_exit_fit_needs_five_points():
    sweep = _synthetic_sweep(0.5, 90)
    short = SweepResult(FRITZ, TINY, sweep.points[-4:])
    with pytest.raises(ValueError):
        analysis.fit_exit_params(short)


def test_single_point_sweep_equals_direct_fit():
    result = analysis.sweep(FRITZ, [0.8], TINY)
    assert len(result.points) == 1
    _, distance = trainer.fit_model(qdist.fritz_family(0.8), analysis.point_config(TINY, 0))
    assert result.points[0].raw_distance == distance


def test_sweep_rejects_grid_outside_family():
    with pytest.raises(ValueError):
        analysis.sweep(FamilySpec(Family.RenouScan), [0.4, 0.6], TINY)


def test_sweep_marks_failed_points(monkeypatch):
    failing = qdist.fritz_family(0.5)
    real_fit = trainer.fit_model

    def fake_fit(target, cfg, warm_start=None):
        if np.array_equal(target.probs, failing.probs):
            raise trainer.TrainingError("diverged")
        return real_fit(target, cfg, warm_start)

    monkeypatch.setattr(trainer, "fit_model", fake_fit)
    result = analysis.sweep(FRITZ, [0.25, 0.5, 0.75], TINY)
    assert [point.failed for point in result.points] == [False, True, False]
    assert "diverged" in result.points[1].error
    assert not result.completed


def test_warm_pass_keeps_best_distance():
    result = analysis.sweep(FRITZ, [0.2, 0.4, 0.6], TINY, bidirectional=True)
    for index, point in enumerate(result.points):
        _, independent = trainer.fit_model(point.target, analysis.point_config(TINY, index))
        assert point.raw_distance <= independent


def test_parallel_sweep_matches_serial():
    serial = analysis.sweep(FRITZ, [0.3, 0.9], TINY, jobs=1)
    parallel = analysis.sweep(FRITZ, [0.3, 0.9], TINY, jobs=2)
    assert [p.raw_distance for p in serial.points] == [p.raw_distance for p in parallel.points]


def _sweep_with_models(params, seed: int = 0) -> SweepResult:
    rng = np.random.default_rng(seed)
    batch = network.evaluation_batch(TINY.eval_batch_size, TINY.eval_seed)
    points = []
    for v in params:
        target = qdist.fritz_family(v)
        model = network.init_model(4, TINY, rng)
        distance = analysis.euclidean_distance(target, network.model_distribution(model, batch))
        points.append(SweepPoint(v, target, raw_distance=distance, model=model))
    return SweepResult(FRITZ, TINY, points)


def test_cross_smooth_never_increases_distance():
    smoothed = analysis.cross_smooth(_sweep_with_models([0.1, 0.4, 0.7, 1.0]))
    for point in smoothed.points:
        assert point.smoothed_distance <= point.raw_distance
        assert point.model_param in (0.1, 0.4, 0.7, 1.0)


def test_cross_smooth_picks_the_best_model():
    sweep = _sweep_with_models([0.2, 0.5, 0.8])
    batch = network.evaluation_batch(TINY.eval_batch_size, TINY.eval_seed)
    smoothed = analysis.cross_smooth(sweep)
    for point in smoothed.points:
        best = min(
            analysis.euclidean_distance(point.target, network.model_distribution(source.model, batch))
            for source in sweep.points
        )
        assert point.smoothed_distance == pytest.approx(best, abs=1e-15)


def test_cross_smooth_singleton_unchanged():
    sweep = _sweep_with_models([0.5])
    point = analysis.cross_smooth(sweep).points[0]
    assert point.smoothed_distance == point.raw_distance
    assert point.model is sweep.points[0].model


def test_cross_smooth_skips_missing_checkpoint(tmp_path, caplog):
    sweep = _sweep_with_models([0.3, 0.6])
    missing = sweep.points[0]
    missing.model, missing.raw_distance = None, math.nan
    missing.model_file = tmp_path / "gone.json"
    smoothed = analysis.cross_smooth(sweep)
    assert "skipped" in caplog.text
    assert smoothed.points[0].model_param == 0.6
    assert math.isfinite(smoothed.points[0].smoothed_distance)


def test_cross_smooth_loads_checkpoints(tmp_path):
    sweep = _sweep_with_models([0.3, 0.6])
    for index, point in enumerate(sweep.points):
        point.model_file = tmp_path / f"model-{index}.json"
        network.save_model(point.model, point.model_file, TINY)
        point.model = None
    smoothed = analysis.cross_smooth(sweep)
    for point in smoothed.points:
        assert point.smoothed_distance <= point.raw_distance


def _one_hot_model(outcome: int) -> TriangleModel:
    logits = np.zeros(4)
    logits[outcome] = 500
    net = PartyNet((2, 3, 4), [np.zeros((2, 3)), np.zeros((3, 4))], [np.zeros(3), logits])
    return TriangleModel(net, net, net)


def test_response_sample_counts():
    model = network.init_model(4, TINY, np.random.default_rng(0))
    sample = analysis.response_sample(model, Party.B, resolution=7, samples_per_point=5, seed=1)
    assert sample.records.shape == (7 * 7 * 5, 3)
    assert set(np.unique(sample.outcomes)) <= {0, 1, 2, 3}
    assert sample.latent1.min() == 0 and sample.latent1.max() == 1


def test_response_sample_default_is_thirty_draws():
    model = network.init_model(4, TINY, np.random.default_rng(0))
    assert analysis.response_sample(model, Party.A, resolution=2).outcomes.size == 4 * 30


def test_one_hot_responses_are_constant():
    sample = analysis.response_sample(_one_hot_model(2), Party.C, resolution=4, samples_per_point=10)
    assert np.all(sample.outcomes == 2)
    frequencies = analysis.response_frequencies(sample, 4)
    np.testing.assert_array_equal(frequencies[..., 2], 1)


def test_response_sample_is_seeded():
    model = network.init_model(4, TINY, np.random.default_rng(0))
    first = analysis.response_sample(model, Party.B, 5, 4, seed=3)
    second = analysis.response_sample(model, Party.B, 5, 4, seed=3)
    np.testing.assert_array_equal(first.outcomes, second.outcomes)
    assert np.all(analysis.response_total_variation(first, second, 4) == 0)


def test_response_sample_rejects_tiny_grid():
    with pytest.raises(ValueError):
        analysis.response_sample(_one_hot_model(0), Party.A, resolution=1)


def test_render_svg_writes_scatter(tmp_path):
    sample = analysis.response_sample(_one_hot_model(1), Party.B, resolution=3, samples_per_point=2)
    path = tmp_path / "responses.svg"
    analysis.render_svg(sample, path)
    text = path.read_text()
    assert text.lstrip().startswith("<?xml")
    assert "<svg" in text


@pytest.mark.slow
def test_fritz_sweep_exits_near_inverse_sqrt_two():
    grid = [round(0.05 * i, 10) for i in range(21)]
    result = analysis.cross_smooth(analysis.sweep(FRITZ, grid, TrainConfig()))
    assert all(point.raw_distance < 0.01 for point in result.points if point.param <= 0.65)
    fit = analysis.fit_exit_params(result)
    assert 0.69 <= fit.v_star_hat <= 0.73
    assert 85 <= fit.theta_hat_degrees <= 90


@pytest.mark.slow
@pytest.mark.parametrize("family, v_star, theta", [
    (Family.ElegantVisibility, 0.80, 50),
    (Family.ElegantDetector, 0.86, 60),
])
def test_elegant_sweeps_exit(family, v_star, theta):
    grid = [round(0.5 + 0.02 * i, 10) for i in range(26)]
    result = analysis.cross_smooth(analysis.sweep(FamilySpec(family), grid, TrainConfig(), bidirectional=True))
    fit = analysis.fit_exit_params(result)
    assert abs(fit.v_star_hat - v_star) <= 0.03
    assert abs(fit.theta_hat_degrees - theta) <= 10


@pytest.mark.slow
def test_renou_scan_has_two_bumps():
    grid = [round(0.5 + 0.01 * i, 10) for i in range(51)]
    result = analysis.cross_smooth(analysis.sweep(FamilySpec(Family.RenouScan), grid, TrainConfig(), bidirectional=True))
    by_param = {point.param: point.smoothed_distance for point in result.points}
    assert by_param[0.5] < 0.002 and by_param[1.0] < 0.002
    assert max(d for u2, d in by_param.items() if 0.785 < u2 < 1) > 0.002
    assert max(d for u2, d in by_param.items() if 0.5 < u2 < 0.785) > 0.002


@pytest.mark.slow
def test_fritz_responses_agree_above_exit():
    grid = [0.71, 0.8, 0.9, 1.0]
    result = analysis.cross_smooth(analysis.sweep(FRITZ, grid, TrainConfig()))
    low = analysis.response_sample(result.points[0].model, Party.B, 20, 30, seed=0)
    high = analysis.response_sample(result.points[-1].model, Party.B, 20, 30, seed=0)
    assert analysis.response_total_variation(low, high, 4).mean() < 0.05
