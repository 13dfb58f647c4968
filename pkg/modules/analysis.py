import asyncio
import concurrent.futures
import dataclasses
import io
import logging
import math
import pathlib

import numpy as np

from common.structs import (
    Distribution,
    ExitFit,
    FamilySpec,
    NoExit,
    Party,
    ResponseSample,
    SweepPoint,
    SweepResult,
    TrainConfig,
    TriangleError,
    TriangleModel,
)
from external import error
from modules import (
    colors,
    network,
    qdist,
    store,
    trainer,
    utils,
)

EXIT_LATTICE_POINTS = 200
EXIT_LATTICE_ANGLES = 90
EXIT_MIN_POINTS = 5
NO_EXIT_THRESHOLD = 0.005
EXIT_TIE_TOLERANCE = 1e-15
DEFAULT_SAMPLES_PER_POINT = 30

logger = logging.getLogger(__name__)


euclidean_distance = network.euclidean_distance


def _fit_worker(target: Distribution, cfg: TrainConfig, warm_start: TriangleModel = None):
    # Top level so worker processes can unpickle it
    return trainer.fit_model(target, cfg, warm_start)


async def _gather_fits(tasks: list[tuple], jobs: int):
    loop = asyncio.get_running_loop()
    with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as executor:
        futures = [loop.run_in_executor(executor, _fit_worker, *task) for task in tasks]
        return await asyncio.gather(*futures, return_exceptions=True)


def _run_fits(tasks: list[tuple], jobs: int) -> list:
    # Each entry is (model, distance) or the exception the fit raised
    if jobs > 1 and len(tasks) > 1:
        return asyncio.run(_gather_fits(tasks, min(jobs, len(tasks))))
    results = []
    for task in tasks:
        try:
            results.append(_fit_worker(*task))
        except Exception as exc:
            results.append(exc)
    return results


def point_config(cfg: TrainConfig, index: int) -> TrainConfig:
    return dataclasses.replace(cfg, rng_seed=utils.derive_seed(cfg.rng_seed, index))


def _warm_pass(points: list[SweepPoint], configs: list[TrainConfig], order: list[int]):
    for previous, current in zip(order, order[1:]):
        source, point = points[previous], points[current]
        if source.model is None:
            continue
        try:
            model, distance = trainer.fit_model(point.target, dataclasses.replace(configs[current], restarts=0), source.model)
        except Exception as exc:
            logger.warning(f"Warm start at {utils.format_param(point.param)} failed: {error.text(exc)}")
            continue
        if point.failed or distance < point.raw_distance:
            logger.info(
                f"Point {utils.format_param(point.param)}: warm start from {utils.format_param(source.param)} "
                f"improved d_M to {distance:.5f}"
            )
            point.model, point.raw_distance = model, distance
            point.failed, point.error = False, ""


def sweep(family: FamilySpec, grid: list[float], cfg: TrainConfig, jobs: int = 1, bidirectional: bool = False) -> SweepResult:
    # Independent fits first, then warm-started passes that keep the closer model per point
    grid = [float(param) for param in grid]
    for param in grid:
        if not family.contains(param):
            raise ValueError(f"Grid value {param} outside [{family.low}, {family.high}] of {family.label}")
    points = [SweepPoint(param, qdist.family_distribution(family, param)) for param in grid]
    result = SweepResult(family, cfg, points)
    configs = [point_config(cfg, index) for index in range(len(points))]

    logger.info(f"Sweeping {family.label} over {len(points)} points with {jobs} job(s)")
    outcomes = _run_fits([(point.target, point_cfg, None) for point, point_cfg in zip(points, configs)], jobs)
    for point, outcome in zip(points, outcomes):
        if isinstance(outcome, BaseException):
            point.failed, point.error = True, error.text(outcome)
            logger.warning(f"Point {utils.format_param(point.param)} failed: {point.error}")
            continue
        point.model, point.raw_distance = outcome
        logger.info(f"Point {utils.format_param(point.param)}: d_M {point.raw_distance:.5f}")

    indices = list(range(len(points)))
    _warm_pass(points, configs, indices)
    if bidirectional:
        _warm_pass(points, configs, indices[::-1])
    return result


def _point_model(point: SweepPoint) -> TriangleModel | None:
    if point.model is not None:
        return point.model
    if point.model_file is None:
        logger.warning(f"Point {utils.format_param(point.param)} has no model, skipped")
        return None
    try:
        return network.load_model(point.model_file)
    except (OSError, TriangleError) as exc:
        logger.warning(f"Checkpoint for {utils.format_param(point.param)} unavailable, skipped: {error.text(exc)}")
        return None


def cross_smooth(s: SweepResult) -> SweepResult:
    eval_batch = network.evaluation_batch(s.config.eval_batch_size, s.config.eval_seed)
    candidates = []
    for point in s.points:
        if (model := _point_model(point)) is None:
            continue
        candidates.append((point, model, network.model_distribution(model, eval_batch)))

    smoothed = []
    for point in s.points:
        best = point.raw_distance if math.isfinite(point.raw_distance) else math.inf
        owned = point.model is not None or point.model_file is not None
        winner = dataclasses.replace(point, model_param=point.param if owned else None)
        for source, model, dist in candidates:
            distance = euclidean_distance(point.target, dist)
            if distance < best:
                best = distance
                winner.model, winner.model_file, winner.model_param = model, source.model_file, source.param
        winner.smoothed_distance = best if math.isfinite(best) else math.nan
        if winner.model_param is not None and winner.model_param != point.param:
            logger.debug(
                f"Point {utils.format_param(point.param)}: model from {utils.format_param(winner.model_param)} "
                f"lowers d_M {point.raw_distance:.5f} -> {best:.5f}"
            )
        smoothed.append(winner)
    return SweepResult(s.family, s.config, smoothed)


def analytic_distance(family: FamilySpec, v: float, v_star: float, theta_degrees: float) -> float:
    for name, value in (("v", v), ("v_star", v_star)):
        if not family.contains(value):
            raise ValueError(f"{name} = {value} outside [{family.low}, {family.high}] of {family.label}")
    if v <= v_star:
        return 0.0
    gap = euclidean_distance(qdist.family_distribution(family, v), qdist.family_distribution(family, v_star))
    return gap * math.sin(math.radians(theta_degrees))


def exit_lattice(s: SweepResult) -> tuple[np.ndarray, np.ndarray]:
    grid = s.grid
    return np.linspace(grid[0], grid[-1], EXIT_LATTICE_POINTS), np.arange(1, EXIT_LATTICE_ANGLES + 1, dtype=float)


def _fit_distance(point: SweepPoint):
    return point.smoothed_distance if math.isfinite(point.smoothed_distance) else point.raw_distance


def fit_exit_params(s: SweepResult) -> ExitFit | NoExit:
    # Ties go to the larger v* and then the smaller angle
    points = [point for point in s.points if math.isfinite(_fit_distance(point))]
    if len(points) < EXIT_MIN_POINTS:
        raise ValueError(f"Exit fit needs at least {EXIT_MIN_POINTS} points with distances, got {len(points)}")
    observed = np.array([_fit_distance(point) for point in points])
    if (peak := float(observed.max())) < NO_EXIT_THRESHOLD:
        logger.info(f"Largest distance {peak:.5f} below {NO_EXIT_THRESHOLD}, no exit detected")
        return NoExit(peak, NO_EXIT_THRESHOLD)

    v_stars, thetas = exit_lattice(s)
    params = np.array([point.param for point in points])
    targets = np.stack([point.target.probs for point in points])
    lattice_targets = np.stack([qdist.family_distribution(s.family, float(v_star)).probs for v_star in v_stars])
    # gaps[j, i] = d(p_t(v_i), p_t(v*_j)) where v_i > v*_j, else 0
    gaps = np.linalg.norm(targets[None, :, :] - lattice_targets[:, None, :], axis=-1)
    gaps *= params[None, :] > v_stars[:, None]
    predicted = gaps[:, None, :] * np.sin(np.radians(thetas))[None, :, None]
    residuals = np.sum((predicted - observed[None, None, :]) ** 2, axis=-1)

    ties = np.argwhere(residuals <= residuals.min() + EXIT_TIE_TOLERANCE)
    j = ties[:, 0].max()
    k = ties[ties[:, 0] == j, 1].min()
    fit = ExitFit(
        v_star_hat=float(v_stars[j]),
        theta_hat_degrees=float(thetas[k]),
        residual=float(residuals[j, k]),
        lattice_v_star=(float(v_stars[0]), float(v_stars[-1]), EXIT_LATTICE_POINTS),
        lattice_theta=(float(thetas[0]), float(thetas[-1]), EXIT_LATTICE_ANGLES),
    )
    logger.info(f"Exit fit: v* = {fit.v_star_hat:.4f}, theta = {fit.theta_hat_degrees:.0f} deg, residual {fit.residual:.3e}")
    return fit


def response_sample(model: TriangleModel, party: Party, resolution: int, samples_per_point: int = DEFAULT_SAMPLES_PER_POINT, seed: int = 0) -> ResponseSample:
    if resolution < 2:
        raise ValueError(f"Resolution must be >= 2, got {resolution}")
    if samples_per_point < 1:
        raise ValueError(f"samples_per_point must be >= 1, got {samples_per_point}")
    axis = np.linspace(0.0, 1.0, resolution)
    first, second = (values.reshape(-1) for values in np.meshgrid(axis, axis, indexing="ij"))
    probs = network.forward(model.net(party), np.column_stack((first, second)))
    cdf = np.cumsum(probs, axis=1)
    draws = np.random.default_rng(seed).random((probs.shape[0], samples_per_point))
    outcomes = (draws[:, :, None] >= cdf[:, None, :]).sum(axis=-1)
    outcomes = np.minimum(outcomes, model.cardinality - 1)
    return ResponseSample(
        party=party,
        resolution=resolution,
        samples_per_point=samples_per_point,
        latent1=np.repeat(first, samples_per_point),
        latent2=np.repeat(second, samples_per_point),
        outcomes=outcomes.reshape(-1),
    )


def response_frequencies(sample: ResponseSample, cardinality: int) -> np.ndarray:
    # (resolution, resolution, cardinality) outcome frequencies per grid cell
    onehot = np.eye(cardinality)[sample.outcomes.reshape(-1, sample.samples_per_point)]
    return onehot.mean(axis=1).reshape(sample.resolution, sample.resolution, cardinality)


def response_total_variation(first: ResponseSample, second: ResponseSample, cardinality: int) -> np.ndarray:
    if (first.resolution, first.party) != (second.resolution, second.party):
        raise ValueError("Response samples cover different grids")
    diff = response_frequencies(first, cardinality) - response_frequencies(second, cardinality)
    return 0.5 * np.abs(diff).sum(axis=-1)


def render_svg(sample: ResponseSample, path: pathlib.Path, force: bool = False):
    import matplotlib
    matplotlib.use("Agg")
    from matplotlib import pyplot

    first, second = sample.party.latents
    with matplotlib.rc_context({"svg.hashsalt": "responses", "svg.fonttype": "none"}):
        figure, axes = pyplot.subplots(figsize=(5, 5))
        try:
            axes.scatter(
                sample.latent1,
                sample.latent2,
                s=4,
                c=[colors.outcome_rgba(int(outcome)) for outcome in sample.outcomes],
                linewidths=0,
            )
            axes.set_xlim(0, 1)
            axes.set_ylim(0, 1)
            axes.set_xlabel(first)
            axes.set_ylabel(second)
            axes.set_title(f"Party {sample.party.cli} responses")
            buffer = io.StringIO()
            figure.savefig(buffer, format="svg", metadata={"Date": None})
        finally:
            pyplot.close(figure)
    store.write_text_atomic(path, buffer.getvalue(), force=force)
