import argparse
import configparser
import json
import logging
import pathlib
import time

from common import (
    meta,
    parser,
)
from common.structs import (
    Activation,
    Command,
    Distribution,
    Family,
    FamilySpec,
    Loss,
    Party,
    RunConfig,
    SweepPoint,
    SweepResult,
    TrainConfig,
    TriangleError,
)
from external import error
from modules import (
    analysis,
    network,
    oracle,
    qdist,
    store,
    trainer,
    utils,
)

DEFAULT_TARGET_FILE = pathlib.Path("target.csv")
DEFAULT_OUT_DIR = pathlib.Path("results")
RENOU_NOISY = (Family.RenouVisibility, Family.RenouDetector)

# Flag name -> value parser; config file keys are the same names
OPTIONS = {
    "family": str,
    "noise": str,
    "v": float,
    "u2": float,
    "grid": str,
    "batch-size": int,
    "eval-batch-size": int,
    "depth": int,
    "width": int,
    "activation": str,
    "loss": str,
    "lr": float,
    "steps": int,
    "restarts": int,
    "seed": int,
    "jobs": int,
    "out": pathlib.Path,
    "target": pathlib.Path,
    "model": pathlib.Path,
    "sweep": pathlib.Path,
    "party": str,
    "resolution": int,
    "samples": int,
    "hidden-cardinality": int,
}
SWITCHES = ("force", "svg", "bidirectional", "verbose")
TRAIN_OPTIONS = {
    "batch_size": "batch_size",
    "eval_batch_size": "eval_batch_size",
    "depth": "depth",
    "width": "width",
    "lr": "learning_rate",
    "steps": "training_steps",
    "restarts": "restarts",
    "seed": "rng_seed",
}

logger = logging.getLogger(__name__)


class UsageError(TriangleError, ValueError):
    pass


class IncompleteRunError(TriangleError):
    pass


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def _argument_parser() -> _ArgumentParser:
    args = _ArgumentParser(prog=meta.name, description="Triangle network nonlocality oracle", allow_abbrev=False)
    args.add_argument("command", choices=[command.cli for command in Command])
    for name, kind in OPTIONS.items():
        flags = [f"--{name}"] + (["-o"] if name == "out" else [])
        args.add_argument(*flags, dest=name.replace("-", "_"), type=kind, default=None)
    for name in SWITCHES:
        args.add_argument(f"--{name}", dest=name, action="store_true", default=None)
    args.add_argument("--config", type=pathlib.Path, default=None)
    return args


def read_config_file(path: pathlib.Path) -> dict:
    try:
        text = pathlib.Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"Cannot read config file {path}: {error.text(exc)}")
    try:
        raw = parser.config_file(text, str(path))
    except parser.ParserError as exc:
        raise UsageError(exc.message)
    values = {}
    for key, text in raw.items():
        name = key.replace("_", "-")
        if name in SWITCHES:
            if text.strip().lower() not in configparser.RawConfigParser.BOOLEAN_STATES:
                raise UsageError(f"{path}: '{key}' expects a boolean, got '{text}'")
            values[name.replace("-", "_")] = configparser.RawConfigParser.BOOLEAN_STATES[text.strip().lower()]
        elif name in OPTIONS:
            try:
                values[name.replace("-", "_")] = OPTIONS[name](text.strip())
            except ValueError:
                raise UsageError(f"{path}: invalid value '{text}' for '{key}'")
        else:
            raise UsageError(f"{path}: unknown key '{key}'")
    return values


def _resolve_family(token: str, noise: str | None) -> Family:
    try:
        family = Family.from_cli(token)
    except ValueError as exc:
        matches = [family for family in Family if family.base == token and (noise is None or family.noise.cli == noise)]
        if noise is None or len(matches) != 1:
            raise UsageError(exc.args[0] + (f" with noise '{noise}'" if noise else ""))
        return matches[0]
    if noise is not None and family.noise.cli != noise:
        raise UsageError(f"Family '{token}' does not use noise '{noise}'")
    return family


def _family_spec(values: dict) -> FamilySpec | None:
    if values.get("family") is None:
        if values.get("noise") is not None:
            raise UsageError("--noise needs --family")
        return None
    family = _resolve_family(values["family"], values.get("noise"))
    u2 = values.get("u2")
    if family in RENOU_NOISY:
        if u2 is None:
            raise UsageError(f"Family '{family.cli}' needs --u2")
        if not 0.5 <= u2 <= 1.0:
            raise UsageError(f"--u2 {u2} outside [0.5, 1]")
        return FamilySpec(family, u2)
    return FamilySpec(family)


def _train_config(values: dict) -> TrainConfig:
    kwargs = {field: values[option] for option, field in TRAIN_OPTIONS.items() if values.get(option) is not None}
    try:
        if values.get("activation") is not None:
            kwargs["activation"] = Activation.from_cli(values["activation"])
        if values.get("loss") is not None:
            kwargs["loss"] = Loss.from_cli(values["loss"])
        return TrainConfig(**kwargs)
    except ValueError as exc:
        raise UsageError(str(exc))


def point_param(cfg: RunConfig) -> float:
    # Curve coordinate of a single-point command: u^2 for the clean Renou scan, v otherwise
    if cfg.family.family is Family.RenouScan:
        if cfg.u2 is None:
            raise UsageError("Family 'renou-scan' needs --u2")
        return cfg.u2
    if cfg.v is None:
        raise UsageError(f"Family '{cfg.family.family.cli}' needs --v")
    return cfg.v


def _check_range(spec: FamilySpec, param: float, flag: str):
    if not spec.contains(param):
        raise UsageError(f"{flag} {param:g} outside [{spec.low:g}, {spec.high:g}] of {spec.label}")


def _grid(token: str, spec: FamilySpec) -> list[float]:
    try:
        values = parser.grid(token)
    except parser.ParserError as exc:
        raise UsageError(exc.message)
    if values[0] < spec.low:
        raise UsageError(f"Grid '{token}' starts at {values[0]:g}, below the {spec.label} range {spec.low:g}")
    if values[-1] > spec.high:
        raise UsageError(f"Grid '{token}' ends at {values[-1]:g}, above the {spec.label} range {spec.high:g}")
    return values


def parse_args(argv: list[str]) -> RunConfig:
    """
    Defaults, then the --config file, then flags. Anything unknown or out
    of range raises UsageError naming the offending token.
    """
    args = _argument_parser().parse_args(argv)
    values = read_config_file(args.config) if args.config else {}
    values.update({key: value for key, value in vars(args).items() if value is not None and key not in ("command", "config")})

    command = Command.from_cli(args.command)
    spec = _family_spec(values)
    cfg = RunConfig(
        command=command,
        family=spec,
        v=values.get("v"),
        u2=values.get("u2"),
        train=_train_config(values),
        out=values.get("out") or (DEFAULT_TARGET_FILE if command is Command.GenTarget else DEFAULT_OUT_DIR),
        seed=values.get("seed", 0),
        jobs=values.get("jobs", utils.default_jobs()),
        force=values.get("force", False),
        bidirectional=values.get("bidirectional", False),
        target=values.get("target"),
        model=values.get("model"),
        sweep=values.get("sweep"),
        resolution=values.get("resolution", 100),
        samples=values.get("samples", analysis.DEFAULT_SAMPLES_PER_POINT),
        svg=values.get("svg", False),
        hidden_cardinality=values.get("hidden_cardinality", oracle.MAX_HIDDEN_CARDINALITY),
        verbose=values.get("verbose", False),
        config_file=args.config,
    )
    if values.get("party") is not None:
        try:
            cfg.party = Party.from_cli(values["party"].upper())
        except ValueError as exc:
            raise UsageError(str(exc))
    if cfg.jobs < 1:
        raise UsageError(f"--jobs {cfg.jobs} must be >= 1")
    if cfg.v is not None and spec is not None and spec.family is not Family.RenouScan:
        _check_range(spec, cfg.v, "--v")
    if cfg.u2 is not None and not 0.5 <= cfg.u2 <= 1.0:
        raise UsageError(f"--u2 {cfg.u2:g} outside [0.5, 1]")

    match command:
        case Command.GenTarget | Command.Train:
            if spec is None and not (command is Command.Train and cfg.target):
                raise UsageError(f"'{command.cli}' needs --family")
            if spec is not None:
                point_param(cfg)
        case Command.Sweep:
            if spec is None or values.get("grid") is None:
                raise UsageError("'sweep' needs --family and --grid")
            cfg.grid = _grid(values["grid"], spec)
        case Command.FitExit:
            if cfg.sweep is None:
                raise UsageError("'fit-exit' needs --sweep")
        case Command.Oracle:
            if cfg.target is None and spec is None:
                raise UsageError("'oracle' needs --target or --family")
            if spec is not None and cfg.target is None:
                point_param(cfg)
        case Command.Responses:
            if cfg.model is None:
                raise UsageError("'responses' needs --model")
            if cfg.resolution < 2:
                raise UsageError(f"--resolution {cfg.resolution} must be >= 2")
            if cfg.samples < 1:
                raise UsageError(f"--samples {cfg.samples} must be >= 1")
    return cfg


def _write_result(cfg: RunConfig, path: pathlib.Path, text: str, started: float, extra: dict = None):
    store.write_text_atomic(path, text, force=cfg.force)
    store.write_manifest(path, cfg.to_dict(), cfg.seed, started, extra, force=cfg.force)


def _save_checkpoint(cfg: RunConfig, model, path: pathlib.Path, started: float, extra: dict = None):
    network.save_model(model, path, cfg.train, force=cfg.force)
    store.write_manifest(path, cfg.to_dict(), cfg.seed, started, extra, force=cfg.force)


def _gen_target(cfg: RunConfig, started: float) -> int:
    param = point_param(cfg)
    dist = qdist.family_distribution(cfg.family, param)
    extra = {"family": cfg.family.label, "param": param}
    if cfg.family.family is Family.FritzVisibility:
        extra["chsh"] = qdist.chsh_value(dist)
    store.write_distribution(dist, cfg.out, force=cfg.force)
    store.write_manifest(cfg.out, cfg.to_dict(), cfg.seed, started, extra, force=cfg.force)
    logger.info(f"Wrote {cfg.family.label} target at {utils.format_param(param)} to {cfg.out}")
    return 0


def _load_target(cfg: RunConfig) -> tuple[Distribution, str, float | None]:
    if cfg.target is not None:
        return parser.read_distribution(cfg.target), cfg.target.name, None
    param = point_param(cfg)
    return qdist.family_distribution(cfg.family, param), cfg.family.label, param


def _train(cfg: RunConfig, started: float) -> int:
    target, label, param = _load_target(cfg)
    warm_start = network.load_model(cfg.model) if cfg.model else None
    model, distance = trainer.fit_model(target, cfg.train, warm_start)
    extra = {"family": label, "param": param, "d_M": distance}
    _save_checkpoint(cfg, model, cfg.out / "model.json", started, extra)
    _write_result(cfg, cfg.out / "fit.json", store.fit_json(label, param, distance), started, extra)
    logger.info(f"{label}: d_M {distance:.5f}")
    return 0


def _sweep(cfg: RunConfig, started: float) -> int:
    result = analysis.sweep(cfg.family, cfg.grid, cfg.train, jobs=cfg.jobs, bidirectional=cfg.bidirectional)
    for index, point in enumerate(result.points):
        if point.model is not None:
            point.model_file = cfg.out / f"model-{index:03d}.json"
            _save_checkpoint(cfg, point.model, point.model_file, started, {"param": point.param, "d_M": point.raw_distance})
    result = analysis.cross_smooth(result)
    sweep_file = cfg.out / "sweep.csv"
    failed = [point for point in result.points if point.failed]
    extra = {"family": cfg.family.label, "failed_points": [point.param for point in failed]}
    _write_result(cfg, sweep_file, store.sweep_csv(result), started, extra)
    try:
        fit = analysis.fit_exit_params(result)
    except ValueError as exc:
        logger.info(f"Skipping exit fit: {error.text(exc)}")
    else:
        _write_result(cfg, sweep_file.with_suffix(".exit.json"), store.exit_json(fit), started, extra)
    if failed:
        raise IncompleteRunError(f"{len(failed)} of {len(result.points)} sweep points failed")
    return 0


def _sweep_family(cfg: RunConfig) -> FamilySpec:
    if cfg.family is not None:
        return cfg.family
    manifest = store.manifest_path(cfg.sweep)
    try:
        family = json.loads(manifest.read_text(encoding="utf-8"))["config"]["family"]
        return FamilySpec(Family.from_cli(family["family"]), family["renou_u_squared"])
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"No --family given and none readable from {manifest}: {error.text(exc)}")


def _fit_exit(cfg: RunConfig, started: float) -> int:
    spec = _sweep_family(cfg)
    sweep_file = pathlib.Path(cfg.sweep)
    rows = parser.sweep_csv(sweep_file.read_text(encoding="utf-8"), str(sweep_file))
    points = [
        SweepPoint(
            param,
            qdist.family_distribution(spec, param),
            raw_distance=raw,
            smoothed_distance=smoothed,
            model_file=sweep_file.parent / model_file if model_file else None,
        )
        for param, raw, smoothed, model_file in rows
    ]
    fit = analysis.fit_exit_params(SweepResult(spec, cfg.train, points))
    _write_result(cfg, cfg.out / "exit.json", store.exit_json(fit), started, {"family": spec.label, "sweep": str(sweep_file)})
    return 0


def _oracle(cfg: RunConfig, started: float) -> int:
    target, label, param = _load_target(cfg)
    report = oracle.nn_vs_oracle(target, cfg.train, cfg.hidden_cardinality)
    extra = {"target": label, "param": param, "hidden_cardinality": cfg.hidden_cardinality}
    _save_checkpoint(cfg, report.model, cfg.out / "oracle-model.json", started, extra)
    _write_result(cfg, cfg.out / "oracle.json", store.oracle_json(report), started, extra)
    logger.info(f"d_oracle {report.d_oracle:.5f}, d_M {report.d_model:.5f}")
    return 0


def _responses(cfg: RunConfig, started: float) -> int:
    model = network.load_model(cfg.model)
    sample = analysis.response_sample(model, cfg.party, cfg.resolution, cfg.samples, seed=cfg.seed)
    stem = f"responses-{cfg.party.cli}"
    extra = {"model": str(cfg.model), "party": cfg.party.cli}
    _write_result(cfg, cfg.out / f"{stem}.csv", store.responses_csv(sample), started, extra)
    if cfg.svg:
        svg_file = cfg.out / f"{stem}.svg"
        analysis.render_svg(sample, svg_file, force=cfg.force)
        store.write_manifest(svg_file, cfg.to_dict(), cfg.seed, started, extra, force=cfg.force)
    return 0


HANDLERS = {
    Command.GenTarget: _gen_target,
    Command.Train: _train,
    Command.Sweep: _sweep,
    Command.FitExit: _fit_exit,
    Command.Oracle: _oracle,
    Command.Responses: _responses,
}


def run(cfg: RunConfig) -> int:
    started = time.time()
    logger.debug(f"Running {cfg.command.cli} with {cfg.to_dict()}")
    try:
        with store.run_files():
            return HANDLERS[cfg.command](cfg, started)
    except Exception as exc:
        logger.error(f"{cfg.command.cli} failed: {error.text(exc)}")
        logger.debug(error.traceback(exc))
        return 1
