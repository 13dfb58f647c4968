import contextlib
import json
import logging
import os
import pathlib
import tempfile
import time

from common import meta
from common.structs import (
    Distribution,
    ExitFit,
    NoExit,
    OracleReport,
    ResponseSample,
    SweepResult,
    TriangleError,
)

MANIFEST_SUFFIX = ".manifest.json"
PARTIAL_SUFFIX = ".partial"

logger = logging.getLogger(__name__)
# Files written by the current run, renamed to *.partial if the run fails
written: list[pathlib.Path] = []


class ResultExistsError(TriangleError, FileExistsError):
    pass


def write_text_atomic(path: pathlib.Path, text: str, force: bool = False):
    path = pathlib.Path(path)
    if path.exists() and not force:
        raise ResultExistsError(f"Refusing to overwrite {path} (pass --force)")
    path.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.NamedTemporaryFile("w", encoding="utf-8", newline="\n", dir=path.parent, prefix=f".{path.name}.", suffix=".tmp", delete=False) as f:
        f.write(text)
        temp = pathlib.Path(f.name)
    try:
        os.replace(temp, path)
    except Exception:
        temp.unlink(missing_ok=True)
        raise
    written.append(path)
    logger.debug(f"Wrote {path}")


def format_prob(p: float):
    return format(float(p), ".17g")


def distribution_csv(dist: Distribution) -> str:
    lines = ["a,b,c,p"]
    for (a, b, c), p in zip(dist.outcomes(), dist.probs):
        lines.append(f"{a},{b},{c},{format_prob(p)}")
    return "\n".join(lines) + "\n"


def distribution_json(dist: Distribution) -> str:
    return json.dumps({"cardinality": dist.cardinality, "probs": [float(p) for p in dist.probs]}) + "\n"


def write_distribution(dist: Distribution, path: pathlib.Path, force: bool = False):
    path = pathlib.Path(path)
    text = distribution_json(dist) if path.suffix.lower() == ".json" else distribution_csv(dist)
    write_text_atomic(path, text, force=force)


def sweep_csv(result: SweepResult) -> str:
    lines = ["param,raw_distance,smoothed_distance,model_file"]
    for point in result.points:
        model_file = point.model_file.name if point.model_file else ""
        lines.append(f"{format_prob(point.param)},{format_prob(point.raw_distance)},{format_prob(point.smoothed_distance)},{model_file}")
    return "\n".join(lines) + "\n"


def exit_json(fit: ExitFit | NoExit) -> str:
    if isinstance(fit, NoExit):
        data = {
            "exit_detected": False,
            "message": fit.message,
            "max_distance": fit.max_distance,
            "threshold": fit.threshold,
        }
    else:
        data = {
            "exit_detected": True,
            "v_star_hat": fit.v_star_hat,
            "theta_hat_degrees": fit.theta_hat_degrees,
            "residual": fit.residual,
            "lattice": {
                "v_star": {"start": fit.lattice_v_star[0], "stop": fit.lattice_v_star[1], "count": fit.lattice_v_star[2]},
                "theta_degrees": {"start": fit.lattice_theta[0], "stop": fit.lattice_theta[1], "count": fit.lattice_theta[2]},
            },
        }
    return json.dumps(data, indent=1) + "\n"


def oracle_json(report: OracleReport) -> str:
    classical = report.classical
    data = {
        "d_model": report.d_model,
        "d_oracle": report.d_oracle,
        "gap": report.gap,
        "classical_model": {
            "hidden_cardinality": classical.hidden_cardinality,
            "deterministic": bool(classical.deterministic),
            "weights_alpha": classical.weights_alpha.tolist(),
            "weights_beta": classical.weights_beta.tolist(),
            "weights_gamma": classical.weights_gamma.tolist(),
            "response_a": classical.response_a.tolist(),
            "response_b": classical.response_b.tolist(),
            "response_c": classical.response_c.tolist(),
        },
    }
    return json.dumps(data, indent=1) + "\n"


def fit_json(label: str, param: float, distance: float) -> str:
    return json.dumps({"family": label, "param": param, "d_M": distance}, indent=1) + "\n"


def responses_csv(sample: ResponseSample) -> str:
    lines = ["latent1,latent2,outcome"]
    for latent1, latent2, outcome in zip(sample.latent1, sample.latent2, sample.outcomes):
        lines.append(f"{format_prob(latent1)},{format_prob(latent2)},{int(outcome)}")
    return "\n".join(lines) + "\n"


def manifest_path(path: pathlib.Path) -> pathlib.Path:
    path = pathlib.Path(path)
    return path.with_name(path.name + MANIFEST_SUFFIX)


def write_manifest(path: pathlib.Path, config: dict, seed: int, started: float, extra: dict = None, force: bool = False):
    data = {
        "result_file": pathlib.Path(path).name,
        "program": meta.name,
        "version": meta.version,
        "seed": seed,
        "config": config,
        "started": started,
        "wall_clock_seconds": round(time.time() - started, 3),
        **(extra or {}),
    }
    write_text_atomic(manifest_path(path), json.dumps(data, indent=1, default=str) + "\n", force=force)


@contextlib.contextmanager
def run_files():
    # Tracks files written inside the block; on failure they are kept with a .partial suffix
    written.clear()
    try:
        yield written
    except BaseException:
        for path in written:
            if path.exists():
                partial = path.with_name(path.name + PARTIAL_SUFFIX)
                os.replace(path, partial)
                logger.warning(f"Kept partial result {partial}")
        raise
    finally:
        written.clear()
