import json
import time

import numpy as np
import pytest

from common import meta
from common.structs import (
    Distribution,
    ExitFit,
    NoExit,
    Party,
    ResponseSample,
)
from modules import store


def test_write_refuses_overwrite(tmp_path):
    path = tmp_path / "out.csv"
    store.write_text_atomic(path, "first\n")
    with pytest.raises(FileExistsError, match="--force"):
        store.write_text_atomic(path, "second\n")
    assert path.read_text() == "first\n"
    store.write_text_atomic(path, "second\n", force=True)
    assert path.read_text() == "second\n"


def test_write_creates_parent_and_leaves_no_temp(tmp_path):
    path = tmp_path / "nested" / "dir" / "out.txt"
    store.write_text_atomic(path, "x")
    assert [p.name for p in path.parent.iterdir()] == ["out.txt"]


def test_distribution_csv_layout():
    lines = store.distribution_csv(Distribution.point_mass(2, 1, 0, 1)).splitlines()
    assert lines[0] == "a,b,c,p"
    assert len(lines) == 9
    assert lines[1] == "0,0,0,0"
    assert lines[6] == "1,0,1,1"


def test_exit_json_variants():
    fit = json.loads(store.exit_json(ExitFit(0.71, 88.0, 1e-5, (0.0, 1.0, 200), (1.0, 90.0, 90))))
    assert fit["exit_detected"]
    assert fit["lattice"]["v_star"]["count"] == 200
    none = json.loads(store.exit_json(NoExit(0.001, 0.005)))
    assert none == {"exit_detected": False, "message": "no exit detected", "max_distance": 0.001, "threshold": 0.005}


def test_manifest_contents(tmp_path):
    result = tmp_path / "target.csv"
    store.write_manifest(result, {"family": "fritz-visibility"}, seed=7, started=time.time(), extra={"chsh": 2.5})
    data = json.loads(store.manifest_path(result).read_text())
    assert data["result_file"] == "target.csv"
    assert data["program"] == meta.name
    assert data["version"] == meta.version
    assert data["seed"] == 7
    assert data["config"] == {"family": "fritz-visibility"}
    assert data["chsh"] == 2.5
    assert data["wall_clock_seconds"] >= 0


def test_failed_run_keeps_partial_files(tmp_path):
    path = tmp_path / "sweep.csv"
    with pytest.raises(RuntimeError):
        with store.run_files():
            store.write_text_atomic(path, "param\n")
            raise RuntimeError("interrupted")
    assert not path.exists()
    assert (tmp_path / "sweep.csv.partial").read_text() == "param\n"


def test_successful_run_keeps_final_names(tmp_path):
    path = tmp_path / "sweep.csv"
    with store.run_files() as written:
        store.write_text_atomic(path, "param\n")
        assert written == [path]
    assert path.exists()
    assert not (tmp_path / "sweep.csv.partial").exists()


def test_responses_csv():
    sample = ResponseSample(Party.A, 2, 1, np.array([0.0, 1.0]), np.array([0.5, 0.5]), np.array([3, 0]))
    assert store.responses_csv(sample) == "latent1,latent2,outcome\n0,0.5,3\n1,0.5,0\n"
