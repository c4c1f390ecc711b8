"""CLI integration tests."""

import json
import subprocess
import sys

from src.mock_providers import CANDIDATE_FILE
from src.pipeline import TRACE_FILE
from src.synth import ANNOTATIONS_FILE, GROUND_TRUTH_FILE
from src.uniground import main


def run_cli(*args):
    return subprocess.run(
        [sys.executable, "-m", "src.uniground", *args], capture_output=True, text=True
    )


def test_cli_help():
    """Verify --help works."""
    result = run_cli("--help")
    assert result.returncode == 0
    assert "usage:" in result.stdout.lower()
    for command in ("ingest", "segment", "ground", "eval", "synth", "ablate"):
        assert command in result.stdout


def test_cli_version():
    """Verify --version works."""
    result = run_cli("--version")
    assert result.returncode == 0
    assert "uniground 0.1.0" in result.stdout


def test_cli_missing_path():
    """Verify proper exit code for missing path."""
    result = run_cli("ingest", "/nonexistent/path")
    assert result.returncode == 2  # InputError


def test_cli_missing_command():
    """A subcommand is required."""
    assert run_cli().returncode == 2


def test_cli_synth_then_ingest(tmp_path):
    """A synthesised scene is accepted by ingest."""
    scene = tmp_path / "scene_0000"
    result = run_cli(
        "synth", "--objects", "1", "--frames", "8", "--resolution", "160x120", "--out", str(scene)
    )
    assert result.returncode == 0
    assert (scene / GROUND_TRUTH_FILE).is_file()

    output = tmp_path / "ingest.json"
    result = run_cli("ingest", str(scene), "-o", str(output), "-v")
    assert result.returncode == 0
    # INFO logs go to stderr
    assert "INFO" in result.stderr
    data = json.loads(output.read_text())
    assert data["_generator"] == "uniground/0.1.0"
    assert data["scene_id"] == "scene_0000"
    assert data["frame_count"] == 8
    assert data["resolutions"] == [[160, 120]]


def test_cli_quiet(tmp_path):
    """Verify quiet flag suppresses output."""
    result = run_cli("-q", "ingest", "/nonexistent/path")
    assert result.returncode == 2
    assert "INFO" not in result.stderr
    assert "WARNING" not in result.stderr


def test_bad_resolution():
    """Resolutions must look like WIDTHxHEIGHT."""
    assert run_cli("synth", "--resolution", "wide", "--out", "x").returncode == 2


def test_config_error(tmp_path, synthetic_scene):
    """An unreadable config file exits as an input error."""
    assert main(["ingest", str(synthetic_scene), "--config", str(tmp_path / "no.toml")]) == 2


def test_ground(tmp_path, synthetic_scene):
    """Grounding writes the result and keeps its work directory."""
    truth = json.loads((synthetic_scene / GROUND_TRUTH_FILE).read_text())
    query = truth["queries"][0]["text"]
    output = tmp_path / "ground.json"
    work = tmp_path / "work"
    args = ["ground", str(synthetic_scene), "--query", query, "--work-dir", str(work)]
    assert main([*args, "-o", str(output)]) == 0
    data = json.loads(output.read_text())
    assert data["selected"] in [c["candidate_id"] for c in data["candidates"]]
    assert data["trace"]["turn_count"] >= 1
    assert (work / CANDIDATE_FILE).is_file()
    assert (work / TRACE_FILE).is_file()


def test_eval(tmp_path, synthetic_scene):
    """Evaluation writes a report and its timing sidecar."""
    report = tmp_path / "report.json"
    assert main(["eval", str(synthetic_scene / ANNOTATIONS_FILE), "--out", str(report)]) == 0
    data = json.loads(report.read_text())
    assert data["query_count"] >= 1
    assert 0.0 <= data["acc_05"] <= data["acc_025"] <= 1.0
    assert (tmp_path / "report.timing.json").is_file()


def test_synth_invalid_settings(tmp_path):
    """Out-of-range synthesis settings are input errors."""
    assert main(["synth", "--objects", "0", "--out", str(tmp_path / "s")]) == 2
    assert not (tmp_path / "s").exists()


def test_ground_blank_query(tmp_path):
    """A blank query is rejected before the scene is touched."""
    assert main(["ground", str(tmp_path / "absent"), "--query", " "]) == 2
