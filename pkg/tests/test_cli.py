import json
import os
import subprocess
import sys

import pytest

from conftest import SMALL_CONFIGS, small_config
from impactlab.cli import (
    EXIT_CONFIG,
    EXIT_IO,
    EXIT_MISMATCH,
    EXIT_OK,
    main,
    registry_listing,
    verify_manifest,
    version_string,
)


def _write(tmp_path, config, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(config))
    return path


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr().out


@pytest.mark.parametrize("stem", SMALL_CONFIGS)
def test_every_experiment_runs_and_verifies(stem, tmp_path, capsys):
    cfg = _write(tmp_path, small_config(stem))
    out = tmp_path / "out"
    code, text = _run(capsys, "run", cfg, "--out", out, "--threads", 2)
    assert code == EXIT_OK, text
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == small_config(stem)["seed"]
    assert manifest["threads"] == 2
    assert manifest["artifacts"]
    code, text = _run(capsys, "verify", out / "manifest.json")
    assert code == EXIT_OK, text


def test_runs_are_byte_identical(tmp_path, capsys):
    cfg = _write(tmp_path, small_config("hedge_cosine"))
    digests = []
    for k, threads in enumerate((1, 3)):
        out = tmp_path / f"out{k}"
        assert _run(capsys, "run", cfg, "--out", out, "--threads", threads)[0] == EXIT_OK
        digests.append(json.loads((out / "manifest.json").read_text())["artifacts"])
    assert digests[0] == digests[1]


def test_missing_seed_exits_with_config_error(tmp_path, capsys):
    config = small_config("price_cosine")
    del config["seed"]
    code, text = _run(capsys, "run", _write(tmp_path, config), "--out", tmp_path / "o")
    assert code == EXIT_CONFIG
    report = json.loads(text)
    assert report["missing"] == ["seed"]
    assert not (tmp_path / "o").exists()


def test_bad_model_parameters_are_config_errors(tmp_path, capsys):
    config = small_config("price_cosine")
    config["model"]["impact"]["params"] = {"lam": -1.0}
    code, text = _run(capsys, "run", _write(tmp_path, config), "--out", tmp_path / "o")
    assert code == EXIT_CONFIG, text


def test_unreadable_config_is_an_io_error(tmp_path, capsys):
    code, text = _run(capsys, "run", tmp_path / "absent.json")
    assert code == EXIT_IO
    assert json.loads(text)["error"] == "io"


def test_nonpositive_threads(tmp_path, capsys):
    code, _ = _run(capsys, "run", _write(tmp_path, small_config("price_cosine")), "--threads", 0)
    assert code == EXIT_CONFIG


def test_writes_stay_inside_the_output_directory(tmp_path, capsys, monkeypatch):
    work = tmp_path / "work"
    work.mkdir()
    cfg = _write(tmp_path, small_config("curve_check_sinusoidal"))
    monkeypatch.chdir(work)
    before = set(os.listdir(tmp_path))
    assert _run(capsys, "run", cfg, "--out", tmp_path / "only")[0] == EXIT_OK
    assert set(os.listdir(tmp_path)) - before == {"only"}
    assert os.listdir(work) == []


def test_default_output_directory(tmp_path, capsys, monkeypatch):
    cfg = _write(tmp_path, small_config("curve_check_sinusoidal"))
    monkeypatch.chdir(tmp_path)
    assert _run(capsys, "run", cfg)[0] == EXIT_OK
    (run_dir,) = (tmp_path / "runs").iterdir()
    assert run_dir.name.startswith("curve-check-")


def test_tampering_is_detected(tmp_path, capsys):
    cfg = _write(tmp_path, small_config("price_cosine"))
    out = tmp_path / "out"
    _run(capsys, "run", cfg, "--out", out)
    grid = out / "w_grid.csv"
    grid.write_text(grid.read_text().replace("0", "1", 1))
    checks = dict((name, ok) for name, ok, _ in verify_manifest(out / "manifest.json"))
    assert not checks["w_grid.csv"] and checks["pde_diagnostics.json"]
    assert _run(capsys, "verify", out / "manifest.json")[0] == EXIT_MISMATCH


def test_registry_is_stable(capsys):
    code, text = _run(capsys, "registry")
    assert code == EXIT_OK
    assert text.strip() == registry_listing()
    assert registry_listing() == registry_listing()
    impacts = text.split("coefficient families:")[0].splitlines()[1:]
    assert len(impacts) >= 3
    assert any(line.strip().startswith("constant(") for line in impacts)


def test_version_string_has_describe_shape():
    assert "-g" in version_string() or version_string().count(".") == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "impactlab.cli", "registry"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "claims:" in proc.stdout
