import json
from pathlib import Path

import pytest
from rich.console import Console
from typer.testing import CliRunner

from app import cli
from app.cli import app
from app.services.flow_model import save_checkpoint
from app.services.tensor_io import read_tensor

runner = CliRunner()

TINY_SPEC = {
    "experiment": "train",
    "dataset": {"kind": "two_moons", "n": 200},
    "model": {"scheme": "nanoflow", "flows": 2, "hidden": 8, "depth": 2},
    "train": {"iterations": 4, "batch_size": 16, "checkpoint_every": 2, "average_window": 2,
              "log_every": 2, "eval_size": 16},
    "seeds": [0, 1],
}


@pytest.fixture(autouse=True)
def wide_console(monkeypatch):
    monkeypatch.setattr(cli, "console", Console(width=200))


@pytest.fixture
def spec_file(tmp_path):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(TINY_SPEC))
    return path


class TestLedger:
    def test_every_resolved_combination(self, spec_file):
        spec = {**TINY_SPEC, "experiment": "scheme_comparison"}
        spec_file.write_text(json.dumps(spec))
        result = runner.invoke(app, ["ledger", "--config", str(spec_file)])
        assert result.exit_code == 0, result.output
        for scheme in ("baseline", "naive", "decomp", "nanoflow"):
            assert scheme in result.output

    def test_bare_model_config(self, tmp_path, make_config):
        path = tmp_path / "model.json"
        path.write_text(make_config("decomp").model_dump_json())
        result = runner.invoke(app, ["ledger", "--config", str(path), "--model"])
        assert result.exit_code == 0, result.output
        assert "1,374" in result.output


class TestTrain:
    def test_writes_results_for_one_seed(self, tmp_path, spec_file, isolated_settings):
        out = tmp_path / "run"
        result = runner.invoke(app, ["train", "-c", str(spec_file), "-o", str(out), "--seed", "3"])
        assert result.exit_code == 0, result.output
        lines = (out / "results.csv").read_text().splitlines()
        assert len(lines) == 2
        assert (out / "checkpoints" / "c00-s3" / "manifest.json").exists()

    def test_defaults_to_the_output_root(self, spec_file, isolated_settings):
        result = runner.invoke(app, ["train", "-c", str(spec_file), "--seed", "0"])
        assert result.exit_code == 0, result.output
        assert (Path(isolated_settings.OUTPUT_DIR) / "train" / "results.csv").exists()

    def test_invalid_config_exits_with_an_error(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({**TINY_SPEC, "experiment": "llr_sweep"}))
        result = runner.invoke(app, ["sweep", "-c", str(path)])
        assert result.exit_code == 1
        assert "error" in result.output


class TestSample:
    def test_dumps_samples(self, tmp_path, flat_model):
        ckpt = save_checkpoint(flat_model, tmp_path / "ckpt")
        result = runner.invoke(app, ["sample", "--checkpoint", str(ckpt), "--n", "4", "-t", "0.5"])
        assert result.exit_code == 0, result.output
        assert read_tensor(ckpt / "samples" / "samples.nftn").shape == (4, 4)

    def test_zero_samples(self, tmp_path):
        result = runner.invoke(app, ["sample", "--checkpoint", str(tmp_path), "--n", "0"])
        assert result.exit_code == 0
        assert "no samples" in result.output

    def test_missing_checkpoint(self, tmp_path):
        result = runner.invoke(app, ["sample", "--checkpoint", str(tmp_path / "nowhere"), "--n", "2"])
        assert result.exit_code == 1
