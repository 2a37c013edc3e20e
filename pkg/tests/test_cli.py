import dataclasses
import json
import os

import pytest

from detadapt.cli import run_cli
from detadapt.config import default_config
from detadapt.detector import save_params
from detadapt.trainer import pretrain_source
from detadapt.util import derive_seed
from detadapt.world import generate_domain, save_dataset


@pytest.fixture(scope="module")
def tiny_config_file(tmp_path_factory):
    config = default_config(seed=0)
    config.source = dataclasses.replace(config.source, size=40)
    config.target = dataclasses.replace(config.target, size=30)
    config.pretrain_epochs = 3
    config.epochs = 2
    config.eval_size = 40
    config.mc_passes = 3
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    config.save_json(path)
    return str(path), config


def test_eval_mode_writes_result(tmp_path, tiny_config_file):
    config_path, config = tiny_config_file
    params, _ = pretrain_source(config)
    params_path = tmp_path / "params.json"
    save_params(params_path, params)
    data = generate_domain(config.target, derive_seed(0, "world", "target"))
    dataset_path = tmp_path / "data.json"
    save_dataset(dataset_path, config.target, data)
    out = tmp_path / "out"
    code = run_cli(["--mode", "eval", "--config", config_path, "--out", str(out),
                    "--params", str(params_path), "--dataset", str(dataset_path)])
    assert code == 0
    doc = json.loads((out / "eval.json").read_text())
    assert 0.0 <= doc["map50"] <= 1.0
    assert set(doc["recall_at_fpi"]) == {"0.05", "0.3", "0.5", "1.0"}


def test_adapt_mode_outputs_are_deterministic(tmp_path, tiny_config_file):
    config_path, _ = tiny_config_file
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert run_cli(["--mode", "adapt", "--config", config_path, "--out", str(out1)]) == 0
    assert run_cli(["--mode", "adapt", "--config", config_path, "--out", str(out2)]) == 0
    assert (out1 / "history.csv").read_bytes() == (out2 / "history.csv").read_bytes()
    assert (out1 / "summary.json").read_bytes() == (out2 / "summary.json").read_bytes()
    assert (out1 / "teacher_params.json").read_bytes() == (out2 / "teacher_params.json").read_bytes()


def test_ablation_suite_produces_four_runs(tmp_path, tiny_config_file):
    config_path, _ = tiny_config_file
    out = tmp_path / "suite"
    assert run_cli(["--mode", "ablation-suite", "--config", config_path,
                    "--out", str(out)]) == 0
    lines = (out / "ablation_summary.csv").read_text().strip().splitlines()
    assert lines[0] == "variant,final_teacher_map"
    assert [row.split(",")[0] for row in lines[1:]] == ["base", "sa", "sal", "full"]
    for name in ("base", "sa", "sal", "full"):
        assert (out / f"history_{name}.csv").exists()


def test_bad_config_exits_two(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"epochs": -3}')
    assert run_cli(["--mode", "adapt", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    missing = tmp_path / "missing.json"
    assert run_cli(["--mode", "adapt", "--config", str(missing), "--out", str(tmp_path / "o")]) == 2
    assert run_cli(["--mode", "eval", "--out", str(tmp_path / "o")]) == 2


def test_unknown_mode_exits_two(tmp_path, capsys):
    assert run_cli(["--mode", "nonsense", "--out", str(tmp_path)]) == 2
    capsys.readouterr()


def test_pretrain_mode_writes_params(tmp_path, tiny_config_file):
    config_path, _ = tiny_config_file
    out = tmp_path / "pre"
    assert run_cli(["--mode", "pretrain", "--config", config_path, "--out", str(out)]) == 0
    assert (out / "source_params.json").exists()
    doc = json.loads((out / "pretrain_eval.json").read_text())
    assert doc["map50"] > 0.3
