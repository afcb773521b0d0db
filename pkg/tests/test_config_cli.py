import json

import numpy as np
import pytest

from metainv.cli import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, main
from metainv.config import ConfigError, config_hash, load_config, parse_config


def write(tmp_path, text, name="cfg.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_defaults_and_overrides(tmp_path):
    path = write(tmp_path, 'experiment = "train"\nseed = 1\n')
    cfg = load_config(path)
    assert [t.kind for t in cfg.tasks] == ["T1", "T2", "T3", "T4"]
    assert cfg.tasks[0].sigma == 0.1 and cfg.tasks[3].drop_rate == 0.3
    again = load_config(path, seed=5, output_dir=str(tmp_path / "o"))
    assert again.seed == 5 and again.output_dir.endswith("o")


def test_unknown_keys_and_missing_seed_rejected(tmp_path):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, 'experiment = "toy"\nseed = 0\nbogus = 1\n'))
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, 'experiment = "toy"\n[toy]\ngrid = 8\n'))
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, 'experiment = "toy"\nseed = 0\n[inner]\nsteps = 1\nfoo = 2\n'))
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, "experiment = \n"))
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.toml")


def test_missing_paths_rejected(tmp_path):
    with pytest.raises(ConfigError, match="do not exist"):
        parse_config({"experiment": "train", "seed": 0, "data": {"source": str(tmp_path / "none")}})
    with pytest.raises(ConfigError, match="checkpoint"):
        parse_config({"experiment": "finetune", "seed": 0})


def test_hash_ignores_output_dir():
    a = parse_config({"experiment": "toy", "seed": 0, "output_dir": "x"})
    b = parse_config({"experiment": "toy", "seed": 0, "output_dir": "y"})
    c = parse_config({"experiment": "toy", "seed": 1})
    assert config_hash(a) == config_hash(b) != config_hash(c)


def test_cli_config_error_exit_code(tmp_path, capsys):
    path = write(tmp_path, 'experiment = "toy"\nseed = 0\nnope = 1\n')
    assert main(["toy", "--config", path]) == EXIT_CONFIG
    path = write(tmp_path, 'experiment = "toy"\nseed = 0\n', "ok.toml")
    assert main(["train", "--config", path]) == EXIT_CONFIG


def test_cli_bayes_check_and_replay(tmp_path, capsys):
    path = write(tmp_path, 'experiment = "bayes-check"\nseed = 3\n[bayes_check]\ninstances = 10\n')
    out1 = tmp_path / "r1"
    assert main(["bayes-check", "--config", path, "--out", str(out1)]) == EXIT_OK
    report = json.loads((out1 / "report.json").read_text())
    assert report["passed"] and report["max_relative_error"] <= 1e-8
    manifest = json.loads((out1 / "manifest.json").read_text())
    assert manifest["seed"] == 3 and len(manifest["config_hash"]) == 64
    out2 = tmp_path / "r2"
    assert main(["bayes-check", "--config", str(out1 / "manifest.json"), "--out", str(out2)]) == EXIT_OK
    assert (out1 / "metrics.csv").read_bytes() == (out2 / "metrics.csv").read_bytes()


def test_cli_failed_bayes_check_exit_code(tmp_path, capsys):
    path = write(tmp_path, 'experiment = "bayes-check"\nseed = 0\n[bayes_check]\ninstances = 4\ntolerance = -1.0\n')
    assert main(["bayes-check", "--config", path, "--out", str(tmp_path / "o")]) == EXIT_NUMERICAL


def test_cli_numerical_failure_exit_code(tmp_path, capsys):
    # a huge outer step on a linear model blows the outer loss up
    text = """
experiment = "train"
seed = 0
[model]
family = "linear"
[data]
patch_size = 4
n_train = 4
n_test = 2
[[tasks]]
kind = "T1"
sigma = 0.5
[inner]
mode = "sup"
optimizer = "gd"
step_size = 100.0
steps = 30
"""
    assert main(["train", "--config", write(tmp_path, text), "--out", str(tmp_path / "o")]) == EXIT_NUMERICAL


def test_cli_requires_config():
    with pytest.raises(SystemExit):
        main(["toy"])
    assert np.isfinite(EXIT_OK)
