import csv
import json
import os

import numpy as np
import pytest

from thermorom.cli import load_config, main, parse_mus, ConfigError

CONFIGS = os.path.join(os.path.dirname(__file__), "..", "configs")
GAS = os.path.join(CONFIGS, "gas.toml")
BURGERS = os.path.join(CONFIGS, "burgers.toml")

FAST_GAS = [
    "--set", "data.horizon=2.0",
    "--set", "train.phases=[[20, 40]]",
    "--set", "train.checkpoint_every=10",
]


def run_cli(*argv):
    return main(list(argv))


def test_unknown_subcommand_exits_with_usage(capsys):
    with pytest.raises(SystemExit) as exc:
        run_cli("frobnicate", "--config", GAS)
    assert exc.value.code != 0
    assert "usage" in capsys.readouterr().err.lower()


def test_missing_config_is_config_error(tmp_path, capsys):
    assert run_cli("train", "--config", str(tmp_path / "nope.toml")) == 2
    assert "config error" in capsys.readouterr().err


def test_unknown_key_reports_field_path(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[system]\nname = 'gas_containers'\nwhat = 3\n")
    assert run_cli("train", "--config", str(cfg)) == 2
    assert "system.what" in capsys.readouterr().err


def test_invalid_domain_reports_path(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text(
        "[system]\nname = 'gas_containers'\n"
        "[data]\ndomain_lo = [5.0]\ndomain_hi = [1.0]\n")
    assert run_cli("train", "--config", str(cfg)) == 2
    assert "domain_lo" in capsys.readouterr().err


def test_shipped_configs_validate():
    for name in ("gas.toml", "burgers.toml", "thermo_mass.toml"):
        cfg = load_config(os.path.join(CONFIGS, name))
        assert cfg["system"]["name"]


def test_burgers_config_matches_reference_schedule():
    cfg = load_config(BURGERS)
    assert cfg["autoencoder"]["sizes"] == [200, 100, 5]
    assert cfg["loss"]["lam_rec"] == 1e-1
    assert cfg["loss"]["lam_jac"] == 1e-9
    assert cfg["loss"]["lam_mod"] == 1e-7
    assert cfg["train"]["phases"] == [[15000, 50]]
    assert cfg["train"]["lr"] == 1e-4
    assert cfg["train"]["lr_decay"] == 0.99
    assert cfg["train"]["lr_decay_every"] == 2000
    assert cfg["active"]["n_additions"] == 4
    assert cfg["active"]["update_every"] == 3000


def test_parse_mus_forms():
    assert len(parse_mus("uniform:7", [1.0], [50.0])) == 7
    grid = parse_mus("grid:3x3", [0.7, 0.9], [0.9, 1.1])
    assert len(grid) == 9
    corners = parse_mus("corners", [0.0, 0.0], [1.0, 1.0])
    assert len(corners) == 4
    explicit = parse_mus([[1.0], [2.0]], [0.0], [5.0])
    assert len(explicit) == 2
    with pytest.raises(ConfigError):
        parse_mus("grid:3", [0.7, 0.9], [0.9, 1.1])


def test_gen_data_writes_seven_trajectories(tmp_path):
    out = str(tmp_path / "gen")
    code = run_cli("gen-data", "--config", GAS, "--out-dir", out,
                   "--set", "data.horizon=1.0", "--set", "data.keep_every_t=40")
    assert code == 0
    header = json.load(open(os.path.join(out, "data", "header.json")))
    assert len(header["mus"]) == 7
    payloads = [p for p in os.listdir(os.path.join(out, "data")) if p.endswith(".u.bin")]
    assert len(payloads) == 7


@pytest.fixture(scope="module")
def trained_gas(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("runs") / "gas")
    code = run_cli("train", "--config", GAS, "--out-dir", out, *FAST_GAS)
    assert code == 0
    return out


def test_train_run_directory_layout(trained_gas):
    assert os.path.exists(os.path.join(trained_gas, "config.toml"))
    assert os.path.exists(os.path.join(trained_gas, "run.json"))
    assert os.path.exists(os.path.join(trained_gas, "history.csv"))
    assert os.path.exists(os.path.join(trained_gas, "final", "model", "model.json"))
    assert os.path.exists(os.path.join(trained_gas, "checkpoints", "epoch_000010"))
    with open(os.path.join(trained_gas, "history.csv")) as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 20


def test_rerun_reproduces_metrics(tmp_path, trained_gas):
    out2 = str(tmp_path / "again")
    assert run_cli("train", "--config", GAS, "--out-dir", out2, *FAST_GAS) == 0
    a = open(os.path.join(trained_gas, "history.csv")).read()
    b = open(os.path.join(out2, "history.csv")).read()
    assert a == b


def test_eval_map_and_summary(tmp_path, trained_gas):
    out = str(tmp_path / "map")
    code = run_cli("eval-map", "--config", GAS, "--out-dir", out,
                   "--model-dir", os.path.join(trained_gas, "final"),
                   "--set", "data.horizon=2.0", "--set", "eval.test_mus='uniform:5'")
    assert code == 0
    with open(os.path.join(out, "error_map.csv")) as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 5
    summary = json.load(open(os.path.join(out, "summary.json")))
    assert "mean" in summary and "max" in summary


def test_thermo_and_spectrum_and_timing(tmp_path, trained_gas):
    model_dir = os.path.join(trained_gas, "final")
    out = str(tmp_path / "thermo")
    assert run_cli("thermo", "--config", GAS, "--out-dir", out,
                   "--model-dir", model_dir, "--set", "data.horizon=2.0") == 0
    with open(os.path.join(out, "thermo_000.csv")) as f:
        rows = list(csv.DictReader(f))
    assert float(rows[5]["entropy_rate"]) >= -1e-12

    out = str(tmp_path / "spec")
    assert run_cli("spectrum", "--config", GAS, "--out-dir", out,
                   "--model-dir", model_dir, "--set", "data.horizon=2.0") == 0
    assert os.path.exists(os.path.join(out, "centroids.json"))

    out = str(tmp_path / "timing")
    assert run_cli("timing", "--config", GAS, "--out-dir", out,
                   "--model-dir", model_dir, "--set", "data.horizon=2.0") == 0
    report = json.load(open(os.path.join(out, "timing.json")))
    assert report["speedup"] > 0


def test_bound_and_indicator_corr(tmp_path, trained_gas):
    model_dir = os.path.join(trained_gas, "final")
    out = str(tmp_path / "bound")
    assert run_cli("bound", "--config", GAS, "--out-dir", out,
                   "--model-dir", model_dir, "--set", "data.horizon=2.0",
                   "--set", "eval.test_mus='uniform:3'") == 0
    summary = json.load(open(os.path.join(out, "summary.json")))
    assert summary["ratio_max"] >= 0

    out = str(tmp_path / "corr")
    assert run_cli("indicator-corr", "--config", GAS, "--out-dir", out,
                   "--model-dir", model_dir, "--set", "data.horizon=2.0",
                   "--set", "eval.test_mus='uniform:6'") == 0
    summary = json.load(open(os.path.join(out, "summary.json")))
    assert -1.0 <= summary["pearson"] <= 1.0


def test_active_train_cli(tmp_path):
    out = str(tmp_path / "active")
    code = run_cli("active-train", "--config", GAS, "--out-dir", out,
                   "--set", "data.horizon=2.0",
                   "--set", "train.phases=[[12, 40]]",
                   "--set", "train.checkpoint_every=6",
                   "--set", "active.n_additions=1",
                   "--set", "active.update_every=5",
                   "--set", "active.pool_size=4")
    assert code == 0
    assert os.path.exists(os.path.join(out, "sampling.csv"))
    with open(os.path.join(out, "sampling.csv")) as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 1


def test_known_functions_demand_identity_ae(tmp_path, capsys):
    assert run_cli("train", "--config", GAS, "--out-dir", str(tmp_path / "x"),
                   "--set", "autoencoder.kind='dense'",
                   "--set", "autoencoder.sizes=[4, 3, 2]") == 2
    assert "identity" in capsys.readouterr().err
