import json
import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from privadapt import __version__
from privadapt.accounting import compose, to_eps_delta, RdpCurve
from privadapt.cli import main
from privadapt.dpsgd import make_separable_dataset
from privadapt.rng import RngStream

from oracles import dense_gaussian_epsilon, reference_gd

DOCS = Path(__file__).resolve().parents[1] / "docs" / "examples"


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def toy_csv(tmp_path_factory):
    ds = make_separable_dataset(200, rng=RngStream(0))
    path = tmp_path_factory.mktemp("data") / "toy.csv"
    rows = ["x0,x1,bias,y"] + [",".join(repr(float(v)) for v in (*x, y)) for x, y in zip(ds.features, ds.targets)]
    path.write_text("\n".join(rows) + "\n")
    return path, ds


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return path


# -- mech sample ------------------------------------------------------------------

def test_em_sample_frequency(tmp_path):
    out = tmp_path / "s.txt"
    assert run("mech", "sample", "--mech", "em", "--scores", "1,0", "--sens", 1, "--eps", 2.1972,
               "--n", 100000, "--seed", 7, "--out", out) == 0
    draws = out.read_text().split()
    assert len(draws) == 100000
    assert 0.74 <= draws.count("0") / 1e5 <= 0.76


def test_manifest_written(tmp_path):
    out = tmp_path / "s.txt"
    run("mech", "sample", "--mech", "gnmax", "--counts", "3,1", "--sigma", 1, "--n", 10, "--seed", 1, "--out", out)
    man = json.loads((tmp_path / "s.txt.manifest.json").read_text())
    assert man["command"] == "mech sample" and man["seed"] == 1 and man["tool_version"] == __version__
    assert man["output"] == str(out) and man["wall_clock_seconds"] >= 0
    assert not list(tmp_path.glob("*.tmp"))


def test_zero_samples(tmp_path):
    out = tmp_path / "e.txt"
    assert run("mech", "sample", "--mech", "em", "--scores", "1,0", "--eps", 1, "--n", 0, "--seed", 1,
               "--out", out) == 0
    assert out.read_bytes() == b""


@pytest.mark.parametrize(
    "flags",
    [
        ["--mech", "em", "--scores", "1,0,2", "--eps", 1],
        ["--mech", "rnm", "--counts", "4,2,2", "--eps", 1],
        ["--mech", "rnm", "--counts", "4,2,2", "--noise", "gaussian", "--scale", 2],
        ["--mech", "gnmax", "--counts", "4,2,2", "--sigma", 2],
        ["--mech", "gumbel", "--scores", "4,2,2", "--eps", 1, "--k", 2],
        ["--mech", "ptr", "--counts", "40,2,2", "--eps", 1, "--delta", 1e-5],
        ["--mech", "lda", "--counts", "40,2,2", "--eps", 1, "--delta", 1e-5],
    ],
)
def test_mech_sample_is_byte_identical(tmp_path, flags):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    base = ["mech", "sample", *flags, "--n", 500, "--seed", 11]
    assert run(*base, "--out", a) == 0 and run(*base, "--out", b) == 0
    assert a.read_bytes() == b.read_bytes() and a.read_bytes()


def test_mech_config_errors(capsys):
    assert run("mech", "sample", "--mech", "em", "--scores", "1,0", "--n", 5, "--seed", 1) == 2
    assert "--eps" in capsys.readouterr().err
    assert run("mech", "sample", "--mech", "gnmax", "--counts", "1,0", "--sigma", -1, "--n", 5, "--seed", 1) == 2
    assert run("mech", "sample", "--mech", "ptr", "--counts", "1,0", "--eps", 1, "--n", 5, "--seed", 1) == 2
    with pytest.raises(SystemExit) as err:
        run("mech", "sample", "--mech", "em", "--scores", "1,x", "--eps", 1, "--n", 5, "--seed", 1)
    assert err.value.code == 2


# -- account ------------------------------------------------------------------------

def test_calibrate_then_convert(tmp_path, capsys):
    cal = tmp_path / "cal.json"
    assert run("account", "calibrate", "--eps", 8, "--delta", 1e-5, "--q", 0.01, "--steps", 1000, "--out", cal) == 0
    capsys.readouterr()
    assert run("account", "convert", "--calibration", cal, "--delta", 1e-5) == 0
    eps = json.loads(capsys.readouterr().out)["epsilon"]
    assert 7.92 < eps <= 8.0


def test_convert_matches_dense_oracle(capsys):
    assert run("account", "convert", "--sigma", 1, "--delta", 1e-5, "--q", 1, "--steps", 1) == 0
    eps = json.loads(capsys.readouterr().out)["epsilon"]
    assert eps == pytest.approx(dense_gaussian_epsilon(1.0, 1, 1e-5), rel=0.01)


def test_compose_single_curve_is_identity(tmp_path, capsys):
    cur = tmp_path / "c.json"
    run("account", "curve", "--sigma", 1.2, "--q", 0.05, "--steps", 30, "--out", cur)
    assert run("account", "compose", "--curve", cur) == 0
    got = RdpCurve.from_dict(json.loads(capsys.readouterr().out)["curve"])
    assert got == RdpCurve.from_dict(json.loads(cur.read_text()))


def test_calibration_failure_exit_code(capsys):
    assert run("account", "calibrate", "--eps", 1e-3, "--delta", 1e-5, "--q", 1, "--steps", 1000) == 3
    assert "calibration" in capsys.readouterr().err


def test_account_missing_flag(capsys):
    assert run("account", "convert", "--delta", 1e-5) == 2
    assert "--sigma" in capsys.readouterr().err


# -- sim -------------------------------------------------------------------------------

def test_sim_perfect_teachers(tmp_path):
    sc = write_json(tmp_path / "s.json", {"teacher": {"accuracy": 1.0, "n_classes": 4}, "trials": 10})
    out = tmp_path / "c.csv"
    assert run("sim", "--scenario", sc, "--seed", 0, "--out", out) == 0
    rows = [line.split(",") for line in out.read_text().splitlines()]
    assert rows[0] == ["epsilon", "utility_mean", "utility_std", "trials", "abstain_rate"]
    assert len(rows) == 7 and rows[-1][0] == "8" and float(rows[-1][1]) >= 0.99


def test_sim_rejects_zero_trials(tmp_path, capsys):
    sc = write_json(tmp_path / "s.json", {"trials": 0})
    assert run("sim", "--scenario", sc, "--seed", 0, "--out", tmp_path / "x.csv") == 2
    assert "trials" in capsys.readouterr().err
    assert not (tmp_path / "x.csv").exists()


def test_sim_threads_do_not_change_output(tmp_path):
    sc = DOCS / "scenario_classification.json"
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    run("sim", "--scenario", sc, "--seed", 5, "--out", a)
    run("sim", "--scenario", sc, "--seed", 5, "--out", b, "--threads", 4)
    assert a.read_bytes() == b.read_bytes()


# -- cost -------------------------------------------------------------------------------

def test_cost_dp_icl(capsys):
    assert run("cost", "estimate", "--pricing", DOCS / "pricing.json", "--workload", DOCS / "workload_dpicl_samsum.json") == 0
    rep = json.loads(capsys.readouterr().out)
    assert (rep["train_usd"], rep["query_usd"], rep["all_usd"]) == (0.0, 665.91, 665.91)


def test_cost_zero_shot_and_empty(tmp_path, capsys):
    zero = write_json(tmp_path / "z.json", {"model": "gpt3-davinci",
                                            "query": {"dataset": "samsum", "n_queries": 10000}})
    assert run("cost", "estimate", "--workload", zero) == 0
    assert json.loads(capsys.readouterr().out)["query_usd"] == 3.33
    empty = write_json(tmp_path / "e.json", {})
    assert run("cost", "estimate", "--workload", empty) == 0
    rep = json.loads(capsys.readouterr().out)
    assert (rep["train_usd"], rep["query_usd"], rep["all_usd"]) == (0.0, 0.0, 0.0)


def test_cost_unknown_names(tmp_path, capsys):
    bad = write_json(tmp_path / "b.json", {"model": "gpt-9", "query": {"dataset": "samsum", "n_queries": 1}})
    assert run("cost", "estimate", "--workload", bad) == 2
    assert "gpt-9" in capsys.readouterr().err
    hw = write_json(tmp_path / "h.json", {"train": {"gpu_hours": 1, "hardware": "tpu-v9"}})
    assert run("cost", "estimate", "--workload", hw) == 2


# -- dpsgd ------------------------------------------------------------------------------

def test_dpsgd_degenerate_matches_gd(tmp_path, toy_csv):
    data, ds = toy_csv
    cfg = write_json(tmp_path / "c.json", {"clip_norm": 1e9, "noise_multiplier": 0, "sampling_rate": 1,
                                           "steps": 20, "learning_rate": 0.5})
    out = tmp_path / "r.json"
    assert run("dpsgd", "--data", data, "--config", cfg, "--seed", 0, "--out", out) == 0
    w = np.array(json.loads(out.read_text())["weights"])
    ref = reference_gd(ds.features, ds.targets, 0.5, 20)[-1]
    assert np.max(np.abs(w - ref)) <= 1e-12


def test_dpsgd_epsilon_is_ledger_conversion(tmp_path, toy_csv):
    data, _ = toy_csv
    cfg = write_json(tmp_path / "c.json", {"clip_norm": 1, "noise_multiplier": 1.1, "sampling_rate": 0.1,
                                           "steps": 40, "learning_rate": 0.3})
    out = tmp_path / "r.json"
    run("dpsgd", "--data", data, "--config", cfg, "--seed", 0, "--out", out)
    rep = json.loads(out.read_text())
    curve = compose(RdpCurve.from_dict(e["rdp"]) for e in rep["ledger"])
    assert to_eps_delta(curve, 1 / 200) == (rep["epsilon"], rep["best_order"])


def test_dpsgd_with_calibrated_sigma(tmp_path, toy_csv, capsys):
    data, _ = toy_csv
    assert run("account", "calibrate", "--eps", 8, "--delta", 1 / 200, "--q", 0.1, "--steps", 200) == 0
    sigma = json.loads(capsys.readouterr().out)["sigma"]
    cfg = write_json(tmp_path / "c.json", {"clip_norm": 1, "noise_multiplier": sigma, "sampling_rate": 0.1,
                                           "steps": 200, "learning_rate": 0.5})
    out = tmp_path / "r.json"
    assert run("dpsgd", "--data", data, "--config", cfg, "--seed", 3, "--out", out) == 0
    assert json.loads(out.read_text())["epsilon"] <= 8.0


def test_dpsgd_divergence_exit_code(tmp_path, toy_csv):
    data, _ = toy_csv
    cfg = write_json(tmp_path / "c.json", {"clip_norm": 1e300, "noise_multiplier": 0, "sampling_rate": 1,
                                           "steps": 60, "learning_rate": 1e6, "loss": "squared"})
    assert run("dpsgd", "--data", data, "--config", cfg, "--seed", 0, "--out", tmp_path / "r.json") == 4


def test_dpsgd_config_errors(tmp_path, toy_csv, capsys):
    data, _ = toy_csv
    cfg = write_json(tmp_path / "c.json", {"clip_norm": 1, "noise_multiplier": 1, "sampling_rate": 1, "steps": 5})
    assert run("dpsgd", "--data", data, "--config", cfg, "--seed", 0) == 2
    assert "learning_rate" in capsys.readouterr().err
    assert run("dpsgd", "--data", tmp_path / "none.csv", "--config", cfg, "--seed", 0) == 2


# -- whole-CLI determinism -----------------------------------------------------------------

def test_every_command_is_byte_identical(tmp_path, toy_csv):
    data, _ = toy_csv
    cur = tmp_path / "cur.json"
    run("account", "curve", "--sigma", 1, "--q", 0.01, "--steps", 100, "--out", cur)
    commands = {
        "mech": ["mech", "sample", "--mech", "em", "--scores", "1,0,3", "--eps", 1, "--n", 1000, "--seed", 3],
        "calibrate": ["account", "calibrate", "--eps", 3, "--delta", 1e-5, "--q", 0.1, "--steps", 100],
        "convert": ["account", "convert", "--sigma", 1, "--q", 0.1, "--steps", 100, "--delta", 1e-5],
        "compose": ["account", "compose", "--curve", cur, "--curve", cur, "--delta", 1e-5],
        "sim": ["sim", "--scenario", DOCS / "scenario_generation.json", "--seed", 2],
        "cost": ["cost", "estimate", "--workload", DOCS / "workload_inline_profile.json"],
        "dpsgd": ["dpsgd", "--data", data, "--config", DOCS / "dpsgd_config.json", "--seed", 4],
    }
    for name, argv in commands.items():
        a, b = tmp_path / f"{name}.a", tmp_path / f"{name}.b"
        assert run(*argv, "--out", a) == 0 and run(*argv, "--out", b) == 0
        assert a.read_bytes() == b.read_bytes(), name


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "privadapt.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and __version__ in res.stdout
    assert math.isfinite(float(__version__.split(".")[0]))
