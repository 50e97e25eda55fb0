import json
import subprocess
import sys

import pytest

from regmarket.cli import main

CONFIG = """\
[run]
version = 1
scenario = batch-linear
rows = 600
seed = 4
out = {out}

[task]
central_agent = a1
loss = quadratic
degree = 1
phi_insample = 0.1
allocation = shapley

[ownership]
x1 = a1
x2 = a2
x3 = a3
x4 = a3
"""


def run_cli(args):
    return main(args)


def test_simulate_writes_dataset_and_truth(tmp_path, capsys):
    code = run_cli(["simulate", "--case", "batch-linear", "--seed", "7",
                    "--rows", "200", "--out", str(tmp_path)])
    assert code == 0
    assert (tmp_path / "dataset.csv").exists()
    truth = json.loads((tmp_path / "truth.json").read_text())
    assert truth["seed"] == 7


def test_simulate_unknown_case_exits_with_usage_error(capsys):
    with pytest.raises(SystemExit) as err:
        run_cli(["simulate", "--case", "not-a-case"])
    assert err.value.code == 2  # argparse rejects the choice


def test_simulate_rerun_is_byte_identical(tmp_path):
    # run through fresh interpreters so hash randomisation cannot hide
    # ordering bugs
    for sub in ("a", "b"):
        r = subprocess.run(
            [sys.executable, "-m", "regmarket.cli", "simulate", "--case",
             "online-quantile", "--seed", "3", "--rows", "300",
             "--out", str(tmp_path / sub)],
            capture_output=True, text=True)
        assert r.returncode == 0, r.stderr
    a = (tmp_path / "a" / "dataset.csv").read_bytes()
    b = (tmp_path / "b" / "dataset.csv").read_bytes()
    assert a == b
    assert (tmp_path / "a" / "truth.json").read_bytes() == \
        (tmp_path / "b" / "truth.json").read_bytes()


@pytest.fixture
def config_file(tmp_path):
    out = tmp_path / "artifacts"
    cfg = tmp_path / "run.cfg"
    cfg.write_text(CONFIG.format(out=out))
    return cfg, out


def test_market_batch_writes_artifacts(config_file, capsys):
    cfg, out = config_file
    code = run_cli(["market", "--mechanism", "batch", "--config", str(cfg)])
    assert code == 0
    for name in ("report.json", "ledger.csv", "cumulative_revenues.csv",
                 "losses.csv", "audit.json"):
        assert (out / name).exists(), name
    report = json.loads((out / "report.json").read_text())
    assert report["market"] == "batch"
    assert report["audit"]["passed"]
    audit = json.loads((out / "audit.json").read_text())
    assert audit["passed"]


def test_market_missing_config_is_io_error(tmp_path, capsys):
    code = run_cli(["market", "--mechanism", "batch", "--config",
                    str(tmp_path / "nope.cfg")])
    assert code == 2


def test_market_bad_config_is_config_error(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("[run]\nversion = 1\n\n[task]\ncentral_agent = a1\n")
    code = run_cli(["market", "--mechanism", "batch", "--config", str(cfg)])
    assert code == 1  # no dataset source


def test_market_rerun_is_byte_identical(tmp_path):
    outs = []
    for sub in ("a", "b"):
        out = tmp_path / sub
        cfg = tmp_path / f"{sub}.cfg"
        cfg.write_text(CONFIG.format(out=out))
        r = subprocess.run(
            [sys.executable, "-m", "regmarket.cli", "market", "--mechanism",
             "batch", "--config", str(cfg)],
            capture_output=True, text=True)
        assert r.returncode == 0, r.stderr
        outs.append(out)
    for name in ("report.json", "ledger.csv", "cumulative_revenues.csv",
                 "losses.csv", "audit.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name


def test_market_online_from_csv(tmp_path, capsys):
    # simulate to CSV, then run the online market against that file
    code = run_cli(["simulate", "--case", "batch-linear", "--seed", "2",
                    "--rows", "700", "--out", str(tmp_path)])
    assert code == 0
    out = tmp_path / "mkt"
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"""\
[run]
version = 1
csv = {tmp_path / 'dataset.csv'}
out = {out}

[task]
central_agent = a1
loss = quadratic
lambda = 0.99
warmup = 80
phi_insample = 0.1

[ownership]
x1 = a1
x2 = a2
x3 = a3
x4 = a3
""")
    code = run_cli(["market", "--mechanism", "online", "--config", str(cfg)])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert report["market"] == "online"
    assert report["central_total"] > 0


def test_report_summary_and_tables(config_file, capsys):
    cfg, out = config_file
    assert run_cli(["market", "--mechanism", "batch", "--config", str(cfg)]) == 0
    capsys.readouterr()

    assert run_cli(["report", str(out / "report.json"), "--summary"]) == 0
    text = capsys.readouterr().out
    assert "central payment" in text

    assert run_cli(["report", str(out / "report.json"), "--per-agent"]) == 0
    text = capsys.readouterr().out
    assert "a2" in text and "a3" in text

    assert run_cli(["report", str(out / "report.json"), "--per-feature"]) == 0
    text = capsys.readouterr().out
    assert "x2" in text and "%" in text


def test_report_malformed_json_exits_two(tmp_path, capsys):
    bad = tmp_path / "report.json"
    bad.write_text("{not json")
    assert run_cli(["report", str(bad), "--summary"]) == 2


def test_market_with_screening_from_config(tmp_path, capsys):
    out = tmp_path / "screened"
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"""\
[run]
version = 1
scenario = batch-linear
rows = 900
seed = 1
out = {out}
screening = cv-loss

[task]
central_agent = a1
loss = quadratic
phi_insample = 0.1

[ownership]
x1 = a1
x2 = a2
x3 = a3
x4 = a3
""")
    assert run_cli(["market", "--mechanism", "batch", "--config", str(cfg)]) == 0
    report = json.loads((out / "report.json").read_text())
    # all simulated features carry real signal, so screening keeps them
    assert sorted(report["support"]) == ["x2", "x3", "x4"]


def test_oos_mechanism_via_cli(tmp_path, capsys):
    out = tmp_path / "oos"
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"""\
[run]
version = 1
scenario = batch-linear
rows = 800
seed = 6
out = {out}

[task]
central_agent = a1
loss = quadratic
phi_oos = 1.0
train_rows = 400

[ownership]
x1 = a1
x2 = a2
x3 = a3
x4 = a3
""")
    assert run_cli(["market", "--mechanism", "oos", "--config", str(cfg)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["market"] == "oos"
    assert report["metrics"]["with_support"] <= report["metrics"]["without_support"]
