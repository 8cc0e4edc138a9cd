import csv
import json

import numpy as np
import pytest

from ssfl.cli import main
from ssfl.data import make_synthetic
from ssfl.experiment import (
    LEDGER_COLUMNS,
    METRIC_COLUMNS,
    ConfigError,
    parse_config,
    run_experiment,
    run_mask_study,
)

MINIMAL = {
    "dataset": {"num_classes": 4, "num_features": 6, "per_class": 40, "test_per_class": 10},
    "model": {"hidden": [8]},
    "fl": {"K": 4, "R": 2, "local_steps": 3},
}


def write(tmp_path, cfg, name="c.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg, indent=2))
    return path


def header(path):
    with open(path, newline="") as fh:
        return next(csv.reader(fh))


def test_minimal_run_writes_bundle(tmp_path):
    out = run_experiment(write(tmp_path, MINIMAL), out=tmp_path / "o")
    for name in ("metrics.csv", "summary.json", "ledger.csv", "mask_stats.json", "config.resolved.json"):
        assert (out / name).exists()
    assert header(out / "metrics.csv") == METRIC_COLUMNS
    assert header(out / "metrics.csv")[:5] == ["round", "variant", "seed", "global_acc", "mean_local_acc"]
    assert header(out / "ledger.csv") == LEDGER_COLUMNS
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert [r["round"] for r in rows] == ["0", "1", "2"]


def test_rerun_is_byte_identical(tmp_path):
    cfg = write(tmp_path, {**MINIMAL, "variants": ["ssfl", "dense"], "seeds": [0, 3]})
    a = run_experiment(cfg, out=tmp_path / "a")
    b = run_experiment(cfg, out=tmp_path / "b", jobs=2)
    for name in ("metrics.csv", "ledger.csv", "mask_stats.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_comparison_summary(tmp_path):
    cfg = write(tmp_path, {**MINIMAL, "variants": ["ssfl", "random_global", "dense"], "seeds": [0, 1]})
    out = run_experiment(cfg, out=tmp_path / "o")
    summary = json.loads((out / "summary.json").read_text())
    pairs = sorted((r["variant"], r["seed"]) for r in summary["runs"])
    assert pairs == sorted((v, s) for v in ("ssfl", "random_global", "dense") for s in (0, 1))
    for v in ("ssfl", "random_global", "dense"):
        accs = [r["final_global_acc"] for r in summary["runs"] if r["variant"] == v]
        assert summary["variants"][v]["final_global_acc"]["mean"] == pytest.approx(np.mean(accs))
    ss = next(r for r in summary["runs"] if r["variant"] == "ssfl")
    assert ss["ledger"]["percent_of_dense"]["values_only"] == pytest.approx(50.0, abs=0.1)
    stats = json.loads((out / "mask_stats.json").read_text())
    assert next(s for s in stats if s["variant"] == "dense")["mask"] is None


def test_config_echo_round_trip(tmp_path):
    first = run_experiment(write(tmp_path, {**MINIMAL, "seeds": [5]}), out=tmp_path / "a")
    echo = first / "config.resolved.json"
    second = run_experiment(echo, out=tmp_path / "b")
    assert (first / "metrics.csv").read_bytes() == (second / "metrics.csv").read_bytes()
    assert json.loads(echo.read_text())["fl"]["sigma"] == 0.5


def test_seed_override(tmp_path):
    out = run_experiment(write(tmp_path, {**MINIMAL, "seeds": [0, 1, 2]}), out=tmp_path / "o", seed=7)
    seeds = {r["seed"] for r in csv.DictReader(open(out / "metrics.csv"))}
    assert seeds == {"7"}


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("SSFL_OUTPUT_ROOT", str(tmp_path / "root"))
    out = run_experiment(write(tmp_path, {**MINIMAL, "output": {"dir": "rel"}}))
    assert out == tmp_path / "root" / "rel" and (out / "metrics.csv").exists()


def test_csv_dataset(tmp_path):
    tr, te = make_synthetic(3, 4, 30, 3.0, seed=0)
    tr.to_csv(tmp_path / "train.csv")
    te.to_csv(tmp_path / "test.csv")
    cfg = {**MINIMAL, "dataset": {"kind": "csv", "train": "train.csv", "test": "test.csv", "num_classes": 3}}
    out = run_experiment(write(tmp_path, cfg), out=tmp_path / "o")
    assert len(list(csv.DictReader(open(out / "metrics.csv")))) == 3


def test_ood_config_reports_heldout(tmp_path):
    cfg = {**MINIMAL, "fl": {"K": 4, "R": 3, "local_steps": 3},
           "ood": {"holdout_classes": [3], "refresh_round": 1, "new_clients": 1}}
    out = run_experiment(write(tmp_path, cfg), out=tmp_path / "o")
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert all(r["heldout_acc"] != "" for r in rows)
    ledger = list(csv.DictReader(open(out / "ledger.csv")))
    assert sum(r["scheme"] == "saliency" for r in ledger) == 4 + 5


@pytest.mark.parametrize(
    "text, where, field",
    [
        ('{\n  "fl": {\n    "sigma": 1.5\n  }\n}', ":3:", "fl.sigma"),
        ('{\n  "variants": ["ssfl",\n    "bogus"]\n}', ":3:", "variants"),
        ('{\n  "fl": {"R": 3},\n  "ood": {"refresh_round": 9}\n}', ":3:", "ood.refresh_round"),
        ('{\n  "colour": 1\n}', ":", "colour"),
        ('{\n  "fl": {"K": 4,}\n}', ":2:", "invalid JSON"),
    ],
)
def test_invalid_configs_are_line_referenced(text, where, field):
    with pytest.raises(ConfigError) as err:
        parse_config(text, "cfg.json")
    msg = str(err.value)
    assert msg.startswith("cfg.json" + where) and field in msg


def test_mask_study(tmp_path):
    cfg = {**MINIMAL, "mask_study": {"counts": [1, 2, 4, "all"], "clients": 4}, "seeds": [0, 1, 2]}
    out = run_mask_study(write(tmp_path, cfg), out=tmp_path / "o")
    rows = list(csv.DictReader(open(out / "mask_study.csv")))
    assert header(out / "mask_study.csv") == ["count", "seed", "mask_error"]
    assert len(rows) == 4 * 3
    assert all(float(r["mask_error"]) == 0.0 for r in rows if r["count"] == "all")
    assert all(0.0 <= float(r["mask_error"]) <= 1.0 for r in rows)


def test_mask_study_count_above_clients(tmp_path):
    cfg = {**MINIMAL, "mask_study": {"counts": [8], "clients": 4}}
    with pytest.raises(ConfigError, match="mask_study"):
        run_mask_study(write(tmp_path, cfg), out=tmp_path / "o")


# -- CLI ---------------------------------------------------------------------


def test_cli_run_and_validate(tmp_path, capsys):
    cfg = write(tmp_path, MINIMAL)
    assert main(["run", str(cfg), "--out", str(tmp_path / "o"), "--seed", "2", "--jobs", "1"]) == 0
    assert (tmp_path / "o" / "metrics.csv").exists()
    assert main(["validate", str(cfg)]) == 0
    echoed = json.loads(capsys.readouterr().out.split("\n", 1)[1])
    assert echoed["fl"]["K"] == 4 and echoed["fl"]["lr0"] == 0.1


def test_cli_invalid_config_exits_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "fl": {\n    "batch_size": 0\n  }\n}')
    assert main(["validate", str(bad)]) != 0
    err = capsys.readouterr().err
    assert "bad.json:3" in err and "fl.batch_size" in err
    assert main(["run", str(bad), "--out", str(tmp_path / "o")]) != 0
    assert not (tmp_path / "o").exists()


def test_cli_missing_config(tmp_path, capsys):
    assert main(["run", str(tmp_path / "nope.json")]) != 0
    assert "cannot read config" in capsys.readouterr().err


def test_cli_mask_study(tmp_path):
    cfg = write(tmp_path, {**MINIMAL, "mask_study": {"counts": [1, 2], "clients": 4}, "seeds": [0, 1]})
    assert main(["mask-study", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert len((tmp_path / "o" / "mask_study.csv").read_text().splitlines()) == 1 + 4
