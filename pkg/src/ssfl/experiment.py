"""Config files, multi-variant/multi-seed runs and result bundles on disk.

A config is a JSON object validated against ``schema.json`` (shipped with the
package).  Missing keys take the values in :data:`DEFAULTS`; the fully
resolved config is echoed next to the results so a run can be repeated from
the echo alone.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
from json_source_map import calculate as source_map

from ssfl import masks as mk
from ssfl.data import Dataset, PartitionSpec, make_synthetic, partition, sample_balanced_minibatch
from ssfl.fl import FLConfig, OODSchedule, Simulation, SyntheticSpec
from ssfl.nn import init_kaiming, mlp_layout
from ssfl.seeding import substream

OUTPUT_ROOT_ENV = "SSFL_OUTPUT_ROOT"

DEFAULTS: dict = {
    "dataset": {"kind": "synthetic", "num_classes": 10, "num_features": 32, "per_class": 500,
                "test_per_class": 500, "spread": 3.0},
    "model": {"hidden": [64, 64], "mask_biases": True},
    "fl": {"K": 16, "R": 50, "local_epochs": 5.0, "local_steps": None, "client_fraction": 1.0, "sigma": 0.5,
           "batch_size": 16, "lr0": 0.1, "lr_decay": 0.998, "weight_decay": 5e-4, "warmup_rounds": 10},
    "partition": {"mode": "dirichlet", "alpha": 0.3, "classes_per_client": 2},
    "ood": None,
    "mask_study": {"counts": [1, 2, 4, 8, 16, 32], "clients": 32},
    "variants": ["ssfl"],
    "seeds": [0],
    "output": {"dir": "results", "formats": ["csv", "json"]},
}
OOD_DEFAULTS = {"holdout_classes": [8, 9], "refresh_round": 30, "new_clients": 4}

METRIC_COLUMNS = (
    ["round", "variant", "seed", "global_acc", "mean_local_acc", "p10_local_acc", "median_local_acc"]
    + [f"uplink_bytes_{s}" for s in ("dense", "values_only", "coo", "bitmask")]
    + [f"downlink_bytes_{s}" for s in ("dense", "values_only", "coo", "bitmask")]
    + ["lr", "seen_acc", "heldout_acc"]
)
LEDGER_COLUMNS = ["variant", "seed", "round", "direction", "client", "scheme", "bytes"]
MASK_STUDY_COLUMNS = ["count", "seed", "mask_error"]

# FLConfig field -> config key path, for pointing validation errors at a line
_FIELD_PATHS = {
    "K": "/fl/K", "R": "/fl/R", "client_fraction": "/fl/client_fraction", "sigma": "/fl/sigma",
    "batch_size": "/fl/batch_size", "lr0": "/fl/lr0", "weight_decay": "/fl/weight_decay",
    "variant": "/variants", "local_steps": "/fl/local_steps", "local_epochs": "/fl/local_epochs",
    "warmup_rounds": "/fl/warmup_rounds", "ood": "/ood", "ood.refresh_round": "/ood/refresh_round",
    "ood.new_clients": "/ood/new_clients",
}


class ConfigError(ValueError):
    pass


def schema() -> dict:
    return json.loads(resources.files("ssfl").joinpath("schema.json").read_text())


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _line_of(smap: dict, pointer: str) -> int | None:
    while pointer not in smap and pointer:
        pointer = pointer.rsplit("/", 1)[0]
    entry = smap.get(pointer)
    if entry is None:
        return None
    loc = entry.key_start or entry.value_start
    return loc.line + 1


def _where(name: str, smap: dict, pointer: str) -> str:
    line = _line_of(smap, pointer)
    return f"{name}:{line}" if line else name


def resolve(raw: dict) -> dict:
    """Defaults filled in; an ``ood`` object gets its own defaults too."""
    cfg = _merge(DEFAULTS, raw)
    if cfg["ood"] is not None:
        cfg["ood"] = _merge(OOD_DEFAULTS, cfg["ood"])
    return cfg


def parse_config(text: str, name: str = "<config>") -> dict:
    """Parse, schema-check and resolve a config; errors carry ``name:line``."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{name}:{e.lineno}: invalid JSON: {e.msg}") from None
    smap = source_map(text)
    errors = sorted(jsonschema.Draft202012Validator(schema()).iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        field = ".".join(str(p) for p in err.absolute_path) or "<root>"
        pointer = "".join(f"/{p}" for p in err.absolute_path)
        raise ConfigError(f"{_where(name, smap, pointer)}: {field}: {err.message}")
    cfg = resolve(raw)
    for variant in cfg["variants"]:
        try:
            fl_config(cfg, variant, cfg["seeds"][0]).validate()
        except ValueError as e:
            field = str(e).split(":", 1)[0]
            pointer = _FIELD_PATHS.get(field, "")
            raise ConfigError(f"{_where(name, smap, pointer)}: {e}") from None
    study = cfg["mask_study"]
    numeric = [c for c in study["counts"] if c != "all"]
    if numeric and max(numeric) > study["clients"]:
        raise ConfigError(f"{_where(name, smap, '/mask_study/counts')}: mask_study.counts: count {max(numeric)} "
                          f"exceeds mask_study.clients={study['clients']}")
    ds = cfg["dataset"]
    if ds["kind"] == "csv" and not (ds.get("train") and ds.get("test")):
        raise ConfigError(f"{_where(name, smap, '/dataset')}: dataset: csv datasets need 'train' and 'test' paths")
    return cfg


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config: {e.strerror}") from None
    cfg = parse_config(text, str(path))
    ds = cfg["dataset"]
    if ds["kind"] == "csv":
        for key in ("train", "test"):
            ds[key] = str((path.parent / ds[key]).resolve())
    return cfg


def fl_config(cfg: dict, variant: str, seed: int) -> FLConfig:
    fl, ds, ood = cfg["fl"], cfg["dataset"], cfg["ood"]
    return FLConfig(
        K=fl["K"], R=fl["R"], local_epochs=float(fl["local_epochs"]), local_steps=fl["local_steps"],
        client_fraction=fl["client_fraction"], sigma=fl["sigma"], batch_size=fl["batch_size"], lr0=fl["lr0"],
        lr_decay=fl["lr_decay"], weight_decay=fl["weight_decay"], warmup_rounds=fl["warmup_rounds"],
        partition=PartitionSpec(mode=cfg["partition"]["mode"], K=fl["K"], alpha=cfg["partition"]["alpha"],
                                classes_per_client=cfg["partition"]["classes_per_client"], seed=seed),
        variant=variant,
        hidden=tuple(cfg["model"]["hidden"]),
        mask_biases=cfg["model"]["mask_biases"],
        data=SyntheticSpec(ds.get("num_classes", 10), ds.get("num_features", 32), ds.get("per_class", 500),
                           ds.get("test_per_class", 500), ds.get("spread", 3.0)),
        ood=OODSchedule(**ood) if ood is not None else None,
        seed=seed,
    )


def load_data(cfg: dict, seed: int) -> tuple[Dataset, Dataset]:
    ds = cfg["dataset"]
    if ds["kind"] == "csv":
        n = ds.get("num_classes")
        return Dataset.from_csv(ds["train"], n), Dataset.from_csv(ds["test"], n)
    return make_synthetic(ds["num_classes"], ds["num_features"], ds["per_class"], ds["spread"], seed,
                          test_per_class=ds["test_per_class"])


def output_dir(cfg: dict, out=None) -> Path:
    """``--out`` beats the config; relative paths hang off ``$SSFL_OUTPUT_ROOT`` when set."""
    path = Path(out if out is not None else cfg["output"]["dir"])
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


@dataclass
class RunResult:
    variant: str
    seed: int
    metrics: list[dict]
    ledger_rows: list[tuple]
    ledger_summary: dict
    mask_stats: dict | None


def run_one(cfg: dict, variant: str, seed: int) -> RunResult:
    train, test = load_data(cfg, seed)
    sim = Simulation(fl_config(cfg, variant, seed), train, test)
    metrics = [m.as_row() for m in sim.run()]
    summary = sim.ledger.summarize()
    if sim.mask is not None:
        stats = mk.layer_densities(sim.mask, sim.layout).to_dict()
    elif variant == "random_local":
        stats = {"clients": [mk.layer_densities(c.mask, sim.layout).to_dict() for c in sim.clients]}
    else:
        stats = None
    return RunResult(variant, seed, metrics, list(sim.ledger.rows()), summary, stats)


def _run_job(job):
    return run_one(*job)


def execute(cfg: dict, jobs: int = 1) -> list[RunResult]:
    """All (variant, seed) runs, returned in config order whatever the worker count."""
    work = [(cfg, v, s) for v in cfg["variants"] for s in cfg["seeds"]]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(work))) as pool:
            return list(pool.map(_run_job, work))
    return [_run_job(w) for w in work]


def _stats(values: list[float]) -> dict:
    a = np.asarray(values, dtype=np.float64)
    return {"mean": float(a.mean()), "std": float(a.std()), "n": int(len(a))}


def summarize(cfg: dict, results: list[RunResult]) -> dict:
    runs = []
    per_variant: dict[str, dict[str, list[float]]] = {}
    for r in results:
        last = r.metrics[-1]
        led = r.ledger_summary
        entry = {
            "variant": r.variant,
            "seed": r.seed,
            "final_global_acc": last["global_acc"],
            "final_mean_local_acc": last["mean_local_acc"],
            "final_p10_local_acc": last["p10_local_acc"],
            "final_seen_acc": last["seen_acc"],
            "final_heldout_acc": last["heldout_acc"],
            "ledger": {k: led[k] for k in ("totals", "total_both_directions", "percent_of_dense", "setup")},
        }
        runs.append(entry)
        acc = per_variant.setdefault(r.variant, {"final_global_acc": [], "final_mean_local_acc": []})
        acc["final_global_acc"].append(last["global_acc"])
        acc["final_mean_local_acc"].append(last["mean_local_acc"])
    variants = {v: {k: _stats(vals) for k, vals in d.items()} for v, d in per_variant.items()}
    return {"runs": runs, "variants": variants, "config": cfg}


def write_bundle(cfg: dict, results: list[RunResult], out: Path) -> None:
    formats = cfg["output"]["formats"]
    atomic_write(out / "config.resolved.json", json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    if "csv" in formats:
        metric_rows = ([r.variant if c == "variant" else r.seed if c == "seed" else m[c] for c in METRIC_COLUMNS]
                       for r in results for m in r.metrics)
        atomic_write(out / "metrics.csv", _csv(METRIC_COLUMNS, metric_rows))
        ledger_rows = ((r.variant, r.seed, *row) for r in results for row in r.ledger_rows)
        atomic_write(out / "ledger.csv", _csv(LEDGER_COLUMNS, ledger_rows))
    if "json" in formats:
        atomic_write(out / "summary.json", json.dumps(summarize(cfg, results), indent=2, sort_keys=True) + "\n")
        stats = [{"variant": r.variant, "seed": r.seed, "mask": r.mask_stats} for r in results]
        atomic_write(out / "mask_stats.json", json.dumps(stats, indent=2, sort_keys=True) + "\n")


def _override(cfg: dict, seed: int | None) -> dict:
    if seed is None:
        return cfg
    cfg = copy.deepcopy(cfg)
    cfg["seeds"] = [seed]
    return cfg


def run_experiment(config, out=None, seed: int | None = None, jobs: int = 1) -> Path:
    """Run every variant and seed of ``config`` (a path or a parsed dict) and write the bundle."""
    cfg = load_config(config) if not isinstance(config, dict) else parse_config(json.dumps(config))
    cfg = _override(cfg, seed)
    dest = output_dir(cfg, out)
    cfg["output"]["dir"] = str(dest)
    write_bundle(cfg, execute(cfg, jobs), dest)
    return dest


# -- mask-error study ---------------------------------------------------------


def mask_study_errors(cfg: dict, seed: int) -> list[tuple]:
    """``(count, seed, mask_error)`` for each count in ``cfg["mask_study"]["counts"]``.

    Clients come from the configured partition with ``mask_study.clients``
    shards; count ``c`` aggregates one balanced minibatch from each of the
    first ``c`` clients.  ``"all"`` scores the whole training set as a single
    batch, which is the oracle itself.
    """
    study, fl = cfg["mask_study"], cfg["fl"]
    train, _ = load_data(cfg, seed)
    layout = mlp_layout([train.num_features, *cfg["model"]["hidden"], train.num_classes])
    w = init_kaiming(layout, seed)
    oracle = mk.oracle_mask(w, layout, train.batch(), fl["sigma"])
    n_clients = study["clients"]
    spec = PartitionSpec(mode=cfg["partition"]["mode"], K=n_clients, alpha=cfg["partition"]["alpha"],
                         classes_per_client=cfg["partition"]["classes_per_client"], seed=seed)
    shards = partition(train, spec).shards
    numeric = [c for c in study["counts"] if c != "all"]
    saliency = []
    for shard in shards[: max(numeric, default=0)]:
        batch = sample_balanced_minibatch(shard, train, fl["batch_size"], substream(seed, "mask-study", shard.client_id))
        saliency.append((mk.local_saliency(w, layout, batch), shard.n_k))
    rows = []
    for c in study["counts"]:
        if c == "all":
            m = mk.topk_mask(mk.local_saliency(w, layout, train.batch()), fl["sigma"])
        else:
            m = mk.topk_mask(mk.aggregate_saliency(saliency[:c]), fl["sigma"])
        rows.append((c, seed, mk.mask_error(m, oracle)))
    return rows


def run_mask_study(config, out=None, seed: int | None = None) -> Path:
    cfg = load_config(config) if not isinstance(config, dict) else parse_config(json.dumps(config))
    cfg = _override(cfg, seed)
    dest = output_dir(cfg, out)
    cfg["output"]["dir"] = str(dest)
    rows = [row for s in cfg["seeds"] for row in mask_study_errors(cfg, s)]
    atomic_write(dest / "mask_study.csv", _csv(MASK_STUDY_COLUMNS, rows))
    atomic_write(dest / "config.resolved.json", json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return dest
