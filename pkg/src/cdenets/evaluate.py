"""Metrics, validation grid search and experiment orchestration."""
import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import data as D
from .errors import CdeError, ConfigError, TrainingError
from .models import DENSITY_TAGS, MODEL_TAGS, CdeModel, TrainConfig

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
REPORT_FORMAT = "cdenets.report/1"

DEFAULT_LAMBDAS = (0.001, 0.01, 0.1, 1.0, 10.0)
DEFAULT_KS = (0, 1, 2)
DEFAULT_COMPONENTS = (1, 2, 3, 5, 10)


def floored_log(probs):
    return np.log(np.maximum(probs, PROB_FLOOR))


def log_prob_from_density(log_density, labels):
    """Mean floored log-probability of ``labels`` under rows of ``log_density``."""
    labels = np.asarray(labels, dtype=np.int64)
    picked = log_density[np.arange(len(labels)), labels]
    return float(np.mean(np.maximum(picked, math.log(PROB_FLOOR))))


def heldout_log_prob(model, x, targets):
    """Mean log-probability per example of the bins containing ``targets``."""
    labels = D.discretize(np.asarray(targets, dtype=float).reshape(len(x), -1), model.grid)
    return log_prob_from_density(model.log_density(x), labels)


def rmse(predictions, targets):
    """Root of the mean over examples of squared error summed over target dimensions."""
    p = np.asarray(predictions, dtype=float)
    t = np.asarray(targets, dtype=float).reshape(p.shape)
    return float(np.sqrt(np.mean(np.sum((p - t) ** 2, axis=1))))


def heldout_rmse(model, x, targets):
    return rmse(model.predict_point(x), np.asarray(targets, dtype=float).reshape(len(x), -1))


@dataclass
class SearchGrid:
    lambdas: tuple = DEFAULT_LAMBDAS
    ks: tuple = DEFAULT_KS
    components: tuple = DEFAULT_COMPONENTS
    metric: str = "val_log_prob"

    def __post_init__(self):
        self.lambdas = tuple(float(v) for v in self.lambdas)
        self.ks = tuple(int(v) for v in self.ks)
        self.components = tuple(int(v) for v in self.components)
        if not (self.lambdas and self.ks and self.components):
            raise ConfigError("search grid axes must be non-empty")
        if min(self.lambdas) < 0 or min(self.ks) < 0 or min(self.components) < 1:
            raise ConfigError("search grid requires lambda >= 0, k >= 0, M >= 1")
        if self.metric not in ("val_log_prob", "val_rmse"):
            raise ConfigError(f"unknown selection metric {self.metric!r}")

    def cells(self, base):
        if base.model == "trendfilter":
            return [base.with_(lam=lam, k=k) for lam in self.lambdas for k in self.ks]
        if base.model == "mdn":
            return [base.with_(components=m) for m in self.components]
        return [base]

    def to_dict(self):
        return {"lambdas": list(self.lambdas), "ks": list(self.ks),
                "components": list(self.components), "metric": self.metric}


def _fit_cell(args):
    config, grid, x_tr, y_tr, x_val, y_val = args
    row = {"config": config.to_dict(), "status": "ok"}
    try:
        model = CdeModel(config, grid, x_tr.shape[1])
        history = model.fit(x_tr, y_tr)
        row["final_train_loss"] = history[-1] if history else None
        if config.model in DENSITY_TAGS:
            row["val_log_prob"] = heldout_log_prob(model, x_val, y_val)
        row["val_rmse"] = heldout_rmse(model, x_val, y_val)
        if not all(math.isfinite(v) for k, v in row.items() if k.startswith("val_")):
            raise TrainingError("non-finite validation metric")
        return row, model.to_bytes()
    except TrainingError as exc:
        row["status"] = "failed"
        row["error"] = str(exc)
        return row, None


def _selection_key(row, metric):
    cfg = row["config"]
    score = row[metric] if metric == "val_log_prob" else -row[metric]
    return (-score, cfg["lam"], cfg["k"], cfg["components"])


def grid_search(search, base_config, grid, train, val, workers=1):
    """Train one model per grid cell and keep the best on validation.

    ``train`` and ``val`` are ``(features, targets)`` pairs.  Ties go to the
    smaller lambda, then smaller k, then fewer components.  Returns
    ``(best model, best config, table of every cell)``.
    """
    metric = search.metric
    if base_config.model == "point" and metric == "val_log_prob":
        metric = "val_rmse"
    jobs = [(cfg, grid, train[0], train[1], val[0], val[1]) for cfg in search.cells(base_config)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_fit_cell, jobs))
    else:
        results = [_fit_cell(j) for j in jobs]
    table = [row for row, _ in results]
    ok = [(row, blob) for row, blob in results if row["status"] == "ok"]
    if not ok:
        raise TrainingError(f"every grid cell failed for model {base_config.model!r}")
    best_row, best_blob = min(ok, key=lambda rb: _selection_key(rb[0], metric))
    best_model, _ = CdeModel.from_bytes(best_blob)
    return best_model, best_model.config, table


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

MANIFEST_KEYS = {"name", "dataset", "models", "trials", "seed", "fractions", "search", "train",
                 "model_train", "workers", "output", "record_timing"}


def validate_manifest(manifest):
    if not isinstance(manifest, dict):
        raise ConfigError("manifest must be a JSON object")
    unknown = set(manifest) - MANIFEST_KEYS
    if unknown:
        raise ConfigError(f"unknown manifest keys {sorted(unknown)}")
    if "dataset" not in manifest:
        raise ConfigError("manifest needs a 'dataset' entry")
    trials = manifest.get("trials", 1)
    if not isinstance(trials, int) or trials < 1:
        raise ConfigError(f"trials must be a positive integer, got {trials!r}")
    models = manifest.get("models", list(MODEL_TAGS))
    bad = [m for m in models if m not in MODEL_TAGS]
    if bad or not models:
        raise ConfigError(f"unknown or empty model list: {bad or models}")
    kind = manifest["dataset"].get("kind")
    if kind not in ("synthetic", "csv", "dataset"):
        raise ConfigError(f"dataset kind must be synthetic, csv or dataset, got {kind!r}")
    SearchGrid(**manifest.get("search", {}))
    TrainConfig.from_dict({"model": models[0], **manifest.get("train", {})})
    return manifest


def trial_seeds(seed, trials):
    children = np.random.SeedSequence(int(seed)).spawn(trials)
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]


def _synthetic_spec(ds_cfg):
    return D.SyntheticSpec(
        n_classes=int(ds_cfg.get("classes", 10)),
        n_components=int(ds_cfg.get("components", 3)),
        bins=int(ds_cfg.get("bins", 32)),
        noise=float(ds_cfg.get("noise", 0.1)),
        seed=int(ds_cfg.get("spec_seed", 0)),
    )


def _synthetic_total(ds_cfg, fractions):
    if "samples" in ds_cfg:
        return int(ds_cfg["samples"])
    n_train = int(ds_cfg["train_samples"])
    total = int(math.ceil(n_train / fractions[0]))
    while D.split_counts(total, fractions)[0] < n_train:
        total += 1
    return total


def _resolve_path(path, base_dir):
    if base_dir and not os.path.isabs(path):
        return os.path.join(base_dir, path)
    return path


def _load_base_dataset(ds_cfg, base_dir):
    kind = ds_cfg["kind"]
    if kind == "csv":
        return D.load_csv(_resolve_path(ds_cfg["path"], base_dir), ds_cfg["features"], ds_cfg["targets"],
                          categorical=ds_cfg.get("categorical", ()))
    if kind == "dataset":
        return D.load_dataset(_resolve_path(ds_cfg["path"], base_dir))
    return None


def _trial_data(ds_cfg, base, fractions, seed):
    """Split (and possibly generate) one trial's dataset; returns (dataset, grid, truth)."""
    truth = None
    if ds_cfg["kind"] == "synthetic":
        spec = _synthetic_spec(ds_cfg)
        ds, truth = D.generate_synthetic(spec, _synthetic_total(ds_cfg, fractions), seed=seed)
    else:
        ds = base
    ds = D.split(ds, fractions, seed)
    if ds_cfg.get("standardize"):
        ds = D.standardize_features(ds)
    bins = ds_cfg.get("bins", 32)
    grid = ds.grid if ds.grid is not None else ds.fit_grid(bins)
    return ds, grid, truth


def oracle_log_prob(truth, dataset, grid, rows):
    labels = D.discretize(dataset.targets[rows], grid)
    return float(np.mean(floored_log(truth[dataset.classes[rows], labels])))


def run_experiment(manifest, base_dir=None, progress=None):
    """Run every (trial, model) of a manifest; returns the report dict."""
    manifest = validate_manifest(dict(manifest))
    fractions = tuple(manifest.get("fractions", (0.8, 0.1, 0.1)))
    trials = manifest.get("trials", 1)
    seeds = trial_seeds(manifest.get("seed", 0), trials)
    models = list(manifest.get("models", MODEL_TAGS))
    search = SearchGrid(**manifest.get("search", {}))
    train_opts = manifest.get("train", {})
    per_model = manifest.get("model_train", {})
    workers = int(manifest.get("workers", 1))
    timing = bool(manifest.get("record_timing", False))
    ds_cfg = manifest["dataset"]
    base = _load_base_dataset(ds_cfg, base_dir)

    per = {m: {"log_prob": [], "rmse": [], "selected": [], "search": [], "wall_clock_s": []} for m in models}
    oracle, n_train = [], []
    for t, seed in enumerate(seeds):
        ds, grid, truth = _trial_data(ds_cfg, base, fractions, seed)
        x_tr, y_tr, _ = ds.part("train")
        x_val, y_val, _ = ds.part("val")
        x_te, y_te, te_rows = ds.part("test")
        n_train.append(int(len(x_tr)))
        if truth is not None:
            oracle.append(oracle_log_prob(truth, ds, grid, te_rows))
        for tag in models:
            started = time.perf_counter()
            cfg = TrainConfig.from_dict({**train_opts, **per_model.get(tag, {}), "model": tag, "seed": seed})
            model, chosen, table = grid_search(search, cfg, grid, (x_tr, y_tr), (x_val, y_val), workers)
            entry = per[tag]
            if tag in DENSITY_TAGS:
                entry["log_prob"].append(heldout_log_prob(model, x_te, y_te))
            entry["rmse"].append(heldout_rmse(model, x_te, y_te))
            if tag == "mdn":
                ll = model.continuous_log_likelihood(x_te, y_te)
                entry.setdefault("continuous_log_prob", []).append(float(np.mean(ll)))
            entry["selected"].append(chosen.to_dict())
            entry["search"].append(table)
            entry["wall_clock_s"].append(time.perf_counter() - started if timing else None)
            if progress:
                progress(t, tag, entry)

    report = {
        "format": REPORT_FORMAT,
        "name": manifest.get("name", ""),
        "manifest": manifest,
        "seeds": seeds,
        "n_train": n_train,
        "models": {},
    }
    if oracle:
        report["oracle_log_prob"] = oracle
        report["oracle_log_prob_mean"] = float(np.mean(oracle))
    for tag, entry in per.items():
        out = dict(entry)
        if entry["log_prob"]:
            out["log_prob_mean"] = float(np.mean(entry["log_prob"]))
        else:
            out["log_prob"] = None
            out["log_prob_mean"] = None
        out["rmse_mean"] = float(np.mean(entry["rmse"]))
        if "continuous_log_prob" in entry:
            out["continuous_log_prob_mean"] = float(np.mean(entry["continuous_log_prob"]))
        report["models"][tag] = out
    return report


def report_json(report):
    return json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n"


def report_rows(report):
    """Flat (model, trial, metric, value) rows."""
    rows = []
    for tag, entry in report["models"].items():
        for metric in ("log_prob", "rmse", "continuous_log_prob"):
            values = entry.get(metric) or []
            for trial, value in enumerate(values):
                rows.append((tag, trial, metric, value))
    for trial, value in enumerate(report.get("oracle_log_prob", [])):
        rows.append(("oracle", trial, "log_prob", value))
    return rows


def report_csv(report):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["model", "trial", "metric", "value"])
    for row in report_rows(report):
        writer.writerow([row[0], row[1], row[2], repr(float(row[3]))])
    return buf.getvalue()


def write_report(report, path):
    """Write ``path`` (JSON) and a sibling ``.csv`` atomically."""
    path = os.fspath(path)
    D.atomic_write(path, report_json(report))
    stem = path[:-5] if path.endswith(".json") else path
    D.atomic_write(stem + ".csv", report_csv(report))


def plot_table(reports):
    """(sample_size, model, log_prob) rows from a set of reports."""
    rows = []
    for rep in reports:
        if rep.get("format") != REPORT_FORMAT:
            raise CdeError("not a metric report")
        n = int(np.mean(rep["n_train"]))
        for tag, entry in rep["models"].items():
            if entry.get("log_prob_mean") is not None:
                rows.append((n, tag, entry["log_prob_mean"]))
        if "oracle_log_prob_mean" in rep:
            rows.append((n, "oracle", rep["oracle_log_prob_mean"]))
    rows.sort(key=lambda r: (r[0], r[1]))
    return rows
