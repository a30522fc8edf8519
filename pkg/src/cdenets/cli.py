"""Command-line interface.

Exit codes: 0 success, 1 unexpected failure, 2 invalid configuration or
usage, 3 data loading failure, 4 training divergence.  Failures print one
line to stderr: ``error code=<code> message=<json string>``.
"""
import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from . import data as D
from . import evaluate as E
from .errors import CdeError, ConfigError, DataError
from .models import MODEL_TAGS, CdeModel, TrainConfig

log = logging.getLogger("cdenets")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail("usage", message, 2)


def _fail(code, message, status):
    sys.stderr.write(f"error code={code} message={json.dumps(str(message))}\n")
    sys.exit(status)


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _read_json(path, what):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{what} {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} {path} is not valid JSON: {exc}") from None


# ---------------------------------------------------------------------------
# shared training options
# ---------------------------------------------------------------------------

_TRAIN_FLAGS = {
    "model": "model", "lam": "lam", "k": "k", "components": "components", "epochs": "epochs",
    "batch_size": "batch_size", "lr": "lr", "optimizer": "optimizer", "hidden": "hidden",
    "activation": "activation", "seed": "seed", "per_node": "per_node",
}


def _add_train_flags(p, model_required=False):
    p.add_argument("--config", help="JSON file of training options (flags take precedence)")
    p.add_argument("--model", choices=MODEL_TAGS, required=model_required, help="estimator head")
    p.add_argument("--lam", type=float, help="trend-filtering penalty weight")
    p.add_argument("--k", type=int, help="trend-filtering penalty order")
    p.add_argument("--components", type=int, help="MDN mixture components")
    p.add_argument("--epochs", type=int, help="training epochs")
    p.add_argument("--batch-size", dest="batch_size", type=int, help="minibatch size")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--optimizer", choices=("adam", "sgd"), help="optimizer")
    p.add_argument("--hidden", type=_ints, help="hidden layer widths, e.g. 64,64")
    p.add_argument("--activation", choices=("relu", "tanh", "linear"), help="hidden activation")
    p.add_argument("--per-node", dest="per_node", action="store_true", default=None,
                   help="multiscale: one network per tree node instead of a shared trunk")
    p.add_argument("--seed", type=int, default=0, help="seed for splitting and initialization (default 0)")
    p.add_argument("--bins", type=_ints, default=None,
                   help="bins per target dimension, e.g. 32 or 32,32 (default: dataset grid or 32)")
    p.add_argument("--fractions", type=_floats, default=[0.8, 0.1, 0.1],
                   help="train,val,test fractions (default 0.8,0.1,0.1)")
    p.add_argument("--standardize", action="store_true", help="standardize features on the training split")


def _train_config(args, model=None):
    opts = _read_json(args.config, "config") if args.config else {}
    for flag, key in _TRAIN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            opts[key] = value
    if model is not None:
        opts["model"] = model
    if "model" not in opts:
        raise ConfigError("no model given (use --model or the config file)")
    return TrainConfig.from_dict(opts)


def _prepare(args, dataset):
    """Split, optionally standardize, and fit the grid; returns (dataset, grid, transform)."""
    if dataset.split is None:
        dataset = D.split(dataset, args.fractions, args.seed)
    transform = None
    if args.standardize:
        x_tr, _, _ = dataset.part("train")
        mean, std = x_tr.mean(axis=0), x_tr.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        transform = {"mean": mean.tolist(), "std": std.tolist()}
        dataset = D.Dataset((dataset.features - mean) / std, dataset.targets, dataset.split, dataset.grid,
                            dataset.classes, dataset.metadata)
    grid = dataset.grid if dataset.grid is not None else dataset.fit_grid(args.bins or [32])
    return dataset, grid, transform


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    spec = D.SyntheticSpec(n_classes=args.classes, n_components=args.components, bins=args.bins,
                           noise=args.noise, seed=args.spec_seed if args.spec_seed is not None else args.seed)
    ds, truth = D.generate_synthetic(spec, args.samples, seed=args.seed)
    truth_path = args.truth or (args.out[:-5] if args.out.endswith(".json") else args.out) + ".truth.json"
    D.save_truth(truth_path, spec, truth)
    D.save_dataset(args.out, ds)
    print(json.dumps({"dataset": args.out, "truth": truth_path, "n": len(ds)}))


def cmd_train(args):
    config = _train_config(args)
    ds, grid, transform = _prepare(args, D.load_dataset(args.data))
    x_tr, y_tr, _ = ds.part("train")
    model = CdeModel(config, grid, ds.n_features)
    history = model.fit(x_tr, y_tr)
    extra = {"split_seed": args.seed, "fractions": list(args.fractions), "standardize": transform,
             "train_loss": history}
    model.save(args.out, extra=extra)
    print(json.dumps({"checkpoint": args.out, "final_train_loss": history[-1] if history else None}))


def _metrics(model, x, y, truth=None, classes=None):
    out = {"n": int(len(x)), "rmse": E.heldout_rmse(model, x, y)}
    if model.config.model != "point":
        out["log_prob"] = E.heldout_log_prob(model, x, y)
    if model.config.model == "mdn":
        out["continuous_log_prob"] = float(np.mean(model.continuous_log_likelihood(x, y)))
    if truth is not None and classes is not None:
        labels = D.discretize(y, model.grid)
        out["oracle_log_prob"] = float(np.mean(E.floored_log(truth[classes, labels])))
    return out


def cmd_eval(args):
    model, meta = CdeModel.load(args.checkpoint)
    extra = meta.get("extra", {})
    ds = D.load_dataset(args.data)
    if ds.split is None:
        ds = D.split(ds, extra.get("fractions", (0.8, 0.1, 0.1)), extra.get("split_seed", 0))
    if extra.get("standardize"):
        st = extra["standardize"]
        ds = D.Dataset((ds.features - np.asarray(st["mean"])) / np.asarray(st["std"]), ds.targets, ds.split,
                       ds.grid, ds.classes, ds.metadata)
    x, y, rows = ds.part(args.split)
    truth = None
    if args.truth:
        _, truth = D.load_truth(args.truth)
    classes = ds.classes[rows] if ds.classes is not None else None
    result = {"checkpoint": args.checkpoint, "model": model.config.model, "split": args.split,
              **_metrics(model, x, y, truth, classes)}
    text = json.dumps(result, sort_keys=True)
    if args.out:
        D.atomic_write(args.out, text + "\n")
    print(text)


def cmd_gridsearch(args):
    config = _train_config(args)
    ds, grid, _ = _prepare(args, D.load_dataset(args.data))
    search = E.SearchGrid(
        lambdas=args.lambdas or E.DEFAULT_LAMBDAS,
        ks=args.ks or E.DEFAULT_KS,
        components=args.components_grid or E.DEFAULT_COMPONENTS,
    )
    x_tr, y_tr, _ = ds.part("train")
    x_val, y_val, _ = ds.part("val")
    model, chosen, table = E.grid_search(search, config, grid, (x_tr, y_tr), (x_val, y_val), args.workers)
    if args.checkpoint:
        model.save(args.checkpoint, extra={"split_seed": args.seed, "fractions": list(args.fractions)})
    doc = {"search": search.to_dict(), "selected": chosen.to_dict(), "cells": table}
    D.atomic_write(args.out, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(json.dumps({"table": args.out, "selected": chosen.to_dict()}, sort_keys=True))


def cmd_run(args):
    manifest = _read_json(args.manifest, "manifest")
    if args.trials is not None:
        manifest["trials"] = args.trials
    if args.seed is not None:
        manifest["seed"] = args.seed
    if args.workers is not None:
        manifest["workers"] = args.workers
    if args.record_timing:
        manifest["record_timing"] = True
    out = args.out or manifest.get("output") or "report.json"
    manifest["output"] = out
    base_dir = os.path.dirname(os.path.abspath(args.manifest))

    def progress(trial, tag, entry):
        lp = entry["log_prob"][-1] if entry["log_prob"] else None
        log.info("trial %d %-12s log_prob=%s rmse=%.5g", trial, tag, lp, entry["rmse"][-1])

    report = E.run_experiment(manifest, base_dir=base_dir, progress=progress)
    E.write_report(report, out)
    print(json.dumps({"report": out, "models": {t: {"log_prob_mean": m["log_prob_mean"],
                                                      "rmse_mean": m["rmse_mean"]}
                                                  for t, m in report["models"].items()}}, sort_keys=True))


def cmd_plot_data(args):
    reports = [_read_json(p, "report") for p in args.reports]
    rows = E.plot_table(reports)
    lines = ["sample_size,model,log_prob"] + [f"{n},{tag},{value!r}" for n, tag, value in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        D.atomic_write(args.out, text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="cdenets", description="Conditional density estimation over discretized targets.")
    parser.add_argument("--version", action="version", version=f"cdenets {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic class-conditional mixture dataset")
    p.add_argument("--classes", type=int, default=10, help="number of classes (default 10)")
    p.add_argument("--samples", type=int, default=500, help="number of rows (default 500)")
    p.add_argument("--bins", type=int, default=32, help="target grid bins (default 32)")
    p.add_argument("--components", type=int, default=3, help="mixture components per class (default 3)")
    p.add_argument("--noise", type=float, default=0.1, help="feature noise scale (default 0.1)")
    p.add_argument("--seed", type=int, default=0, help="sampling seed (default 0)")
    p.add_argument("--spec-seed", dest="spec_seed", type=int, help="seed for the mixtures (default: --seed)")
    p.add_argument("--out", required=True, help="dataset JSON path")
    p.add_argument("--truth", help="ground-truth JSON path (default: <out>.truth.json)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model and write a checkpoint")
    p.add_argument("--data", required=True, help="dataset JSON path")
    p.add_argument("--out", required=True, help="checkpoint path")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="dataset JSON path")
    p.add_argument("--split", choices=("train", "val", "test"), default="test", help="split (default test)")
    p.add_argument("--truth", help="ground-truth JSON for an oracle log-probability")
    p.add_argument("--out", help="also write the metrics JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gridsearch", help="validation grid search for one model")
    p.add_argument("--data", required=True, help="dataset JSON path")
    p.add_argument("--out", required=True, help="result table JSON path")
    p.add_argument("--checkpoint", help="write the selected model here")
    p.add_argument("--lambdas", type=_floats, help="lambda grid (default 0.001,0.01,0.1,1,10)")
    p.add_argument("--ks", type=_ints, help="penalty order grid (default 0,1,2)")
    p.add_argument("--components-grid", dest="components_grid", type=_ints,
                   help="MDN component grid (default 1,2,3,5,10)")
    p.add_argument("--workers", type=int, default=1, help="parallel grid cells (default 1)")
    _add_train_flags(p, model_required=False)
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("run", help="run an experiment manifest and write a report")
    p.add_argument("--manifest", required=True, help="experiment manifest JSON")
    p.add_argument("--out", help="report path (overrides the manifest's output)")
    p.add_argument("--trials", type=int, help="override the trial count")
    p.add_argument("--seed", type=int, help="override the base seed")
    p.add_argument("--workers", type=int, help="parallel grid cells (default 1)")
    p.add_argument("--record-timing", action="store_true", help="store wall-clock seconds in the report")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("plot-data", help="emit (sample_size, model, log_prob) rows from reports")
    p.add_argument("--reports", nargs="+", required=True, help="report JSON files")
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_plot_data)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CdeError as exc:
        _fail(exc.code, exc, exc.exit_status)
    except (OSError, KeyError) as exc:
        _fail(DataError.code, exc, DataError.exit_status)
    except Exception as exc:  # noqa: BLE001
        _fail("internal", f"{type(exc).__name__}: {exc}", 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
