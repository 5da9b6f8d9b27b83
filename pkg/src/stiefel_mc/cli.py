"""Command-line entry point: ``stiefel-mc generate|fit|diagnose|predict|export-plotdata``.

Exit codes: 0 success, 2 configuration/usage error, 3 data error,
4 numerical abort.
"""

import argparse
import csv
import glob
import json
import logging
import os
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import config as config_mod
from . import kernels
from .data import (ChainWriter, build_dataset, read_chain,
                   read_observations, write_matrix_csv, write_observations)
from .diagnostics import (autocorrelation, mad_quantiles, singular_value_summary,
                          stationarity_heuristic, write_acf_csv, write_histogram_csv,
                          write_prediction_csv, write_sv_quantiles_csv)
from .errors import ConfigError, DataError, NumericalAbort, StiefelMCError
from .models import ABState, ModelKind, SvdState, predict_entries
from .samplers import run_chain

logger = logging.getLogger("stiefel_mc")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
DATASET_JSON = "dataset.json"
OBSERVATIONS = "observations.csv"
EFFECTIVE_CONFIG = "config.effective.json"


def _limit_threads(deterministic):
    n = os.environ.get("STIEFEL_MC_THREADS")
    if deterministic:
        n = "1"
    if n:
        kernels.set_num_threads(int(n))
        try:
            from threadpoolctl import threadpool_limits
            threadpool_limits(int(n))
        except ImportError:
            pass


def _write_json(path, obj):
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# datasets on disk
# ---------------------------------------------------------------------------

def save_dataset(directory, obs, truth, cfg):
    os.makedirs(directory, exist_ok=True)
    write_observations(os.path.join(directory, OBSERVATIONS), obs)
    if truth is not None:
        write_matrix_csv(os.path.join(directory, "truth.csv"), truth)
    if "user_ids" in obs.meta:
        _write_json(os.path.join(directory, "idmap.json"),
                    {"user_ids": obs.meta["user_ids"], "movie_ids": obs.meta["movie_ids"]})
    _write_json(os.path.join(directory, DATASET_JSON),
                {"m": obs.m, "n": obs.n, "n_train": obs.n_train, "n_holdout": obs.n_holdout,
                 "spec": cfg["dataset"], "k": cfg["k"]})


def load_dataset_dir(directory):
    path = os.path.join(directory, DATASET_JSON)
    if not os.path.exists(path):
        raise DataError(f"{directory}: no {DATASET_JSON}")
    with open(path) as fh:
        info = json.load(fh)
    return read_observations(os.path.join(directory, OBSERVATIONS), info["m"], info["n"])


def dataset_from_config(cfg):
    if cfg["dataset"].get("dir"):
        return load_dataset_dir(cfg["dataset"]["dir"]), None
    return build_dataset(config_mod.dataset_spec(cfg))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(cfg):
    obs, truth = build_dataset(config_mod.dataset_spec(cfg))
    save_dataset(cfg["out"], obs, truth, cfg)
    _write_json(os.path.join(cfg["out"], EFFECTIVE_CONFIG), cfg)
    logger.info("wrote %dx%d dataset (%d train, %d holdout) to %s",
                obs.m, obs.n, obs.n_train, obs.n_holdout, cfg["out"])
    return obs, truth


def _fit_one(cfg, obs, chain_id):
    _limit_threads(cfg["deterministic"])
    spec = config_mod.chain_spec(cfg)
    s = cfg["sampler"]
    seed = cfg["seed"] + chain_id
    directory = os.path.join(cfg["out"], f"chain_{chain_id}")
    writer = ChainWriter(directory, extra_meta={
        "chain_id": chain_id, "m": obs.m, "n": obs.n, "k": cfg["k"],
        "hyperparams": cfg["hyperparams"], "sampler": s, "kind": spec.model,
    })
    summary = run_chain(spec, obs, s["iters"], s["burnin"], s["thin"], seed, writer)
    if summary.n_kept and summary.n_diverged == 3 * summary.n_iters:
        raise NumericalAbort("every proposal diverged")
    return directory, summary.acceptance, summary.wall_time


def cmd_fit(cfg):
    obs, truth = dataset_from_config(cfg)
    if cfg["model"] == "b-svd":
        obs.training.log_binom(cfg["k"])  # validate counts before sampling
    os.makedirs(cfg["out"], exist_ok=True)
    save_dataset(cfg["out"], obs, truth, cfg)
    _write_json(os.path.join(cfg["out"], EFFECTIVE_CONFIG), cfg)
    n = cfg["chains"]
    if n == 1:
        results = [_fit_one(cfg, obs, 0)]
    else:
        workers = int(os.environ.get("STIEFEL_MC_THREADS") or os.cpu_count() or 1)
        with ProcessPoolExecutor(max_workers=max(1, min(n, workers))) as pool:
            results = list(pool.map(_fit_one, [cfg] * n, [obs] * n, range(n)))
    for directory, acc, wall in results:
        logger.info("%s: acceptance %s, %.1fs", directory, acc, wall)
    return [r[0] for r in results]


def _chain_dirs(path):
    if os.path.exists(os.path.join(path, "manifest.json")):
        return [path]
    dirs = sorted(glob.glob(os.path.join(path, "chain_*")))
    dirs = [d for d in dirs if os.path.exists(os.path.join(d, "manifest.json"))]
    if not dirs:
        raise DataError(f"{path}: not a chain directory")
    return dirs


def _kind_from_manifest(man):
    if man["model"] == "ab-gibbs":
        return None
    return ModelKind(man["model"], man.get("k") if man["model"] == "b-svd" else None)


def _states(chain):
    for k in range(chain.n_snapshots):
        snap = chain.snapshot(k)
        if "A" in snap:
            yield ABState(snap["A"], snap["B"], 1.0, 1.0)
        else:
            yield SvdState(snap["U"], snap["s"], snap["V"])


def _scalar_params(trace):
    names = [c for c in trace if c.startswith("s_")] + [c for c in ("gamma", "tau") if c in trace]
    return [c for c in names if np.all(np.isfinite(trace[c]))]


def _no_samples(chain, path, need_snapshots=True):
    if chain.manifest["n_records"] == 0 or (need_snapshots and chain.n_snapshots == 0):
        raise DataError(f"{path}: no kept samples")


def _atomic_dir(final):
    parent = os.path.dirname(os.path.abspath(final))
    os.makedirs(parent, exist_ok=True)
    return tempfile.mkdtemp(prefix=".tmp-", dir=parent)


def _commit_dir(tmp, final):
    if os.path.exists(final):
        old = final + ".old"
        shutil.rmtree(old, ignore_errors=True)
        os.replace(final, old)
        os.replace(tmp, final)
        shutil.rmtree(old, ignore_errors=True)
    else:
        os.replace(tmp, final)


def diagnose_chain(path, out=None, max_lag=50):
    chain = read_chain(path)
    _no_samples(chain, path, need_snapshots=False)
    out = out or os.path.join(path, "diagnostics")
    tmp = _atomic_dir(out)
    trace = chain.trace
    names = _scalar_params(trace)
    with open(os.path.join(tmp, "trace_excerpt.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        cols = ["iteration", "log_posterior", "log_likelihood"] + names
        w.writerow(cols)
        step = max(1, len(trace["iteration"]) // 1000)
        for t in range(0, len(trace["iteration"]), step):
            w.writerow([format(trace[c][t], ".17g") for c in cols])
    acf = autocorrelation(np.column_stack([trace[c] for c in names]), max_lag) if names else None
    if acf is not None:
        write_acf_csv(os.path.join(tmp, "acf.csv"), acf)
        with open(os.path.join(tmp, "iact.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["parameter", "iact", "degenerate"])
            for name, tau, deg in zip(names, acf.iact, acf.degenerate):
                w.writerow([name, format(float(tau), ".17g"), int(deg)])
    verdict = stationarity_heuristic(trace["log_posterior"]) if len(trace["log_posterior"]) >= 8 else "too-short"
    report = {"stationarity": verdict, "n_records": chain.manifest["n_records"],
              "mean_iact": None if acf is None else acf.mean_iact}
    if "s" in chain.blocks and chain.n_snapshots:
        q = singular_value_summary(chain.blocks["s"])
        write_sv_quantiles_csv(os.path.join(tmp, "sv_quantiles.csv"), q)
    _write_json(os.path.join(tmp, "verdict.json"), report)
    _commit_dir(tmp, out)
    return report


def cmd_diagnose(path, out=None):
    if not os.path.isdir(path):
        raise DataError(f"{path}: no such chain directory")
    reports = {}
    for d in _chain_dirs(path):
        target = out if out and len(_chain_dirs(path)) == 1 else (
            os.path.join(out, os.path.basename(d)) if out else None)
        reports[d] = diagnose_chain(d, target)
        logger.info("%s: %s", d, reports[d])
    return reports


def holdout_predictions(chain, obs):
    kind = _kind_from_manifest(chain.manifest)
    ho = obs.holdout
    if len(ho) == 0:
        raise DataError("dataset has no holdout entries")
    return np.array([predict_entries(st, kind, ho.rows, ho.cols) for st in _states(chain)]), ho.y


def _dataset_for_chain(path, dataset):
    if dataset:
        return load_dataset_dir(dataset)
    parent = os.path.dirname(os.path.abspath(path))
    return load_dataset_dir(parent)


def cmd_predict(path, dataset=None, estimator="posterior-mean", out=None, bins=50):
    results = {}
    for d in _chain_dirs(path):
        chain = read_chain(d)
        _no_samples(chain, d)
        obs = _dataset_for_chain(d, dataset)
        preds, y = holdout_predictions(chain, obs)
        summary = mad_quantiles(preds, y, estimator)
        target = out or d
        os.makedirs(target, exist_ok=True)
        write_prediction_csv(os.path.join(target, "prediction.csv"), summary)
        write_histogram_csv(os.path.join(target, "mad_histogram.csv"), summary.deviations, bins)
        print(f"{d}: {estimator} MAD quantiles [1%, 50%, 99%] = "
              f"[{summary.quantiles[0]:.4g}, {summary.quantiles[1]:.4g}, {summary.quantiles[2]:.4g}]")
        results[d] = summary
    return results


PLOT_FILES = ("trace.csv", "acf.csv", "mad_histogram.csv", "sv_quantiles.csv")


def cmd_export_plotdata(path, out=None, dataset=None, estimator="posterior-mean", max_lag=50):
    exported = {}
    for d in _chain_dirs(path):
        chain = read_chain(d)
        _no_samples(chain, d)
        final = out if out and len(_chain_dirs(path)) == 1 else (
            os.path.join(out, os.path.basename(d)) if out else os.path.join(d, "plotdata"))
        tmp = _atomic_dir(final)
        trace = chain.trace
        names = ["iteration", "log_posterior", "log_likelihood"] + _scalar_params(trace)
        with open(os.path.join(tmp, "trace.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for t in range(len(trace["iteration"])):
                w.writerow([format(trace[c][t], ".17g") for c in names])
        params = _scalar_params(trace)
        if params:
            write_acf_csv(os.path.join(tmp, "acf.csv"),
                          autocorrelation(np.column_stack([trace[c] for c in params]), max_lag))
        obs = _dataset_for_chain(d, dataset)
        preds, y = holdout_predictions(chain, obs)
        write_histogram_csv(os.path.join(tmp, "mad_histogram.csv"), mad_quantiles(preds, y, estimator).deviations)
        if "s" in chain.blocks:
            write_sv_quantiles_csv(os.path.join(tmp, "sv_quantiles.csv"), singular_value_summary(chain.blocks["s"]))
        _commit_dir(tmp, final)
        exported[d] = sorted(os.listdir(final))
    return exported


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="stiefel-mc", description=__doc__.splitlines()[0])
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = p.add_subparsers(dest="command", required=True)

    def run_opts(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--chains", type=int)
        sp.add_argument("--deterministic", action="store_true", default=None)

    run_opts(sub.add_parser("generate", help="write a dataset (synthetic or parsed real data)"))
    run_opts(sub.add_parser("fit", help="run the configured sampler"))
    d = sub.add_parser("diagnose", help="trace, ACF/IACT, stationarity and singular-value summaries")
    d.add_argument("chain_dir")
    d.add_argument("--out")
    pr = sub.add_parser("predict", help="holdout deviation quantiles and histogram")
    pr.add_argument("chain_dir")
    pr.add_argument("--dataset", help="dataset directory (default: the run directory)")
    pr.add_argument("--estimator", default="posterior-mean",
                    choices=["posterior-mean", "posterior-median", "per-sample"])
    pr.add_argument("--out")
    ex = sub.add_parser("export-plotdata", help="CSV files for external plotting")
    ex.add_argument("chain_dir")
    ex.add_argument("--out")
    ex.add_argument("--dataset")
    return p


def _run_config(args):
    raw = {}
    if args.config:
        try:
            with open(args.config) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
    return config_mod.resolve(raw, seed=args.seed, out=args.out, chains=args.chains,
                              deterministic=args.deterministic)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        if args.command in ("generate", "fit"):
            cfg = _run_config(args)
            _limit_threads(cfg["deterministic"])
            (cmd_generate if args.command == "generate" else cmd_fit)(cfg)
        elif args.command == "diagnose":
            cmd_diagnose(args.chain_dir, args.out)
        elif args.command == "predict":
            cmd_predict(args.chain_dir, args.dataset, args.estimator, args.out)
        else:
            cmd_export_plotdata(args.chain_dir, args.out, args.dataset)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalAbort, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except StiefelMCError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
