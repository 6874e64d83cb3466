"""Command-line entry point.

Subcommands: ``fit`` (reverse-KL baseline), ``train`` (mirrored training),
``stream`` (rotating-filter experiment), ``sample`` (trajectories from a
checkpoint), ``eval`` (metrics on checkpoints) and ``sinkhorn`` (discrete
oracle).  Each run writes into ``<out>/<command>-<config hash>-s<seed>``
and refuses to touch an existing run directory unless ``--force`` is given.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 output
directory already used, 4 numerical failure, 1 anything else.  Failures
print a one-line JSON error record to stderr (and to ``error.json`` when
the run directory exists).
"""
import argparse
import concurrent.futures
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from ..dynamics import sample_sde_batch, write_trajectories_csv
from ..gmm import load_checkpoint, sample_conditional, save_checkpoint
from ..solvers import DivergenceError, discrete_sinkhorn
from .config import ConfigError, config_hash, load_config, problem_spec, resolve_config, to_toml
from .experiments import Evaluator, run_fit, run_stream, run_train, source_samples
from .problems import generate_problem

logger = logging.getLogger("mirrorbridge")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_EXISTS, EXIT_NUMERIC = 0, 1, 2, 3, 4
COMMANDS = ("fit", "train", "stream", "sample", "eval", "sinkhorn")
EVAL_COLUMNS = ("method", "problem", "seed", "energy_distance", "kl_estimate", "cbw_uvp")


class OutputExists(RuntimeError):
    pass


def build_parser():
    parser = argparse.ArgumentParser(prog="mirrorbridge", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="TOML experiment config (defaults when omitted)")
        p.add_argument("--seed", type=int, default=None, help="run seed (default: problem.seed)")
        p.add_argument("--n-seeds", type=int, default=1,
                       help="run seeds seed, seed+1, ... in parallel worker slots")
        p.add_argument("--out", type=Path, default=None, help="output root (default: output.dir)")
        p.add_argument("--dry-run", action="store_true", help="validate and print the resolved config")
        p.add_argument("--plots", action="store_true", help="also write SVG plots (needs matplotlib)")
        p.add_argument("--force", action="store_true", help="reuse an existing run directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("sample", "eval"):
            p.add_argument("--checkpoint", type=Path, action="append", required=True,
                           help="checkpoint file (repeatable for eval)")
    return parser


def worker_slots():
    raw = os.environ.get("MIRRORBRIDGE_THREADS", "1")
    try:
        slots = int(raw)
    except ValueError:
        raise ConfigError([f"MIRRORBRIDGE_THREADS must be a positive integer, got {raw!r}"]) from None
    if slots < 1:
        raise ConfigError([f"MIRRORBRIDGE_THREADS must be a positive integer, got {raw!r}"])
    return slots


def run_dir(root, command, cfg, seed):
    return Path(root) / f"{command}-{config_hash(cfg)}-s{seed}"


def _prepare(path, force):
    if path.exists() and any(path.iterdir()) and not force:
        raise OutputExists(f"{path} already holds a run; pass --force to overwrite it")
    path.mkdir(parents=True, exist_ok=True)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_eval_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(EVAL_COLUMNS)
        for row in rows:
            writer.writerow(["" if row.get(c) is None else
                             repr(float(row[c])) if isinstance(row[c], float) else row[c]
                             for c in EVAL_COLUMNS])


def _plot_samples(path, cfg, theta, seed):
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        logger.warning("matplotlib is not installed; skipping plots")
        return
    ev = Evaluator(cfg, seed)
    gen = sample_conditional(theta, ev.x_eval, seed)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(*ev.x_eval[:, :2].T, s=2, alpha=0.3, label="source")
    ax.scatter(*ev.y_eval[:, :2].T, s=2, alpha=0.3, label="target")
    ax.scatter(*gen[:, :2].T, s=2, alpha=0.3, label="generated")
    ax.legend(markerscale=4)
    ax.set_aspect("equal")
    fig.savefig(path, format="svg")
    plt.close(fig)


def _plot_trajectories(path, states):
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        logger.warning("matplotlib is not installed; skipping plots")
        return
    fig, ax = plt.subplots(figsize=(5, 5))
    for j in range(states.shape[1]):
        ax.plot(states[:, j, 0], states[:, j, 1], lw=0.5, alpha=0.6)
    ax.set_aspect("equal")
    fig.savefig(path, format="svg")
    plt.close(fig)


def run_cell(command, cfg, seed, out, plots=False, checkpoints=()):
    """Execute one (command, seed) cell into its run directory; returns the summary dict."""
    problem = cfg["problem"]["preset"] if cfg["problem"]["preset"] != "custom" else cfg["problem"]["name"]
    with open(out / "config.toml", "w") as fh:
        fh.write(to_toml(cfg))

    if command in ("train", "stream"):
        result = (run_train if command == "train" else run_stream)(cfg, seed)
        result.log.to_csv(out / "metrics.csv")
        result.target_log.to_csv(out / "target_metrics.csv")
        save_checkpoint(result.theta, out / "checkpoint.json")
        save_checkpoint(result.target, out / "target_checkpoint.json")
        summary = result.summary
        if plots and result.theta.dim >= 2:
            _plot_samples(out / "samples.svg", cfg, result.theta, seed)
    elif command == "fit":
        phi, summary = run_fit(cfg, seed)
        save_checkpoint(phi, out / "checkpoint.json")
        _write_eval_csv(out / "eval.csv", [dict(summary, method="reverse_kl", problem=problem)])
        if plots and phi.dim >= 2:
            _plot_samples(out / "samples.svg", cfg, phi, seed)
    elif command == "sample":
        theta = load_checkpoint(checkpoints[0])
        x0 = source_samples(cfg, cfg["eval"]["n_trajectories"])
        times, states = sample_sde_batch(theta, x0, cfg["eval"]["sde_steps"], seed)
        write_trajectories_csv(times, states, out / "trajectories.csv")
        summary = {"seed": seed, "n_trajectories": int(states.shape[1]), "n_steps": int(times.size - 1)}
        if plots and theta.dim >= 2:
            _plot_trajectories(out / "trajectories.svg", states)
    elif command == "eval":
        ev = Evaluator(cfg, seed)
        rows = []
        for path in checkpoints:
            theta = load_checkpoint(path)
            row = ev(theta)
            row.update(method=Path(path).stem, problem=problem, seed=seed, cbw_uvp=ev.cbw(theta))
            rows.append(row)
        _write_eval_csv(out / "eval.csv", rows)
        summary = {"seed": seed, "rows": rows}
    elif command == "sinkhorn":
        spec_n = cfg["eval"]["sinkhorn_points"]
        X, Y = generate_problem(problem_spec(cfg), spec_n, stream=seed)
        cost = 0.5 * ((X[:, None, :] - Y[None, :, :]) ** 2).sum(axis=-1)
        w = np.full(spec_n, 1.0 / spec_n)
        plan = discrete_sinkhorn(w, w, cost, float(cfg["problem"]["epsilon"]),
                                 cfg["eval"]["sinkhorn_max_iters"], float(cfg["eval"]["sinkhorn_tol"]), X, Y)
        plan.to_csv(out / "plan.csv")
        summary = {"seed": seed, "converged": plan.converged, "n_iters": plan.n_iters,
                   "marginal_error": plan.marginal_error}
    else:
        raise ValueError(f"unknown command {command!r}")
    _write_json(out / "summary.json", summary)
    return summary


def _error_record(kind, message, errors=None, code=EXIT_ERROR):
    record = {"status": "error", "kind": kind, "message": message, "exit_code": code}
    if errors:
        record["errors"] = errors
    return record


def _classify(exc):
    if isinstance(exc, ConfigError):
        return _error_record("config", str(exc), exc.errors, EXIT_CONFIG)
    if isinstance(exc, OutputExists):
        return _error_record("output_exists", str(exc), code=EXIT_EXISTS)
    if isinstance(exc, (DivergenceError, FloatingPointError, OverflowError, np.linalg.LinAlgError)):
        return _error_record("numerical", f"{type(exc).__name__}: {exc}", code=EXIT_NUMERIC)
    if isinstance(exc, (FileNotFoundError, ValueError)):
        return _error_record("input", f"{type(exc).__name__}: {exc}", code=EXIT_CONFIG)
    return _error_record("internal", f"{type(exc).__name__}: {exc}")


def _cell(args):
    command, cfg, seed, out, plots, checkpoints = args
    try:
        return run_cell(command, cfg, seed, out, plots, checkpoints), None
    except Exception as exc:  # reported as a record, not a traceback
        record = _classify(exc)
        record["seed"] = seed
        if out.exists():
            _write_json(out / "error.json", record)
        return None, record


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else resolve_config()
        if args.n_seeds < 1:
            raise ConfigError([f"--n-seeds must be at least 1, got {args.n_seeds}"])
        slots = worker_slots()
        if args.dry_run:
            sys.stdout.write(to_toml(cfg))
            return EXIT_OK
        base = cfg["problem"]["seed"] if args.seed is None else args.seed
        root = args.out if args.out is not None else Path(cfg["output"]["dir"])
        plots = args.plots or cfg["output"]["plots"]
        checkpoints = tuple(getattr(args, "checkpoint", None) or ())
        for path in checkpoints:
            if not Path(path).is_file():
                raise FileNotFoundError(f"checkpoint {path} does not exist")
        cells = []
        for seed in range(base, base + args.n_seeds):
            out = run_dir(root, args.command, cfg, seed)
            _prepare(out, args.force)
            cells.append((args.command, cfg, seed, out, plots, checkpoints))
    except Exception as exc:
        record = _classify(exc)
        sys.stderr.write(json.dumps(record) + "\n")
        return record["exit_code"]

    if slots > 1 and len(cells) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=min(slots, len(cells))) as pool:
            results = list(pool.map(_cell, cells))
    else:
        results = [_cell(c) for c in cells]

    code = EXIT_OK
    for (command, _, seed, out, _, _), (summary, record) in zip(cells, results):
        if record is not None:
            sys.stderr.write(json.dumps(record) + "\n")
            code = max(code, record["exit_code"])
        else:
            sys.stdout.write(json.dumps({"status": "ok", "command": command, "seed": seed,
                                         "out": str(out)}) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
