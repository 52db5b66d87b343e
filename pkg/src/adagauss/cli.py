"""``adagauss`` command line: run, ablate, diagnose."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import diagnostics as diag
from .classifier import recency_bias_probe
from .config import load_config
from .errors import AdaGaussError, InvalidConfig, MissingCheckpoint, RunFailure
from .memory import load_memory
from .networks import load_checkpoint
from .runner import run

log = logging.getLogger("adagauss")

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2
METRICS_HEADER = ("seed", "task", "phase", "metric", "value")
RUN_ARTIFACTS = ("metrics.csv", "report.json", "resolved_config.toml")
ABLATE_ARTIFACTS = ("ablation.csv", "ablation_runs.csv", "resolved_config.toml")


def fmt(value):
    """17 significant digits, so every float64 round-trips through text."""
    return f"{float(value):.17g}"


def _json_value(value):
    if isinstance(value, dict):
        return {str(k): _json_value(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_value(v) for v in value]
    if isinstance(value, (np.floating, float)):
        return float(value) if math.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    return value


def worker_count(jobs):
    raw = os.environ.get("ADAGAUSS_THREADS", "")
    try:
        cap = int(raw) if raw else (os.cpu_count() or 1)
    except ValueError:
        raise InvalidConfig(f"ADAGAUSS_THREADS must be an integer, got {raw!r}") from None
    if cap < 1:
        raise InvalidConfig("ADAGAUSS_THREADS must be >= 1")
    return max(1, min(cap, jobs))


def _execute(job):
    cfg, seed, overrides, oracle, checkpoint_dir = job
    stream = cfg.build_stream()
    report = run(stream, cfg.hp(seed), cfg.ablation_config(**overrides), oracle,
                 checkpoint_dir=checkpoint_dir)
    return report


def run_jobs(jobs):
    """Run jobs in order, or on a process pool capped by ``ADAGAUSS_THREADS``.

    Returns ``(report or None, error or None)`` per job in submission order.
    """
    workers = worker_count(len(jobs))
    results = []
    if workers == 1:
        for job in jobs:
            try:
                results.append((_execute(job), None))
            except RunFailure as exc:
                results.append((None, exc))
        return results
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_execute, job) for job in jobs]
        for fut in futures:
            try:
                results.append((fut.result(), None))
            except RunFailure as exc:
                results.append((None, exc))
    return results


def _prepare_out(out, artifacts, overwrite):
    out = Path(out)
    existing = [name for name in artifacts if (out / name).exists()]
    if existing and not overwrite:
        raise InvalidConfig(f"{out} already holds {existing}; pass --overwrite to replace them")
    out.mkdir(parents=True, exist_ok=True)
    if overwrite and (out / "checkpoints").exists():
        shutil.rmtree(out / "checkpoints")
    return out


def _default_out(config_path, cfg, suffix=""):
    if cfg.run["out"]:
        path = Path(cfg.run["out"])
        return path if path.is_absolute() else cfg.base_dir / path
    return Path("runs") / (Path(config_path).stem + suffix)


def write_metrics(path, reports):
    """``reports`` is a list of ``(seed, RunReport)``; rows sorted by seed, task, metric."""
    rows = []
    for seed, report in reports:
        for task, phase, metric, value in report.metrics:
            rows.append((seed, task, metric, phase, value))
    rows.sort(key=lambda r: r[:4])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for seed, task, metric, phase, value in rows:
            w.writerow((seed, task, phase, metric, fmt(value)))


def aggregate(reports):
    """Mean and sample standard deviation across seeds for every (task, phase, metric) key."""
    table = {}
    for _, report in reports:
        for task, phase, metric, value in report.metrics:
            table.setdefault(f"{phase}/{metric}@task{task:03d}", []).append(value)
    out = {}
    for key in sorted(table):
        values = np.asarray(table[key], dtype=float)
        std = float(np.std(values, ddof=1)) if values.size > 1 else None
        out[key] = {"mean": float(np.mean(values)), "std": std, "n": int(values.size)}
    return out


def write_report(path, reports):
    a_last = [r.a_last for _, r in reports]
    a_inc = [r.a_inc for _, r in reports]

    def stats(v):
        v = np.asarray(v, dtype=float)
        return {"mean": float(np.mean(v)), "std": float(np.std(v, ddof=1)) if v.size > 1 else None}

    payload = {
        "seeds": [seed for seed, _ in reports],
        "per_seed": {str(seed): r.to_dict() for seed, r in reports},
        "summary": {"a_last": stats(a_last), "a_inc": stats(a_inc)},
        "aggregate": aggregate(reports),
    }
    Path(path).write_text(json.dumps(_json_value(payload), indent=2, sort_keys=True, allow_nan=False) + "\n")


def cmd_run(args):
    cfg = load_config(args.config)
    out = _prepare_out(args.out or _default_out(args.config, cfg), RUN_ARTIFACTS, args.overwrite)
    oracle = bool(args.oracle_diagnostics or cfg.run["oracle_diagnostics"])
    jobs = []
    for seed in cfg.seeds:
        ckpt = out / "checkpoints" / f"seed_{seed}" if cfg.run["checkpoints"] else None
        jobs.append((cfg, seed, {}, oracle, ckpt))
    (out / "resolved_config.toml").write_text(cfg.dumps())
    results = run_jobs(jobs)
    failures = [(seed, err) for seed, (_, err) in zip(cfg.seeds, results) if err is not None]
    if failures:
        for seed, err in failures:
            print(f"error: seed {seed}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    reports = [(seed, rep) for seed, (rep, _) in zip(cfg.seeds, results)]
    write_metrics(out / "metrics.csv", reports)
    write_report(out / "report.json", reports)
    for seed, rep in reports:
        print(f"seed {seed}: a_last={rep.a_last:.4f} a_inc={rep.a_inc:.4f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_ablate(args):
    cfg = load_config(args.config)
    if not cfg.grid:
        raise InvalidConfig("ablate needs a [grid] section")
    out = _prepare_out(args.out or _default_out(args.config, cfg, "_ablation"), ABLATE_ARTIFACTS, args.overwrite)
    cells = cfg.grid_cells()
    jobs = []
    for cell in cells:
        overrides = {"classifier": cell.classifier, "adapt_mode": cell.adapt_mode,
                     "anticollapse": cell.anticollapse, "shrink": cell.shrink, "distillation": cell.distillation}
        for seed in cfg.seeds:
            jobs.append((cfg, seed, overrides, False, None))
    (out / "resolved_config.toml").write_text(cfg.dumps())
    results = iter(run_jobs(jobs))
    summary, per_run = [], []
    failed = False
    for index, cell in enumerate(cells):
        last, inc, errors = [], [], []
        for seed in cfg.seeds:
            rep, err = next(results)
            if err is None:
                last.append(rep.a_last)
                inc.append(rep.a_inc)
                per_run.append((index, cell.label, seed, fmt(rep.a_last), fmt(rep.a_inc), "ok"))
            else:
                errors.append(f"seed {seed}: {err}")
                per_run.append((index, cell.label, seed, "", "", f"failed: {err}"))
        failed = failed or bool(errors)

        def stat(v, fn):
            return fmt(fn(v)) if v else ""

        def sd(v):
            return float(np.std(v, ddof=1)) if len(v) > 1 else float("nan")

        summary.append((index, cell.classifier, cell.adapt_mode, "on" if cell.anticollapse else "off",
                        fmt(cell.shrink), cell.distillation, len(last),
                        stat(last, np.mean), stat(last, sd), stat(inc, np.mean), stat(inc, sd),
                        "; ".join(errors) if errors else "ok"))
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("cell", "classifier", "adapt_mode", "anticollapse", "shrink", "distillation", "runs",
                    "a_last_mean", "a_last_std", "a_inc_mean", "a_inc_std", "status"))
        w.writerows(summary)
    with open(out / "ablation_runs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("cell", "label", "seed", "a_last", "a_inc", "status"))
        w.writerows(per_run)
    for row in summary:
        scores = f"a_last={float(row[7]):.4f} a_inc={float(row[9]):.4f}" if row[7] else "no result"
        print(f"{row[0]:>2} {row[1]:<10} {row[2]:<9} ac={row[3]:<3} shrink={float(row[4]):g} {scores} {row[11]}")
    print(f"wrote {out}")
    return EXIT_RUNTIME if failed else EXIT_OK


def _tasks_in(seed_dir):
    tasks = sorted(int(p.stem[len("extractor_task"):]) for p in seed_dir.glob("extractor_task*.agnet"))
    if not tasks:
        raise MissingCheckpoint(f"no extractor checkpoints in {seed_dir}")
    return tasks


def diagnose_dir(run_dir):
    """Recompute diagnostic series from checkpoints; returns ``{filename: rows}`` with headers first."""
    run_dir = Path(run_dir)
    resolved = run_dir / "resolved_config.toml"
    if not resolved.is_file():
        raise MissingCheckpoint(f"{resolved} not found; was this directory written by 'adagauss run'?")
    cfg = load_config(resolved)
    ckpt_root = run_dir / "checkpoints"
    seed_dirs = sorted(ckpt_root.glob("seed_*"), key=lambda p: int(p.name[5:])) if ckpt_root.is_dir() else []
    if not seed_dirs:
        raise MissingCheckpoint(f"no checkpoints under {ckpt_root}")
    stream = cfg.build_stream()
    activation = cfg.hyperparams["activation"]
    shrink = cfg.ablation["shrink"]
    files = {
        "representation_strength.csv": [("seed", "task", "strength")],
        "cov_rank.csv": [("seed", "task", "origin_task", "mean_rank", "mean_inverse_norm")],
        "eigenvalues.csv": [("seed", "task", "class", "index", "eigenvalue")],
        "fidelity.csv": [("seed", "task", "origin_task", "mean_l2", "cov_l2", "sym_kl")],
        "class_shift.csv": [("seed", "task", "class", "origin_task", "shift")],
        "recency.csv": [("seed", "task", "origin_task", "mahalanobis_sq")],
    }
    for seed_dir in seed_dirs:
        seed = int(seed_dir.name[5:])
        for t in _tasks_in(seed_dir):
            extractor = load_checkpoint(seed_dir / f"extractor_task{t:03d}.agnet", activation)
            memory = load_memory(seed_dir / f"memory_task{t:03d}.agmem")
            before = load_memory(seed_dir / f"memory_task{t:03d}_pre.agmem")
            seen = stream.tasks[:t]
            x_eval = np.concatenate([task.test_x for task in seen])
            if x_eval.shape[0] > extractor.output_dim:
                files["representation_strength.csv"].append(
                    (seed, t, diag.representation_strength(extractor, x_eval)))
            for origin, (rank, inv) in diag.cov_rank_and_inverse_norm(memory, shrink).items():
                files["cov_rank.csv"].append((seed, t, origin, fmt(rank), fmt(inv)))
            for c, ev in sorted(diag.covariance_spectra(memory).items()):
                for k, value in enumerate(ev):
                    files["eigenvalues.csv"].append((seed, t, c, k, fmt(value)))
            reference, features = {}, {}
            for task in seen:
                for c in task.classes:
                    rows = task.test_x[task.test_y == c]
                    if rows.shape[0]:
                        reference[c] = rows
                        features[c] = extractor.predict(rows)
            old_reference = {c: v for c, v in reference.items() if memory[c].task_id < t}
            if old_reference:
                for origin, row in diag.memory_fidelity(memory, extractor, old_reference).items():
                    files["fidelity.csv"].append(
                        (seed, t, origin, fmt(row["mean_l2"]), fmt(row["cov_l2"]), fmt(row["sym_kl"])))
            for c, value in diag.class_shift(before, memory).items():
                files["class_shift.csv"].append((seed, t, c, memory[c].task_id, fmt(value)))
            try:
                probe = recency_bias_probe(memory, features)
            except AdaGaussError:
                probe = {}
            for origin, row in probe.items():
                files["recency.csv"].append((seed, t, origin, fmt(row["mahalanobis_sq"])))
    return files


def cmd_diagnose(args):
    files = diagnose_dir(args.dir)
    out = Path(args.dir) / "diagnostics"
    out.mkdir(exist_ok=True)
    for name, rows in files.items():
        with open(out / name, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(rows)
    print(f"wrote {len(files)} files to {out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="adagauss", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run one configuration for every seed")
    p.add_argument("config")
    p.add_argument("--out", help="artifact directory (default: [run].out or runs/<config name>)")
    p.add_argument("--overwrite", action="store_true", help="replace existing artifacts")
    p.add_argument("--oracle-diagnostics", action="store_true",
                   help="also compare memorized Gaussians against held-out data after each task")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("ablate", help="run every cell of the [grid] section")
    p.add_argument("config")
    p.add_argument("--out")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_ablate)
    p = sub.add_parser("diagnose", help="recompute diagnostic series from a run directory")
    p.add_argument("dir")
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InvalidConfig as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except RunFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except MissingCheckpoint as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except AdaGaussError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
