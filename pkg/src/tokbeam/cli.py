"""Command-line experiment driver.

Exit codes: 0 success, 2 usage error, 3 data or checkpoint error,
4 feasibility violation, 5 solver non-convergence under ``--strict``.

Environment overrides: ``TOKBEAM_OUTPUT_DIR`` (default output root) and
``TOKBEAM_THREADS`` (default thread count).
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

from .channel import TaskSpec, Utility, generate_rayleigh, inject_csi_error
from .datafile import DatasetManifest, read_dataset, read_splits, write_dataset
from .errors import CheckpointError, ConfigurationError, DatasetError, TokbeamError
from .solvers import SolverConfig, label_samples, mrt, zf
from .training import (Checkpoint, TrainConfig, evaluate, evaluate_beamformers, finetune,
                       pretrain)

log = logging.getLogger("tokbeam")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INFEASIBLE, EXIT_NONCONVERGED = 0, 2, 3, 4, 5
SWEEP_COLUMNS = ("axis", "value", "utility", "ratio_pct", "n", "seed")
SWEEP_AXES = ("users", "power", "csi-error")


class UsageError(TokbeamError):
    pass


class Infeasible(TokbeamError):
    pass


class NotConverged(TokbeamError):
    pass


# ------------------------------------------------------------------ config

def load_config(path):
    """INI file -> ConfigParser; missing path gives an empty config."""
    cp = configparser.ConfigParser()
    if path:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file {path} does not exist")
        cp.read_string(p.read_text(encoding="utf-8"))
    return cp


def _section(cp, name):
    return dict(cp[name]) if cp.has_section(name) else {}


def _coerce(value, like):
    if isinstance(like, bool):
        return str(value).strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def train_config(cp, args, **over) -> TrainConfig:
    base = asdict(TrainConfig())
    for k, v in _section(cp, "train").items():
        if k not in base:
            raise UsageError(f"unknown [train] key {k!r}")
        base[k] = _coerce(v, base[k])
    base.update({k: v for k, v in over.items() if v is not None})
    base["seed"] = args.seed
    base["deterministic"] = args.deterministic
    base["threads"] = args.threads
    return TrainConfig(**base)


def model_config(cp):
    out = {}
    for k, v in _section(cp, "model").items():
        if k == "kind":
            continue
        if k in ("tasks",):
            out[k] = [t.strip() for t in v.split(",")]
        elif k in ("literal_gpa", "use_positional", "use_task_embedding", "aeb_residual"):
            out[k] = _coerce(v, True)
        else:
            out[k] = int(v)
    return out


def _echo_config(cp, out_dir, argv):
    out_dir.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    cp.write(buf)
    (out_dir / "config.ini").write_text(buf.getvalue(), encoding="utf-8")
    (out_dir / "command.txt").write_text(" ".join(argv) + "\n", encoding="utf-8")


def _out_dir(args):
    if args.out:
        return Path(args.out)
    root = os.environ.get("TOKBEAM_OUTPUT_DIR")
    if not root:
        raise UsageError("--out is required (or set TOKBEAM_OUTPUT_DIR)")
    return Path(root) / args.command


def _utilities(text):
    try:
        return [Utility(u.strip().upper()) for u in text.split(",") if u.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ------------------------------------------------------------------ commands

def cmd_gen_data(args, cp):
    d = _section(cp, "data")
    pick = lambda flag, key, default: flag if flag is not None else int(d.get(key, default))
    k = pick(args.users, "k_users", 3)
    n = pick(args.antennas, "n_antennas", 4)
    count = pick(args.count, "count", 1000)
    p_max = args.p_max if args.p_max is not None else float(d.get("p_max", 1.0))
    noise = args.noise if args.noise is not None else float(d.get("noise_power", 0.1))
    tasks = _utilities(args.tasks or d.get("tasks", "SR"))
    error_db = args.csi_error_db if args.csi_error_db is not None else (
        float(d["csi_error_db"]) if "csi_error_db" in d else None)
    if min(k, n, count) < 1:
        raise UsageError("--users, --antennas and --count must be >= 1")
    specs = [TaskSpec(u, k, n, p_max) for u in tasks]
    samples = generate_rayleigh(args.seed, specs[0], count, noise_power=noise,
                                threads=1 if args.deterministic else args.threads)
    if error_db is not None:
        samples = [inject_csi_error(s, error_db, args.seed) for s in samples]
    out = _out_dir(args)
    manifest = DatasetManifest.for_samples(samples, args.seed, specs, error_level_db=error_db)
    write_dataset(samples, manifest, out)
    _echo_config(cp, out, args.argv)
    print(f"wrote {count} samples ({k}x{n}, P={p_max}) to {out}")


def cmd_solve_labels(args, cp):
    samples, manifest = read_dataset(args.data)
    utils = _utilities(args.utility) if args.utility else _manifest_utilities(manifest)
    s = _section(cp, "solver")
    cfg = SolverConfig(**{k: _coerce(v, getattr(SolverConfig(), k)) for k, v in s.items()})
    stats = label_samples(samples, utils, cfg, threads=1 if args.deterministic else args.threads,
                          force=args.force)
    write_dataset(samples, manifest, args.data)
    print(f"solved {stats.solved} labels ({len(stats.unconverged)} hit the iteration cap)")
    if stats.unconverged and args.strict:
        raise NotConverged(f"{len(stats.unconverged)} labels did not converge")


def _manifest_utilities(manifest):
    utils = [t.utility for t in manifest.tasks()]
    if not utils:
        raise UsageError("dataset manifest lists no tasks; pass --utility")
    return utils


def _task_sets(splits, utilities, split):
    return {u: splits[split] for u in utilities}


def _write_run(ck: Checkpoint, out: Path):
    path = ck.save(out)
    (out / "history.json").write_text(json.dumps(ck.history, indent=1, sort_keys=True),
                                      encoding="utf-8")
    print(f"best epoch {ck.epoch}; checkpoint {path}")
    return path


def cmd_pretrain(args, cp):
    splits, manifest = read_splits(args.data)
    kind = args.model or _section(cp, "model").get("kind", "bert")
    utils = _utilities(args.utility) if args.utility else _manifest_utilities(manifest)
    cfg = train_config(cp, args, epochs=args.epochs, lr=args.lr)
    out = _out_dir(args)
    _echo_config(cp, out, args.argv)
    ck = pretrain(kind, _task_sets(splits, utils, "train"), _task_sets(splits, utils, "val"), cfg,
                  model_config(cp), objective=args.objective, log_path=out / "train_log.jsonl")
    _write_run(ck, out)


def cmd_finetune(args, cp):
    ck = Checkpoint.load(args.checkpoint)
    splits, manifest = read_splits(args.data)
    utils = _utilities(args.utility) if args.utility else _manifest_utilities(manifest)
    cfg = train_config(cp, args, epochs=args.epochs if args.epochs is not None else 10,
                       lr=args.lr if args.lr is not None else 2e-5)
    out = _out_dir(args)
    _echo_config(cp, out, args.argv)
    new = finetune(ck, _task_sets(splits, utils, "train"), _task_sets(splits, utils, "val"), cfg,
                   mode=args.mode, reinit_io=args.reinit_io, objective=args.objective,
                   log_path=out / "train_log.jsonl")
    _write_run(new, out)


def _baseline_beams(name, samples, utility):
    if name == "mrt":
        return [mrt(s) for s in samples]
    if name == "zf":
        return [zf(s) for s in samples]
    if name == "label":
        if not all(utility.value in s.labels for s in samples):
            raise DatasetError(f"dataset has no {utility.value} labels")
        return [s.labels[utility.value] for s in samples]
    raise UsageError(f"unknown baseline {name!r}")


def cmd_evaluate(args, cp):
    samples, manifest = read_dataset(args.data)
    if args.split != "all":
        c = manifest.counts
        lo = {"train": 0, "val": c["train"], "test": c["train"] + c["val"]}[args.split]
        samples = samples[lo:lo + c[args.split]]
    if not samples:
        raise UsageError(f"split {args.split!r} is empty")
    utility = _utilities(args.utility)[0]
    circuit = float(_section(cp, "train").get("circuit_power", 0.5))
    if args.checkpoint:
        rep = evaluate(Checkpoint.load(args.checkpoint).build(), samples, utility, circuit)
    elif args.baseline:
        rep = evaluate_beamformers(samples, _baseline_beams(args.baseline, samples, utility),
                                   utility, circuit)
    else:
        raise UsageError("give --checkpoint or --baseline")
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "per_sample.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["id", "utility", "model", "oracle"])
        for i, sid in enumerate(rep.ids):
            w.writerow([sid, rep.utility, repr(float(rep.model_utility[i])),
                        "" if rep.oracle_utility is None else repr(float(rep.oracle_utility[i]))])
    summary = {"utility": rep.utility, "n": len(rep.ids), "mean": float(rep.model_utility.mean()),
               "ratio_pct": rep.ratio, "max_violation": rep.max_violation}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n",
                                      encoding="utf-8")
    ratio = "n/a" if rep.ratio is None else f"{rep.ratio:.2f}%"
    print(f"{rep.utility}: n={len(rep.ids)} mean={summary['mean']:.4f} ratio={ratio}")
    if not rep.feasible:
        raise Infeasible(f"power budget exceeded by {rep.max_violation:.3e}")


def sweep_rows(ck: Checkpoint, axis, values, utility, count, seed, noise=0.1, threads=1,
               circuit_power=0.5, solver=SolverConfig()):
    """One row per axis value: fresh seeded test set, oracle labels, model ratio."""
    if axis not in SWEEP_AXES:
        raise UsageError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    model = ck.build()
    k0, n0 = ck.dims
    rows = []
    for v in values:
        k, p, err = k0, 1.0, None
        if axis == "users":
            k = int(v)
        elif axis == "power":
            p = float(v)
        else:
            err = float(v)
        truth = generate_rayleigh(seed, TaskSpec(utility, k, n0, p), count, noise_power=noise)
        label_samples(truth, [utility], solver, threads=threads)
        seen = truth if err is None else [inject_csi_error(s, err, seed) for s in truth]
        rep = evaluate(model, seen, utility, circuit_power, truth=truth)
        rows.append({"axis": axis, "value": v, "utility": utility.value,
                     "ratio_pct": round(rep.ratio, 6), "n": count, "seed": seed})
    return rows


def cmd_sweep(args, cp):
    ck = Checkpoint.load(args.checkpoint)
    if args.axis not in SWEEP_AXES:
        raise UsageError(f"unknown sweep axis {args.axis!r}; choose from {SWEEP_AXES}")
    try:
        values = [float(v) for v in args.values.split(",")]
    except ValueError:
        raise UsageError(f"bad --values {args.values!r}") from None
    values = [int(v) if v.is_integer() and args.axis == "users" else v for v in values]
    utility = _utilities(args.utility)[0] if args.utility else Utility(
        ck.task if ck.task != "multi" else "SR")
    rows = sweep_rows(ck, args.axis, values, utility, args.count, args.seed,
                      threads=1 if args.deterministic else args.threads)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"sweep-{args.axis}-{utility.value}.csv"
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"{r['axis']}={r['value']}: {r['ratio_pct']:.2f}%")
    print(f"wrote {path}")


def export_bundle(run_dir, out_dir):
    """Collect training curves, sweep tables and ablation JSON into plot-ready files."""
    run_dir, out_dir = Path(run_dir), Path(out_dir)
    if not run_dir.is_dir():
        raise UsageError(f"run directory {run_dir} does not exist")
    out_dir.mkdir(parents=True, exist_ok=True)
    curves = []
    for log_file in sorted(run_dir.rglob("train_log.jsonl")):
        run = str(log_file.parent.relative_to(run_dir)) or "."
        for line in log_file.read_text(encoding="utf-8").splitlines():
            rec = json.loads(line)
            ratios = rec.get("utility_ratio") or {"": None}
            for task, r in sorted(ratios.items()):
                curves.append([run, rec["epoch"], rec["split"], repr(rec["loss"]), task,
                               "" if r is None else repr(r)])
    with open(out_dir / "curves.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["run", "epoch", "split", "loss", "task", "ratio_pct"])
        w.writerows(curves)
    sweeps = []
    for path in sorted(run_dir.rglob("sweep-*.csv")):
        with open(path, newline="", encoding="utf-8") as f:
            for row in csv.DictReader(f):
                sweeps.append([str(path.parent.relative_to(run_dir)) or "."] +
                              [row[c] for c in SWEEP_COLUMNS])
    with open(out_dir / "sweeps.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["run", *SWEEP_COLUMNS])
        w.writerows(sweeps)
    ablations = {}
    for path in sorted(run_dir.rglob("summary.json")):
        ablations[str(path.parent.relative_to(run_dir)) or "."] = json.loads(
            path.read_text(encoding="utf-8"))
    (out_dir / "summaries.json").write_text(json.dumps(ablations, indent=1, sort_keys=True) + "\n",
                                            encoding="utf-8")
    index = {"curves.csv": len(curves), "sweeps.csv": len(sweeps),
             "summaries.json": len(ablations)}
    (out_dir / "bundle.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n",
                                         encoding="utf-8")
    return index


def cmd_export_plots(args, cp):
    index = export_bundle(args.run, _out_dir(args))
    print(", ".join(f"{k}: {v} rows" for k, v in index.items()))


# ------------------------------------------------------------------ parser

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (echoed into the output directory)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded, bit-reproducible execution")
    common.add_argument("--threads", type=int,
                        default=int(os.environ.get("TOKBEAM_THREADS", "1")))
    common.add_argument("--strict", action="store_true",
                        help="treat solver non-convergence as an error (exit 5)")
    common.add_argument("--out", help="output directory (default $TOKBEAM_OUTPUT_DIR/<command>)")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="tokbeam", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a Rayleigh dataset")
    p.add_argument("--users", type=int)
    p.add_argument("--antennas", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--p-max", type=float)
    p.add_argument("--noise", type=float, help="per-user noise power")
    p.add_argument("--tasks", help="comma-separated utilities, e.g. EE,SR,MR")
    p.add_argument("--csi-error-db", type=float)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("solve-labels", parents=[common], help="attach oracle labels")
    p.add_argument("--data", required=True)
    p.add_argument("--utility", help="comma-separated utilities (default: manifest tasks)")
    p.add_argument("--force", action="store_true", help="re-solve labels that are current")
    p.set_defaults(func=cmd_solve_labels)

    for name, func in (("pretrain", cmd_pretrain), ("finetune", cmd_finetune)):
        p = sub.add_parser(name, parents=[common], help=f"{name} a model")
        p.add_argument("--data", required=True)
        p.add_argument("--utility", help="comma-separated tasks (default: manifest tasks)")
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--objective", choices=("pretrain", "unsupervised", "trace", "sumloss"))
        if name == "pretrain":
            p.add_argument("--model", choices=("bert", "ubert"))
        else:
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--mode", choices=("full", "frozen_teb"), default="full")
            p.add_argument("--reinit-io", action="store_true",
                           help="re-initialise BERT embedding/output for a new N_T")
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", parents=[common], help="performance ratio on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--utility", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", choices=("mrt", "zf", "label"))
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", parents=[common], help="generalisation / robustness sweep")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--axis", required=True)
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--utility")
    p.add_argument("--count", type=int, default=200)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-plots", parents=[common], help="plot-ready CSV/JSON bundle")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_export_plots)
    return ap


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    args.argv = ["tokbeam", *argv]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.deterministic:
        args.threads = 1
    try:
        cp = load_config(args.config)
        args.func(args, cp)
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Infeasible as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except NotConverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
