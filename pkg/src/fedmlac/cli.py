"""Command-line entry point.

Subcommands::

    fedmlac run --config configs/smoke.cfg --out runs/smoke [--override KEY=VALUE ...] [--quiet]
    fedmlac partition DATA.csv --strategy dirichlet --alpha 0.1 --clients 10 --seed 0 --out DIR
    fedmlac compare clean/metrics.csv noisy/metrics.csv
    fedmlac synth --out DIR [--classes 4 --dim 8 --per-class 150 --spread 0.5 --groups G --seed 0]

Exit codes: 0 success, 1 runtime failure, 2 invalid config or input.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ConfigError, RunManifest, data_descriptor, load_config, tool_version
from .data import (
    DataError,
    Dataset,
    dirichlet_partition,
    group_partition,
    iid_partition,
    label_entropy,
    load_feature_csv,
    synth_gaussian_mixture,
    write_feature_csv,
)
from .orchestrator import METRICS_COLUMNS, RoundError, run_simulation

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

METRICS_FILE = "metrics.csv"
AUDIT_FILE = "audit.jsonl"
MANIFEST_FILE = "manifest.json"
PLAN_FILE = "partition.json"
SYNTH_FILE = "synthetic.csv"


def _err(msg: str) -> None:
    print(f"fedmlac: {msg}", file=sys.stderr)


def _config_failure(exc: ConfigError) -> int:
    _err("invalid configuration")
    for line in exc.lines():
        print(f"  {line}", file=sys.stderr)
    return EXIT_CONFIG


# --- run ---------------------------------------------------------------------


def cmd_run(args: argparse.Namespace) -> int:
    try:
        cfg = load_config(args.config, args.override, os.environ)
    except ConfigError as exc:
        return _config_failure(exc)

    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        descriptor = data_descriptor(cfg)
    except OSError as exc:
        _err(f"cannot prepare output directory {out}: {exc}")
        return EXIT_RUNTIME

    every = max(1, cfg.rounds // 20)

    def progress(rec):
        if not args.quiet and (rec.round % every == 0 or rec.round == cfg.rounds - 1):
            print(
                f"round {rec.round:>5}  acc {rec.test_acc:.4f}  f1 {rec.macro_f1:.4f}  "
                f"loss {rec.mean_train_loss:.4f}  trusted {min(rec.trusted_sizes)}-{max(rec.trusted_sizes)}"
            )

    try:
        result = run_simulation(
            cfg, out / METRICS_FILE, out / AUDIT_FILE, progress=progress
        )
    except (ConfigError, DataError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except RoundError as exc:
        _err(f"run failed at {exc}")
        return EXIT_RUNTIME
    except ValueError as exc:
        # raised while building the federation, before any round ran
        _err(f"invalid setup: {exc}")
        return EXIT_CONFIG
    except OSError as exc:
        _err(str(exc))
        return EXIT_RUNTIME

    manifest = RunManifest(
        cfg,
        descriptor,
        {"metrics": METRICS_FILE, "audit": AUDIT_FILE, "manifest": MANIFEST_FILE},
        tool_version(),
    )
    (out / MANIFEST_FILE).write_text(manifest.render())
    if not args.quiet:
        s = result.summary
        print(f"final test_acc {s['final_test_acc']:.4f}  macro_f1 {s['final_macro_f1']:.4f}")
        if s["final_personal_acc"] is not None:
            print(f"final personalized acc {s['final_personal_acc']:.4f}")
        if "grad_rate_slope" in s:
            print(f"grad-norm rate slope {s['grad_rate_slope']:.3f}")
        print(f"wrote {out / METRICS_FILE}, {out / AUDIT_FILE}, {out / MANIFEST_FILE}")
    return EXIT_OK


# --- partition ---------------------------------------------------------------


def histogram_table(ds: Dataset, client_indices: Sequence[Sequence[int]]) -> str:
    c = ds.num_classes
    head = ["client", "n"] + [f"c{j}" for j in range(c)] + ["entropy"]
    rows = [head]
    for k, idx in enumerate(client_indices):
        labels = ds.y[np.asarray(idx, dtype=int)]
        counts = np.bincount(labels, minlength=c)
        rows.append(
            [str(k), str(len(idx))] + [str(int(n)) for n in counts] + [f"{label_entropy(labels, c):.3f}"]
        )
    widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
    return "\n".join("  ".join(cell.rjust(w) for cell, w in zip(r, widths)) for r in rows)


def cmd_partition(args: argparse.Namespace) -> int:
    try:
        ds = load_feature_csv(args.data)
    except DataError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except OSError as exc:
        _err(f"cannot read {args.data}: {exc.strerror}")
        return EXIT_CONFIG

    try:
        if args.strategy == "dirichlet":
            if args.alpha is None or args.alpha <= 0:
                raise ValueError("dirichlet strategy needs --alpha > 0")
            plan = dirichlet_partition(ds, args.clients, args.alpha, args.seed)
        elif args.strategy == "iid":
            plan = iid_partition(ds, args.clients, args.seed)
        else:
            plan = group_partition(ds)
    except (ValueError, DataError) as exc:
        _err(str(exc))
        return EXIT_CONFIG

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / PLAN_FILE).write_text(plan.to_json())
    print(histogram_table(ds, plan.client_indices))
    if not args.quiet:
        print(f"wrote {out / PLAN_FILE}")
    return EXIT_OK


# --- compare -----------------------------------------------------------------


def _final_row(path: str) -> dict[str, str]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in METRICS_COLUMNS if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
        extra = [c for c in header if c not in METRICS_COLUMNS]
        if extra:
            raise DataError(f"{path}: unexpected column(s) {', '.join(extra)}")
        last = None
        for last in reader:
            pass
    if last is None:
        raise DataError(f"{path}: no metric rows")
    return last


def cmd_compare(args: argparse.Namespace) -> int:
    if len(args.metrics) < 2:
        _err("compare needs at least two metrics files")
        return EXIT_CONFIG
    try:
        finals = [_final_row(p) for p in args.metrics]
        accs = [float(r["test_acc"]) for r in finals]
        f1s = [float(r["macro_f1"]) for r in finals]
    except DataError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except ValueError as exc:
        _err(f"malformed metric value: {exc}")
        return EXIT_CONFIG
    except OSError as exc:
        _err(f"cannot read metrics: {exc}")
        return EXIT_CONFIG

    head = ["run", "algorithm", "seed", "rounds", "test_acc", "macro_f1", "acc_drop", "f1_drop"]
    rows = [head]
    for path, r, a, f in zip(args.metrics, finals, accs, f1s):
        rows.append(
            [
                path,
                r["algorithm"],
                r["seed"],
                str(int(r["round"]) + 1),
                f"{a:.10f}",
                f"{f:.10f}",
                f"{accs[0] - a:.10f}",
                f"{f1s[0] - f:.10f}",
            ]
        )
    widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
    for r in rows:
        print("  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(r, widths))))
    return EXIT_OK


# --- synth -------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    try:
        ds = synth_gaussian_mixture(args.classes, args.dim, args.per_class, args.spread, args.seed, args.groups)
    except ValueError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_feature_csv(ds, out / SYNTH_FILE)
    if not args.quiet:
        print(f"wrote {len(ds)} samples to {out / SYNTH_FILE}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedmlac", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one federated simulation")
    run.add_argument("--config", help="config file or a manifest.json from an earlier run")
    run.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                     help="set one field, e.g. master_seed=7 or local.lr=0.05 (repeatable)")
    run.add_argument("--out", default="runs/latest", help="output directory")
    run.add_argument("--quiet", action="store_true")
    run.set_defaults(func=cmd_run)

    part = sub.add_parser("partition", help="partition a feature CSV across clients")
    part.add_argument("data", help="feature CSV with a label column")
    part.add_argument("--strategy", choices=("dirichlet", "iid", "group"), default="dirichlet")
    part.add_argument("--alpha", type=float, default=None, help="Dirichlet concentration")
    part.add_argument("--clients", type=int, default=10)
    part.add_argument("--seed", type=int, default=0)
    part.add_argument("--out", default="runs/partition", help="output directory")
    part.add_argument("--quiet", action="store_true")
    part.set_defaults(func=cmd_partition)

    cmp_ = sub.add_parser("compare", help="final-round table and drop versus the first run")
    cmp_.add_argument("metrics", nargs="+", help="metrics CSVs; the first is the reference")
    cmp_.set_defaults(func=cmd_compare)

    syn = sub.add_parser("synth", help="write a synthetic Gaussian-mixture feature CSV")
    syn.add_argument("--classes", type=int, default=4)
    syn.add_argument("--dim", type=int, default=8)
    syn.add_argument("--per-class", type=int, default=150)
    syn.add_argument("--spread", type=float, default=0.5)
    syn.add_argument("--groups", type=int, default=None)
    syn.add_argument("--seed", type=int, default=0)
    syn.add_argument("--out", default="runs/data", help="output directory")
    syn.add_argument("--quiet", action="store_true")
    syn.set_defaults(func=cmd_synth)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
