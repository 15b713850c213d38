"""Command-line entry point: ``stochhf {train,gradcheck,compare}``."""

from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

from .config import ConfigError, dump_config, load_config
from .gradcheck import TOLERANCE, run_gradcheck
from .modelio import save_model
from .training import METRIC_COLUMNS, metrics_csv, run


def _overrides(args):
    return {"run.seed": args.seed} if args.seed is not None else None


def cmd_train(args):
    try:
        cfg = load_config(args.config, _overrides(args))
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
    resolved = dump_config(cfg)
    print(resolved, end="")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.ini").write_text(resolved)
    log = None if args.quiet else (lambda line: print(line, file=sys.stderr, flush=True))
    try:
        net, rows = run(cfg, reproducible=args.reproducible, log=log)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
    (out / "metrics.csv").write_text(metrics_csv(rows))
    save_model(out / "model.bin", net)
    return 0


def cmd_gradcheck(args):
    sizes = tuple(int(s) for s in args.sizes.split(","))
    results = run_gradcheck(args.seed, sizes, corrupt=args.corrupt_backprop)
    worst = 0.0
    for hidden, kind, rep in results:
        print(f"[{hidden} / {kind}]")
        for line in rep.lines():
            print("  " + line)
        worst = max(worst, rep.gradient, rep.rop, rep.gnvp)
    ok = worst < TOLERANCE
    print(f"max relative error {worst:.3e} (tolerance {TOLERANCE:.0e}): {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def compare_runs(config_dir, seed=None, reproducible=False, log=None):
    """Run every ``*.ini`` in ``config_dir`` (sorted) and return long-format
    CSV text with columns run_name, epoch, metric, value."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run_name", "epoch", "metric", "value"])
    failures = []
    for path in sorted(Path(config_dir).glob("*.ini")):
        name = path.stem
        try:
            cfg = load_config(path, {"run.seed": seed} if seed is not None else None)
            _, rows = run(cfg, reproducible=reproducible, log=log)
        except Exception as exc:  # one bad run must not stop the others
            failures.append((name, f"{type(exc).__name__}: {exc}"))
            w.writerow([name, "", "failed", f"{type(exc).__name__}: {exc}".replace("\n", " ")])
            continue
        for row in rows:
            for col in METRIC_COLUMNS[1:]:
                if row.get(col) is not None:
                    w.writerow([name, row["epoch"], col, repr(row[col]) if isinstance(row[col], float) else row[col]])
    return buf.getvalue(), failures


def cmd_compare(args):
    log = None if args.quiet else (lambda line: print(line, file=sys.stderr, flush=True))
    text, failures = compare_runs(args.config, args.seed, args.reproducible, log)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "compare.csv").write_text(text)
    else:
        print(text, end="")
    for name, msg in failures:
        print(f"run {name} failed: {msg}", file=sys.stderr)
    return 1 if failures else 0


def build_parser():
    p = argparse.ArgumentParser(prog="stochhf", description="Stochastic Hessian-free training")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config", required=True, help="config file")
    t.add_argument("--seed", type=int, help="override run.seed")
    t.add_argument("--out", default="out", help="output directory")
    t.add_argument("--reproducible", action="store_true",
                   help="single-threaded reductions and zeroed wall-clock column")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("gradcheck", help="finite-difference checks of the derivative code")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--sizes", default="5,4,3", help="comma-separated layer sizes")
    g.add_argument("--corrupt-backprop", action="store_true", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    c = sub.add_parser("compare", help="run every config in a directory")
    c.add_argument("--config", required=True, help="directory of *.ini configs")
    c.add_argument("--seed", type=int, help="override run.seed for every run")
    c.add_argument("--out", help="output directory (default: CSV on stdout)")
    c.add_argument("--reproducible", action="store_true")
    c.add_argument("--quiet", action="store_true")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
