"""Command line entry point.

    fedmate run --config run.cfg [--seed N] [--method fedmate|fedavg_ft|local_only] [--out DIR]
    fedmate compare --configs a.cfg b.cfg ...
    fedmate selftest
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import METHODS, load_config
from .errors import FedMateError
from .simulation import comm_ledger_totals, run_simulation
from .nn import param_count


def _summary(result) -> dict:
    final = result.final
    full = param_count(result.models[0]) if result.models else 0
    totals = comm_ledger_totals(result.ledger, full)
    out = {
        "method": result.config.method,
        "seed": result.config.seed,
        "rounds": result.config.rounds,
        "balanced_acc": final["mean_balanced_acc"],
        "matched_acc": final["mean_matched_acc"],
        "system_loss": final["system_loss"],
        "upload_params": totals["up_total"],
        "download_params": totals["down_total"],
    }
    if result.pre_finetune is not None:
        out["pre_ft_balanced_acc"] = result.pre_finetune["mean_balanced_acc"]
        out["pre_ft_matched_acc"] = result.pre_finetune["mean_matched_acc"]
    return out


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.method is not None:
        changes["method"] = args.method
    if args.out is not None:
        changes["out_dir"] = args.out
    cfg = cfg.replace(**changes)
    result = run_simulation(cfg)
    for k, v in _summary(result).items():
        print(f"{k:>20}: {v}")
    if cfg.out_dir:
        print(f"{'outputs':>20}: {cfg.out_dir}")
    return 0


def cmd_compare(args) -> int:
    rows = []
    for path in args.configs:
        cfg = load_config(path)
        rows.append((Path(path).name, _summary(run_simulation(cfg))))
    cols = ["method", "seed", "balanced_acc", "matched_acc", "system_loss", "upload_params"]
    print(f"{'config':<24}" + "".join(f"{c:>16}" for c in cols))
    for name, s in rows:
        cells = []
        for c in cols:
            v = s[c]
            cells.append(f"{v:>16.4f}" if isinstance(v, float) else f"{v!s:>16}")
        print(f"{name:<24}" + "".join(cells))
    return 0


def cmd_selftest(args) -> int:
    import pytest

    root = Path(__file__).resolve().parents[2] / "tests"
    if not root.is_dir():
        print(f"test suite not found at {root}", file=sys.stderr)
        return 2
    extra = [] if args.full else ["-m", "not slow"]
    return int(pytest.main([str(root), "-q", *extra]))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedmate")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one simulation")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--method", choices=METHODS)
    r.add_argument("--out")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="run several configs and print a summary table")
    c.add_argument("--configs", nargs="+", required=True)
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("selftest", help="run the oracle and property test suites")
    s.add_argument("--full", action="store_true", help="include the slow experiment tests")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FedMateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
