"""Command line entry point: ``dpfl generate | train | eval | compare``.

Exit codes: 0 success, 2 some methods failed, 1 aborted.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import acpf, harness
from .dataset import assemble_xy, read_dataset, write_dataset
from .errors import DPFLError
from .grid import load_case
from .models import save_model, load_model

OUT_ENV = "DPFL_OUT"


def _default_out() -> str:
    return os.environ.get(OUT_ENV, "dpfl-out")


def cmd_generate(args) -> int:
    case = load_case(args.case)
    spec = acpf.FluctuationSpec(relative_range=args.fluct, seed=args.seed, vset_range=args.vset)
    states = acpf.sample_operating_points(case, spec, args.n)
    ds = assemble_xy(states, harness.SCHEMAS[args.schema](case))
    path = write_dataset(ds, Path(args.out) / "data")
    print(path)
    return 0


def cmd_train(args) -> int:
    cfg = harness.load_config(args.config)
    out = Path(args.out or cfg.output_dir)
    result = harness.run_experiment(cfg, keep_models=True)
    model_dir = out / "models"
    model_dir.mkdir(parents=True, exist_ok=True)
    for (method, key), model in sorted(result.models.items(), key=lambda kv: kv[0]):
        if not hasattr(model, "to_dict"):
            print(f"{method}: refits per query, nothing to save", file=sys.stderr)
            continue
        path = model_dir / harness.model_filename(method, json.loads(key))
        save_model(model, path)
        print(path)
    for f in result.failures:
        print(f"FAILED {f.method} {f.params}: [{f.kind}] {f.message}", file=sys.stderr)
    return result.exit_code


def cmd_eval(args) -> int:
    model = load_model(args.model)
    ds = read_dataset(args.data)
    report = harness.evaluate(model, ds)
    print(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    return 0


def cmd_compare(args) -> int:
    cfg = harness.load_config(args.config)
    out = Path(args.out or cfg.output_dir)
    result = harness.run_experiment(cfg)
    if not result.reports:
        for f in result.failures:
            print(f"FAILED {f.method} {f.params}: [{f.kind}] {f.message}", file=sys.stderr)
        return 1
    for fmt in ("csv", "json"):
        for p in harness.emit_report(result.reports, out, fmt, failures=result.failures):
            print(p)
    for f in result.failures:
        print(f"FAILED {f.method} {f.params}: [{f.kind}] {f.message}", file=sys.stderr)
    return result.exit_code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpfl", description="Data-driven power flow linearization experiments")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="sample operating points and write a dataset")
    g.add_argument("--case", required=True, help="MATPOWER file or bundled case name")
    g.add_argument("--out", default=_default_out())
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--fluct", type=float, default=0.2, help="relative load fluctuation range")
    g.add_argument("--vset", type=float, default=0.0, help="relative generator voltage set point range")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--schema", default="standard", choices=sorted(harness.SCHEMAS))
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train the configured methods and save the models")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default=os.environ.get(OUT_ENV))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a saved model on a dataset")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True, help="dataset CSV written by generate")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="run the full sweep and write CSV/JSON reports")
    c.add_argument("--config", required=True)
    c.add_argument("--out", default=os.environ.get(OUT_ENV))
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DPFLError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
