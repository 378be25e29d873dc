"""Command-line entry point: ``hybriddp {train,sweep,accountant,synth}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Errors are reported on stderr as a single line ``error[<kind>]: <message>``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

from . import privacy
from .config import (derive_seeds, dump_document, load_run_config, parse_model_config,
                     read_document, synthetic_spec)
from .data import generate_synthetic, write_delimited
from .errors import ConfigurationError, HybridDPError
from .model import save_checkpoint
from .sweep import all_failed, run_sweep
from .train import train

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error[usage]: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def _fail(kind: str, exc: BaseException | str, code: int) -> int:
    msg = str(exc).replace("\n", " ")
    print(f"error[{kind}]: {msg}", file=sys.stderr)
    return code


def _emit(doc: dict) -> None:
    print(json.dumps(doc, sort_keys=True))


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    cfg = run.train
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seeds=derive_seeds(args.seed, 0))
    train_set, test_set = run.load_data()
    mc = parse_model_config(run.model, train_set.schema, cfg.seeds.init)
    params, report = train(train_set, cfg, mc, test_set, run.baseline_auc)
    out = run.resolve_output_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "report": report.to_dict(),
        "config": run.raw,
        "data": {"n_train": len(train_set), "n_test": len(test_set),
                 "skipped_rows": train_set.skipped_rows + test_set.skipped_rows},
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    (out / "report.json").write_text(json.dumps(doc, sort_keys=True, indent=2))
    save_checkpoint(params, out / "checkpoint.json", extra={"algorithm": cfg.algorithm})
    _emit({"report": str(out / "report.json"), "test_auc": report.test_auc,
           "total_epsilon": report.total_epsilon, "total_delta": report.total_delta})
    return EXIT_OK


def cmd_sweep(args) -> int:
    run = load_run_config(args.config)
    out = run.resolve_output_dir(args.out)
    rows, summary = run_sweep(run, out, parallelism=args.parallelism, root_seed=args.seed)
    _emit({"results": str(out / "results.csv"), "summary": str(out / "summary.csv"),
           "rows": len(rows), "failed": sum(1 for r in rows if r.get("error"))})
    return EXIT_RUNTIME if all_failed(rows) else EXIT_OK


def _orders(args):
    if args.order:
        return [int(o) for o in args.order]
    return list(privacy.DEFAULT_ORDERS)


def cmd_accountant(args) -> int:
    q = args.query
    if q == "rdp":
        curve = privacy.rdp_subsampled_gaussian(args.q, args.sigma, _orders(args))
        eps = [None if x == float("inf") else float(x) for x in curve.eps_rdp]
        doc = {"orders": list(curve.orders), "eps_rdp": eps}
        if len(eps) == 1:
            doc["value"] = eps[0]
    elif q == "convert":
        curve = privacy.rdp_subsampled_gaussian(args.q, args.sigma, _orders(args))
        conv = privacy.compose_and_convert(curve, args.steps, args.delta)
        doc = {"epsilon": conv.epsilon, "order": conv.order}
    elif q == "calibrate":
        sigma = privacy.calibrate_sigma(args.eps, args.delta, args.q, args.steps)
        doc = {"sigma": sigma,
               "epsilon": privacy.dpsgd_epsilon(args.q, sigma, args.steps, args.delta).epsilon}
    else:
        b = privacy.group_privacy(args.eps, args.delta, args.k)
        doc = {"epsilon": b.epsilon, "delta": b.delta}
    _emit(doc)
    return EXIT_OK


def cmd_synth(args) -> int:
    doc = read_document(args.config)
    spec = synthetic_spec(doc.get("synthetic", doc))
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds = generate_synthetic(spec)
    write_delimited(ds, out)
    schema_path = out.with_name(out.stem + ".schema.yaml")
    schema_path.write_text(dump_document({
        "path": out.name,
        "delimiter": ",",
        "header": True,
        "schema": ds.schema.to_dict(),
    }))
    _emit({"data": str(out), "schema": str(schema_path), "rows": len(ds)})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hybriddp", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train one model from a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="run a grid of trainings, write CSV tables")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--parallelism", type=int, default=1)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("accountant", help="privacy accounting queries")
    asub = a.add_subparsers(dest="query", required=True, parser_class=_Parser)
    r = asub.add_parser("rdp")
    r.add_argument("--q", type=float, required=True)
    r.add_argument("--sigma", type=float, required=True)
    r.add_argument("--order", type=int, action="append")
    c = asub.add_parser("convert")
    c.add_argument("--q", type=float, required=True)
    c.add_argument("--sigma", type=float, required=True)
    c.add_argument("--steps", type=int, required=True)
    c.add_argument("--delta", type=float, default=privacy.DEFAULT_DELTA)
    c.add_argument("--order", type=int, action="append")
    k = asub.add_parser("calibrate")
    k.add_argument("--eps", type=float, required=True)
    k.add_argument("--delta", type=float, default=privacy.DEFAULT_DELTA)
    k.add_argument("--q", type=float, required=True)
    k.add_argument("--steps", type=int, required=True)
    g = asub.add_parser("group")
    g.add_argument("--eps", type=float, required=True)
    g.add_argument("--delta", type=float, required=True)
    g.add_argument("--k", type=int, required=True)
    a.set_defaults(func=cmd_accountant)

    y = sub.add_parser("synth", help="write a synthetic dataset and its schema")
    y.add_argument("--config", required=True, help="YAML document with a synthetic section")
    y.add_argument("--out", required=True, help="output CSV path")
    y.add_argument("--seed", type=int)
    y.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except (HybridDPError, ValueError) as exc:
        kind = "config" if isinstance(exc, ValueError) and not isinstance(exc, HybridDPError) else "runtime"
        return _fail(kind, exc, EXIT_CONFIG if kind == "config" else EXIT_RUNTIME)
    except OSError as exc:
        return _fail("io", exc, EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
