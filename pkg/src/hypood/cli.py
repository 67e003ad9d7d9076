"""Command-line entry point: ``hypood <command> [options]``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import pipeline
from .config import SCORERS, default_config, load_config
from .encoder import load_checkpoint, save_checkpoint
from .errors import ConfigError, HypoodError
from .evaluation import DetectionReport


def _threads():
    raw = os.environ.get("HYPOOD_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError("HYPOOD_THREADS", f"not an integer: {raw!r}") from None


def _config(args):
    cfg = load_config(args.config) if args.config else default_config()
    if getattr(args, "seed", None) is not None:
        cfg.set("train.seed", str(args.seed))
    if getattr(args, "scorer", None):
        cfg["eval"]["scorers"] = list(dict.fromkeys(args.scorer))
    return cfg


def _out(args, cfg):
    return args.out or cfg.resolve_path(cfg["output"]["dir"])


def cmd_gen_data(args):
    cfg = _config(args)
    out = _out(args, cfg)
    train_set, test_set, oods = pipeline.load_data(cfg)
    with pipeline.atomic_dir(out) as tmp:
        pipeline.write_data(tmp, train_set, test_set, oods)
    print(f"wrote {2 + len(oods)} datasets to {out}")


def cmd_train(args):
    cfg = _config(args)
    out = _out(args, cfg)
    train_set, _, _ = pipeline.load_data(cfg)
    encoder, bank, history = pipeline.train_stage(cfg, train_set)
    with pipeline.atomic_dir(out) as tmp:
        save_checkpoint(os.path.join(tmp, "checkpoint.json"), encoder, bank, extra={"config_digest": cfg.digest()})
        history.to_csv(os.path.join(tmp, "history.csv"))
    print(f"checkpoint: {os.path.join(out, 'checkpoint.json')}")


def cmd_eval(args):
    cfg = _config(args)
    out = _out(args, cfg)
    report = pipeline.evaluate_checkpoint(cfg, args.checkpoint, out)
    print(report.table())


def cmd_probe(args):
    cfg = _config(args)
    train_set, _, _ = pipeline.load_data(cfg)
    encoder, _, _ = load_checkpoint(args.checkpoint)
    _, acc = pipeline.fit_probe(cfg, encoder, train_set)
    print(f"probe accuracy: {acc:.4f}")


def cmd_run(args):
    cfg = _config(args)
    print(cfg.to_ini())
    artifacts, report = pipeline.run_experiment(cfg, _out(args, cfg))
    print(report.table())
    print(f"\nartifacts in {artifacts.out_dir}")


def cmd_sweep(args):
    cfg = _config(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    out = _out(args, cfg)
    rows = pipeline.sweep(cfg, args.axis, values, out, _threads())
    failed = sum(1 for r in rows if r["error"])
    print(f"sweep over {args.axis}: {len(values)} points, {failed} failed; summary in {os.path.join(out, 'sweep.csv')}")


def cmd_report(args):
    try:
        report = DetectionReport.load(args.report)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError("--report", f"cannot read report: {exc}") from None
    print(report.table())


def build_parser():
    p = argparse.ArgumentParser(prog="hypood", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, metavar="PATH")
        sp.add_argument("--out", metavar="DIR")
        sp.add_argument("--seed", type=int, metavar="N")
        sp.add_argument("--scorer", action="append", choices=SCORERS)

    sp = sub.add_parser("gen-data", help="write the configured datasets as CSV")
    common(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train an encoder and save a checkpoint")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True, metavar="PATH")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("probe", help="linear-probe accuracy of a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True, metavar="PATH")
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("run", help="end-to-end experiment")
    common(sp, config_required=True)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="repeat a run over one hyperparameter axis")
    common(sp, config_required=True)
    sp.add_argument("--axis", required=True, choices=sorted(pipeline.SWEEP_AXES))
    sp.add_argument("--values", required=True, help="comma-separated values")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("report", help="pretty-print a report document")
    sp.add_argument("--report", required=True, metavar="PATH")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except HypoodError as exc:
        print(f"hypood: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
