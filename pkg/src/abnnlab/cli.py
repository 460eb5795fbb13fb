"""Command-line entry point ``abnn-lab``.

Every subcommand reads a JSON run config (``--config``), optionally
overrides all seeds (``--seed``) and writes deterministic outputs.

Exit codes: 0 on success, 2 on a usage or config-schema error, 1 on any
runtime failure. Errors go to stderr as one JSON object per line.

The ``ABNNLAB_LOG`` environment variable sets the log level (for example
``INFO`` or ``DEBUG``; default ``WARNING``). Logs go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from . import config as config_mod
from .diagnostics import gradient_variance_suite
from .ensemble import export_logits_csv, predict
from .metrics import MetricsReport
from .model import load, save
from .pipeline import LR_MULTIPLIERS, ablation, build_dataset, evaluate, load_modeset, run_finetune, run_pretrain
from .pipeline import save_modeset, sweep
from .train import ModeSet

log = logging.getLogger("abnnlab")

SWEEP_PARAMS = ("lr", "alpha", "prior_p", "M", "epochs", "L")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit({"error": "usage", "message": message})
        self.exit(2)


def _emit(obj: dict) -> None:
    sys.stderr.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stderr.flush()


def _write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _write_table(path, header: list[str], rows: list[list]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _load_modes(args) -> ModeSet:
    if args.modeset:
        return load_modeset(args.modeset)
    ckpt = load(args.checkpoint)
    return ModeSet([ckpt.network])


def _checkpoint_or_pretrain(args, cfg, dataset):
    if args.checkpoint:
        return load(args.checkpoint)
    log.info("no --checkpoint given; pre-training from the config")
    return run_pretrain(cfg, dataset)


# -- subcommands ----------------------------------------------------------


def cmd_pretrain(args, cfg) -> None:
    dataset = build_dataset(cfg.dataset)
    ckpt = run_pretrain(cfg, dataset)
    ckpt.metadata["config"] = cfg.document
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save(ckpt, args.out)


def cmd_finetune(args, cfg) -> None:
    dataset = build_dataset(cfg.dataset)
    modes = run_finetune(cfg, load(args.checkpoint), dataset, args.jobs)
    save_modeset(modes, args.out)


def cmd_eval(args, cfg) -> None:
    dataset = build_dataset(cfg.dataset)
    report = evaluate(_load_modes(args), dataset, cfg.ensemble, cfg.ece_bins, cfg.document)
    if args.format == "csv":
        _write_table(args.out, MetricsReport.csv_header(), [report.csv_row()])
    else:
        _write_text(args.out, report.to_json())


def cmd_gradvar(args, cfg) -> None:
    dataset = build_dataset(cfg.dataset)
    ckpt = load(args.checkpoint) if args.checkpoint else None
    out = gradient_variance_suite(cfg, dataset, ckpt)
    _write_text(args.out, json.dumps(out, sort_keys=True, indent=2) + "\n")


def cmd_sweep(args, cfg) -> None:
    dataset = build_dataset(cfg.dataset)
    if args.values:
        values = [float(v) for v in args.values.split(",")]
    elif args.param == "lr":
        values = list(LR_MULTIPLIERS)
    else:
        raise ValueError(f"--values is required when sweeping {args.param!r}")
    if args.param in ("M", "epochs", "L"):
        values = [int(v) for v in values]
    ckpt = _checkpoint_or_pretrain(args, cfg, dataset)
    rows = sweep(cfg, ckpt, dataset, args.param, values, args.jobs)
    _write_table(
        args.out,
        ["param", "value"] + MetricsReport.csv_header(),
        [[args.param, v] + r.csv_row() for v, r in rows],
    )


def cmd_ablate(args, cfg) -> None:
    dataset = build_dataset(cfg.dataset)
    ckpt = _checkpoint_or_pretrain(args, cfg, dataset)
    rows = ablation(cfg, ckpt, dataset, args.jobs)
    _write_table(args.out, ["rp", "mm"] + MetricsReport.csv_header(), [[rp, mm] + r.csv_row() for rp, mm, r in rows])


def cmd_export_logits(args, cfg) -> None:
    dataset = build_dataset(cfg.dataset)
    x = dataset.test.x if args.split == "test" else dataset.ood
    if x is None:
        raise ValueError("the dataset has no OOD split")
    bundle = predict(_load_modes(args), x, cfg.ensemble)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    export_logits_csv(bundle, args.out)


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "gradvar": cmd_gradvar,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "export-logits": cmd_export_logits,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, metavar="PATH", help="JSON run config")
    common.add_argument("--seed", type=int, metavar="N", help="override every seed in the config")
    common.add_argument("--jobs", type=int, default=1, metavar="N", help="worker processes for mode fine-tuning")

    parser = _Parser(
        prog="abnn-lab",
        description="Train, convert and evaluate ABNN ensembles. Log level: ABNNLAB_LOG=DEBUG|INFO|WARNING.",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pretrain", parents=[common], help="train the deterministic network")
    p.add_argument("--out", required=True, metavar="CKPT", help="checkpoint to write")

    p = sub.add_parser("finetune", parents=[common], help="convert and fine-tune M modes")
    p.add_argument("--checkpoint", required=True, metavar="CKPT", help="pre-trained checkpoint")
    p.add_argument("--out", required=True, metavar="DIR", help="mode-set directory to write")

    for name, what in (("eval", "write a metrics report"), ("export-logits", "write per-member logits")):
        p = sub.add_parser(name, parents=[common], help=what)
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--modeset", metavar="DIR", help="mode-set directory from finetune")
        src.add_argument("--checkpoint", metavar="CKPT", help="single checkpoint (evaluated as one member)")
        p.add_argument("--out", required=True, metavar="PATH", help="output file")
        if name == "eval":
            p.add_argument("--format", choices=("json", "csv"), default="json", help="report format")
        else:
            p.add_argument("--split", choices=("test", "ood"), default="test", help="inputs to score")

    p = sub.add_parser("gradvar", parents=[common], help="gradient-variance diagnostic")
    p.add_argument("--checkpoint", metavar="CKPT", help="ABNN starting weights (pre-trains per seed when omitted)")
    p.add_argument("--out", required=True, metavar="PATH", help="JSON report")

    p = sub.add_parser("sweep", parents=[common], help="one-parameter fine-tuning sweep")
    p.add_argument("--param", required=True, choices=SWEEP_PARAMS, help="knob to vary (lr values are multipliers)")
    p.add_argument("--values", metavar="V1,V2,...", help="comma-separated values (lr defaults to 0.1x..10x)")
    p.add_argument("--checkpoint", metavar="CKPT", help="pre-trained checkpoint (pre-trains when omitted)")
    p.add_argument("--out", required=True, metavar="CSV", help="CSV with one row per value")

    p = sub.add_parser("ablate", parents=[common], help="random-prior x multi-mode grid")
    p.add_argument("--checkpoint", metavar="CKPT", help="pre-trained checkpoint (pre-trains when omitted)")
    p.add_argument("--out", required=True, metavar="CSV", help="CSV with rows (rp, mm)")
    return parser


def _setup_logging() -> None:
    level = os.environ.get("ABNNLAB_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if args.jobs < 1:
        _emit({"error": "usage", "message": "--jobs must be >= 1"})
        return 2
    try:
        cfg = config_mod.load(args.config, seed=args.seed)
    except config_mod.ConfigError as exc:
        _emit({"error": "config", "pointer": exc.pointer, "message": exc.message, "path": str(args.config)})
        return 2
    except OSError as exc:
        _emit({"error": "io", "message": str(exc), "path": str(args.config)})
        return 1
    try:
        COMMANDS[args.command](args, cfg)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a structured error
        log.debug("command failed", exc_info=True)
        _emit({"error": type(exc).__name__, "command": args.command, "message": str(exc)})
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
