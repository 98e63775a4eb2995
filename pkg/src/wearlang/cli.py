"""``wearlang`` command line: gen-data, gen-captions, train, eval, caption, ablate."""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Any, Sequence

import tomli
import torch

from . import pipeline as P
from .ablation import run_ablation_grid
from .config import ConfigError, RunConfig, load_run_config

log = logging.getLogger("wearlang")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("-c", "--config", help="run config TOML (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="global seed (overrides config and SLM_SEED)")
    p.add_argument("--name", help="run name under out_dir")
    p.add_argument("--out-dir", help="parent directory for runs")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. train.steps=200 (TOML literal or string)")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wearlang", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("gen-data", help="synthesize train/test sensor days"))
    _common(sub.add_parser("gen-captions", help="caption every day for each configured variant"))

    p = sub.add_parser("train", help="pretrain on the run's data and captions")
    _common(p)
    p.add_argument("--resume", action="store_true", help="continue from checkpoints/final.*")
    p.add_argument("--stop-at", type=int, help="halt after this many total steps")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("task", choices=["zeroshot", "retrieval", "fewshot", "caption"])
    _common(p)
    p.add_argument("--split", choices=P.SPLITS, default="test")
    p.add_argument("--checkpoint", help="checkpoint path (default: the run's final.slmc)")
    p.add_argument("--untrained", action="store_true",
                   help="evaluate a freshly initialized model instead")

    p = sub.add_parser("caption", help="dump greedy captions for a split")
    _common(p)
    p.add_argument("--split", choices=P.SPLITS, default="test")
    p.add_argument("--checkpoint")

    _common(sub.add_parser("ablate", help="train and compare all caption and loss variants"))
    return ap


def _parse_value(raw: str) -> Any:
    try:
        return tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        return raw


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides: dict[str, Any] = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = _parse_value(value.strip())
    for key, attr in (("seed", "seed"), ("name", "name"), ("out_dir", "out_dir")):
        if getattr(args, attr) is not None:
            overrides[key] = getattr(args, attr)
    return load_run_config(args.config, overrides)


def _write_report(report, paths: P.RunPaths, stem: str) -> None:
    paths.reports.mkdir(parents=True, exist_ok=True)
    report.write(paths.reports / stem)
    sys.stdout.write(report.to_text())


def cmd_gen_data(cfg: RunConfig, args) -> None:
    counts = P.gen_data(cfg, force=args.force)
    for split, per in counts.items():
        total = sum(per.values())
        print(f"{split}: {total} days  " + "  ".join(f"{c}={n}" for c, n in per.items()))


def cmd_gen_captions(cfg: RunConfig, args) -> None:
    for path in P.gen_captions(cfg, force=args.force):
        print(path)


def cmd_train(cfg: RunConfig, args) -> None:
    result = P.run_training(cfg, force=args.force, resume=args.resume, stop_at=args.stop_at)
    last = result.history[-1] if result.history else None
    msg = f"trained to step {result.state.step}"
    if last:
        msg += f"; final loss {last['loss_total']:.4f}"
    print(msg)


def cmd_eval(cfg: RunConfig, args) -> None:
    tr = P.load_trained(cfg, args.checkpoint, untrained=args.untrained)
    paths = P.RunPaths(cfg.run_dir)
    tag = "untrained_" if args.untrained else ""
    if args.task == "zeroshot":
        report = P.zero_shot_report(cfg, tr, args.split, args.untrained)
        stem = f"{tag}zeroshot_{args.split}"
    elif args.task == "retrieval":
        report = P.retrieval_report(cfg, tr, args.split, args.untrained)
        stem = f"{tag}retrieval_{args.split}"
    elif args.task == "fewshot":
        report = P.fewshot_report(cfg, tr, args.untrained)
        stem = f"{tag}fewshot"
    else:
        report, _ = P.caption_report(cfg, tr, args.split, args.untrained)
        stem = f"{tag}caption_{args.split}"
    _write_report(report, paths, stem)


def cmd_caption(cfg: RunConfig, args) -> None:
    tr = P.load_trained(cfg, args.checkpoint)
    paths = P.RunPaths(cfg.run_dir)
    report, rows = P.caption_report(cfg, tr, args.split)
    paths.reports.mkdir(parents=True, exist_ok=True)
    P.write_jsonl(rows, paths.reports / f"generated_{args.split}.jsonl")
    _write_report(report, paths, f"caption_{args.split}")


def cmd_ablate(cfg: RunConfig, args) -> None:
    paths = P.RunPaths(cfg.run_dir)
    target = paths.reports / "ablation.json"
    if target.exists() and not args.force:
        raise P.PipelineError(f"{target} exists; pass --force to overwrite")
    report = run_ablation_grid(cfg)
    report.write(paths.reports)
    sys.stdout.write(report.to_text())
    failed = [c for c in report.cells if c.status != "ok"]
    if failed:
        raise P.PipelineError(f"{len(failed)} ablation cell(s) failed")


COMMANDS = {"gen-data": cmd_gen_data, "gen-captions": cmd_gen_captions, "train": cmd_train,
            "eval": cmd_eval, "caption": cmd_caption, "ablate": cmd_ablate}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    torch.set_num_threads(1)
    try:
        cfg = resolve_config(args)
        P.archive_config(cfg)
        COMMANDS[args.command](cfg, args)
    except (ConfigError, P.PipelineError) as exc:
        print(f"wearlang {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # any module fault becomes a nonzero exit with a diagnostic
        print(f"wearlang {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
