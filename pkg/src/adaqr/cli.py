"""Command-line entry point: ``adaqr <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 data/validation error,
3 external-service error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields

from . import pipeline
from .config import PipelineConfig, load_config, render_config
from .errors import DataError, ServiceError, TrainingDivergedError
from .synth import SyntheticSpec, cmd_synth

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_SERVICE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_fields(parser, dataclass_type, skip=()):
    for f in fields(dataclass_type):
        if f.name in skip:
            continue
        kind = {"int": int, "float": float}.get(f.type)
        if f.type == "bool":
            parser.add_argument(_flag(f.name), dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        elif f.type == "float | None":
            parser.add_argument(_flag(f.name), dest=f.name, type=float, default=None)
        else:
            parser.add_argument(_flag(f.name), dest=f.name, type=kind or str, default=None)


def _pipeline_parent():
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("pipeline options (override the config file)")
    g.add_argument("--config", help="flat key = value config file")
    _add_fields(g, PipelineConfig)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="adaqr", description="Adaptive query reasoning for dense retrieval.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _pipeline_parent()

    p = sub.add_parser("synth", help="generate a synthetic benchmark")
    p.add_argument("--out", required=True, help="output directory")
    _add_fields(p, SyntheticSpec)

    sub.add_parser("train", parents=[common], help="pretrain then fine-tune the dense reasoner")
    sub.add_parser("build-anchor", parents=[common], help="build the oracle anchor from the training split")
    sub.add_parser("run", parents=[common], help="route, retrieve and evaluate the test split")

    p = sub.add_parser("ablation", parents=[common], help="evaluate one ablation mode")
    p.add_argument("--mode", required=True, choices=pipeline.MODES)

    p = sub.add_parser("sweep-tau", parents=[common], help="evaluate across a grid of thresholds")
    p.add_argument("--step", type=float, default=0.05)

    p = sub.add_parser("mrl", help="mean resultant length of embedding shifts")
    p.add_argument("pairs", help="query-record file with original and reasoned embeddings")
    p.add_argument("--out", help="also write the result as JSON here")

    p = sub.add_parser("pca", help="export 2-D PCA shift arrows")
    p.add_argument("pairs")
    p.add_argument("--out", required=True, help="JSON-lines arrow file")

    p = sub.add_parser("rewrite", parents=[common], help="batch LLM rewriting with a disk cache")
    p.add_argument("--out", required=True, help="where to write the augmented query file")
    p.add_argument("--all", action="store_true", help="also rewrite queries that already have reasoned text")

    sub.add_parser("show-config", parents=[common], help="print the effective configuration")
    return parser


def _config_from(args) -> PipelineConfig:
    overrides = {f.name: getattr(args, f.name, None) for f in fields(PipelineConfig)}
    return load_config(args.config, overrides)


def _print_summary(summary: dict) -> None:
    for k, v in summary.items():
        if isinstance(v, float):
            v = f"{v:.6f}"
        print(f"{k:>14}: {v}")


def _dispatch(args) -> None:
    cmd = args.command
    if cmd == "synth":
        kw = {f.name: getattr(args, f.name) for f in fields(SyntheticSpec) if getattr(args, f.name) is not None}
        spec = SyntheticSpec(**kw)
        paths = cmd_synth(spec, args.out)
        print(json.dumps(asdict(spec), sort_keys=True))
        for k, v in paths.items():
            print(f"{k:>8}: {v}")
        return
    if cmd == "mrl":
        res = pipeline.cmd_mrl(args.pairs)
        print(f"mrl = {res['mrl']:.6f}")
        for k, v in res["shift_norm"].items():
            print(f"shift_norm.{k} = {v:.6f}" if isinstance(v, float) else f"shift_norm.{k} = {v}")
        if args.out:
            with open(args.out, "w", encoding="utf-8") as fh:
                json.dump(res, fh, indent=2, sort_keys=True)
                fh.write("\n")
        return
    if cmd == "pca":
        res = pipeline.cmd_pca(args.pairs, args.out)
        print(f"arrows = {res['arrows']}")
        print("explained_variance = " + ", ".join(f"{v:.6f}" for v in res["explained_variance"]))
        return

    cfg = _config_from(args)
    if cmd == "show-config":
        sys.stdout.write(render_config(cfg))
    elif cmd == "train":
        out = pipeline.cmd_train(cfg)
        for r in (out.pretrain_report, out.finetune_report):
            print(f"{r.stage:>9}: epochs={len(r.epoch_losses)} first_loss={r.epoch_losses[0]:.6f} "
                  f"final_loss={r.final_loss:.6f} steps={r.steps}")
        print(f"checkpoints in {cfg.path('out_dir')}")
    elif cmd == "build-anchor":
        out = pipeline.cmd_build_anchor(cfg)
        print(f"anchor members: {len(out.anchor.member_ids)} of {len(out.dense_scores)} training queries")
        print(f"anchor written to {cfg.out(pipeline.ANCHOR_FILE)}")
    elif cmd == "run":
        _print_summary(pipeline.cmd_run(cfg).summary())
    elif cmd == "ablation":
        _print_summary(pipeline.cmd_ablation(cfg, args.mode).summary())
    elif cmd == "sweep-tau":
        rows = pipeline.cmd_sweep_tau(cfg, step=args.step)
        sys.stdout.write(pipeline.format_sweep(rows))
    elif cmd == "rewrite":
        results = pipeline.cmd_rewrite(cfg, args.out, only_missing=not args.all)
        cached = sum(r.from_cache for r in results)
        print(f"rewrote {len(results)} queries ({cached} from cache) -> {args.out}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"adaqr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _dispatch(args)
    except ServiceError as exc:
        print(f"adaqr: service error: {exc}", file=sys.stderr)
        return EXIT_SERVICE
    except (DataError, TrainingDivergedError, FileNotFoundError) as exc:
        print(f"adaqr: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"adaqr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
