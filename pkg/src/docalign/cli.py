"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .config import ABLATIONS, dump_config, load_config
from .errors import (
    CheckpointIntegrityError,
    ConfigError,
    DataError,
    DomainError,
    NumericError,
    QueryNotFoundError,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

logger = logging.getLogger("docalign")


def _cmd_gen_synth(args) -> int:
    from .synth import PageSpec, generate_corpus

    spec = PageSpec(
        width=args.width,
        height=args.height,
        n_columns=args.columns,
        seed=args.seed,
        patch_size=args.patch_size,
    )
    try:
        spec.validate()
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc
    manifest = generate_corpus(spec, args.pages, args.out, workers=args.workers)
    (Path(args.out) / "page_spec.json").write_text(json.dumps(asdict(spec), indent=2))
    print(manifest)
    return EXIT_OK


def _cmd_pretrain(args) -> int:
    from .train import pretrain

    cfg = load_config(args.config, args.set, args.ablation)
    if args.manifest:
        cfg.data.manifest = args.manifest
    result = pretrain(cfg, args.out, resume=args.resume, stop_at=args.stop_at)
    if result.history:
        last = result.history[-1]
        print(
            f"step {last['step']}: l_tp={last['l_tp']:.4f} l_r={last['l_r']:.4f} "
            f"total={last['total']:.4f} lambda={last['lambda_scale']:.2f}"
        )
    if result.n_skipped:
        print(f"skipped {result.n_skipped} unreadable pages", file=sys.stderr)
    print(result.final_checkpoint)
    return EXIT_OK


def _cmd_export(args) -> int:
    from .probes import export_encoder

    print(export_encoder(args.checkpoint, args.out))
    return EXIT_OK


def _cmd_heatmap(args) -> int:
    from .data import read_pages
    from .probes import emit_heatmap

    pages = read_pages(args.manifest)
    if not 0 <= args.page < len(pages):
        raise DataError(f"page index {args.page} out of range [0, {len(pages)})")
    grid = emit_heatmap(args.checkpoint, pages[args.page], args.word, args.out, args.average_subwords)
    out = Path(args.out)
    print(f"{grid.shape[0]}x{grid.shape[1]} heatmap -> {out.with_suffix('.csv')}, {out.with_suffix('.png')}")
    return EXIT_OK


def _cmd_probe(args) -> int:
    from .probes import retrieval_probe

    report = retrieval_probe(args.checkpoint, args.manifest, args.pages)
    text = json.dumps(report.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def _cmd_dump_targets(args) -> int:
    from .probes import dump_targets
    from .tokenizer import WordTokenizer

    cfg = load_config(args.config, args.set)
    tok_path = args.tokenizer or cfg.data.tokenizer or Path(args.manifest).parent / "tokenizer.json"
    try:
        tokenizer = WordTokenizer.load(tok_path)
    except Exception as exc:
        raise DataError(f"cannot load tokenizer {tok_path}: {exc}") from exc
    cfg.model.vocab_size = tokenizer.vocab_size
    obj = dump_targets(args.manifest, args.page, args.out, tokenizer, cfg.model, cfg.data)
    dump_config(cfg, Path(args.out).with_suffix(".config.yaml"))
    n_valid = sum(obj["row_valid"])
    print(f"{obj['shape'][0]}x{obj['shape'][1]} targets, {n_valid} valid rows -> {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="docalign", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", help="render a synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--pages", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--columns", type=int, default=1)
    g.add_argument("--patch-size", type=int, default=8)
    g.add_argument("--workers", type=int, default=1)
    g.set_defaults(func=_cmd_gen_synth)

    t = sub.add_parser("pretrain", help="run pre-training")
    t.add_argument("--config", help="YAML config file")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--ablation", choices=sorted(ABLATIONS))
    t.add_argument("--manifest", help="shortcut for --set data.manifest=...")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--stop-at", type=int, help="stop after this step (schedule still spans total_steps)")
    t.set_defaults(func=_cmd_pretrain)

    e = sub.add_parser("export-encoder", help="strip a checkpoint down to the image encoder")
    e.add_argument("checkpoint")
    e.add_argument("out")
    e.set_defaults(func=_cmd_export)

    h = sub.add_parser("heatmap", help="token-to-patch similarity heatmap for one word")
    h.add_argument("checkpoint")
    h.add_argument("--manifest", required=True)
    h.add_argument("--page", type=int, default=0)
    h.add_argument("--word", required=True)
    h.add_argument("--out", required=True, help="output stem; writes .csv and .png")
    h.add_argument("--average-subwords", action="store_true")
    h.set_defaults(func=_cmd_heatmap)

    r = sub.add_parser("probe", help="token-to-patch retrieval hit rate")
    r.add_argument("checkpoint")
    r.add_argument("--manifest", required=True)
    r.add_argument("--pages", type=int)
    r.add_argument("--out", help="write the JSON report here")
    r.set_defaults(func=_cmd_probe)

    d = sub.add_parser("dump-targets", help="write one page's target matrix as JSON")
    d.add_argument("--manifest", required=True)
    d.add_argument("--page", type=int, required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--config")
    d.add_argument("--tokenizer")
    d.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    d.set_defaults(func=_cmd_dump_targets)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except QueryNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, DomainError, CheckpointIntegrityError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
