"""Command-line entry point: ``anyword segment|bench|adapt|synth``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from anyword.cache import AttentionCache
from anyword.config import PipelineConfig
from anyword.datasets import DatasetRecord, iter_samples, load_dataset, load_image
from anyword.embedopt import fast_adapt_text_encoder
from anyword.errors import AnywordError
from anyword.pipeline import Task, build_backends, run_benchmark, run_pipeline
from anyword.promptmine import dump_prompts
from anyword.synthetic import fields_from_sidecar, synthetic_scenes
from anyword.toy import ToyDenoiser, ToyImageEncoder, ToyTextEncoder


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    for flag, key in (("no_pl", "use_pl"), ("no_r1", "use_r1"), ("no_r2", "use_r2"), ("no_segmentor", "use_segmentor")):
        if getattr(args, flag, False):
            changes[key] = False
    if getattr(args, "fast", False):
        changes["fast"] = True
    if getattr(args, "steps", None) is not None:
        changes["opt_steps"] = args.steps
    if getattr(args, "lr", None) is not None:
        changes["opt_learning_rate"] = args.lr
    if getattr(args, "workers", None) is not None:
        changes["workers"] = args.workers
    if getattr(args, "adapter", None):
        changes["adapter"] = args.adapter
    return cfg.replace(**changes).with_env()


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file mirroring PipelineConfig")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="optimisation steps (default 1100)")
    p.add_argument("--fast", action="store_true", help="use the short schedule (50 steps)")
    p.add_argument("--lr", type=float, help="embedding learning rate")
    p.add_argument("--adapter", help="low-rank text-encoder adapter file")
    p.add_argument("--no-pl", action="store_true", help="skip embedding optimisation")
    p.add_argument("--no-r1", action="store_true", help="single root point per entity")
    p.add_argument("--no-r2", action="store_true", help="no negative points")
    p.add_argument("--no-segmentor", action="store_true", help="return upscaled attention masks")


def cmd_segment(args) -> int:
    cfg = _config(args)
    image = load_image(args.image)
    backends = build_backends(cfg, fields_from_sidecar(args.image))
    cache = AttentionCache(args.cache) if args.cache else None
    result, diag = run_pipeline(image, args.text, cfg, backends, cache=cache)
    if args.dump_prompts:
        Path(args.dump_prompts).write_text(dump_prompts(diag.prompts, cfg.seed))
    if args.overlay:
        from anyword.overlay import save_overlay

        save_overlay(args.overlay, image, result)
    doc = {"text": args.text, "seed": cfg.seed, **result.to_json(compressed=args.compressed)}
    if args.output:
        Path(args.output).write_text(json.dumps(doc, sort_keys=True) + "\n")
    for r in result.records:
        print(f"{r.entity_id}\t{r.label}\t{int(r.mask.grid.sum())} px")
    for s in result.skipped:
        print(f"skipped\t{s.label}\t{s.reason}", file=sys.stderr)
    return 0


def cmd_bench(args) -> int:
    cfg = _config(args)
    dataset = load_dataset(args.dataset)
    cache = AttentionCache(args.cache) if args.cache else None
    report = run_benchmark(dataset, cfg, Task(args.task), cache=cache)
    if args.report:
        Path(args.report).write_text(report.to_json() + "\n")
    if args.per_image:
        Path(args.per_image).write_text(report.per_image_csv())
    sys.stdout.write(report.to_table())
    return 0 if report.n_failed == 0 else 3


def cmd_adapt(args) -> int:
    cfg = _config(args)
    samples = list(iter_samples(args.samples))
    encoder = ToyTextEncoder()

    def image_of(ref):
        return ref.load_image() if isinstance(ref, DatasetRecord) else load_image(ref)

    def backend_for(ref, _text):
        if isinstance(ref, DatasetRecord) and "scene" in ref.meta:
            from anyword.synthetic import SyntheticScene

            return SyntheticScene.from_json(ref.meta["scene"]).denoiser()
        return ToyDenoiser(fields_from_sidecar(ref) or {})

    enc = ToyImageEncoder()
    backends = build_backends(cfg)
    adapter = fast_adapt_text_encoder(
        samples, encoder, backend_for, lambda ref: enc(image_of(ref)), backends.schedule,
        rank=args.rank, steps=args.steps if args.steps is not None else cfg.optimizer.steps,
        learning_rate=cfg.optimizer.learning_rate, seed=cfg.seed,
    )
    adapter.save(args.out)
    print(f"wrote rank-{adapter.rank} adapter to {args.out}")
    return 0


def cmd_synth(args) -> int:
    out = Path(args.out)
    for scene in synthetic_scenes(args.scenes, args.variants, args.seed):
        png = scene.write(out)
        print(f"{png}\t{scene.captions[0]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anyword", description="Grounded segmentation from free-form text.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="ground one expression in one image")
    p.add_argument("--image", required=True)
    p.add_argument("--text", required=True)
    _add_common(p)
    p.add_argument("--overlay", help="write a PNG overlay")
    p.add_argument("--dump-prompts", help="write mined point prompts as JSON lines")
    p.add_argument("--output", help="write masks (COCO RLE) as JSON")
    p.add_argument("--compressed", action="store_true", help="compressed RLE strings in --output")
    p.add_argument("--cache", help="attention cache directory")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("bench", help="evaluate a dataset")
    p.add_argument("--dataset", required=True, help="manifest JSON or synthetic[:SCENES[:VARIANTS[:SEED]]]")
    p.add_argument("--task", required=True, choices=[t.value for t in Task])
    p.add_argument("--report", help="write the JSON report")
    p.add_argument("--per-image", help="write per-image stability statistics as CSV")
    p.add_argument("--workers", type=int)
    p.add_argument("--cache", help="attention cache directory")
    _add_common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("adapt", help="fit a low-rank text-encoder adapter")
    p.add_argument("--samples", required=True, help="JSON list of {image, text} or a dataset spec")
    p.add_argument("--rank", type=int, default=16)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("synth", help="write synthetic scenes with sidecars")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=5)
    p.add_argument("--variants", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except AnywordError as exc:
        stage = f" [{exc.stage}]" if exc.stage else ""
        print(f"anyword: {type(exc).__name__}{stage}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
