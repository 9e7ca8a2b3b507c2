"""Command-line entry point: data generation, annotation, training, evaluation.

Configuration precedence for `train` is built-in defaults, then the config
file, then explicit flags. Every command prints its resolved configuration
before doing any work, validates inputs before writing any output, and
routes all randomness through --seed. The PIXLAB_CACHE environment variable
provides a default home for derived artifacts when --out is omitted.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import datagen, evaluation, training
from .encoders import load_checkpoint, save_checkpoint
from .training import TrainingConfig


def _cache_path(name: str) -> Path:
    cache = os.environ.get("PIXLAB_CACHE")
    if not cache:
        raise ValueError(f"--out not given and PIXLAB_CACHE is not set (needed for {name})")
    path = Path(cache)
    path.mkdir(parents=True, exist_ok=True)
    return path / name


def _print_config(command: str, values: dict) -> None:
    print(f"[{command}] resolved config: {json.dumps(values, sort_keys=True)}")


def _add_train_overrides(parser: argparse.ArgumentParser) -> None:
    for f in dataclasses.fields(TrainingConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            parser.add_argument(flag, default=None, type=lambda s: s.lower() in ("1", "true", "yes"))
        elif f.type == "int":
            parser.add_argument(flag, default=None, type=int)
        else:
            parser.add_argument(flag, default=None, type=float)


def _resolve_train_config(args) -> TrainingConfig:
    values = dataclasses.asdict(TrainingConfig.desk() if args.preset == "desk" else TrainingConfig())
    if args.config:
        file_values = json.loads(Path(args.config).read_text())
        unknown = set(file_values) - set(values)
        if unknown:
            raise ValueError(f"unknown config keys in {args.config}: {sorted(unknown)}")
        values.update(file_values)
    for name in values:
        override = getattr(args, name, None)
        if override is not None:
            values[name] = type(values[name])(override)
    return TrainingConfig.from_dict(values)


def cmd_gen_data(args) -> int:
    cfg = {"n": args.n, "seed": args.seed, "resolution": args.resolution,
           "enlarge": args.enlarge, "out": str(args.out), "manifest": args.manifest}
    _print_config("gen-data", cfg)
    samples = datagen.generate_synthetic_dataset(args.n, args.seed, args.resolution, args.enlarge)
    datagen.save_dataset(samples, args.out, enlarge=args.enlarge)
    if args.manifest:
        path = datagen.export_manifest(samples, args.out)
        print(f"wrote manifest {path}")
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def cmd_annotate(args) -> int:
    cfg = {"manifest": args.manifest, "out": str(args.out), "concurrency": args.concurrency,
           "endpoint": args.endpoint}
    _print_config("annotate", cfg)
    if args.endpoint:
        suite = datagen.AnnotatorSuite(
            object_captioner=datagen.RemoteAnnotator("remote-object-captioner", args.endpoint + "/object"),
            validator=datagen.RemoteAnnotator("remote-validator", args.endpoint + "/validate"),
            context_captioner=datagen.RemoteAnnotator("remote-context-captioner", args.endpoint + "/context"),
            merger=datagen.RemoteAnnotator("remote-merger", args.endpoint + "/merge"),
        )
    else:
        suite = datagen.mock_suite()
    stats = datagen.run_pipeline(args.manifest, suite, args.out, concurrency=args.concurrency)
    print(f"accepted={stats.accepted} rejected={stats.rejected} failed={stats.failed} "
          f"wall_time={stats.wall_time:.2f}s")
    return 0


def cmd_train(args) -> int:
    config = _resolve_train_config(args)
    _print_config("train", dataclasses.asdict(config))
    dataset = datagen.load_dataset(args.data)
    metrics_path = args.metrics or None
    result = training.train(dataset, config, metrics_path=metrics_path, max_steps=args.max_steps)
    save_checkpoint(result.model, args.out)
    last = result.metrics[-1] if result.metrics else {}
    print(f"trained {len(result.metrics)} steps; final l_total={last.get('l_total', float('nan')):.4f}; "
          f"checkpoint {args.out}")
    return 0


def cmd_eval_retrieval(args) -> int:
    ks = [int(k) for k in args.ks.split(",")]
    out = Path(args.out) if args.out else _cache_path("retrieval")
    cfg = {"ckpt": args.ckpt, "data": args.data, "ks": ks, "out": str(out)}
    _print_config("eval-retrieval", cfg)
    model = load_checkpoint(args.ckpt)
    dataset = datagen.load_dataset(args.data)
    m2t, t2m = evaluation.mask_text_retrieval(model, dataset, ks)
    out.parent.mkdir(parents=True, exist_ok=True)
    evaluation.write_report(m2t, str(out) + ".m2t.json", checkpoint_id=str(args.ckpt))
    evaluation.write_report(t2m, str(out) + ".t2m.json", checkpoint_id=str(args.ckpt))
    for report in (m2t, t2m):
        recalls = " ".join(f"R@{k}={v:.4f}" for k, v in sorted(report.recall_at.items()))
        print(f"{report.direction}: {recalls} (n={report.n_queries})")
    return 0


def cmd_eval_classify(args) -> int:
    cfg = {"ckpt": args.ckpt, "data": args.data, "protocol": args.protocol, "k": args.k}
    _print_config("eval-classify", cfg)
    model = load_checkpoint(args.ckpt)
    dataset = datagen.load_dataset(args.data)
    prompts = sorted({s.short_caption for s in dataset})
    correct = 0
    for sample in dataset:
        top = evaluation.zero_shot_classify(
            model, sample.pixels, sample.mask, prompts, protocol=args.protocol, k=args.k
        )
        if prompts[top[0]] == sample.short_caption:
            correct += 1
    print(f"top-1 accuracy over {len(prompts)} classes: {correct / len(dataset):.4f} "
          f"({correct}/{len(dataset)})")
    return 0


def cmd_eval_rec(args) -> int:
    cfg = {"ckpt": args.ckpt, "data": args.data, "candidates": args.candidates,
           "seed": args.seed, "iou_threshold": args.iou_threshold}
    _print_config("eval-rec", cfg)
    model = load_checkpoint(args.ckpt)
    dataset = datagen.load_dataset(args.data)
    if args.candidates > len(dataset):
        raise ValueError(f"--candidates {args.candidates} exceeds dataset size {len(dataset)}")
    rng = np.random.default_rng(args.seed)
    hits = 0
    for i, sample in enumerate(dataset):
        others = [j for j in range(len(dataset)) if j != i]
        picked = rng.choice(others, size=args.candidates - 1, replace=False)
        candidates = [sample.mask] + [dataset[int(j)].mask for j in picked]
        chosen = evaluation.rec_select(model, sample.pixels, candidates, sample.long_caption)
        if evaluation.mask_iou(candidates[chosen], sample.mask) >= args.iou_threshold:
            hits += 1
    print(f"REC success (IoU >= {args.iou_threshold}): {hits / len(dataset):.4f} ({hits}/{len(dataset)})")
    return 0


def cmd_attnmap(args) -> int:
    out = Path(args.out) if args.out else _cache_path(f"attn-{args.index:05d}.png")
    cfg = {"ckpt": args.ckpt, "data": args.data, "index": args.index, "out": str(out)}
    _print_config("attnmap", cfg)
    model = load_checkpoint(args.ckpt)
    dataset = datagen.load_dataset(args.data)
    if not 0 <= args.index < len(dataset):
        raise ValueError(f"--index {args.index} out of range for dataset of {len(dataset)}")
    sample = dataset[args.index]
    evaluation.export_attention_map(model, sample.pixels, sample.mask, out)
    print(f"wrote attention map {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pixlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic shape dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--enlarge", type=float, default=1.5)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", action="store_true", help="also write PNGs and a pipeline manifest")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("annotate", help="run the annotation pipeline over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--concurrency", type=int, default=1)
    p.add_argument("--endpoint", default="", help="base URL of remote annotators (mocks if empty)")
    p.set_defaults(fn=cmd_annotate)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default="", help="JSON file with TrainingConfig fields")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--metrics", default="", help="write per-step JSONL metrics here")
    p.add_argument("--max-steps", type=int, default=None)
    _add_train_overrides(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval-retrieval", help="mask/text retrieval recall@k")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ks", default="1,5,10")
    p.add_argument("--out", default="")
    p.set_defaults(fn=cmd_eval_retrieval)

    p = sub.add_parser("eval-classify", help="zero-shot region classification accuracy")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--protocol", choices=("visual_prompt", "crop_1_5x"), default="visual_prompt")
    p.add_argument("--k", type=int, default=1)
    p.set_defaults(fn=cmd_eval_classify)

    p = sub.add_parser("eval-rec", help="referring-expression candidate selection")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--candidates", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iou-threshold", type=float, default=0.5)
    p.set_defaults(fn=cmd_eval_rec)

    p = sub.add_parser("attnmap", help="export a class-token attention map")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", default="")
    p.set_defaults(fn=cmd_attnmap)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    seed = getattr(args, "seed", None)
    torch.manual_seed(0 if seed is None else int(seed))
    try:
        return args.fn(args)
    except Exception as exc:  # noqa: BLE001 - one-line diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
