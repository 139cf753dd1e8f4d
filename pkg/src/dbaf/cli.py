"""Command-line interface.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import data, evaluation
from .errors import DBAFError, StateError, ValidationError
from .kria import generate_key, load_key, save_key

log = logging.getLogger("dbaf")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _load_model(path: str):
    from .training import load_checkpoint

    return load_checkpoint(_existing(path, "model checkpoint"))


# --- gen-key --------------------------------------------------------------------

def cmd_gen_key(args) -> int:
    key = generate_key(seed=args.seed, passphrase=args.passphrase, d=args.d)
    save_key(key, args.out, export_raw=args.export_raw)
    print(key.fingerprint)
    return EXIT_OK


# --- anonymize / recover ---------------------------------------------------------

def _transform(args, direction: str) -> int:
    from .model import anonymize, recover

    src = _existing(args.inp, "input")
    if args.key is None and args.key_dir is None:
        raise UsageError("one of --key or --key-dir is required")
    key = load_key(_existing(args.key, "key file")) if args.key else None
    key_dir = _existing(args.key_dir, "key directory") if args.key_dir else None
    ckpt = _load_model(args.model)
    model = ckpt.model
    size = model.config.backbone.image_size
    fn = anonymize if direction == "anonymize" else recover

    if src.is_dir():
        inputs = data.list_images(src)
        if not inputs:
            raise ValidationError(f"no images found in {src}")
        out_dir = Path(args.out)
        jobs = [(p, out_dir / (p.stem + ".png")) for p in inputs]
    else:
        jobs = [(src, Path(args.out))]

    failures = 0
    for inp, out in jobs:
        try:
            k = key if key is not None else load_key(key_dir / (inp.stem + ".json"))
            if k.d != model.d:
                raise ValidationError(f"key width {k.d} does not match model width {model.d}")
            image = data.load_image(inp, size)
            data.save_image(fn(image, k, model), out)
        except DBAFError as exc:
            failures += 1
            print(f"error: {inp}: {exc}", file=sys.stderr)
    return EXIT_FAIL if failures else EXIT_OK


def cmd_anonymize(args) -> int:
    return _transform(args, "anonymize")


def cmd_recover(args) -> int:
    return _transform(args, "recover")


# --- train -----------------------------------------------------------------------

def cmd_train(args) -> int:
    from .training import TrainConfig, load_checkpoint, run_ablation, save_checkpoint, train_stage1, train_stage2

    cfg = TrainConfig.from_toml(_existing(args.config, "config")).to_dict() if args.config else {}
    for name in ("steps", "lr", "batch_size", "seed", "ablation"):
        value = getattr(args, name)
        if value is not None:
            cfg[name] = value
    if args.log:
        cfg["log_path"] = args.log
    if args.toy:
        dataset = data.synthetic_faces(args.toy, seed=cfg.get("seed", 0))
    elif args.data:
        dataset = data.load_image_dir(_existing(args.data, "data directory"), size=64)
    else:
        raise UsageError("one of --data or --toy is required")

    if args.stage == "all":
        ckpt = run_ablation(cfg.get("ablation", "full"), dataset, TrainConfig.from_dict(cfg))
    elif args.stage == "1":
        ckpt = train_stage1(dataset, TrainConfig.from_dict({**cfg, "stage": 1}))
    else:
        init = load_checkpoint(_existing(args.init, "stage-1 checkpoint")) if args.init else None
        ckpt = train_stage2(dataset, TrainConfig.from_dict({**cfg, "stage": 2}), init)
    save_checkpoint(ckpt, args.out)
    print(f"saved {args.out} after {ckpt.step} steps")
    return EXIT_OK


# --- evaluate --------------------------------------------------------------------

def cmd_evaluate(args) -> int:
    from .losses import default_extractors

    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = [m for m in metrics if m not in evaluation.METRICS]
    if unknown or not metrics:
        raise UsageError(f"unknown metrics {unknown}; valid names: {', '.join(evaluation.METRICS)}")
    root = _existing(args.set, "evaluation set")
    orig_dir = root / "original" if (root / "original").is_dir() else root
    originals_paths = data.list_images(orig_dir) if orig_dir.is_dir() else []
    if not originals_paths:
        raise ValidationError(f"no images found in {orig_dir}")

    ckpt = _load_model(args.model) if args.model else None
    seed = ckpt.train_config.extractor_seed if ckpt and ckpt.train_config else 1234
    extractors = default_extractors(seed)
    size = ckpt.model.config.backbone.image_size if ckpt else None
    originals = torch.stack([data.load_image(p, size) for p in originals_paths])

    gen_dir = root / "generated"
    if gen_dir.is_dir():
        generated = []
        for p in originals_paths:
            match = [q for q in data.list_images(gen_dir) if q.stem == p.stem]
            if not match:
                raise ValidationError(f"no generated image for {p.name}")
            generated.append(data.load_image(match[0], originals.shape[-1]))
        generated = torch.stack(generated)
    else:
        if ckpt is None or args.key is None:
            raise UsageError("without a generated/ directory both --model and --key are needed")
        from .model import anonymize

        key = load_key(_existing(args.key, "key file"))
        generated = anonymize(originals, key, ckpt.model)

    values = evaluation.evaluate_pairs(originals, generated, metrics, extractors)
    report = evaluation.build_report(values, len(originals), images=[p.name for p in originals_paths])
    from .utils import atomic_write_text

    atomic_write_text(Path(args.report), json.dumps(report, indent=2) + "\n")
    print(json.dumps(values))
    return EXIT_OK


# --- export-embeddings ------------------------------------------------------------

def cmd_export_embeddings(args) -> int:
    from .losses import default_extractors

    ckpt = _load_model(args.model)
    paths = data.list_images(_existing(args.inp, "input directory"))
    if not paths:
        raise ValidationError("no input images")
    size = ckpt.model.config.backbone.image_size
    images = {p.stem: data.load_image(p, size) for p in paths}
    keys = [generate_key(seed=args.first_seed + i, d=ckpt.model.d) for i in range(args.keys)]
    seed = ckpt.train_config.extractor_seed if ckpt.train_config else 1234
    rows = evaluation.export_identity_embeddings(images, keys, ckpt.model, default_extractors(seed).identity,
                                                 args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


# --- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dbaf", description="Key-controlled reversible face de-identification")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-key", help="create a key file")
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--seed", type=int)
    src.add_argument("--passphrase")
    g.add_argument("--out", required=True)
    g.add_argument("--d", type=int, default=64, help="latent width of the target model")
    g.add_argument("--export-raw", action="store_true", help="also store the raw key matrices")
    g.set_defaults(func=cmd_gen_key)

    for name, func in (("anonymize", cmd_anonymize), ("recover", cmd_recover)):
        s = sub.add_parser(name, help=f"{name} an image or a directory of images")
        s.add_argument("--model", required=True)
        s.add_argument("--key")
        s.add_argument("--key-dir", help="per-image keys: <dir>/<basename>.json")
        s.add_argument("--in", dest="inp", required=True)
        s.add_argument("--out", required=True)
        s.set_defaults(func=func)

    t = sub.add_parser("train", help="train one stage or a full configuration")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--toy", type=int, help="use N procedural toy faces instead of --data")
    t.add_argument("--stage", choices=["1", "2", "all"], default="all")
    t.add_argument("--init", help="stage-1 checkpoint for --stage 2")
    t.add_argument("--ablation", choices=["full", "single_stage", "no_cid", "no_maar"])
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--log", help="append line-delimited loss records here")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="compute metrics over an image set")
    e.add_argument("--model")
    e.add_argument("--key")
    e.add_argument("--set", required=True, help="directory with original/ and generated/ subfolders")
    e.add_argument("--metrics", default="mse,psnr,lpips")
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("export-embeddings", help="identity embeddings of anonymized images under many keys")
    x.add_argument("--model", required=True)
    x.add_argument("--in", dest="inp", required=True)
    x.add_argument("--keys", type=int, default=200)
    x.add_argument("--first-seed", type=int, default=0)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_embeddings)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (UsageError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StateError, DBAFError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
