"""Command-line interface.

Subcommands cover the whole toolkit: translator training, dataset
synthesis, recognizer fine-tuning, quality and recognition evaluation, the
full cyclic optimization, and checkpoint inspection.  A JSON config file
(``--config``) supplies any of the sections listed in ``CONFIG_SECTIONS``;
command-line flags override file values.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, file_sha256, load_tensor_file
from .configio import ConfigError, dataclass_from_dict
from .data import (Manifest, ManifestEntry, ManifestError, PreprocessConfig,
                   load_manifest)
from .networks import (DiscriminatorConfig, GeneratorConfig, RecognizerConfig,
                       build_recognizer)
from .pipeline import OptimizeConfig, evaluate_recognition, mutual_optimize, toy_optimize_config
from .quality import QualityConfig, evaluate_quality
from .recognition import FineTuneConfig, fine_tune, load_recognizer, save_recognizer
from .training import TrainConfig, load_checkpoint, save_checkpoint, synthesize_dataset, train

log = logging.getLogger("photosketch")

CONFIG_SECTIONS = {
    "preprocess": PreprocessConfig,
    "generator": GeneratorConfig,
    "discriminator": DiscriminatorConfig,
    "recognizer": RecognizerConfig,
    "train": TrainConfig,
    "finetune": FineTuneConfig,
    "optimize": OptimizeConfig,
    "quality": QualityConfig,
}


def load_config_document(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    for key in doc:
        if key not in CONFIG_SECTIONS:
            raise ConfigError(f"unknown config key: {key}")
    return doc


def _section(args, name, overrides=None, base=None):
    """Build one config section: file values, then non-None flag overrides."""
    doc = load_config_document(args.config) if args.config else {}
    data = dict(doc.get(name, {}))
    if base is not None:
        merged = dict(base)
        merged.update(data)
        data = merged
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    return dataclass_from_dict(CONFIG_SECTIONS[name], data, context=name)


def _require_out(args):
    if not args.out:
        raise ConfigError("--out is required for this command")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _path_to_quality_manifest(path, column):
    """Accept either a manifest file or a directory of images paired by stem."""
    path = Path(path)
    if path.is_file():
        return load_manifest(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir()
                       if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
        if not files:
            raise ManifestError(f"{path}: no images found")
        entries = [ManifestEntry(id=p.stem, photo=p, sketch=p, split="test") for p in files]
        return Manifest(entries)
    raise ManifestError(f"{path}: not a manifest file or image directory")


# ---------------------------------------------------------------------------
# subcommand handlers
# ---------------------------------------------------------------------------

def _cmd_train(args):
    out = _require_out(args)
    manifest = load_manifest(args.manifest)
    cfg = _section(args, "train", {"seed": args.seed, "total_epochs": args.epochs})
    phi_p = load_recognizer(args.phi_photo) if args.phi_photo else None
    phi_s = load_recognizer(args.phi_sketch) if args.phi_sketch else None
    if (phi_p is None) != (phi_s is None):
        raise ConfigError("--phi-photo and --phi-sketch must be given together")
    state = train(
        manifest, cfg, phi_p, phi_s,
        generator_config=_section(args, "generator"),
        discriminator_config=_section(args, "discriminator"),
        preprocess_config=_section(args, "preprocess"),
        resume_from=args.resume,
        log_path=out / "train_log.jsonl",
        checkpoint_path=out / "synth.ckpt",
    )
    save_checkpoint(state, out / "synth.ckpt")
    log.info("trained %d epochs (%d steps); checkpoint at %s",
             state.epoch, state.step, out / "synth.ckpt")
    print(out / "synth.ckpt")
    return 0


def _cmd_synthesize(args):
    out = _require_out(args)
    state = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    fake = synthesize_dataset(state, manifest, args.direction, out, split=args.split,
                              preprocess_config=_section(args, "preprocess"))
    log.info("synthesized %d records into %s", len(fake), out)
    print(out / "manifest.jsonl")
    return 0


def _cmd_finetune(args):
    out = _require_out(args)
    real = load_manifest(args.real_manifest)
    fake = load_manifest(args.fake_manifest)
    if args.split:
        real, fake = real.subset(args.split), fake.subset(args.split)
    stage_base = (FineTuneConfig.first_stage() if args.stage == "first"
                  else FineTuneConfig.subsequent_stage())
    cfg = _section(args, "finetune",
                   {"iterations": args.iterations, "stage": args.stage},
                   base={"base_lr": stage_base.base_lr, "stepsize": stage_base.stepsize,
                         "gamma": stage_base.gamma, "iterations": stage_base.iterations,
                         "stage": stage_base.stage})
    if args.init:
        phi = load_recognizer(args.init)
    else:
        phi = build_recognizer(_section(args, "recognizer"), seed=args.seed or 0)
    fine_tune(phi, real, fake, cfg, seed=args.seed or 0, domain=args.domain,
              preprocess_config=_section(args, "preprocess"),
              log_path=out / f"finetune_{args.domain}_log.jsonl")
    ckpt = out / f"phi_{args.domain}.ckpt"
    save_recognizer(phi, ckpt)
    log.info("fine-tuned %s recognizer for %d iterations", args.domain, cfg.iterations)
    print(ckpt)
    return 0


def _cmd_evaluate_quality(args):
    fake = _path_to_quality_manifest(args.fake, args.column)
    real = _path_to_quality_manifest(args.real, args.column)
    report = evaluate_quality(fake, real, _section(args, "quality"), column=args.column)
    print(json.dumps({"mean_ssim": report.mean_ssim, "mean_fsim": report.mean_fsim,
                      "count": report.count}, sort_keys=True))
    if args.out:
        out = Path(args.out)
        if out.suffix != ".json":
            out.mkdir(parents=True, exist_ok=True)
            out = out / "quality.json"
        report.save_json(out)
        log.info("wrote %s", out)
    return 0


def _cmd_evaluate_recognition(args):
    real = load_manifest(args.real_manifest)
    fake = load_manifest(args.fake_manifest)
    if args.split:
        real, fake = real.subset(args.split), fake.subset(args.split)
    rates = evaluate_recognition(real, fake, args.phi_photo, args.phi_sketch,
                                 protocol=args.protocol,
                                 preprocess_config=_section(args, "preprocess"),
                                 similarity=args.similarity, k=args.rank)
    print(json.dumps(rates, sort_keys=True))
    if args.out:
        out = Path(args.out)
        if out.suffix != ".json":
            out.mkdir(parents=True, exist_ok=True)
            out = out / "recognition.json"
        with open(out, "w", encoding="utf-8") as fh:
            json.dump(rates, fh, indent=2, sort_keys=True)
    return 0


def _cmd_optimize(args):
    out = _require_out(args)
    manifest = load_manifest(args.manifest)
    doc = load_config_document(args.config) if args.config else {}
    base = toy_optimize_config() if args.toy else OptimizeConfig()
    from .configio import dataclass_to_dict

    data = dataclass_to_dict(base)
    data.update(doc.get("optimize", {}))
    for key, value in (("max_rounds", args.max_rounds), ("seed", args.seed)):
        if value is not None:
            data[key] = value
    cfg = dataclass_from_dict(OptimizeConfig, data, context="optimize")
    records = mutual_optimize(manifest, cfg, out, resume=not args.no_resume)
    summary = [{"round": r.round_index,
                "recognition": r.recognition and r.recognition["post"]} for r in records]
    print(json.dumps(summary, sort_keys=True))
    return 0


def _cmd_inspect(args):
    kind, meta, tensors = load_tensor_file(args.path)
    total = sum(int(np.prod(arr.shape)) for arr in tensors.values())
    info = {
        "path": str(args.path),
        "kind": kind,
        "tensors": len(tensors),
        "total_elements": total,
        "sha256": file_sha256(args.path),
        "meta_keys": sorted(meta.keys()),
    }
    for key in ("epoch", "step"):
        if key in meta:
            info[key] = meta[key]
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; sections: " +
                        ", ".join(CONFIG_SECTIONS))
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--log-level", default="warning",
                        choices=["debug", "info", "warning", "error"])

    parser = argparse.ArgumentParser(prog="photosketch",
                                     description="Face photo/sketch synthesis + recognition toolkit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("train", parents=[common], help="train the translator")
    p.add_argument("--manifest", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--phi-photo", default=None, help="photo recognizer checkpoint")
    p.add_argument("--phi-sketch", default=None, help="sketch recognizer checkpoint")
    p.add_argument("--resume", default=None, help="resume from a translator checkpoint")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("synthesize", parents=[common], help="generate fake images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--direction", default="both", choices=["P2S", "S2P", "both"])
    p.add_argument("--split", default=None, choices=["train", "test"])
    p.set_defaults(func=_cmd_synthesize)

    p = sub.add_parser("finetune-recognizer", parents=[common],
                       help="triplet fine-tuning on real+fake images")
    p.add_argument("--real-manifest", required=True)
    p.add_argument("--fake-manifest", required=True)
    p.add_argument("--domain", required=True, choices=["photo", "sketch"])
    p.add_argument("--stage", default="first", choices=["first", "subsequent"])
    p.add_argument("--split", default="train", choices=["train", "test"])
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--init", default=None, help="starting recognizer checkpoint")
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("evaluate-quality", parents=[common],
                       help="SSIM/FSIM of fakes against reals")
    p.add_argument("--fake", required=True, help="manifest or image directory")
    p.add_argument("--real", required=True, help="manifest or image directory")
    p.add_argument("--column", default="sketch", choices=["photo", "sketch"])
    p.set_defaults(func=_cmd_evaluate_quality)

    p = sub.add_parser("evaluate-recognition", parents=[common],
                       help="rank-k matching rates")
    p.add_argument("--real-manifest", required=True)
    p.add_argument("--fake-manifest", required=True)
    p.add_argument("--phi-photo", required=True)
    p.add_argument("--phi-sketch", required=True)
    p.add_argument("--protocol", default="all", choices=["sketch", "photo", "fused", "all"])
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--similarity", default="cosine", choices=["cosine", "neg-L2"])
    p.add_argument("--rank", type=int, default=1)
    p.set_defaults(func=_cmd_evaluate_recognition)

    p = sub.add_parser("optimize", parents=[common],
                       help="full mutual optimization of translator and recognizers")
    p.add_argument("--manifest", required=True)
    p.add_argument("--max-rounds", type=int, default=None)
    p.add_argument("--toy", action="store_true",
                   help="start from fixture-scale defaults instead of full-scale ones")
    p.add_argument("--no-resume", action="store_true",
                   help="ignore completed stages in the output directory")
    p.set_defaults(func=_cmd_optimize)

    p = sub.add_parser("inspect-checkpoint", parents=[common],
                       help="print checkpoint header and content hash")
    p.add_argument("path")
    p.set_defaults(func=_cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints usage itself
        return int(exc.code) if exc.code else 0
    if not getattr(args, "command", None):
        parser.print_help()
        return 2
    logging.basicConfig(level=getattr(logging, args.log_level.upper()),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return int(args.func(args) or 0)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ManifestError, CheckpointError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


cli = main

if __name__ == "__main__":
    sys.exit(main())
