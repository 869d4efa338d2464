"""Mutual optimization between the translator and the recognizers.

The procedure: train a plain cycle-consistency baseline and synthesize a
fake dataset; then per round, fine-tune both recognizers on real+fake
images, retrain the translator with the identity-perception term supervised
by the fresh recognizers, synthesize the next fake dataset, and evaluate
quality and recognition.  Rounds stop at ``max_rounds`` or when the fused
rank-1 rate stops improving by more than ``stability_epsilon`` (relative).

Every stage writes its artifacts plus a content-hash marker, so re-invoking
on a partially completed output directory skips finished stages and ends in
the same final state as an uninterrupted run.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import file_sha256
from .configio import dataclass_to_dict
from .data import Manifest, PreprocessConfig, load_manifest
from .losses import LossWeights
from .networks import (DiscriminatorConfig, GeneratorConfig, RecognizerConfig,
                       build_recognizer)
from .quality import QualityConfig, evaluate_quality
from .recognition import (FineTuneConfig, fine_tune, load_recognizer, matching_rates,
                          save_recognizer)
from .training import (TrainConfig, load_checkpoint, save_checkpoint, set_requires_grad,
                       synthesize_dataset, train)


@dataclass
class OptimizeConfig:
    max_rounds: int = 2
    stability_epsilon: float = 0.005  # relative fused rank-1 improvement threshold
    seed: int = 0
    eval_every_round: bool = True
    warm_start: bool = False  # start each round's translator from the previous weights
    similarity: str = "cosine"
    fusion_scheme: str = "minmax-mean"
    synth_config: TrainConfig = field(default_factory=TrainConfig)
    finetune_first: FineTuneConfig = field(default_factory=FineTuneConfig.first_stage)
    finetune_next: FineTuneConfig = field(default_factory=FineTuneConfig.subsequent_stage)
    generator_config: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator_config: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    recognizer_config: RecognizerConfig = field(default_factory=RecognizerConfig)
    preprocess_config: PreprocessConfig = field(default_factory=PreprocessConfig)
    quality_config: QualityConfig = field(default_factory=QualityConfig)

    def __post_init__(self):
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if self.stability_epsilon < 0:
            raise ValueError("stability_epsilon must be >= 0")


def toy_optimize_config(seed=0, synth_epochs=3, finetune_iterations=60) -> OptimizeConfig:
    """Fixture-scale settings: 64px images, slim networks, short schedules.

    Runs the whole procedure in minutes on a CPU; use as a template when
    scaling up to real datasets.
    """
    from .losses import TripletConfig

    weights = LossWeights(lambda_cyc=10.0, lambda_ip=1.0, lambda_im=5.0)
    synth = TrainConfig(total_epochs=synth_epochs, constant_lr_epochs=max(synth_epochs // 2, 1),
                        base_lr=2e-4, batch_size=1, buffer_capacity=8, seed=seed,
                        loss_weights=weights)
    triplet = TripletConfig(margin_alpha=0.1, hard_k=4)
    return OptimizeConfig(
        max_rounds=2,
        seed=seed,
        synth_config=synth,
        finetune_first=FineTuneConfig.first_stage(
            base_lr=0.05, iterations=finetune_iterations, triplet=triplet),
        finetune_next=FineTuneConfig.subsequent_stage(
            base_lr=0.01, iterations=finetune_iterations, triplet=triplet),
        generator_config=GeneratorConfig(base_filters=32, num_residual_blocks=3),
        discriminator_config=DiscriminatorConfig(base_filters=32),
        recognizer_config=RecognizerConfig(embedding_dim=32, num_identities=8),
        preprocess_config=PreprocessConfig(target_size=64, flip_probability=0.5),
    )


@dataclass
class RoundRecord:
    """Artifacts and measurements of one optimization round."""

    round_index: int
    synth_checkpoint: str
    phi_photo_checkpoint: str
    phi_sketch_checkpoint: str
    fake_manifest: str
    provenance: dict  # artifact path -> sha256 of the file actually consumed/produced
    quality: dict | None  # direction -> MetricReport dict
    recognition: dict | None  # {"pre": rates, "post": rates}, rates = 3 rank-1 numbers

    def to_dict(self):
        return dataclass_to_dict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def artifacts(self):
        return [self.synth_checkpoint, self.phi_photo_checkpoint,
                self.phi_sketch_checkpoint, self.fake_manifest]


def _stage_seed(seed, name):
    return int(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]).generate_state(1)[0])


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name."""


class _StageRunner:
    """Runs build steps once, skipping those whose artifacts already verify."""

    def __init__(self, out_dir: Path, resume: bool):
        self.out_dir = Path(out_dir)
        self.resume = resume

    def _marker(self, name):
        return self.out_dir / f".stage_{name}.json"

    def completed(self, name, artifacts):
        marker = self._marker(name)
        if not marker.exists():
            return False
        try:
            recorded = json.loads(marker.read_text())["artifacts"]
        except (json.JSONDecodeError, KeyError):
            return False
        for p in artifacts:
            p = Path(p)
            if not p.exists() or recorded.get(str(p)) != file_sha256(p):
                return False
        return True

    def run(self, name, artifacts, build):
        if self.resume and self.completed(name, artifacts):
            return False
        try:
            build()
        except Exception as exc:
            raise StageError(f"stage {name!r} failed: {exc}") from exc
        for p in artifacts:
            if not Path(p).exists():
                raise StageError(f"stage {name!r} did not produce expected artifact {p}")
        self._marker(name).write_text(json.dumps(
            {"artifacts": {str(p): file_sha256(p) for p in artifacts}},
            indent=2, sort_keys=True))
        return True


def _load_frozen_recognizer(path):
    phi = load_recognizer(path)
    phi.eval()
    set_requires_grad(phi, False)
    return phi


def _warm_start_state(config, ckpt_path, generator_config, discriminator_config,
                      preprocess_config):
    """Fresh counters/optimizers/rngs, network weights copied from a checkpoint."""
    from .training import init_train_state

    prev = load_checkpoint(ckpt_path)
    state = init_train_state(config, generator_config, discriminator_config, preprocess_config)
    for role in ("g_x", "g_y", "d_x", "d_y"):
        getattr(state, role).load_state_dict(getattr(prev, role).state_dict())
    return state


def mutual_optimize(manifest: Manifest, config: OptimizeConfig, out_dir, resume=True):
    """Run the full cyclic procedure; returns one RoundRecord per round run.

    Output layout: ``base/`` holds the plain-baseline translator, its fakes
    and the initial recognizers; ``round_{i:03d}/`` holds each round's
    recognizer and translator checkpoints, fakes, and reports.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runner = _StageRunner(out, resume)
    base_dir = out / "base"

    base_weights = replace(config.synth_config.loss_weights, lambda_ip=0.0)
    base_cfg = replace(config.synth_config, loss_weights=base_weights,
                       seed=_stage_seed(config.seed, "base-train"))

    def build_base_train():
        state = train(manifest, base_cfg,
                      generator_config=config.generator_config,
                      discriminator_config=config.discriminator_config,
                      preprocess_config=config.preprocess_config,
                      log_path=base_dir / "train_log.jsonl")
        save_checkpoint(state, base_dir / "synth.ckpt")

    base_dir.mkdir(parents=True, exist_ok=True)
    runner.run("base-train", [base_dir / "synth.ckpt"], build_base_train)

    def build_base_fake():
        state = load_checkpoint(base_dir / "synth.ckpt")
        synthesize_dataset(state, manifest, "both", base_dir / "fake")

    runner.run("base-synthesize", [base_dir / "fake" / "manifest.jsonl"], build_base_fake)

    def build_base_recognizers():
        phi_p = build_recognizer(config.recognizer_config,
                                 seed=_stage_seed(config.seed, "phi-photo-init"))
        phi_s = build_recognizer(config.recognizer_config,
                                 seed=_stage_seed(config.seed, "phi-sketch-init"))
        save_recognizer(phi_p, base_dir / "phi_photo.ckpt")
        save_recognizer(phi_s, base_dir / "phi_sketch.ckpt")

    runner.run("base-recognizers",
               [base_dir / "phi_photo.ckpt", base_dir / "phi_sketch.ckpt"],
               build_base_recognizers)

    records = []
    prev_dir = base_dir
    prev_fused = None
    for i in range(config.max_rounds):
        rdir = out / f"round_{i:03d}"
        rdir.mkdir(parents=True, exist_ok=True)
        ft_cfg = config.finetune_first if i == 0 else config.finetune_next
        prev_fake_path = prev_dir / "fake" / "manifest.jsonl"

        def build_finetune():
            fake_m = load_manifest(prev_fake_path)
            real_train = manifest.subset("train")
            fake_train = fake_m.subset("train")
            for domain in ("photo", "sketch"):
                name = f"phi_{domain}.ckpt"
                phi = load_recognizer(prev_dir / name)
                fine_tune(phi, real_train, fake_train, ft_cfg,
                          seed=_stage_seed(config.seed, f"round{i}-finetune-{domain}"),
                          domain=domain, preprocess_config=config.preprocess_config,
                          log_path=rdir / f"finetune_{domain}_log.jsonl")
                save_recognizer(phi, rdir / name)

        runner.run(f"round{i}-finetune",
                   [rdir / "phi_photo.ckpt", rdir / "phi_sketch.ckpt"], build_finetune)

        def build_synth_train():
            phi_p = _load_frozen_recognizer(rdir / "phi_photo.ckpt")
            phi_s = _load_frozen_recognizer(rdir / "phi_sketch.ckpt")
            cfg = replace(config.synth_config, seed=_stage_seed(config.seed, f"round{i}-train"))
            state = None
            if config.warm_start:
                state = _warm_start_state(cfg, prev_dir / "synth.ckpt",
                                          config.generator_config,
                                          config.discriminator_config,
                                          config.preprocess_config)
            state = train(manifest, cfg, phi_p, phi_s, state=state,
                          generator_config=config.generator_config,
                          discriminator_config=config.discriminator_config,
                          preprocess_config=config.preprocess_config,
                          log_path=rdir / "train_log.jsonl")
            save_checkpoint(state, rdir / "synth.ckpt")

        runner.run(f"round{i}-train", [rdir / "synth.ckpt"], build_synth_train)

        def build_fake():
            state = load_checkpoint(rdir / "synth.ckpt")
            synthesize_dataset(state, manifest, "both", rdir / "fake")

        runner.run(f"round{i}-synthesize", [rdir / "fake" / "manifest.jsonl"], build_fake)

        do_eval = config.eval_every_round or i == config.max_rounds - 1
        quality = None
        recognition = None
        if do_eval:
            def build_eval():
                fake_m = load_manifest(rdir / "fake" / "manifest.jsonl")
                real_test = manifest.subset("test")
                fake_test = fake_m.subset("test")
                q = {
                    "sketch": evaluate_quality(fake_test, real_test,
                                               config.quality_config, column="sketch").to_dict(),
                    "photo": evaluate_quality(fake_test, real_test,
                                              config.quality_config, column="photo").to_dict(),
                }
                with open(rdir / "quality.json", "w", encoding="utf-8") as fh:
                    json.dump(q, fh, indent=2, sort_keys=True)
                pre = matching_rates(real_test, fake_test,
                                     _load_frozen_recognizer(prev_dir / "phi_photo.ckpt"),
                                     _load_frozen_recognizer(prev_dir / "phi_sketch.ckpt"),
                                     config.preprocess_config, config.similarity,
                                     fusion_scheme=config.fusion_scheme)
                post = matching_rates(real_test, fake_test,
                                      _load_frozen_recognizer(rdir / "phi_photo.ckpt"),
                                      _load_frozen_recognizer(rdir / "phi_sketch.ckpt"),
                                      config.preprocess_config, config.similarity,
                                      fusion_scheme=config.fusion_scheme)
                with open(rdir / "recognition.json", "w", encoding="utf-8") as fh:
                    json.dump({"pre": pre, "post": post}, fh, indent=2, sort_keys=True)

            runner.run(f"round{i}-evaluate",
                       [rdir / "quality.json", rdir / "recognition.json"], build_eval)
            with open(rdir / "quality.json", encoding="utf-8") as fh:
                quality = json.load(fh)
            with open(rdir / "recognition.json", encoding="utf-8") as fh:
                recognition = json.load(fh)

        provenance = {}
        for p in (rdir / "synth.ckpt", rdir / "phi_photo.ckpt", rdir / "phi_sketch.ckpt",
                  rdir / "fake" / "manifest.jsonl", prev_dir / "phi_photo.ckpt",
                  prev_dir / "phi_sketch.ckpt"):
            provenance[str(p)] = file_sha256(p)
        record = RoundRecord(
            round_index=i,
            synth_checkpoint=str(rdir / "synth.ckpt"),
            phi_photo_checkpoint=str(rdir / "phi_photo.ckpt"),
            phi_sketch_checkpoint=str(rdir / "phi_sketch.ckpt"),
            fake_manifest=str(rdir / "fake" / "manifest.jsonl"),
            provenance=provenance,
            quality=quality,
            recognition=recognition,
        )
        record.save(rdir / "record.json")
        records.append(record)

        if recognition is not None:
            fused = recognition["post"]["fused"]
            if prev_fused is not None:
                improvement = (fused - prev_fused) / max(prev_fused, 1e-12)
                if improvement < config.stability_epsilon:
                    break
            prev_fused = fused
        prev_dir = rdir
    return records


def evaluate_recognition(real_manifest, fake_manifest, phi_photo_path, phi_sketch_path,
                         protocol="fused", preprocess_config=None, similarity="cosine",
                         fusion_scheme="minmax-mean", k=1):
    """Single-protocol (or all-protocol) rank-k evaluation from checkpoints."""
    if protocol not in ("sketch", "photo", "fused", "all"):
        raise ValueError(f"unknown protocol {protocol!r}")
    rates = matching_rates(real_manifest, fake_manifest,
                           _load_frozen_recognizer(phi_photo_path),
                           _load_frozen_recognizer(phi_sketch_path),
                           preprocess_config, similarity, k=k, fusion_scheme=fusion_scheme)
    if protocol == "all":
        return rates
    key = {"sketch": "sketch_matching", "photo": "photo_matching", "fused": "fused"}[protocol]
    return {key: rates[key]}
