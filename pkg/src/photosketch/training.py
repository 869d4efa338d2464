"""Translator training loop: alternating generator/critic updates, learning
rate schedule, replay buffers, logging, checkpointing, and dataset synthesis.

Determinism contract: all stochastic choices (shuffle order, flips, buffer
swaps) are drawn from named numpy generators owned by the TrainState and
serialized into checkpoints, so a resumed run continues the exact sequence
an uninterrupted run would have produced.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import losses as L
from .checkpoint import load_tensor_file, save_tensor_file
from .configio import dataclass_from_dict, dataclass_to_dict
from .data import (Manifest, ManifestEntry, PreprocessConfig, batch_iterator,
                   denormalize, load_pair, save_manifest, stack_pairs)
from .networks import (DiscriminatorConfig, GeneratorConfig, build_discriminator,
                       build_generator)

DIRECTIONS = ("P2S", "S2P", "both")
IDENTITY_MAPPING_MODES = ("literal", "target-domain")


@dataclass
class TrainConfig:
    total_epochs: int = 200
    constant_lr_epochs: int = 100
    base_lr: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    batch_size: int = 1
    buffer_capacity: int = 50
    seed: int = 0
    loss_weights: L.LossWeights = field(default_factory=L.LossWeights)
    adversarial_mode: str = "lsgan"
    identity_mapping_mode: str = "literal"

    def __post_init__(self):
        if self.constant_lr_epochs > self.total_epochs:
            raise ValueError("constant_lr_epochs must be <= total_epochs")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.buffer_capacity < 0:
            raise ValueError("buffer_capacity must be >= 0")
        if self.adversarial_mode not in L.ADVERSARIAL_MODES:
            raise ValueError(f"unknown adversarial_mode {self.adversarial_mode!r}")
        if self.identity_mapping_mode not in IDENTITY_MAPPING_MODES:
            raise ValueError(f"unknown identity_mapping_mode {self.identity_mapping_mode!r}")


def lr_at_epoch(epoch: int, config: TrainConfig) -> float:
    """Constant for the first constant_lr_epochs, then linear decay to 0."""
    if not 0 <= epoch < config.total_epochs:
        raise ValueError(f"epoch {epoch} out of range [0, {config.total_epochs})")
    if epoch < config.constant_lr_epochs:
        return config.base_lr
    span = config.total_epochs - config.constant_lr_epochs
    return config.base_lr * (config.total_epochs - epoch) / span


class ImageBuffer:
    """Replay pool of past generated images for critic updates.

    While filling, every query stores its input and returns it unchanged.
    Once full, half the queries return the fresh image; the other half
    return a uniformly chosen stored image and swap the fresh one in.
    """

    def __init__(self, capacity: int, rng=None, seed=0):
        self.capacity = int(capacity)
        self.images = []
        self.rng = rng if rng is not None else np.random.default_rng(seed)

    def query(self, fresh: torch.Tensor) -> torch.Tensor:
        if self.capacity == 0:
            return fresh
        if len(self.images) < self.capacity:
            self.images.append(fresh.detach().clone())
            return fresh
        if self.rng.random() < 0.5:
            return fresh
        i = int(self.rng.integers(self.capacity))
        out = self.images[i]
        self.images[i] = fresh.detach().clone()
        return out

    def query_batch(self, fresh_batch: torch.Tensor) -> torch.Tensor:
        return torch.stack([self.query(img) for img in fresh_batch])


def buffer_query(buffer: ImageBuffer, fresh: torch.Tensor) -> torch.Tensor:
    return buffer.query(fresh)


@dataclass
class StepLosses:
    """Every individual term of one optimization step, as plain floats."""

    step: int
    epoch: int
    lr: float
    gan_x: float
    gan_y: float
    cycle: float
    identity_perception: float
    identity_mapping: float
    total_generator: float
    disc_x: float
    disc_y: float

    def as_dict(self):
        return dataclass_to_dict(self)


class TrainState:
    """Everything the loop mutates: networks, optimizers, buffers, counters, rngs."""

    def __init__(self, g_x, g_y, d_x, d_y, opt_g, opt_d_x, opt_d_y,
                 buffer_sketch, buffer_photo, train_config,
                 generator_config, discriminator_config, preprocess_config,
                 data_rng, epoch=0, step=0):
        self.g_x = g_x
        self.g_y = g_y
        self.d_x = d_x
        self.d_y = d_y
        self.opt_g = opt_g
        self.opt_d_x = opt_d_x
        self.opt_d_y = opt_d_y
        self.buffer_sketch = buffer_sketch
        self.buffer_photo = buffer_photo
        self.train_config = train_config
        self.generator_config = generator_config
        self.discriminator_config = discriminator_config
        self.preprocess_config = preprocess_config
        self.data_rng = data_rng
        self.epoch = epoch
        self.step = step

    def set_lr(self, lr: float):
        for opt in (self.opt_g, self.opt_d_x, self.opt_d_y):
            for group in opt.param_groups:
                group["lr"] = lr

    def current_lr(self) -> float:
        return self.opt_g.param_groups[0]["lr"]

    def generator_parameters(self):
        return list(self.g_x.parameters()) + list(self.g_y.parameters())


def init_train_state(train_config: TrainConfig, generator_config=None,
                     discriminator_config=None, preprocess_config=None) -> TrainState:
    generator_config = generator_config or GeneratorConfig()
    discriminator_config = discriminator_config or DiscriminatorConfig()
    preprocess_config = preprocess_config or PreprocessConfig()
    seeds = np.random.SeedSequence(train_config.seed).generate_state(7)
    g_x = build_generator(generator_config, seed=int(seeds[0]))
    g_y = build_generator(generator_config, seed=int(seeds[1]))
    d_x = build_discriminator(discriminator_config, seed=int(seeds[2]))
    d_y = build_discriminator(discriminator_config, seed=int(seeds[3]))
    betas = (train_config.adam_beta1, train_config.adam_beta2)
    opt_g = torch.optim.Adam(list(g_x.parameters()) + list(g_y.parameters()),
                             lr=train_config.base_lr, betas=betas)
    opt_d_x = torch.optim.Adam(d_x.parameters(), lr=train_config.base_lr, betas=betas)
    opt_d_y = torch.optim.Adam(d_y.parameters(), lr=train_config.base_lr, betas=betas)
    buffer_sketch = ImageBuffer(train_config.buffer_capacity,
                                rng=np.random.default_rng(int(seeds[4])))
    buffer_photo = ImageBuffer(train_config.buffer_capacity,
                               rng=np.random.default_rng(int(seeds[5])))
    data_rng = np.random.default_rng(int(seeds[6]))
    return TrainState(g_x, g_y, d_x, d_y, opt_g, opt_d_x, opt_d_y,
                      buffer_sketch, buffer_photo, train_config,
                      generator_config, discriminator_config, preprocess_config,
                      data_rng)


def set_requires_grad(module, flag: bool):
    for p in module.parameters():
        p.requires_grad_(flag)


def _scores(discriminator, images, mode):
    out = discriminator(images)
    return torch.sigmoid(out) if mode == "log" else out


def generator_substep(state: TrainState, photos, sketches, phi_p=None, phi_s=None):
    """Joint update of both generators on the composite objective.

    Returns (parts, total_float, fake_sketch, fake_photo); fakes are
    detached, for the subsequent critic updates.
    """
    cfg = state.train_config
    weights = cfg.loss_weights
    mode = cfg.adversarial_mode
    set_requires_grad(state.d_x, False)
    set_requires_grad(state.d_y, False)

    fake_sketch = state.g_x(photos)
    fake_photo = state.g_y(sketches)
    cyc_photo = state.g_y(fake_sketch)
    cyc_sketch = state.g_x(fake_photo)

    gan_x = L.adversarial_loss_generator(_scores(state.d_y, fake_sketch, mode), mode)
    gan_y = L.adversarial_loss_generator(_scores(state.d_x, fake_photo, mode), mode)
    cyc = L.cycle_loss(photos, cyc_photo, sketches, cyc_sketch)

    use_ip = phi_p is not None and phi_s is not None and weights.lambda_ip > 0
    if use_ip:
        ip = L.identity_perception_loss(fake_photo, photos, fake_sketch, sketches, phi_p, phi_s)
    else:
        ip = torch.zeros((), dtype=photos.dtype)

    if cfg.identity_mapping_mode == "literal":
        im = L.identity_mapping_loss(fake_sketch, photos, fake_photo, sketches)
    else:  # feed each generator its own target-domain input
        im = L.identity_mapping_loss(state.g_x(sketches), sketches, state.g_y(photos), photos)

    parts = L.LossParts(gan_x=gan_x, gan_y=gan_y, cycle=cyc,
                        identity_perception=ip, identity_mapping=im)
    total = L.total_generator_loss(parts, weights)
    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    state.opt_g.step()

    set_requires_grad(state.d_x, True)
    set_requires_grad(state.d_y, True)
    return parts, fake_sketch.detach(), fake_photo.detach()


def discriminator_substep(state: TrainState, photos, sketches, fake_sketch, fake_photo):
    """Critic updates on real images vs buffer-queried fakes; D_Y then D_X."""
    mode = state.train_config.adversarial_mode

    buffered_sketch = state.buffer_sketch.query_batch(fake_sketch)
    loss_d_y = L.adversarial_loss_discriminator(
        _scores(state.d_y, sketches, mode), _scores(state.d_y, buffered_sketch, mode), mode)
    if not torch.isfinite(loss_d_y):
        raise RuntimeError("non-finite loss term: disc_y")
    state.opt_d_y.zero_grad(set_to_none=True)
    loss_d_y.backward()
    state.opt_d_y.step()

    buffered_photo = state.buffer_photo.query_batch(fake_photo)
    loss_d_x = L.adversarial_loss_discriminator(
        _scores(state.d_x, photos, mode), _scores(state.d_x, buffered_photo, mode), mode)
    if not torch.isfinite(loss_d_x):
        raise RuntimeError("non-finite loss term: disc_x")
    state.opt_d_x.zero_grad(set_to_none=True)
    loss_d_x.backward()
    state.opt_d_x.step()
    return float(loss_d_x.item()), float(loss_d_y.item())


def train_step(state: TrainState, batch, phi_p=None, phi_s=None) -> StepLosses:
    """One optimization step: generators jointly, then D_Y, then D_X.

    Embedder parameters are left untouched; the identity-perception branch
    is skipped entirely when lambda_ip == 0 or no embedders are supplied,
    making such runs bit-identical to a plain cycle-consistency run.
    """
    photos, sketches = stack_pairs(batch) if isinstance(batch, list) else batch
    parts, fake_sketch, fake_photo = generator_substep(state, photos, sketches, phi_p, phi_s)
    disc_x, disc_y = discriminator_substep(state, photos, sketches, fake_sketch, fake_photo)

    weights = state.train_config.loss_weights
    rec = {name: float(torch.as_tensor(v).item()) for name, v in parts.as_dict().items()}
    total = (rec["gan_x"] + rec["gan_y"] + weights.lambda_cyc * rec["cycle"]
             + weights.lambda_ip * rec["identity_perception"]
             + weights.lambda_im * rec["identity_mapping"])
    state.step += 1
    return StepLosses(step=state.step, epoch=state.epoch, lr=state.current_lr(),
                      gan_x=rec["gan_x"], gan_y=rec["gan_y"], cycle=rec["cycle"],
                      identity_perception=rec["identity_perception"],
                      identity_mapping=rec["identity_mapping"],
                      total_generator=total, disc_x=disc_x, disc_y=disc_y)


def train(manifest: Manifest, config: TrainConfig, phi_p=None, phi_s=None, *,
          generator_config=None, discriminator_config=None, preprocess_config=None,
          state=None, resume_from=None, log_path=None, checkpoint_path=None,
          on_step=None) -> TrainState:
    """Run epochs [state.epoch, total_epochs) of translator training.

    Supply ``resume_from`` (a checkpoint path) or an explicit ``state`` to
    continue a run.  ``log_path`` appends one JSON record per step;
    ``checkpoint_path`` is rewritten at every epoch boundary.
    """
    if state is None:
        if resume_from is not None:
            state = load_checkpoint(resume_from)
        else:
            state = init_train_state(config, generator_config, discriminator_config,
                                     preprocess_config)
    cfg = state.train_config
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for epoch in range(state.epoch, cfg.total_epochs):
            state.set_lr(lr_at_epoch(epoch, cfg))
            for batch in batch_iterator(manifest, "train", cfg.batch_size, shuffle=True,
                                        config=state.preprocess_config, training=True,
                                        rng=state.data_rng):
                rec = train_step(state, batch, phi_p, phi_s)
                if log_fh:
                    log_fh.write(json.dumps(rec.as_dict(), sort_keys=True) + "\n")
                if on_step:
                    on_step(rec)
            state.epoch = epoch + 1
            if checkpoint_path:
                save_checkpoint(state, checkpoint_path)
    finally:
        if log_fh:
            log_fh.close()
    return state


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

_NET_ROLES = ("g_x", "g_y", "d_x", "d_y")


def _optimizer_tensors(prefix, opt, params):
    out = {}
    for i, p in enumerate(params):
        st = opt.state.get(p)
        if not st:
            continue
        out[f"{prefix}.{i}.step"] = torch.as_tensor(st["step"], dtype=torch.float64)
        out[f"{prefix}.{i}.exp_avg"] = st["exp_avg"]
        out[f"{prefix}.{i}.exp_avg_sq"] = st["exp_avg_sq"]
    return out


def _restore_optimizer(prefix, opt, params, tensors):
    for i, p in enumerate(params):
        key = f"{prefix}.{i}.step"
        if key not in tensors:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(tensors[key].reshape(()))),
            "exp_avg": torch.from_numpy(tensors[f"{prefix}.{i}.exp_avg"]).clone(),
            "exp_avg_sq": torch.from_numpy(tensors[f"{prefix}.{i}.exp_avg_sq"]).clone(),
        }


def save_checkpoint(state: TrainState, path) -> Path:
    """Write the full training state; round-trips bit-exactly."""
    tensors = {}
    for role in _NET_ROLES:
        for name, value in getattr(state, role).state_dict().items():
            tensors[f"{role}.{name}"] = value
    tensors.update(_optimizer_tensors("opt_g", state.opt_g, state.generator_parameters()))
    tensors.update(_optimizer_tensors("opt_d_x", state.opt_d_x, list(state.d_x.parameters())))
    tensors.update(_optimizer_tensors("opt_d_y", state.opt_d_y, list(state.d_y.parameters())))
    for bname in ("buffer_sketch", "buffer_photo"):
        buf = getattr(state, bname)
        for i, img in enumerate(buf.images):
            tensors[f"{bname}.{i:04d}"] = img
    meta = {
        "train_config": dataclass_to_dict(state.train_config),
        "generator_config": dataclass_to_dict(state.generator_config),
        "discriminator_config": dataclass_to_dict(state.discriminator_config),
        "preprocess_config": dataclass_to_dict(state.preprocess_config),
        "epoch": state.epoch,
        "step": state.step,
        "buffer_sizes": {
            "buffer_sketch": len(state.buffer_sketch.images),
            "buffer_photo": len(state.buffer_photo.images),
        },
        "rng": {
            "data": state.data_rng.bit_generator.state,
            "buffer_sketch": state.buffer_sketch.rng.bit_generator.state,
            "buffer_photo": state.buffer_photo.rng.bit_generator.state,
        },
    }
    return save_tensor_file(path, "train_state", meta, tensors)


def load_checkpoint(path) -> TrainState:
    kind, meta, tensors = load_tensor_file(path)
    if kind != "train_state":
        raise ValueError(f"{path}: expected a train_state checkpoint, found kind={kind!r}")
    train_config = dataclass_from_dict(TrainConfig, meta["train_config"])
    generator_config = dataclass_from_dict(GeneratorConfig, meta["generator_config"])
    discriminator_config = dataclass_from_dict(DiscriminatorConfig, meta["discriminator_config"])
    preprocess_config = dataclass_from_dict(PreprocessConfig, meta["preprocess_config"])
    state = init_train_state(train_config, generator_config, discriminator_config,
                             preprocess_config)
    for role in _NET_ROLES:
        net = getattr(state, role)
        sd = {name[len(role) + 1:]: torch.from_numpy(arr).clone()
              for name, arr in tensors.items() if name.startswith(role + ".")}
        net.load_state_dict(sd)
    _restore_optimizer("opt_g", state.opt_g, state.generator_parameters(), tensors)
    _restore_optimizer("opt_d_x", state.opt_d_x, list(state.d_x.parameters()), tensors)
    _restore_optimizer("opt_d_y", state.opt_d_y, list(state.d_y.parameters()), tensors)
    for bname in ("buffer_sketch", "buffer_photo"):
        buf = getattr(state, bname)
        buf.images = [torch.from_numpy(tensors[f"{bname}.{i:04d}"]).clone()
                      for i in range(meta["buffer_sizes"][bname])]
        buf.rng.bit_generator.state = meta["rng"][bname]
    state.data_rng.bit_generator.state = meta["rng"]["data"]
    state.epoch = meta["epoch"]
    state.step = meta["step"]
    return state


# ---------------------------------------------------------------------------
# dataset synthesis
# ---------------------------------------------------------------------------

def synthesize_dataset(state: TrainState, manifest: Manifest, direction: str,
                       out_dir, split=None, preprocess_config=None) -> Manifest:
    """Generate one fake image per source image and write a pairing manifest.

    Each output record keeps the identity and pairs whatever was generated
    with the real counterpart: for P2S the record is (real photo, fake
    sketch); for S2P (fake photo, real sketch); for `both`, both fakes.
    Evaluation-mode inference: rerunning a checkpoint reproduces the PNGs
    byte-for-byte.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    config = preprocess_config or state.preprocess_config
    out_dir = Path(out_dir)
    entries = [e for e in manifest.entries if split is None or e.split == split]
    make_sketch = direction in ("P2S", "both")
    make_photo = direction in ("S2P", "both")
    if make_sketch:
        (out_dir / "fake_sketch").mkdir(parents=True, exist_ok=True)
    if make_photo:
        (out_dir / "fake_photo").mkdir(parents=True, exist_ok=True)
    state.g_x.eval()
    state.g_y.eval()
    new_entries = []
    with torch.no_grad():
        for e in entries:
            pair = load_pair(e, config, training=False)
            photo_path, sketch_path = e.photo, e.sketch
            if make_sketch:
                fake = state.g_x(pair.photo.unsqueeze(0))[0]
                sketch_path = out_dir / "fake_sketch" / f"{e.id}.png"
                Image.fromarray(denormalize(fake)).save(sketch_path)
            if make_photo:
                fake = state.g_y(pair.sketch.unsqueeze(0))[0]
                photo_path = out_dir / "fake_photo" / f"{e.id}.png"
                Image.fromarray(denormalize(fake)).save(photo_path)
            new_entries.append(ManifestEntry(id=e.id, photo=Path(photo_path),
                                             sketch=Path(sketch_path), split=e.split))
    state.g_x.train()
    state.g_y.train()
    fake_manifest = Manifest(new_entries)
    save_manifest(fake_manifest, out_dir / "manifest.jsonl")
    return fake_manifest
