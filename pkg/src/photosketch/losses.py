"""Objective terms for translator training and embedder fine-tuning.

All functions are pure and dtype-generic (float32 for training, float64 for
finite-difference verification).  Reductions are means over batch, patch and
pixel positions; identity distances are squared L2 over the embedding axis,
then averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

ADVERSARIAL_MODES = ("lsgan", "log")


@dataclass
class LossWeights:
    """Relative weights of the composite translator objective."""

    lambda_cyc: float = 10.0
    lambda_ip: float = 3e7  # calibrated for raw (unnormalized) fc7-scale embeddings
    lambda_im: float = 5.0

    def __post_init__(self):
        for name in ("lambda_cyc", "lambda_ip", "lambda_im"):
            v = float(getattr(self, name))
            if not (v >= 0.0) or v != v or v == float("inf"):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
            setattr(self, name, v)


@dataclass
class TripletConfig:
    margin_alpha: float = 0.1
    hard_k: int = 4

    def __post_init__(self):
        if not self.margin_alpha > 0:
            raise ValueError(f"margin_alpha must be > 0, got {self.margin_alpha}")
        if self.hard_k < 1:
            raise ValueError(f"hard_k must be >= 1, got {self.hard_k}")


def _check_finite(name, t):
    if not torch.isfinite(torch.as_tensor(t)).all():
        raise ValueError(f"non-finite values in {name}")


def _check_mode(mode):
    if mode not in ADVERSARIAL_MODES:
        raise ValueError(f"unknown adversarial mode {mode!r}, expected one of {ADVERSARIAL_MODES}")


def adversarial_loss_discriminator(scores_real, scores_fake, mode="lsgan"):
    """Critic objective over patch score maps.

    lsgan: E[(D(real)-1)^2 + D(fake)^2] / 2, scores are raw outputs.
    log:   -(E log D(real) + E log(1-D(fake))), scores are probabilities.
    """
    _check_mode(mode)
    _check_finite("scores_real", scores_real)
    _check_finite("scores_fake", scores_fake)
    if mode == "lsgan":
        return 0.5 * ((scores_real - 1.0).square().mean() + scores_fake.square().mean())
    return -(torch.log(scores_real).mean() + torch.log1p(-scores_fake).mean())


def adversarial_loss_generator(scores_fake, mode="lsgan"):
    """Generator side of the adversarial game (non-saturating in log mode).

    lsgan: E[(D(fake)-1)^2];  log: -E log D(fake).
    """
    _check_mode(mode)
    _check_finite("scores_fake", scores_fake)
    if mode == "lsgan":
        return (scores_fake - 1.0).square().mean()
    return -torch.log(scores_fake).mean()


def _mean_l1(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def cycle_loss(x, cyc_x, y, cyc_y):
    """Round-trip pixel penalty: mean|cyc_x - x| + mean|cyc_y - y|."""
    return _mean_l1(cyc_x, x) + _mean_l1(cyc_y, y)


def identity_mapping_loss(gx_of_x, x, gy_of_y, y):
    """Pixel L1 keeping each generator near identity on its own input
    (same mean reduction as cycle_loss)."""
    return _mean_l1(gx_of_x, x) + _mean_l1(gy_of_y, y)


def _embedding_sqdist(fake_emb, real_emb):
    if fake_emb.shape != real_emb.shape:
        raise ValueError(
            f"embedding shape mismatch: {tuple(fake_emb.shape)} vs {tuple(real_emb.shape)}"
        )
    return (fake_emb - real_emb).square().sum(dim=-1).mean()


def identity_perception_loss(fake_photo, real_photo, fake_sketch, real_sketch, phi_p, phi_s):
    """Squared embedding distance between each fake and its real counterpart.

    Real-side embeddings are constants (computed without grad); gradient
    reaches the fakes only, never the embedder parameters.
    """
    with torch.no_grad():
        target_p = phi_p.embed(real_photo)
        target_s = phi_s.embed(real_sketch)
    return (_embedding_sqdist(phi_p.embed(fake_photo), target_p)
            + _embedding_sqdist(phi_s.embed(fake_sketch), target_s))


@dataclass
class LossParts:
    """Individual terms of the translator objective, before weighting."""

    gan_x: object  # scalar tensor or float
    gan_y: object
    cycle: object
    identity_perception: object
    identity_mapping: object

    def as_dict(self):
        return {
            "gan_x": self.gan_x,
            "gan_y": self.gan_y,
            "cycle": self.cycle,
            "identity_perception": self.identity_perception,
            "identity_mapping": self.identity_mapping,
        }


def total_generator_loss(parts: LossParts, weights: LossWeights):
    """gan_x + gan_y + lambda_cyc*cycle + lambda_ip*identity_perception
    + lambda_im*identity_mapping; raises naming the first non-finite term."""
    for name, value in parts.as_dict().items():
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise ValueError(f"non-finite loss term: {name}")
    return (parts.gan_x + parts.gan_y
            + weights.lambda_cyc * parts.cycle
            + weights.lambda_ip * parts.identity_perception
            + weights.lambda_im * parts.identity_mapping)


def triplet_loss(anchor_emb, positive_emb, negative_embs, config: TripletConfig):
    """Hinge on squared embedding distances with hard-negative selection.

    Per negative n: [d(a,p) - d(a,n) + margin]_+ with squared-L2 d; the
    hard_k largest hinge values (ties broken by negative index) are summed.
    """
    if not torch.is_tensor(negative_embs):
        if len(negative_embs) == 0:
            raise ValueError("triplet_loss needs at least one negative")
        negative_embs = torch.stack(list(negative_embs))
    if negative_embs.ndim != 2 or negative_embs.shape[0] == 0:
        raise ValueError("negative_embs must be a nonempty (N, dim) stack")
    if anchor_emb.shape != positive_emb.shape or anchor_emb.shape[-1] != negative_embs.shape[-1]:
        raise ValueError("anchor, positive and negatives must share the embedding dimension")
    d_ap = (anchor_emb - positive_emb).square().sum()
    d_an = (negative_embs - anchor_emb.unsqueeze(0)).square().sum(dim=-1)
    hinge = torch.clamp(d_ap - d_an + config.margin_alpha, min=0.0)
    if hinge.shape[0] > config.hard_k:
        order = torch.argsort(hinge, descending=True, stable=True)
        hinge = hinge[order[: config.hard_k]]
    return hinge.sum()
