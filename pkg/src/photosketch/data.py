"""Paired photo/sketch dataset handling: manifests, preprocessing, batching.

A dataset is described by a JSON-lines manifest, one record per line with
fields ``id``, ``photo``, ``sketch``, ``split``.  Image paths are resolved
relative to the manifest file.  Photos and sketches are stored as ordinary
8-bit RGB PNG/JPEG files; grayscale sketches are expanded to 3 channels on
load.  Preprocessing maps 8-bit images to float tensors in [-1, 1].
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

SPLITS = ("train", "test")
_REQUIRED_FIELDS = ("id", "photo", "sketch", "split")


class ManifestError(ValueError):
    """Malformed manifest: bad record, missing file, duplicate id."""


class ImageDecodeError(ValueError):
    """Image file exists but could not be decoded."""


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    photo: Path
    sketch: Path
    split: str


@dataclass
class Manifest:
    entries: list

    def __len__(self):
        return len(self.entries)

    def subset(self, split):
        """New Manifest containing only entries of the given split."""
        if split not in SPLITS:
            raise ManifestError(f"unknown split {split!r}, expected one of {SPLITS}")
        return Manifest([e for e in self.entries if e.split == split])

    def identities(self, split=None):
        return [e.id for e in self.entries if split is None or e.split == split]

    def by_id(self, split=None):
        return {e.id: e for e in self.entries if split is None or e.split == split}


def load_manifest(path, check_files=True) -> Manifest:
    """Parse and validate a JSON-lines manifest.

    Validation: required fields present, split names known, ids unique
    within each split, no id shared between train and test, and (unless
    ``check_files`` is off) every referenced image file exists.  Errors
    carry the offending line number or path.
    """
    path = Path(path)
    root = path.parent
    entries = []
    seen = {s: set() for s in SPLITS}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON record: {exc}") from exc
            for field_name in _REQUIRED_FIELDS:
                if field_name not in rec:
                    raise ManifestError(f"{path}:{lineno}: missing field {field_name!r}")
            split = rec["split"]
            if split not in SPLITS:
                raise ManifestError(
                    f"{path}:{lineno}: unknown split {split!r}, expected one of {SPLITS}"
                )
            ident = str(rec["id"])
            if ident in seen[split]:
                raise ManifestError(f"{path}:{lineno}: duplicate id {ident!r} in split {split!r}")
            seen[split].add(ident)
            photo = root / rec["photo"]
            sketch = root / rec["sketch"]
            if check_files:
                for p in (photo, sketch):
                    if not p.is_file():
                        raise ManifestError(f"{path}:{lineno}: image file not found: {p}")
            entries.append(ManifestEntry(id=ident, photo=photo, sketch=sketch, split=split))
    overlap = seen["train"] & seen["test"]
    if overlap:
        raise ManifestError(
            f"{path}: identities present in both train and test: {sorted(overlap)[:5]}"
        )
    return Manifest(entries)


def save_manifest(manifest, path):
    """Write a manifest as JSON-lines; image paths stored relative to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    root = path.parent
    with open(path, "w", encoding="utf-8") as fh:
        for e in manifest.entries:
            rec = {
                "id": e.id,
                "photo": os.path.relpath(e.photo, root),
                "sketch": os.path.relpath(e.sketch, root),
                "split": e.split,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


@dataclass
class PreprocessConfig:
    """Target size, augmentation probability; value mapping is fixed [0,255]->[-1,1]."""

    target_size: int = 256
    flip_probability: float = 0.5

    def __post_init__(self):
        if self.target_size < 16 or self.target_size % 2 != 0:
            raise ValueError(f"target_size must be >= 16 and even, got {self.target_size}")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValueError(f"flip_probability must be in [0,1], got {self.flip_probability}")


@dataclass
class ImagePair:
    """Aligned photo+sketch of one identity, preprocessed to [-1,1] tensors."""

    id: str
    photo: torch.Tensor
    sketch: torch.Tensor


def load_image(path) -> np.ndarray:
    """Decode an image file to a HxWx3 uint8 array (grayscale is expanded)."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from exc


def normalize(image: np.ndarray) -> torch.Tensor:
    """uint8 HxWx3 -> float32 3xHxW in [-1, 1]; 0 -> -1.0 and 255 -> +1.0 exactly."""
    t = torch.from_numpy(np.array(image, dtype=np.uint8)).permute(2, 0, 1).float()
    return t / 127.5 - 1.0


def denormalize(tensor: torch.Tensor) -> np.ndarray:
    """float 3xHxW in [-1, 1] -> uint8 HxWx3; inverse of `normalize` on the 8-bit lattice."""
    t = (tensor.detach().float() + 1.0) * 127.5
    t = t.round().clamp(0, 255).to(torch.uint8)
    return t.permute(1, 2, 0).numpy()


def preprocess(image, config: PreprocessConfig, training=False, rng=None, flip=None) -> torch.Tensor:
    """Resize (bilinear) to target_size, map to [-1,1], optionally flip horizontally.

    ``flip`` overrides the random draw; when ``training`` and flip is None
    the decision is drawn from ``rng`` with ``config.flip_probability``.
    Evaluation mode (training=False, flip unset) is fully deterministic.
    """
    t = normalize(image)
    s = config.target_size
    if t.shape[-2:] != (s, s):
        t = F.interpolate(t.unsqueeze(0), size=(s, s), mode="bilinear", align_corners=False)[0]
    if flip is None:
        flip = False
        if training and config.flip_probability > 0:
            if rng is None:
                raise ValueError("training-mode preprocessing needs an rng for flip decisions")
            flip = bool(rng.random() < config.flip_probability)
    if flip:
        t = torch.flip(t, dims=[-1])
    return t


def preprocess_pair(photo_img, sketch_img, config, training=False, rng=None):
    """Preprocess a pixel-aligned pair with one shared flip decision."""
    flip = False
    if training and config.flip_probability > 0:
        if rng is None:
            raise ValueError("training-mode preprocessing needs an rng for flip decisions")
        flip = bool(rng.random() < config.flip_probability)
    photo = preprocess(photo_img, config, flip=flip)
    sketch = preprocess(sketch_img, config, flip=flip)
    if photo.shape != sketch.shape:
        raise ValueError(f"photo/sketch shape mismatch: {photo.shape} vs {sketch.shape}")
    return photo, sketch


def load_pair(entry: ManifestEntry, config, training=False, rng=None) -> ImagePair:
    photo, sketch = preprocess_pair(
        load_image(entry.photo), load_image(entry.sketch), config, training=training, rng=rng
    )
    return ImagePair(id=entry.id, photo=photo, sketch=sketch)


def batch_iterator(manifest, split, batch_size, shuffle=True, seed=0,
                   config=None, training=False, rng=None):
    """Yield lists of ImagePair covering the split exactly once per pass.

    A fixed ``seed`` (or caller-owned ``rng``) makes the shuffle order and
    flip decisions reproducible.  shuffle=False preserves manifest order.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    entries = manifest.subset(split).entries
    if not entries:
        raise ManifestError(f"split {split!r} is empty")
    if config is None:
        config = PreprocessConfig()
    if rng is None:
        rng = np.random.default_rng(seed)
    order = rng.permutation(len(entries)) if shuffle else np.arange(len(entries))
    for start in range(0, len(entries), batch_size):
        idx = order[start:start + batch_size]
        yield [load_pair(entries[i], config, training=training, rng=rng) for i in idx]


def stack_pairs(batch):
    """Collate a list of ImagePair into (photos, sketches) batch tensors."""
    photos = torch.stack([p.photo for p in batch])
    sketches = torch.stack([p.sketch for p in batch])
    return photos, sketches
