"""Procedural photo/sketch fixture generation.

Renders small face-like images with identity-specific geometry (head shape,
eye spacing, nose, mouth, hair) in two aligned styles: a smooth shaded
"photo" and a line-drawing "sketch".  Useful for fast end-to-end runs and
tests; everything derives from one seed.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFilter

from .data import Manifest, ManifestEntry, save_manifest

_SS = 4  # supersampling factor for smooth strokes at small sizes


def identity_params(rng):
    """Draw the geometric/chromatic parameters that define one identity."""
    return {
        "face_rx": rng.uniform(0.26, 0.36),
        "face_ry": rng.uniform(0.34, 0.44),
        "face_cy": rng.uniform(0.50, 0.56),
        "eye_y": rng.uniform(0.40, 0.47),
        "eye_dx": rng.uniform(0.10, 0.17),
        "eye_r": rng.uniform(0.025, 0.05),
        "brow_tilt": rng.uniform(-0.03, 0.03),
        "nose_len": rng.uniform(0.10, 0.18),
        "nose_w": rng.uniform(0.03, 0.07),
        "mouth_y": rng.uniform(0.70, 0.78),
        "mouth_w": rng.uniform(0.10, 0.20),
        "mouth_curve": rng.uniform(-0.04, 0.05),
        "hair_drop": rng.uniform(0.16, 0.30),
        "skin": tuple(int(v) for v in rng.integers([170, 130, 110], [235, 195, 175])),
        "hair_tone": int(rng.integers(20, 90)),
        "bg_tone": int(rng.integers(120, 200)),
    }


def _geometry(params, size):
    s = size
    cx = 0.5 * s
    cy = params["face_cy"] * s
    rx = params["face_rx"] * s
    ry = params["face_ry"] * s
    eye_y = params["eye_y"] * s
    eye_dx = params["eye_dx"] * s
    eye_r = max(params["eye_r"] * s, 1.5)
    mouth_y = params["mouth_y"] * s
    mouth_w = params["mouth_w"] * s
    nose_len = params["nose_len"] * s
    return cx, cy, rx, ry, eye_y, eye_dx, eye_r, mouth_y, mouth_w, nose_len


def render_photo(params, size=64) -> np.ndarray:
    """Shaded, softly blurred rendering (the 'photo' style)."""
    s = size * _SS
    cx, cy, rx, ry, eye_y, eye_dx, eye_r, mouth_y, mouth_w, nose_len = _geometry(params, s)
    bg = params["bg_tone"]
    im = Image.new("RGB", (s, s), (bg, bg, min(bg + 30, 255)))
    dr = ImageDraw.Draw(im)
    skin = params["skin"]
    dr.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=skin)
    # hair: dark cap over the upper face
    hair = (params["hair_tone"],) * 3
    drop = params["hair_drop"] * s
    dr.chord([cx - rx, cy - ry, cx + rx, cy - ry + 2 * drop], 180, 360, fill=hair)
    shade = tuple(max(c - 30, 0) for c in skin)
    dr.ellipse([cx - rx, cy + 0.45 * ry, cx + rx, cy + ry], fill=shade)
    for sign in (-1, 1):
        ex = cx + sign * eye_dx
        dr.ellipse([ex - 2.0 * eye_r, eye_y - 1.3 * eye_r, ex + 2.0 * eye_r, eye_y + 1.3 * eye_r],
                   fill=(245, 245, 245))
        dr.ellipse([ex - eye_r, eye_y - eye_r, ex + eye_r, eye_y + eye_r], fill=(40, 30, 30))
    nose = tuple(max(c - 50, 0) for c in skin)
    dr.line([cx, eye_y + 2 * eye_r, cx - params["nose_w"] * s, eye_y + 2 * eye_r + nose_len],
            fill=nose, width=max(_SS, 2))
    mouth = (150, 60, 60)
    curve = params["mouth_curve"] * s
    dr.line([cx - mouth_w, mouth_y, cx, mouth_y + curve, cx + mouth_w, mouth_y],
            fill=mouth, width=max(2 * _SS // 2, 2), joint="curve")
    im = im.filter(ImageFilter.GaussianBlur(radius=_SS * 0.6))
    im = im.resize((size, size), Image.LANCZOS)
    return np.asarray(im, dtype=np.uint8)


def render_sketch(params, size=64) -> np.ndarray:
    """Line-drawing rendering of the same geometry (the 'sketch' style)."""
    s = size * _SS
    cx, cy, rx, ry, eye_y, eye_dx, eye_r, mouth_y, mouth_w, nose_len = _geometry(params, s)
    im = Image.new("RGB", (s, s), (250, 250, 250))
    dr = ImageDraw.Draw(im)
    ink = (25, 25, 25)
    w = max(_SS // 2, 2)
    dr.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], outline=ink, width=w)
    drop = params["hair_drop"] * s
    dr.arc([cx - rx, cy - ry, cx + rx, cy - ry + 2 * drop], 180, 360, fill=ink, width=w)
    # light hatching under the hair line
    for k in range(3):
        y = cy - ry + drop * (0.35 + 0.2 * k)
        dr.line([cx - 0.8 * rx, y, cx + 0.8 * rx, y - params["brow_tilt"] * s], fill=(90, 90, 90),
                width=max(w // 2, 1))
    for sign in (-1, 1):
        ex = cx + sign * eye_dx
        dr.ellipse([ex - 2.0 * eye_r, eye_y - 1.3 * eye_r, ex + 2.0 * eye_r, eye_y + 1.3 * eye_r],
                   outline=ink, width=w)
        dr.ellipse([ex - eye_r, eye_y - eye_r, ex + eye_r, eye_y + eye_r], fill=ink)
        brow_y = eye_y - 3.2 * eye_r
        dr.line([ex - 2.2 * eye_r, brow_y + sign * params["brow_tilt"] * s,
                 ex + 2.2 * eye_r, brow_y - sign * params["brow_tilt"] * s], fill=ink, width=w)
    dr.line([cx, eye_y + 2 * eye_r, cx - params["nose_w"] * s, eye_y + 2 * eye_r + nose_len],
            fill=ink, width=w)
    dr.line([cx - params["nose_w"] * s, eye_y + 2 * eye_r + nose_len,
             cx + 0.02 * s, eye_y + 2 * eye_r + nose_len], fill=ink, width=w)
    curve = params["mouth_curve"] * s
    dr.line([cx - mouth_w, mouth_y, cx, mouth_y + curve, cx + mouth_w, mouth_y],
            fill=ink, width=w, joint="curve")
    im = im.resize((size, size), Image.LANCZOS)
    return np.asarray(im, dtype=np.uint8)


def make_toy_dataset(out_dir, num_train=8, num_test=4, size=64, seed=0) -> Path:
    """Write an aligned photo/sketch dataset with a manifest; returns its path."""
    out_dir = Path(out_dir)
    (out_dir / "photos").mkdir(parents=True, exist_ok=True)
    (out_dir / "sketches").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for k in range(num_train + num_test):
        split = "train" if k < num_train else "test"
        ident = f"id{k:03d}"
        params = identity_params(rng)
        photo_path = out_dir / "photos" / f"{ident}.png"
        sketch_path = out_dir / "sketches" / f"{ident}.png"
        Image.fromarray(render_photo(params, size)).save(photo_path)
        Image.fromarray(render_sketch(params, size)).save(sketch_path)
        entries.append(ManifestEntry(id=ident, photo=photo_path, sketch=sketch_path, split=split))
    return save_manifest(Manifest(entries), out_dir / "manifest.jsonl")
