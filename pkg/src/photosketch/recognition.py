"""Embedder fine-tuning and cross-domain identification.

Fine-tuning trains a recognizer with the hinge-on-squared-distance triplet
objective over batches drawn from real and generated images of the same
identities (a real image and its generated counterpart count as the same
class, so positives may cross the real/fake boundary).  Matching runs the
two retrieval protocols -- query sketches against generated sketches, and
generated photos against real photos -- plus score-level fusion of both.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .checkpoint import load_tensor_file, save_tensor_file
from .configio import dataclass_from_dict, dataclass_to_dict
from .data import PreprocessConfig, load_image, preprocess
from .losses import TripletConfig, triplet_loss
from .networks import RecognizerConfig, build_recognizer
from .quality import to_luminance

SIMILARITIES = ("cosine", "neg-L2")
FUSION_SCHEMES = ("minmax-mean", "sum", "zscore-mean")


@dataclass
class FineTuneConfig:
    """Step-policy SGD settings for triplet fine-tuning."""

    base_lr: float = 0.3
    stepsize: int = 100
    gamma: float = 0.96
    iterations: int = 600
    momentum: float = 0.9
    weight_decay: float = 2e-4
    triplet: TripletConfig = field(default_factory=TripletConfig)
    stage: str = "first"
    batch_identities: int = 4
    images_per_identity: int = 2

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if self.iterations <= 0:
            raise ValueError("iterations must be > 0")
        if self.stage not in ("first", "subsequent"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.batch_identities < 2:
            raise ValueError("batch_identities must be >= 2 (negatives need another identity)")

    @classmethod
    def first_stage(cls, **overrides):
        base = dict(base_lr=0.3, stepsize=100, gamma=0.96, iterations=600, stage="first")
        base.update(overrides)
        return cls(**base)

    @classmethod
    def subsequent_stage(cls, **overrides):
        base = dict(base_lr=0.01, stepsize=200, gamma=0.96, iterations=2000, stage="subsequent")
        base.update(overrides)
        return cls(**base)


def finetune_lr_at(iteration: int, config: FineTuneConfig) -> float:
    """Step policy: base_lr * gamma ** floor(iteration / stepsize)."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return config.base_lr * config.gamma ** (iteration // config.stepsize)


def sample_triplets(labels, rng):
    """Per-batch triplet layout: every image anchors once, its positive is a
    uniformly chosen same-label image, every other-label image is a
    candidate negative.  Anchors lacking a positive or negative are skipped.
    Returns (anchor_idx, positive_idx, negative_idx_list) tuples.
    """
    labels = list(labels)
    triplets = []
    for a, lab in enumerate(labels):
        positives = [j for j, l in enumerate(labels) if l == lab and j != a]
        negatives = [j for j, l in enumerate(labels) if l != lab]
        if not positives or not negatives:
            continue
        p = positives[int(rng.integers(len(positives)))]
        triplets.append((a, p, negatives))
    return triplets


def mined_batch_loss(embeddings, labels, triplet_config, rng):
    """Sum of per-anchor hard-mined triplet losses over one batch.

    Returns (loss, n_anchors); loss is a scalar tensor on the embeddings'
    graph.  This is exactly the objective fine_tune descends.
    """
    triplets = sample_triplets(labels, rng)
    if not triplets:
        return embeddings.sum() * 0.0, 0
    total = None
    for a, p, negs in triplets:
        term = triplet_loss(embeddings[a], embeddings[p], embeddings[negs], triplet_config)
        total = term if total is None else total + term
    return total, len(triplets)


def _image_pool(real_manifest, fake_manifest, domain):
    column = "photo" if "photo" in domain else "sketch"
    pool = {}
    for manifest in (real_manifest, fake_manifest):
        if manifest is None:
            continue
        for e in manifest.entries:
            pool.setdefault(e.id, []).append(getattr(e, column))
    return pool


def fine_tune(recognizer, real_manifest, fake_manifest, config: FineTuneConfig, seed=0,
              domain="photo", preprocess_config=None, log_path=None, on_iteration=None):
    """SGD-with-momentum triplet fine-tuning over real+generated images.

    The pool groups images by identity across both manifests; each
    iteration samples `batch_identities` identities with
    `images_per_identity` images each, embeds them, and descends the
    hard-mined triplet objective.  The recognizer is modified in place and
    returned.
    """
    if domain not in ("photo", "sketch"):
        raise ValueError(f"domain must be 'photo' or 'sketch', got {domain!r}")
    pool = _image_pool(real_manifest, fake_manifest, domain)
    if len(pool) < 2:
        raise ValueError(f"need at least 2 identities to form triplets, got {len(pool)}")
    multi = sorted(ident for ident, paths in pool.items() if len(paths) >= 2)
    if not multi:
        raise ValueError("no identity has >= 2 images; positives are impossible")
    preprocess_config = preprocess_config or PreprocessConfig()
    rng = np.random.default_rng(seed)
    opt = torch.optim.SGD(recognizer.parameters(), lr=config.base_lr,
                          momentum=config.momentum, weight_decay=config.weight_decay)
    recognizer.train()
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for it in range(config.iterations):
            lr = finetune_lr_at(it, config)
            for group in opt.param_groups:
                group["lr"] = lr
            n_ids = min(config.batch_identities, len(multi))
            chosen = rng.choice(len(multi), size=n_ids, replace=False)
            images, labels = [], []
            for idx in chosen:
                ident = multi[int(idx)]
                paths = pool[ident]
                take = min(config.images_per_identity, len(paths))
                picks = rng.choice(len(paths), size=take, replace=False)
                for j in picks:
                    images.append(preprocess(load_image(paths[int(j)]), preprocess_config))
                    labels.append(ident)
            batch = torch.stack(images)
            embeddings = recognizer.embed(batch)
            loss, n_anchors = mined_batch_loss(embeddings, labels, config.triplet, rng)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            mean_loss = float(loss.item()) / max(n_anchors, 1)
            if log_fh:
                log_fh.write(json.dumps({"iteration": it, "lr": lr,
                                         "triplet_loss": float(loss.item()),
                                         "mean_triplet_loss": mean_loss},
                                        sort_keys=True) + "\n")
            if on_iteration:
                on_iteration(it, lr, float(loss.item()), mean_loss)
    finally:
        if log_fh:
            log_fh.close()
    recognizer.eval()
    return recognizer


def save_recognizer(recognizer, path):
    """Write a recognizer checkpoint (config echo + parameters)."""
    return save_tensor_file(path, "recognizer",
                            {"config": dataclass_to_dict(recognizer.config)},
                            dict(recognizer.state_dict()))


def load_recognizer(path):
    kind, meta, tensors = load_tensor_file(path)
    if kind != "recognizer":
        raise ValueError(f"{path}: expected a recognizer checkpoint, found kind={kind!r}")
    config = dataclass_from_dict(RecognizerConfig, meta["config"])
    net = build_recognizer(config)
    net.load_state_dict({k: torch.from_numpy(v).clone() for k, v in tensors.items()})
    net.eval()
    return net


# ---------------------------------------------------------------------------
# galleries and score matrices
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingGallery:
    """Identity-labeled embedding vectors from one domain."""

    ids: list
    domains: list
    embeddings: np.ndarray  # (N, dim)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings)
        if self.embeddings.ndim != 2:
            self.embeddings = self.embeddings.reshape(len(self.ids), -1)
        if len(self.ids) != len(self.domains) or len(self.ids) != self.embeddings.shape[0]:
            raise ValueError("ids, domains and embeddings must have matching lengths")

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self):
        return self.embeddings.shape[1]

    def save(self, path):
        save_tensor_file(path, "embedding_gallery",
                         {"ids": list(self.ids), "domains": list(self.domains)},
                         {"embeddings": self.embeddings.astype(np.float32)})

    @classmethod
    def load(cls, path):
        kind, meta, tensors = load_tensor_file(path)
        if kind != "embedding_gallery":
            raise ValueError(f"{path}: expected an embedding_gallery file, found {kind!r}")
        return cls(ids=meta["ids"], domains=meta["domains"], embeddings=tensors["embeddings"])


def embed_manifest(recognizer, manifest, domain, preprocess_config=None,
                   batch_size=16) -> EmbeddingGallery:
    """Embed every image of one manifest column; deterministic (eval mode)."""
    if domain not in ("photo", "sketch", "fake-photo", "fake-sketch"):
        raise ValueError(f"unknown domain {domain!r}")
    column = "photo" if "photo" in domain else "sketch"
    preprocess_config = preprocess_config or PreprocessConfig()
    recognizer.eval()
    ids, chunks = [], []
    entries = manifest.entries
    with torch.no_grad():
        for start in range(0, len(entries), batch_size):
            part = entries[start:start + batch_size]
            batch = torch.stack([
                preprocess(load_image(getattr(e, column)), preprocess_config) for e in part
            ])
            chunks.append(recognizer.embed(batch).numpy())
            ids.extend(e.id for e in part)
    embeddings = (np.concatenate(chunks, axis=0) if chunks
                  else np.zeros((0, recognizer.embedding_dim), dtype=np.float32))
    return EmbeddingGallery(ids=ids, domains=[domain] * len(ids), embeddings=embeddings)


@dataclass
class ScoreMatrix:
    """Probe x gallery similarity scores with identity labels."""

    scores: np.ndarray
    probe_ids: list
    gallery_ids: list

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (len(self.probe_ids), len(self.gallery_ids)):
            raise ValueError(
                f"score matrix shape {self.scores.shape} does not match labels "
                f"({len(self.probe_ids)} probes, {len(self.gallery_ids)} gallery)"
            )
        if not np.isfinite(self.scores).all():
            raise ValueError("score matrix contains non-finite entries")

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("probe_id," + ",".join(str(g) for g in self.gallery_ids) + "\n")
            for pid, row in zip(self.probe_ids, self.scores):
                fh.write(str(pid) + "," + ",".join(f"{v:.8f}" for v in row) + "\n")


def score_matrix(probes: EmbeddingGallery, gallery: EmbeddingGallery,
                 similarity="cosine") -> ScoreMatrix:
    if similarity not in SIMILARITIES:
        raise ValueError(f"similarity must be one of {SIMILARITIES}, got {similarity!r}")
    if probes.dim != gallery.dim:
        raise ValueError(f"embedding dim mismatch: probes {probes.dim} vs gallery {gallery.dim}")
    p = probes.embeddings.astype(np.float64)
    g = gallery.embeddings.astype(np.float64)
    if similarity == "cosine":
        pn = p / np.maximum(np.linalg.norm(p, axis=1, keepdims=True), 1e-12)
        gn = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
        scores = pn @ gn.T
    else:
        d2 = np.square(p).sum(1)[:, None] + np.square(g).sum(1)[None, :] - 2.0 * (p @ g.T)
        scores = -np.sqrt(np.maximum(d2, 0.0))
    return ScoreMatrix(scores=scores, probe_ids=list(probes.ids), gallery_ids=list(gallery.ids))


def rank_k_accuracy(matrix: ScoreMatrix, k: int) -> float:
    """Fraction of probes whose true identity is among the k best gallery
    scores; score ties resolve to the lower gallery index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    gallery_ids = list(matrix.gallery_ids)
    known = set(gallery_ids)
    arange = np.arange(len(gallery_ids))
    hits = 0
    for pid, row in zip(matrix.probe_ids, matrix.scores):
        if pid not in known:
            raise ValueError(f"probe identity {pid!r} absent from the gallery")
        order = np.lexsort((arange, -row))
        if any(gallery_ids[j] == pid for j in order[:k]):
            hits += 1
    return hits / len(matrix.probe_ids)


def _minmax(scores):
    lo, hi = scores.min(), scores.max()
    if hi - lo <= 0:
        return np.zeros_like(scores)
    return (scores - lo) / (hi - lo)


def _zscore(scores):
    sd = scores.std()
    if sd <= 0:
        return np.zeros_like(scores)
    return (scores - scores.mean()) / sd


def fuse_scores(a: ScoreMatrix, b: ScoreMatrix, scheme="minmax-mean") -> ScoreMatrix:
    """Combine two protocols' score matrices over identical probe/gallery labels."""
    if scheme not in FUSION_SCHEMES:
        raise ValueError(f"scheme must be one of {FUSION_SCHEMES}, got {scheme!r}")
    if a.scores.shape != b.scores.shape:
        raise ValueError(f"shape mismatch: {a.scores.shape} vs {b.scores.shape}")
    if list(a.probe_ids) != list(b.probe_ids) or list(a.gallery_ids) != list(b.gallery_ids):
        raise ValueError("probe/gallery label orders differ between the two matrices")
    if scheme == "minmax-mean":
        fused = 0.5 * (_minmax(a.scores) + _minmax(b.scores))
    elif scheme == "sum":
        fused = a.scores + b.scores
    else:
        fused = 0.5 * (_zscore(a.scores) + _zscore(b.scores))
    return ScoreMatrix(scores=fused, probe_ids=list(a.probe_ids), gallery_ids=list(a.gallery_ids))


# ---------------------------------------------------------------------------
# matching protocols (query sketch -> photo dataset, both directions + fusion)
# ---------------------------------------------------------------------------

def matching_rates(real_manifest, fake_manifest, phi_p, phi_s, preprocess_config=None,
                   similarity="cosine", k=1, fusion_scheme="minmax-mean"):
    """Rank-k rates of both retrieval protocols and their fusion.

    sketch-matching: real query sketches against generated sketches.
    photo-matching:  generated photos against real photos.
    Entries are aligned by sorted identity so the two matrices share label
    order and can be fused elementwise.
    """
    from .data import Manifest  # lazy: avoid import cycle in type-only usage

    real_sorted = Manifest(sorted(real_manifest.entries, key=lambda e: e.id))
    fake_sorted = Manifest(sorted(fake_manifest.entries, key=lambda e: e.id))
    probes_sketch = embed_manifest(phi_s, real_sorted, "sketch", preprocess_config)
    gallery_sketch = embed_manifest(phi_s, fake_sorted, "fake-sketch", preprocess_config)
    probes_photo = embed_manifest(phi_p, fake_sorted, "fake-photo", preprocess_config)
    gallery_photo = embed_manifest(phi_p, real_sorted, "photo", preprocess_config)

    sketch_m = score_matrix(probes_sketch, gallery_sketch, similarity)
    photo_m = score_matrix(probes_photo, gallery_photo, similarity)
    fused_m = fuse_scores(sketch_m, photo_m, fusion_scheme)
    return {
        "sketch_matching": rank_k_accuracy(sketch_m, k),
        "photo_matching": rank_k_accuracy(photo_m, k),
        "fused": rank_k_accuracy(fused_m, k),
    }


# ---------------------------------------------------------------------------
# eigenface baseline
# ---------------------------------------------------------------------------

def _flatten_images(images):
    rows = [to_luminance(img).ravel() for img in images]
    return np.stack(rows).astype(np.float64)


def eigenface_match(train_photos, probes, gallery, num_components,
                    probe_ids=None, gallery_ids=None) -> ScoreMatrix:
    """Classic PCA-subspace matcher: project onto the top principal
    components of the training photos, score by negative Euclidean distance
    in coefficient space.  Rank-deficient training data truncates the basis.
    """
    train = _flatten_images(train_photos)
    if num_components < 1 or num_components > train.shape[0]:
        raise ValueError(
            f"num_components must be in [1, {train.shape[0]}], got {num_components}"
        )
    mean = train.mean(axis=0)
    centered = train - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    tol = svals.max() * max(centered.shape) * np.finfo(np.float64).eps if svals.size else 0.0
    rank = int((svals > tol).sum())
    basis = vt[: min(num_components, max(rank, 1))]

    proj_probes = (_flatten_images(probes) - mean) @ basis.T
    proj_gallery = (_flatten_images(gallery) - mean) @ basis.T
    d2 = (np.square(proj_probes).sum(1)[:, None] + np.square(proj_gallery).sum(1)[None, :]
          - 2.0 * (proj_probes @ proj_gallery.T))
    scores = -np.sqrt(np.maximum(d2, 0.0))
    probe_ids = probe_ids if probe_ids is not None else [str(i) for i in range(len(proj_probes))]
    gallery_ids = (gallery_ids if gallery_ids is not None
                   else [str(i) for i in range(len(proj_gallery))])
    return ScoreMatrix(scores=scores, probe_ids=list(probe_ids), gallery_ids=list(gallery_ids))
