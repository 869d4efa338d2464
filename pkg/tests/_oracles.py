"""Independent oracles shared by the unit and acceptance suites.

Everything here is deliberately naive (loops, explicit sorting, central
finite differences) so it cannot share a bug with the implementation paths
it checks.
"""

import numpy as np
import torch


def central_difference(param, make_loss, index, eps=1e-4):
    """Two-sided difference quotient of make_loss() w.r.t. one coordinate."""
    flat = param.reshape(-1)
    with torch.no_grad():
        orig = flat[index].item()
        flat[index] = orig + eps
        f_plus = float(make_loss())
        flat[index] = orig - eps
        f_minus = float(make_loss())
        flat[index] = orig
    return (f_plus - f_minus) / (2.0 * eps)


def assert_gradient_matches(param, make_loss, n_coords=10, eps=1e-4, rtol=1e-4, seed=0):
    """Check the analytic gradient of make_loss() w.r.t. `param` against
    central finite differences on a random slice of coordinates."""
    if param.grad is not None:
        param.grad = None
    loss = make_loss()
    loss.backward()
    analytic = param.grad.detach().reshape(-1).clone()
    rng = np.random.default_rng(seed)
    coords = rng.choice(param.numel(), size=min(n_coords, param.numel()), replace=False)
    for i in coords:
        i = int(i)
        fd = central_difference(param, make_loss, i, eps)
        an = float(analytic[i])
        denom = max(abs(an), abs(fd), 1e-6)
        rel = abs(an - fd) / denom
        assert rel < rtol, f"coord {i}: analytic {an} vs finite-difference {fd} (rel {rel:.2e})"


def brute_force_triplet(anchor, positive, negatives, margin, k):
    """Exhaustive hard-mined triplet value: all hinges, sort, top-k sum."""
    a = np.asarray(anchor, dtype=np.float64)
    p = np.asarray(positive, dtype=np.float64)
    d_ap = float(((a - p) ** 2).sum())
    hinges = []
    for n in np.asarray(negatives, dtype=np.float64):
        d_an = float(((a - n) ** 2).sum())
        hinges.append(max(d_ap - d_an + margin, 0.0))
    hinges.sort(reverse=True)
    return float(sum(hinges[:k]))


def brute_force_rank_k(scores, probe_ids, gallery_ids, k):
    """Sort-based rank-k accuracy with lowest-gallery-index tie breaking."""
    hits = 0
    for row, pid in zip(np.asarray(scores), probe_ids):
        ranked = sorted(range(len(gallery_ids)), key=lambda j: (-row[j], j))
        if pid in [gallery_ids[j] for j in ranked[:k]]:
            hits += 1
    return hits / len(probe_ids)


def brute_force_scores(probes, gallery, similarity):
    """Double-loop similarity matrix."""
    P, G = len(probes), len(gallery)
    out = np.zeros((P, G))
    for i in range(P):
        for j in range(G):
            p, g = np.asarray(probes[i], float), np.asarray(gallery[j], float)
            if similarity == "cosine":
                out[i, j] = (p @ g) / max(np.linalg.norm(p) * np.linalg.norm(g), 1e-24)
            else:
                out[i, j] = -np.linalg.norm(p - g)
    return out


def two_sample_pca_projection(images):
    """Closed-form one-component PCA of exactly two flattened samples.

    The single principal direction is the normalized difference of the two
    samples; projections are the signed half-distances +/- ||x1-x2||/2.
    """
    x0 = np.asarray(images[0], dtype=np.float64).ravel()
    x1 = np.asarray(images[1], dtype=np.float64).ravel()
    direction = (x1 - x0) / np.linalg.norm(x1 - x0)
    mean = (x0 + x1) / 2.0
    return np.array([(x0 - mean) @ direction, (x1 - mean) @ direction]), direction, mean
