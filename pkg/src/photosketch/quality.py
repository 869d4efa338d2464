"""Full-reference image quality indices: SSIM and FSIM on luminance.

SSIM uses the classic Gaussian-window formulation (11x11, sigma 1.5,
k1=0.01, k2=0.03).  FSIM combines phase-congruency similarity from a
log-Gabor filter bank with Scharr gradient-magnitude similarity, weighted
by the maximum phase congruency; chrominance terms are omitted (inputs are
near-grayscale sketches/photos).  All filtering uses reflective boundary
handling; spectral filtering operates on a mirror-extended image.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.fft import fft2, ifft2

_BT601 = np.array([0.299, 0.587, 0.114])

# log-Gabor bank and noise-threshold constants from the standard
# phase-congruency formulation
_PC_MIN_WAVELENGTH = 6.0
_PC_MULT = 2.0
_PC_SIGMA_ON_F = 0.55
_PC_D_THETA_ON_SIGMA = 1.2
_PC_NOISE_K = 2.0
_PC_CUTOFF = 0.5
_PC_G = 10.0
_PC_EPS = 1e-4

_FSIM_T1 = 0.85   # phase-congruency similarity constant
_FSIM_T2 = 160.0  # gradient similarity constant, for a 0..255 luminance scale

_SCHARR_X = np.array([[3, 0, -3], [10, 0, -10], [3, 0, -3]], dtype=np.float64) / 16.0


@dataclass
class QualityConfig:
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_k1: float = 0.01
    ssim_k2: float = 0.03
    fsim_scales: int = 4
    fsim_orientations: int = 4
    dynamic_range: float = 1.0  # for [0,1]-mapped grayscale

    def __post_init__(self):
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise ValueError("ssim_window must be odd and >= 3")
        for name in ("ssim_sigma", "ssim_k1", "ssim_k2", "dynamic_range"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.fsim_scales < 1 or self.fsim_orientations < 1:
            raise ValueError("fsim_scales and fsim_orientations must be >= 1")


def to_luminance(image, dynamic_range=1.0) -> np.ndarray:
    """Convert an image to a 2-D float64 luminance map in [0, dynamic_range].

    Accepts HxW, HxWx3 or 3xHxW arrays; uint8 inputs are rescaled from
    [0,255], float inputs are assumed already in range.  Color is collapsed
    with BT.601 weights.
    """
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) * (dynamic_range / 255.0)
    else:
        arr = arr.astype(np.float64)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3 and arr.shape[-1] == 3:
        return arr @ _BT601
    if arr.ndim == 3 and arr.shape[0] == 3:
        return np.tensordot(_BT601, arr, axes=1)
    raise ValueError(f"cannot interpret image of shape {arr.shape} as luminance")


def _gaussian_window(size, sigma):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _pair_luminance(a, b, config):
    x = to_luminance(a, config.dynamic_range)
    y = to_luminance(b, config.dynamic_range)
    if x.shape != y.shape:
        raise ValueError(f"image shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def ssim(a, b, config=None) -> float:
    """Mean of the local structural-similarity map of two images."""
    config = config or QualityConfig()
    x, y = _pair_luminance(a, b, config)
    if min(x.shape) < config.ssim_window:
        raise ValueError(
            f"image {x.shape} smaller than ssim window {config.ssim_window}"
        )
    win = _gaussian_window(config.ssim_window, config.ssim_sigma)
    blur = lambda im: ndimage.correlate(im, win, mode="reflect")
    mu_x, mu_y = blur(x), blur(y)
    var_x = blur(x * x) - mu_x * mu_x
    var_y = blur(y * y) - mu_y * mu_y
    cov = blur(x * y) - mu_x * mu_y
    L = config.dynamic_range
    c1 = (config.ssim_k1 * L) ** 2
    c2 = (config.ssim_k2 * L) ** 2
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    )
    return float(ssim_map.mean())


# ---------------------------------------------------------------------------
# phase congruency (log-Gabor bank) and FSIM
# ---------------------------------------------------------------------------

def _log_gabor_bank(shape, nscale, norient):
    rows, cols = shape
    fy = np.fft.fftfreq(rows)
    fx = np.fft.fftfreq(cols)
    u, v = np.meshgrid(fx, fy)
    radius = np.hypot(u, v)
    radius[0, 0] = 1.0  # avoid log(0) at DC; the DC gain is zeroed below
    theta = np.arctan2(-v, u)
    lowpass = 1.0 / (1.0 + (radius / 0.45) ** (2 * 15))

    radials = []
    for s in range(nscale):
        f0 = 1.0 / (_PC_MIN_WAVELENGTH * _PC_MULT ** s)
        lg = np.exp(-(np.log(radius / f0) ** 2) / (2.0 * np.log(_PC_SIGMA_ON_F) ** 2))
        lg *= lowpass
        lg[0, 0] = 0.0
        radials.append(lg)

    theta_sigma = np.pi / norient / _PC_D_THETA_ON_SIGMA
    spreads = []
    for o in range(norient):
        angle = o * np.pi / norient
        ds = np.sin(theta) * np.cos(angle) - np.cos(theta) * np.sin(angle)
        dc = np.cos(theta) * np.cos(angle) + np.sin(theta) * np.sin(angle)
        dtheta = np.abs(np.arctan2(ds, dc))
        spreads.append(np.exp(-(dtheta ** 2) / (2.0 * theta_sigma ** 2)))
    return radials, spreads


def phase_congruency(image, nscale=4, norient=4) -> np.ndarray:
    """Phase-congruency map in [0,1] with noise compensation.

    Spectral filtering happens on a mirror-extended copy (reflective
    boundaries); the result is cropped back to the input extent.
    """
    img = np.asarray(image, dtype=np.float64)
    rows, cols = img.shape
    padded = np.pad(img, ((0, rows), (0, cols)), mode="symmetric")
    radials, spreads = _log_gabor_bank(padded.shape, nscale, norient)
    spectrum = fft2(padded)
    n_px = padded.size

    total_energy = np.zeros_like(padded)
    total_an = np.zeros_like(padded)
    for spread in spreads:
        responses = []
        filters = []
        sum_e = np.zeros_like(padded)
        sum_o = np.zeros_like(padded)
        sum_an = np.zeros_like(padded)
        max_an = None
        for s, radial in enumerate(radials):
            filt = radial * spread
            filters.append(filt)
            eo = ifft2(spectrum * filt)
            responses.append(eo)
            an = np.abs(eo)
            sum_an += an
            sum_e += eo.real
            sum_o += eo.imag
            max_an = an if max_an is None else np.maximum(max_an, an)
        x_energy = np.hypot(sum_e, sum_o) + _PC_EPS
        mean_e = sum_e / x_energy
        mean_o = sum_o / x_energy
        energy = np.zeros_like(padded)
        for eo in responses:
            energy += eo.real * mean_e + eo.imag * mean_o
            energy -= np.abs(eo.real * mean_o - eo.imag * mean_e)

        # noise threshold estimated from the finest-scale response, assuming
        # Rayleigh-distributed noise amplitudes
        finest_power = float(np.sum(filters[0] ** 2))
        median_e2n = float(np.median(np.abs(responses[0]) ** 2))
        noise_power = median_e2n / np.log(2.0) / max(finest_power, 1e-300)
        est_sum_an2 = 0.0
        est_sum_aiaj = 0.0
        ifft_filters = [np.real(ifft2(f)) * np.sqrt(n_px) for f in filters]
        for i, fi in enumerate(ifft_filters):
            est_sum_an2 += float(np.sum(fi ** 2))
            for fj in ifft_filters[i + 1:]:
                est_sum_aiaj += float(np.sum(fi * fj))
        noise_energy2 = 2.0 * noise_power * est_sum_an2 + 4.0 * noise_power * est_sum_aiaj
        tau = np.sqrt(max(noise_energy2, 0.0) / 2.0)
        noise_mean = tau * np.sqrt(np.pi / 2.0)
        noise_sigma = np.sqrt(max((2.0 - np.pi / 2.0) * tau ** 2, 0.0))
        threshold = (noise_mean + _PC_NOISE_K * noise_sigma) / 1.7

        # penalize responses spread over few scales
        width = (sum_an / (max_an + _PC_EPS)) / nscale
        weight = 1.0 / (1.0 + np.exp((_PC_CUTOFF - width) * _PC_G))

        total_energy += weight * np.maximum(energy - threshold, 0.0)
        total_an += sum_an

    pc = total_energy / (total_an + _PC_EPS)
    return pc[:rows, :cols]


def _gradient_magnitude(img):
    gx = ndimage.correlate(img, _SCHARR_X, mode="reflect")
    gy = ndimage.correlate(img, _SCHARR_X.T, mode="reflect")
    return np.hypot(gx, gy)


def fsim(a, b, config=None) -> float:
    """Feature-similarity index in [0,1] of two images (luminance only)."""
    config = config or QualityConfig()
    x, y = _pair_luminance(a, b, config)
    # FSIM constants assume a 0..255 luminance scale
    x = x * (255.0 / config.dynamic_range)
    y = y * (255.0 / config.dynamic_range)

    pc1 = phase_congruency(x, config.fsim_scales, config.fsim_orientations)
    pc2 = phase_congruency(y, config.fsim_scales, config.fsim_orientations)
    g1 = _gradient_magnitude(x)
    g2 = _gradient_magnitude(y)

    s_pc = (2 * pc1 * pc2 + _FSIM_T1) / (pc1 ** 2 + pc2 ** 2 + _FSIM_T1)
    s_g = (2 * g1 * g2 + _FSIM_T2) / (g1 ** 2 + g2 ** 2 + _FSIM_T2)
    s_l = s_pc * s_g
    pc_max = np.maximum(pc1, pc2)
    denom = float(pc_max.sum())
    if denom <= 0.0:
        # featureless pair (e.g. two constants): fall back to the unweighted mean
        return float(s_l.mean())
    return float((s_l * pc_max).sum() / denom)


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

@dataclass
class MetricRow:
    id: str
    ssim: float
    fsim: float


@dataclass
class MetricReport:
    per_image: list
    mean_ssim: float
    mean_fsim: float
    count: int

    @classmethod
    def from_rows(cls, rows):
        n = len(rows)
        return cls(
            per_image=list(rows),
            mean_ssim=float(np.mean([r.ssim for r in rows])) if n else float("nan"),
            mean_fsim=float(np.mean([r.fsim for r in rows])) if n else float("nan"),
            count=n,
        )

    def to_dict(self):
        return {
            "per_image": [{"id": r.id, "ssim": r.ssim, "fsim": r.fsim} for r in self.per_image],
            "aggregates": {"mean_ssim": self.mean_ssim, "mean_fsim": self.mean_fsim,
                           "count": self.count},
        }

    @classmethod
    def from_dict(cls, data):
        rows = [MetricRow(r["id"], r["ssim"], r["fsim"]) for r in data["per_image"]]
        return cls.from_rows(rows)

    def save_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def load_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("id,ssim,fsim\n")
            for r in self.per_image:
                fh.write(f"{r.id},{r.ssim:.6f},{r.fsim:.6f}\n")


def evaluate_quality(fake_manifest, real_manifest, config=None, column="sketch") -> MetricReport:
    """Score every generated image against its identity-matched real one.

    ``column`` picks which image of each manifest record is compared
    ("sketch" for photo->sketch synthesis, "photo" for sketch->photo).
    """
    from .data import load_image  # local import to avoid a cycle at module load

    if column not in ("photo", "sketch"):
        raise ValueError(f"column must be 'photo' or 'sketch', got {column!r}")
    config = config or QualityConfig()
    real_by_id = {e.id: e for e in real_manifest.entries}
    rows = []
    for fake_entry in fake_manifest.entries:
        real_entry = real_by_id.get(fake_entry.id)
        if real_entry is None:
            raise ValueError(f"identity {fake_entry.id!r} missing from the real manifest")
        fake_img = load_image(getattr(fake_entry, column))
        real_img = load_image(getattr(real_entry, column))
        rows.append(MetricRow(
            id=fake_entry.id,
            ssim=ssim(fake_img, real_img, config),
            fsim=fsim(fake_img, real_img, config),
        ))
    return MetricReport.from_rows(rows)


def write_summary_csv(reports, path):
    """Aggregate table over labeled reports, e.g. direction/dataset labels."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("label,mean_ssim,mean_fsim,count\n")
        for label in sorted(reports):
            rep = reports[label]
            fh.write(f"{label},{rep.mean_ssim:.6f},{rep.mean_fsim:.6f},{rep.count}\n")
