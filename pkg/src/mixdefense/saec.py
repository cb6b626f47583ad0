"""Statistical large-perturbation detector (the LP-defense layer).

Pipeline per image: pseudo-saturation map (RGB) or raw channel (grayscale)
-> fixed 3x3 high-pass residual filter -> histogram of filter responses ->
noise-level score = population variance of the bin counts -> threshold.

Clean natural images concentrate their filter responses near zero (few
occupied bins, high count-variance); heavily perturbed ones spread out
(low count-variance). The flagging direction is measured at calibration
rather than assumed, and the calibration uses uniform noise instead of any
actual attack, which keeps the layer attack-agnostic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

# 3x3 "KB" steganalysis high-pass kernel; annihilates affine image content.
RESIDUAL_KERNEL = 0.25 * np.array(
    [[-1.0, 2.0, -1.0],
     [2.0, -4.0, 2.0],
     [-1.0, 2.0, -1.0]])

DEFAULT_NORM_ORDER = 8.0
DEFAULT_BINS = 256
DEFAULT_BIN_RANGE = (-4.0, 4.0)


class CalibrationError(RuntimeError):
    """Clean score distribution is degenerate; no threshold can be set."""


@dataclass(frozen=True)
class FeatureHistogram:
    counts: np.ndarray          # (L,) non-negative ints, summing to H*W
    bin_range: tuple[float, float]

    @property
    def bin_count(self) -> int:
        return len(self.counts)


def pseudo_saturation(x: np.ndarray, p: float = DEFAULT_NORM_ORDER) -> np.ndarray:
    """Per-pixel p-norm of channel deviations from the channel mean.

    Large p suppresses image content while keeping per-pixel noise exposed.
    Uses |deviation|^p so odd p stays well-defined (identical for even p).
    """
    if p < 1:
        raise ValueError("norm order p must be >= 1")
    if x.ndim != 3 or x.shape[-1] != 3:
        raise ValueError(f"pseudo-saturation requires an (H,W,3) image, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite pixel values")
    x = x.astype(np.float64, copy=False)
    dev = np.abs(x - x.mean(axis=-1, keepdims=True))
    return np.power(np.power(dev, p).sum(axis=-1), 1.0 / p)


def residual_filter(m: np.ndarray) -> np.ndarray:
    """Same-size 2-D cross-correlation with the fixed high-pass kernel.

    Boundary handling is symmetric (edge pixel mirrored), so constant and
    affine inputs map to zero everywhere in the interior.
    """
    if m.ndim != 2:
        raise ValueError(f"residual filter expects a 2-D array, got shape {m.shape}")
    return ndimage.correlate(m.astype(np.float64, copy=False), RESIDUAL_KERNEL, mode="reflect")


def noise_contrast_feature(x: np.ndarray, p: float = DEFAULT_NORM_ORDER) -> np.ndarray:
    """Full feature map for an image: saturation map (RGB) or raw plane (gray).

    Eq-style channel deviations vanish identically for single-channel input,
    so grayscale feeds the raw plane straight into the residual filter.
    """
    if x.ndim != 3:
        raise ValueError(f"expected (H,W,C) image, got {x.shape}")
    if x.shape[-1] == 3:
        plane = pseudo_saturation(x, p)
    elif x.shape[-1] == 1:
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite pixel values")
        plane = x[..., 0].astype(np.float64, copy=False)
    else:
        raise ValueError(f"unsupported channel count {x.shape[-1]}")
    return residual_filter(plane)


def feature_histogram(f: np.ndarray, bins: int = DEFAULT_BINS,
                      bin_range: tuple[float, float] = DEFAULT_BIN_RANGE) -> FeatureHistogram:
    """Clamp values into bin_range, then count into equal-width bins."""
    lo, hi = bin_range
    if bins < 2:
        raise ValueError("need at least 2 bins")
    if not lo < hi:
        raise ValueError("bin_range must satisfy lo < hi")
    v = np.clip(np.asarray(f, dtype=np.float64).ravel(), lo, hi)
    idx = np.floor((v - lo) / (hi - lo) * bins).astype(np.int64)
    idx = np.clip(idx, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    return FeatureHistogram(counts=counts, bin_range=(float(lo), float(hi)))


def nl_score(h: FeatureHistogram) -> float:
    """Noise-level score: population variance of the histogram counts."""
    counts = h.counts.astype(np.float64)
    mu = counts.mean()
    return float(np.mean((counts - mu) ** 2))


@dataclass
class SaecDetector:
    """Calibrated statistical detector; immutable after calibration."""

    p: float
    kernel: np.ndarray
    bins: int
    bin_range: tuple[float, float]
    threshold: float
    direction: str        # "flag_below" or "flag_above"
    calibration: dict = field(default_factory=dict)

    def score(self, x: np.ndarray) -> float:
        return nl_score(feature_histogram(noise_contrast_feature(x, self.p),
                                          self.bins, self.bin_range))


def saec_score(x: np.ndarray, p: float = DEFAULT_NORM_ORDER, bins: int = DEFAULT_BINS,
               bin_range: tuple[float, float] = DEFAULT_BIN_RANGE) -> float:
    return nl_score(feature_histogram(noise_contrast_feature(x, p), bins, bin_range))


def uniform_noise_images(images: np.ndarray, amplitude: float,
                         rng: np.random.Generator) -> np.ndarray:
    """Images plus additive uniform noise in [-amplitude, +amplitude], clipped."""
    noise = rng.uniform(-amplitude, amplitude, size=images.shape)
    return np.clip(images.astype(np.float64) + noise, 0.0, 1.0).astype(np.float32)


def _fpr_threshold(clean_scores: np.ndarray, target_fpr: float, direction: str) -> float:
    """Order-statistic threshold giving clean flag rate <= target_fpr.

    Flagging is strict (score exactly at threshold is NOT flagged), so the
    k-th order statistic with k = floor(fpr*n) bounds the flagged count by k.
    """
    ordered = np.sort(clean_scores)
    n = len(ordered)
    k = int(np.floor(target_fpr * n))
    if direction == "flag_below":
        return float(ordered[min(k, n - 1)])
    return float(ordered[max(n - 1 - k, 0)])


def calibrate(train, noise_amplitudes, target_clean_fpr: float, seed: int,
              p: float = DEFAULT_NORM_ORDER, bins: int = DEFAULT_BINS,
              bin_range: tuple[float, float] = DEFAULT_BIN_RANGE,
              max_images: int = 2000) -> SaecDetector:
    """Calibrate threshold and direction from clean and uniform-noise images.

    No attack is involved: the noisy surrogates stand in for the
    large-perturbation regime, and the threshold sits at the clean-score
    quantile that keeps the clean false-positive rate at or below target.
    """
    if not 0.0 < target_clean_fpr < 1.0:
        raise ValueError("target_clean_fpr must be in (0,1)")
    amplitudes = list(noise_amplitudes)
    if not amplitudes:
        raise ValueError("need at least one noise amplitude")
    rng = np.random.Generator(np.random.PCG64(seed))
    n = min(max_images, len(train))
    sel = rng.choice(len(train), size=n, replace=False)
    images = train.images[sel]

    clean_scores = np.array([saec_score(x, p, bins, bin_range) for x in images])
    if np.ptp(clean_scores) == 0.0:
        raise CalibrationError("clean NL scores are constant; cannot place a threshold")
    noisy_means = {}
    all_noisy = []
    for amp in amplitudes:
        noisy = uniform_noise_images(images, amp, rng)
        scores = np.array([saec_score(x, p, bins, bin_range) for x in noisy])
        noisy_means[float(amp)] = float(scores.mean())
        all_noisy.append(scores)
    noisy_mean = float(np.concatenate(all_noisy).mean())
    clean_mean = float(clean_scores.mean())

    direction = "flag_below" if noisy_mean < clean_mean else "flag_above"
    threshold = _fpr_threshold(clean_scores, target_clean_fpr, direction)
    return SaecDetector(
        p=p, kernel=RESIDUAL_KERNEL.copy(), bins=bins, bin_range=bin_range,
        threshold=threshold, direction=direction,
        calibration={
            "dataset": train.name,
            "n_images": int(n),
            "seed": int(seed),
            "noise_amplitudes": [float(a) for a in amplitudes],
            "noise_model": "additive uniform in [-a,+a], clipped to [0,1]",
            "target_clean_fpr": float(target_clean_fpr),
            "clean_score_mean": clean_mean,
            "noisy_score_mean": noisy_mean,
            "noisy_score_mean_by_amplitude": noisy_means,
        })


@dataclass(frozen=True)
class SaecResult:
    flagged: bool
    score: float


def detect(d: SaecDetector, x: np.ndarray) -> SaecResult:
    """Pure thresholding; a score exactly at the threshold is not flagged."""
    s = d.score(x)
    if d.direction == "flag_below":
        return SaecResult(flagged=bool(s < d.threshold), score=s)
    return SaecResult(flagged=bool(s > d.threshold), score=s)


def save_saec(d: SaecDetector, path) -> None:
    record = {
        "format": "mixdefense-saec-v1",
        "p": d.p,
        "kernel": d.kernel.tolist(),
        "bins": d.bins,
        "bin_range": list(d.bin_range),
        "threshold": d.threshold,
        "direction": d.direction,
        "calibration": d.calibration,
    }
    with open(path, "w") as f:
        json.dump(record, f, indent=1, sort_keys=True)


def load_saec(path) -> SaecDetector:
    with open(path) as f:
        record = json.load(f)
    if record.get("format") != "mixdefense-saec-v1":
        raise ValueError(f"{path}: not a SAEC detector record")
    return SaecDetector(
        p=record["p"], kernel=np.array(record["kernel"]), bins=record["bins"],
        bin_range=tuple(record["bin_range"]), threshold=record["threshold"],
        direction=record["direction"], calibration=record["calibration"])
