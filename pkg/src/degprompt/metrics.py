"""Image metrics, estimator accuracy reports and severity-monotonicity checks."""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .degradation import apply_recipe, gaussian_kernel, resize_bicubic
from .imaging import check_image, load_image
from .prompts import DEGRADATION_TYPES, N_INTERVALS

__all__ = [
    "PAPER_ACCURACY",
    "psnr",
    "ssim",
    "luma",
    "AccuracyReport",
    "accuracy_report",
    "evaluate_estimator",
    "InsufficientStratificationError",
    "MonotonicityError",
    "MonotonicityReport",
    "monotonicity_report",
]

# Full-scale reference accuracies (blur, noise, JPEG) reported for the
# original decoder; kept for side-by-side display only.
PAPER_ACCURACY = {"blur": 0.63, "noise": 0.65, "jpeg": 0.69}

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW_SIGMA = 1.5


def _same_shape(a, b):
    a = check_image(a, name="a")
    b = check_image(b, name="b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    """PSNR in dB for [0, 1] images; ``math.inf`` when they are identical."""
    a, b = _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def luma(img):
    """Rec.601 luma of an RGB image; single-channel images pass through."""
    img = check_image(img)
    if img.shape[2] == 1:
        return img[:, :, 0]
    return 0.299 * img[:, :, 0] + 0.587 * img[:, :, 1] + 0.114 * img[:, :, 2]


def ssim(a, b):
    """Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5) on luma, dynamic range 1."""
    a, b = _same_shape(a, b)
    x, y = luma(a), luma(b)
    g = gaussian_kernel(SSIM_WINDOW_SIGMA)
    win = np.outer(g, g)
    size = win.shape[0]
    if x.shape[0] < size or x.shape[1] < size:
        raise ValueError(f"images must be at least {size}x{size} for SSIM")

    def filt(z):
        return np.einsum("ijkl,kl->ij", sliding_window_view(z, win.shape), win)

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x ** 2
    syy = filt(y * y) - mu_y ** 2
    sxy = filt(x * y) - mu_x * mu_y
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


@dataclass
class AccuracyReport:
    per_type_accuracy: tuple
    confusion: np.ndarray  # (3, 4, 4): [type, true, predicted]
    n: int
    majority_baseline: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        for t in range(len(DEGRADATION_TYPES)):
            m = self.confusion[t]
            if int(m.sum()) != self.n:
                raise ValueError("confusion matrix does not sum to n")
            if not math.isclose(self.per_type_accuracy[t], np.trace(m) / self.n, abs_tol=1e-12):
                raise ValueError("accuracy disagrees with the confusion trace")

    def to_dict(self):
        return {
            "n": self.n,
            "per_type_accuracy": dict(zip(DEGRADATION_TYPES, self.per_type_accuracy)),
            "majority_baseline": dict(zip(DEGRADATION_TYPES, self.majority_baseline)),
            "reference_accuracy": PAPER_ACCURACY,
            "confusion": {t: self.confusion[i].tolist() for i, t in enumerate(DEGRADATION_TYPES)},
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self):
        lines = [f"n = {self.n}",
                 f"{'type':<8}{'accuracy':>10}{'majority':>10}{'reference':>11}"]
        for i, t in enumerate(DEGRADATION_TYPES):
            lines.append(f"{t:<8}{self.per_type_accuracy[i]:>10.4f}"
                         f"{self.majority_baseline[i]:>10.4f}{PAPER_ACCURACY[t]:>11.2f}")
        for i, t in enumerate(DEGRADATION_TYPES):
            lines.append(f"\n{t} confusion (rows true, cols predicted)")
            for k, row in enumerate(self.confusion[i]):
                lines.append(f"  {k} " + " ".join(f"{int(v):>6d}" for v in row))
        return "\n".join(lines)


def accuracy_report(y_true, y_pred):
    """Build an :class:`AccuracyReport` from ``(n, 3)`` interval arrays."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape or y_true.ndim != 2 or y_true.shape[1] != 3:
        raise ValueError(f"expected matching (n, 3) arrays, got {y_true.shape}, {y_pred.shape}")
    n = y_true.shape[0]
    if n == 0:
        raise ValueError("cannot report on an empty split")
    confusion = np.zeros((3, N_INTERVALS, N_INTERVALS), dtype=np.int64)
    for t in range(3):
        np.add.at(confusion[t], (y_true[:, t], y_pred[:, t]), 1)
    acc = tuple(float(np.trace(confusion[t]) / n) for t in range(3))
    majority = tuple(float(np.bincount(y_true[:, t], minlength=N_INTERVALS).max() / n) for t in range(3))
    return AccuracyReport(acc, confusion, n, majority)


def _predict_chunk(args):
    from .estimator import estimate

    paths, params = args
    return [estimate(load_image(p), params).intervals for p in paths]


def evaluate_estimator(records, params, root, split="val", workers=1):
    """Score ``params`` on one split of a manifest's records.

    ``root`` is the directory the record paths are relative to; ``split``
    of ``None`` uses every record. Results do not depend on ``workers``.
    """
    chosen = [r for r in records if split is None or r.split == split]
    if not chosen:
        raise ValueError(f"split {split!r} is empty")
    paths = [str(Path(root) / r.lr_path) for r in chosen]
    if workers and workers > 1:
        step = math.ceil(len(paths) / workers)
        chunks = [(paths[i:i + step], params) for i in range(0, len(paths), step)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            pred = [row for part in pool.map(_predict_chunk, chunks) for row in part]
    else:
        pred = _predict_chunk((paths, params))
    y_true = np.array([r.intervals for r in chosen])
    return accuracy_report(y_true, np.array(pred))


class InsufficientStratificationError(ValueError):
    """Too few qualifying records in some interval."""


class MonotonicityError(AssertionError):
    """Mean PSNR does not strictly decrease across intervals."""


@dataclass
class MonotonicityReport:
    which: str
    mean_psnr: list
    counts: list

    @property
    def strictly_decreasing(self):
        return all(a > b for a, b in zip(self.mean_psnr, self.mean_psnr[1:]))

    def to_dict(self):
        return {"type": self.which, "mean_psnr": self.mean_psnr, "counts": self.counts,
                "strictly_decreasing": self.strictly_decreasing}


def monotonicity_report(records, which, root, min_per_interval=25, check=True):
    """Mean PSNR(LR, bicubic HR) per ``which`` interval.

    Only records whose other two types sit in interval 0 count. The LR is
    recomputed from the archived HR and the recipe, so PSNR is measured on
    unquantized values. Raises :class:`InsufficientStratificationError`
    when an interval has fewer than ``min_per_interval`` records, and
    :class:`MonotonicityError` (with ``check``) unless the means strictly
    decrease from interval 0 to 3.
    """
    if which not in DEGRADATION_TYPES:
        raise ValueError(f"unknown degradation type {which!r}")
    axis = DEGRADATION_TYPES.index(which)
    others = [i for i in range(3) if i != axis]
    buckets = [[] for _ in range(N_INTERVALS)]
    for r in records:
        iv = r.intervals
        if all(iv[o] == 0 for o in others):
            buckets[iv[axis]].append(r)
    counts = [len(b) for b in buckets]
    if min(counts) < min_per_interval:
        raise InsufficientStratificationError(
            f"{which} intervals hold {counts} qualifying records; need {min_per_interval} each")
    means = []
    for bucket in buckets:
        vals = []
        for r in bucket:
            hr = load_image(Path(root) / r.hr_path)
            lr = apply_recipe(hr, r.recipe)
            s = r.recipe.final_scale
            vals.append(psnr(lr, resize_bicubic(hr, hr.shape[1] // s, hr.shape[0] // s)))
        means.append(math.fsum(vals) / len(vals))
    report = MonotonicityReport(which, means, counts)
    if check and not report.strictly_decreasing:
        raise MonotonicityError(f"{which} mean PSNR is not strictly decreasing: {means}")
    return report
