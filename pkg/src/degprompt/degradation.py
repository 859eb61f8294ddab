"""Blur / resize / noise / JPEG operators and their two-stage composition."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image as PILImage

from .imaging import RngStream, _encode, _from_pil, check_image, rng_for

__all__ = [
    "BLUR_RANGE",
    "NOISE_RANGE",
    "JPEG_RANGE",
    "RESIZE_RANGE",
    "DegradationStage",
    "DegradationRecipe",
    "DegreeVector",
    "gaussian_kernel",
    "gaussian_blur",
    "catmull_rom",
    "resize_weights",
    "resize_bicubic",
    "add_gaussian_noise",
    "jpeg_roundtrip",
    "sample_stage",
    "apply_recipe",
    "effective_degrees",
]

BLUR_RANGE = (0.2, 3.0)
NOISE_RANGE = (1.0 / 255.0, 30.0 / 255.0)
JPEG_RANGE = (30, 95)
RESIZE_RANGE = (0.5, 1.0)


@dataclass(frozen=True)
class DegradationStage:
    """One blur -> resize -> noise -> JPEG pass.

    A field set to ``None`` skips that operator; sampled stages always fill
    every field. Skipping is only used for hand-built single-operator
    recipes.
    """

    blur_sigma: float | None
    noise_sigma: float | None
    jpeg_quality: int | None
    resize_factor: float = 1.0

    def __post_init__(self):
        lo, hi = BLUR_RANGE
        if self.blur_sigma is not None and not lo <= self.blur_sigma <= hi:
            raise ValueError(f"blur_sigma {self.blur_sigma} outside [{lo}, {hi}]")
        lo, hi = NOISE_RANGE
        # allow float slop at the endpoints, which are fractions of 255
        if self.noise_sigma is not None and not lo - 1e-12 <= self.noise_sigma <= hi + 1e-12:
            raise ValueError(f"noise_sigma {self.noise_sigma} outside [1/255, 30/255]")
        lo, hi = JPEG_RANGE
        if self.jpeg_quality is not None:
            if int(self.jpeg_quality) != self.jpeg_quality or not lo <= self.jpeg_quality <= hi:
                raise ValueError(f"jpeg_quality {self.jpeg_quality} not an integer in [{lo}, {hi}]")
            object.__setattr__(self, "jpeg_quality", int(self.jpeg_quality))
        if not 0.0 < self.resize_factor <= 1.0:
            raise ValueError(f"resize_factor {self.resize_factor} outside (0, 1]")

    def to_dict(self):
        return {
            "blur_sigma": self.blur_sigma,
            "noise_sigma": self.noise_sigma,
            "jpeg_quality": self.jpeg_quality,
            "resize_factor": self.resize_factor,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["blur_sigma"], d["noise_sigma"], d["jpeg_quality"], d["resize_factor"])


@dataclass(frozen=True)
class DegradationRecipe:
    """Fully resolved parameters of one degradation run.

    Sampled recipes carry exactly two stages; a single stage is accepted
    for hand-built recipes. ``seed`` keys the noise stream.
    """

    stages: tuple
    final_scale: int = 4
    seed: int = 0

    def __post_init__(self):
        stages = tuple(self.stages)
        if len(stages) not in (1, 2):
            raise ValueError(f"a recipe needs 1 or 2 stages, got {len(stages)}")
        object.__setattr__(self, "stages", stages)
        if int(self.final_scale) != self.final_scale or self.final_scale < 1:
            raise ValueError(f"final_scale must be a positive integer, got {self.final_scale}")

    def to_dict(self):
        return {"stages": [s.to_dict() for s in self.stages], "final_scale": self.final_scale}

    @classmethod
    def from_dict(cls, d, seed=0):
        return cls(tuple(DegradationStage.from_dict(s) for s in d["stages"]),
                   int(d["final_scale"]), int(seed))


@dataclass(frozen=True)
class DegreeVector:
    blur: float
    noise: float
    jpeg: float

    def __post_init__(self):
        for name in ("blur", "noise", "jpeg"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} degree {v} outside [0, 1]")

    def as_tuple(self):
        return (self.blur, self.noise, self.jpeg)

    def to_dict(self):
        return {"blur": self.blur, "noise": self.noise, "jpeg": self.jpeg}


def gaussian_kernel(sigma):
    """Normalized 1-D Gaussian sampled at integer offsets.

    Length is ``2 * ceil(3 * sigma) + 1`` and never below 3.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = max(int(math.ceil(3.0 * sigma)), 1)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _convolve_axis(arr, kernel, axis):
    r = len(kernel) // 2
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (r, r)
    padded = np.pad(arr, pad, mode="reflect")  # reflect-101: edge not repeated
    n = arr.shape[axis]
    out = np.zeros_like(arr)
    for t, w in enumerate(kernel):
        out += w * np.take(padded, np.arange(t, t + n), axis=axis)
    return out


def gaussian_blur(img, sigma):
    """Separable Gaussian blur, horizontal pass then vertical, reflect-101 borders."""
    img = check_image(img)
    k = gaussian_kernel(sigma)
    out = _convolve_axis(img, k, axis=1)
    out = _convolve_axis(out, k, axis=0)
    return np.clip(out, 0.0, 1.0)


def catmull_rom(x):
    """Keys cubic kernel with ``a = -0.5``."""
    a = -0.5
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2 = x * x
    x3 = x2 * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


def resize_weights(n_in, n_out):
    """Dense ``(n_out, n_in)`` resampling matrix along one axis.

    Pixel centres are aligned (half-pixel convention). When shrinking, the
    kernel is stretched by ``n_in / n_out`` so it also low-pass filters.
    Out-of-range taps are clamped to the border pixel, and each row is
    normalized to sum to one.
    """
    ratio = n_in / n_out
    support = max(ratio, 1.0)
    W = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        center = (i + 0.5) * ratio - 0.5
        lo = int(math.floor(center - 2.0 * support))
        hi = int(math.ceil(center + 2.0 * support))
        taps = np.arange(lo, hi + 1)
        w = catmull_rom((taps - center) / support)
        idx = np.clip(taps, 0, n_in - 1)
        np.add.at(W[i], idx, w)
        W[i] /= W[i].sum()
    return W


def resize_bicubic(img, out_w, out_h):
    """Anti-aliased Catmull-Rom resize to ``(out_h, out_w)``, clipped to [0, 1]."""
    img = check_image(img)
    if out_w < 1 or out_h < 1:
        raise ValueError(f"output size must be at least 1x1, got {out_w}x{out_h}")
    h, w, _ = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    Wy = resize_weights(h, out_h)
    Wx = resize_weights(w, out_w)
    out = np.einsum("ih,hwc->iwc", Wy, img)
    out = np.einsum("jw,iwc->ijc", Wx, out)
    return np.clip(out, 0.0, 1.0)


def add_gaussian_noise(img, sigma, rng: RngStream):
    """Additive i.i.d. Gaussian noise drawn in row-major, channel-minor order."""
    img = check_image(img)
    g = rng.draw_gaussian(img.shape)
    return np.clip(img + sigma * g, 0.0, 1.0)


def jpeg_roundtrip(img, quality):
    """Encode as baseline 4:2:0 JPEG at ``quality`` and decode again."""
    img = check_image(img)
    if int(quality) != quality or not JPEG_RANGE[0] <= quality <= JPEG_RANGE[1]:
        raise ValueError(f"quality must be an integer in {JPEG_RANGE}, got {quality}")
    data = _encode(img, "JPEG", int(quality))
    with PILImage.open(io.BytesIO(data)) as pim:
        pim.load()
        return _from_pil(pim)


def sample_stage(rng: RngStream):
    """Draw blur, noise, quality and resize factor, in that order."""
    blur = BLUR_RANGE[0] + (BLUR_RANGE[1] - BLUR_RANGE[0]) * rng.draw_uniform()
    noise = NOISE_RANGE[0] + (NOISE_RANGE[1] - NOISE_RANGE[0]) * rng.draw_uniform()
    quality = int(rng.draw_integer(*JPEG_RANGE))
    resize = RESIZE_RANGE[0] + (RESIZE_RANGE[1] - RESIZE_RANGE[0]) * rng.draw_uniform()
    return DegradationStage(float(blur), float(noise), quality, float(resize))


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def apply_recipe(hr, recipe: DegradationRecipe):
    """Degrade ``hr`` stage by stage, then bicubic-resize to ``1 / final_scale``.

    A pure function of ``(hr, recipe)``: the noise draws come from
    ``rng_for(recipe.seed, 0)``.
    """
    hr = check_image(hr, name="hr")
    h, w, _ = hr.shape
    s = recipe.final_scale
    if h % s or w % s:
        raise ValueError(f"HR size {w}x{h} is not divisible by final_scale {s}")
    rng = rng_for(recipe.seed, 0)
    img = hr
    for stage in recipe.stages:
        if stage.blur_sigma is not None:
            img = gaussian_blur(img, stage.blur_sigma)
        if stage.resize_factor != 1.0:
            ch, cw, _ = img.shape
            img = resize_bicubic(img, max(1, _round_half_up(cw * stage.resize_factor)),
                                 max(1, _round_half_up(ch * stage.resize_factor)))
        if stage.noise_sigma is not None:
            img = add_gaussian_noise(img, stage.noise_sigma, rng)
        if stage.jpeg_quality is not None:
            img = jpeg_roundtrip(img, stage.jpeg_quality)
    return resize_bicubic(img, w // s, h // s)


def effective_degrees(recipe: DegradationRecipe):
    """Aggregate severity per degradation type, each normalized to [0, 1].

    Blur and noise sigmas add in quadrature across stages; JPEG takes the
    lowest quality. Skipped operators contribute nothing.
    """
    blur = [st.blur_sigma for st in recipe.stages if st.blur_sigma is not None]
    noise = [st.noise_sigma for st in recipe.stages if st.noise_sigma is not None]
    quality = [st.jpeg_quality for st in recipe.stages if st.jpeg_quality is not None]

    sigma_b = min(math.sqrt(sum(v * v for v in blur)), BLUR_RANGE[1])
    d_blur = (sigma_b - BLUR_RANGE[0]) / (BLUR_RANGE[1] - BLUR_RANGE[0])
    sigma_n = min(math.sqrt(sum(v * v for v in noise)), NOISE_RANGE[1])
    d_noise = (sigma_n - NOISE_RANGE[0]) / (NOISE_RANGE[1] - NOISE_RANGE[0])
    q = min(quality) if quality else JPEG_RANGE[1]
    d_jpeg = (JPEG_RANGE[1] - q) / (JPEG_RANGE[1] - JPEG_RANGE[0])

    def clip(v):
        return float(min(max(v, 0.0), 1.0))

    return DegreeVector(clip(d_blur), clip(d_noise), clip(d_jpeg))
