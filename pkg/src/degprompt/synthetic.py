"""Procedural stand-ins for natural HR photographs.

Each image mixes a 1/f-spectrum colour texture with flat-shaded shapes, so
it has both fine texture and hard edges (what blur, noise and JPEG
estimators key on).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .imaging import rng_for, save_image

__all__ = ["make_natural_image", "make_corpus"]

_CORPUS_DOMAIN = 7


def _pink_field(h, w, rng, alpha=1.8):
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    f = np.sqrt(fx * fx + fy * fy)
    f[0, 0] = 1.0
    amp = f ** (-alpha / 2.0)  # power spectrum ~ 1/f^alpha
    spec = amp * (rng.draw_gaussian((h, w // 2 + 1)) + 1j * rng.draw_gaussian((h, w // 2 + 1)))
    spec[0, 0] = 0.0
    field = np.fft.irfft2(spec, s=(h, w))
    field -= field.mean()
    return field / (field.std() + 1e-12)


def make_natural_image(size, rng, channels=3, texture_amp=0.12):
    """One ``size x size`` image in [0, 1] drawn from ``rng``."""
    h = w = int(size)
    base = rng.draw_uniform(channels) * 0.6 + 0.2
    img = np.empty((h, w, channels))
    texture = _pink_field(h, w, rng)
    tint = rng.draw_uniform(channels) * 0.5 + 0.5
    for c in range(channels):
        img[:, :, c] = base[c] + texture_amp * tint[c] * texture

    yy, xx = np.mgrid[0:h, 0:w]
    n_shapes = int(rng.draw_integer(3, 8))
    for _ in range(n_shapes):
        colour = rng.draw_uniform(channels)
        cy, cx = rng.draw_uniform(2) * np.array([h, w])
        ry, rx = (0.08 + 0.3 * rng.draw_uniform(2)) * np.array([h, w])
        if rng.draw_uniform() < 0.5:
            mask = (np.abs(yy - cy) < ry) & (np.abs(xx - cx) < rx)
        else:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1.0
        fine = texture_amp * 0.4 * _pink_field(h, w, rng, alpha=1.2)
        for c in range(channels):
            img[:, :, c] = np.where(mask, colour[c] + fine, img[:, :, c])
    return np.clip(img, 0.0, 1.0)


def make_corpus(out_dir, n_images, size=128, seed=0, channels=3):
    """Write ``n_images`` PNGs named ``img_NNNN.png`` and return their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n_images):
        img = make_natural_image(size, rng_for(seed, i, _CORPUS_DOMAIN), channels)
        p = out_dir / f"img_{i:04d}.png"
        save_image(img, p)
        paths.append(p)
    return paths
