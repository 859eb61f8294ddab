"""Image container helpers, 8-bit file I/O and keyed random streams.

Images are plain ``numpy`` arrays of shape ``(height, width, channels)``
with ``float64`` values in ``[0, 1]`` and ``channels`` equal to 1 or 3.
Every public operation in the package returns a fresh array and never
mutates its input.
"""

from __future__ import annotations

import io
import os
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError

__all__ = [
    "ImageError",
    "ImageNotFoundError",
    "UnsupportedFormatError",
    "CorruptImageError",
    "InvalidQualityError",
    "RngStream",
    "check_image",
    "from_uint8",
    "to_uint8",
    "load_image",
    "save_image",
    "encode_png",
    "rng_for",
]

SUPPORTED_FORMATS = ("PNG", "JPEG")


class ImageError(Exception):
    """Base class for image I/O failures."""


class ImageNotFoundError(ImageError, FileNotFoundError):
    pass


class UnsupportedFormatError(ImageError):
    pass


class CorruptImageError(ImageError):
    pass


class InvalidQualityError(ImageError, ValueError):
    pass


def check_image(img, *, name="img"):
    """Validate an image array and return it as ``float64`` ``(H, W, C)``.

    A 2-D array is promoted to a single-channel image. Values must already
    lie in ``[0, 1]``; clipping is the job of whichever operation produced
    them.
    """
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"{name} must have shape (H, W, C), got {arr.shape}")
    h, w, c = arr.shape
    if h < 1 or w < 1:
        raise ValueError(f"{name} has an empty spatial extent {arr.shape}")
    if c not in (1, 3):
        raise ValueError(f"{name} must have 1 or 3 channels, got {c}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def to_uint8(img):
    """Quantize ``[0, 1]`` floats to bytes with round-half-up."""
    arr = check_image(img)
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8)


def from_uint8(arr):
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr.astype(np.float64) / 255.0


def _to_pil(img):
    q = to_uint8(img)
    if q.shape[2] == 1:
        return PILImage.fromarray(q[:, :, 0], mode="L")
    return PILImage.fromarray(q, mode="RGB")


def _from_pil(pim):
    if pim.mode != "L":
        # alpha and palettes are not supported; flatten to RGB
        pim = pim.convert("RGB")
    return from_uint8(np.asarray(pim))


def load_image(path):
    """Read a PNG or JPEG file into a ``[0, 1]`` float image (``v / 255``)."""
    path = Path(path)
    if not path.is_file():
        raise ImageNotFoundError(f"no such image file: {path}")
    try:
        with PILImage.open(path) as pim:
            fmt = pim.format
            if fmt not in SUPPORTED_FORMATS:
                raise UnsupportedFormatError(f"{path}: format {fmt!r} is not PNG or JPEG")
            pim.load()
            return _from_pil(pim)
    except UnidentifiedImageError as exc:
        raise UnsupportedFormatError(f"{path}: not a recognised image") from exc
    except (OSError, SyntaxError, ValueError) as exc:
        if isinstance(exc, ImageError):
            raise
        raise CorruptImageError(f"{path}: {exc}") from exc


def _encode(img, fmt, quality):
    pim = _to_pil(img)
    buf = io.BytesIO()
    if fmt == "PNG":
        pim.save(buf, format="PNG", optimize=False, compress_level=6)
    elif fmt == "JPEG":
        if not isinstance(quality, (int, np.integer)) or not 1 <= quality <= 100:
            raise InvalidQualityError(f"JPEG quality must be an integer in [1, 100], got {quality!r}")
        # baseline, 4:2:0, IJG-scaled Annex K tables
        pim.save(buf, format="JPEG", quality=int(quality), subsampling=2,
                 optimize=False, progressive=False)
    else:
        raise UnsupportedFormatError(f"cannot write format {fmt!r}")
    return buf.getvalue()


def encode_png(img):
    """Return the PNG byte string for ``img``."""
    return _encode(img, "PNG", None)


def save_image(img, path, format="PNG", quality=None):
    """Write ``img`` as PNG or JPEG.

    ``format`` is ``"PNG"`` or ``"JPEG"``; JPEG requires ``quality`` in
    ``[1, 100]``. Parent directories must already exist.
    """
    fmt = format.upper()
    if fmt == "JPG":
        fmt = "JPEG"
    data = _encode(img, fmt, quality)
    path = Path(path)
    if not path.parent.is_dir() or not os.access(path.parent, os.W_OK):
        raise PermissionError(f"cannot write to {path}")
    path.write_bytes(data)


class RngStream:
    """Counter-based random stream keyed by ``(key, index)``.

    Backed by the Philox-4x64 bit generator with the 128-bit key
    ``index << 64 | key``; distinct ``domain`` values start the counter in
    disjoint 2**192-sized blocks, giving independent sub-streams for the
    same item. Gaussian draws use numpy's ziggurat sampler
    (``Generator.standard_normal``) and uniform draws carry 53 random bits,
    so sequences are bit-reproducible for a given numpy release.
    """

    def __init__(self, key, index, domain=0):
        self.key = int(key) & 0xFFFFFFFFFFFFFFFF
        self.index = int(index) & 0xFFFFFFFFFFFFFFFF
        self.domain = int(domain) & 0xFFFFFFFFFFFFFFFF
        bitgen = np.random.Philox(
            key=(self.index << 64) | self.key,
            counter=np.array([0, 0, 0, self.domain], dtype=np.uint64),
        )
        self._gen = np.random.Generator(bitgen)

    def __repr__(self):
        return f"RngStream(key={self.key}, index={self.index}, domain={self.domain})"

    def draw_uniform(self, size=None):
        """Uniform draws in ``[0, 1)``."""
        return self._gen.random(size)

    def draw_gaussian(self, size=None):
        """Standard normal draws (ziggurat)."""
        return self._gen.standard_normal(size)

    def draw_integer(self, low, high, size=None):
        """Integers uniform on the closed range ``[low, high]``."""
        return self._gen.integers(low, high, size=size, endpoint=True)

    def draw_seed(self):
        """A fresh 64-bit seed value."""
        return int(self._gen.integers(0, 2**64, dtype=np.uint64))

    def permutation(self, n):
        return self._gen.permutation(n)


def rng_for(global_seed, item_index, domain=0):
    """Deterministic stream for one item; equal arguments give equal draws."""
    return RngStream(global_seed, item_index, domain)
