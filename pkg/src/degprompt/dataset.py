"""Triplet dataset construction: crop, degrade, discretize, archive, manifest.

Output layout::

    out_dir/hr/NNNNNN.png
    out_dir/lr/NNNNNN.png
    out_dir/manifest.jsonl

The manifest's first line is a header object (``"kind": "header"``) with
the schema version, the generating config and a count of skipped corpus
images; every following line is one :class:`TripletRecord`.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .degradation import (
    BLUR_RANGE,
    JPEG_RANGE,
    NOISE_RANGE,
    DegradationRecipe,
    DegradationStage,
    DegreeVector,
    apply_recipe,
    effective_degrees,
    sample_stage,
)
from .imaging import from_uint8, load_image, rng_for, save_image, to_uint8
from .prompts import DEGRADATION_TYPES, RestorationPrompt, degree_to_interval

logger = logging.getLogger(__name__)

__all__ = [
    "SCHEMA_VERSION",
    "ManifestError",
    "PromptConsistencyError",
    "TripletRecord",
    "DatasetConfig",
    "crop_patches",
    "generate_triplet",
    "minimum_stage",
    "sample_sweep_recipe",
    "build_dataset",
    "build_sweep_dataset",
    "write_manifest",
    "read_manifest",
    "read_manifest_header",
    "records_labels",
]

SCHEMA_VERSION = 1
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

_CROP_DOMAIN = 1
_SPLIT_DOMAIN = 2
_SPLIT_INDEX = 2**64 - 1


class ManifestError(ValueError):
    """A manifest line violates the schema."""

    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class PromptConsistencyError(ManifestError):
    """A record's prompt does not match its degrees (or its recipe)."""


@dataclass(frozen=True)
class TripletRecord:
    id: int
    hr_path: str
    lr_path: str
    seed: int
    recipe: DegradationRecipe
    degrees: DegreeVector
    prompt: str
    split: str = "train"
    caption: str | None = None

    @property
    def intervals(self):
        return RestorationPrompt.from_degrees(self.degrees).intervals

    def to_dict(self):
        return {
            "id": self.id,
            "hr_path": self.hr_path,
            "lr_path": self.lr_path,
            "seed": self.seed,
            "recipe": self.recipe.to_dict(),
            "degrees": self.degrees.to_dict(),
            "prompt": self.prompt,
            "split": self.split,
            "caption": self.caption,
        }

    @classmethod
    def from_dict(cls, d):
        seed = int(d["seed"])
        degrees = d["degrees"]
        return cls(
            id=int(d["id"]),
            hr_path=str(d["hr_path"]),
            lr_path=str(d["lr_path"]),
            seed=seed,
            recipe=DegradationRecipe.from_dict(d["recipe"], seed=seed),
            degrees=DegreeVector(float(degrees["blur"]), float(degrees["noise"]), float(degrees["jpeg"])),
            prompt=str(d["prompt"]),
            split=str(d.get("split", "train")),
            caption=d.get("caption"),
        )

    def with_caption(self, caption):
        return TripletRecord(**{**self.__dict__, "caption": caption})


@dataclass
class DatasetConfig:
    hr_patch_size: int = 512
    final_scale: int = 4
    patches_per_image: int = 1
    global_seed: int = 0
    train_fraction: float = 0.8
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.hr_patch_size < 1 or self.final_scale < 1 or self.patches_per_image < 1:
            raise ValueError("patch size, scale and patches per image must be positive")
        if self.hr_patch_size % self.final_scale:
            raise ValueError(
                f"hr_patch_size {self.hr_patch_size} is not divisible by final_scale {self.final_scale}")
        if min(self.train_fraction, self.val_fraction) < 0 or \
                not math.isclose(self.train_fraction + self.val_fraction, 1.0, abs_tol=1e-9):
            raise ValueError("train and val fractions must be non-negative and sum to 1")


def crop_patches(img, size, n, rng):
    """``n`` square crops at uniformly drawn top-left corners."""
    h, w = img.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {w}x{h} is smaller than patch size {size}")
    ys = rng.draw_integer(0, h - size, size=n)
    xs = rng.draw_integer(0, w - size, size=n)
    return [img[y:y + size, x:x + size].copy() for y, x in zip(ys, xs)]


def _record(item_index, recipe, split="train"):
    degrees = effective_degrees(recipe)
    prompt = RestorationPrompt.from_degrees(degrees).text
    name = f"{item_index:06d}.png"
    return TripletRecord(item_index, f"hr/{name}", f"lr/{name}", recipe.seed,
                         recipe, degrees, prompt, split)


def generate_triplet(hr_patch, global_seed, item_index, final_scale=4):
    """Sample a two-stage recipe for one item and degrade the patch.

    Returns ``(record, lr)``. The recipe's noise seed is the third draw
    from the item's stream, after the two stages.
    """
    rng = rng_for(global_seed, item_index)
    stages = (sample_stage(rng), sample_stage(rng))
    recipe = DegradationRecipe(stages, final_scale, rng.draw_seed())
    lr = apply_recipe(hr_patch, recipe)
    return _record(item_index, recipe), lr


def minimum_stage():
    """The mildest sampled stage: every operator at its lower bound."""
    return DegradationStage(BLUR_RANGE[0], NOISE_RANGE[0], JPEG_RANGE[1], 1.0)


def sample_sweep_recipe(rng, which, interval, final_scale=4):
    """Two-stage recipe whose ``which`` degree falls in ``interval``.

    The other two types stay at their minimum parameters and the stage
    resize factors are 1. The varied parameter is drawn uniformly for both
    stages and redrawn until the aggregate lands in the requested interval.
    """
    if which not in DEGRADATION_TYPES:
        raise ValueError(f"unknown degradation type {which!r}")
    lo = minimum_stage()
    axis = DEGRADATION_TYPES.index(which)
    for _ in range(100_000):
        stages = []
        for _ in range(2):
            if which == "blur":
                v = BLUR_RANGE[0] + (BLUR_RANGE[1] - BLUR_RANGE[0]) * rng.draw_uniform()
                stages.append(DegradationStage(float(v), lo.noise_sigma, lo.jpeg_quality, 1.0))
            elif which == "noise":
                v = NOISE_RANGE[0] + (NOISE_RANGE[1] - NOISE_RANGE[0]) * rng.draw_uniform()
                stages.append(DegradationStage(lo.blur_sigma, float(v), lo.jpeg_quality, 1.0))
            else:
                q = int(rng.draw_integer(*JPEG_RANGE))
                stages.append(DegradationStage(lo.blur_sigma, lo.noise_sigma, q, 1.0))
        recipe = DegradationRecipe(tuple(stages), final_scale, rng.draw_seed())
        if degree_to_interval(effective_degrees(recipe).as_tuple()[axis]) == interval:
            return recipe
    raise RuntimeError(f"could not hit {which} interval {interval}")  # pragma: no cover


def _split_labels(n, cfg):
    n_val = int(round(cfg.val_fraction * n))
    order = rng_for(cfg.global_seed, _SPLIT_INDEX, _SPLIT_DOMAIN).permutation(n)
    labels = np.array(["train"] * n, dtype=object)
    labels[order[:n_val]] = "val"
    return labels


def _corpus_files(corpus_dir):
    corpus_dir = Path(corpus_dir)
    if not corpus_dir.is_dir():
        raise FileNotFoundError(f"corpus directory not found: {corpus_dir}")
    return sorted(p for p in corpus_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _collect_patches(corpus_dir, cfg):
    files = _corpus_files(corpus_dir)
    if not files:
        raise ValueError(f"corpus {corpus_dir} contains no PNG/JPEG images")
    patches, skipped = [], 0
    for i, path in enumerate(files):
        img = load_image(path)
        if min(img.shape[:2]) < cfg.hr_patch_size:
            skipped += 1
            continue
        rng = rng_for(cfg.global_seed, i, _CROP_DOMAIN)
        # archive precision: crops are exact 8-bit values
        patches.extend(from_uint8(to_uint8(p))
                       for p in crop_patches(img, cfg.hr_patch_size, cfg.patches_per_image, rng))
    if skipped:
        logger.warning("skipped %d undersized corpus image(s)", skipped)
    if not patches:
        raise ValueError(f"no corpus image is at least {cfg.hr_patch_size}px on each side")
    return patches, skipped


def _work_random(args):
    out_dir, patch, seed, index, scale = args
    record, lr = generate_triplet(patch, seed, index, scale)
    save_image(patch, Path(out_dir) / record.hr_path)
    save_image(lr, Path(out_dir) / record.lr_path)
    return record


def _work_sweep(args):
    out_dir, patch, seed, index, scale, which, interval = args
    rng = rng_for(seed, index)
    recipe = sample_sweep_recipe(rng, which, interval, scale)
    record = _record(index, recipe)
    save_image(patch, Path(out_dir) / record.hr_path)
    save_image(apply_recipe(patch, recipe), Path(out_dir) / record.lr_path)
    return record


def _run(worker, tasks, workers):
    if workers is None or workers <= 1:
        return [worker(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(worker, tasks, chunksize=max(1, len(tasks) // (4 * workers))))


def _prepare_out(out_dir):
    out_dir = Path(out_dir)
    for sub in ("hr", "lr"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"output directory is not writable: {out_dir}")
    return out_dir


def _finish(out_dir, records, cfg, skipped, extra=None):
    labels = _split_labels(len(records), cfg)
    records = [TripletRecord(**{**r.__dict__, "split": str(s)}) for r, s in zip(records, labels)]
    header = {"config": asdict(cfg), "n_records": len(records), "skipped_undersized": skipped}
    if extra:
        header.update(extra)
    path = out_dir / "manifest.jsonl"
    write_manifest(records, path, header)
    return path


def build_dataset(corpus_dir, out_dir, cfg: DatasetConfig, workers=1):
    """Generate one triplet per crop and write HR/LR PNGs plus the manifest.

    Item ``k`` (in corpus-file, then crop order) is keyed by
    ``rng_for(cfg.global_seed, k)``, so the output is identical for any
    ``workers`` count. Returns the manifest path.
    """
    out_dir = _prepare_out(out_dir)
    patches, skipped = _collect_patches(corpus_dir, cfg)
    tasks = [(str(out_dir), p, cfg.global_seed, k, cfg.final_scale) for k, p in enumerate(patches)]
    records = _run(_work_random, tasks, workers)
    return _finish(out_dir, records, cfg, skipped)


def build_sweep_dataset(corpus_dir, out_dir, cfg: DatasetConfig, which, per_interval, workers=1):
    """Single-factor sweep: ``per_interval`` items in each interval of ``which``.

    Items cycle through intervals 0..3; crops are reused round-robin when
    the corpus yields fewer than ``4 * per_interval`` patches.
    """
    out_dir = _prepare_out(out_dir)
    patches, skipped = _collect_patches(corpus_dir, cfg)
    n = 4 * per_interval
    tasks = [(str(out_dir), patches[k % len(patches)], cfg.global_seed, k, cfg.final_scale, which, k % 4)
             for k in range(n)]
    records = _run(_work_sweep, tasks, workers)
    return _finish(out_dir, records, cfg, skipped, {"sweep": which})


def write_manifest(records, path, header=None):
    """Write records (sorted by id) as JSON lines, header first."""
    head = {"kind": "header", "schema_version": SCHEMA_VERSION}
    head.update(header or {})
    lines = [json.dumps(head, ensure_ascii=False)]
    lines += [json.dumps(r.to_dict(), ensure_ascii=False) for r in sorted(records, key=lambda r: r.id)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


_REQUIRED = {
    "id": int, "hr_path": str, "lr_path": str, "seed": int, "recipe": dict,
    "degrees": dict, "prompt": str, "split": str,
}


def _validate(d, line):
    for key, typ in _REQUIRED.items():
        if key not in d:
            raise ManifestError(f"missing field {key!r}", line)
        if not isinstance(d[key], typ) or (typ is int and isinstance(d[key], bool)):
            raise ManifestError(f"field {key!r} must be {typ.__name__}", line)
    if d.get("caption") is not None and not isinstance(d["caption"], str):
        raise ManifestError("field 'caption' must be a string or null", line)
    if d["split"] not in ("train", "val"):
        raise ManifestError(f"unknown split {d['split']!r}", line)
    try:
        record = TripletRecord.from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"invalid record: {exc}", line) from exc
    if len(record.recipe.stages) != 2:
        raise ManifestError("recipe must have exactly 2 stages", line)

    expected = RestorationPrompt.from_degrees(record.degrees).text
    if record.prompt != expected:
        raise PromptConsistencyError(
            f"prompt {record.prompt!r} does not match degrees (expected {expected!r})", line)
    derived = effective_degrees(record.recipe).as_tuple()
    if not np.allclose(derived, record.degrees.as_tuple(), rtol=0, atol=1e-12):
        raise PromptConsistencyError("degrees do not match the recipe", line)
    return record


def read_manifest_header(path):
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    if not first.strip():
        return {}
    head = json.loads(first)
    return head if head.get("kind") == "header" else {}


def read_manifest(path):
    """Parse and validate a manifest; the header line is optional."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                d = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid JSON: {exc.msg}", lineno) from exc
            if not isinstance(d, dict):
                raise ManifestError("each line must be a JSON object", lineno)
            if d.get("kind") == "header":
                if lineno != 1:
                    raise ManifestError("header must be the first line", lineno)
                if d.get("schema_version") != SCHEMA_VERSION:
                    raise ManifestError(f"unsupported schema_version {d.get('schema_version')!r}", lineno)
                continue
            records.append(_validate(d, lineno))
    return records


def records_labels(records):
    """``(n, 3)`` integer array of interval labels."""
    return np.array([r.intervals for r in records], dtype=np.int64).reshape(-1, 3)
