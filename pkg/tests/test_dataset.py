import json
import math

import numpy as np
import pytest

from degprompt.dataset import (
    DatasetConfig,
    ManifestError,
    PromptConsistencyError,
    build_dataset,
    build_sweep_dataset,
    crop_patches,
    generate_triplet,
    read_manifest,
    read_manifest_header,
    records_labels,
    sample_sweep_recipe,
    write_manifest,
)
from degprompt.degradation import DegradationRecipe, apply_recipe, effective_degrees, sample_stage
from degprompt.imaging import load_image, rng_for, save_image
from degprompt.prompts import RestorationPrompt, degree_to_interval, vocabulary


def sampled_recipes(n, seed=0):
    out = []
    for k in range(n):
        r = rng_for(seed, k)
        out.append(DegradationRecipe((sample_stage(r), sample_stage(r))))
    return out


def quadrature_interval_probs(lo, hi, n_grid=2000):
    """P(interval) for sqrt(s1^2 + s2^2) with s1, s2 ~ U[lo, hi], by midpoint integration."""
    s = lo + (np.arange(n_grid) + 0.5) * (hi - lo) / n_grid
    eff = np.minimum(np.hypot(s[:, None], s[None, :]), hi)
    d = (eff - lo) / (hi - lo)
    idx = np.searchsorted([0.25, 0.5, 0.75], d, side="left")
    return np.bincount(idx.ravel(), minlength=4) / idx.size


def jpeg_interval_probs():
    """Exact enumeration over the 66 x 66 equally likely quality pairs."""
    q = np.arange(30, 96)
    qmin = np.minimum(q[:, None], q[None, :])
    idx = [degree_to_interval((95 - v) / 65) for v in qmin.ravel()]
    return np.bincount(idx, minlength=4) / len(idx)


class TestCrop:
    def test_exact_size_returns_image(self, natural_patch):
        (patch,) = crop_patches(natural_patch, 64, 1, rng_for(0, 0))
        np.testing.assert_array_equal(patch, natural_patch)

    def test_deterministic(self):
        img = np.zeros((128, 128, 3))
        a = crop_patches(img, 64, 5, rng_for(3, 3))
        b = crop_patches(img, 64, 5, rng_for(3, 3))
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def _coverage(self):
        r = rng_for(0, 0)
        ys = r.draw_integer(0, 64, size=10_000)
        xs = r.draw_integer(0, 64, size=10_000)
        return len(set(zip(ys.tolist(), xs.tolist()))) / 65**2

    def test_corner_coverage_matches_occupancy_oracle(self):
        cells = 65**2
        p_hit = 1 - (1 - 1 / cells) ** 10_000
        sd = math.sqrt(cells * p_hit * (1 - p_hit)) / cells
        assert abs(self._coverage() - p_hit) < 4 * sd

    @pytest.mark.xfail(strict=True, reason="10^4 uniform draws over 4225 corners cover about 90.6% on average")
    def test_corner_coverage_95_percent(self):
        assert self._coverage() >= 0.95

    def test_too_small(self):
        with pytest.raises(ValueError):
            crop_patches(np.zeros((10, 10, 3)), 16, 1, rng_for(0, 0))


class TestTriplet:
    def test_deterministic(self, natural_patch):
        r1, lr1 = generate_triplet(natural_patch, 9, 4)
        r2, lr2 = generate_triplet(natural_patch, 9, 4)
        assert r1 == r2
        np.testing.assert_array_equal(lr1, lr2)

    def test_geometry_and_consistency(self, natural_patch):
        record, lr = generate_triplet(natural_patch, 1, 2)
        assert lr.shape == (16, 16, 3)
        assert record.degrees == effective_degrees(record.recipe)
        assert record.prompt == RestorationPrompt.from_degrees(record.degrees).text
        assert record.prompt in vocabulary()
        assert len(record.recipe.stages) == 2


N_LABELS = 4000


@pytest.fixture(scope="module")
def histograms():
    degrees = np.array([effective_degrees(r).as_tuple() for r in sampled_recipes(N_LABELS)])
    return np.array([[np.sum([degree_to_interval(v) == k for v in degrees[:, t]]) for k in range(4)]
                     for t in range(3)])


class TestLabelDistribution:
    N = N_LABELS

    @pytest.mark.parametrize("axis, probs", [
        (0, quadrature_interval_probs(0.2, 3.0)),
        (1, quadrature_interval_probs(1 / 255, 30 / 255)),
        (2, jpeg_interval_probs()),
    ], ids=["blur", "noise", "jpeg"])
    def test_histogram_matches_sampling_oracle(self, histograms, axis, probs):
        sd = np.sqrt(self.N * probs * (1 - probs))
        assert np.all(np.abs(histograms[axis] - self.N * probs) < 4 * sd)

    def test_no_empty_class(self, histograms):
        assert histograms.min() > 0

    @pytest.mark.xfail(strict=True, reason="quadrature aggregation puts about 58% of blur labels in the top interval")
    def test_blur_classes_between_15_and_35_percent(self, histograms):
        frac = histograms[0] / self.N
        assert np.all((frac >= 0.15) & (frac <= 0.35))


class TestSweepRecipe:
    @pytest.mark.parametrize("which", ["blur", "noise", "jpeg"])
    def test_lands_in_interval_with_others_minimal(self, which):
        axis = ("blur", "noise", "jpeg").index(which)
        for k in range(4):
            rec = sample_sweep_recipe(rng_for(0, k), which, k)
            degrees = effective_degrees(rec).as_tuple()
            assert degree_to_interval(degrees[axis]) == k
            assert all(degree_to_interval(d) == 0 for i, d in enumerate(degrees) if i != axis)
            assert all(s.resize_factor == 1.0 for s in rec.stages)

    def test_unknown_type(self):
        with pytest.raises(ValueError):
            sample_sweep_recipe(rng_for(0, 0), "haze", 0)


@pytest.fixture(scope="module")
def built(small_corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    cfg = DatasetConfig(hr_patch_size=64, patches_per_image=3, global_seed=3)
    return build_dataset(small_corpus, out, cfg), cfg


class TestBuild:
    def test_counts_and_ids(self, built):
        path, _ = built
        records = read_manifest(path)
        assert [r.id for r in records] == list(range(9))
        header = read_manifest_header(path)
        assert header["skipped_undersized"] == 1
        assert header["schema_version"] == 1

    def test_two_images_three_patches(self, small_corpus, tmp_path):
        corpus = tmp_path / "two"
        corpus.mkdir()
        for name in sorted(p.name for p in small_corpus.glob("img_*.png"))[:2]:
            (corpus / name).write_bytes((small_corpus / name).read_bytes())
        path = build_dataset(corpus, tmp_path / "out", DatasetConfig(hr_patch_size=64, patches_per_image=3))
        assert [r.id for r in read_manifest(path)] == list(range(6))

    def test_files_and_lr_match_recipe(self, built):
        path, _ = built
        root = path.parent
        for rec in read_manifest(path)[:3]:
            hr = load_image(root / rec.hr_path)
            lr = load_image(root / rec.lr_path)
            assert hr.shape == (64, 64, 3) and lr.shape == (16, 16, 3)
            expected = np.floor(apply_recipe(hr, rec.recipe) * 255 + 0.5)
            np.testing.assert_array_equal(np.round(lr * 255), expected)

    def test_rerun_byte_identical(self, built, small_corpus, tmp_path):
        path, cfg = built
        again = build_dataset(small_corpus, tmp_path, cfg)
        assert path.read_bytes() == again.read_bytes()
        for rec in read_manifest(path):
            assert (path.parent / rec.lr_path).read_bytes() == (tmp_path / rec.lr_path).read_bytes()

    def test_split_fraction(self, built):
        records = read_manifest(built[0])
        assert sum(r.split == "val" for r in records) == round(0.2 * 9)

    def test_empty_corpus(self, tmp_path):
        (tmp_path / "c").mkdir()
        with pytest.raises(ValueError):
            build_dataset(tmp_path / "c", tmp_path / "o", DatasetConfig(hr_patch_size=64))

    def test_all_undersized(self, small_corpus, tmp_path):
        with pytest.raises(ValueError):
            build_dataset(small_corpus, tmp_path, DatasetConfig(hr_patch_size=128))

    def test_sweep(self, small_corpus, tmp_path):
        path = build_sweep_dataset(small_corpus, tmp_path, DatasetConfig(hr_patch_size=64), "noise", 2)
        records = read_manifest(path)
        assert records_labels(records)[:, 1].tolist() == [0, 1, 2, 3] * 2
        assert read_manifest_header(path)["sweep"] == "noise"

    def test_config_validation(self):
        with pytest.raises(ValueError):
            DatasetConfig(hr_patch_size=63)
        with pytest.raises(ValueError):
            DatasetConfig(train_fraction=0.5, val_fraction=0.2)


class TestManifest:
    def test_round_trip(self, built, tmp_path):
        records = read_manifest(built[0])
        write_manifest(records, tmp_path / "m.jsonl")
        assert read_manifest(tmp_path / "m.jsonl") == records

    def test_tampered_prompt_names_line(self, built, tmp_path):
        lines = built[0].read_text().splitlines()
        d = json.loads(lines[3])
        d["prompt"] = "Deblur with sigma 0~0.25, Denoise with sigma 0~0.25, Dejpeg with sigma 0.75~1" \
            if d["prompt"] != "Deblur with sigma 0~0.25, Denoise with sigma 0~0.25, Dejpeg with sigma 0.75~1" \
            else "Deblur with sigma 0~0.25, Denoise with sigma 0~0.25, Dejpeg with sigma 0~0.25"
        lines[3] = json.dumps(d)
        bad = tmp_path / "bad.jsonl"
        bad.write_text("\n".join(lines) + "\n")
        with pytest.raises(PromptConsistencyError) as info:
            read_manifest(bad)
        assert info.value.line == 4
        assert "line 4" in str(info.value)

    def test_tampered_degrees(self, built, tmp_path):
        lines = built[0].read_text().splitlines()
        d = json.loads(lines[1])
        d["recipe"]["stages"][0]["blur_sigma"] = 0.2 if d["recipe"]["stages"][0]["blur_sigma"] != 0.2 else 0.3
        lines[1] = json.dumps(d)
        (tmp_path / "bad.jsonl").write_text("\n".join(lines) + "\n")
        with pytest.raises(PromptConsistencyError):
            read_manifest(tmp_path / "bad.jsonl")

    def test_empty_file(self, tmp_path):
        (tmp_path / "e.jsonl").write_text("")
        assert read_manifest(tmp_path / "e.jsonl") == []

    @pytest.mark.parametrize("mutate", [
        lambda d: d.pop("seed"),
        lambda d: d.update(id="7"),
        lambda d: d.update(split="test"),
        lambda d: d.update(caption=5),
        lambda d: d["recipe"].update(stages=d["recipe"]["stages"][:1]),
    ])
    def test_schema_violations(self, built, tmp_path, mutate):
        lines = built[0].read_text().splitlines()
        d = json.loads(lines[2])
        mutate(d)
        lines[2] = json.dumps(d)
        (tmp_path / "bad.jsonl").write_text("\n".join(lines) + "\n")
        with pytest.raises(ManifestError) as info:
            read_manifest(tmp_path / "bad.jsonl")
        assert info.value.line == 3

    def test_invalid_json(self, tmp_path):
        (tmp_path / "b.jsonl").write_text("{not json\n")
        with pytest.raises(ManifestError):
            read_manifest(tmp_path / "b.jsonl")

    def test_saved_lr_is_loadable(self, natural_patch, tmp_path):
        _, lr = generate_triplet(natural_patch, 0, 0)
        save_image(lr, tmp_path / "lr.png")
        assert load_image(tmp_path / "lr.png").shape == lr.shape
