import math

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from degprompt.estimator import (
    Adam,
    DecoderParams,
    DegradationPromptEstimator,
    TrainConfig,
    decoder_forward,
    decoder_logits,
    estimate,
    extract_patches,
    feature_alignment_loss,
    gradient_check,
    load_params,
    loss_and_grads,
    pool_patches,
    retrieval_loss,
    save_params,
    tokenize_image,
    train,
)
from degprompt.kernels import cross_attention
from degprompt.prompts import parse_prompt


def small_params(seed=0, scale=0.1, channels=3, patch=4, d_model=8, ffn=12):
    return DecoderParams.initialize(patch, channels, d_model, None, ffn, seed=seed, scale=scale)


def brute_force_logits(tokens, params):
    """Straight-line loop implementation of the decoder, independent of the package code."""
    t = params.tensors
    Q = [row.copy() for row in t["prompt_queries"]]
    for b in range(2):
        pre = f"blocks.{b}."
        keys = [tok @ t[pre + "w_k"] for tok in tokens]
        values = [tok @ t[pre + "w_v"] for tok in tokens]
        d = t[pre + "w_q"].shape[1]
        new_Q = []
        for q_row in Q:
            q = q_row @ t[pre + "w_q"]
            scores = [float(q @ k) / math.sqrt(d) for k in keys]
            m = max(scores)
            w = [math.exp(s - m) for s in scores]
            total = sum(w)
            attn = sum((wi / total) * v for wi, v in zip(w, values))
            q1 = q_row + attn @ t[pre + "w_o"]
            z = q1 @ t[pre + "ffn_w1"] + t[pre + "ffn_b1"]
            h = np.array([0.5 * zi * (1 + math.erf(zi / math.sqrt(2))) for zi in z])
            new_Q.append(q1 + h @ t[pre + "ffn_w2"] + t[pre + "ffn_b2"])
        Q = new_Q
    logits = np.zeros((3, 4))
    for ty in range(3):
        for i in range(4):
            logits[ty, i] = Q[4 * ty + i] @ t["score_heads.weight"][ty] + t["score_heads.bias"][ty]
    return logits


class TestTokenize:
    def test_token_count(self):
        params = DecoderParams.initialize(8, 3, seed=0)
        assert tokenize_image(np.zeros((16, 16, 3)), 8, params).shape == (4, 64)

    def test_zero_image_gives_bias_rows(self):
        params = small_params()
        params.tensors["patch_embed.bias"][:] = np.arange(8)
        tok = tokenize_image(np.zeros((8, 8, 3)), 4, params)
        np.testing.assert_array_equal(tok, np.tile(np.arange(8.0), (4, 1)))

    def test_patch_permutation(self, rng):
        params = small_params()
        img = rng.random((8, 8, 3))
        swapped = img.copy()
        swapped[0:4, 0:4], swapped[4:8, 4:8] = img[4:8, 4:8], img[0:4, 0:4]
        a, b = tokenize_image(img, 4, params), tokenize_image(swapped, 4, params)
        np.testing.assert_allclose(b[[3, 1, 2, 0]], a, atol=1e-15)

    def test_patch_layout(self):
        img = np.arange(4 * 4 * 1, dtype=float).reshape(4, 4, 1) / 16
        P = extract_patches(img, 2)
        np.testing.assert_array_equal(P[1] * 16, [2, 3, 6, 7])

    def test_pool_aligns_with_lr_grid(self, rng):
        hr = rng.random((16, 16, 3))
        P = pool_patches(hr, 2, 4)
        assert P.shape == extract_patches(np.zeros((4, 4, 3)), 2).shape
        assert P[0, 0] == pytest.approx(hr[:4, :4, 0].mean())

    def test_indivisible(self):
        with pytest.raises(ValueError):
            extract_patches(np.zeros((10, 8, 3)), 4)


class TestForward:
    def test_matches_brute_force(self, rng):
        for seed in range(3):
            params = small_params(seed, scale=0.3)
            tokens = rng.normal(size=(rng.integers(1, 6), 8))
            out = decoder_forward(tokens, params)
            np.testing.assert_allclose(out.logits, brute_force_logits(tokens, params), atol=1e-10)

    def test_single_token_attention_is_shared(self, rng):
        params = small_params(scale=0.3)
        token = rng.normal(size=(1, 8))
        # with one key, block-0 attention output equals token @ w_v for every query
        t = params.tensors
        q = t["prompt_queries"] @ t["blocks.0.w_q"]
        attn, _ = cross_attention(q, token @ t["blocks.0.w_k"], token @ t["blocks.0.w_v"], q.shape[1])
        np.testing.assert_allclose(attn, np.tile(token @ t["blocks.0.w_v"], (12, 1)), atol=1e-15)
        # so the queries' differences after block 0's attention are exactly their embedding differences
        q1 = t["prompt_queries"] + attn @ t["blocks.0.w_o"]
        np.testing.assert_allclose(q1 - q1[0], t["prompt_queries"] - t["prompt_queries"][0], atol=1e-14)

    def test_deterministic_and_vocabulary(self, rng):
        params = small_params()
        tokens = rng.normal(size=(4, 8))
        a, b = decoder_forward(tokens, params), decoder_forward(tokens, params)
        np.testing.assert_array_equal(a.logits, b.logits)
        assert parse_prompt(a.predicted.text) == a.predicted.intervals

    def test_ties_go_to_lower_interval(self, rng):
        params = small_params()
        for k in list(params.tensors):
            if k.startswith("score_heads"):
                params.tensors[k][:] = 0
        assert decoder_forward(rng.normal(size=(2, 8)), params).predicted.intervals == (0, 0, 0)

    def test_shape_errors(self):
        params = small_params()
        with pytest.raises(ValueError):
            decoder_forward(np.zeros((3, 7)), params)
        with pytest.raises(ValueError):
            decoder_logits(np.zeros((1, 3, 5)), params)


class TestLosses:
    def test_uniform_logits(self):
        assert abs(retrieval_loss(np.zeros((3, 4)), [1, 2, 3]) - math.log(4)) <= 1e-12

    def test_confident_limit(self):
        logits = np.full((3, 4), -1e4)
        logits[:, 0] = 1e4
        assert retrieval_loss(logits, [0, 0, 0]) < 1e-12

    def test_closed_form(self):
        logits = np.zeros((3, 4))
        logits[:, 0] = 2.0
        expected = -math.log(math.e**2 / (math.e**2 + 3))
        # -ln(e^2 / (e^2 + 3)) = ln(1 + 3 e^-2) = 0.34075...
        assert retrieval_loss(logits, [0, 0, 0]) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.34075, abs=1e-5)

    def test_shift_invariance(self, rng):
        logits = rng.normal(size=(3, 4))
        shifted = logits + rng.normal(size=(3, 1)) * 100
        assert abs(retrieval_loss(logits, [0, 3, 1]) - retrieval_loss(shifted, [0, 3, 1])) <= 1e-12

    def test_label_range(self):
        with pytest.raises(ValueError):
            retrieval_loss(np.zeros((3, 4)), [0, 4, 0])

    def test_alignment_values(self, rng):
        a = rng.normal(size=(5, 4))
        assert feature_alignment_loss(a, a) == 0.0
        assert feature_alignment_loss(a, a + 1) == pytest.approx(1.0, abs=1e-12)
        b = rng.normal(size=(5, 4))
        assert feature_alignment_loss(a, b) == pytest.approx(((a - b) ** 2).sum() / 20, abs=1e-12)
        with pytest.raises(ValueError):
            feature_alignment_loss(a, b[:4])


class TestGradients:
    @pytest.fixture
    def sample(self, rng):
        X = rng.random((2, 4, 48))
        y = np.array([[0, 3, 1], [2, 2, 0]])
        return X, y

    def test_end_to_end(self, sample):
        err = gradient_check(small_params(), sample, eps=1e-5, n_params=200)
        assert err < 1e-4

    def test_with_alignment_term(self, sample, rng):
        X, y = sample
        X_hr = rng.random(X.shape)
        err = gradient_check(small_params(1), (X, y, X_hr), eps=1e-5, n_params=200, alignment_weight=0.5)
        assert err < 1e-4

    def test_error_shrinks_quadratically(self, sample):
        params = small_params(scale=0.3)
        errors = []
        for eps in (1e-2, 5e-3):
            _, det = gradient_check(params, sample, eps=eps, n_params=200, return_details=True)
            errors.append(np.abs(det["analytic"] - det["numeric"]).max())
        assert 3.0 < errors[0] / errors[1] < 5.0

    def test_alignment_requires_hr(self, sample):
        with pytest.raises(ValueError):
            loss_and_grads(small_params(), *sample, alignment_weight=0.1)


class TestAdam:
    def test_first_step_moves_by_lr(self):
        params = small_params()
        before = params.copy()
        grads = {k: np.full_like(v, 3.0) for k, v in params.tensors.items()}
        Adam(params, lr=0.01).step(params, grads)
        for k in params.names():
            np.testing.assert_allclose(before[k] - params[k], 0.01, rtol=1e-6)


class TestEstimator:
    def test_sklearn_params(self):
        est = DegradationPromptEstimator(patch_size=4, epochs=3)
        assert est.get_params()["patch_size"] == 4
        assert clone(est).get_params() == est.get_params()

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            DegradationPromptEstimator().predict(np.zeros((1, 16, 16, 3)))

    def test_input_validation(self):
        est = DegradationPromptEstimator(patch_size=4, epochs=1, alignment_weight=0)
        with pytest.raises(ValueError):
            est.fit(np.zeros((2, 16, 16, 3)), np.zeros((2, 2), dtype=int))
        with pytest.raises(ValueError):
            est.fit(np.full((2, 16, 16, 3), 2.0), np.zeros((2, 3), dtype=int))
        with pytest.raises(ValueError):
            est.fit(np.zeros((2, 16, 16, 3)), np.full((2, 3), 4))
        with pytest.raises(ValueError):
            DegradationPromptEstimator(patch_size=4, epochs=1).fit(
                np.zeros((2, 16, 16, 3)), np.zeros((2, 3), dtype=int))

    def test_single_sample_overfit(self, natural_patch):
        from degprompt.dataset import generate_triplet
        record, lr = generate_triplet(natural_patch, 0, 0)
        y = np.array([[3, 0, 2]]) if record.intervals == (0, 0, 0) else np.array([record.intervals])
        est = DegradationPromptEstimator(patch_size=4, epochs=200, batch_size=1, alignment_weight=0)
        est.fit(lr[None], y)
        np.testing.assert_array_equal(est.predict(lr[None]), y)

    def test_seeded_rerun_identical(self, rng):
        X = rng.random((20, 16, 16, 3))
        y = rng.integers(0, 4, size=(20, 3))
        X_hr = rng.random((20, 64, 64, 3))
        a = DegradationPromptEstimator(patch_size=8, epochs=3, batch_size=8).fit(X, y, X_hr=X_hr)
        b = DegradationPromptEstimator(patch_size=8, epochs=3, batch_size=8).fit(X, y, X_hr=X_hr)
        assert a.history_["train_loss"] == b.history_["train_loss"]
        for k in a.params_.names():
            np.testing.assert_array_equal(a.params_[k], b.params_[k])

    def test_loss_decreases(self, rng):
        X = rng.random((64, 16, 16, 3)) * 0.2
        y = np.zeros((64, 3), dtype=int)
        y[32:] = 3
        X[32:] += 0.7
        est = DegradationPromptEstimator(patch_size=8, epochs=5, batch_size=16, alignment_weight=0)
        est.fit(X, y)
        assert est.history_["train_loss"][-1] < est.history_["initial_loss"]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_aborts(self, rng):
        est = DegradationPromptEstimator(patch_size=8, epochs=2, learning_rate=1e300,
                                         init_scale=1e150, alignment_weight=0)
        with pytest.raises(FloatingPointError):
            est.fit(rng.random((4, 16, 16, 3)), rng.integers(0, 4, size=(4, 3)))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = small_params()
        save_params(params, tmp_path / "p.json", {"note": "x"})
        loaded = load_params(tmp_path / "p.json")
        assert loaded.names() == params.names()
        for k in params.names():
            np.testing.assert_array_equal(loaded[k], params[k])

    def test_bad_format(self, tmp_path):
        (tmp_path / "p.json").write_text('{"format": "other", "version": 1}')
        with pytest.raises(ValueError):
            load_params(tmp_path / "p.json")

    def test_estimate_is_vocabulary(self, natural_patch):
        params = DecoderParams.initialize(4, 3, 8, None, 12, seed=3)
        prompt = estimate(natural_patch[:16, :16], params)
        assert parse_prompt(prompt.text) == prompt.intervals


class TestTrainFromManifest:
    def test_train_and_history(self, small_corpus, tmp_path):
        from degprompt.dataset import DatasetConfig, build_dataset
        manifest = build_dataset(small_corpus, tmp_path, DatasetConfig(hr_patch_size=32, patches_per_image=4))
        cfg = TrainConfig(epochs=2, patch_size=4, d_model=8, ffn_hidden=8, batch_size=4)
        params, history = train(manifest, cfg)
        assert len(history["train_loss"]) == 2 and len(history["val_accuracy"]) == 2
        params.validate()
        again, _ = train(manifest, cfg)
        for k in params.names():
            np.testing.assert_array_equal(params[k], again[k])

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0)
        with pytest.raises(ValueError):
            TrainConfig(alignment_weight=-1)


def test_memorizes_small_training_set(small_corpus, tmp_path):
    from degprompt.dataset import DatasetConfig, build_dataset, read_manifest, records_labels
    from degprompt.imaging import load_image

    manifest = build_dataset(small_corpus, tmp_path, DatasetConfig(hr_patch_size=64, patches_per_image=6))
    records = read_manifest(manifest)[:16]
    X = np.stack([load_image(tmp_path / r.lr_path) for r in records])
    y = records_labels(records)
    est = DegradationPromptEstimator(patch_size=4, epochs=600, batch_size=16, alignment_weight=0)
    est.fit(X, y)
    assert np.all((est.predict(X) == y).mean(axis=0) > 0.9)
