"""Prompt-query cross-attention decoder that retrieves degradation intervals.

Twelve learned query rows (3 degradation types x 4 intervals) attend over
linearly embedded LR patch tokens through two residual blocks of
cross-attention followed by a GELU feed-forward layer. Each query row is
scored by its type's linear head, giving a 3x4 logit matrix; the
prediction per type is the arg-max interval.

Training minimizes the mean per-type softmax cross-entropy plus an
optional feature-alignment term that pulls LR tokens toward the tokens of
the matching HR region.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .imaging import check_image, load_image, rng_for
from .kernels import (
    cross_attention,
    cross_attention_backward,
    gelu,
    gelu_backward,
    softmax_rows,
)
from .prompts import N_INTERVALS, RestorationPrompt, serialize_prompt

logger = logging.getLogger(__name__)

__all__ = [
    "N_TYPES",
    "N_QUERIES",
    "CHECKPOINT_FORMAT",
    "CHECKPOINT_VERSION",
    "DecoderParams",
    "TrainConfig",
    "EstimatorOutput",
    "extract_patches",
    "pool_patches",
    "tokenize_image",
    "decoder_forward",
    "decoder_logits",
    "retrieval_loss",
    "feature_alignment_loss",
    "loss_and_grads",
    "Adam",
    "DegradationPromptEstimator",
    "train",
    "estimate",
    "gradient_check",
    "save_params",
    "load_params",
]

N_TYPES = 3
N_QUERIES = N_TYPES * N_INTERVALS
CHECKPOINT_FORMAT = "degprompt-decoder"
CHECKPOINT_VERSION = 1
N_BLOCKS = 2
_PARAM_DOMAIN = 11
_SHUFFLE_DOMAIN = 12


def _is_bias(name):
    return name.endswith("bias") or name.endswith("_b1") or name.endswith("_b2")


@dataclass
class DecoderParams:
    """Named float64 tensors of the decoder.

    Query rows 0-3 belong to blur, 4-7 to noise and 8-11 to JPEG.
    """

    tensors: dict
    patch_size: int
    channels: int

    @property
    def d_model(self):
        return self.tensors["prompt_queries"].shape[1]

    @property
    def d_attn(self):
        return self.tensors["blocks.0.w_q"].shape[1]

    @property
    def ffn_hidden(self):
        return self.tensors["blocks.0.ffn_w1"].shape[1]

    @classmethod
    def shapes(cls, patch_size, channels, d_model=64, d_attn=None, ffn_hidden=128):
        d_attn = d_model if d_attn is None else d_attn
        p_dim = patch_size * patch_size * channels
        shapes = {
            "patch_embed.weight": (p_dim, d_model),
            "patch_embed.bias": (d_model,),
            "prompt_queries": (N_QUERIES, d_model),
        }
        for b in range(N_BLOCKS):
            shapes.update({
                f"blocks.{b}.w_q": (d_model, d_attn),
                f"blocks.{b}.w_k": (d_model, d_attn),
                f"blocks.{b}.w_v": (d_model, d_attn),
                f"blocks.{b}.w_o": (d_attn, d_model),
                f"blocks.{b}.ffn_w1": (d_model, ffn_hidden),
                f"blocks.{b}.ffn_b1": (ffn_hidden,),
                f"blocks.{b}.ffn_w2": (ffn_hidden, d_model),
                f"blocks.{b}.ffn_b2": (d_model,),
            })
        shapes["score_heads.weight"] = (N_TYPES, d_model)
        shapes["score_heads.bias"] = (N_TYPES,)
        return shapes

    @classmethod
    def initialize(cls, patch_size, channels, d_model=64, d_attn=None, ffn_hidden=128,
                   seed=0, scale=0.02):
        """Weights ``scale * N(0, 1)``, biases zero, drawn in name order."""
        rng = rng_for(seed, 0, _PARAM_DOMAIN)
        tensors = {}
        for name, shape in cls.shapes(patch_size, channels, d_model, d_attn, ffn_hidden).items():
            if _is_bias(name):
                tensors[name] = np.zeros(shape)
            else:
                tensors[name] = scale * rng.draw_gaussian(shape)
        return cls(tensors, patch_size, channels)

    def copy(self):
        return DecoderParams({k: v.copy() for k, v in self.tensors.items()},
                             self.patch_size, self.channels)

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def n_parameters(self):
        return int(sum(v.size for v in self.tensors.values()))

    def validate(self):
        expected = self.shapes(self.patch_size, self.channels, self.d_model, self.d_attn, self.ffn_hidden)
        if list(expected) != list(self.tensors):
            raise ValueError("parameter names do not match the decoder layout")
        for name, shape in expected.items():
            t = self.tensors[name]
            if t.shape != shape:
                raise ValueError(f"{name} has shape {t.shape}, expected {shape}")
            if not np.all(np.isfinite(t)):
                raise ValueError(f"{name} contains non-finite values")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    patch_size: int = 8
    d_model: int = 64
    ffn_hidden: int = 128
    alignment_weight: float = 0.1
    init_scale: float = 0.02

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1 or self.patch_size < 1:
            raise ValueError("learning rate, batch size, epochs and patch size must be positive")
        if self.alignment_weight < 0:
            raise ValueError("alignment_weight must be non-negative")


@dataclass(frozen=True)
class EstimatorOutput:
    logits: np.ndarray
    predicted: RestorationPrompt


# --- tokenization -----------------------------------------------------------

def extract_patches(img, p):
    """Non-overlapping ``p x p`` patches in raster order, flattened ``(py, px, c)``.

    Accepts one image ``(H, W, C)`` or a batch ``(N, H, W, C)``.
    """
    arr = np.asarray(img, dtype=np.float64)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    n, h, w, c = arr.shape
    if h % p or w % p:
        raise ValueError(f"image size {w}x{h} is not divisible by patch size {p}")
    out = arr.reshape(n, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    out = out.reshape(n, (h // p) * (w // p), p * p * c)
    return out[0] if single else out


def pool_patches(hr, p, scale):
    """HR tokens aligned with LR tokens: ``(p*scale)``-patches area-pooled to ``p x p``."""
    arr = np.asarray(hr, dtype=np.float64)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    n, h, w, c = arr.shape
    if h % scale or w % scale:
        raise ValueError(f"HR size {w}x{h} is not divisible by scale {scale}")
    pooled = arr.reshape(n, h // scale, scale, w // scale, scale, c).mean(axis=(2, 4))
    out = extract_patches(pooled, p)
    return out[0] if single else out


def tokenize_image(lr, p, params: DecoderParams):
    """Embed the patches of one LR image: ``(tokens, d_model)``."""
    patches = extract_patches(check_image(lr, name="lr"), p)
    if patches.shape[-1] != params["patch_embed.weight"].shape[0]:
        raise ValueError("patch size / channels do not match the parameters")
    return patches @ params["patch_embed.weight"] + params["patch_embed.bias"]


# --- forward / backward -------------------------------------------------------

def _forward(X, params: DecoderParams):
    """Batched forward over raw patches ``X`` of shape ``(B, T, P)``."""
    t = params.tensors
    E = X @ t["patch_embed.weight"] + t["patch_embed.bias"]
    logits, (caches, Qt) = _decode(E, params)
    return logits, (X, E, caches, Qt)


def _decode(E, params: DecoderParams):
    """The two blocks and score heads over embedded tokens ``(B, T, D)``."""
    t = params.tensors
    Q = np.broadcast_to(t["prompt_queries"], (E.shape[0],) + t["prompt_queries"].shape)
    caches = []
    for b in range(N_BLOCKS):
        pre = f"blocks.{b}."
        q = Q @ t[pre + "w_q"]
        k = E @ t[pre + "w_k"]
        v = E @ t[pre + "w_v"]
        attn, attn_cache = cross_attention(q, k, v, q.shape[-1])
        Q1 = Q + attn @ t[pre + "w_o"]
        z = Q1 @ t[pre + "ffn_w1"] + t[pre + "ffn_b1"]
        h = gelu(z)
        Q2 = Q1 + h @ t[pre + "ffn_w2"] + t[pre + "ffn_b2"]
        caches.append((Q, q, k, v, attn, attn_cache, Q1, z, h))
        Q = Q2
    Qt = Q.reshape(E.shape[0], N_TYPES, N_INTERVALS, -1)
    logits = np.einsum("btid,td->bti", Qt, t["score_heads.weight"]) + t["score_heads.bias"][:, None]
    return logits, (caches, Qt)


def _backward(d_logits, cache, params: DecoderParams):
    t = params.tensors
    X, E, caches, Qt = cache
    g = {}
    g["score_heads.weight"] = np.einsum("bti,btid->td", d_logits, Qt)
    g["score_heads.bias"] = d_logits.sum(axis=(0, 2))
    dQ = np.einsum("bti,td->btid", d_logits, t["score_heads.weight"]).reshape(X.shape[0], N_QUERIES, -1)
    dE = np.zeros_like(E)
    for b in reversed(range(N_BLOCKS)):
        pre = f"blocks.{b}."
        Q, q, k, v, attn, attn_cache, Q1, z, h = caches[b]
        # Q2 = Q1 + h W2 + b2
        g[pre + "ffn_w2"] = np.einsum("bnh,bnd->hd", h, dQ)
        g[pre + "ffn_b2"] = dQ.sum(axis=(0, 1))
        dz = gelu_backward(z, dQ @ t[pre + "ffn_w2"].T)
        g[pre + "ffn_w1"] = np.einsum("bnd,bnh->dh", Q1, dz)
        g[pre + "ffn_b1"] = dz.sum(axis=(0, 1))
        dQ1 = dQ + dz @ t[pre + "ffn_w1"].T
        # Q1 = Q + attn Wo
        g[pre + "w_o"] = np.einsum("bna,bnd->ad", attn, dQ1)
        d_attn = dQ1 @ t[pre + "w_o"].T
        dq, dk, dv = cross_attention_backward(attn_cache, d_attn)
        g[pre + "w_q"] = np.einsum("bnd,bna->da", Q, dq)
        g[pre + "w_k"] = np.einsum("btd,bta->da", E, dk)
        g[pre + "w_v"] = np.einsum("btd,bta->da", E, dv)
        dE += dk @ t[pre + "w_k"].T + dv @ t[pre + "w_v"].T
        dQ = dQ1 + dq @ t[pre + "w_q"].T
    g["prompt_queries"] = dQ.sum(axis=0)
    g["patch_embed.weight"] = np.einsum("btp,btd->pd", X, dE)
    g["patch_embed.bias"] = dE.sum(axis=(0, 1))
    return {name: g[name] for name in t}


def _argmax_low(logits):
    # np.argmax returns the first maximum, i.e. the lower interval on ties
    return np.argmax(logits, axis=-1)


def decoder_logits(patches, params: DecoderParams):
    """Logits ``(B, 3, 4)`` for raw patch batches ``(B, T, P)``."""
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 3 or patches.shape[-1] != params["patch_embed.weight"].shape[0]:
        raise ValueError(f"patch batch has shape {patches.shape}, incompatible with the parameters")
    return _forward(patches, params)[0]


def decoder_forward(tokens, params: DecoderParams):
    """Run both decoder blocks on already-embedded tokens ``(T, d_model)``."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[1] != params.d_model:
        raise ValueError(f"tokens must have shape (T, {params.d_model}), got {tokens.shape}")
    logits = _decode(tokens[None], params)[0][0]
    return EstimatorOutput(logits, RestorationPrompt(*(int(i) for i in _argmax_low(logits))))


def _log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def retrieval_loss(logits, labels):
    """Mean over the three types of cross-entropy against the true interval."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.shape[-2:] != (N_TYPES, N_INTERVALS) or labels.shape[-1] != N_TYPES:
        raise ValueError(f"expected logits (..., 3, 4) and labels (..., 3), got {logits.shape}, {labels.shape}")
    if labels.min() < 0 or labels.max() >= N_INTERVALS:
        raise ValueError("labels must be interval indices in 0..3")
    logp = _log_softmax(logits)
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    return float(-picked.mean())


def feature_alignment_loss(tokens_lr, tokens_hr):
    """Mean squared difference between LR and HR token matrices."""
    a = np.asarray(tokens_lr, dtype=np.float64)
    b = np.asarray(tokens_hr, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"token shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def loss_and_grads(params: DecoderParams, X, y, X_hr=None, alignment_weight=0.0):
    """Batch-mean objective and its gradient for every parameter tensor.

    ``X``: LR patches ``(B, T, P)``; ``y``: labels ``(B, 3)``; ``X_hr``:
    pooled HR patches with the same shape as ``X`` (needed only when
    ``alignment_weight > 0``).
    """
    B = X.shape[0]
    logits, cache = _forward(X, params)
    loss = retrieval_loss(logits, y)
    probs = softmax_rows(logits)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, y[..., None], 1.0, axis=-1)
    d_logits = (probs - onehot) / (B * N_TYPES)
    grads = _backward(d_logits, cache, params)
    if alignment_weight > 0:
        if X_hr is None:
            raise ValueError("HR patches are required when alignment_weight > 0")
        W = params["patch_embed.weight"]
        diff = (X - X_hr) @ W  # bias cancels
        n_per = diff.shape[1] * diff.shape[2]
        loss += alignment_weight * float(np.mean(diff ** 2))
        d_diff = alignment_weight * 2.0 * diff / (B * n_per)
        grads["patch_embed.weight"] = grads["patch_embed.weight"] + \
            np.einsum("btp,btd->pd", X - X_hr, d_diff)
    return loss, grads


class Adam:
    """Adam with bias correction over a dict of named tensors."""

    def __init__(self, params: DecoderParams, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.t = 0

    def step(self, params: DecoderParams, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, w in params.tensors.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            w -= self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


def _check_batch(X, name="X"):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] not in (1, 3):
        raise ValueError(f"{name} must be images shaped (n, H, W, C), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(X)) or X.min() < 0.0 or X.max() > 1.0:
        raise ValueError(f"{name} values must be finite and lie in [0, 1]")
    return X


def _check_labels(y, n):
    y = np.asarray(y)
    if y.shape != (n, N_TYPES):
        raise ValueError(f"labels must have shape ({n}, {N_TYPES}), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer) or y.min() < 0 or y.max() >= N_INTERVALS:
        raise ValueError("labels must be interval indices in 0..3")
    return y.astype(np.int64)


class DegradationPromptEstimator(ClassifierMixin, BaseEstimator):
    """Predicts the blur / noise / JPEG interval triple of LR images.

    ``X`` is a batch of LR images ``(n, H, W, C)`` in [0, 1]; ``y`` holds
    interval indices ``(n, 3)`` in blur, noise, JPEG order.

    Parameters
    ----------
    patch_size : int
        Side of the non-overlapping token patches.
    d_model, d_attn, ffn_hidden : int
        Token width, attention projection width (defaults to ``d_model``)
        and feed-forward hidden width.
    learning_rate, batch_size, epochs, beta1, beta2, adam_eps
        Adam settings.
    alignment_weight : float
        Weight of the LR/HR token alignment term; needs ``X_hr`` in ``fit``.
    init_scale : float
        Std-dev of the Gaussian weight initialization.
    random_state : int
        Seeds initialization and per-epoch shuffling.
    """

    def __init__(self, patch_size=8, d_model=64, d_attn=None, ffn_hidden=128,
                 learning_rate=1e-3, batch_size=32, epochs=20, beta1=0.9, beta2=0.999,
                 adam_eps=1e-8, alignment_weight=0.1, init_scale=0.02, random_state=0,
                 verbose=False):
        self.patch_size = patch_size
        self.d_model = d_model
        self.d_attn = d_attn
        self.ffn_hidden = ffn_hidden
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.beta1 = beta1
        self.beta2 = beta2
        self.adam_eps = adam_eps
        self.alignment_weight = alignment_weight
        self.init_scale = init_scale
        self.random_state = random_state
        self.verbose = verbose

    @classmethod
    def from_config(cls, cfg: TrainConfig, **kwargs):
        return cls(patch_size=cfg.patch_size, d_model=cfg.d_model, ffn_hidden=cfg.ffn_hidden,
                   learning_rate=cfg.learning_rate, batch_size=cfg.batch_size, epochs=cfg.epochs,
                   beta1=cfg.beta1, beta2=cfg.beta2, adam_eps=cfg.adam_eps,
                   alignment_weight=cfg.alignment_weight, init_scale=cfg.init_scale,
                   random_state=cfg.seed, **kwargs)

    @classmethod
    def from_params(cls, params: DecoderParams, **kwargs):
        est = cls(patch_size=params.patch_size, d_model=params.d_model, d_attn=params.d_attn,
                  ffn_hidden=params.ffn_hidden, **kwargs)
        params.validate()
        est.params_ = params
        est.classes_ = np.arange(N_INTERVALS)
        est.history_ = {}
        return est

    def _patches(self, X):
        return extract_patches(X, self.patch_size)

    def fit(self, X, y, X_hr=None, X_val=None, y_val=None, scale=4):
        """Train from scratch.

        ``X_hr`` holds the matching HR images (``scale`` times larger) for
        the alignment term. ``X_val``/``y_val`` add a per-epoch validation
        accuracy to ``history_``.
        """
        X = _check_batch(X)
        y = _check_labels(y, X.shape[0])
        P = self._patches(X)
        P_hr = None
        if self.alignment_weight > 0:
            if X_hr is None:
                raise ValueError("X_hr is required when alignment_weight > 0")
            X_hr = _check_batch(X_hr, "X_hr")
            P_hr = pool_patches(X_hr, self.patch_size, scale)
            if P_hr.shape != P.shape:
                raise ValueError(f"HR tokens {P_hr.shape} do not align with LR tokens {P.shape}")
        P_val = self._patches(_check_batch(X_val, "X_val")) if X_val is not None else None
        if P_val is not None:
            y_val = _check_labels(y_val, P_val.shape[0])

        params = DecoderParams.initialize(self.patch_size, X.shape[-1], self.d_model, self.d_attn,
                                          self.ffn_hidden, seed=self.random_state, scale=self.init_scale)
        opt = Adam(params, self.learning_rate, self.beta1, self.beta2, self.adam_eps)
        n = P.shape[0]
        history = {"initial_loss": self._objective(params, P, y, P_hr),
                   "train_loss": [], "val_accuracy": []}
        for epoch in range(self.epochs):
            order = rng_for(self.random_state, epoch, _SHUFFLE_DOMAIN).permutation(n)
            total = 0.0
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                loss, grads = loss_and_grads(params, P[idx], y[idx],
                                             None if P_hr is None else P_hr[idx], self.alignment_weight)
                if not math.isfinite(loss):
                    raise FloatingPointError(
                        f"non-finite loss {loss} at epoch {epoch + 1}, batch starting at {start}")
                opt.step(params, grads)
                total += loss * len(idx)
            history["train_loss"].append(total / n)
            if P_val is not None:
                pred = _argmax_low(decoder_logits(P_val, params))
                history["val_accuracy"].append((pred == y_val).mean(axis=0).tolist())
            if self.verbose:
                logger.info("epoch %d loss %.5f", epoch + 1, history["train_loss"][-1])
        self.params_ = params
        self.history_ = history
        self.classes_ = np.arange(N_INTERVALS)
        return self

    def _objective(self, params, P, y, P_hr):
        total = 0.0
        for start in range(0, P.shape[0], 256):
            sl = slice(start, start + 256)
            loss, _ = loss_and_grads(params, P[sl], y[sl], None if P_hr is None else P_hr[sl],
                                     self.alignment_weight)
            total += loss * P[sl].shape[0]
        return total / P.shape[0]

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("this estimator has not been fitted yet")

    def decision_function(self, X):
        """Logits ``(n, 3, 4)``."""
        self._check_fitted()
        P = self._patches(_check_batch(X))
        return np.concatenate([decoder_logits(P[s:s + 256], self.params_)
                               for s in range(0, P.shape[0], 256)])

    def predict(self, X):
        """Interval triples ``(n, 3)``; ties go to the lower interval."""
        return _argmax_low(self.decision_function(X))

    def predict_prompt(self, X):
        return [serialize_prompt(*(int(v) for v in row)) for row in self.predict(X)]

    def score(self, X, y, sample_weight=None):
        """Mean over the three types of per-type accuracy."""
        y = _check_labels(y, np.asarray(X).shape[0] if np.asarray(X).ndim == 4 else 1)
        return float((self.predict(X) == y).mean())


def _load_split(records, root, split, need_hr):
    chosen = [r for r in records if split is None or r.split == split]
    X = np.stack([load_image(Path(root) / r.lr_path) for r in chosen]) if chosen else None
    X_hr = np.stack([load_image(Path(root) / r.hr_path) for r in chosen]) if chosen and need_hr else None
    y = np.array([r.intervals for r in chosen], dtype=np.int64).reshape(-1, N_TYPES)
    return X, X_hr, y


def train(manifest, cfg: TrainConfig):
    """Fit on the manifest's train split; returns ``(params, history)``.

    The val split, when present, is scored each epoch.
    """
    from .dataset import read_manifest, read_manifest_header

    manifest = Path(manifest)
    records = read_manifest(manifest)
    if not records:
        raise ValueError(f"manifest {manifest} has no records")
    root = manifest.parent
    scale = read_manifest_header(manifest).get("config", {}).get("final_scale",
                                                                  records[0].recipe.final_scale)
    X, X_hr, y = _load_split(records, root, "train", cfg.alignment_weight > 0)
    if X is None:
        raise ValueError(f"manifest {manifest} has no train records")
    X_val, _, y_val = _load_split(records, root, "val", False)
    est = DegradationPromptEstimator.from_config(cfg)
    est.fit(X, y, X_hr=X_hr, X_val=X_val, y_val=y_val if X_val is not None else None, scale=scale)
    return est.params_, est.history_


def estimate(lr, params: DecoderParams):
    """The vocabulary prompt best aligned with one LR image."""
    patches = extract_patches(check_image(lr, name="lr"), params.patch_size)
    logits = decoder_logits(patches[None], params)[0]
    return RestorationPrompt(*(int(i) for i in _argmax_low(logits)))


def _flat_index(params, rng, n):
    names = params.names()
    sizes = np.array([params[k].size for k in names])
    total = int(sizes.sum())
    picks = rng.permutation(total)[:min(n, total)]
    bounds = np.cumsum(sizes)
    out = []
    for flat in sorted(int(i) for i in picks):
        j = int(np.searchsorted(bounds, flat, side="right"))
        offset = flat - (bounds[j - 1] if j else 0)
        out.append((names[j], np.unravel_index(offset, params[names[j]].shape)))
    return out


def gradient_check(params: DecoderParams, sample, eps=1e-5, n_params=200, seed=0,
                   alignment_weight=0.0, abs_floor=1e-6, return_details=False):
    """Largest relative error between analytic and central-difference gradients.

    ``sample`` is ``(X, y)`` or ``(X, y, X_hr)`` with raw patch batches
    ``(B, T, P)``. ``n_params`` coordinates are drawn without replacement
    across all tensors. Per coordinate the error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, abs_floor)``.

    The floor exists because central differences cannot resolve gradients
    much below ``u * |loss| / eps`` (about 1e-11 at ``eps=1e-5``); some
    coordinates, such as the score-head biases, are exactly zero by shift
    invariance of the loss.
    """
    X, y = np.asarray(sample[0], dtype=np.float64), np.asarray(sample[1], dtype=np.int64)
    X_hr = sample[2] if len(sample) > 2 else None
    if X.ndim == 2:
        X, y = X[None], y[None]
    work = params.copy()
    _, grads = loss_and_grads(work, X, y, X_hr, alignment_weight)
    rng = rng_for(seed, 0, 99)
    analytic, numeric = [], []
    for name, idx in _flat_index(work, rng, n_params):
        t = work.tensors[name]
        orig = t[idx]
        t[idx] = orig + eps
        lp, _ = loss_and_grads(work, X, y, X_hr, alignment_weight)
        t[idx] = orig - eps
        lm, _ = loss_and_grads(work, X, y, X_hr, alignment_weight)
        t[idx] = orig
        analytic.append(grads[name][idx])
        numeric.append((lp - lm) / (2.0 * eps))
    a, n = np.array(analytic), np.array(numeric)
    rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), abs_floor)
    if return_details:
        return float(rel.max()), {"analytic": a, "numeric": n, "relative": rel}
    return float(rel.max())


# --- checkpoints --------------------------------------------------------------

def save_params(params: DecoderParams, path, extra=None):
    """JSON checkpoint; see README ("Checkpoint format")."""
    params.validate()
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "patch_size": params.patch_size,
        "channels": params.channels,
        "meta": extra or {},
        "tensors": [
            {"name": k, "shape": list(v.shape), "data": v.ravel().tolist()}
            for k, v in params.tensors.items()
        ],
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_params(path):
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    tensors = {t["name"]: np.array(t["data"], dtype=np.float64).reshape(t["shape"])
               for t in doc["tensors"]}
    params = DecoderParams(tensors, int(doc["patch_size"]), int(doc["channels"]))
    params.validate()
    return params
