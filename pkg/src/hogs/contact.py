"""Sparse-view contact prediction: attention over per-view features, mean
fusion, and a per-vertex sigmoid classifier trained against oracle labels.

Per-view features stand in for a frozen image encoder: a fixed random
projection of the (occlusion-masked) true contact indicator plus view noise,
so no single view carries the full label and fusion is genuinely required.

Summations inside attention and fusion run in a canonical row order (rows
sorted lexicographically), which makes predictions bitwise invariant to any
permutation of the input views.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mathcore import softmax, softmax_backward
from .physics import ContactSet
from .util import read_header_block, write_header_block

WEIGHTS_VERSION = 1


@dataclass
class FeatureSet:
    features: np.ndarray  # (N views, D)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or len(self.features) < 1:
            raise ValueError("features must be (N >= 1, D)")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")

    @property
    def n_views(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class AttentionWeights:
    w_q: np.ndarray  # (D, Dp)
    w_k: np.ndarray
    w_v: np.ndarray
    classifier_w: np.ndarray  # (Dp, V)
    classifier_b: np.ndarray  # (V,)

    def __post_init__(self):
        for name in ("w_q", "w_k", "w_v", "classifier_w", "classifier_b"):
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float64))
        d, dp = self.w_q.shape
        if self.w_k.shape != (d, dp) or self.w_v.shape != (d, dp):
            raise ValueError("query/key/value projections must share one shape")
        if self.classifier_w.shape[0] != dp:
            raise ValueError("classifier input does not chain with the projected dim")
        if self.classifier_b.shape != (self.classifier_w.shape[1],):
            raise ValueError("classifier bias shape mismatch")

    @property
    def feature_dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def projected_dim(self) -> int:
        return self.w_q.shape[1]

    @property
    def vertex_count(self) -> int:
        return self.classifier_w.shape[1]

    @classmethod
    def create(cls, feature_dim: int, projected_dim: int, vertex_count: int, seed: int = 0) -> "AttentionWeights":
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(feature_dim)
        return cls(
            rng.normal(0, scale, (feature_dim, projected_dim)),
            rng.normal(0, scale, (feature_dim, projected_dim)),
            rng.normal(0, scale, (feature_dim, projected_dim)),
            rng.normal(0, 1.0 / np.sqrt(projected_dim), (projected_dim, vertex_count)),
            np.zeros(vertex_count),
        )

    def copy(self) -> "AttentionWeights":
        return AttentionWeights(
            self.w_q.copy(), self.w_k.copy(), self.w_v.copy(),
            self.classifier_w.copy(), self.classifier_b.copy(),
        )

    def save(self, path: str | Path) -> None:
        header = {
            "version": WEIGHTS_VERSION,
            "feature_dim": self.feature_dim,
            "projected_dim": self.projected_dim,
            "vertex_count": self.vertex_count,
        }
        payload = b"".join(
            a.astype("<f8").tobytes()
            for a in (self.w_q, self.w_k, self.w_v, self.classifier_w, self.classifier_b)
        )
        write_header_block(path, header, payload)

    @classmethod
    def load(cls, path: str | Path) -> "AttentionWeights":
        header, payload = read_header_block(path)
        if header.get("version") != WEIGHTS_VERSION:
            raise ValueError("attention weights version mismatch")
        d = header["feature_dim"]
        dp = header["projected_dim"]
        v = header["vertex_count"]
        arr = np.frombuffer(payload, dtype="<f8")
        sizes = [d * dp, d * dp, d * dp, dp * v, v]
        parts = np.split(arr, np.cumsum(sizes)[:-1])
        return cls(
            parts[0].reshape(d, dp), parts[1].reshape(d, dp), parts[2].reshape(d, dp),
            parts[3].reshape(dp, v), parts[4].copy(),
        )


def _canonical_order(features: np.ndarray) -> np.ndarray:
    """Lexicographic row order; ties are bitwise-equal rows, so order among
    them cannot change any sum."""
    return np.lexsort(features.T[::-1])


def _attention_sorted(fs: np.ndarray, w: AttentionWeights, scale_dim: str):
    q = fs @ w.w_q
    k = fs @ w.w_k
    v = fs @ w.w_v
    dim = w.projected_dim if scale_dim == "projected" else w.feature_dim
    scores = q @ k.T / np.sqrt(dim)
    attn = softmax(scores, axis=-1)
    return q, k, v, scores, attn, attn @ v


def cross_view_attention(f: FeatureSet, w: AttentionWeights, scale_dim: str = "projected") -> np.ndarray:
    """Scaled dot-product attention over views; rows map back to input order.

    scale_dim selects whether the score scaling uses the projected dimension
    (default) or the raw feature dimension.
    """
    if f.dim != w.feature_dim:
        raise ValueError("feature dimension does not match the projections")
    order = _canonical_order(f.features)
    _, _, _, _, _, out_sorted = _attention_sorted(f.features[order], w, scale_dim)
    out = np.empty_like(out_sorted)
    out[order] = out_sorted
    return out


def fuse(f_att: np.ndarray) -> np.ndarray:
    """Mean over the view dimension, summed in canonical row order."""
    f_att = np.asarray(f_att, dtype=np.float64)
    if f_att.ndim != 2 or len(f_att) < 1:
        raise ValueError("expected (N >= 1, Dp) attention output")
    order = _canonical_order(f_att)
    return f_att[order].sum(axis=0) / len(f_att)


def classify(f_fuse: np.ndarray, w: AttentionWeights, tau: float = 0.5):
    """Per-vertex contact probabilities and the strict-threshold index set."""
    logits = f_fuse @ w.classifier_w + w.classifier_b
    probs = 1.0 / (1.0 + np.exp(-logits))
    return probs, ContactSet(np.flatnonzero(probs > tau))


def predict_contacts(f: FeatureSet, w: AttentionWeights, tau: float = 0.5, scale_dim: str = "projected"):
    return classify(fuse(cross_view_attention(f, w, scale_dim)), w, tau)


def bce_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    p = np.clip(probs, 1e-12, 1 - 1e-12)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def _forward_backward(f: FeatureSet, labels: np.ndarray, w: AttentionWeights, scale_dim: str):
    """Full-chain BCE loss and gradients wrt every trainable matrix."""
    order = _canonical_order(f.features)
    fs = f.features[order]
    q, k, v, _, attn, att_out = _attention_sorted(fs, w, scale_dim)
    fused = att_out.sum(axis=0) / len(fs)
    logits = fused @ w.classifier_w + w.classifier_b
    probs = 1.0 / (1.0 + np.exp(-logits))
    loss = bce_loss(probs, labels)

    y = np.asarray(labels, dtype=np.float64)
    d_logits = (probs - y) / len(y)
    d_cw = np.outer(fused, d_logits)
    d_cb = d_logits
    d_fused = w.classifier_w @ d_logits
    d_att_out = np.tile(d_fused / len(fs), (len(fs), 1))

    dim = w.projected_dim if scale_dim == "projected" else w.feature_dim
    d_v = attn.T @ d_att_out
    d_attn = d_att_out @ v.T
    d_scores = softmax_backward(attn, d_attn, axis=-1) / np.sqrt(dim)
    d_q = d_scores @ k
    d_k = d_scores.T @ q
    d_wq = fs.T @ d_q
    d_wk = fs.T @ d_k
    d_wv = fs.T @ d_v
    grads = {"w_q": d_wq, "w_k": d_wk, "w_v": d_wv, "classifier_w": d_cw, "classifier_b": d_cb}
    return loss, grads, probs


def contact_f1(predicted: ContactSet, truth: ContactSet, vertex_count: int) -> float:
    pred = np.zeros(vertex_count, bool)
    pred[predicted.indices] = True
    true = np.zeros(vertex_count, bool)
    true[truth.indices] = True
    tp = np.count_nonzero(pred & true)
    fp = np.count_nonzero(pred & ~true)
    fn = np.count_nonzero(~pred & true)
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def train_contact(
    dataset: list[tuple[FeatureSet, np.ndarray]],
    w: AttentionWeights,
    epochs: int = 200,
    lr: float = 1e-2,
    scale_dim: str = "projected",
) -> tuple[AttentionWeights, list[float]]:
    """Full-batch Adam on BCE; only the attention projections and classifier
    update, features are never touched."""
    if not dataset:
        raise ValueError("dataset must not be empty")
    w = w.copy()
    names = ["w_q", "w_k", "w_v", "classifier_w", "classifier_b"]
    m = {n: np.zeros_like(getattr(w, n)) for n in names}
    v = {n: np.zeros_like(getattr(w, n)) for n in names}
    b1, b2, eps = 0.9, 0.999, 1e-8
    history = []
    for epoch in range(epochs):
        total = 0.0
        acc = {n: np.zeros_like(getattr(w, n)) for n in names}
        for feats, labels in dataset:
            loss, grads, _ = _forward_backward(feats, labels, w, scale_dim)
            total += loss
            for n in names:
                acc[n] += grads[n]
        total /= len(dataset)
        history.append(total)
        t = epoch + 1
        for n in names:
            g = acc[n] / len(dataset)
            m[n] = b1 * m[n] + (1 - b1) * g
            v[n] = b2 * v[n] + (1 - b2) * g**2
            mhat = m[n] / (1 - b1**t)
            vhat = v[n] / (1 - b2**t)
            setattr(w, n, getattr(w, n) - lr * mhat / (np.sqrt(vhat) + eps))
    return w, history


@dataclass
class FeatureEncoder:
    """Frozen stand-in for a per-view image encoder.

    Each view permanently misses a camera-dependent subset of vertices
    (occlusion) and sees the remaining contact indicator through a fixed
    random projection plus per-frame noise. No single view covers the body,
    so multi-view fusion is genuinely required. Nothing here ever trains.
    """

    projection: np.ndarray  # (D, V)
    view_masks: np.ndarray  # (N views, V) fixed per-view visibility
    noise_sigma: float = 0.05

    @classmethod
    def create(cls, feature_dim: int, vertex_count: int, n_views: int, seed: int = 0,
               noise_sigma: float = 0.05, keep_prob: float = 0.6) -> "FeatureEncoder":
        rng = np.random.default_rng(seed)
        proj = rng.normal(0, 1.0 / np.sqrt(vertex_count), (feature_dim, vertex_count))
        masks = rng.uniform(size=(n_views, vertex_count)) < keep_prob
        return cls(proj, masks, noise_sigma)

    def encode(self, labels: np.ndarray, rng: np.random.Generator) -> FeatureSet:
        y = np.asarray(labels, dtype=np.float64)
        rows = []
        for mask in self.view_masks:
            seen = y * mask
            noise = rng.normal(0, self.noise_sigma, self.projection.shape[0])
            rows.append(self.projection @ seen + noise)
        return FeatureSet(np.stack(rows))
