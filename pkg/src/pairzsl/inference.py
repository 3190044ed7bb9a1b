"""Eval-mode scoring, argmax prediction, label propagation, and MCA.

Scoring pairs every target image with every target category using the
target domain's global normalization statistics. Prediction is the argmax
relation score per image; an optional graph-based refinement spreads the
softmax of the logits over a mutual-kNN cosine graph of the target features.
MCA is the unweighted mean of per-class accuracies, so it is invariant to
class-size imbalance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import backend
from .data import save_matrix_mtxb
from .errors import DatasetError, ShapeError
from .layers import DomainTag
from .model import Model, build_source_pairs, build_target_pairs, encode, metric_forward
from .numerics import matmul, softmax_rows, vec_sum

log = logging.getLogger(__name__)


@dataclass
class ScoreMatrix:
    logits: np.ndarray  # (N_t, K_t)
    scores: np.ndarray  # (N_t, K_t), sigmoid of logits


@dataclass
class PredictionResult:
    predicted_labels: np.ndarray  # (N,) int64
    per_class_accuracy: np.ndarray  # (K,)
    mca: float


def score_target(model: Model, data, chunk: int = 256) -> ScoreMatrix:
    """Score every (target image, target category) pair in eval mode."""
    x_t = data.target_features
    a_t = data.target_attributes
    k_t = a_t.shape[0]
    n_t = x_t.shape[0]
    if n_t == 0 or k_t == 0:
        raise ShapeError("score_target needs non-empty target features and categories")
    encoded_t, _ = encode(model.encoder, a_t)
    logits = np.empty((n_t, k_t), dtype=np.float64)
    scores = np.empty((n_t, k_t), dtype=np.float64)
    for start in range(0, n_t, chunk):
        block = x_t[start : start + chunk]
        batch = build_target_pairs(block, encoded_t)
        z, s, _ = metric_forward(model.metric, batch, train=False)
        logits[start : start + block.shape[0]] = z.reshape(-1, k_t)
        scores[start : start + block.shape[0]] = s.reshape(-1, k_t)
    return ScoreMatrix(logits=logits, scores=scores)


def predict_argmax(scores) -> np.ndarray:
    """Index of the largest score per row; ties break to the lowest index."""
    mat = scores.scores if isinstance(scores, ScoreMatrix) else np.asarray(scores)
    if mat.ndim != 2 or mat.size == 0:
        raise ShapeError(f"predict_argmax needs a non-empty 2-D matrix, got {mat.shape}")
    return np.argmax(mat, axis=1).astype(np.int64)


def mca(predicted, truth, k_t: int) -> PredictionResult:
    """Per-class accuracies and their unweighted mean."""
    predicted = np.asarray(predicted, dtype=np.int64).reshape(-1)
    truth = np.asarray(truth, dtype=np.int64).reshape(-1)
    if predicted.shape != truth.shape:
        raise ShapeError(
            f"{predicted.shape[0]} predictions vs {truth.shape[0]} labels"
        )
    if truth.size and (truth.min() < 0 or truth.max() >= k_t):
        raise DatasetError(f"truth labels out of range [0, {k_t})")
    per_class = np.empty(k_t, dtype=np.float64)
    for c in range(k_t):
        mask = truth == c
        count = int(mask.sum())
        if count == 0:
            raise DatasetError(
                f"class {c} has no test instances; its accuracy is undefined"
            )
        per_class[c] = float((predicted[mask] == c).sum()) / count
    return PredictionResult(
        predicted_labels=predicted,
        per_class_accuracy=per_class,
        mca=vec_sum(per_class) / k_t,
    )


def mean_prediction_entropy(score_matrix: ScoreMatrix) -> float:
    """Average softmax entropy of the per-image logit rows."""
    p = softmax_rows(score_matrix.logits)
    with np.errstate(divide="ignore"):
        logp = np.log(p)
    plogp = np.where(p > 0.0, p * logp, 0.0)
    h = -backend.rowsum(plogp)
    return vec_sum(h) / h.shape[0]


def label_propagation(
    score_matrix: ScoreMatrix,
    target_features: np.ndarray,
    k: int = 10,
    omega: float = 0.9,
    iterations: int = 20,
) -> np.ndarray:
    """Spread the softmax of the logits over a mutual-kNN cosine graph.

    Builds symmetric affinities W (cosine, clipped at zero) restricted to
    mutual k-nearest-neighbor edges, normalizes S = D^-1/2 W D^-1/2, and
    iterates F <- omega * S F + (1 - omega) * Y0 from Y0 = row-softmax of the
    logits. omega = 0 returns Y0 unchanged.
    """
    x = np.ascontiguousarray(target_features, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"k must satisfy 1 <= k < {n}, got {k}")
    if not 0.0 <= omega < 1.0:
        raise ValueError(f"omega must be in [0, 1), got {omega}")
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    if score_matrix.logits.shape[0] != n:
        raise ShapeError(
            f"{score_matrix.logits.shape[0]} score rows vs {n} feature rows"
        )

    norms = np.sqrt(backend.rowsum(x * x))
    zero_rows = norms == 0.0
    if zero_rows.any():
        log.warning(
            "label_propagation: %d zero-norm feature rows get zero affinities",
            int(zero_rows.sum()),
        )
    safe = np.where(zero_rows, 1.0, norms)
    xn = x / safe[:, None]
    cos = matmul(xn, xn.T)

    ranked = cos - np.diag(np.full(n, np.inf))  # exclude self-edges
    order = np.argsort(-ranked, axis=1, kind="stable")
    selects = np.zeros((n, n), dtype=bool)
    rows = np.repeat(np.arange(n), k)
    selects[rows, order[:, :k].reshape(-1)] = True
    mutual = selects & selects.T
    weights = np.where(mutual, np.maximum(cos, 0.0), 0.0)
    np.fill_diagonal(weights, 0.0)

    degree = backend.rowsum(weights)
    inv_sqrt = np.where(degree > 0.0, 1.0 / np.sqrt(np.where(degree > 0, degree, 1.0)), 0.0)
    s = weights * inv_sqrt[:, None] * inv_sqrt[None, :]

    y0 = softmax_rows(score_matrix.logits)
    f = y0.copy()
    for _ in range(iterations):
        f = omega * matmul(s, f) + (1.0 - omega) * y0
    return f


def dump_hidden_activations(
    model: Model, data, out_dir, images_per_domain: int = 256
) -> list:
    """Write eval-mode hidden activations per layer per domain as MTXB files.

    Pairs are built from the first images_per_domain images of each domain
    (source images against all source categories, target against all target
    categories). Intended for external embedding/visualization tools.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    enc_s, _ = encode(model.encoder, data.source_attributes)
    enc_t, _ = encode(model.encoder, data.target_attributes)
    n_src = min(images_per_domain, data.source_features.shape[0])
    n_tgt = min(images_per_domain, data.target_features.shape[0])
    src_x = data.source_features[:n_src]
    src_y = data.source_labels[:n_src]
    batches = {
        DomainTag.SOURCE: build_source_pairs(src_x, src_y, enc_s),
        DomainTag.TARGET: build_target_pairs(data.target_features[:n_tgt], enc_t),
    }
    written = []
    for tag, batch in batches.items():
        _, _, cache = metric_forward(model.metric, batch, train=False)
        for layer_idx, act in ((1, cache.h1), (2, cache.h2)):
            path = out_dir / f"activations_{tag.value}_layer{layer_idx}.mtxb"
            save_matrix_mtxb(path, act)
            written.append(path)
    return written
