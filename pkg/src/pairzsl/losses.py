"""Objective terms and the ablation comparator losses.

Three terms make up the main objective: binary cross-entropy on labeled
source pairs, softmax-entropy of each target image's per-category logits,
and squared-error attribute reconstruction. The comparators (mean-discrepancy
and a gradient-reversed domain classifier) exist to reproduce the direction
of the alignment ablation, not as tuned baselines.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteError, ShapeError
from .layers import LinearLayer, linear_backward, linear_forward, linear_init, relu_backward, relu_forward
from .numerics import as_matrix, sigmoid, softmax_rows, vec_sum
from . import backend
from .rng import RngState

log = logging.getLogger(__name__)

_CLAMP = 1e-12
_clamp_events = 0


@dataclass
class LossReport:
    pre: float
    ent: float
    rec: float
    align: float | None
    total: float


def total_objective(
    pre: float,
    ent: float,
    rec: float,
    lambda_ent: float,
    lambda_rec: float,
    align: float | None = None,
    lambda_align: float = 0.0,
) -> float:
    """Weighted sum of the objective terms."""
    total = pre + lambda_ent * ent + lambda_rec * rec
    if align is not None:
        total += lambda_align * align
    return total


def _bce(scores: np.ndarray, labels: np.ndarray, what: str) -> float:
    global _clamp_events
    clamped = np.clip(scores, _CLAMP, 1.0 - _CLAMP)
    n_clamped = int((clamped != scores).sum())
    if n_clamped:
        # first occurrence at WARNING, the rest at DEBUG to keep long runs quiet
        level = logging.DEBUG if _clamp_events else logging.WARNING
        _clamp_events += n_clamped
        log.log(
            level,
            "%s: clamped %d saturated scores away from {0,1} (%d so far)",
            what,
            n_clamped,
            _clamp_events,
        )
    terms = labels * np.log(clamped) + (1.0 - labels) * np.log1p(-clamped)
    return -vec_sum(terms) / scores.shape[0]


def prediction_loss(scores: np.ndarray, labels: np.ndarray):
    """Binary cross-entropy over pair scores.

    Returns (value, gradient with respect to the pre-sigmoid logits); the
    logit gradient is the exact composite form (scores - labels) / n.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if scores.shape != labels.shape:
        raise ShapeError(
            f"{scores.shape[0]} scores vs {labels.shape[0]} labels"
        )
    if scores.shape[0] == 0:
        raise ShapeError("prediction_loss needs at least one pair")
    if not np.isfinite(scores).all():
        raise NonFiniteError("prediction scores contain non-finite entries")
    value = _bce(scores, labels, "prediction_loss")
    dlogits = (scores - labels) / scores.shape[0]
    return value, dlogits


def entropy_loss(logits: np.ndarray, image_group: np.ndarray, k_t: int):
    """Mean softmax entropy of each image's per-category logit row.

    The logits must be image-major with exactly k_t consecutive entries per
    image. Returns (value, gradient with respect to the logits).
    """
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    image_group = np.asarray(image_group, dtype=np.int64).reshape(-1)
    n = logits.shape[0]
    if k_t < 1 or n == 0 or n % k_t != 0:
        raise ShapeError(
            f"{n} logits cannot be split into groups of {k_t}"
        )
    n_images = n // k_t
    expected = np.repeat(np.arange(n_images, dtype=np.int64), k_t)
    if image_group.shape[0] != n or not np.array_equal(image_group, expected):
        raise ShapeError(
            "image_group must assign exactly k_t consecutive pairs per image"
        )
    z = logits.reshape(n_images, k_t)
    p = softmax_rows(z)
    # p == 0 lanes contribute 0 to both the entropy and its gradient; the
    # masked-out 0 * -inf products are discarded by the where.
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = np.log(p)
        plogp = np.where(p > 0.0, p * logp, 0.0)
        h = -backend.rowsum(plogp)
        value = vec_sum(h) / n_images
        dz = np.where(p > 0.0, -p * (logp + h[:, None]), 0.0) / n_images
    return value, dz.reshape(-1)


def reconstruction_loss(attributes: np.ndarray, reconstructed: np.ndarray):
    """Mean squared reconstruction distance over one domain's categories.

    Returns (value, gradient with respect to the reconstruction); value is
    (1/K) sum_i ||a_i - ahat_i||^2.
    """
    attributes = as_matrix(attributes, "attributes")
    reconstructed = as_matrix(reconstructed, "reconstructed attributes")
    if attributes.shape != reconstructed.shape:
        raise ShapeError(
            f"attribute blocks differ: {attributes.shape} vs {reconstructed.shape}"
        )
    k = attributes.shape[0]
    if k == 0:
        raise ShapeError("reconstruction_loss needs at least one category")
    diff = reconstructed - attributes
    per_row = backend.rowsum(diff * diff)
    value = vec_sum(per_row) / k
    dhat = 2.0 * diff / k
    return value, dhat


def mmd_loss(h_source: np.ndarray, h_target: np.ndarray):
    """Squared distance between batch means (linear-kernel discrepancy).

    Returns (value, gradient for h_source rows, gradient for h_target rows).
    """
    h_source = as_matrix(h_source, "source activations")
    h_target = as_matrix(h_target, "target activations")
    if h_source.shape[0] == 0 or h_target.shape[0] == 0:
        raise ShapeError("mmd_loss needs non-empty batches")
    if h_source.shape[1] != h_target.shape[1]:
        raise ShapeError(
            f"activation widths differ: {h_source.shape[1]} vs {h_target.shape[1]}"
        )
    m_s = h_source.shape[0]
    m_t = h_target.shape[0]
    mu_s = backend.colsum(h_source) / m_s
    mu_t = backend.colsum(h_target) / m_t
    diff = mu_s - mu_t
    value = vec_sum(diff * diff)
    dh_s = np.broadcast_to(2.0 * diff / m_s, h_source.shape).copy()
    dh_t = np.broadcast_to(-2.0 * diff / m_t, h_target.shape).copy()
    return value, dh_s, dh_t


# ---------------------------------------------------------------------------
# gradient-reversed domain classifier


@dataclass
class DomainClassifier:
    lin1: LinearLayer
    lin2: LinearLayer


def domain_classifier_init(rng: RngState, width: int, hidden: int) -> DomainClassifier:
    """Hidden layer random, output layer zero so the initial output is 0.5."""
    lin1 = linear_init(rng, width, hidden)
    lin2 = LinearLayer(
        weight=np.zeros((1, hidden), dtype=np.float64),
        bias=np.zeros(1, dtype=np.float64),
    )
    return DomainClassifier(lin1=lin1, lin2=lin2)


def adversarial_domain_loss(
    dc: DomainClassifier, h: np.ndarray, domain_labels: np.ndarray
):
    """Domain-classifier cross-entropy with a reversed feature gradient.

    Returns (value, reversed gradient for h, classifier parameter gradients).
    The classifier gradients point toward better discrimination; the feature
    gradient is the exact negation of the classifier's input gradient.
    """
    h = as_matrix(h, "classifier input")
    labels = np.asarray(domain_labels, dtype=np.float64).reshape(-1)
    if labels.shape[0] != h.shape[0]:
        raise ShapeError(f"{h.shape[0]} rows but {labels.shape[0]} domain labels")
    if not (np.any(labels == 0.0) and np.any(labels == 1.0)):
        raise ShapeError("adversarial loss needs a batch mixing both domains")
    u, c1 = linear_forward(dc.lin1, h)
    a, cr = relu_forward(u)
    y, c2 = linear_forward(dc.lin2, a)
    z = y[:, 0]
    s = sigmoid(z)
    value = _bce(s, labels, "adversarial_domain_loss")
    dz = (s - labels) / s.shape[0]
    da, dw2, db2 = linear_backward(dc.lin2, c2, dz.reshape(-1, 1))
    du = relu_backward(cr, da)
    dh, dw1, db1 = linear_backward(dc.lin1, c1, du)
    grads = {
        "dc.lin1.weight": dw1,
        "dc.lin1.bias": db1,
        "dc.lin2.weight": dw2,
        "dc.lin2.bias": db2,
    }
    return value, -dh, grads
