"""Layers with hand-derived backward passes.

Linear, ReLU, and batch normalization in two flavors: a single-statistics
layer and a domain-specific layer that keeps independent running statistics
per domain behind shared scale/shift parameters. Backward passes are the
exact full-batch derivatives (including the dependence of batch mean and
variance on the inputs) and are validated against central finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import backend
from .errors import ShapeError, StatsNotSeenError
from .numerics import as_matrix, matmul
from .rng import RngState


class DomainTag(Enum):
    SOURCE = "source"
    TARGET = "target"


# ---------------------------------------------------------------------------
# linear


@dataclass
class LinearLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


def linear_init(rng: RngState, n_in: int, n_out: int) -> LinearLayer:
    """Symmetric uniform weights scaled by 1/sqrt(fan-in); zero biases."""
    scale = 1.0 / math.sqrt(n_in)
    weight = (rng.uniforms((n_out, n_in)) * 2.0 - 1.0) * scale
    return LinearLayer(weight=weight, bias=np.zeros(n_out, dtype=np.float64))


def linear_forward(layer: LinearLayer, x: np.ndarray):
    x = as_matrix(x, "linear input")
    if x.shape[1] != layer.in_dim:
        raise ShapeError(
            f"linear input width {x.shape[1]} != layer in-dim {layer.in_dim}"
        )
    y = matmul(x, layer.weight.T) + layer.bias
    return y, x


def linear_backward(layer: LinearLayer, cache, dy: np.ndarray):
    x = cache
    dy = as_matrix(dy, "linear upstream gradient")
    if dy.shape != (x.shape[0], layer.out_dim):
        raise ShapeError(
            f"linear backward expects gradient {(x.shape[0], layer.out_dim)}, "
            f"got {dy.shape}"
        )
    dx = matmul(dy, layer.weight)
    dweight = matmul(dy.T, x)
    dbias = backend.colsum(dy)
    return dx, dweight, dbias


# ---------------------------------------------------------------------------
# relu


def relu_forward(x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0), x > 0.0


def relu_backward(cache, dy: np.ndarray) -> np.ndarray:
    return dy * cache


# ---------------------------------------------------------------------------
# batch normalization cores


def _bn_train_core(x, gamma, beta, epsilon):
    m = x.shape[0]
    mean = backend.colsum(x) / m
    centered = x - mean
    var = backend.colsum(centered * centered) / m
    inv = 1.0 / np.sqrt(var + epsilon)
    xhat = centered * inv
    z = gamma * xhat + beta
    cache = (centered, inv, xhat, gamma)
    return z, cache, mean, var


def _bn_backward_core(cache, dz):
    centered, inv, xhat, gamma = cache
    if dz.shape != xhat.shape:
        raise ShapeError(
            f"batch-norm backward gradient shape {dz.shape} does not match "
            f"cached activations {xhat.shape}"
        )
    m = dz.shape[0]
    dxhat = dz * gamma
    dgamma = backend.colsum(dz * xhat)
    dbeta = backend.colsum(dz)
    dvar = backend.colsum(dxhat * centered) * (-0.5) * inv**3
    dmean = -(backend.colsum(dxhat) * inv) + dvar * (-2.0 / m) * backend.colsum(
        centered
    )
    dx = dxhat * inv + dvar * (2.0 / m) * centered + dmean / m
    return dx, dgamma, dbeta


def _check_train_batch(x, width, kind):
    x = as_matrix(x, f"{kind} input")
    if x.shape[0] < 2:
        raise ShapeError(
            f"{kind} training batch needs at least 2 rows, got {x.shape[0]}"
        )
    if x.shape[1] != width:
        raise ShapeError(f"{kind} input width {x.shape[1]} != layer width {width}")
    return x


# ---------------------------------------------------------------------------
# single-statistics batch normalization (the "-2BN" ablation variant)


@dataclass
class BnLayer:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_std: np.ndarray  # tracks the standard deviation, not the variance
    seen: bool = False
    momentum: float = 0.9
    epsilon: float = 1e-5

    @property
    def width(self) -> int:
        return self.gamma.shape[0]


def bn_init(width: int, momentum: float = 0.9, epsilon: float = 1e-5) -> BnLayer:
    if not 0.0 < momentum < 1.0:
        raise ValueError(f"momentum must be in (0, 1), got {momentum}")
    if epsilon <= 0.0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    return BnLayer(
        gamma=np.ones(width, dtype=np.float64),
        beta=np.zeros(width, dtype=np.float64),
        running_mean=np.zeros(width, dtype=np.float64),
        running_std=np.ones(width, dtype=np.float64),
        momentum=momentum,
        epsilon=epsilon,
    )


def bn_forward_train(layer: BnLayer, x, tag=None, update_stats: bool = True):
    """Normalize with the batch's own statistics; tag is accepted and ignored."""
    x = _check_train_batch(x, layer.width, "batch-norm")
    z, cache, mean, var = _bn_train_core(x, layer.gamma, layer.beta, layer.epsilon)
    if update_stats:
        a = layer.momentum
        layer.running_mean = a * layer.running_mean + (1.0 - a) * mean
        layer.running_std = a * layer.running_std + (1.0 - a) * np.sqrt(var)
        layer.seen = True
    return z, cache


def bn_forward_eval(layer: BnLayer, x, tag=None) -> np.ndarray:
    if not layer.seen:
        raise StatsNotSeenError(
            "batch-norm eval requested before any training batch set the statistics"
        )
    x = as_matrix(x, "batch-norm input")
    if x.shape[1] != layer.width:
        raise ShapeError(f"batch-norm input width {x.shape[1]} != {layer.width}")
    inv = 1.0 / np.sqrt(layer.running_std**2 + layer.epsilon)
    return layer.gamma * ((x - layer.running_mean) * inv) + layer.beta


def bn_backward(layer: BnLayer, cache, dz):
    return _bn_backward_core(cache, as_matrix(dz, "batch-norm gradient"))


# ---------------------------------------------------------------------------
# domain-specific batch normalization


@dataclass
class DsbnLayer:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: dict = field(default_factory=dict)  # DomainTag -> (K,)
    running_std: dict = field(default_factory=dict)  # DomainTag -> (K,)
    seen: dict = field(default_factory=dict)  # DomainTag -> bool
    momentum: float = 0.9
    epsilon: float = 1e-5

    @property
    def width(self) -> int:
        return self.gamma.shape[0]


def dsbn_init(width: int, momentum: float = 0.9, epsilon: float = 1e-5) -> DsbnLayer:
    if not 0.0 < momentum < 1.0:
        raise ValueError(f"momentum must be in (0, 1), got {momentum}")
    if epsilon <= 0.0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    return DsbnLayer(
        gamma=np.ones(width, dtype=np.float64),
        beta=np.zeros(width, dtype=np.float64),
        running_mean={t: np.zeros(width, dtype=np.float64) for t in DomainTag},
        running_std={t: np.ones(width, dtype=np.float64) for t in DomainTag},
        seen={t: False for t in DomainTag},
        momentum=momentum,
        epsilon=epsilon,
    )


def dsbn_forward_train(
    layer: DsbnLayer, x, tag: DomainTag, update_stats: bool = True
):
    """Normalize with the tagged domain's batch statistics.

    Only the tagged domain's running statistics are touched; the other
    domain's are left bit-identical.
    """
    if not isinstance(tag, DomainTag):
        raise TypeError(f"tag must be a DomainTag, got {tag!r}")
    x = _check_train_batch(x, layer.width, "domain-specific batch-norm")
    z, cache, mean, var = _bn_train_core(x, layer.gamma, layer.beta, layer.epsilon)
    if update_stats:
        a = layer.momentum
        layer.running_mean[tag] = a * layer.running_mean[tag] + (1.0 - a) * mean
        layer.running_std[tag] = a * layer.running_std[tag] + (1.0 - a) * np.sqrt(var)
        layer.seen[tag] = True
    return z, cache


def dsbn_forward_eval(layer: DsbnLayer, x, tag: DomainTag) -> np.ndarray:
    if not isinstance(tag, DomainTag):
        raise TypeError(f"tag must be a DomainTag, got {tag!r}")
    if not layer.seen[tag]:
        raise StatsNotSeenError(
            f"eval-mode normalization for domain {tag.value!r} requested before "
            "any training batch from that domain"
        )
    x = as_matrix(x, "domain-specific batch-norm input")
    if x.shape[1] != layer.width:
        raise ShapeError(f"input width {x.shape[1]} != layer width {layer.width}")
    inv = 1.0 / np.sqrt(layer.running_std[tag] ** 2 + layer.epsilon)
    return layer.gamma * ((x - layer.running_mean[tag]) * inv) + layer.beta


def dsbn_backward(layer: DsbnLayer, cache, dz):
    return _bn_backward_core(cache, as_matrix(dz, "dsbn gradient"))


# ---------------------------------------------------------------------------
# dispatch over the two normalization flavors


def norm_forward_train(layer, x, tag, update_stats: bool = True):
    if isinstance(layer, DsbnLayer):
        return dsbn_forward_train(layer, x, tag, update_stats=update_stats)
    return bn_forward_train(layer, x, tag, update_stats=update_stats)


def norm_forward_eval(layer, x, tag):
    if isinstance(layer, DsbnLayer):
        return dsbn_forward_eval(layer, x, tag)
    return bn_forward_eval(layer, x, tag)


def norm_backward(layer, cache, dz):
    return _bn_backward_core(cache, as_matrix(dz, "norm gradient"))
