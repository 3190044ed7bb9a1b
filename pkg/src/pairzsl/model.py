"""The semantic-visual relation model.

An encoder maps per-category attribute vectors into the visual space, a
decoder reconstructs them, and a shared metric network scores concatenated
[visual : encoded-attribute] pair rows with a sigmoid similarity. Pair batches
are built image-major: a source batch pairs each image with the categories
present in the batch (label 1 for its own class), a target batch pairs each
image with every target category.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ShapeError
from .layers import (
    BnLayer,
    DomainTag,
    DsbnLayer,
    LinearLayer,
    bn_init,
    dsbn_init,
    linear_backward,
    linear_forward,
    linear_init,
    norm_backward,
    norm_forward_eval,
    norm_forward_train,
    relu_backward,
    relu_forward,
)
from .numerics import as_matrix, concat_cols, sigmoid
from .rng import RngState


class AlignmentMode(str, Enum):
    """How the two domains are aligned during training.

    dsbn      - twin batch-norm units per layer, one statistics set per domain
    singlebn  - one shared batch-norm statistics set for both domains
    mmd       - singlebn layers plus a mean-discrepancy penalty on hidden layers
    dann      - singlebn layers plus a gradient-reversed domain classifier
    none      - no normalization and no target-side training (source-only baseline)
    """

    DSBN = "dsbn"
    SINGLE_BN = "singlebn"
    MMD = "mmd"
    DANN = "dann"
    NONE = "none"


@dataclass
class ModelDims:
    d: int  # visual feature width
    r: int  # attribute width
    r_prime: int  # encoded attribute width
    hidden: int  # hidden units in encoder/decoder/metric layers


@dataclass
class TwoLayerMlp:
    lin1: LinearLayer
    lin2: LinearLayer


def mlp_forward(mlp: TwoLayerMlp, x: np.ndarray):
    h, c1 = linear_forward(mlp.lin1, x)
    a, cr = relu_forward(h)
    y, c2 = linear_forward(mlp.lin2, a)
    return y, (c1, cr, c2)


def mlp_backward(mlp: TwoLayerMlp, cache, dy: np.ndarray, prefix: str):
    c1, cr, c2 = cache
    da, dw2, db2 = linear_backward(mlp.lin2, c2, dy)
    dh = relu_backward(cr, da)
    dx, dw1, db1 = linear_backward(mlp.lin1, c1, dh)
    grads = {
        f"{prefix}.lin1.weight": dw1,
        f"{prefix}.lin1.bias": db1,
        f"{prefix}.lin2.weight": dw2,
        f"{prefix}.lin2.bias": db2,
    }
    return grads, dx


def encode(encoder: TwoLayerMlp, attributes: np.ndarray):
    """Encode one attribute row per category into the visual space."""
    return mlp_forward(encoder, attributes)


def decode(decoder: TwoLayerMlp, encoded: np.ndarray):
    """Reconstruct attribute rows from their encoded form."""
    return mlp_forward(decoder, encoded)


# ---------------------------------------------------------------------------
# pair batches


@dataclass
class PairBatch:
    pairs: np.ndarray  # (n_pairs, d + r_prime)
    tag: DomainTag
    category_index: np.ndarray  # (n_pairs,) row index into the tag's attributes
    labels: np.ndarray | None = None  # (n_pairs,) 0/1, source only
    image_group: np.ndarray | None = None  # (n_pairs,) image index, target only

    @property
    def n_pairs(self) -> int:
        return self.pairs.shape[0]


def build_source_pairs(
    x_batch: np.ndarray, y_batch: np.ndarray, encoded_source: np.ndarray
) -> PairBatch:
    """Pair each image with the distinct categories present in the batch.

    Emits m * |C_b| rows, image-major, categories in ascending index order;
    label is 1 exactly when the pair's category equals the image's class.
    """
    x_batch = as_matrix(x_batch, "source feature batch")
    encoded_source = as_matrix(encoded_source, "encoded source attributes")
    y = np.asarray(y_batch, dtype=np.int64).reshape(-1)
    m = x_batch.shape[0]
    if y.shape[0] != m:
        raise ShapeError(f"{m} feature rows but {y.shape[0]} labels")
    k_s = encoded_source.shape[0]
    if m and (y.min() < 0 or y.max() >= k_s):
        raise ShapeError(
            f"source label out of range: labels span [{y.min()}, {y.max()}], "
            f"but only {k_s} encoded categories exist"
        )
    cats = np.unique(y)
    n_cats = cats.shape[0]
    pairs = concat_cols(
        np.repeat(x_batch, n_cats, axis=0),
        encoded_source[np.tile(cats, m)],
    )
    labels = (np.repeat(y, n_cats) == np.tile(cats, m)).astype(np.float64)
    return PairBatch(
        pairs=pairs,
        tag=DomainTag.SOURCE,
        category_index=np.tile(cats, m),
        labels=labels,
    )


def build_target_pairs(
    x_batch: np.ndarray, encoded_target: np.ndarray
) -> PairBatch:
    """Pair each image with every target category (no labels)."""
    x_batch = as_matrix(x_batch, "target feature batch")
    encoded_target = as_matrix(encoded_target, "encoded target attributes")
    k_t = encoded_target.shape[0]
    if k_t == 0:
        raise ShapeError("target category set is empty")
    m = x_batch.shape[0]
    pairs = concat_cols(
        np.repeat(x_batch, k_t, axis=0),
        np.tile(encoded_target, (m, 1)),
    )
    return PairBatch(
        pairs=pairs,
        tag=DomainTag.TARGET,
        category_index=np.tile(np.arange(k_t, dtype=np.int64), m),
        image_group=np.repeat(np.arange(m, dtype=np.int64), k_t),
    )


# ---------------------------------------------------------------------------
# metric network


@dataclass
class MetricNet:
    lin1: LinearLayer
    lin2: LinearLayer
    lin3: LinearLayer
    norm1: DsbnLayer | BnLayer | None
    norm2: DsbnLayer | BnLayer | None


@dataclass
class MetricCache:
    tag: DomainTag
    train: bool
    h1: np.ndarray  # post-ReLU first hidden activations
    h2: np.ndarray  # post-ReLU second hidden activations
    c_lin1: object = None
    c_norm1: object = None
    c_relu1: object = None
    c_lin2: object = None
    c_norm2: object = None
    c_relu2: object = None
    c_lin3: object = None


def metric_forward(
    net: MetricNet, batch: PairBatch, train: bool, update_stats: bool = True
):
    """Score a pair batch; returns (logits, scores, cache).

    Train mode normalizes with the batch's own (tag-routed) statistics and,
    unless update_stats is False, updates the matching running statistics;
    eval mode uses the tag's global statistics and never mutates the layer.
    """
    x = batch.pairs
    tag = batch.tag
    h, c_lin1 = linear_forward(net.lin1, x)
    c_norm1 = None
    if net.norm1 is not None:
        if train:
            h, c_norm1 = norm_forward_train(net.norm1, h, tag, update_stats)
        else:
            h = norm_forward_eval(net.norm1, h, tag)
    h1, c_relu1 = relu_forward(h)

    h, c_lin2 = linear_forward(net.lin2, h1)
    c_norm2 = None
    if net.norm2 is not None:
        if train:
            h, c_norm2 = norm_forward_train(net.norm2, h, tag, update_stats)
        else:
            h = norm_forward_eval(net.norm2, h, tag)
    h2, c_relu2 = relu_forward(h)

    y, c_lin3 = linear_forward(net.lin3, h2)
    logits = y[:, 0]
    scores = sigmoid(logits)
    cache = MetricCache(
        tag=tag,
        train=train,
        h1=h1,
        h2=h2,
        c_lin1=c_lin1,
        c_norm1=c_norm1,
        c_relu1=c_relu1,
        c_lin2=c_lin2,
        c_norm2=c_norm2,
        c_relu2=c_relu2,
        c_lin3=c_lin3,
    )
    return logits, scores, cache


def metric_backward(
    net: MetricNet,
    cache: MetricCache,
    dlogits: np.ndarray,
    dh1: np.ndarray | None = None,
    dh2: np.ndarray | None = None,
    prefix: str = "metric",
):
    """Backward through the metric network.

    dh1/dh2 are optional extra gradients injected at the post-ReLU hidden
    activations (used by the alignment comparator losses). Returns
    (parameter gradients, gradient with respect to the pair rows).
    """
    if not cache.train:
        raise ValueError("metric_backward requires a train-mode cache")
    grads = {}
    dy = np.asarray(dlogits, dtype=np.float64).reshape(-1, 1)
    da2, dw3, db3 = linear_backward(net.lin3, cache.c_lin3, dy)
    grads[f"{prefix}.lin3.weight"] = dw3
    grads[f"{prefix}.lin3.bias"] = db3
    if dh2 is not None:
        da2 = da2 + dh2
    dn2 = relu_backward(cache.c_relu2, da2)
    if net.norm2 is not None:
        dn2, dg2, dbeta2 = norm_backward(net.norm2, cache.c_norm2, dn2)
        grads[f"{prefix}.norm2.gamma"] = dg2
        grads[f"{prefix}.norm2.beta"] = dbeta2
    da1, dw2, db2 = linear_backward(net.lin2, cache.c_lin2, dn2)
    grads[f"{prefix}.lin2.weight"] = dw2
    grads[f"{prefix}.lin2.bias"] = db2
    if dh1 is not None:
        da1 = da1 + dh1
    dn1 = relu_backward(cache.c_relu1, da1)
    if net.norm1 is not None:
        dn1, dg1, dbeta1 = norm_backward(net.norm1, cache.c_norm1, dn1)
        grads[f"{prefix}.norm1.gamma"] = dg1
        grads[f"{prefix}.norm1.beta"] = dbeta1
    dpairs, dw1, db1 = linear_backward(net.lin1, cache.c_lin1, dn1)
    grads[f"{prefix}.lin1.weight"] = dw1
    grads[f"{prefix}.lin1.bias"] = db1
    return grads, dpairs


# ---------------------------------------------------------------------------
# the assembled model


@dataclass
class Model:
    dims: ModelDims
    mode: AlignmentMode
    encoder: TwoLayerMlp
    decoder: TwoLayerMlp
    metric: MetricNet
    domain_classifier: object = None  # losses.DomainClassifier, dann mode only

    def parameters(self):
        """(name, array) pairs in a fixed, documented order."""
        out = []
        for prefix, mlp in (("encoder", self.encoder), ("decoder", self.decoder)):
            for lname in ("lin1", "lin2"):
                lin = getattr(mlp, lname)
                out.append((f"{prefix}.{lname}.weight", lin.weight))
                out.append((f"{prefix}.{lname}.bias", lin.bias))
        for lname in ("lin1", "lin2", "lin3"):
            lin = getattr(self.metric, lname)
            out.append((f"metric.{lname}.weight", lin.weight))
            out.append((f"metric.{lname}.bias", lin.bias))
        for nname in ("norm1", "norm2"):
            norm = getattr(self.metric, nname)
            if norm is not None:
                out.append((f"metric.{nname}.gamma", norm.gamma))
                out.append((f"metric.{nname}.beta", norm.beta))
        if self.domain_classifier is not None:
            dc = self.domain_classifier
            out.append(("dc.lin1.weight", dc.lin1.weight))
            out.append(("dc.lin1.bias", dc.lin1.bias))
            out.append(("dc.lin2.weight", dc.lin2.weight))
            out.append(("dc.lin2.bias", dc.lin2.bias))
        return out

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        for pname, arr in self.parameters():
            if pname == name:
                if arr.shape != value.shape:
                    raise ShapeError(
                        f"parameter {name} has shape {arr.shape}, got {value.shape}"
                    )
                arr[...] = value
                return
        raise KeyError(f"unknown parameter {name!r}")

    def norm_layers(self):
        out = []
        for nname in ("norm1", "norm2"):
            norm = getattr(self.metric, nname)
            if norm is not None:
                out.append((f"metric.{nname}", norm))
        return out


def _make_norm(mode: AlignmentMode, width: int, momentum: float, epsilon: float):
    if mode == AlignmentMode.DSBN:
        return dsbn_init(width, momentum=momentum, epsilon=epsilon)
    if mode in (AlignmentMode.SINGLE_BN, AlignmentMode.MMD, AlignmentMode.DANN):
        return bn_init(width, momentum=momentum, epsilon=epsilon)
    return None


def build_model(
    d: int,
    r: int,
    mode: AlignmentMode,
    seed: int,
    r_prime: int | None = None,
    hidden: int = 1250,
    bn_momentum: float = 0.9,
    bn_epsilon: float = 1e-5,
    dc_hidden: int = 64,
) -> Model:
    """Build and initialize the full model for the given dimensions and mode."""
    if d < 1 or r < 1 or hidden < 1:
        raise ValueError("model dimensions must be positive")
    r_prime = d if r_prime is None else r_prime
    dims = ModelDims(d=d, r=r, r_prime=r_prime, hidden=hidden)
    rng = RngState.from_tags(seed, "model-init")
    encoder = TwoLayerMlp(
        lin1=linear_init(rng, r, hidden), lin2=linear_init(rng, hidden, r_prime)
    )
    decoder = TwoLayerMlp(
        lin1=linear_init(rng, r_prime, hidden), lin2=linear_init(rng, hidden, r)
    )
    metric = MetricNet(
        lin1=linear_init(rng, d + r_prime, hidden),
        lin2=linear_init(rng, hidden, hidden),
        lin3=linear_init(rng, hidden, 1),
        norm1=_make_norm(mode, hidden, bn_momentum, bn_epsilon),
        norm2=_make_norm(mode, hidden, bn_momentum, bn_epsilon),
    )
    classifier = None
    if mode == AlignmentMode.DANN:
        from .losses import domain_classifier_init

        classifier = domain_classifier_init(rng, hidden, dc_hidden)
    return Model(
        dims=dims,
        mode=mode,
        encoder=encoder,
        decoder=decoder,
        metric=metric,
        domain_classifier=classifier,
    )
