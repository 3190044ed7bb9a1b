"""Finite-difference verification of every hand-derived backward pass.

Each component builds a small random instance, computes analytic gradients,
and compares them against central differences of the corresponding scalar
loss. The per-component relative error is the max absolute deviation divided
by the larger of the two gradients' max magnitudes (floored at 1e-8), which
is robust when individual entries are legitimately zero.

The composite check differentiates the real training objective (prediction +
weighted entropy + weighted reconstruction) through the full model with
respect to every parameter, using the same code path as the training loop
with running-statistics updates disabled so evaluations stay pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import (
    DomainTag,
    LinearLayer,
    bn_backward,
    bn_forward_train,
    bn_init,
    dsbn_backward,
    dsbn_forward_train,
    dsbn_init,
    linear_backward,
    linear_forward,
    linear_init,
    relu_backward,
    relu_forward,
)
from .losses import (
    DomainClassifier,
    adversarial_domain_loss,
    entropy_loss,
    mmd_loss,
    prediction_loss,
    reconstruction_loss,
)
from .model import AlignmentMode, TwoLayerMlp, build_model, mlp_backward, mlp_forward
from .numerics import finite_diff_grad, sigmoid, vec_sum
from .rng import RngState
from .training import TrainConfig, compute_losses_and_grads

DEFAULT_TOLERANCE = 1e-4
FD_STEP = 1e-5

COMPONENT_NAMES = (
    "linear",
    "relu",
    "bn",
    "dsbn",
    "encoder",
    "decoder",
    "prediction_loss",
    "entropy_loss",
    "reconstruction_loss",
    "mmd_loss",
    "domain_classifier",
    "composite",
)


@dataclass
class CheckResult:
    component: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(
        float(np.abs(analytic).max(initial=0.0)),
        float(np.abs(numeric).max(initial=0.0)),
        1e-8,
    )
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def _away_from_zero(x: np.ndarray, margin: float = 0.1) -> np.ndarray:
    """Push entries away from 0 so ReLU kinks stay clear of the FD step."""
    return x + margin * np.sign(x) + (x == 0.0) * margin


def _weighted_sum(y: np.ndarray, weights: np.ndarray) -> float:
    return vec_sum((y * weights).reshape(-1))


def _check_linear(rng: RngState) -> float:
    layer = linear_init(rng, 5, 4)
    layer.bias[...] = rng.normals(4) * 0.1
    x = rng.normals((6, 5))
    weights = rng.normals((6, 4))

    y, cache = linear_forward(layer, x)
    dx, dw, db = linear_backward(layer, cache, weights)
    errs = [
        _rel_err(dx, finite_diff_grad(
            lambda xm: _weighted_sum(linear_forward(layer, xm)[0], weights), x, FD_STEP
        )),
        _rel_err(dw, finite_diff_grad(
            lambda wm: _weighted_sum(
                linear_forward(LinearLayer(wm, layer.bias), x)[0], weights
            ),
            layer.weight,
            FD_STEP,
        )),
        _rel_err(db, finite_diff_grad(
            lambda bm: _weighted_sum(
                linear_forward(LinearLayer(layer.weight, bm.reshape(-1)), x)[0],
                weights,
            ),
            layer.bias.reshape(1, -1),
            FD_STEP,
        ).reshape(-1)),
    ]
    return max(errs)


def _check_relu(rng: RngState) -> float:
    x = _away_from_zero(rng.normals((7, 5)))
    weights = rng.normals((7, 5))
    _, cache = relu_forward(x)
    dx = relu_backward(cache, weights)
    fd = finite_diff_grad(
        lambda xm: _weighted_sum(relu_forward(xm)[0], weights), x, FD_STEP
    )
    return _rel_err(dx, fd)


def _check_bn_like(rng: RngState, domain_specific: bool) -> float:
    width = 4
    if domain_specific:
        layer = dsbn_init(width)
        fwd = lambda xm: dsbn_forward_train(
            layer, xm, DomainTag.TARGET, update_stats=False
        )
        bwd = lambda cache, dz: dsbn_backward(layer, cache, dz)
    else:
        layer = bn_init(width)
        fwd = lambda xm: bn_forward_train(layer, xm, update_stats=False)
        bwd = lambda cache, dz: bn_backward(layer, cache, dz)
    layer.gamma[...] = 1.0 + 0.3 * rng.normals(width)
    layer.beta[...] = 0.2 * rng.normals(width)
    x = rng.normals((8, width))
    weights = rng.normals((8, width))

    z, cache = fwd(x)
    dx, dgamma, dbeta = bwd(cache, weights)
    errs = [
        _rel_err(dx, finite_diff_grad(
            lambda xm: _weighted_sum(fwd(xm)[0], weights), x, FD_STEP
        ))
    ]

    gamma0 = layer.gamma.copy()

    def loss_of_gamma(gm):
        layer.gamma = gm.reshape(-1)
        try:
            return _weighted_sum(fwd(x)[0], weights)
        finally:
            layer.gamma = gamma0
    errs.append(_rel_err(
        dgamma, finite_diff_grad(loss_of_gamma, gamma0.reshape(1, -1), FD_STEP).reshape(-1)
    ))

    beta0 = layer.beta.copy()

    def loss_of_beta(bm):
        layer.beta = bm.reshape(-1)
        try:
            return _weighted_sum(fwd(x)[0], weights)
        finally:
            layer.beta = beta0
    errs.append(_rel_err(
        dbeta, finite_diff_grad(loss_of_beta, beta0.reshape(1, -1), FD_STEP).reshape(-1)
    ))
    return max(errs)


def _pack_mlp(mlp: TwoLayerMlp) -> np.ndarray:
    return np.concatenate(
        [
            mlp.lin1.weight.reshape(-1),
            mlp.lin1.bias,
            mlp.lin2.weight.reshape(-1),
            mlp.lin2.bias,
        ]
    )


def _unpack_mlp(theta: np.ndarray, shapes) -> TwoLayerMlp:
    (w1s, b1s, w2s, b2s) = shapes
    pos = 0
    parts = []
    for shape in shapes:
        size = int(np.prod(shape))
        parts.append(theta[pos : pos + size].reshape(shape))
        pos += size
    return TwoLayerMlp(
        lin1=LinearLayer(parts[0], parts[1]), lin2=LinearLayer(parts[2], parts[3])
    )


def _check_mlp(rng: RngState, n_in: int, n_hidden: int, n_out: int) -> float:
    mlp = TwoLayerMlp(
        lin1=linear_init(rng, n_in, n_hidden),
        lin2=linear_init(rng, n_hidden, n_out),
    )
    mlp.lin1.bias[...] = 0.3 + 0.1 * rng.normals(n_hidden)  # keep ReLU units live
    x = rng.normals((5, n_in))
    weights = rng.normals((5, n_out))
    shapes = (
        mlp.lin1.weight.shape,
        mlp.lin1.bias.shape,
        mlp.lin2.weight.shape,
        mlp.lin2.bias.shape,
    )

    y, cache = mlp_forward(mlp, x)
    grads, dx = mlp_backward(mlp, cache, weights, "mlp")
    analytic = np.concatenate(
        [
            grads["mlp.lin1.weight"].reshape(-1),
            grads["mlp.lin1.bias"],
            grads["mlp.lin2.weight"].reshape(-1),
            grads["mlp.lin2.bias"],
        ]
    )

    def loss_of_theta(theta):
        candidate = _unpack_mlp(theta.reshape(-1), shapes)
        return _weighted_sum(mlp_forward(candidate, x)[0], weights)

    fd = finite_diff_grad(loss_of_theta, _pack_mlp(mlp).reshape(1, -1), FD_STEP)
    err = _rel_err(analytic, fd.reshape(-1))
    fd_x = finite_diff_grad(
        lambda xm: _weighted_sum(mlp_forward(mlp, xm)[0], weights), x, FD_STEP
    )
    return max(err, _rel_err(dx, fd_x))


def _check_prediction(rng: RngState) -> float:
    logits = rng.normals(12) * 2.0
    labels = (rng.uniforms(12) < 0.3).astype(np.float64)
    _, dz = prediction_loss(sigmoid(logits), labels)
    fd = finite_diff_grad(
        lambda zm: prediction_loss(sigmoid(zm.reshape(-1)), labels)[0],
        logits.reshape(1, -1),
        FD_STEP,
    )
    return _rel_err(dz, fd.reshape(-1))


def _check_entropy(rng: RngState) -> float:
    k_t = 4
    n_images = 3
    logits = rng.normals(n_images * k_t)
    group = np.repeat(np.arange(n_images), k_t)
    _, dz = entropy_loss(logits, group, k_t)
    fd = finite_diff_grad(
        lambda zm: entropy_loss(zm.reshape(-1), group, k_t)[0],
        logits.reshape(1, -1),
        FD_STEP,
    )
    return _rel_err(dz, fd.reshape(-1))


def _check_reconstruction(rng: RngState) -> float:
    a = rng.normals((5, 3))
    ahat = rng.normals((5, 3))
    _, dhat = reconstruction_loss(a, ahat)
    fd = finite_diff_grad(lambda hm: reconstruction_loss(a, hm)[0], ahat, FD_STEP)
    return _rel_err(dhat, fd)


def _check_mmd(rng: RngState) -> float:
    h_s = rng.normals((6, 4))
    h_t = rng.normals((9, 4)) + 0.5
    _, dh_s, dh_t = mmd_loss(h_s, h_t)
    fd_s = finite_diff_grad(lambda hm: mmd_loss(hm, h_t)[0], h_s, FD_STEP)
    fd_t = finite_diff_grad(lambda hm: mmd_loss(h_s, hm)[0], h_t, FD_STEP)
    return max(_rel_err(dh_s, fd_s), _rel_err(dh_t, fd_t))


def _check_domain_classifier(rng: RngState) -> float:
    width, hidden = 5, 6
    dc = DomainClassifier(
        lin1=linear_init(rng, width, hidden), lin2=linear_init(rng, hidden, 1)
    )
    dc.lin1.bias[...] = 0.3 + 0.1 * rng.normals(hidden)
    h = rng.normals((8, width))
    labels = np.array([0, 0, 0, 0, 1, 1, 1, 1], dtype=np.float64)

    _, dh_rev, grads = adversarial_domain_loss(dc, h, labels)
    errs = []
    # reversal contract: feature gradient is minus the classifier input gradient
    fd_h = finite_diff_grad(
        lambda hm: adversarial_domain_loss(dc, hm, labels)[0], h, FD_STEP
    )
    errs.append(_rel_err(-dh_rev, fd_h))

    w0 = dc.lin1.weight.copy()

    def loss_of_w1(wm):
        dc.lin1.weight = wm
        try:
            return adversarial_domain_loss(dc, h, labels)[0]
        finally:
            dc.lin1.weight = w0
    errs.append(_rel_err(grads["dc.lin1.weight"], finite_diff_grad(loss_of_w1, w0, FD_STEP)))

    w2 = dc.lin2.weight.copy()

    def loss_of_w2(wm):
        dc.lin2.weight = wm
        try:
            return adversarial_domain_loss(dc, h, labels)[0]
        finally:
            dc.lin2.weight = w2
    errs.append(_rel_err(grads["dc.lin2.weight"], finite_diff_grad(loss_of_w2, w2, FD_STEP)))
    return max(errs)


def _relu_clearance(model, source_x, source_y, target_x, a_s, a_t) -> float:
    """Smallest |pre-activation| feeding any ReLU in the full forward pass.

    Central differences are meaningless within a step of a ReLU kink, so the
    composite instance is redrawn until every unit has comfortable clearance.
    """
    from .layers import linear_forward, norm_forward_train
    from .model import build_source_pairs, build_target_pairs

    mins = []
    encoded = {}
    for key, attrs in (("s", a_s), ("t", a_t)):
        pre, _ = linear_forward(model.encoder.lin1, attrs)
        mins.append(np.abs(pre).min())
        enc, _ = mlp_forward(model.encoder, attrs)
        encoded[key] = enc
        pre, _ = linear_forward(model.decoder.lin1, enc)
        mins.append(np.abs(pre).min())
    batches = (
        build_source_pairs(source_x, source_y, encoded["s"]),
        build_target_pairs(target_x, encoded["t"]),
    )
    for batch in batches:
        h, _ = linear_forward(model.metric.lin1, batch.pairs)
        if model.metric.norm1 is not None:
            h, _ = norm_forward_train(model.metric.norm1, h, batch.tag, False)
        mins.append(np.abs(h).min())
        h, _ = linear_forward(model.metric.lin2, np.maximum(h, 0.0))
        if model.metric.norm2 is not None:
            h, _ = norm_forward_train(model.metric.norm2, h, batch.tag, False)
        mins.append(np.abs(h).min())
    return float(min(mins))


def _toy_instance(seed: int):
    """A small full-model training instance for the composite check.

    Redraws the data (deterministically) until no ReLU pre-activation lies
    within 100x the finite-difference step of its kink.
    """
    d, r, k_s, k_t = 5, 4, 3, 2
    config = TrainConfig(
        learning_rate=1e-3,
        max_iterations=1,
        batch_size=4,
        lambda_rec=0.5,
        lambda_ent=0.5,
        alignment_mode=AlignmentMode.DSBN,
        seed=seed,
        hidden_units=6,
        encoded_dim=d,
    )
    model = build_model(
        d=d, r=r, mode=config.alignment_mode, seed=seed,
        r_prime=d, hidden=config.hidden_units,
    )
    # check at generic parameter values: zero biases leave whole ReLU rows
    # dead (exact kinks) and zero shifts make the check degenerate
    prng = RngState.from_tags(seed, "gradcheck", "composite-params")
    for _, mlp in (("enc", model.encoder), ("dec", model.decoder)):
        mlp.lin1.bias[...] = 0.3 + 0.1 * prng.normals(mlp.lin1.bias.shape[0])
        mlp.lin2.bias[...] = 0.1 * prng.normals(mlp.lin2.bias.shape[0])
    for norm in (model.metric.norm1, model.metric.norm2):
        norm.gamma[...] = 1.0 + 0.2 * prng.normals(norm.gamma.shape[0])
        norm.beta[...] = 0.2 + 0.1 * prng.normals(norm.beta.shape[0])

    source_y = np.array([0, 2, 0, 1], dtype=np.int64)
    for attempt in range(100):
        rng = RngState.from_tags(seed, "gradcheck", "composite", attempt)
        source_x = rng.normals((4, d))
        target_x = rng.normals((3, d)) + 0.5
        a_s = rng.uniforms((k_s, r))
        a_t = rng.uniforms((k_t, r))
        if _relu_clearance(model, source_x, source_y, target_x, a_s, a_t) > 100 * FD_STEP:
            break
    return model, config, source_x, source_y, target_x, a_s, a_t


def _check_composite(seed: int) -> float:
    model, config, source_x, source_y, target_x, a_s, a_t = _toy_instance(seed)

    def losses_and_grads():
        return compute_losses_and_grads(
            model,
            config,
            source_x,
            source_y,
            target_x,
            update_stats=False,
            source_attributes=a_s,
            target_attributes=a_t,
        )

    report, grads = losses_and_grads()
    names = [name for name, _ in model.parameters()]
    params = dict(model.parameters())
    analytic = np.concatenate([grads[name].reshape(-1) for name in names])

    sizes = [params[name].size for name in names]
    theta0 = np.concatenate([params[name].reshape(-1) for name in names])

    def loss_of_theta(theta):
        flat = theta.reshape(-1)
        pos = 0
        for name, size in zip(names, sizes):
            params[name][...] = flat[pos : pos + size].reshape(params[name].shape)
            pos += size
        try:
            return losses_and_grads()[0].total
        finally:
            pos = 0
            for name, size in zip(names, sizes):
                params[name][...] = theta0[pos : pos + size].reshape(params[name].shape)
                pos += size

    fd = finite_diff_grad(loss_of_theta, theta0.reshape(1, -1), FD_STEP)
    return _rel_err(analytic, fd.reshape(-1))


_CHECKS = {
    "linear": lambda seed: _check_linear(RngState.from_tags(seed, "gradcheck", "linear")),
    "relu": lambda seed: _check_relu(RngState.from_tags(seed, "gradcheck", "relu")),
    "bn": lambda seed: _check_bn_like(
        RngState.from_tags(seed, "gradcheck", "bn"), domain_specific=False
    ),
    "dsbn": lambda seed: _check_bn_like(
        RngState.from_tags(seed, "gradcheck", "dsbn"), domain_specific=True
    ),
    "encoder": lambda seed: _check_mlp(
        RngState.from_tags(seed, "gradcheck", "encoder"), 4, 6, 5
    ),
    "decoder": lambda seed: _check_mlp(
        RngState.from_tags(seed, "gradcheck", "decoder"), 5, 6, 4
    ),
    "prediction_loss": lambda seed: _check_prediction(
        RngState.from_tags(seed, "gradcheck", "prediction")
    ),
    "entropy_loss": lambda seed: _check_entropy(
        RngState.from_tags(seed, "gradcheck", "entropy")
    ),
    "reconstruction_loss": lambda seed: _check_reconstruction(
        RngState.from_tags(seed, "gradcheck", "reconstruction")
    ),
    "mmd_loss": lambda seed: _check_mmd(RngState.from_tags(seed, "gradcheck", "mmd")),
    "domain_classifier": lambda seed: _check_domain_classifier(
        RngState.from_tags(seed, "gradcheck", "dann")
    ),
    "composite": _check_composite,
}


def run_suite(
    seed: int = 0,
    trials: int = 1,
    tolerance: float = DEFAULT_TOLERANCE,
    corrupt: str | None = None,
) -> list[CheckResult]:
    """Run every component check over trials consecutive seeds.

    ``corrupt`` names a component whose reported error is deliberately
    inflated; it exists as a negative control for the exit-code contract.
    """
    if corrupt is not None and corrupt not in COMPONENT_NAMES:
        raise ValueError(
            f"unknown component {corrupt!r}; choose from {COMPONENT_NAMES}"
        )
    results = []
    for name in COMPONENT_NAMES:
        worst = 0.0
        for trial in range(trials):
            worst = max(worst, _CHECKS[name](seed + trial))
        if corrupt == name:
            worst = max(worst, 1.0)
        results.append(CheckResult(component=name, max_rel_err=worst, tolerance=tolerance))
    return results
