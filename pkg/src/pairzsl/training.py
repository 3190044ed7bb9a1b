"""Training loop: batch scheduling, Adam, the per-iteration update, checkpoints.

Every run is fully determined by (seed, config, dataset): batch indices are a
pure function of the seed and the iteration number (an epoch's permutation is
derived from the seed and epoch index), parameter initialization is seeded,
and all reductions have a fixed accumulation order. Two runs with the same
inputs produce bit-identical parameters at every iteration, and resuming from
a checkpoint reproduces the uninterrupted run exactly.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import matrix_from_bytes, matrix_to_bytes
from .errors import FormatError, NonFiniteError, NumericAbort, ShapeError
from .layers import DomainTag
from .losses import (
    LossReport,
    adversarial_domain_loss,
    entropy_loss,
    mmd_loss,
    prediction_loss,
    reconstruction_loss,
    total_objective,
)
from .model import (
    AlignmentMode,
    Model,
    build_model,
    build_source_pairs,
    build_target_pairs,
    decode,
    encode,
    metric_backward,
    metric_forward,
    mlp_backward,
)
from .rng import RngState

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"TSVRCKPT"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    max_iterations: int = 50_000
    batch_size: int = 32
    lambda_rec: float = 1e-5
    lambda_ent: float = 1e-9
    bn_momentum: float = 0.9
    bn_epsilon: float = 1e-5
    alignment_mode: AlignmentMode = AlignmentMode.DSBN
    seed: int = 0
    log_every: int = 100
    hidden_units: int = 1250
    encoded_dim: int | None = None  # None -> visual dimension d
    lambda_align: float = 1.0
    dc_hidden: int = 64

    def __post_init__(self):
        if isinstance(self.alignment_mode, str):
            self.alignment_mode = AlignmentMode(self.alignment_mode)
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        for fname in ("lambda_rec", "lambda_ent", "lambda_align"):
            if getattr(self, fname) < 0:
                raise ValueError(f"{fname} must be >= 0")
        if not 0.0 < self.bn_momentum < 1.0:
            raise ValueError("bn_momentum must be in (0, 1)")
        if self.bn_epsilon <= 0.0:
            raise ValueError("bn_epsilon must be > 0")
        if self.hidden_units < 1:
            raise ValueError("hidden_units must be >= 1")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["alignment_mode"] = self.alignment_mode.value
        return out


def build_model_for(view, config: TrainConfig) -> Model:
    """Build a model sized for a dataset view under a config."""
    return build_model(
        d=view.d,
        r=view.r,
        mode=config.alignment_mode,
        seed=config.seed,
        r_prime=config.encoded_dim,
        hidden=config.hidden_units,
        bn_momentum=config.bn_momentum,
        bn_epsilon=config.bn_epsilon,
        dc_hidden=config.dc_hidden,
    )


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_step(
    state: AdamState,
    param: np.ndarray,
    grad: np.ndarray,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
) -> np.ndarray:
    """One bias-corrected Adam update, in place on the parameter."""
    if grad.shape != param.shape:
        raise ShapeError(f"gradient shape {grad.shape} != parameter {param.shape}")
    state.t += 1
    with np.errstate(over="ignore"):
        state.m = beta1 * state.m + (1.0 - beta1) * grad
        state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1**state.t)
    v_hat = state.v / (1.0 - beta2**state.t)
    param -= lr * m_hat / (np.sqrt(v_hat) + epsilon)
    return param


class Adam:
    """Per-parameter Adam slots keyed by parameter name."""

    def __init__(self, learning_rate, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.slots: dict[str, AdamState] = {}

    def step(self, name: str, param: np.ndarray, grad: np.ndarray) -> None:
        if not np.isfinite(grad).all():
            raise NumericAbort(f"non-finite gradient for parameter {name!r}")
        state = self.slots.get(name)
        if state is None:
            state = AdamState(m=np.zeros_like(param), v=np.zeros_like(param))
            self.slots[name] = state
        adam_step(
            state,
            param,
            grad,
            self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
        )


# ---------------------------------------------------------------------------
# batch scheduling


class EpochSampler:
    """Without-replacement batches from reshuffled epoch permutations.

    The permutation of epoch e is derived from (seed, stream, e), so the
    batch for iteration k is a pure function of the constructor arguments and
    k. Batches that straddle an epoch boundary take the tail of one
    permutation and the head of the next.
    """

    def __init__(self, seed: int, stream: str, n_items: int, batch_size: int):
        if n_items < 1:
            raise ValueError("dataset is empty")
        if batch_size > n_items:
            raise ValueError(
                f"batch_size {batch_size} exceeds dataset size {n_items}"
            )
        self.seed = seed
        self.stream = stream
        self.n = n_items
        self.batch_size = batch_size
        self._cache: dict[int, np.ndarray] = {}

    def _perm(self, epoch: int) -> np.ndarray:
        perm = self._cache.get(epoch)
        if perm is None:
            rng = RngState.from_tags(self.seed, "sampler", self.stream, epoch)
            perm = rng.permutation(self.n)
            self._cache = {
                e: p for e, p in self._cache.items() if e >= epoch - 1
            }
            self._cache[epoch] = perm
        return perm

    def batch(self, iteration: int) -> np.ndarray:
        start = iteration * self.batch_size
        epoch, offset = divmod(start, self.n)
        idx = self._perm(epoch)[offset : offset + self.batch_size]
        short = self.batch_size - idx.shape[0]
        if short:
            idx = np.concatenate([idx, self._perm(epoch + 1)[:short]])
        return idx


def sample_source_batch(sampler: EpochSampler, view, iteration: int):
    idx = sampler.batch(iteration)
    return view.source_features[idx], view.source_labels[idx]


def sample_target_batch(sampler: EpochSampler, view, iteration: int):
    return view.target_features[sampler.batch(iteration)]


# ---------------------------------------------------------------------------
# one training step


def _check_term(value: float, term: str, iteration: int | None) -> float:
    if not np.isfinite(value):
        where = "" if iteration is None else f" at iteration {iteration}"
        raise NumericAbort(f"non-finite loss term {term!r}{where}")
    return float(value)


def compute_losses_and_grads(
    model: Model,
    config: TrainConfig,
    source_x: np.ndarray,
    source_y: np.ndarray,
    target_x: np.ndarray | None,
    update_stats: bool = True,
    iteration: int | None = None,
    source_attributes: np.ndarray | None = None,
    target_attributes: np.ndarray | None = None,
):
    """Forward and backward for one batch pair; returns (LossReport, grads).

    The gradient dict matches ``model.parameters()`` names and is the exact
    gradient of the reported total (for dann, the classifier receives its own
    discriminating gradient and the feature path the reversed one). In mode
    ``none`` the target pass is skipped entirely.
    """
    mode = model.mode
    d = model.dims.d
    grads: dict[str, np.ndarray] = {}

    def add(new):
        for key, val in new.items():
            if key in grads:
                grads[key] = grads[key] + val
            else:
                grads[key] = val

    a_s = source_attributes
    a_t = target_attributes
    enc_s, enc_cache_s = encode(model.encoder, a_s)
    enc_t, enc_cache_t = encode(model.encoder, a_t)

    # source pass: labeled pairs, prediction loss
    sp = build_source_pairs(source_x, source_y, enc_s)
    _, scores_s, mcache_s = metric_forward(
        model.metric, sp, train=True, update_stats=update_stats
    )
    pre_value, dz_pre = prediction_loss(scores_s, sp.labels)
    pre_value = _check_term(pre_value, "prediction", iteration)

    # target pass: unlabeled pairs, entropy loss (skipped for the baseline)
    ent_value = 0.0
    tp = None
    mcache_t = None
    dz_ent = None
    if mode != AlignmentMode.NONE:
        if target_x is None:
            raise ValueError(f"mode {mode.value!r} requires a target batch")
        tp = build_target_pairs(target_x, enc_t)
        z_t, _, mcache_t = metric_forward(
            model.metric, tp, train=True, update_stats=update_stats
        )
        ent_value, dz_ent = entropy_loss(z_t, tp.image_group, enc_t.shape[0])
        ent_value = _check_term(ent_value, "entropy", iteration)

    # reconstruction over the full attribute matrices of both domains
    dec_s, dec_cache_s = decode(model.decoder, enc_s)
    dec_t, dec_cache_t = decode(model.decoder, enc_t)
    rec_s, dhat_s = reconstruction_loss(a_s, dec_s)
    rec_t, dhat_t = reconstruction_loss(a_t, dec_t)
    rec_value = _check_term(rec_s + rec_t, "reconstruction", iteration)

    # alignment comparators
    align_value = None
    dh1_s = dh2_s = dh1_t = dh2_t = None
    if mode == AlignmentMode.MMD:
        v1, g1s, g1t = mmd_loss(mcache_s.h1, mcache_t.h1)
        v2, g2s, g2t = mmd_loss(mcache_s.h2, mcache_t.h2)
        align_value = _check_term(v1 + v2, "mmd", iteration)
        lam = config.lambda_align
        dh1_s, dh1_t = lam * g1s, lam * g1t
        dh2_s, dh2_t = lam * g2s, lam * g2t
    elif mode == AlignmentMode.DANN:
        h = np.vstack([mcache_s.h2, mcache_t.h2])
        labels = np.concatenate(
            [np.zeros(mcache_s.h2.shape[0]), np.ones(mcache_t.h2.shape[0])]
        )
        align_value, dh_rev, dc_grads = adversarial_domain_loss(
            model.domain_classifier, h, labels
        )
        align_value = _check_term(align_value, "adversarial", iteration)
        lam = config.lambda_align
        add({k: lam * v for k, v in dc_grads.items()})
        n_s_rows = mcache_s.h2.shape[0]
        dh2_s = lam * dh_rev[:n_s_rows]
        dh2_t = lam * dh_rev[n_s_rows:]

    # backward: metric network (prediction plus weighted entropy)
    gm, dpairs_s = metric_backward(model.metric, mcache_s, dz_pre, dh1_s, dh2_s)
    add(gm)
    denc_s = np.zeros_like(enc_s)
    np.add.at(denc_s, sp.category_index, dpairs_s[:, d:])
    denc_t = np.zeros_like(enc_t)
    if mode != AlignmentMode.NONE:
        gm, dpairs_t = metric_backward(
            model.metric, mcache_t, config.lambda_ent * dz_ent, dh1_t, dh2_t
        )
        add(gm)
        np.add.at(denc_t, tp.category_index, dpairs_t[:, d:])

    # backward: decoder, then encoder (which collects all three terms)
    gd, denc_rec_s = mlp_backward(
        model.decoder, dec_cache_s, config.lambda_rec * dhat_s, "decoder"
    )
    add(gd)
    gd, denc_rec_t = mlp_backward(
        model.decoder, dec_cache_t, config.lambda_rec * dhat_t, "decoder"
    )
    add(gd)
    ge, _ = mlp_backward(model.encoder, enc_cache_s, denc_s + denc_rec_s, "encoder")
    add(ge)
    ge, _ = mlp_backward(model.encoder, enc_cache_t, denc_t + denc_rec_t, "encoder")
    add(ge)

    lambda_align = config.lambda_align if align_value is not None else 0.0
    total = total_objective(
        pre_value,
        ent_value,
        rec_value,
        config.lambda_ent,
        config.lambda_rec,
        align_value,
        lambda_align,
    )
    report = LossReport(
        pre=pre_value, ent=ent_value, rec=rec_value, align=align_value, total=total
    )
    return report, grads


def train_iteration(
    model: Model,
    adam: Adam,
    view,
    config: TrainConfig,
    source_sampler: EpochSampler,
    target_sampler: EpochSampler | None,
    iteration: int,
) -> LossReport:
    """One full update: sample both domains, compute gradients, step Adam."""
    source_x, source_y = sample_source_batch(source_sampler, view, iteration)
    target_x = None
    if model.mode != AlignmentMode.NONE:
        target_x = sample_target_batch(target_sampler, view, iteration)
    try:
        report, grads = compute_losses_and_grads(
            model,
            config,
            source_x,
            source_y,
            target_x,
            update_stats=True,
            iteration=iteration,
            source_attributes=view.source_attributes,
            target_attributes=view.target_attributes,
        )
    except NonFiniteError as exc:
        raise NumericAbort(f"at iteration {iteration}: {exc}") from exc
    for name, param in model.parameters():
        adam.step(name, param, grads[name])
    return report


def train(
    model: Model,
    view,
    config: TrainConfig,
    adam: Adam | None = None,
    start_iteration: int = 0,
    csv_path=None,
    progress=None,
):
    """Run the configured number of iterations; returns (model, history).

    ``view`` may be a ZslDataset (converted to its training view, which has
    no target labels) or a TrainView. ``csv_path`` streams one
    ``iter,pre,ent,rec,align,total`` row per iteration.
    """
    if hasattr(view, "train_view"):
        view = view.train_view()
    if adam is None:
        adam = Adam(config.learning_rate)
    source_sampler = EpochSampler(config.seed, "source", view.n_s, config.batch_size)
    target_sampler = None
    if model.mode != AlignmentMode.NONE:
        target_sampler = EpochSampler(
            config.seed, "target", view.n_t, config.batch_size
        )
    history: list[LossReport] = []
    csv_file = open(csv_path, "w", encoding="ascii") if csv_path else None
    try:
        if csv_file:
            csv_file.write("iter,pre,ent,rec,align,total\n")
        for iteration in range(start_iteration, config.max_iterations):
            report = train_iteration(
                model, adam, view, config, source_sampler, target_sampler, iteration
            )
            history.append(report)
            if csv_file:
                align_field = "" if report.align is None else repr(report.align)
                csv_file.write(
                    f"{iteration},{report.pre!r},{report.ent!r},"
                    f"{report.rec!r},{align_field},{report.total!r}\n"
                )
            if (iteration + 1) % config.log_every == 0 or iteration == 0:
                line = (
                    f"iter {iteration + 1}/{config.max_iterations} "
                    f"pre={report.pre:.6f} ent={report.ent:.6f} "
                    f"rec={report.rec:.6f} total={report.total:.6f}"
                )
                log.info("%s", line)
                if progress:
                    progress(line)
    finally:
        if csv_file:
            csv_file.close()
    return model, history


# ---------------------------------------------------------------------------
# checkpoints


def _norm_state_entries(model: Model):
    """(section name, array) for every running statistic of every norm layer."""
    out = []
    for lname, layer in model.norm_layers():
        if hasattr(layer, "running_mean") and isinstance(layer.running_mean, dict):
            for tag in DomainTag:
                out.append(
                    (f"norm.{lname}.running_mean.{tag.value}", layer.running_mean[tag])
                )
                out.append(
                    (f"norm.{lname}.running_std.{tag.value}", layer.running_std[tag])
                )
        else:
            out.append((f"norm.{lname}.running_mean", layer.running_mean))
            out.append((f"norm.{lname}.running_std", layer.running_std))
    return out


def _norm_seen_flags(model: Model) -> dict:
    out = {}
    for lname, layer in model.norm_layers():
        if isinstance(layer.seen, dict):
            out[lname] = {tag.value: bool(layer.seen[tag]) for tag in DomainTag}
        else:
            out[lname] = bool(layer.seen)
    return out


def _write_section(fh, name: str, payload: bytes) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<I", len(payload)))
    fh.write(payload)


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(
    model: Model,
    adam: Adam | None,
    path,
    iteration: int = 0,
    config: TrainConfig | None = None,
    extra_meta: dict | None = None,
) -> None:
    """Write model, running statistics and optimizer state; bit-exact round-trip."""
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "mode": model.mode.value,
        "dims": dataclasses.asdict(model.dims),
        "dc_hidden": (
            model.domain_classifier.lin1.out_dim
            if model.domain_classifier is not None
            else None
        ),
        "bn_momentum": config.bn_momentum if config else None,
        "bn_epsilon": config.bn_epsilon if config else None,
        "config": config.to_dict() if config else None,
    }
    if extra_meta:
        meta.update(extra_meta)
    state = {
        "iteration": int(iteration),
        "norm_seen": _norm_seen_flags(model),
        "adam": None,
    }
    sections: list[tuple[str, bytes]] = []
    for name, param in model.parameters():
        sections.append((f"param.{name}", matrix_to_bytes(param.reshape(1, -1))))
    for name, arr in _norm_state_entries(model):
        sections.append((name, matrix_to_bytes(arr.reshape(1, -1))))
    if adam is not None:
        state["adam"] = {
            "learning_rate": adam.learning_rate,
            "beta1": adam.beta1,
            "beta2": adam.beta2,
            "epsilon": adam.epsilon,
            "t": {name: slot.t for name, slot in sorted(adam.slots.items())},
        }
        for name, slot in sorted(adam.slots.items()):
            sections.append((f"adam.m.{name}", matrix_to_bytes(slot.m.reshape(1, -1))))
            sections.append((f"adam.v.{name}", matrix_to_bytes(slot.v.reshape(1, -1))))
    sections.sort(key=lambda item: item[0])

    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(bytes([CHECKPOINT_VERSION]))
        _write_section(fh, "meta", _json_bytes(meta))
        _write_section(fh, "state", _json_bytes(state))
        for name, payload in sections:
            _write_section(fh, name, payload)


def _read_sections(path) -> dict[str, bytes]:
    blob = Path(path).read_bytes()
    if len(blob) < 9:
        raise FormatError(f"{path}: truncated checkpoint header")
    if blob[:8] != CHECKPOINT_MAGIC:
        raise FormatError(
            f"{path}: bad checkpoint magic {blob[:8]!r}, expected {CHECKPOINT_MAGIC!r}"
        )
    if blob[8] != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {blob[8]}")
    sections: dict[str, bytes] = {}
    pos = 9
    while pos < len(blob):
        if pos + 4 > len(blob):
            raise FormatError(f"{path}: truncated section name length at byte {pos}")
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if pos + name_len > len(blob):
            raise FormatError(f"{path}: truncated section name at byte {pos}")
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        if pos + 4 > len(blob):
            raise FormatError(f"{path}: truncated length of section {name!r}")
        (payload_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if pos + payload_len > len(blob):
            raise FormatError(f"{path}: truncated payload of section {name!r}")
        sections[name] = blob[pos : pos + payload_len]
        pos += payload_len
    return sections


def _take_vector(sections, name, path) -> np.ndarray:
    if name not in sections:
        raise FormatError(f"{path}: checkpoint is missing section {name!r}")
    return matrix_from_bytes(sections.pop(name), context=f"{path}:{name}")[0]


def load_checkpoint(path):
    """Read a checkpoint; returns (model, adam, iteration, meta).

    ``adam`` is None when the checkpoint was saved without optimizer state.
    """
    sections = _read_sections(path)
    for required in ("meta", "state"):
        if required not in sections:
            raise FormatError(f"{path}: checkpoint is missing section {required!r}")
    try:
        meta = json.loads(sections.pop("meta").decode("utf-8"))
        state = json.loads(sections.pop("state").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt meta/state section: {exc}") from exc

    dims = meta["dims"]
    model = build_model(
        d=dims["d"],
        r=dims["r"],
        mode=AlignmentMode(meta["mode"]),
        seed=0,
        r_prime=dims["r_prime"],
        hidden=dims["hidden"],
        bn_momentum=meta.get("bn_momentum") or 0.9,
        bn_epsilon=meta.get("bn_epsilon") or 1e-5,
        dc_hidden=meta.get("dc_hidden") or 64,
    )
    for name, param in model.parameters():
        flat = _take_vector(sections, f"param.{name}", path)
        if flat.size != param.size:
            raise FormatError(
                f"{path}: section param.{name} has {flat.size} values, "
                f"expected {param.size}"
            )
        param[...] = flat.reshape(param.shape)
    for lname, layer in model.norm_layers():
        if isinstance(layer.seen, dict):
            for tag in DomainTag:
                layer.running_mean[tag] = _take_vector(
                    sections, f"norm.{lname}.running_mean.{tag.value}", path
                )
                layer.running_std[tag] = _take_vector(
                    sections, f"norm.{lname}.running_std.{tag.value}", path
                )
                layer.seen[tag] = bool(state["norm_seen"][lname][tag.value])
        else:
            layer.running_mean = _take_vector(
                sections, f"norm.{lname}.running_mean", path
            )
            layer.running_std = _take_vector(
                sections, f"norm.{lname}.running_std", path
            )
            layer.seen = bool(state["norm_seen"][lname])

    adam = None
    if state.get("adam") is not None:
        ainfo = state["adam"]
        adam = Adam(
            ainfo["learning_rate"],
            beta1=ainfo["beta1"],
            beta2=ainfo["beta2"],
            epsilon=ainfo["epsilon"],
        )
        params = dict(model.parameters())
        for name, t in ainfo["t"].items():
            if name not in params:
                raise FormatError(f"{path}: optimizer slot for unknown parameter {name!r}")
            shape = params[name].shape
            m = _take_vector(sections, f"adam.m.{name}", path).reshape(shape)
            v = _take_vector(sections, f"adam.v.{name}", path).reshape(shape)
            adam.slots[name] = AdamState(m=m, v=v, t=int(t))
    if sections:
        raise FormatError(
            f"{path}: unexpected checkpoint sections {sorted(sections)}"
        )
    return model, adam, int(state["iteration"]), meta
