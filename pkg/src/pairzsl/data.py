"""Dataset file formats, ingestion with validation, and the synthetic generator.

Matrix files come in two formats:

* MTXB (binary): magic ``MTXB``, version byte 1, u32 little-endian rows, u32
  little-endian cols, then rows*cols float64 little-endian values row-major.
  Round-trips are bit-exact.
* CSV: one row per line, comma-separated decimals written with 17 significant
  digits (exact float64 round-trip), no header.

A dataset manifest is a JSON object naming the six matrix blocks (features,
labels and per-category attributes for each domain), the declared dimensions,
and the split. Labels are stored as N x 1 matrices of integer-valued reals.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import backend
from .errors import DatasetError, FormatError
from .numerics import as_matrix, matmul, row_stats
from .rng import RngState

log = logging.getLogger(__name__)

MTXB_MAGIC = b"MTXB"
MTXB_VERSION = 1

BLOCK_NAMES = (
    "source_features",
    "source_labels",
    "target_features",
    "target_labels",
    "source_attributes",
    "target_attributes",
)

_FORMATS = ("mtxb", "csv")


# ---------------------------------------------------------------------------
# matrix serialization


def matrix_to_bytes(x: np.ndarray) -> bytes:
    x = as_matrix(x, "matrix")
    rows, cols = x.shape
    header = MTXB_MAGIC + bytes([MTXB_VERSION]) + struct.pack("<II", rows, cols)
    return header + x.astype("<f8").tobytes(order="C")


def matrix_from_bytes(buf: bytes, context: str = "matrix") -> np.ndarray:
    if len(buf) < 13:
        raise FormatError(f"{context}: truncated header ({len(buf)} bytes)")
    if buf[:4] != MTXB_MAGIC:
        raise FormatError(f"{context}: bad magic {buf[:4]!r}, expected {MTXB_MAGIC!r}")
    if buf[4] != MTXB_VERSION:
        raise FormatError(
            f"{context}: unsupported version {buf[4]}, expected {MTXB_VERSION}"
        )
    rows, cols = struct.unpack("<II", buf[5:13])
    expected = 13 + rows * cols * 8
    if len(buf) != expected:
        raise FormatError(
            f"{context}: expected {expected} bytes for {rows}x{cols}, got {len(buf)}"
        )
    data = np.frombuffer(buf, dtype="<f8", offset=13)
    # frombuffer views are read-only; hand back an owned, writable matrix
    return data.reshape(rows, cols).astype(np.float64, copy=True)


def save_matrix_mtxb(path, x: np.ndarray) -> None:
    Path(path).write_bytes(matrix_to_bytes(x))


def load_matrix_mtxb(path) -> np.ndarray:
    return matrix_from_bytes(Path(path).read_bytes(), context=str(path))


def save_matrix_csv(path, x: np.ndarray) -> None:
    x = as_matrix(x, "matrix")
    with open(path, "w", encoding="ascii") as fh:
        for row in x:
            fh.write(",".join("%.17g" % v for v in row))
            fh.write("\n")


def load_matrix_csv(path) -> np.ndarray:
    rows = []
    width = None
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            tokens = line.split(",")
            if width is None:
                width = len(tokens)
            elif len(tokens) != width:
                raise FormatError(
                    f"{path}: ragged CSV at line {lineno}: "
                    f"expected {width} values, found {len(tokens)}"
                )
            parsed = []
            for offset, token in enumerate(tokens):
                try:
                    parsed.append(float(token))
                except ValueError:
                    raise FormatError(
                        f"{path}: non-numeric token {token!r} at line {lineno}, "
                        f"column {offset + 1}"
                    ) from None
            rows.append(parsed)
    if not rows:
        raise FormatError(f"{path}: empty CSV matrix")
    return np.array(rows, dtype=np.float64)


def load_matrix(path, fmt: str) -> np.ndarray:
    if fmt == "mtxb":
        return load_matrix_mtxb(path)
    if fmt == "csv":
        return load_matrix_csv(path)
    raise FormatError(f"unknown matrix format {fmt!r}, expected one of {_FORMATS}")


def save_matrix(path, x: np.ndarray, fmt: str) -> None:
    if fmt == "mtxb":
        save_matrix_mtxb(path, x)
    elif fmt == "csv":
        save_matrix_csv(path, x)
    else:
        raise FormatError(f"unknown matrix format {fmt!r}, expected one of {_FORMATS}")


# ---------------------------------------------------------------------------
# datasets


@dataclass
class TrainView:
    """What the training loop may see: no target labels."""

    source_features: np.ndarray
    source_labels: np.ndarray
    target_features: np.ndarray
    source_attributes: np.ndarray
    target_attributes: np.ndarray
    source_class_names: list
    target_class_names: list

    @property
    def d(self) -> int:
        return self.source_features.shape[1]

    @property
    def r(self) -> int:
        return self.source_attributes.shape[1]

    @property
    def k_s(self) -> int:
        return self.source_attributes.shape[0]

    @property
    def k_t(self) -> int:
        return self.target_attributes.shape[0]

    @property
    def n_s(self) -> int:
        return self.source_features.shape[0]

    @property
    def n_t(self) -> int:
        return self.target_features.shape[0]


@dataclass
class ZslDataset:
    source_features: np.ndarray  # (N_s, d)
    source_labels: np.ndarray  # (N_s,) int64 into [0, K_s)
    target_features: np.ndarray  # (N_t, d)
    target_labels: np.ndarray  # (N_t,) int64 into [0, K_t); evaluation only
    source_attributes: np.ndarray  # (K_s, r)
    target_attributes: np.ndarray  # (K_t, r)
    source_class_names: list = field(default_factory=list)
    target_class_names: list = field(default_factory=list)

    d = TrainView.d
    r = TrainView.r
    k_s = TrainView.k_s
    k_t = TrainView.k_t
    n_s = TrainView.n_s
    n_t = TrainView.n_t

    def train_view(self) -> TrainView:
        return TrainView(
            source_features=self.source_features,
            source_labels=self.source_labels,
            target_features=self.target_features,
            source_attributes=self.source_attributes,
            target_attributes=self.target_attributes,
            source_class_names=self.source_class_names,
            target_class_names=self.target_class_names,
        )


def _labels_from_matrix(x: np.ndarray, block: str, k: int) -> np.ndarray:
    if x.shape[1] != 1:
        raise DatasetError(
            f"block {block}: labels must be an N x 1 matrix, found {x.shape}"
        )
    col = x[:, 0]
    if not np.all(col == np.round(col)):
        raise DatasetError(f"block {block}: labels must be integer-valued")
    labels = col.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DatasetError(
            f"block {block}: labels must lie in [0, {k}), "
            f"found range [{labels.min()}, {labels.max()}]"
        )
    return labels


# ---------------------------------------------------------------------------
# manifest


@dataclass
class DatasetManifest:
    name: str
    split: str
    dims: dict  # d, r, Ks, Kt
    blocks: dict  # block name -> {"path": str, "format": str}
    source_class_names: list | None = None
    target_class_names: list | None = None
    base_dir: Path = field(default_factory=Path)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: cannot parse manifest: {exc}") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: manifest must be a JSON object")
    allowed = {
        "name",
        "split",
        "dims",
        "blocks",
        "source_class_names",
        "target_class_names",
    }
    unknown = set(doc) - allowed
    if unknown:
        raise DatasetError(f"{path}: unknown manifest keys {sorted(unknown)}")
    for key in ("name", "split", "dims", "blocks"):
        if key not in doc:
            raise DatasetError(f"{path}: manifest missing key {key!r}")
    if doc["split"] not in ("SS", "PS"):
        raise DatasetError(f"{path}: split must be 'SS' or 'PS', got {doc['split']!r}")
    dims = doc["dims"]
    if set(dims) != {"d", "r", "Ks", "Kt"}:
        raise DatasetError(f"{path}: dims must have exactly d, r, Ks, Kt")
    blocks = doc["blocks"]
    if set(blocks) != set(BLOCK_NAMES):
        raise DatasetError(
            f"{path}: blocks must name exactly {sorted(BLOCK_NAMES)}, "
            f"got {sorted(blocks)}"
        )
    for bname, spec in blocks.items():
        if set(spec) != {"path", "format"} or spec["format"] not in _FORMATS:
            raise DatasetError(
                f"{path}: block {bname} needs 'path' and 'format' in {_FORMATS}"
            )
    return DatasetManifest(
        name=doc["name"],
        split=doc["split"],
        dims={k: int(v) for k, v in dims.items()},
        blocks=blocks,
        source_class_names=doc.get("source_class_names"),
        target_class_names=doc.get("target_class_names"),
        base_dir=path.parent,
    )


def save_manifest(path, manifest: DatasetManifest) -> None:
    doc = {
        "name": manifest.name,
        "split": manifest.split,
        "dims": manifest.dims,
        "blocks": manifest.blocks,
    }
    if manifest.source_class_names is not None:
        doc["source_class_names"] = manifest.source_class_names
    if manifest.target_class_names is not None:
        doc["target_class_names"] = manifest.target_class_names
    Path(path).write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _expect_shape(block, x, rows, cols):
    if rows is not None and x.shape[0] != rows:
        raise DatasetError(
            f"block {block}: expected {rows} rows, found {x.shape[0]}"
        )
    if cols is not None and x.shape[1] != cols:
        raise DatasetError(
            f"block {block}: expected {cols} columns, found {x.shape[1]}"
        )


def load_dataset(manifest) -> ZslDataset:
    """Load and validate all six blocks of a manifest."""
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    d = manifest.dims["d"]
    r = manifest.dims["r"]
    k_s = manifest.dims["Ks"]
    k_t = manifest.dims["Kt"]
    raw = {}
    for bname in BLOCK_NAMES:
        spec = manifest.blocks[bname]
        bpath = manifest.base_dir / spec["path"]
        if not bpath.exists():
            raise DatasetError(f"block {bname}: file not found: {bpath}")
        raw[bname] = load_matrix(bpath, spec["format"])

    _expect_shape("source_features", raw["source_features"], None, d)
    _expect_shape("target_features", raw["target_features"], None, d)
    _expect_shape("source_attributes", raw["source_attributes"], k_s, r)
    _expect_shape("target_attributes", raw["target_attributes"], k_t, r)
    n_s = raw["source_features"].shape[0]
    n_t = raw["target_features"].shape[0]
    _expect_shape("source_labels", raw["source_labels"], n_s, 1)
    _expect_shape("target_labels", raw["target_labels"], n_t, 1)

    src_names = manifest.source_class_names or [f"src_{i:03d}" for i in range(k_s)]
    tgt_names = manifest.target_class_names or [f"tgt_{i:03d}" for i in range(k_t)]
    if len(src_names) != k_s:
        raise DatasetError(
            f"source_class_names: expected {k_s} names, found {len(src_names)}"
        )
    if len(tgt_names) != k_t:
        raise DatasetError(
            f"target_class_names: expected {k_t} names, found {len(tgt_names)}"
        )

    ds = ZslDataset(
        source_features=raw["source_features"],
        source_labels=_labels_from_matrix(raw["source_labels"], "source_labels", k_s),
        target_features=raw["target_features"],
        target_labels=_labels_from_matrix(raw["target_labels"], "target_labels", k_t),
        source_attributes=raw["source_attributes"],
        target_attributes=raw["target_attributes"],
        source_class_names=list(src_names),
        target_class_names=list(tgt_names),
    )
    log.info(
        "loaded dataset %s (%s): N_s=%d N_t=%d K_s=%d K_t=%d d=%d r=%d",
        manifest.name,
        manifest.split,
        ds.n_s,
        ds.n_t,
        ds.k_s,
        ds.k_t,
        ds.d,
        ds.r,
    )
    return ds


def save_dataset(out_dir, ds: ZslDataset, name: str, split: str = "PS") -> Path:
    """Write all six blocks as MTXB plus a ready manifest; returns its path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    matrices = {
        "source_features": ds.source_features,
        "source_labels": ds.source_labels.astype(np.float64).reshape(-1, 1),
        "target_features": ds.target_features,
        "target_labels": ds.target_labels.astype(np.float64).reshape(-1, 1),
        "source_attributes": ds.source_attributes,
        "target_attributes": ds.target_attributes,
    }
    blocks = {}
    for bname, x in matrices.items():
        fname = f"{bname}.mtxb"
        save_matrix_mtxb(out_dir / fname, x)
        blocks[bname] = {"path": fname, "format": "mtxb"}
    manifest = DatasetManifest(
        name=name,
        split=split,
        dims={"d": ds.d, "r": ds.r, "Ks": ds.k_s, "Kt": ds.k_t},
        blocks=blocks,
        source_class_names=ds.source_class_names,
        target_class_names=ds.target_class_names,
        base_dir=out_dir,
    )
    mpath = out_dir / "manifest.json"
    save_manifest(mpath, manifest)
    return mpath


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass
class SyntheticSpec:
    source_classes: int = 40
    target_classes: int = 10
    feature_dim: int = 64
    attribute_dim: int = 16
    samples_per_class: int = 50
    attribute_style: str = "binary"  # or "continuous"
    noise_scale: float = 0.3
    shift_scale: object = 1.5  # scalar or length-d sequence
    shift_offset: object = 1.0  # scalar or length-d sequence
    seed: int = 0

    def validate(self) -> None:
        for fname in (
            "source_classes",
            "target_classes",
            "feature_dim",
            "attribute_dim",
            "samples_per_class",
        ):
            if int(getattr(self, fname)) < 1:
                raise DatasetError(f"synthetic spec: {fname} must be >= 1")
        if self.attribute_style not in ("binary", "continuous"):
            raise DatasetError(
                f"synthetic spec: attribute_style must be 'binary' or 'continuous', "
                f"got {self.attribute_style!r}"
            )
        if self.noise_scale < 0:
            raise DatasetError("synthetic spec: noise_scale must be >= 0")
        k_total = self.source_classes + self.target_classes
        if self.attribute_style == "binary" and self.attribute_dim < 63:
            if k_total > 2**self.attribute_dim:
                raise DatasetError(
                    f"cannot draw {k_total} distinct binary attribute vectors "
                    f"in {self.attribute_dim} dimensions"
                )


@dataclass
class SyntheticTruth:
    """Generator internals exposed for oracle checks."""

    attribute_map: np.ndarray  # (d, r)
    source_prototypes: np.ndarray  # (K_s, d), pre-shift space
    target_prototypes: np.ndarray  # (K_t, d), pre-shift space
    shift_scale: np.ndarray  # (d,)
    shift_offset: np.ndarray  # (d,)


def _shift_vector(value, d: int, what: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64).reshape(-1)
    if arr.shape[0] == 1:
        return np.full(d, arr[0], dtype=np.float64)
    if arr.shape[0] != d:
        raise DatasetError(
            f"synthetic spec: {what} must be a scalar or length-{d} vector, "
            f"got length {arr.shape[0]}"
        )
    return arr


def _draw_distinct_attributes(rng: RngState, k: int, r: int, style: str) -> np.ndarray:
    out = np.empty((k, r), dtype=np.float64)
    seen = set()
    for i in range(k):
        for _ in range(10_000):
            if style == "binary":
                vec = (rng.uniforms(r) < 0.5).astype(np.float64)
            else:
                vec = rng.uniforms(r)
            key = vec.tobytes()
            if key not in seen:
                seen.add(key)
                out[i] = vec
                break
        else:
            raise DatasetError(
                "could not draw distinct attribute vectors; widen attribute_dim"
            )
    return out


def generate_synthetic_full(spec: SyntheticSpec):
    """Generate a dataset plus the hidden truth used to build it."""
    spec.validate()
    d = spec.feature_dim
    r = spec.attribute_dim
    k_s = spec.source_classes
    k_t = spec.target_classes
    spc = spec.samples_per_class
    rng = RngState.from_tags(spec.seed, "synthetic")

    attrs = _draw_distinct_attributes(rng, k_s + k_t, r, spec.attribute_style)
    a_s, a_t = attrs[:k_s], attrs[k_s:]
    attr_map = rng.normals((d, r)) / np.sqrt(r)
    proto_s = matmul(a_s, attr_map.T)
    proto_t = matmul(a_t, attr_map.T)

    def sample_domain(protos, k):
        feats = np.empty((k * spc, d), dtype=np.float64)
        labels = np.empty(k * spc, dtype=np.int64)
        for c in range(k):
            block = protos[c] + spec.noise_scale * rng.normals((spc, d))
            feats[c * spc : (c + 1) * spc] = block
            labels[c * spc : (c + 1) * spc] = c
        return feats, labels

    x_s, y_s = sample_domain(proto_s, k_s)
    x_t, y_t = sample_domain(proto_t, k_t)
    scale = _shift_vector(spec.shift_scale, d, "shift_scale")
    offset = _shift_vector(spec.shift_offset, d, "shift_offset")
    x_t = x_t * scale + offset

    ds = ZslDataset(
        source_features=x_s,
        source_labels=y_s,
        target_features=x_t,
        target_labels=y_t,
        source_attributes=a_s,
        target_attributes=a_t,
        source_class_names=[f"syn_src_{i:02d}" for i in range(k_s)],
        target_class_names=[f"syn_tgt_{i:02d}" for i in range(k_t)],
    )
    truth = SyntheticTruth(
        attribute_map=attr_map,
        source_prototypes=proto_s,
        target_prototypes=proto_t,
        shift_scale=scale,
        shift_offset=offset,
    )
    return ds, truth


def generate_synthetic(spec: SyntheticSpec) -> ZslDataset:
    return generate_synthetic_full(spec)[0]


def normalize_attribute_rows(ds):
    """Scale every attribute vector to unit L2 norm (both domains).

    Attribute vectors are used raw by default; this is the optional
    normalization variant. Zero rows pass through unchanged with a warning.
    Returns a new dataset/view of the same type.
    """

    def transform(block, what):
        norms = np.sqrt(backend.rowsum(block * block))
        zero = norms == 0.0
        if zero.any():
            log.warning(
                "normalize_attribute_rows: %d zero %s vectors left unnormalized",
                int(zero.sum()),
                what,
            )
        return block / np.where(zero, 1.0, norms)[:, None]

    return replace(
        ds,
        source_attributes=transform(ds.source_attributes, "source attribute"),
        target_attributes=transform(ds.target_attributes, "target attribute"),
    )


def standardize_features(ds):
    """Z-score features per dimension with statistics from the source block.

    Target features use the source statistics (no target leakage). Columns
    with zero source variance pass through unchanged with a warning. Returns
    a new dataset/view of the same type; disabled by default in configs.
    """
    mean, var = row_stats(ds.source_features)
    sd = np.sqrt(var)
    degenerate = sd == 0.0
    if degenerate.any():
        log.warning(
            "standardize_features: %d zero-variance source columns pass through "
            "unscaled",
            int(degenerate.sum()),
        )
    safe_sd = np.where(degenerate, 1.0, sd)

    def transform(x):
        z = (x - mean) / safe_sd
        return np.where(degenerate, x, z)

    return replace(
        ds,
        source_features=transform(ds.source_features),
        target_features=transform(ds.target_features),
    )
