"""Command-line surface: synth, train, eval, ablate, gradcheck.

Every command is deterministic given its arguments and writes machine-readable
outputs (JSON/CSV/MTXB) next to human-readable logs. Exit codes: 0 success,
1 check failure, 2 input/config error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .backend import active_backend
from .data import (
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    normalize_attribute_rows,
    save_dataset,
    standardize_features,
)
from .errors import (
    ConfigError,
    DatasetError,
    FormatError,
    NumericAbort,
    ShapeError,
)
from .gradcheck import COMPONENT_NAMES, DEFAULT_TOLERANCE, run_suite
from .inference import (
    label_propagation,
    mca,
    mean_prediction_entropy,
    predict_argmax,
    score_target,
    dump_hidden_activations,
)
from .training import (
    Adam,
    TrainConfig,
    build_model_for,
    load_checkpoint,
    save_checkpoint,
    train,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INPUT_ERROR = 2
EXIT_NUMERIC_ABORT = 3

_INPUT_ERRORS = (ConfigError, DatasetError, FormatError, ShapeError, ValueError, OSError)


# ---------------------------------------------------------------------------
# run configuration file


@dataclass
class LabelPropConfig:
    enabled: bool = True
    k: int = 10
    omega: float = 0.9
    iterations: int = 20


@dataclass
class RunConfig:
    manifest: str = "manifest.json"
    output_dir: str = "out"
    train: TrainConfig = field(default_factory=TrainConfig)
    label_propagation: LabelPropConfig = field(default_factory=LabelPropConfig)
    standardize: bool = False
    normalize_attributes: bool = False

    def to_dict(self) -> dict:
        return {
            "manifest": self.manifest,
            "output_dir": self.output_dir,
            "train": self.train.to_dict(),
            "label_propagation": dataclasses.asdict(self.label_propagation),
            "standardize": self.standardize,
            "normalize_attributes": self.normalize_attributes,
        }


def _build_section(cls, doc: dict, where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def parse_run_config(doc: dict, where: str = "config") -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: must be a JSON object")
    known = {
        "manifest",
        "output_dir",
        "train",
        "label_propagation",
        "standardize",
        "normalize_attributes",
    }
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    for flag in ("standardize", "normalize_attributes"):
        if not isinstance(doc.get(flag, False), bool):
            raise ConfigError(f"{where}: {flag} must be a boolean")
    train_cfg = _build_section(TrainConfig, doc.get("train", {}), f"{where}.train")
    lp_cfg = _build_section(
        LabelPropConfig, doc.get("label_propagation", {}), f"{where}.label_propagation"
    )
    return RunConfig(
        manifest=doc.get("manifest", "manifest.json"),
        output_dir=doc.get("output_dir", "out"),
        train=train_cfg,
        label_propagation=lp_cfg,
        standardize=bool(doc.get("standardize", False)),
        normalize_attributes=bool(doc.get("normalize_attributes", False)),
    )


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return parse_run_config(doc, where=str(path))


_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}
_TOP_FIELDS = {"manifest", "output_dir", "standardize", "normalize_attributes"}
_LP_FIELDS = {f.name for f in dataclasses.fields(LabelPropConfig)}


def apply_overrides(config: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``key=value`` overrides; bare train-field names target the train block."""
    doc = config.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        if "." in key:
            section, subkey = key.split(".", 1)
            if section == "train" and subkey in _TRAIN_FIELDS:
                doc["train"][subkey] = value
            elif section == "label_propagation" and subkey in _LP_FIELDS:
                doc["label_propagation"][subkey] = value
            else:
                raise ConfigError(f"unknown override key {key!r}")
        elif key in _TRAIN_FIELDS:
            doc["train"][key] = value
        elif key in _TOP_FIELDS:
            doc[key] = value
        else:
            raise ConfigError(f"unknown override key {key!r}")
    return parse_run_config(doc, where="overridden config")


def _load_config_with_overrides(args) -> RunConfig:
    config = load_run_config(args.config)
    return apply_overrides(config, args.override or [])


def _prepare_dataset(config: RunConfig, config_path):
    manifest_path = Path(config.manifest)
    if not manifest_path.is_absolute():
        manifest_path = Path(config_path).parent / manifest_path
    ds = load_dataset(manifest_path)
    if config.normalize_attributes:
        ds = normalize_attribute_rows(ds)
    if config.standardize:
        ds = standardize_features(ds)
    return ds


# ---------------------------------------------------------------------------
# synth


def _synth_spec_from_file(path) -> SyntheticSpec:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse synthetic spec {path}: {exc}") from exc
    return _build_section(SyntheticSpec, doc, f"{path}")


def cmd_synth(args) -> int:
    spec = _synth_spec_from_file(args.spec) if args.spec else SyntheticSpec()
    if args.seed is not None:
        spec.seed = args.seed
    spec.validate()
    ds = generate_synthetic(spec)
    manifest_path = save_dataset(
        args.out, ds, name=f"synthetic-{spec.seed}", split="PS"
    )
    print(f"wrote {manifest_path}")
    print(
        f"N_s={ds.n_s} N_t={ds.n_t} K_s={ds.k_s} K_t={ds.k_t} d={ds.d} r={ds.r}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    config = _load_config_with_overrides(args)
    out_dir = Path(config.output_dir)
    ds = _prepare_dataset(config, args.config)
    view = ds.train_view()
    model = build_model_for(view, config.train)
    adam = Adam(config.train.learning_rate)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    model, history = train(
        model,
        view,
        config.train,
        adam=adam,
        csv_path=out_dir / "losses.csv",
        progress=lambda line: print(line, flush=True),
    )
    wall = time.perf_counter() - started

    checkpoint_path = out_dir / "checkpoint.ckpt"
    save_checkpoint(
        model,
        adam,
        checkpoint_path,
        iteration=config.train.max_iterations,
        config=config.train,
        extra_meta={
            "standardize": config.standardize,
            "normalize_attributes": config.normalize_attributes,
        },
    )
    final = history[-1] if history else None
    summary = {
        "config": config.to_dict(),
        "overrides": list(args.override or []),
        "seed": config.train.seed,
        "wall_time_seconds": wall,
        "iterations": config.train.max_iterations,
        "backend": active_backend(),
        "final_losses": None
        if final is None
        else {
            "pre": final.pre,
            "ent": final.ent,
            "rec": final.rec,
            "align": final.align,
            "total": final.total,
        },
    }
    (out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(f"wrote {checkpoint_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _evaluate(model, ds, config: RunConfig, use_label_prop: bool):
    sm = score_target(model, ds)
    raw_pred = predict_argmax(sm)
    raw = mca(raw_pred, ds.target_labels, ds.k_t)
    refined = None
    refined_pred = None
    if use_label_prop:
        lp = config.label_propagation
        f = label_propagation(
            sm, ds.target_features, k=lp.k, omega=lp.omega, iterations=lp.iterations
        )
        refined_pred = predict_argmax(f)
        refined = mca(refined_pred, ds.target_labels, ds.k_t)
    return sm, raw, refined, refined_pred


def cmd_eval(args) -> int:
    config = _load_config_with_overrides(args)
    model, adam, iteration, meta = load_checkpoint(args.checkpoint)
    for flag in ("standardize", "normalize_attributes"):
        trained_with = bool(meta.get(flag, False))
        if trained_with != getattr(config, flag):
            raise ConfigError(
                f"checkpoint was trained with {flag}={trained_with} but the "
                f"config says {getattr(config, flag)}"
            )
    ds = _prepare_dataset(config, args.config)
    if model.dims.d != ds.d or model.dims.r != ds.r:
        raise DatasetError(
            f"checkpoint dims (d={model.dims.d}, r={model.dims.r}) do not match "
            f"dataset (d={ds.d}, r={ds.r})"
        )
    use_lp = config.label_propagation.enabled and not args.no_label_prop
    sm, raw, refined, refined_pred = _evaluate(model, ds, config, use_lp)

    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    final_pred = refined_pred if refined_pred is not None else raw.predicted_labels
    with open(out_dir / "predictions.csv", "w", encoding="ascii") as fh:
        fh.write("image_index,predicted_category,score\n")
        for i, cat in enumerate(final_pred):
            fh.write(f"{i},{int(cat)},{sm.scores[i, int(cat)]!r}\n")
    metrics = {
        "mca_raw": raw.mca,
        "per_class_accuracy_raw": raw.per_class_accuracy.tolist(),
        "mean_prediction_entropy": mean_prediction_entropy(sm),
        "config": config.to_dict(),
        "seed": config.train.seed,
        "checkpoint_iteration": iteration,
        "n_target_images": ds.n_t,
    }
    if refined is not None:
        metrics["mca_refined"] = refined.mca
        metrics["per_class_accuracy_refined"] = refined.per_class_accuracy.tolist()
    (out_dir / "metrics.json").write_text(
        json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    if args.dump_activations:
        paths = dump_hidden_activations(
            model, ds, args.dump_activations, images_per_domain=args.dump_images
        )
        print(f"dumped {len(paths)} activation matrices to {args.dump_activations}")
    print(f"MCA (raw): {raw.mca:.6f}")
    if refined is not None:
        print(f"MCA (refined): {refined.mca:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate


def cmd_ablate(args) -> int:
    config = _load_config_with_overrides(args)
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    if not modes:
        raise ConfigError("--modes must name at least one alignment mode")
    n_seeds = args.seeds
    if n_seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = _prepare_dataset(config, args.config)
    view = ds.train_view()

    rows = []
    for mode in modes:
        mcas: list[float | None] = []
        for offset in range(n_seeds):
            doc = config.to_dict()
            doc["train"]["alignment_mode"] = mode
            doc["train"]["seed"] = config.train.seed + offset
            try:
                run_cfg = parse_run_config(doc, where="ablation config")
                model = build_model_for(view, run_cfg.train)
                model, _ = train(model, view, run_cfg.train)
                sm = score_target(model, ds)
                result = mca(predict_argmax(sm), ds.target_labels, ds.k_t)
                mcas.append(result.mca)
                print(
                    f"mode={mode} seed={run_cfg.train.seed} mca={result.mca:.4f}",
                    flush=True,
                )
            except Exception as exc:  # keep going; mark the cell
                log.error("ablation run failed (mode=%s, offset=%d): %s", mode, offset, exc)
                mcas.append(None)
        ok = [v for v in mcas if v is not None]
        mean = float(np.mean(ok)) if ok else float("nan")
        std = float(np.std(ok)) if ok else float("nan")
        rows.append((mode, len(ok), len(mcas) - len(ok), mean, std, mcas))

    table_path = out_dir / "ablation.csv"
    with open(table_path, "w", encoding="ascii") as fh:
        fh.write("mode,n_ok,n_failed,mean_mca,std_mca,seed_mcas\n")
        for mode, n_ok, n_failed, mean, std, mcas in rows:
            cells = ";".join("NA" if v is None else f"{v:.6f}" for v in mcas)
            fh.write(f"{mode},{n_ok},{n_failed},{mean:.6f},{std:.6f},{cells}\n")
    print(f"wrote {table_path}")
    for mode, n_ok, _, mean, std, _ in rows:
        print(f"{mode}: mean MCA {mean:.4f} +/- {std:.4f} over {n_ok} runs")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    results = run_suite(
        seed=args.seed,
        trials=args.trials,
        tolerance=args.tolerance,
        corrupt=args.corrupt,
    )
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.component:20s} max_rel_err={r.max_rel_err:.3e}  {status}")
    print(
        f"{len(results) - len(failed)}/{len(results)} components passed "
        f"(tolerance {args.tolerance:g}, {args.trials} trials)"
    )
    if failed:
        print("failing components: " + ", ".join(r.component for r in failed))
        return EXIT_CHECK_FAILED
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pairzsl",
        description="Transductive zero-shot learning via semantic-visual pair "
        "domain adaptation",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="log progress at INFO level"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", help="JSON synthetic spec (defaults built in)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument(
        "--override",
        action="append",
        metavar="KEY=VALUE",
        help="override a config field (train fields may omit the train. prefix)",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--override", action="append", metavar="KEY=VALUE")
    p.add_argument(
        "--no-label-prop",
        action="store_true",
        help="report only the raw argmax prediction",
    )
    p.add_argument(
        "--dump-activations",
        metavar="DIR",
        help="write per-layer per-domain hidden activations as MTXB",
    )
    p.add_argument("--dump-images", type=int, default=256)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train/evaluate a grid of alignment modes")
    p.add_argument("--config", required=True)
    p.add_argument("--override", action="append", metavar="KEY=VALUE")
    p.add_argument(
        "--modes", default="dsbn,singlebn,mmd,dann,none", help="comma-separated modes"
    )
    p.add_argument("--seeds", type=int, default=5, help="number of seeds per mode")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    p.add_argument(
        "--corrupt",
        choices=COMPONENT_NAMES,
        help="testing aid: force the named component to fail",
    )
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC_ABORT
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
