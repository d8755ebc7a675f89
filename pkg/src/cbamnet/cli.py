"""Command-line entry point.

Subcommands: synth (generate the synthetic corpus), ingest (build and persist
a split dataset index), train (two-phase runs over one or more seeds),
evaluate (run checkpoints on the held-out test split), gradcam (render
explanation triptychs), report (aggregate per-seed evaluation reports).

Exit codes: 0 success, 1 usage error, 2 data error, 3 training fault,
4 I/O error. Configuration precedence: command-line flags override the
config file, which overrides the built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .backbone import CbamConfig, build_model, get_preset
from .checkpoint import CheckpointError, load_checkpoint
from .data import (
    CLASS_NAMES,
    AugmentConfig,
    DatasetError,
    DatasetIndex,
    SyntheticSpec,
    compute_class_weights,
    ingest_kermany_layout,
    load_image,
    stratified_split,
    synthesize_dataset,
)
from .fsio import atomic_write_text
from .gradcam import GradCamConfig, render_triptych
from .tensor import ShapeError
from .metrics import (
    auc_trapezoid,
    classification_report,
    config_digest,
    confusion_matrix,
    emit_report,
    report_to_dict,
    roc_curve_ovr,
)
from .training import (
    PhaseConfig,
    TrainingFault,
    default_phases,
    evaluate_dataset,
    history_csv,
    load_records,
    run_two_phase,
)


class UsageError(Exception):
    pass


# Protocol defaults; flags and the config file override them.
DEFAULTS = {
    "preset": "dense-tiny",
    "side": None,  # preset's native side unless overridden
    "batch_size": 32,
    "seeds": "42,7,123",
    "phase1_epochs": 15,
    "phase2_epochs": 20,
    "phase1_lr": 1e-3,
    "phase2_lr": 1e-5,
    "unfreeze_last_n": None,  # per-preset default
    "split_seed": 1234,
    "train_fraction": 0.8,
    "cbam_ratio": 8,
    "per_class": 200,
    "test_fraction": 0.2,
    "seed": 0,
    "tap": "final_feature_map",
    "explain": "predicted",
    "opacity": 0.45,
    "augment": True,
}

_INT_KEYS = {"batch_size", "phase1_epochs", "phase2_epochs", "unfreeze_last_n",
             "split_seed", "cbam_ratio", "per_class", "seed", "side"}
_FLOAT_KEYS = {"phase1_lr", "phase2_lr", "train_fraction", "test_fraction", "opacity"}
_BOOL_KEYS = {"augment"}


def parse_config_file(path) -> dict:
    """key = value lines; '#' comments; unknown keys are rejected."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in DEFAULTS:
            raise UsageError(f"{path}:{lineno}: unknown configuration key {key!r}")
        values[key] = value
    return values


def _coerce(key: str, value):
    if value is None or not isinstance(value, str):
        return value
    try:
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
        if key in _BOOL_KEYS:
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
    except ValueError as exc:
        raise UsageError(f"configuration key {key!r}: cannot parse {value!r}") from exc
    return value


def resolve_config(args) -> dict:
    """defaults <- config file <- CLI flags, with type coercion."""
    resolved = dict(DEFAULTS)
    config_path = getattr(args, "config", None)
    if config_path:
        resolved.update(parse_config_file(config_path))
    for key in DEFAULTS:
        cli_value = getattr(args, key, None)
        if cli_value is not None:
            resolved[key] = cli_value
    return {k: _coerce(k, v) for k, v in resolved.items()}


def parse_seeds(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(s) for s in text]
    try:
        seeds = [int(part) for part in str(text).split(",") if part.strip()]
    except ValueError as exc:
        raise UsageError(f"cannot parse seeds {text!r}: {exc}") from exc
    if not seeds:
        raise UsageError("at least one seed is required")
    return seeds


def canonical_config_text(cfg: dict) -> str:
    return "\n".join(f"{k}={cfg[k]}" for k in sorted(cfg))


def _resolve_side(cfg) -> int:
    return cfg["side"] if cfg["side"] is not None else get_preset(cfg["preset"]).input_side


def _split_datasets(root, cfg):
    index = ingest_kermany_layout(root)
    train_records, val_records = stratified_split(
        index.subset("train"), train_fraction=cfg["train_fraction"], seed=cfg["split_seed"])
    return index, train_records, val_records


# -- subcommands -----------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    spec = SyntheticSpec(per_class=cfg["per_class"], side=_resolve_side(cfg),
                         seed=cfg["seed"], test_fraction=cfg["test_fraction"])
    index = synthesize_dataset(spec, args.out)
    counts = index.counts()
    print(f"wrote {len(index)} images under {args.out} "
          f"(per class: {counts.tolist()}, side {spec.side}, seed {spec.seed})")
    return 0


def cmd_ingest(args) -> int:
    cfg = resolve_config(args)
    index, train_records, val_records = _split_datasets(args.data, cfg)
    test_records = index.subset("test")
    combined = DatasetIndex(train_records + val_records + test_records, index.root)
    out = Path(args.out) if args.out else index.root / "index.tsv"
    combined.save(out)
    print(f"indexed {len(combined)} records "
          f"(train {len(train_records)}, val {len(val_records)}, test {len(test_records)}) "
          f"-> {out}")
    return 0


def _phases_for(cfg, model):
    phase1_default, phase2_default = default_phases(model)
    unfreeze = cfg["unfreeze_last_n"]
    if unfreeze is None:
        unfreeze = phase2_default.unfreeze_last_n
    return (PhaseConfig(cfg["phase1_epochs"], cfg["phase1_lr"], 0, 1),
            PhaseConfig(cfg["phase2_epochs"], cfg["phase2_lr"], unfreeze, 2))


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    seeds = parse_seeds(cfg["seeds"])
    side = _resolve_side(cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    _, train_records, val_records = _split_datasets(args.data, cfg)
    train_data = load_records(train_records, side)
    val_data = load_records(val_records, side)
    weights = compute_class_weights(np.bincount(train_data.labels, minlength=3))
    augment_cfg = AugmentConfig() if cfg["augment"] else AugmentConfig.disabled()
    digest = config_digest(canonical_config_text(cfg))

    summaries = {}
    for seed in seeds:
        model = build_model(get_preset(cfg["preset"], input_side=side),
                            cbam=CbamConfig(ratio=cfg["cbam_ratio"]), seed=seed)
        result = run_two_phase(
            model, train_data, val_data, _phases_for(cfg, model), weights,
            out_dir / f"best_seed{seed}.ckpt", seed=seed,
            batch_size=cfg["batch_size"], augment_cfg=augment_cfg)
        atomic_write_text(out_dir / f"history_seed{seed}.csv", history_csv(result.histories))
        summaries[seed] = {
            "best_val_accuracy": result.best_val_accuracy,
            "best_epoch": result.best_epoch,
            "epochs": [len(h.epochs) for h in result.histories],
            "stop_reasons": [h.stop_reason for h in result.histories],
        }
        print(f"seed {seed}: best val accuracy {result.best_val_accuracy:.4f} "
              f"at epoch {result.best_epoch}")

    summary = {"version": 1, "config_digest": digest, "seeds": seeds,
               "runs": {str(s): summaries[s] for s in seeds}}
    if len(seeds) >= 2:
        from .metrics import aggregate_runs

        agg = aggregate_runs([summaries[s]["best_val_accuracy"] for s in seeds])
        summary["val_accuracy"] = {"mean": agg.mean, "std": agg.std, "n": agg.n}
    atomic_write_text(out_dir / "run_summary.json", json.dumps(summary, indent=2) + "\n")
    return 0


def _checkpoints_for_evaluate(args) -> list[Path]:
    paths = [Path(p) for p in (args.checkpoint or [])]
    if args.run_dir:
        paths.extend(sorted(Path(args.run_dir).glob("best_seed*.ckpt")))
    if not paths:
        raise UsageError("evaluate needs --checkpoint or --run-dir with best_seed*.ckpt files")
    return paths


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    out_dir = Path(args.out)
    digest = config_digest(canonical_config_text(cfg))
    index = ingest_kermany_layout(args.data)
    test_records = index.subset("test")
    if not test_records:
        raise DatasetError(f"no test records under {args.data}")

    loaded = []
    for path in _checkpoints_for_evaluate(args):
        model, metadata = load_checkpoint(path)
        loaded.append((path, model, metadata))

    side = loaded[0][1].backbone.input_side
    test_data = load_records(test_records, side)

    for path, model, metadata in loaded:
        seed = int(metadata.get("seed", -1))
        _, accuracy, probs = evaluate_dataset(model, test_data, cfg["batch_size"])
        y_pred = probs.argmax(axis=1)
        cm = confusion_matrix(test_data.labels, y_pred)
        curves = {c: roc_curve_ovr(probs, test_data.labels, c) for c in range(3)}
        aucs = [auc_trapezoid(curves[c]) for c in range(3)]
        run = report_to_dict(classification_report(cm, aucs), cm)
        roc_points = {CLASS_NAMES[c]: list(zip(curves[c].fpr.tolist(), curves[c].tpr.tolist()))
                      for c in range(3)}
        seed_dir = out_dir / f"seed{seed}"
        emit_report({seed: run}, seed_dir, [seed], digest, roc_points=roc_points)
        print(f"{path.name}: test accuracy {accuracy:.4f} -> {seed_dir / 'report.json'}")
    return 0


def cmd_gradcam(args) -> int:
    cfg = resolve_config(args)
    model, _ = load_checkpoint(args.checkpoint)
    explain = cfg["explain"]
    if explain != "predicted":
        if str(explain) in CLASS_NAMES:
            explain = CLASS_NAMES.index(str(explain))
        else:
            try:
                explain = int(explain)
            except ValueError as exc:
                raise UsageError(
                    f"--explain must be 'predicted', a class name, or an index: {explain!r}") from exc
        if not 0 <= explain < 3:
            raise UsageError(f"--explain index out of range [0, 3): {explain}")
    gc_config = GradCamConfig(tap=cfg["tap"], class_selection=explain, opacity=cfg["opacity"])
    side = model.backbone.input_side
    for image_path in args.images:
        image = load_image(image_path, side)
        out = render_triptych(model, image, Path(image_path).name, args.out, gc_config)
        print(f"{image_path} -> {out}")
    return 0


def cmd_report(args) -> int:
    cfg = resolve_config(args)
    eval_dir = Path(args.eval_dir)
    report_files = sorted(eval_dir.glob("seed*/report.json"))
    if not report_files:
        raise DatasetError(f"no seed*/report.json files under {eval_dir}")
    per_seed = {}
    seeds = []
    for path in report_files:
        payload = json.loads(path.read_text())
        for seed_text, run in payload["runs"].items():
            seed = int(seed_text)
            seeds.append(seed)
            per_seed[seed] = run
    out_dir = Path(args.out) if args.out else eval_dir
    digest = config_digest(canonical_config_text(cfg))
    emit_report(per_seed, out_dir, seeds, digest)
    print(f"aggregated {len(seeds)} run(s) -> {out_dir / 'report.json'}")
    return 0


# -- argument wiring ---------------------------------------------------------


def _add_config_flags(parser, keys):
    flags = {
        "preset": dict(choices=["dense-tiny", "densenet121"]),
        "side": dict(type=int),
        "batch_size": dict(type=int),
        "seeds": dict(),
        "phase1_epochs": dict(type=int),
        "phase2_epochs": dict(type=int),
        "phase1_lr": dict(type=float),
        "phase2_lr": dict(type=float),
        "unfreeze_last_n": dict(type=int),
        "split_seed": dict(type=int),
        "train_fraction": dict(type=float),
        "cbam_ratio": dict(type=int),
        "per_class": dict(type=int),
        "test_fraction": dict(type=float),
        "seed": dict(type=int),
        "tap": dict(),
        "explain": dict(),
        "opacity": dict(type=float),
    }
    for key in keys:
        parser.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None, **flags[key])
    parser.add_argument("--config", default=None, help="key = value configuration file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cbamnet",
        description="Attention-gated dense CNN pipeline: data, training, "
                    "evaluation, and Grad-CAM explanations.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic three-class corpus")
    p.add_argument("--out", required=True)
    _add_config_flags(p, ["per_class", "side", "seed", "test_fraction"])
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("ingest", help="index a dataset root and persist the split")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help="index file (default <data>/index.tsv)")
    _add_config_flags(p, ["split_seed", "train_fraction"])
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser("train", help="two-phase training over one or more seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-augment", dest="augment", action="store_const", const=False,
                   default=None)
    _add_config_flags(p, ["preset", "side", "batch_size", "seeds", "phase1_epochs",
                          "phase2_epochs", "phase1_lr", "phase2_lr", "unfreeze_last_n",
                          "split_seed", "train_fraction", "cbam_ratio"])
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("evaluate", help="run checkpoints on the held-out test split")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", nargs="*", default=None)
    p.add_argument("--run-dir", default=None)
    _add_config_flags(p, ["batch_size"])
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("gradcam", help="render original/heatmap/overlay triptychs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p, ["tap", "explain", "opacity"])
    p.set_defaults(handler=cmd_gradcam)

    p = sub.add_parser("report", help="aggregate per-seed evaluation reports")
    p.add_argument("--eval-dir", required=True)
    p.add_argument("--out", default=None)
    _add_config_flags(p, [])
    p.set_defaults(handler=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return args.handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DatasetError, CheckpointError, ShapeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except TrainingFault as exc:
        print(f"training fault: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
