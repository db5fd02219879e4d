"""Command-line entry points: synth, split, train, evaluate, report, gradcam.

Configuration is a flat UTF-8 key=value file; a CLI flag overrides the
GAITFRAIL_SEED environment variable, which overrides the file, which overrides
the built-in default.  Every command serializes its full effective
configuration next to its outputs and exits 0 on success, 2 on configuration
errors, 3 on data errors, and 4 on numeric failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from .backbones import (
    CheckpointError,
    ConfigError,
    FreezeError,
    NAMED_CONFIGS,
    freeze_config,
    load_checkpoint,
)
from .clips import AugmentPolicy, sample_eval_clip
from .data import DataError, load_manifest
from .gradcam import grad_cam, render_overlay, write_cam_centroids
from .metrics import (
    MetricError,
    aggregate_folds,
    evaluate_predictions,
    write_predictions_csv,
)
from .splits import (
    StratificationError,
    make_folds,
    read_fold_plan,
    verify_no_leakage,
    write_fold_plan,
)
from .synth import generate_cohort
from .trainer import (
    TrainConfig,
    TrainingError,
    build_model,
    evaluate_participants,
    load_sequences,
    train_fold,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

SEED_ENV_VAR = "GAITFRAIL_SEED"

_CONFIG_ERRORS = (ConfigError, FreezeError, StratificationError, CheckpointError, ValueError)
_DATA_ERRORS = (DataError, MetricError, FileNotFoundError)

_TRAIN_KEYS = {
    "learning_rate": float, "weight_decay": float, "batch_size": int,
    "clip_length": int, "frame_skip": int, "eval_clip_length": int,
    "total_iterations": int, "eval_interval": int, "part_count": int,
    "embed_dim": int, "margin": float, "lambda_ce": float, "lambda_triplet": float,
}
_AUG_KEYS = {
    "aug_affine": bool, "aug_affine_rotation_deg": float, "aug_affine_translate_frac": float,
    "aug_affine_scale_lo": float, "aug_affine_scale_hi": float,
    "aug_flip": bool, "aug_flip_probability": float,
    "aug_perspective": bool, "aug_perspective_scale": float,
    "aug_cutting": bool, "aug_cut_max_height_frac": float,
    "aug_rotation": bool, "aug_rotation_deg": float,
    "aug_dropout": bool, "aug_dropout_probability": float,
}
_GENERAL_KEYS = {
    "dataset": str, "folds": str, "k": int, "seed": int, "backbone": str,
    "freeze": str, "class_weighting": bool, "out_dir": str,
}
KNOWN_KEYS = {**_GENERAL_KEYS, **_TRAIN_KEYS, **_AUG_KEYS}


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def read_config_file(path: str | Path) -> dict:
    values = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{line_no}: expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        key, raw = key.strip(), raw.strip()
        if key not in KNOWN_KEYS:
            raise ValueError(f"{path}:{line_no}: unknown config key {key!r}")
        kind = KNOWN_KEYS[key]
        values[key] = _parse_bool(raw) if kind is bool else kind(raw)
    return values


def resolve_seed(cli_seed: int | None, file_values: dict, default: int = 0) -> int:
    if cli_seed is not None:
        return cli_seed
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        return int(env)
    if "seed" in file_values:
        return int(file_values["seed"])
    return default


def build_augment_policy(values: dict) -> AugmentPolicy:
    defaults = AugmentPolicy()
    kwargs = {}
    rename = {
        "aug_affine": "affine", "aug_affine_rotation_deg": "affine_rotation_deg",
        "aug_affine_translate_frac": "affine_translate_frac",
        "aug_flip": "flip", "aug_flip_probability": "flip_probability",
        "aug_perspective": "perspective", "aug_perspective_scale": "perspective_scale",
        "aug_cutting": "cutting", "aug_cut_max_height_frac": "cut_max_height_frac",
        "aug_rotation": "rotation", "aug_rotation_deg": "rotation_deg",
        "aug_dropout": "dropout", "aug_dropout_probability": "dropout_probability",
    }
    for key, attr in rename.items():
        if key in values:
            kwargs[attr] = values[key]
    lo = values.get("aug_affine_scale_lo", defaults.affine_scale_range[0])
    hi = values.get("aug_affine_scale_hi", defaults.affine_scale_range[1])
    kwargs["affine_scale_range"] = (lo, hi)
    return AugmentPolicy(**kwargs)


def build_train_config(values: dict, seed: int, class_weighting: bool) -> TrainConfig:
    kwargs = {key: values[key] for key in _TRAIN_KEYS if key in values}
    return TrainConfig(seed=seed, class_weighting=class_weighting,
                       augment_policy=build_augment_policy(values), **kwargs)


def validate_freeze_backbone(freeze_name: str, backbone_name: str) -> None:
    cfg = freeze_config(freeze_name)
    if not backbone_name.startswith(cfg.backbone_kind.value):
        raise FreezeError(
            f"freeze config {freeze_name} requires a {cfg.backbone_kind.value} backbone, "
            f"got {backbone_name!r}"
        )


def write_effective_config(out_dir: Path, command: str, values: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"# effective configuration for `gaitfrail {command}`"]
    for key in sorted(values):
        value = values[key]
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key}={value}")
    (out_dir / f"effective_config_{command}.txt").write_text("\n".join(lines) + "\n",
                                                             encoding="utf-8")


def _payload_sha(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


def write_report_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps({"payload": payload, "sha256": _payload_sha(payload)}, indent=2),
                    encoding="utf-8")


def read_report_json(path: Path) -> dict | None:
    """Return the payload, or None when the file is incomplete or corrupted."""
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        payload = doc["payload"]
        if doc.get("sha256") != _payload_sha(payload):
            return None
        return payload
    except (json.JSONDecodeError, KeyError, OSError):
        return None


def _effective_train_values(file_values: dict, args, seed: int) -> dict:
    values = dict(file_values)
    for key, flag in (("dataset", "manifest"), ("folds", "folds"), ("backbone", "backbone"),
                      ("freeze", "freeze"), ("out_dir", "out")):
        flag_value = getattr(args, flag, None)
        if flag_value is not None:
            values[key] = str(flag_value)
    if args.iterations is not None:
        values["total_iterations"] = args.iterations
    if args.eval_interval is not None:
        values["eval_interval"] = args.eval_interval
    if args.class_weighting is not None:
        values["class_weighting"] = args.class_weighting
    values["seed"] = seed
    return values


def cmd_synth(args) -> int:
    out_dir = Path(args.out)
    seed = resolve_seed(args.seed, {})
    generate_cohort(
        n_per_class=args.n_per_class, frames=args.frames, h=args.height, w=args.width,
        seed=seed, out_dir=out_dir, noise=args.noise,
    )
    write_effective_config(out_dir, "synth", {
        "out_dir": str(out_dir), "n_per_class": args.n_per_class, "frames": args.frames,
        "height": args.height, "width": args.width, "seed": seed, "noise": args.noise,
    })
    print(f"wrote cohort of {3 * args.n_per_class} participants to {out_dir}")
    return EXIT_OK


def cmd_split(args) -> int:
    seed = resolve_seed(args.seed, {})
    manifest = load_manifest(args.manifest, min_frames=1)
    plan = make_folds(manifest, k=args.k, seed=seed)
    verification = verify_no_leakage(plan, manifest)
    if not verification.passed:
        raise DataError("fold plan failed leakage verification: " + "; ".join(verification.problems))
    out = Path(args.out)
    write_fold_plan(plan, out)
    write_effective_config(out.parent, "split", {
        "dataset": str(args.manifest), "k": args.k, "seed": seed, "out": str(out),
    })
    print(f"wrote verified {args.k}-fold plan (seed {seed}) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    seed = resolve_seed(args.seed, file_values)
    values = _effective_train_values(file_values, args, seed)
    for required in ("dataset", "folds", "backbone", "freeze", "out_dir"):
        if required not in values:
            raise ValueError(f"missing required config key {required!r} (flag or file)")
    backbone_name, freeze_name = values["backbone"], values["freeze"]
    if backbone_name not in NAMED_CONFIGS:
        raise ConfigError(f"unknown backbone {backbone_name!r}; expected one of {sorted(NAMED_CONFIGS)}")
    validate_freeze_backbone(freeze_name, backbone_name)

    manifest = load_manifest(values["dataset"])
    plan = read_fold_plan(values["folds"])
    fold_index = args.fold
    if not 0 <= fold_index < plan.k:
        raise ValueError(f"fold {fold_index} out of range for k={plan.k}")
    backbone_cfg = NAMED_CONFIGS[backbone_name](input_size=manifest.resolution)
    train_cfg = build_train_config(values, seed, bool(values.get("class_weighting", False)))

    out_dir = Path(values["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    write_effective_config(out_dir, "train", {**values, "fold": fold_index})

    trajectory, model = train_fold(
        plan.folds[fold_index], manifest, train_cfg, backbone_cfg, freeze_config(freeze_name),
        rng=np.random.Generator(np.random.PCG64(seed + fold_index)),
        fold_index=fold_index, out_dir=out_dir, log_every=args.log_every,
    )
    write_predictions_csv(trajectory.final_predictions, out_dir / f"predictions_fold{fold_index}.csv")
    report = trajectory.final_report
    best = trajectory.best_point()
    write_report_json(out_dir / f"report_fold{fold_index}.json", {
        "experiment": f"{backbone_name}/{freeze_name}"
                      + ("/weighted" if train_cfg.class_weighting else "/unweighted"),
        "fold_index": fold_index,
        "micro_auc": report.micro_auc,
        "weighted_kappa": report.weighted_kappa,
        "best_micro_auc": best.micro_auc,
        "best_weighted_kappa": best.weighted_kappa,
        "confusion": report.confusion.tolist(),
        "per_class_auc": {str(k): v for k, v in report.per_class_auc.items()},
        "n_test": report.n_test,
    })
    print(f"fold {fold_index}: micro_auc={report.micro_auc:.4f} "
          f"weighted_kappa={report.weighted_kappa:.4f} (final checkpoint metrics)")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    seed = resolve_seed(args.seed, file_values)
    manifest = load_manifest(args.manifest)
    plan = read_fold_plan(args.folds)
    if not 0 <= args.fold < plan.k:
        raise ValueError(f"fold {args.fold} out of range for k={plan.k}")
    if args.backbone not in NAMED_CONFIGS:
        raise ConfigError(f"unknown backbone {args.backbone!r}")
    backbone_cfg = NAMED_CONFIGS[args.backbone](input_size=manifest.resolution)
    train_cfg = build_train_config(file_values, seed, False)
    model = build_model(backbone_cfg, train_cfg)
    load_checkpoint(args.checkpoint, {"backbone": model.backbone, "head": model.head},
                    expected_fingerprint=backbone_cfg.fingerprint())

    test_ids = sorted(plan.folds[args.fold][1])
    sequences = load_sequences(manifest, test_ids)
    preds = evaluate_participants(model, sequences, test_ids, train_cfg.eval_clip_length)
    report = evaluate_predictions(preds, fold_index=args.fold)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_predictions_csv(preds, out_dir / f"predictions_fold{args.fold}.csv")
    write_report_json(out_dir / f"report_fold{args.fold}.json", {
        "experiment": args.experiment or args.backbone,
        "fold_index": args.fold,
        "micro_auc": report.micro_auc,
        "weighted_kappa": report.weighted_kappa,
        "confusion": report.confusion.tolist(),
        "per_class_auc": {str(k): v for k, v in report.per_class_auc.items()},
        "n_test": report.n_test,
    })
    write_effective_config(out_dir, "evaluate", {
        "dataset": str(args.manifest), "folds": str(args.folds), "fold": args.fold,
        "backbone": args.backbone, "checkpoint": str(args.checkpoint), "seed": seed,
    })
    print(f"fold {args.fold}: micro_auc={report.micro_auc:.4f} "
          f"weighted_kappa={report.weighted_kappa:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    payloads = []
    skipped = []
    for pattern in args.reports:
        path = Path(pattern)
        candidates = sorted(path.glob("report_fold*.json")) if path.is_dir() else [path]
        for candidate in candidates:
            payload = read_report_json(candidate)
            if payload is None:
                skipped.append(str(candidate))
            else:
                payloads.append(payload)
    if skipped:
        print(f"skipped {len(skipped)} incomplete or corrupt report files: "
              + ", ".join(skipped), file=sys.stderr)
    if not payloads:
        raise DataError("no valid report files found")

    by_experiment: dict[str, list[dict]] = {}
    for payload in payloads:
        by_experiment.setdefault(payload["experiment"], []).append(payload)

    class _Row:
        def __init__(self, auc, kappa):
            self.micro_auc, self.weighted_kappa = auc, kappa

    header = f"{'Experiment':<36}{'Micro AUC':>20}{'Cohen Kappa':>20}"
    lines = [header, "-" * len(header)]
    for name in sorted(by_experiment):
        group = by_experiment[name]
        if len(group) < 2:
            auc_mean, auc_std = group[0]["micro_auc"], 0.0
            kappa_mean, kappa_std = group[0]["weighted_kappa"], 0.0
        else:
            stats = aggregate_folds([_Row(p["micro_auc"], p["weighted_kappa"]) for p in group])
            (auc_mean, auc_std) = stats["micro_auc"]
            (kappa_mean, kappa_std) = stats["weighted_kappa"]
        lines.append(f"{name:<36}{auc_mean:>11.4f} ± {auc_std:.4f}"
                     f"{kappa_mean:>13.4f} ± {kappa_std:.4f}")
    table = "\n".join(lines)
    print(table)
    if args.out:
        Path(args.out).write_text(table + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_gradcam(args) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    seed = resolve_seed(args.seed, file_values)
    manifest = load_manifest(args.manifest)
    if args.backbone not in NAMED_CONFIGS:
        raise ConfigError(f"unknown backbone {args.backbone!r}")
    backbone_cfg = NAMED_CONFIGS[args.backbone](input_size=manifest.resolution)
    train_cfg = build_train_config(file_values, seed, False)
    model = build_model(backbone_cfg, train_cfg)
    load_checkpoint(args.checkpoint, {"backbone": model.backbone, "head": model.head},
                    expected_fingerprint=backbone_cfg.fingerprint())

    sequences = load_sequences(manifest, [args.participant])
    clip = sample_eval_clip(sequences[args.participant], args.frames)
    target = int(clip.label) if args.target_class is None else args.target_class
    cam = grad_cam(model, clip, target, layer=args.layer)
    out_dir = Path(args.out)
    paths = render_overlay(clip, cam, out_dir)
    write_cam_centroids(cam, out_dir / "cam_centroids.csv")
    write_effective_config(out_dir, "gradcam", {
        "dataset": str(args.manifest), "participant": args.participant,
        "backbone": args.backbone, "checkpoint": str(args.checkpoint),
        "target_class": target, "layer": cam.layer, "frames": args.frames, "seed": seed,
    })
    print(f"wrote {len(paths)} overlay frames to {out_dir} (layer {cam.layer})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gaitfrail",
                                     description="Silhouette gait frailty staging pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic walker cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-class", type=int, default=10)
    p.add_argument("--frames", type=int, default=300)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=44)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="plan stratified participant-level folds")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train one (config, fold) run")
    p.add_argument("--config", default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--folds", default=None)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--backbone", default=None)
    p.add_argument("--freeze", default=None)
    p.add_argument("--class-weighting", dest="class_weighting", action="store_true", default=None)
    p.add_argument("--no-class-weighting", dest="class_weighting", action="store_false")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--eval-interval", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a fold's test set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--folds", required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--backbone", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--experiment", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="aggregate per-fold reports into a summary table")
    p.add_argument("reports", nargs="+", help="report files or directories containing them")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcam", help="render Grad-CAM overlays for one participant")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--participant", required=True)
    p.add_argument("--backbone", required=True)
    p.add_argument("--target-class", type=int, default=None)
    p.add_argument("--layer", default=None)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gradcam)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingError as exc:
        print(f"error: numeric: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _DATA_ERRORS as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except _CONFIG_ERRORS as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
