"""Command-line entry point: ``portrait-iqa {synth,train,predict,eval,ensemble,leaderboard}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import core, metrics
from .inference import PredictionSet, TTASpec, ensemble_mean, predict
from .models import MODELS, CheckpointError, load_checkpoint, save_checkpoint
from .training import LOSSES, BatchSpec, ScheduleSpec, TrainConfig, train


class InputError(Exception):
    """Bad or missing input; maps to exit code 2."""


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"input file not found: {path}")
    return p


def _load_manifest(path: str) -> core.Manifest:
    try:
        return core.load_manifest(_existing(path))
    except core.ManifestError as exc:
        raise InputError(f"{path}: {exc}") from None


def _load_features(path: str) -> core.FeatureStore:
    try:
        return core.load_features(_existing(path))
    except core.ManifestError as exc:
        raise InputError(f"{path}: {exc}") from None


def cmd_synth(args) -> None:
    try:
        cfg = core.SyntheticConfig(
            n_scenes=args.scenes, images_per_scene=args.per_scene, feature_dim=args.feature_dim,
            noise_sd=args.noise_sd, seed=args.seed,
        )
        if not 0 < args.test_fraction < 1:
            raise ValueError("--test-fraction must lie in (0, 1)")
    except ValueError as exc:
        raise InputError(str(exc)) from None
    manifest, features = core.generate_synthetic(cfg)
    split = core.scene_split(manifest, args.test_fraction, args.seed) if cfg.n_scenes >= 2 else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    core.save_manifest(manifest, out / "manifest.csv")
    core.save_features(features, out / "features.csv")
    if split is not None:
        core.save_manifest(manifest.subset(split.train_scenes), out / "train_manifest.csv")
        core.save_manifest(manifest.subset(split.test_scenes), out / "test_manifest.csv")


def cmd_train(args) -> None:
    manifest = _load_manifest(args.manifest)
    features = _load_features(args.features)
    try:
        if args.schedule == "step":
            schedule = ScheduleSpec("step", base_lr=args.lr, decay_factor=args.decay_factor,
                                    decay_every_epochs=args.decay_every)
        else:
            schedule = ScheduleSpec("cosine", max_lr=args.lr, min_lr=args.min_lr,
                                    cycle_epochs=args.cycle or args.epochs, warmup_epochs=args.warmup)
        config = TrainConfig(
            loss=args.loss, model=args.model, batch=BatchSpec(args.batch_scenes, args.batch_per_scene),
            schedule=schedule, epochs=args.epochs, seed=args.seed, optimizer=args.optimizer,
            weight_decay=args.weight_decay,
        )
    except ValueError as exc:
        raise InputError(str(exc)) from None
    if len(manifest.scenes) < config.batch.S:
        raise InputError(f"manifest has {len(manifest.scenes)} scenes, fewer than --batch-scenes {config.batch.S}")
    missing = [i for i in manifest.image_ids if i not in features]
    if missing:
        raise InputError(f"no features for image_id {missing[0]!r}")
    result = train(config, manifest, features)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.npz", result.model, {
        "scenes": result.scenes, "loss": config.loss, "seed": config.seed,
        "best_epoch": result.best_epoch, "best_loss": result.best_loss,
    })
    result.save_history(out / "history.csv")


def cmd_predict(args) -> None:
    try:
        model, header = load_checkpoint(_existing(args.checkpoint))
    except CheckpointError as exc:
        raise InputError(str(exc)) from None
    manifest = _load_manifest(args.manifest)
    features = _load_features(args.features)
    try:
        spec = TTASpec.parse(args.tta, seed=args.seed)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    missing = [i for i in manifest.image_ids if i not in features]
    if missing:
        raise InputError(f"no features for image_id {missing[0]!r}")
    preds = predict(model, manifest, features, spec, model_id=header["model"])
    preds.save(args.out)


def cmd_eval(args) -> None:
    manifest = _load_manifest(args.manifest)
    try:
        preds = PredictionSet.load(_existing(args.pred))
    except ValueError as exc:
        raise InputError(str(exc)) from None
    try:
        report = metrics.evaluate(preds.scores, manifest)
    except KeyError as exc:
        raise InputError(exc.args[0]) from None
    report.save(args.out)


def cmd_ensemble(args) -> None:
    sets = []
    for path in args.preds:
        try:
            sets.append(PredictionSet.load(_existing(path)))
        except ValueError as exc:
            raise InputError(str(exc)) from None
    try:
        merged = ensemble_mean(sets)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    merged.save(args.out)


def cmd_leaderboard(args) -> None:
    names = args.names or [Path(p).stem for p in args.reports]
    if len(names) != len(args.reports):
        raise InputError("--names must match --reports one to one")
    reports = []
    for name, path in zip(names, args.reports):
        try:
            reports.append((name, metrics.MetricReport.load(_existing(path))))
        except (ValueError, KeyError, TypeError) as exc:
            raise InputError(f"{path}: not a metric report ({exc})") from None
    print(metrics.format_leaderboard(metrics.leaderboard(reports)))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="portrait-iqa", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene-grouped dataset")
    p.add_argument("--scenes", type=int, default=8)
    p.add_argument("--per-scene", type=int, default=40)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--noise-sd", type=float, default=0.05)
    p.add_argument("--test-fraction", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model, keeping the lowest-loss epoch")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--model", choices=sorted(MODELS), default="hyper")
    p.add_argument("--loss", choices=LOSSES, default="ssi")
    p.add_argument("--batch-scenes", type=int, default=4)
    p.add_argument("--batch-per-scene", type=int, default=32)
    p.add_argument("--schedule", choices=("step", "cosine"), default="step")
    p.add_argument("--lr", type=float, default=2e-5, help="base lr (step) or max lr (cosine)")
    p.add_argument("--decay-factor", type=float, default=10.0)
    p.add_argument("--decay-every", type=int, default=5)
    p.add_argument("--min-lr", type=float, default=0.0)
    p.add_argument("--warmup", type=int, default=0)
    p.add_argument("--cycle", type=int, default=None, help="cosine length in epochs (default: --epochs)")
    p.add_argument("--optimizer", choices=("adam", "adamw"), default="adam")
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="score a manifest with test-time augmentation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--tta", default="none", help="none|five|ten|rand:k|corners|dense:n")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="scene-wise correlation report")
    p.add_argument("--pred", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ensemble", help="average several prediction files")
    p.add_argument("--preds", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("leaderboard", help="rank metric reports by final metric")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--names", nargs="+")
    p.set_defaults(func=cmd_leaderboard)
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every runtime failure becomes a one-line diagnostic
        print(f"error: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
