"""Command-line interface: synth | train | eval | ablate | gradcheck | predict-map.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numerical
failure (NaN abort or a failed gradient check). Every run prints its full
resolved configuration so any output is reproducible from its own log header.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .data import (
    HslcError,
    NormStats,
    PatchConfig,
    Scene,
    apply_norm_stats,
    compute_norm_stats,
    extract_patches,
    load_scene,
    load_scene_dir,
    save_scene,
    split_samples,
    synth_scene,
)
from .gradcheck import check_model_gradients
from .metrics import PALETTE, format_percent, render_map, render_truth_map, report_csv, report_json
from .model import CheckpointError, ModelConfig, init_params, load_checkpoint
from .tensor import NumericalError
from .training import (
    TrainConfig,
    ablation_csv,
    evaluate,
    run_ablation_study,
    train,
)

__all__ = ["main", "entrypoint"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # exit 1, not argparse's default 2
        raise UsageError(message)


def _add_scene_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scene", help="scene directory containing hsi.hslc/lidar.hslc/labels.hslc")
    p.add_argument("--hsi", help="HSI cube file (HSLC)")
    p.add_argument("--lidar", help="LiDAR raster file (HSLC)")
    p.add_argument("--labels", help="label raster file (HSLC)")


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--patch-size", type=int, default=7, help="odd patch side length (default 7)")
    p.add_argument("--hidden", type=int, default=64, help="spectral hidden width d (default 64)")
    p.add_argument("--k1", type=int, default=3, help="1-D kernel size (default 3)")
    p.add_argument("--k2", type=int, default=3, help="2-D kernel size (default 3)")
    p.add_argument("--s-channels", type=int, default=16, help="spatial block channels (default 16)")
    p.add_argument("--depth", type=int, default=2, help="spatial block conv stages (default 2)")
    p.add_argument("--head-channels", type=int, default=8, help="fusion head conv channels (default 8)")
    p.add_argument("--activation", choices=["silu", "relu", "tanh"], default="silu")
    p.add_argument("--no-forward", action="store_true", help="disable the forward spectral pathway")
    p.add_argument("--no-reversed", action="store_true", help="disable the reversed spectral pathway")
    p.add_argument("--no-spatial", action="store_true", help="disable the spatial block")
    p.add_argument("--modality", choices=["both", "hsi", "lidar"], default="both")


def _add_train_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.0001)
    p.add_argument("--train-per-class", type=int, default=8)
    p.add_argument("--eval-every", type=int, default=0, help="test-eval period in epochs (0 = final only)")
    p.add_argument("--seed", type=int, default=1)


def build_parser() -> _Parser:
    parser = _Parser(prog="hslinet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--size", default="64x64", help="HxW, e.g. 64x64")
    p.add_argument("--bands", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True, help="output scene directory")

    p = sub.add_parser("train", help="train a model on a scene")
    _add_scene_args(p)
    _add_model_args(p)
    _add_train_args(p)
    p.add_argument("--epoch-grid", help="comma list of epoch counts; trains each from scratch")
    p.add_argument("--out", help="output directory for run.csv, best.hslm, norm.json")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a scene")
    _add_scene_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--norm-stats", help="norm.json saved by train (default: compute from this scene)")
    p.add_argument("--train-per-class", type=int, default=8)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--split", choices=["test", "all"], default="test", help="evaluate the test split or all labeled pixels")
    p.add_argument("--class-names", help="text file with one class name per line")
    p.add_argument("--out", help="write a JSON report here")

    p = sub.add_parser("ablate", help="run the architecture + modality ablation grid")
    _add_scene_args(p)
    _add_model_args(p)
    _add_train_args(p)
    p.add_argument("--seeds", help="comma list of seeds (overrides --seed; rows are averaged in the summary)")
    p.add_argument("--test-per-class", type=int, default=0, help="cap test samples per class (0 = all)")
    p.add_argument("--out", help="write the grid CSV here")

    p = sub.add_parser("gradcheck", help="finite-difference check of all model gradients")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--p", type=int, default=3)
    p.add_argument("--ch", type=int, default=6)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--s-channels", type=int, default=4)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--head-channels", type=int, default=4)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("predict-map", help="render a classification map as P6 PPM")
    _add_scene_args(p)
    p.add_argument("--checkpoint")
    p.add_argument("--norm-stats")
    p.add_argument("--all-pixels", action="store_true", help="classify unlabeled pixels too")
    p.add_argument("--truth", action="store_true", help="render the ground-truth labels instead")
    p.add_argument("--out", required=True, help="output PPM path")

    return parser


def _echo_config(args: argparse.Namespace) -> None:
    items = sorted(vars(args).items())
    print("resolved config:")
    for key, value in items:
        print(f"  {key} = {value}")


def _load_scene_args(args: argparse.Namespace) -> Scene:
    if args.scene:
        path = Path(args.scene)
        if not path.is_dir():
            raise HslcError(f"scene directory not found: {path}")
        return load_scene_dir(path)
    if args.hsi and args.lidar and args.labels:
        for p in (args.hsi, args.lidar, args.labels):
            if not Path(p).is_file():
                raise HslcError(f"input file not found: {p}")
        return load_scene(args.hsi, args.lidar, args.labels)
    raise UsageError("provide --scene DIR or all of --hsi/--lidar/--labels")


def _model_config(args: argparse.Namespace, ch: int, classes: int) -> ModelConfig:
    return ModelConfig(
        ch=ch,
        classes=classes,
        p=args.patch_size,
        d=args.hidden,
        k1=args.k1,
        k2=args.k2,
        s_channels=args.s_channels,
        s_depth=args.depth,
        head_channels=args.head_channels,
        activation=args.activation,
        enable_forward=not args.no_forward,
        enable_reversed=not args.no_reversed,
        enable_spatial=not args.no_spatial,
        modality=args.modality,
    )


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise UsageError(f"--size must look like 64x64, got {text!r}") from None


def _cmd_synth(args: argparse.Namespace) -> int:
    h, w = _parse_size(args.size)
    scene = synth_scene(args.classes, h, w, args.bands, args.noise, args.seed)
    save_scene(scene, args.out)
    print(f"wrote {scene.height}x{scene.width} scene with {scene.bands} bands, "
          f"{scene.num_classes} classes to {args.out}")
    return EXIT_OK


def _prepare_samples(args: argparse.Namespace, scene: Scene, model_cfg: ModelConfig):
    stats = compute_norm_stats(scene)
    norm_scene = apply_norm_stats(scene, stats)
    train_idx, test_idx = split_samples(scene, args.train_per_class, args.seed)
    patch_cfg = PatchConfig(model_cfg.p, model_cfg.ch)
    return (
        norm_scene,
        stats,
        extract_patches(norm_scene, patch_cfg, train_idx),
        extract_patches(norm_scene, patch_cfg, test_idx),
    )


def _cmd_train(args: argparse.Namespace) -> int:
    scene = _load_scene_args(args)
    model_cfg = _model_config(args, scene.bands, scene.num_classes)
    _, stats, train_samples, test_samples = _prepare_samples(args, scene, model_cfg)

    out_dir = Path(args.out) if args.out else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        stats.save(out_dir / "norm.json")

    epoch_list = (
        [int(e) for e in args.epoch_grid.split(",")] if args.epoch_grid else [args.epochs]
    )
    for epochs in epoch_list:
        train_cfg = TrainConfig(
            batch_size=args.batch,
            lr=args.lr,
            epochs=epochs,
            seed=args.seed,
            eval_every=args.eval_every,
            checkpoint_path=str(out_dir / "best.hslm") if out_dir else None,
        )
        model = init_params(model_cfg, seed=args.seed)
        record = train(model, train_samples, test_samples, train_cfg)
        final = record.final
        if final is None:
            print(f"epochs={epochs}: nothing trained")
            continue
        if out_dir:
            suffix = f"_{epochs}" if len(epoch_list) > 1 else ""
            record.to_csv(out_dir / f"run{suffix}.csv")
        line = f"epochs={epochs} final train OA {final.train_oa:.4f} final loss {final.loss:.4f}"
        if final.test_oa is not None:
            line += (
                f" test OA {format_percent(final.test_oa)}%"
                f" AA {format_percent(final.test_aa)}%"
                f" Kappa {format_percent(final.test_kappa)}%"
            )
        print(line)
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    scene = _load_scene_args(args)
    model = load_checkpoint(args.checkpoint)
    if args.norm_stats:
        stats = NormStats.load(args.norm_stats)
    else:
        stats = compute_norm_stats(scene)
    norm_scene = apply_norm_stats(scene, stats)
    patch_cfg = PatchConfig(model.config.p, model.config.ch)
    if args.split == "test":
        _, test_idx = split_samples(scene, args.train_per_class, args.seed)
    else:
        test_idx = np.flatnonzero(scene.labels.ravel() > 0)
    samples = extract_patches(norm_scene, patch_cfg, test_idx)
    cm = evaluate(model, samples)
    class_names = None
    if args.class_names:
        class_names = Path(args.class_names).read_text().splitlines()
    print(report_csv(cm, class_names), end="")
    if args.out:
        Path(args.out).write_text(report_json(cm, class_names))
    return EXIT_OK


def _cmd_ablate(args: argparse.Namespace) -> int:
    scene = _load_scene_args(args)
    model_cfg = _model_config(args, scene.bands, scene.num_classes)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [args.seed]
    train_cfg = TrainConfig(batch_size=args.batch, lr=args.lr, epochs=args.epochs, seed=args.seed)
    rows = run_ablation_study(
        scene,
        model_cfg,
        train_cfg,
        seeds,
        per_class_train=args.train_per_class,
        per_class_test=args.test_per_class or None,
    )
    if args.out:
        ablation_csv(rows, args.out)
    print("name,forward,reversed,spatial,modality,seed,oa,aa,kappa")
    for r in rows:
        print(
            f"{r.name},{int(r.forward)},{int(r.reversed_)},{int(r.spatial)},{r.modality},"
            f"{r.seed},{r.oa:.4f},{r.aa:.4f},{r.kappa:.4f}"
        )
    return EXIT_OK


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    config = ModelConfig(
        ch=args.ch,
        classes=args.classes,
        p=args.p,
        d=args.d,
        s_channels=args.s_channels,
        s_depth=args.depth,
        head_channels=args.head_channels,
    )
    result = check_model_gradients(config, seed=args.seed, step=args.step, batch=args.batch)
    worst_name, worst = result.worst()
    print(f"max relative error {result.max_rel_err:.3e} (worst: {worst_name} at {worst:.3e})")
    if result.max_rel_err <= args.tolerance:
        print(f"gradcheck PASS (tolerance {args.tolerance:.1e})")
        return EXIT_OK
    print(f"gradcheck FAIL (tolerance {args.tolerance:.1e})")
    return EXIT_NUMERIC


def _cmd_predict_map(args: argparse.Namespace) -> int:
    scene = _load_scene_args(args)
    if args.truth:
        render_truth_map(scene, PALETTE, args.out)
        print(f"wrote ground-truth map to {args.out}")
        return EXIT_OK
    if not args.checkpoint:
        raise UsageError("--checkpoint is required unless --truth is given")
    model = load_checkpoint(args.checkpoint)
    stats = NormStats.load(args.norm_stats) if args.norm_stats else compute_norm_stats(scene)
    norm_scene = apply_norm_stats(scene, stats)
    render_map(norm_scene, model, PALETTE, args.out, all_pixels=args.all_pixels)
    print(f"wrote classification map to {args.out}")
    return EXIT_OK


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "gradcheck": _cmd_gradcheck,
    "predict-map": _cmd_predict_map,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    _echo_config(args)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (HslcError, CheckpointError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


def entrypoint() -> None:
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entrypoint()
