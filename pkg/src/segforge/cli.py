"""Batch command-line interface: synth, prepare, train, infer, eval.

Exit codes: 0 success, 1 usage/config error, 2 data error (missing or
malformed inputs), 3 unexpected runtime failure.

Options resolve in three layers: built-in defaults, then a config file of
flat ``section.key = value`` lines given with ``--config``, then explicit
command-line flags. Unless overridden, image size and model width follow
the data: synthetic-only manifests run at desk scale (64x64, depth 3,
16 base channels), anything else at radiograph scale (512x512, depth 4,
64 base channels).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from segforge import data as dp
from segforge import morphology, training, unet
from segforge.data import DataError
from segforge.unet import ConfigError, ModelFileError

__all__ = ["main", "build_parser", "load_config_file"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3

_CONFIG_KEYS = {
    "seed",
    "model.depth",
    "model.base_channels",
    "model.convs_per_block",
    "model.kernel_size",
    "train.epochs",
    "train.batch_size",
    "train.learning_rate",
    "train.loss",
    "data.image_size",
    "data.train_fraction",
    "data.lobe_dilate_size",
    "data.lobe_dilate_iterations",
    "augment.enabled",
    "augment.rotate_max_deg",
    "augment.zoom_lo",
    "augment.zoom_hi",
    "augment.crop_fraction",
    "augment.copies",
    "post.threshold",
    "post.pipeline",
    "post.keep_largest",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; the contract here reserves 2 for
    # data errors, so route usage problems to exit code 1
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def load_config_file(path) -> dict[str, str]:
    """Parse flat ``section.key = value`` lines; '#' starts a comment."""
    values: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = value
    return values


@dataclass
class _Setting:
    """One option with defaults < config file < flag precedence."""

    key: str
    default: object
    parse: type = str

    def resolve(self, flag_value, file_values: dict[str, str]):
        if flag_value is not None:
            return flag_value
        if self.key in file_values:
            raw = file_values[self.key]
            if self.parse is bool:
                return raw.strip().lower() in ("1", "true", "yes", "on")
            return self.parse(raw)
        return self.default


_SETTINGS = {
    "seed": _Setting("seed", 0, int),
    "depth": _Setting("model.depth", None, int),
    "base_channels": _Setting("model.base_channels", None, int),
    "convs_per_block": _Setting("model.convs_per_block", 2, int),
    "kernel_size": _Setting("model.kernel_size", 3, int),
    "epochs": _Setting("train.epochs", 50, int),
    "batch_size": _Setting("train.batch_size", 2, int),
    "learning_rate": _Setting("train.learning_rate", 1e-4, float),
    "loss": _Setting("train.loss", "bce_plus_dice", str),
    "image_size": _Setting("data.image_size", None, int),
    "train_fraction": _Setting("data.train_fraction", 0.8, float),
    "lobe_dilate_size": _Setting("data.lobe_dilate_size", dp.DEFAULT_LOBE_SE_SIZE, int),
    "lobe_dilate_iterations": _Setting(
        "data.lobe_dilate_iterations", dp.DEFAULT_LOBE_ITERATIONS, int
    ),
    "augment_enabled": _Setting("augment.enabled", True, bool),
    "rotate_max_deg": _Setting("augment.rotate_max_deg", 10.0, float),
    "zoom_lo": _Setting("augment.zoom_lo", 0.9, float),
    "zoom_hi": _Setting("augment.zoom_hi", 1.1, float),
    "crop_fraction": _Setting("augment.crop_fraction", 0.9, float),
    "aug_copies": _Setting("augment.copies", 3, int),
    "post_threshold": _Setting("post.threshold", 0.5, float),
    "post_pipeline": _Setting("post.pipeline", "open:3:1,close:3:1", str),
    "keep_largest": _Setting("post.keep_largest", 2, int),
}


@dataclass
class RunConfig:
    """Everything a command run needs, after precedence resolution."""

    seed: int = 0
    depth: Optional[int] = None
    base_channels: Optional[int] = None
    convs_per_block: int = 2
    kernel_size: int = 3
    epochs: int = 50
    batch_size: int = 2
    learning_rate: float = 1e-4
    loss: str = "bce_plus_dice"
    image_size: Optional[int] = None
    train_fraction: float = 0.8
    lobe_dilate_size: int = dp.DEFAULT_LOBE_SE_SIZE
    lobe_dilate_iterations: int = dp.DEFAULT_LOBE_ITERATIONS
    augment_enabled: bool = True
    rotate_max_deg: float = 10.0
    zoom_lo: float = 0.9
    zoom_hi: float = 1.1
    crop_fraction: float = 0.9
    aug_copies: int = 3
    post_threshold: float = 0.5
    post_pipeline: str = "open:3:1,close:3:1"
    keep_largest: int = 2

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "RunConfig":
        file_values = load_config_file(args.config) if getattr(args, "config", None) else {}
        kwargs = {}
        for attr, setting in _SETTINGS.items():
            flag_value = getattr(args, attr, None)
            kwargs[attr] = setting.resolve(flag_value, file_values)
        return cls(**kwargs)

    def augment_config(self) -> Optional[dp.AugmentConfig]:
        if not self.augment_enabled:
            return None
        return dp.AugmentConfig(
            rotate_max_deg=self.rotate_max_deg,
            zoom_range=(self.zoom_lo, self.zoom_hi),
            crop_fraction=self.crop_fraction,
            copies=self.aug_copies,
            seed=self.seed,
        )

    def post_config(self) -> morphology.PostprocessConfig:
        cfg = morphology.PostprocessConfig(
            threshold=self.post_threshold,
            pipeline=_parse_pipeline(self.post_pipeline),
            keep_largest=self.keep_largest,
        )
        cfg.validate()
        return cfg

    def train_config(self) -> training.TrainConfig:
        cfg = training.TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            loss_kind=self.loss,
            seed=self.seed,
        )
        cfg.validate()
        return cfg

    def resolve_scale(self, manifest: dp.DatasetManifest) -> tuple[int, int, int]:
        """(image side, depth, base channels); desk scale for synthetic-only
        manifests, radiograph scale otherwise, unless explicitly set."""
        synthetic_only = all(e.source == "synthetic" for e in manifest.entries)
        size = self.image_size if self.image_size is not None else (64 if synthetic_only else 512)
        depth = self.depth if self.depth is not None else (3 if synthetic_only else 4)
        base = self.base_channels if self.base_channels is not None else (16 if synthetic_only else 64)
        return size, depth, base


def _parse_pipeline(spec: str) -> tuple[morphology.PostprocessStep, ...]:
    """Parse 'open:3:1,close:3:1' (size and iterations optional per step)."""
    spec = spec.strip()
    if not spec or spec.lower() == "none":
        return ()
    steps = []
    for chunk in spec.split(","):
        parts = chunk.strip().split(":")
        if not parts[0]:
            raise UsageError(f"bad postprocess pipeline chunk {chunk!r}")
        op = parts[0]
        try:
            size = int(parts[1]) if len(parts) > 1 else 3
            iterations = int(parts[2]) if len(parts) > 2 else 1
        except ValueError as exc:
            raise UsageError(f"bad postprocess pipeline chunk {chunk!r}: {exc}") from exc
        steps.append(morphology.PostprocessStep(op, size, iterations))
    return tuple(steps)


# ---------------------------------------------------------------------------
# commands


def _load_split_samples(
    manifest: dp.DatasetManifest, split_name: str, cfg: RunConfig, size: int
) -> list[dp.Sample]:
    se = morphology.square(cfg.lobe_dilate_size)
    return [
        dp.load_sample(e, target=(size, size), lobe_se=se, lobe_iterations=cfg.lobe_dilate_iterations)
        for e in manifest.subset(split_name)
    ]


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = RunConfig.from_args(args)
    out = Path(args.out)
    manifest = dp.generate_synthetic(
        args.count, (args.size, args.size), cfg.seed, out, cfg.train_fraction
    )
    print(f"wrote {len(manifest.entries)} image/mask pairs and {out / 'manifest.tsv'}")
    return EXIT_OK


def _prepare_raw_layout(raw_dir: Path, out: Path, cfg: RunConfig) -> list[dp.ManifestEntry]:
    """Scan montgomery/{images,masks_left,masks_right} and
    shenzhen/{images,masks}; merge lobe masks into single files under out."""
    entries: list[dp.ManifestEntry] = []
    problems: list[str] = []
    mont = raw_dir / "montgomery"
    if (mont / "images").is_dir():
        merged_dir = out / "montgomery_masks"
        merged_dir.mkdir(parents=True, exist_ok=True)
        se = morphology.square(cfg.lobe_dilate_size)
        for image_path in sorted((mont / "images").glob("*.png")):
            stem = image_path.stem
            left = mont / "masks_left" / f"{stem}.png"
            right = mont / "masks_right" / f"{stem}.png"
            if not left.is_file() or not right.is_file():
                problems.append(stem)
                continue
            merged = dp.merge_lobes(
                dp.read_mask(left), dp.read_mask(right), se, cfg.lobe_dilate_iterations
            )
            merged_path = merged_dir / f"{stem}.png"
            dp.write_mask(merged_path, merged)
            entries.append(
                dp.ManifestEntry(
                    id=f"montgomery-{stem}",
                    source="montgomery",
                    split="train",
                    image_path=image_path,
                    mask_path=merged_path,
                )
            )
    shen = raw_dir / "shenzhen"
    if (shen / "images").is_dir():
        for image_path in sorted((shen / "images").glob("*.png")):
            stem = image_path.stem
            mask_path = shen / "masks" / f"{stem}.png"
            if not mask_path.is_file():
                problems.append(stem)
                continue
            entries.append(
                dp.ManifestEntry(
                    id=f"shenzhen-{stem}",
                    source="shenzhen",
                    split="train",
                    image_path=image_path,
                    mask_path=mask_path,
                )
            )
    if problems:
        raise DataError(
            f"{len(problems)} images are missing mask files: " + ", ".join(sorted(problems))
        )
    if not entries:
        raise DataError(
            f"no usable entries under {raw_dir}; expected montgomery/ or shenzhen/ subdirectories"
        )
    return entries


def cmd_prepare(args: argparse.Namespace) -> int:
    cfg = RunConfig.from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.raw_dir:
        entries = _prepare_raw_layout(Path(args.raw_dir), out, cfg)
        manifest = dp.DatasetManifest(entries=entries)
    else:
        manifest = dp.load_manifest(args.manifest)
    manifest = dp.split(manifest, cfg.train_fraction, cfg.seed)
    manifest_path = out / "manifest.tsv"
    dp.save_manifest(manifest, manifest_path)
    n_train = len(manifest.subset("train"))
    print(
        f"wrote {manifest_path}: {len(manifest.entries)} entries, "
        f"{n_train} train / {len(manifest.entries) - n_train} test"
    )
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = RunConfig.from_args(args)
    manifest = dp.load_manifest(args.manifest)
    size, depth, base = cfg.resolve_scale(manifest)
    train_samples = _load_split_samples(manifest, "train", cfg, size)
    val_samples = _load_split_samples(manifest, "test", cfg, size)
    if not train_samples:
        raise DataError("manifest has no train entries")
    model_cfg = unet.UNetConfig(
        depth=depth,
        base_channels=base,
        convs_per_block=cfg.convs_per_block,
        kernel_size=cfg.kernel_size,
        input_size=(size, size),
    )
    model_cfg.validate()
    params = unet.build(model_cfg, cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    post_cfg = cfg.post_config()
    best = {"dice": -1.0}

    def on_epoch(stats: training.EpochStats, p: unet.ModelParams) -> None:
        print(
            f"epoch {stats.epoch}/{cfg.epochs}: loss={stats.mean_loss:.6f} "
            f"val_dice_raw={stats.val_dice_raw:.6f} val_dice_post={stats.val_dice_post:.6f}",
            flush=True,
        )
        score = stats.val_dice_post
        if not np.isnan(score) and score > best["dice"]:
            best["dice"] = score
            unet.save(p, out / "model_best.segf")

    params, history = training.train(
        params,
        training.TrainData(train=train_samples, val=val_samples, augment=cfg.augment_config()),
        cfg.train_config(),
        post_config=post_cfg,
        callbacks=[on_epoch],
    )
    unet.save(params, out / "model_final.segf")
    training.write_history(out / "history.csv", history)
    if best["dice"] < 0:  # no validation split, fall back to the final model
        unet.save(params, out / "model_best.segf")
    print(f"wrote {out / 'model_final.segf'}, {out / 'model_best.segf'}, {out / 'history.csv'}")
    return EXIT_OK


def _overlay(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    edge = morphology.boundary(mask)
    out = image.copy()
    out[edge] = 1.0
    return out


def cmd_infer(args: argparse.Namespace) -> int:
    cfg = RunConfig.from_args(args)
    params = unet.load(args.model)
    side = params.config.input_size
    post_cfg = cfg.post_config()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failures = 0
    for image_arg in args.images:
        image_path = Path(image_arg)
        try:
            original = dp.read_image(image_path)
            net_in = dp.resize(original, side, "bilinear")
            prob = unet.forward(params, net_in[None, None, :, :]).data[0, 0]
            if args.no_postprocess:
                mask = morphology.binarize(prob, post_cfg.threshold)
            else:
                mask = morphology.postprocess(prob, post_cfg)
            mask_full = dp.resize(mask, original.shape, "nearest")
            stem = image_path.stem
            dp.write_mask(out / f"{stem}_mask.png", mask_full)
            if args.save_prob:
                dp.write_image(out / f"{stem}_prob.png", dp.resize(prob, original.shape, "bilinear"))
            if not args.no_overlay:
                dp.write_image(out / f"{stem}_overlay.png", _overlay(original, mask_full))
        except (DataError, OSError) as exc:
            failures += 1
            print(f"error: {image_path}: {exc}", file=sys.stderr)
    done = len(args.images) - failures
    print(f"inferred {done}/{len(args.images)} images into {out}")
    return EXIT_DATA if failures else EXIT_OK


def _format_report(raw: training.EvalReport, post: training.EvalReport) -> str:
    lines = ["id,dice_raw,iou_raw,dice_post,iou_post"]
    for r_raw, r_post in zip(raw.rows, post.rows):
        lines.append(
            f"{r_raw.id},{r_raw.dice:.6f},{r_raw.iou:.6f},{r_post.dice:.6f},{r_post.iou:.6f}"
        )
    lines.append(
        f"mean,{raw.mean_dice:.6f},{raw.mean_iou:.6f},{post.mean_dice:.6f},{post.mean_iou:.6f}"
    )
    return "\n".join(lines) + "\n"


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = RunConfig.from_args(args)
    params = unet.load(args.model)
    manifest = dp.load_manifest(args.manifest)
    size = params.config.input_size[0]
    samples = _load_split_samples(manifest, "test", cfg, size)
    if not samples:
        raise DataError("manifest has no test entries to evaluate")
    raw, post = training.evaluate(params, samples, cfg.post_config(), pooled=args.pooled)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "eval_report.csv"
    report_path.write_text(_format_report(raw, post), encoding="utf-8")
    agg = "pooled" if args.pooled else "per-image mean"
    print(f"evaluated {raw.count} test samples ({agg} aggregate)")
    print(f"  raw:           dice={raw.mean_dice:.4f} iou={raw.mean_iou:.4f}")
    print(f"  postprocessed: dice={post.mean_dice:.4f} iou={post.mean_iou:.4f}")
    print(f"wrote {report_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file of 'section.key = value' lines")
    p.add_argument("--seed", type=int, help="global seed (default 0)")


def _add_post_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--post-threshold", type=float, dest="post_threshold")
    p.add_argument(
        "--post-pipeline",
        dest="post_pipeline",
        help="comma list of op[:size[:iterations]] from open,close,dilate,erode; 'none' to disable",
    )
    p.add_argument("--keep-largest", type=int, dest="keep_largest")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="segforge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic desk-scale dataset")
    _add_common(p)
    p.add_argument("--count", type=int, default=40)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--train-fraction", type=float, dest="train_fraction")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="build a split manifest from raw data or an existing manifest")
    _add_common(p)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--raw-dir", help="directory with montgomery/ and/or shenzhen/ layouts")
    group.add_argument("--manifest", help="existing manifest to re-split")
    p.add_argument("--out", required=True)
    p.add_argument("--train-fraction", type=float, dest="train_fraction")
    p.add_argument("--lobe-dilate-size", type=int, dest="lobe_dilate_size")
    p.add_argument("--lobe-dilate-iterations", type=int, dest="lobe_dilate_iterations")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model from a manifest")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--loss", choices=training.LOSS_KINDS)
    p.add_argument("--depth", type=int)
    p.add_argument("--base-channels", type=int, dest="base_channels")
    p.add_argument("--convs-per-block", type=int, dest="convs_per_block")
    p.add_argument("--kernel-size", type=int, dest="kernel_size")
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--lobe-dilate-size", type=int, dest="lobe_dilate_size")
    p.add_argument("--lobe-dilate-iterations", type=int, dest="lobe_dilate_iterations")
    aug = p.add_mutually_exclusive_group()
    aug.add_argument("--augment", dest="augment_enabled", action="store_true", default=None)
    aug.add_argument("--no-augment", dest="augment_enabled", action="store_false", default=None)
    p.add_argument("--rotate-max-deg", type=float, dest="rotate_max_deg")
    p.add_argument("--zoom-lo", type=float, dest="zoom_lo")
    p.add_argument("--zoom-hi", type=float, dest="zoom_hi")
    p.add_argument("--crop-fraction", type=float, dest="crop_fraction")
    p.add_argument("--aug-copies", type=int, dest="aug_copies")
    _add_post_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment images with a trained model")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--save-prob", action="store_true")
    p.add_argument("--no-postprocess", action="store_true")
    p.add_argument("--no-overlay", action="store_true")
    _add_post_flags(p)
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a model on a manifest's test split")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pooled", action="store_true", help="pool pixels across samples for the aggregate")
    p.add_argument("--lobe-dilate-size", type=int, dest="lobe_dilate_size")
    p.add_argument("--lobe-dilate-iterations", type=int, dest="lobe_dilate_iterations")
    _add_post_flags(p)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"segforge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ModelFileError) as exc:
        print(f"segforge: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports anything else as runtime
        print(f"segforge: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
