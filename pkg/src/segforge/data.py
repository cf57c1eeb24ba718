"""Dataset manifests, image and mask I/O, augmentation, and synthetic data.

Images travel as 2-D float grids in [0, 1]; masks as 2-D boolean grids.
A manifest is UTF-8 text, one record per line:

    id<TAB>source<TAB>split<TAB>image_path<TAB>mask_path[<TAB>mask2_path]

Lines starting with ``#`` are ignored. Entries with two mask paths carry
separate left/right lung lobe annotations (the Montgomery convention) and
are merged on load: union of the lobes followed by dilation. Paths are
resolved relative to the manifest's own directory.

The synthetic generator writes lung-like image/mask pairs (two ellipses on
a noisy, striped background) for desk-scale experiments.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from segforge import morphology
from segforge.autodiff import ShapeError

__all__ = [
    "DataError",
    "ManifestError",
    "Sample",
    "ManifestEntry",
    "DatasetManifest",
    "AugmentConfig",
    "SOURCES",
    "read_image",
    "read_mask",
    "write_image",
    "write_mask",
    "resize",
    "merge_lobes",
    "augment",
    "load_manifest",
    "save_manifest",
    "split",
    "load_sample",
    "generate_synthetic",
    "DEFAULT_LOBE_SE_SIZE",
    "DEFAULT_LOBE_ITERATIONS",
]

logger = logging.getLogger(__name__)

SOURCES = ("montgomery", "shenzhen", "synthetic")
SPLITS = ("train", "test")

# default dilation applied after merging lung lobe masks
DEFAULT_LOBE_SE_SIZE = 5
DEFAULT_LOBE_ITERATIONS = 1


class DataError(Exception):
    """Dataset-level problem: unreadable files, malformed manifests, bad layout."""


class ManifestError(DataError):
    """A manifest failed to parse or validate."""


@dataclass
class Sample:
    """One image/mask pair in memory."""

    image: np.ndarray  # 2-D float in [0, 1]
    mask: np.ndarray  # 2-D bool, same shape
    id: str


@dataclass
class ManifestEntry:
    id: str
    source: str
    split: str
    image_path: Path
    mask_path: Optional[Path] = None
    lobe_paths: Optional[tuple[Path, Path]] = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]

    def subset(self, split_name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split_name]


# ---------------------------------------------------------------------------
# PNG I/O


def _read_gray(path, kind: str) -> np.ndarray:
    """Decode a PNG to a float grid scaled to [0, 1] by its sample depth."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except OSError as exc:
        raise DataError(f"cannot read {kind} {path}: {exc}") from exc
    if arr.dtype == np.uint8:
        arr = arr / 255.0
    elif arr.dtype == np.uint16 or arr.dtype == np.int32:  # PIL "I;16" / "I"
        arr = arr / 65535.0
    elif arr.dtype == bool:
        arr = arr.astype(np.float64)
    else:
        arr = np.clip(arr.astype(np.float64), 0.0, 1.0)
    if arr.ndim == 3:
        arr = arr[..., :3].mean(axis=2)
    return arr


def read_image(path) -> np.ndarray:
    """Read a PNG as a 2-D float grid in [0, 1]; RGB inputs are converted by
    averaging the color channels."""
    return _read_gray(path, "image")


def read_mask(path) -> np.ndarray:
    """Read a mask PNG (0 = background, full range = foreground) as booleans.

    Intermediate gray values are thresholded at half range (128 for 8-bit
    files) with a warning.
    """
    arr = _read_gray(path, "mask")
    stray = int(((arr > 0.0) & (arr < 1.0)).sum())
    if stray:
        logger.warning(
            "mask %s has %d values strictly between background and foreground; "
            "thresholding at half range",
            path,
            stray,
        )
    return arr >= 0.5


def write_image(path, image: np.ndarray) -> None:
    data = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(data * 255.0).astype(np.uint8), mode="L").save(path, format="PNG")


def write_mask(path, mask: np.ndarray) -> None:
    data = np.asarray(mask, dtype=bool).astype(np.uint8) * 255
    Image.fromarray(data, mode="L").save(path, format="PNG")


# ---------------------------------------------------------------------------
# geometry


def resize(grid: np.ndarray, target: tuple[int, int], mode: str) -> np.ndarray:
    """Resize a 2-D grid.

    ``bilinear`` (images) samples pixel centers with edge clamping;
    ``nearest`` (masks) maps output index i to floor(i * in / out), which
    keeps the result strictly two-valued for boolean inputs.
    """
    th, tw = target
    if th <= 0 or tw <= 0:
        raise ValueError(f"resize target must be positive, got {target}")
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ValueError(f"resize expects a 2-D grid, got shape {grid.shape}")
    h, w = grid.shape
    if (h, w) == (th, tw):
        return grid.copy()
    if mode == "nearest":
        ys = (np.arange(th) * h) // th
        xs = (np.arange(tw) * w) // tw
        return grid[np.ix_(ys, xs)]
    if mode != "bilinear":
        raise ValueError(f"mode must be 'bilinear' or 'nearest', got {mode!r}")
    sy = np.clip((np.arange(th) + 0.5) * h / th - 0.5, 0.0, h - 1.0)
    sx = np.clip((np.arange(tw) + 0.5) * w / tw - 0.5, 0.0, w - 1.0)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0)[:, None]
    fx = (sx - x0)[None, :]
    g = grid.astype(np.float64)
    top = g[np.ix_(y0, x0)] * (1 - fx) + g[np.ix_(y0, x1)] * fx
    bottom = g[np.ix_(y1, x0)] * (1 - fx) + g[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bottom * fy


def _rotate_zoom(grid: np.ndarray, angle_deg: float, scale: float) -> np.ndarray:
    """Rotate about the center and zoom, bilinear, zero outside the frame."""
    h, w = grid.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = ys - cy, xs - cx
    # inverse map of rotate-then-zoom
    sy = (cos_t * dy + sin_t * dx) / scale + cy
    sx = (-sin_t * dy + cos_t * dx) / scale + cx
    valid = (sy >= 0) & (sy <= h - 1) & (sx >= 0) & (sx <= w - 1)
    sy = np.clip(sy, 0.0, h - 1.0)
    sx = np.clip(sx, 0.0, w - 1.0)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = sy - y0
    fx = sx - x0
    g = grid.astype(np.float64)
    out = (
        g[y0, x0] * (1 - fy) * (1 - fx)
        + g[y0, x1] * (1 - fy) * fx
        + g[y1, x0] * fy * (1 - fx)
        + g[y1, x1] * fy * fx
    )
    out[~valid] = 0.0
    return out


# ---------------------------------------------------------------------------
# lobe merging and augmentation


def merge_lobes(
    left: np.ndarray,
    right: np.ndarray,
    se: Optional[np.ndarray] = None,
    iterations: int = DEFAULT_LOBE_ITERATIONS,
) -> np.ndarray:
    """Union of the two lobe masks followed by dilation (5x5 square default)."""
    left = np.asarray(left, dtype=bool)
    right = np.asarray(right, dtype=bool)
    if left.shape != right.shape:
        raise ShapeError(f"lobe masks differ in shape: {left.shape} vs {right.shape}")
    if se is None:
        se = morphology.square(DEFAULT_LOBE_SE_SIZE)
    return morphology.dilate(left | right, se, iterations)


@dataclass
class AugmentConfig:
    """Geometric augmentation: rotation, zoom, crop, applied identically to
    image and mask. Magnitudes are defaults, not dataset facts."""

    rotate_max_deg: float = 10.0
    zoom_range: tuple[float, float] = (0.9, 1.1)
    crop_fraction: float = 0.9
    rotate: bool = True
    zoom: bool = True
    crop: bool = True
    copies: int = 3
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.zoom_range
        if lo <= 0 or hi <= 0 or lo > hi:
            raise ValueError(f"zoom_range bounds must be positive and ordered, got {self.zoom_range}")
        if not 0.0 < self.crop_fraction <= 1.0:
            raise ValueError(f"crop_fraction must be in (0, 1], got {self.crop_fraction}")
        if self.rotate_max_deg < 0:
            raise ValueError(f"rotate_max_deg must be >= 0, got {self.rotate_max_deg}")
        if self.copies < 0:
            raise ValueError(f"copies must be >= 0, got {self.copies}")


def augment(sample: Sample, config: AugmentConfig, rng: np.random.Generator) -> Sample:
    """One augmented copy. The mask is transformed exactly like the image and
    re-binarized at 0.5, so mask(transform) == threshold(transform(mask))."""
    config.validate()
    image = sample.image
    mask = sample.mask
    angle = float(rng.uniform(-config.rotate_max_deg, config.rotate_max_deg)) if config.rotate else 0.0
    scale = float(rng.uniform(*config.zoom_range)) if config.zoom else 1.0
    if angle != 0.0 or scale != 1.0:
        image = _rotate_zoom(image, angle, scale)
        mask = _rotate_zoom(mask.astype(np.float64), angle, scale) >= 0.5
    else:
        image = image.copy()
        mask = mask.copy()
    if config.crop and config.crop_fraction < 1.0:
        h, w = image.shape
        ch = max(min(h, 8), int(round(h * config.crop_fraction)))
        cw = max(min(w, 8), int(round(w * config.crop_fraction)))
        oy = int(rng.integers(0, h - ch + 1))
        ox = int(rng.integers(0, w - cw + 1))
        image = image[oy : oy + ch, ox : ox + cw]
        mask = mask[oy : oy + ch, ox : ox + cw]
        if (ch, cw) != (h, w):
            image = resize(image, (h, w), "bilinear")
            mask = resize(mask, (h, w), "nearest")
    return Sample(image=image, mask=mask, id=sample.id)


# ---------------------------------------------------------------------------
# manifests


def load_manifest(path) -> DatasetManifest:
    """Parse and validate a manifest file.

    Raises :class:`ManifestError` with line numbers for parse problems,
    duplicate ids, and a list of ids whose referenced files are missing.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    base = path.parent
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (5, 6):
            raise ManifestError(
                f"{path}:{lineno}: expected 5 or 6 tab-separated fields, got {len(parts)}"
            )
        entry_id, source, split_name = parts[0], parts[1], parts[2]
        if not entry_id:
            raise ManifestError(f"{path}:{lineno}: empty id")
        if source not in SOURCES:
            raise ManifestError(
                f"{path}:{lineno}: unknown source {source!r} (expected one of {SOURCES})"
            )
        if split_name not in SPLITS:
            raise ManifestError(
                f"{path}:{lineno}: unknown split {split_name!r} (expected one of {SPLITS})"
            )
        if entry_id in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate id {entry_id!r}")
        seen.add(entry_id)
        if any(not p for p in parts[3:]):
            raise ManifestError(
                f"{path}:{lineno}: entry {entry_id!r} has an empty path field"
                + (" (lobe entries need both lobe paths)" if len(parts) == 6 else "")
            )
        image_path = base / parts[3]
        if len(parts) == 6:
            entry = ManifestEntry(
                id=entry_id,
                source=source,
                split=split_name,
                image_path=image_path,
                lobe_paths=(base / parts[4], base / parts[5]),
            )
        else:
            entry = ManifestEntry(
                id=entry_id,
                source=source,
                split=split_name,
                image_path=image_path,
                mask_path=base / parts[4],
            )
        entries.append(entry)
    missing: list[str] = []
    for e in entries:
        paths = [e.image_path] + (list(e.lobe_paths) if e.lobe_paths else [e.mask_path])
        if any(not p.is_file() for p in paths):
            missing.append(e.id)
    if missing:
        raise ManifestError(
            f"{path}: {len(missing)} entries reference missing files: " + ", ".join(missing)
        )
    return DatasetManifest(entries=entries)


def _relativize(p: Path, base: Path) -> str:
    try:
        return os.path.relpath(p, base)
    except ValueError:  # different drive on windows
        return str(p)


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    base = path.parent
    lines = []
    for e in manifest.entries:
        fields = [e.id, e.source, e.split, _relativize(e.image_path, base)]
        if e.lobe_paths is not None:
            fields += [_relativize(e.lobe_paths[0], base), _relativize(e.lobe_paths[1], base)]
        else:
            fields.append(_relativize(e.mask_path, base))
        lines.append("\t".join(fields))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def split(manifest: DatasetManifest, train_fraction: float = 0.8, seed: int = 0) -> DatasetManifest:
    """Assign train/test labels, stratified by source, reproducible from seed."""
    if not manifest.entries:
        raise ManifestError("cannot split an empty manifest")
    if not 0.0 < train_fraction <= 1.0:
        raise ValueError(f"train_fraction must be in (0, 1], got {train_fraction}")
    by_source: dict[str, list[int]] = {}
    for idx, e in enumerate(manifest.entries):
        by_source.setdefault(e.source, []).append(idx)
    assignments = ["test"] * len(manifest.entries)
    root = np.random.SeedSequence(seed)
    children = dict(zip(sorted(by_source), root.spawn(len(by_source))))
    for source, indices in by_source.items():
        rng = np.random.default_rng(children[source])
        order = rng.permutation(len(indices))
        n_train = int(round(train_fraction * len(indices)))
        for rank, pos in enumerate(order):
            assignments[indices[pos]] = "train" if rank < n_train else "test"
    entries = [replace(e, split=assignments[i]) for i, e in enumerate(manifest.entries)]
    return DatasetManifest(entries=entries)


def load_sample(
    entry: ManifestEntry,
    target: Optional[tuple[int, int]] = None,
    lobe_se: Optional[np.ndarray] = None,
    lobe_iterations: int = DEFAULT_LOBE_ITERATIONS,
) -> Sample:
    """Load one entry into memory, merging lobe masks when present and
    optionally resizing (bilinear image, nearest mask)."""
    image = read_image(entry.image_path)
    if entry.lobe_paths is not None:
        left = read_mask(entry.lobe_paths[0])
        right = read_mask(entry.lobe_paths[1])
        mask = merge_lobes(left, right, lobe_se, lobe_iterations)
    else:
        mask = read_mask(entry.mask_path)
    if image.shape != mask.shape:
        raise DataError(
            f"entry {entry.id!r}: image {image.shape} and mask {mask.shape} differ in size"
        )
    if target is not None and image.shape != tuple(target):
        image = resize(image, target, "bilinear")
        mask = resize(mask, target, "nearest")
    return Sample(image=image, mask=mask, id=entry.id)


# ---------------------------------------------------------------------------
# synthetic data


def _render_synthetic(size: tuple[int, int], rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    mask = np.zeros((h, w), dtype=bool)
    # two lung-like ellipses, confined to their halves so they never touch
    for lo, hi in ((0.22, 0.30), (0.70, 0.78)):
        cx = rng.uniform(lo, hi) * w
        cy = rng.uniform(0.45, 0.60) * h
        ax = rng.uniform(0.09, 0.14) * w
        ay = rng.uniform(0.22, 0.32) * h
        tilt = rng.uniform(-0.15, 0.15)
        dx, dy = xs - cx, ys - cy
        u = (dx * math.cos(tilt) + dy * math.sin(tilt)) / ax
        v = (-dx * math.sin(tilt) + dy * math.cos(tilt)) / ay
        mask |= u * u + v * v <= 1.0

    direction = rng.uniform(0.0, 2.0 * math.pi)
    strength = rng.uniform(0.10, 0.25)
    span = max(h, w)
    image = rng.uniform(0.50, 0.62) + strength * (
        (xs * math.cos(direction) + ys * math.sin(direction)) / span
    )
    # rib-like stripes cross the whole frame, lungs included
    freq = rng.uniform(4.0, 8.0)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    slope = rng.uniform(-0.2, 0.2)
    image += rng.uniform(0.05, 0.10) * np.sin(2.0 * math.pi * freq * (ys + slope * xs) / h + phase)
    image = np.where(mask, image - rng.uniform(0.28, 0.38), image)
    # dark distractor blobs in the background (gas bubbles, labels); they
    # look lung-like but stay out of the ground truth
    forbidden = morphology.dilate(mask, morphology.square(3), iterations=2)
    for _ in range(int(rng.integers(1, 4))):
        for _attempt in range(8):
            bx = rng.uniform(0.08, 0.92) * w
            by = rng.uniform(0.08, 0.92) * h
            bax = rng.uniform(0.04, 0.10) * w
            bay = rng.uniform(0.04, 0.10) * h
            blob = ((xs - bx) / bax) ** 2 + ((ys - by) / bay) ** 2 <= 1.0
            if not (blob & forbidden).any():
                image = np.where(blob, image - rng.uniform(0.15, 0.30), image)
                break
    image += rng.normal(0.0, 0.05, size=(h, w))
    return np.clip(image, 0.0, 1.0), mask


def generate_synthetic(
    count: int,
    size: tuple[int, int],
    seed: int,
    out_dir,
    train_fraction: float = 0.8,
) -> DatasetManifest:
    """Write ``count`` image/mask PNG pairs plus a manifest under ``out_dir``.

    Fully reproducible from the seed: the files and the manifest (including
    the train/test assignment) come out byte-identical on reruns.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out_dir}: {exc}") from exc
    root = np.random.SeedSequence(seed)
    children = root.spawn(count)
    entries: list[ManifestEntry] = []
    for i in range(count):
        rng = np.random.default_rng(children[i])
        image, mask = _render_synthetic(size, rng)
        image_path = out_dir / "images" / f"synth-{i:04d}.png"
        mask_path = out_dir / "masks" / f"synth-{i:04d}.png"
        try:
            write_image(image_path, image)
            write_mask(mask_path, mask)
        except OSError as exc:
            raise DataError(f"cannot write into {out_dir}: {exc}") from exc
        entries.append(
            ManifestEntry(
                id=f"synth-{i:04d}",
                source="synthetic",
                split="train",
                image_path=image_path,
                mask_path=mask_path,
            )
        )
    manifest = split(DatasetManifest(entries=entries), train_fraction, seed)
    save_manifest(manifest, out_dir / "manifest.tsv")
    return manifest
