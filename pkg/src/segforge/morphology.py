"""Binarization and binary mathematical morphology for mask postprocessing.

Masks are 2-D boolean arrays; structuring elements are small odd-sided
boolean arrays whose origin (the center cell) must be set. Everything
outside the image is treated as background for both dilation and erosion,
so dilation never bleeds past the frame and erosion shrinks regions that
touch it. Connected components use 8-connectivity.

All operations are pure functions on immutable inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

__all__ = [
    "square",
    "reflect",
    "binarize",
    "dilate",
    "erode",
    "opening",
    "closing",
    "connected_components",
    "keep_largest",
    "boundary",
    "PostprocessStep",
    "PostprocessConfig",
    "postprocess",
]

_EIGHT = np.ones((3, 3), dtype=bool)


def square(size: int = 3) -> np.ndarray:
    """All-true square structuring element with an odd side."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"structuring element side must be odd and >= 1, got {size}")
    return np.ones((size, size), dtype=bool)


def reflect(se: np.ndarray) -> np.ndarray:
    """Point reflection of a structuring element through its origin."""
    return se[::-1, ::-1].copy()


def _check_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    return mask.astype(bool, copy=False)


def _check_se(se: Optional[np.ndarray]) -> np.ndarray:
    if se is None:
        return square(3)
    se = np.asarray(se).astype(bool, copy=False)
    if se.ndim != 2 or se.shape[0] % 2 == 0 or se.shape[1] % 2 == 0:
        raise ValueError(f"structuring element must be odd-sided 2-D, got {se.shape}")
    if not se.any():
        raise ValueError("structuring element has no true cells")
    if not se[se.shape[0] // 2, se.shape[1] // 2]:
        raise ValueError("structuring element origin (center cell) must be true")
    return se


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Threshold a probability grid; a pixel is foreground iff prob >= threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    prob = np.asarray(prob)
    if prob.ndim != 2:
        raise ValueError(f"probability grid must be 2-D, got shape {prob.shape}")
    return prob >= threshold


def _dilate_once(mask: np.ndarray, se: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    ry, rx = se.shape[0] // 2, se.shape[1] // 2
    padded = np.pad(mask, ((ry, ry), (rx, rx)))
    out = np.zeros_like(mask)
    for u, v in zip(*np.nonzero(se)):
        dy, dx = u - ry, v - rx
        # out[x] |= mask[x - (dy, dx)]
        out |= padded[ry - dy : ry - dy + h, rx - dx : rx - dx + w]
    return out


def _erode_once(mask: np.ndarray, se: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    ry, rx = se.shape[0] // 2, se.shape[1] // 2
    padded = np.pad(mask, ((ry, ry), (rx, rx)))
    out = np.ones_like(mask)
    for u, v in zip(*np.nonzero(se)):
        dy, dx = u - ry, v - rx
        out &= padded[ry + dy : ry + dy + h, rx + dx : rx + dx + w]
    return out


def dilate(mask: np.ndarray, se: Optional[np.ndarray] = None, iterations: int = 1) -> np.ndarray:
    """Minkowski dilation, repeated ``iterations`` times."""
    mask = _check_mask(mask)
    se = _check_se(se)
    out = mask.copy()
    for _ in range(iterations):
        out = _dilate_once(out, se)
    return out


def erode(mask: np.ndarray, se: Optional[np.ndarray] = None, iterations: int = 1) -> np.ndarray:
    """Minkowski erosion, repeated ``iterations`` times."""
    mask = _check_mask(mask)
    se = _check_se(se)
    out = mask.copy()
    for _ in range(iterations):
        out = _erode_once(out, se)
    return out


def opening(mask: np.ndarray, se: Optional[np.ndarray] = None, iterations: int = 1) -> np.ndarray:
    """Erosion followed by dilation; removes specks smaller than the element."""
    out = _check_mask(mask).copy()
    se = _check_se(se)
    for _ in range(iterations):
        out = _dilate_once(_erode_once(out, se), se)
    return out


def closing(mask: np.ndarray, se: Optional[np.ndarray] = None, iterations: int = 1) -> np.ndarray:
    """Dilation followed by erosion; fills holes smaller than the element."""
    out = _check_mask(mask).copy()
    se = _check_se(se)
    for _ in range(iterations):
        out = _erode_once(_dilate_once(out, se), se)
    return out


def connected_components(mask: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """8-connected labeling.

    Labels run from 1 in decreasing component size; ties break on the
    smaller first pixel in row-major order. Returns the labeled grid and
    the ordered size list.
    """
    mask = _check_mask(mask)
    labels, count = ndimage.label(mask, structure=_EIGHT)
    if count == 0:
        return labels.astype(np.int32), []
    flat = labels.ravel()
    sizes = np.bincount(flat, minlength=count + 1)[1:]
    values, first = np.unique(flat, return_index=True)
    first_index = dict(zip(values.tolist(), first.tolist()))
    order = sorted(range(1, count + 1), key=lambda lab: (-sizes[lab - 1], first_index[lab]))
    lut = np.zeros(count + 1, dtype=np.int32)
    for rank, lab in enumerate(order, start=1):
        lut[lab] = rank
    return lut[labels], [int(sizes[lab - 1]) for lab in order]


def keep_largest(mask: np.ndarray, k: int) -> np.ndarray:
    """Keep only the k largest components; fewer than k leaves the mask as is."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    mask = _check_mask(mask)
    labels, sizes = connected_components(mask)
    if len(sizes) <= k:
        return mask.copy()
    return (labels >= 1) & (labels <= k)


def boundary(mask: np.ndarray, se: Optional[np.ndarray] = None) -> np.ndarray:
    """Inner morphological gradient: pixels of the mask not in its erosion."""
    mask = _check_mask(mask)
    return mask & ~erode(mask, se)


@dataclass(frozen=True)
class PostprocessStep:
    op: str  # open | close | dilate | erode
    size: int = 3
    iterations: int = 1


_STEP_OPS = {
    "open": opening,
    "close": closing,
    "dilate": dilate,
    "erode": erode,
}


@dataclass(frozen=True)
class PostprocessConfig:
    threshold: float = 0.5
    pipeline: tuple[PostprocessStep, ...] = (
        PostprocessStep("open"),
        PostprocessStep("close"),
    )
    keep_largest: int = 2

    def validate(self) -> None:
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if not self.pipeline and self.keep_largest <= 0:
            raise ValueError("postprocess config is a no-op: empty pipeline and keep_largest <= 0")
        for step in self.pipeline:
            if step.op not in _STEP_OPS:
                raise ValueError(f"unknown morphology op {step.op!r}")
            if step.iterations < 1:
                raise ValueError(f"step iterations must be >= 1, got {step.iterations}")
            square(step.size)  # validates the side


def postprocess(prob: np.ndarray, config: Optional[PostprocessConfig] = None) -> np.ndarray:
    """Binarize, run the configured morphology pipeline, keep the largest blobs."""
    if config is None:
        config = PostprocessConfig()
    config.validate()
    mask = binarize(prob, config.threshold)
    for step in config.pipeline:
        mask = _STEP_OPS[step.op](mask, square(step.size), step.iterations)
    if config.keep_largest > 0:
        mask = keep_largest(mask, config.keep_largest)
    return mask
