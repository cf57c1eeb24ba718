"""Losses, dice/IoU metrics, the Adam optimizer, and the training loop.

The reported metric is the dice coefficient on binary masks; training uses a
differentiable soft-dice surrogate, binary cross-entropy, or their sum
(the default). Evaluation is computed twice per sample, on the raw binarized
network output and again after morphological postprocessing, and reported
separately.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from segforge import morphology
from segforge.autodiff import ShapeError, Tape, Tensor, add, record_op
from segforge.data import AugmentConfig, Sample, augment
from segforge.unet import ModelParams, forward

__all__ = [
    "TrainConfig",
    "AdamState",
    "TrainData",
    "EpochStats",
    "EvalRow",
    "EvalReport",
    "dice_binary",
    "iou_binary",
    "soft_dice_loss",
    "bce_loss",
    "training_loss",
    "init_adam",
    "adam_step",
    "train",
    "evaluate",
    "history_header",
    "format_history_line",
    "write_history",
]

LOSS_KINDS = ("bce", "soft_dice", "bce_plus_dice")

# clamp bounds for probabilities entering the log in BCE
_BCE_EPS = 1e-7


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 2
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    loss_kind: str = "bce_plus_dice"
    seed: int = 0

    def validate(self) -> None:
        problems = []
        if self.epochs < 1:
            problems.append(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            problems.append(f"learning_rate must be > 0, got {self.learning_rate}")
        for name, beta in (("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)):
            if not 0 <= beta < 1:
                problems.append(f"{name} must be in [0, 1), got {beta}")
        if self.loss_kind not in LOSS_KINDS:
            problems.append(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if problems:
            from segforge.unet import ConfigError

            raise ConfigError("; ".join(problems))


# ---------------------------------------------------------------------------
# metrics on binary masks


def _check_mask_pair(pred: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    return pred, truth


def dice_binary(pred: np.ndarray, truth: np.ndarray) -> float:
    """2|A∩B| / (|A|+|B|); 1.0 when both masks are empty."""
    pred, truth = _check_mask_pair(pred, truth)
    total = int(pred.sum()) + int(truth.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((pred & truth).sum()) / total


def iou_binary(pred: np.ndarray, truth: np.ndarray) -> float:
    """|A∩B| / |A∪B|; 1.0 when both masks are empty."""
    pred, truth = _check_mask_pair(pred, truth)
    union = int((pred | truth).sum())
    if union == 0:
        return 1.0
    return int((pred & truth).sum()) / union


# ---------------------------------------------------------------------------
# differentiable losses (fused tape ops)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def soft_dice_loss(prob: Tensor, truth, smooth: float = 1.0) -> Tensor:
    """1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps), averaged over the batch."""
    truth = _as_tensor(truth)
    if prob.shape != truth.shape:
        raise ShapeError(f"soft_dice_loss: shapes differ, {prob.shape} vs {truth.shape}")
    p, t = prob.data, truth.data
    n = p.shape[0]
    inter = (p * t).sum(axis=(1, 2, 3))
    denom = p.sum(axis=(1, 2, 3)) + t.sum(axis=(1, 2, 3)) + smooth
    dice = (2.0 * inter + smooth) / denom
    out = np.asarray(1.0 - dice.mean(), dtype=p.dtype).reshape(1, 1, 1, 1)

    def backward(g: np.ndarray):
        # d dice_i / dp = (2*t*denom - (2*inter + smooth)) / denom^2, per sample
        num = 2.0 * t * denom.reshape(-1, 1, 1, 1) - (2.0 * inter + smooth).reshape(
            -1, 1, 1, 1
        )
        gp = -g * num / (denom**2).reshape(-1, 1, 1, 1) / n
        return (gp, None)

    return record_op("soft_dice_loss", (prob, truth), out, backward)


def bce_loss(prob: Tensor, truth) -> Tensor:
    """Mean binary cross-entropy; probabilities are clamped away from {0,1}."""
    truth = _as_tensor(truth)
    if prob.shape != truth.shape:
        raise ShapeError(f"bce_loss: shapes differ, {prob.shape} vs {truth.shape}")
    p, t = prob.data, truth.data
    clamped = np.clip(p, _BCE_EPS, 1.0 - _BCE_EPS)
    size = p.size
    out = np.asarray(
        -(t * np.log(clamped) + (1.0 - t) * np.log1p(-clamped)).mean(), dtype=p.dtype
    ).reshape(1, 1, 1, 1)

    def backward(g: np.ndarray):
        inside = (p > _BCE_EPS) & (p < 1.0 - _BCE_EPS)
        gp = g * inside * (-t / clamped + (1.0 - t) / (1.0 - clamped)) / size
        return (gp, None)

    return record_op("bce_loss", (prob, truth), out, backward)


def training_loss(prob: Tensor, truth, kind: str) -> Tensor:
    if kind == "bce":
        return bce_loss(prob, truth)
    if kind == "soft_dice":
        return soft_dice_loss(prob, truth)
    if kind == "bce_plus_dice":
        return add(bce_loss(prob, truth), soft_dice_loss(prob, truth))
    raise ValueError(f"unknown loss kind {kind!r}")


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def init_adam(params: ModelParams) -> AdamState:
    return AdamState(
        m={name: np.zeros_like(arr) for name, arr in params.named_arrays()},
        v={name: np.zeros_like(arr) for name, arr in params.named_arrays()},
    )


def adam_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update, in place; returns (params, state)."""
    b1, b2, eps, lr = (
        config.adam_beta1,
        config.adam_beta2,
        config.adam_eps,
        config.learning_rate,
    )
    state.t += 1
    t = state.t
    for name, tensor in params.tensors.items():
        g = grads[name]
        if g.shape != tensor.data.shape:
            raise ShapeError(
                f"adam_step: gradient for {name} has shape {g.shape}, "
                f"parameter has {tensor.data.shape}"
            )
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        tensor.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainData:
    """Samples for the loop; all images must share one spatial size already."""

    train: list[Sample]
    val: list[Sample] = field(default_factory=list)
    augment: Optional[AugmentConfig] = None


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    val_dice_raw: float
    val_dice_post: float


def history_header() -> str:
    return "epoch,mean_loss,val_dice_raw,val_dice_post"


def format_history_line(s: EpochStats) -> str:
    return f"{s.epoch},{s.mean_loss:.6f},{s.val_dice_raw:.6f},{s.val_dice_post:.6f}"


def write_history(path, history: Sequence[EpochStats]) -> None:
    lines = [history_header()] + [format_history_line(s) for s in history]
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def _batch_arrays(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([s.image for s in samples])[:, None, :, :]
    t = np.stack([s.mask for s in samples]).astype(np.float64)[:, None, :, :]
    return x, t


def _mean_val_dice(
    params: ModelParams,
    val: Sequence[Sample],
    post_config: morphology.PostprocessConfig,
) -> tuple[float, float]:
    if not val:
        return float("nan"), float("nan")
    raw_scores, post_scores = [], []
    for s in val:
        prob = forward(params, s.image[None, None, :, :]).data[0, 0]
        raw = morphology.binarize(prob, post_config.threshold)
        post = morphology.postprocess(prob, post_config)
        raw_scores.append(dice_binary(raw, s.mask))
        post_scores.append(dice_binary(post, s.mask))
    return float(np.mean(raw_scores)), float(np.mean(post_scores))


def train(
    params: ModelParams,
    data: TrainData,
    config: TrainConfig,
    post_config: Optional[morphology.PostprocessConfig] = None,
    callbacks: Optional[Sequence[Callable[[EpochStats, ModelParams], None]]] = None,
) -> tuple[ModelParams, list[EpochStats]]:
    """Run the full training loop; deterministic given config.seed.

    Each epoch shuffles the training items (originals plus, when augmentation
    is configured, freshly drawn augmented copies), steps Adam per batch, and
    records mean loss plus validation dice before and after postprocessing.
    """
    config.validate()
    if not data.train:
        raise ValueError("training split is empty")
    if post_config is None:
        post_config = morphology.PostprocessConfig()
    state = init_adam(params)
    history: list[EpochStats] = []
    root = np.random.SeedSequence(config.seed)
    epoch_seeds = root.spawn(config.epochs)
    copies = data.augment.copies if data.augment is not None else 0

    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng(epoch_seeds[epoch - 1])
        items = [(idx, False) for idx in range(len(data.train))]
        items += [(idx, True) for idx in range(len(data.train)) for _ in range(copies)]
        order = rng.permutation(len(items))
        resolved: list[Sample] = []
        for pos in order:
            idx, augmented = items[pos]
            sample = data.train[idx]
            if augmented:
                sample = augment(sample, data.augment, rng)
            resolved.append(sample)

        losses = []
        for start in range(0, len(resolved), config.batch_size):
            batch = resolved[start : start + config.batch_size]
            x, t = _batch_arrays(batch)
            with Tape() as tape:
                prob = forward(params, Tensor(x))
                loss = training_loss(prob, t, config.loss_kind)
            grad_map = tape.backward(loss)
            grads = {
                name: grad_map[tensor] for name, tensor in params.tensors.items()
            }
            adam_step(params, grads, state, config)
            losses.append(loss.item())

        raw, post = _mean_val_dice(params, data.val, post_config)
        stats = EpochStats(epoch, float(np.mean(losses)), raw, post)
        history.append(stats)
        for cb in callbacks or ():
            cb(stats, params)
    return params, history


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalRow:
    id: str
    dice: float
    iou: float


@dataclass
class EvalReport:
    """Per-sample and aggregate dice/IoU for one evaluation stage."""

    stage: str  # "raw" or "postprocessed"
    rows: list[EvalRow]
    mean_dice: float
    mean_iou: float
    count: int


def _aggregate(stage: str, rows: list[EvalRow], pooled: Optional[tuple[int, int, int]]) -> EvalReport:
    if pooled is not None:
        inter, pred_total, truth_total = pooled
        union = pred_total + truth_total - inter
        mean_dice = 1.0 if pred_total + truth_total == 0 else 2.0 * inter / (pred_total + truth_total)
        mean_iou = 1.0 if union == 0 else inter / union
    elif rows:
        mean_dice = float(np.mean([r.dice for r in rows]))
        mean_iou = float(np.mean([r.iou for r in rows]))
    else:
        mean_dice = mean_iou = float("nan")
    return EvalReport(stage, rows, mean_dice, mean_iou, len(rows))


def evaluate(
    params: ModelParams,
    samples: Sequence[Sample],
    post_config: Optional[morphology.PostprocessConfig] = None,
    pooled: bool = False,
) -> tuple[EvalReport, EvalReport]:
    """Score samples before and after postprocessing.

    By default the aggregate is the per-image mean; with ``pooled`` the
    aggregate dice/IoU are computed over pixel counts pooled across all
    samples (per-sample rows stay per-image either way).
    """
    if post_config is None:
        post_config = morphology.PostprocessConfig()
    raw_rows: list[EvalRow] = []
    post_rows: list[EvalRow] = []
    raw_pool = [0, 0, 0]
    post_pool = [0, 0, 0]
    for s in samples:
        prob = forward(params, s.image[None, None, :, :]).data[0, 0]
        raw = morphology.binarize(prob, post_config.threshold)
        post = morphology.postprocess(prob, post_config)
        raw_rows.append(EvalRow(s.id, dice_binary(raw, s.mask), iou_binary(raw, s.mask)))
        post_rows.append(EvalRow(s.id, dice_binary(post, s.mask), iou_binary(post, s.mask)))
        for pool, mask in ((raw_pool, raw), (post_pool, post)):
            pool[0] += int((mask & s.mask).sum())
            pool[1] += int(mask.sum())
            pool[2] += int(s.mask.sum())
    return (
        _aggregate("raw", raw_rows, tuple(raw_pool) if pooled else None),
        _aggregate("postprocessed", post_rows, tuple(post_pool) if pooled else None),
    )
