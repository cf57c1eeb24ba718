"""U-Net construction, forward pass, and model-file serialization.

The network follows the classic encoder/decoder layout: each encoder level
applies a fixed number of same-padded convolutions and halves the spatial
size with 2x2 max pooling; the decoder mirrors it with nearest-neighbor 2x
upsampling followed by a channel-halving convolution, concatenation with the
matching encoder feature map, and the same convolution block. A final 1x1
convolution plus sigmoid yields a per-pixel foreground probability.

Same-padding everywhere keeps encoder and decoder feature maps aligned, so
skip concatenation never needs cropping.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator, Union

import numpy as np

from segforge.autodiff import (
    ShapeError,
    Tensor,
    concat_channels,
    conv2d,
    maxpool2x2,
    relu,
    sigmoid,
    upsample_nearest2x,
)

__all__ = [
    "ConfigError",
    "ModelFileError",
    "UNetConfig",
    "ModelParams",
    "build",
    "forward",
    "save",
    "load",
    "MODEL_MAGIC",
    "MODEL_VERSION",
]

MODEL_MAGIC = b"SEGF"
MODEL_VERSION = 1


class ConfigError(ValueError):
    """A configuration value violates its documented constraint."""


class ModelFileError(RuntimeError):
    """A model file is missing, truncated, corrupt, or incompatible."""


@dataclass(frozen=True)
class UNetConfig:
    """Architecture hyperparameters.

    ``depth`` is the number of pooling stages; channels double per level
    starting from ``base_channels``. ``input_size`` must be divisible by
    ``2**depth`` so pooling and upsampling round-trip exactly.
    """

    depth: int = 3
    base_channels: int = 16
    convs_per_block: int = 2
    kernel_size: int = 3
    in_channels: int = 1
    out_channels: int = 1
    input_size: tuple[int, int] = (64, 64)

    def validate(self) -> None:
        problems = []
        if self.depth < 1:
            problems.append(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            problems.append(f"base_channels must be >= 1, got {self.base_channels}")
        if self.convs_per_block < 1:
            problems.append(f"convs_per_block must be >= 1, got {self.convs_per_block}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            problems.append(f"kernel_size must be odd and >= 1, got {self.kernel_size}")
        if self.in_channels < 1 or self.out_channels < 1:
            problems.append("in_channels and out_channels must be >= 1")
        h, w = self.input_size
        if h < 1 or w < 1:
            problems.append(f"input_size must be positive, got {self.input_size}")
        elif self.depth >= 1 and (h % (1 << self.depth) or w % (1 << self.depth)):
            problems.append(
                f"input_size {self.input_size} not divisible by 2**depth = {1 << self.depth}"
            )
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass
class ModelParams:
    """Named kernels and biases, ordered, plus the config they came from.

    Weight tensors are (out, in, kh, kw); biases are (1, out, 1, 1). Names
    are stable across save/load and fully determined by the config.
    """

    config: UNetConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        for name, t in self.tensors.items():
            yield name, t.data


def _conv_specs(config: UNetConfig) -> Iterator[tuple[str, int, int, int]]:
    """Yield (layer name, in_channels, out_channels, kernel side) for every
    conv layer in forward order."""
    c = config
    ci = c.in_channels
    for i in range(c.depth):
        co = c.base_channels << i
        for j in range(c.convs_per_block):
            yield f"enc{i}_conv{j}", ci, co, c.kernel_size
            ci = co
    co = c.base_channels << c.depth
    for j in range(c.convs_per_block):
        yield f"bot_conv{j}", ci, co, c.kernel_size
        ci = co
    for i in reversed(range(c.depth)):
        co = c.base_channels << i
        yield f"dec{i}_up", ci, co, c.kernel_size
        ci = co * 2  # skip concat doubles the channels entering the block
        for j in range(c.convs_per_block):
            yield f"dec{i}_conv{j}", ci, co, c.kernel_size
            ci = co
    yield "out", ci, c.out_channels, 1


def build(config: UNetConfig, seed: int) -> ModelParams:
    """Initialize parameters: He-scaled kernels (std = sqrt(2 / fan_in)),
    zero biases, reproducible from the seed."""
    config.validate()
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, ci, co, k in _conv_specs(config):
        fan_in = ci * k * k
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(co, ci, k, k))
        tensors[f"{name}_w"] = Tensor(w, requires_grad=True)
        tensors[f"{name}_b"] = Tensor(np.zeros((1, co, 1, 1)), requires_grad=True)
    return ModelParams(config=config, tensors=tensors)


def forward(params: ModelParams, x: Union[Tensor, np.ndarray]) -> Tensor:
    """Run the network; output has the input's spatial size, values in (0,1)."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    cfg = params.config
    n, c, h, w = x.shape
    if c != cfg.in_channels:
        raise ShapeError(f"expected {cfg.in_channels} input channels, got {c}")
    div = 1 << cfg.depth
    if h % div or w % div:
        raise ShapeError(
            f"input {h}x{w} not divisible by 2**depth = {div}; resize or pad first"
        )
    p = params.tensors

    def block(t: Tensor, prefix: str) -> Tensor:
        for j in range(cfg.convs_per_block):
            t = relu(conv2d(t, p[f"{prefix}_conv{j}_w"], p[f"{prefix}_conv{j}_b"]))
        return t

    skips: list[Tensor] = []
    t = x
    for i in range(cfg.depth):
        t = block(t, f"enc{i}")
        skips.append(t)
        t = maxpool2x2(t)
    t = block(t, "bot")
    for i in reversed(range(cfg.depth)):
        t = upsample_nearest2x(t)
        t = relu(conv2d(t, p[f"dec{i}_up_w"], p[f"dec{i}_up_b"]))
        skip = skips[i]
        sn, _, sh, sw = skip.shape
        tn, _, th, tw = t.shape
        if (sn, sh, sw) != (tn, th, tw):
            raise ShapeError(
                f"skip connection at level {i} misaligned: encoder {skip.shape} "
                f"vs upsampled {t.shape}"
            )
        t = concat_channels(skip, t)
        t = block(t, f"dec{i}")
    t = conv2d(t, p["out_w"], p["out_b"])
    return sigmoid(t)


# ---------------------------------------------------------------------------
# model file format: magic "SEGF", u32 version, 8 x u32 config fields,
# u32 parameter count, then per parameter: u32 name length, utf-8 name,
# u32 rank, u32 dims, raw little-endian float64 values.


def save(params: ModelParams, path) -> None:
    cfg = params.config
    chunks = [MODEL_MAGIC, struct.pack("<I", MODEL_VERSION)]
    chunks.append(
        struct.pack(
            "<8I",
            cfg.depth,
            cfg.base_channels,
            cfg.convs_per_block,
            cfg.kernel_size,
            cfg.in_channels,
            cfg.out_channels,
            cfg.input_size[0],
            cfg.input_size[1],
        )
    )
    chunks.append(struct.pack("<I", len(params.tensors)))
    for name, arr in params.named_arrays():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.blob):
            raise ModelFileError(f"{self.path}: truncated model file")
        out = self.blob[self.pos : self.pos + count]
        self.pos += count
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load(path) -> ModelParams:
    """Load a model file written by :func:`save`; values round-trip bit-exactly."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise ModelFileError(f"{path}: cannot read model file: {exc}") from exc
    r = _Reader(blob, path)
    if r.take(4) != MODEL_MAGIC:
        raise ModelFileError(f"{path}: not a segforge model file (bad magic)")
    version = r.u32()
    if version != MODEL_VERSION:
        raise ModelFileError(
            f"{path}: unsupported model version {version} (expected {MODEL_VERSION})"
        )
    fields = struct.unpack("<8I", r.take(32))
    config = UNetConfig(
        depth=fields[0],
        base_channels=fields[1],
        convs_per_block=fields[2],
        kernel_size=fields[3],
        in_channels=fields[4],
        out_channels=fields[5],
        input_size=(fields[6], fields[7]),
    )
    try:
        config.validate()
    except ConfigError as exc:
        raise ModelFileError(f"{path}: invalid embedded config: {exc}") from exc
    count = r.u32()
    tensors: dict[str, Tensor] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        elements = int(np.prod(shape)) if rank else 1
        raw = r.take(8 * elements)
        arr = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        tensors[name] = Tensor(arr, requires_grad=True)
    if r.pos != len(blob):
        raise ModelFileError(f"{path}: trailing bytes after parameter records")

    expected = {}
    for name, ci, co, k in _conv_specs(config):
        expected[f"{name}_w"] = (co, ci, k, k)
        expected[f"{name}_b"] = (1, co, 1, 1)
    got = {name: t.data.shape for name, t in tensors.items()}
    if got != expected:
        raise ModelFileError(
            f"{path}: parameter records do not match the embedded config"
        )
    # preserve the structural order the config dictates
    ordered = {name: tensors[name] for name in expected}
    return ModelParams(config=config, tensors=ordered)
