"""Gated convolutional classifier.

Every conv block is ``conv -> relu -> gate`` (or ``conv -> gate -> relu``):
one trainable scalar gate per output channel stands in for the whole filter,
so pruning filter ``m`` means pinning its gate to zero.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, FormatError, PruneError, ShapeError, TruncationError, VersionError
from .tensor import Tensor

GATE_PLACEMENTS = ("post_relu", "pre_relu")


class FilterId(NamedTuple):
    layer_index: int
    channel_index: int


@dataclass(frozen=True)
class ArchConfig:
    channels: tuple[int, ...] = (16, 32, 32)
    kernel_sizes: tuple[int, ...] = (3, 3, 3)
    in_channels: int = 3
    image_size: tuple[int, int] = (16, 16)
    n_classes: int = 4
    gate_placement: str = "post_relu"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))
        self.validate()

    def validate(self) -> None:
        if len(self.channels) < 1:
            raise ConfigError("architecture needs at least one conv block")
        if len(self.kernel_sizes) != len(self.channels):
            raise ConfigError(
                f"{len(self.channels)} channel counts but {len(self.kernel_sizes)} kernel sizes")
        if any(c < 2 for c in self.channels):
            raise ConfigError(f"every conv block needs at least 2 channels, got {self.channels}")
        if self.n_classes < 2 or self.in_channels < 1:
            raise ConfigError("need n_classes >= 2 and in_channels >= 1")
        if self.gate_placement not in GATE_PLACEMENTS:
            raise ConfigError(f"gate_placement must be one of {GATE_PLACEMENTS}")
        h, w = self.image_size
        for k in self.kernel_sizes:
            if k < 1:
                raise ConfigError(f"kernel size must be positive, got {k}")
            h, w = h - k + 1, w - k + 1
        if h < 1 or w < 1:
            raise ConfigError(f"kernels {self.kernel_sizes} do not fit image size {self.image_size}")

    @property
    def total_filters(self) -> int:
        return sum(self.channels)


class GateVector:
    """Per-channel gates of one conv block plus the pruned mask."""

    def __init__(self, n: int):
        self.tensor = Tensor(np.ones(n), requires_grad=True)
        self.pruned_mask = np.zeros(n, dtype=bool)

    @property
    def values(self) -> np.ndarray:
        return self.tensor.data

    def __len__(self) -> int:
        return self.pruned_mask.size

    @property
    def remaining(self) -> int:
        return int((~self.pruned_mask).sum())


@dataclass
class ConvBlock:
    kernel: Tensor
    bias: Tensor
    gates: GateVector

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]


@dataclass
class Parameter:
    """A trainable tensor; ``mask`` marks the entries an optimizer may change."""

    name: str
    tensor: Tensor
    mask: np.ndarray | None = None

    @property
    def n_trainable(self) -> int:
        return int(self.tensor.data.size if self.mask is None else self.mask.sum())


@dataclass
class GatedModel:
    arch: ArchConfig
    blocks: list[ConvBlock]
    head_weight: Tensor
    head_bias: Tensor
    use_gates: bool = field(default=True)

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return tuple(b.out_channels for b in self.blocks)

    @property
    def total_filters(self) -> int:
        return sum(len(b.gates) for b in self.blocks)

    @property
    def remaining_filters(self) -> int:
        return sum(b.gates.remaining for b in self.blocks)

    @property
    def remaining_ratio(self) -> float:
        return self.remaining_filters / self.total_filters

    def filter_ids(self, include_pruned: bool = False) -> Iterator[FilterId]:
        for li, block in enumerate(self.blocks):
            for ci in range(len(block.gates)):
                if include_pruned or not block.gates.pruned_mask[ci]:
                    yield FilterId(li, ci)

    def is_pruned(self, fid: FilterId) -> bool:
        self._check_id(fid)
        return bool(self.blocks[fid.layer_index].gates.pruned_mask[fid.channel_index])

    def gate_value(self, fid: FilterId) -> float:
        self._check_id(fid)
        return float(self.blocks[fid.layer_index].gates.values[fid.channel_index])

    def _check_id(self, fid: FilterId) -> None:
        li, ci = fid
        if not (0 <= li < len(self.blocks)) or not (0 <= ci < len(self.blocks[li].gates)):
            raise PruneError(f"filter {tuple(fid)} out of range for layer sizes {self.layer_sizes}")

    def gate_tensors(self) -> list[Tensor]:
        return [b.gates.tensor for b in self.blocks]

    def all_tensors(self) -> list[Tensor]:
        """Every parameter tensor in declaration order (checkpoint order)."""
        out = []
        for b in self.blocks:
            out += [b.kernel, b.bias, b.gates.tensor]
        return out + [self.head_weight, self.head_bias]

    def copy(self) -> "GatedModel":
        blocks = []
        for b in self.blocks:
            g = GateVector(len(b.gates))
            g.tensor.data = b.gates.values.copy()
            g.pruned_mask = b.gates.pruned_mask.copy()
            blocks.append(ConvBlock(Tensor(b.kernel.data.copy(), requires_grad=True),
                                    Tensor(b.bias.data.copy(), requires_grad=True), g))
        return GatedModel(self.arch, blocks,
                          Tensor(self.head_weight.data.copy(), requires_grad=True),
                          Tensor(self.head_bias.data.copy(), requires_grad=True), self.use_gates)

    def parameter_bytes(self) -> bytes:
        buf = io.BytesIO()
        for t in self.all_tensors():
            buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        for b in self.blocks:
            buf.write(np.packbits(b.gates.pruned_mask).tobytes())
        return buf.getvalue()

    def load_state(self, other: "GatedModel") -> None:
        """Overwrite parameters and masks in place with ``other``'s."""
        for dst, src in zip(self.all_tensors(), other.all_tensors()):
            dst.data = src.data.copy()
        for dst, src in zip(self.blocks, other.blocks):
            dst.gates.pruned_mask = src.gates.pruned_mask.copy()

    def __call__(self, images) -> Tensor:
        return forward(self, images)


def build_model(arch: ArchConfig | None = None, seed: int = 0) -> GatedModel:
    """Kaiming-uniform (fan-in) kernels, zero biases, unit gates."""
    arch = arch or ArchConfig()
    arch.validate()
    rng = np.random.default_rng(seed)
    blocks = []
    cin = arch.in_channels
    for cout, k in zip(arch.channels, arch.kernel_sizes):
        fan_in = cin * k * k
        bound = np.sqrt(6.0 / fan_in)
        kernel = Tensor(rng.uniform(-bound, bound, size=(cout, cin, k, k)), requires_grad=True)
        bias = Tensor(np.zeros(cout), requires_grad=True)
        blocks.append(ConvBlock(kernel, bias, GateVector(cout)))
        cin = cout
    bound = 1.0 / np.sqrt(cin)
    w = Tensor(rng.uniform(-bound, bound, size=(arch.n_classes, cin)), requires_grad=True)
    b = Tensor(np.zeros(arch.n_classes), requires_grad=True)
    return GatedModel(arch, blocks, w, b)


def features(model: GatedModel, images) -> Tensor:
    """Penultimate (pooled) features, shape [B, channels[-1]]."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    arch = model.arch
    expected = (arch.in_channels, *arch.image_size)
    if x.data.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError(f"input shape {x.shape} does not match architecture [B, {expected}]")
    for block in model.blocks:
        h = T.conv2d(x, block.kernel, block.bias)
        if not model.use_gates:
            x = T.relu(h)
        elif arch.gate_placement == "post_relu":
            x = T.channel_scale(T.relu(h), block.gates.tensor)
        else:
            x = T.relu(T.channel_scale(h, block.gates.tensor))
    return T.global_avg_pool(x)


def forward(model: GatedModel, images) -> Tensor:
    return T.linear(features(model, images), model.head_weight, model.head_bias)


def predict(model: GatedModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    out = [forward(model, images[i:i + batch_size]).data.argmax(axis=1)
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def mask_filter(model: GatedModel, fid: FilterId) -> None:
    """Prune one filter: zero its gate and freeze it."""
    model._check_id(fid)
    gates = model.blocks[fid.layer_index].gates
    if gates.pruned_mask[fid.channel_index]:
        raise PruneError(f"filter {tuple(fid)} is already pruned")
    gates.tensor.data[fid.channel_index] = 0.0
    gates.pruned_mask[fid.channel_index] = True


def trainable_parameters(model: GatedModel) -> list[Parameter]:
    params = []
    for i, b in enumerate(model.blocks):
        params.append(Parameter(f"block{i}.kernel", b.kernel))
        params.append(Parameter(f"block{i}.bias", b.bias))
        params.append(Parameter(f"block{i}.gates", b.gates.tensor, ~b.gates.pruned_mask))
    params.append(Parameter("head.weight", model.head_weight))
    params.append(Parameter("head.bias", model.head_bias))
    return params


# ---------------------------------------------------------------- checkpoint container

MAGIC = b"PLDG"
CHECKPOINT_VERSION = 1
_PLACEMENT_CODES = {p: i for i, p in enumerate(GATE_PLACEMENTS)}


def _arch_descriptor(arch: ArchConfig) -> bytes:
    n = len(arch.channels)
    fmt = f"<IIIII{n}I{n}I"
    return struct.pack(fmt, n, arch.in_channels, arch.image_size[0], arch.image_size[1],
                       arch.n_classes, *arch.channels, *arch.kernel_sizes) + \
        struct.pack("<I", _PLACEMENT_CODES[arch.gate_placement])


def save_checkpoint(model: GatedModel, path: str | Path) -> None:
    """Write ``PLDG`` | u32 version | arch descriptor | f64 params | mask bitmaps."""
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def checkpoint_bytes(model: GatedModel) -> bytes:
    return MAGIC + struct.pack("<I", CHECKPOINT_VERSION) + _arch_descriptor(model.arch) + \
        model.parameter_bytes()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncationError(f"unexpected end of file at byte {self.pos} (needed {n} more)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def load_checkpoint(path: str | Path) -> GatedModel:
    return checkpoint_from_bytes(Path(path).read_bytes())


def checkpoint_from_bytes(data: bytes) -> GatedModel:
    r = _Reader(data)
    magic = r.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    n, cin, h, w, k = r.unpack("<IIIII")
    channels = r.unpack(f"<{n}I")
    kernels = r.unpack(f"<{n}I")
    (placement,) = r.unpack("<I")
    if placement >= len(GATE_PLACEMENTS):
        raise FormatError(f"unknown gate placement code {placement}")
    arch = ArchConfig(channels, kernels, cin, (h, w), k, GATE_PLACEMENTS[placement])
    model = build_model(arch, seed=0)
    for t in model.all_tensors():
        t.data = np.frombuffer(r.read(8 * t.data.size), dtype="<f8").reshape(t.shape).astype(np.float64)
    for b in model.blocks:
        nbytes = (len(b.gates) + 7) // 8
        bits = np.unpackbits(np.frombuffer(r.read(nbytes), dtype=np.uint8))[:len(b.gates)]
        b.gates.pruned_mask = bits.astype(bool)
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after checkpoint payload")
    return model


def ungated_forward_reference(model: GatedModel, images: np.ndarray) -> np.ndarray:
    """Forward of the same weights with gate layers removed entirely."""
    twin = model.copy()
    twin.use_gates = False
    return forward(twin, images).data


def zeroed_channel_twin(model: GatedModel, fids: Sequence[FilterId]) -> GatedModel:
    """Copy of ``model`` with each listed channel's kernel slice and bias zeroed."""
    twin = model.copy()
    for li, ci in fids:
        twin.blocks[li].kernel.data[ci] = 0.0
        twin.blocks[li].bias.data[ci] = 0.0
    return twin
