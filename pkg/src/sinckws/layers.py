"""Depthwise-separable convolution layers, plain and grouped, and the block wrapper."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import ops
from .tensor import Tensor


@dataclass(frozen=True)
class ConvSpec:
    c_in: int
    c_out: int
    k: int
    s: int = 1
    g: int = 1

    def __post_init__(self):
        if min(self.c_in, self.c_out, self.k, self.s, self.g) < 1:
            raise ValueError(f"all ConvSpec fields must be >= 1: {self}")
        if self.g > min(self.c_in, self.c_out):
            raise ValueError(f"groups {self.g} exceed channel counts of {self}")

    @property
    def same_padding(self) -> tuple[int, int]:
        left = (self.k - 1) // 2
        return left, self.k - 1 - left

    def output_length(self, length: int) -> int:
        return ops.conv_output_length(length, self.k, self.s, self.same_padding)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class GroupPartition:
    c_in: tuple
    c_out: tuple

    def __post_init__(self):
        if len(self.c_in) != len(self.c_out) or not self.c_in:
            raise ValueError("partition needs one (c_in, c_out) pair per group")
        for sizes in (self.c_in, self.c_out):
            if max(sizes) - min(sizes) > 1 or min(sizes) < 1:
                raise ValueError(f"group sizes {sizes} are not a nearly-equal split")

    @property
    def groups(self) -> int:
        return len(self.c_in)

    def pointwise_params(self) -> int:
        return sum(a * b for a, b in zip(self.c_in, self.c_out))


def _split(total: int, g: int) -> tuple:
    base, extra = divmod(total, g)
    return tuple(base + 1 if i < extra else base for i in range(g))


def make_partition(c_in: int, c_out: int, g: int) -> GroupPartition:
    """Nearly-equal split of both channel counts; larger groups come first."""
    if not 1 <= g <= min(c_in, c_out):
        raise ValueError(f"cannot split ({c_in}, {c_out}) channels into {g} groups")
    return GroupPartition(_split(c_in, g), _split(c_out, g))


def dsconv_params(spec: ConvSpec) -> int:
    """Weight count of a (grouped) depthwise-separable conv without biases."""
    return spec.k * spec.c_in + make_partition(spec.c_in, spec.c_out, spec.g).pointwise_params()


def dsconv_forward(x: Tensor, depthwise: Tensor, pointwise: Tensor, spec: ConvSpec) -> Tensor:
    """Depthwise conv (stride ``spec.s``, same padding) then a 1x1 conv across channels."""
    if spec.g != 1:
        raise ValueError("dsconv_forward is the ungrouped case; use gdsconv_forward")
    if depthwise.shape != (spec.c_in, 1, spec.k) or pointwise.shape != (spec.c_out, spec.c_in, 1):
        raise ValueError(f"weight shapes {depthwise.shape}, {pointwise.shape} do not match {spec}")
    h = ops.depthwise_conv1d(x, depthwise, stride=spec.s, padding=spec.same_padding)
    return ops.grouped_conv1d(h, pointwise)


def gdsconv_forward(x: Tensor, depthwise: Tensor, pointwise: Sequence[Tensor], spec: ConvSpec,
                    partition: Optional[GroupPartition] = None) -> Tensor:
    """Depthwise conv over all channels, then one pointwise conv per channel group.

    Group outputs are concatenated in group order.
    """
    partition = partition or make_partition(spec.c_in, spec.c_out, spec.g)
    if partition.groups != spec.g or sum(partition.c_in) != spec.c_in or sum(partition.c_out) != spec.c_out:
        raise ValueError(f"partition {partition} inconsistent with {spec}")
    if len(pointwise) != spec.g:
        raise ValueError(f"need {spec.g} pointwise weights, got {len(pointwise)}")
    for w, ci, co in zip(pointwise, partition.c_in, partition.c_out):
        if w.shape != (co, ci, 1):
            raise ValueError(f"pointwise weight {w.shape} does not match group ({ci} -> {co})")
    if depthwise.shape != (spec.c_in, 1, spec.k):
        raise ValueError(f"depthwise weight {depthwise.shape} does not match {spec}")
    h = ops.depthwise_conv1d(x, depthwise, stride=spec.s, padding=spec.same_padding)
    parts = ops.split_channels(h, partition.c_in)
    return ops.concat_channels([ops.grouped_conv1d(p, w) for p, w in zip(parts, pointwise)])


class SeparableConv:
    """Weights of one DSConv (``g == 1``) or GDSConv layer."""

    def __init__(self, spec: ConvSpec, rng: np.random.Generator, dtype=np.float32, prefix: str = ""):
        self.spec = spec
        self.partition = make_partition(spec.c_in, spec.c_out, spec.g)
        self.depthwise = Tensor(
            rng.normal(0.0, np.sqrt(2.0 / spec.k), (spec.c_in, 1, spec.k)).astype(dtype),
            requires_grad=True, name=f"{prefix}depthwise",
        )
        self.pointwise = []
        for i, (ci, co) in enumerate(zip(self.partition.c_in, self.partition.c_out)):
            name = f"{prefix}pointwise" if spec.g == 1 else f"{prefix}pointwise.{i}"
            self.pointwise.append(Tensor(
                rng.normal(0.0, np.sqrt(2.0 / ci), (co, ci, 1)).astype(dtype),
                requires_grad=True, name=name,
            ))

    def parameters(self) -> list[Tensor]:
        return [self.depthwise, *self.pointwise]

    def __call__(self, x: Tensor) -> Tensor:
        if self.spec.g == 1:
            return dsconv_forward(x, self.depthwise, self.pointwise[0], self.spec)
        return gdsconv_forward(x, self.depthwise, self.pointwise, self.spec, self.partition)


@dataclass(frozen=True)
class BlockSpec:
    conv: ConvSpec
    pool: int = 2
    dropout: float = 0.1

    def to_dict(self) -> dict:
        return {"conv": self.conv.to_dict(), "pool": self.pool, "dropout": self.dropout}

    @classmethod
    def from_dict(cls, d: dict) -> "BlockSpec":
        return cls(ConvSpec(**d["conv"]), int(d["pool"]), float(d["dropout"]))


class Block:
    """(G)DSConv -> batch norm -> [activation] -> spatial dropout -> average pool."""

    def __init__(self, spec: BlockSpec, rng: np.random.Generator, dtype=np.float32,
                 activation: str = "relu", prefix: str = ""):
        if activation not in ("relu", "none"):
            raise ValueError(f"unknown activation {activation!r}")
        self.spec = spec
        self.activation = activation
        self.conv = SeparableConv(spec.conv, rng, dtype, prefix)
        c = spec.conv.c_out
        self.gamma = Tensor(np.ones(c, dtype=dtype), requires_grad=True, name=f"{prefix}bn.gamma")
        self.beta = Tensor(np.zeros(c, dtype=dtype), requires_grad=True, name=f"{prefix}bn.beta")
        self.bn = ops.BNState.create(c, dtype)

    def parameters(self) -> list[Tensor]:
        return [*self.conv.parameters(), self.gamma, self.beta]

    def output_length(self, length: int) -> int:
        t = self.spec.conv.output_length(length)
        return (t - self.spec.pool) // self.spec.pool + 1 if t >= self.spec.pool else 0

    def __call__(self, x: Tensor, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        return block_forward(x, self, training, rng)


def block_forward(x: Tensor, block: Block, training: bool = False,
                  rng: Optional[np.random.Generator] = None) -> Tensor:
    h = block.conv(x)
    h = ops.batchnorm1d(h, block.gamma, block.beta, block.bn, training)
    if block.activation == "relu":
        h = ops.relu(h)
    h = ops.spatial_dropout(h, block.spec.dropout, training, rng)
    if block.spec.pool > 1:
        h = ops.avg_pool1d(h, block.spec.pool, block.spec.pool)
    return h
