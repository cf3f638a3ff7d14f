"""Base (DSConv) and low-parameter (GDSConv) keyword-spotting architectures."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import ops
from .layers import Block, BlockSpec, ConvSpec, make_partition
from .sinc import SincConv, SincConvConfig, SincFilterParams
from .tensor import Tensor, record

CLASSES = ("yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go", "unknown", "silence")
N_CLASSES = len(CLASSES)
WIDTH = 160
N_BLOCKS = 5
GROUP_PATTERN = (2, 3, 2, 3)
CLIP_SAMPLES = 16000
MAC_BUDGET = 50_000_000  # per one-second inference


@dataclass(frozen=True)
class ModelConfig:
    sinc: SincConvConfig = field(default_factory=SincConvConfig)
    blocks: tuple = ()
    n_classes: int = N_CLASSES
    variant: str = "base"
    group_pattern: tuple = ()
    activation: str = "relu"

    def validate(self) -> "ModelConfig":
        if self.variant not in ("base", "grouped"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if len(self.blocks) != N_BLOCKS:
            raise ValueError(f"need exactly {N_BLOCKS} blocks, got {len(self.blocks)}")
        first, rest = self.blocks[0].conv, [b.conv for b in self.blocks[1:]]
        if first.c_in != self.sinc.n_filters or first.c_out != WIDTH or first.g != 1:
            raise ValueError(f"block 1 must map {self.sinc.n_filters} -> {WIDTH} channels ungrouped")
        for i, conv in enumerate(rest, start=2):
            if conv.c_in != WIDTH or conv.c_out != WIDTH:
                raise ValueError(f"block {i} must be {WIDTH} -> {WIDTH}")
            if conv.k >= first.k:
                raise ValueError("block 1 must have the largest kernel")
        groups = tuple(c.g for c in rest)
        if self.variant == "base" and any(g != 1 for g in groups):
            raise ValueError("base variant must be ungrouped")
        if self.variant == "grouped" and groups != tuple(self.group_pattern):
            raise ValueError(f"grouped blocks carry {groups}, pattern says {self.group_pattern}")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        return self

    def to_dict(self) -> dict:
        return {
            "sinc": self.sinc.to_dict(),
            "blocks": [b.to_dict() for b in self.blocks],
            "n_classes": self.n_classes,
            "variant": self.variant,
            "group_pattern": list(self.group_pattern),
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            sinc=SincConvConfig(**d["sinc"]),
            blocks=tuple(BlockSpec.from_dict(b) for b in d["blocks"]),
            n_classes=int(d["n_classes"]),
            variant=d["variant"],
            group_pattern=tuple(d["group_pattern"]),
            activation=d.get("activation", "relu"),
        ).validate()


def default_config(variant: str = "base", kernel: int = 9, first_kernel: int = 25, first_stride: int = 2,
                   pool: int = 2, dropout: float = 0.1, group_pattern: tuple = GROUP_PATTERN,
                   sinc: Optional[SincConvConfig] = None, activation: str = "relu") -> ModelConfig:
    sinc = sinc or SincConvConfig()
    groups = tuple(group_pattern) if variant == "grouped" else (1,) * (N_BLOCKS - 1)
    blocks = [BlockSpec(ConvSpec(sinc.n_filters, WIDTH, first_kernel, first_stride, 1), pool, dropout)]
    blocks += [BlockSpec(ConvSpec(WIDTH, WIDTH, kernel, 1, g), pool, dropout) for g in groups]
    return ModelConfig(sinc, tuple(blocks), N_CLASSES, variant,
                       tuple(group_pattern) if variant == "grouped" else (), activation).validate()


class KWSModel:
    """SincConv -> log compression -> 5 (G)DSConv blocks -> global pooling -> linear head.

    ``forward`` returns logits; softmax is left to the loss and to :meth:`predict`.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32,
                 sinc_params: Optional[list[SincFilterParams]] = None):
        self.config = config.validate()
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.sinc = SincConv(config.sinc, sinc_params, dtype)
        self.blocks = [
            Block(spec, rng, dtype, config.activation, prefix=f"block{i}.")
            for i, spec in enumerate(config.blocks, start=1)
        ]
        bound = 1.0 / np.sqrt(WIDTH)
        self.head_weight = Tensor(rng.uniform(-bound, bound, (config.n_classes, WIDTH)).astype(dtype),
                                  requires_grad=True, name="head.weight")
        self.head_bias = Tensor(np.zeros(config.n_classes, dtype=dtype), requires_grad=True, name="head.bias")

    def parameters(self) -> list[Tensor]:
        params = self.sinc.parameters()
        for block in self.blocks:
            params += block.parameters()
        return params + [self.head_weight, self.head_bias]

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def bn_states(self) -> dict[str, ops.BNState]:
        return {f"block{i}.bn": b.bn for i, b in enumerate(self.blocks, start=1)}

    def forward(self, audio, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        """``audio`` is ``[T]`` or ``[n, T]``; returns ``[n_classes]`` or ``[n, n_classes]`` logits."""
        arr = audio.data if isinstance(audio, Tensor) else np.asarray(audio)
        single = arr.ndim == 1
        x = Tensor(arr.astype(self.dtype, copy=False).reshape((1, 1, -1) if single else (arr.shape[0], 1, -1)))
        h = ops.log_compress(self.sinc(x))
        for block in self.blocks:
            h = block(h, training, rng)
        logits = ops.linear(ops.global_avg_pool(h), self.head_weight, self.head_bias)
        if single:
            logits = _take_first(logits)
        return logits

    __call__ = forward

    def predict(self, audio) -> np.ndarray:
        """Class posteriors in eval mode."""
        return ops.softmax(self.forward(audio, training=False).data.astype(np.float64))


def _take_first(t: Tensor) -> Tensor:
    def backward_fn(gy):
        return (gy[None],)

    return record("take_first", (t,), Tensor(t.data[0]), backward_fn)


def build_model(config: Optional[ModelConfig] = None, seed: int = 0, dtype=np.float32) -> KWSModel:
    return KWSModel(config or default_config(), seed=seed, dtype=dtype)


@dataclass
class LayerRow:
    layer: str
    name: str
    params: int
    macs: int


def count_parameters(model: KWSModel) -> tuple[list[LayerRow], int]:
    """One row per trainable tensor, with its exact element count."""
    rows = []
    for name, p in model.named_parameters().items():
        layer = name.split(".")[0]
        rows.append(LayerRow(layer, name, int(p.size), 0))
    return rows, sum(r.params for r in rows)


def layer_table(config: ModelConfig, input_length: int = CLIP_SAMPLES) -> list[LayerRow]:
    """Per-stage parameter and multiply-accumulate counts for one clip."""
    s = config.sinc
    rows = []
    t = ops.conv_output_length(input_length, s.kernel_length, s.stride) if input_length >= s.kernel_length else 0
    rows.append(LayerRow("sinc", "sinc.conv", 2 * s.n_filters, s.n_filters * s.kernel_length * t))
    rows.append(LayerRow("sinc", "sinc.log_compress", 0, 0))
    for i, block in enumerate(config.blocks, start=1):
        conv = block.conv
        name = f"block{i}"
        t_dw = conv.output_length(t) if t > 0 else 0
        pointwise = make_partition(conv.c_in, conv.c_out, conv.g).pointwise_params()
        rows.append(LayerRow(name, f"{name}.depthwise", conv.k * conv.c_in, conv.k * conv.c_in * t_dw))
        rows.append(LayerRow(name, f"{name}.pointwise", pointwise, pointwise * t_dw))
        rows.append(LayerRow(name, f"{name}.bn", 2 * conv.c_out, conv.c_out * t_dw))
        t = (t_dw - block.pool) // block.pool + 1 if t_dw >= block.pool else 0
        rows.append(LayerRow(name, f"{name}.pool", 0, conv.c_out * t * block.pool if block.pool > 1 else 0))
    rows.append(LayerRow("gap", "gap", 0, WIDTH * t))
    head_macs = WIDTH * config.n_classes if input_length > 0 else 0
    rows.append(LayerRow("head", "head.linear", WIDTH * config.n_classes + config.n_classes, head_macs))
    return rows


def count_macs(model_or_config, input_length: int = CLIP_SAMPLES) -> tuple[list[LayerRow], int]:
    config = model_or_config.config if isinstance(model_or_config, KWSModel) else model_or_config
    rows = layer_table(config, input_length)
    return rows, sum(r.macs for r in rows)


def write_table_csv(rows: list[LayerRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["layer", "name", "params", "macs"])
        for r in rows:
            writer.writerow([r.layer, r.name, r.params, r.macs])


def with_groups(config: ModelConfig, groups: tuple) -> ModelConfig:
    """Copy of ``config`` (as the grouped variant) with blocks 2-5 regrouped."""
    blocks = [config.blocks[0]] + [
        replace(b, conv=replace(b.conv, g=g)) for b, g in zip(config.blocks[1:], groups)
    ]
    return replace(config, blocks=tuple(blocks), variant="grouped", group_pattern=tuple(groups)).validate()
