"""Channel and temporal attention submodules and their arrangements."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

VARIANTS = ("none", "channel_only", "temporal_only", "channel_then_temporal", "temporal_then_channel")
DEFAULT_REDUCTION = 16
DEFAULT_KT = 7
MIN_HIDDEN = 4


class AttentionParamError(ValueError):
    """Attention parameters are missing or sized for a different feature map."""


def hidden_width(channels: int, r: int) -> int:
    return max(channels // r, MIN_HIDDEN)


def attention_param_count(channels: int, variant: str, r: int = DEFAULT_REDUCTION, kt: int = DEFAULT_KT) -> int:
    """Trainable parameters one attention site adds for ``channels`` filters."""
    hid = hidden_width(channels, r)
    n = 0
    if uses_channel(variant):
        n += 2 * channels * hid + hid + channels
    if uses_temporal(variant):
        n += 2 * kt + 1
    return n


def uses_channel(variant: str) -> bool:
    return variant in ("channel_only", "channel_then_temporal", "temporal_then_channel")


def uses_temporal(variant: str) -> bool:
    return variant in ("temporal_only", "channel_then_temporal", "temporal_then_channel")


@dataclass
class AttentionConfig:
    variant: str = "channel_then_temporal"
    r: int = DEFAULT_REDUCTION
    kt: int = DEFAULT_KT

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"attention variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.r < 1:
            raise ValueError(f"reduction ratio must be positive, got {self.r}")
        if self.kt < 1 or self.kt % 2 == 0:
            raise ValueError(f"temporal kernel extent must be a positive odd integer, got {self.kt}")


@dataclass
class ChannelAttentionParams:
    """Shared two-layer MLP: ``w1`` is hidden x C, ``w2`` is C x hidden."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    r: int = DEFAULT_REDUCTION

    @property
    def channels(self) -> int:
        return self.w1.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    @classmethod
    def init(cls, channels: int, r: int, rng: np.random.Generator) -> "ChannelAttentionParams":
        hid = hidden_width(channels, r)
        b_in = 1.0 / np.sqrt(channels)
        b_hid = 1.0 / np.sqrt(hid)
        return cls(
            w1=Tensor(rng.uniform(-b_in, b_in, (hid, channels)), requires_grad=True),
            b1=Tensor(np.zeros(hid), requires_grad=True),
            w2=Tensor(rng.uniform(-b_hid, b_hid, (channels, hid)), requires_grad=True),
            b2=Tensor(np.zeros(channels), requires_grad=True),
            r=r,
        )

    @classmethod
    def zeros(cls, channels: int, r: int = DEFAULT_REDUCTION) -> "ChannelAttentionParams":
        hid = hidden_width(channels, r)
        return cls(
            w1=Tensor(np.zeros((hid, channels)), requires_grad=True),
            b1=Tensor(np.zeros(hid), requires_grad=True),
            w2=Tensor(np.zeros((channels, hid)), requires_grad=True),
            b2=Tensor(np.zeros(channels), requires_grad=True),
            r=r,
        )


@dataclass
class TemporalAttentionParams:
    """Conv kernel over the two pooled planes, stored as 1 x 2 x 1 x kt (temporal axis last)."""

    kernel: Tensor
    bias: Tensor

    @property
    def kt(self) -> int:
        return self.kernel.shape[3]

    def tensors(self) -> dict[str, Tensor]:
        return {"kernel": self.kernel, "bias": self.bias}

    @classmethod
    def init(cls, kt: int, rng: np.random.Generator) -> "TemporalAttentionParams":
        bound = 1.0 / np.sqrt(2 * kt)
        return cls(
            kernel=Tensor(rng.uniform(-bound, bound, (1, 2, 1, kt)), requires_grad=True),
            bias=Tensor(np.zeros(1), requires_grad=True),
        )

    @classmethod
    def zeros(cls, kt: int = DEFAULT_KT) -> "TemporalAttentionParams":
        return cls(
            kernel=Tensor(np.zeros((1, 2, 1, kt)), requires_grad=True),
            bias=Tensor(np.zeros(1), requires_grad=True),
        )


@dataclass
class AttentionParams:
    channel: Optional[ChannelAttentionParams] = None
    temporal: Optional[TemporalAttentionParams] = None

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        if self.channel is not None:
            out.update({f"channel.{k}": v for k, v in self.channel.tensors().items()})
        if self.temporal is not None:
            out.update({f"temporal.{k}": v for k, v in self.temporal.tensors().items()})
        return out

    @classmethod
    def init(cls, channels: int, config: AttentionConfig, rng: np.random.Generator) -> "AttentionParams":
        ch = ChannelAttentionParams.init(channels, config.r, rng) if uses_channel(config.variant) else None
        tp = TemporalAttentionParams.init(config.kt, rng) if uses_temporal(config.variant) else None
        return cls(channel=ch, temporal=tp)


@dataclass
class AttentionRecord:
    layer: str
    batch_index: int
    kind: str  # "channel" (N x C) or "temporal" (N x 1 x H x W)
    weights: np.ndarray


@dataclass
class AttentionTrace:
    """Sink collecting attention weights during forward passes."""

    records: list[AttentionRecord] = field(default_factory=list)
    batch_index: int = 0

    def add(self, layer: str, kind: str, weights: np.ndarray) -> None:
        self.records.append(AttentionRecord(layer, self.batch_index, kind, np.array(weights, copy=True)))

    def select(self, kind: str, layer: str | None = None) -> list[AttentionRecord]:
        return [r for r in self.records if r.kind == kind and (layer is None or r.layer == layer)]

    def layers(self) -> list[str]:
        seen: list[str] = []
        for r in self.records:
            if r.layer not in seen:
                seen.append(r.layer)
        return seen


def _shared_mlp(v: Tensor, p: ChannelAttentionParams) -> Tensor:
    return T.dense(T.relu(T.dense(v, p.w1, p.b1)), p.w2, p.b2)


def channel_attention(a: Tensor, params: ChannelAttentionParams) -> Tensor:
    """Per-channel gate in (0, 1), shape N x C."""
    if a.ndim != 4:
        raise T.DimensionError(f"channel_attention expects N x C x H x W, got {a.shape}")
    if params.channels != a.shape[1] or params.w2.shape[0] != a.shape[1]:
        raise AttentionParamError(f"channel attention sized for {params.channels} channels, map has {a.shape[1]}")
    avg = T.pool_channelwise(a, "avg")
    mx = T.pool_channelwise(a, "max")
    return T.sigmoid(T.add(_shared_mlp(avg, params), _shared_mlp(mx, params)))


def temporal_attention(a: Tensor, params: TemporalAttentionParams) -> Tensor:
    """Per-position gate in (0, 1), shape N x 1 x H x W."""
    if a.ndim != 4:
        raise T.DimensionError(f"temporal_attention expects N x C x H x W, got {a.shape}")
    if params.kernel.shape[:3] != (1, 2, 1):
        raise AttentionParamError(f"temporal kernel must be 1 x 2 x 1 x kt, got {params.kernel.shape}")
    kt = params.kt
    if kt % 2 == 0:
        raise AttentionParamError(f"temporal kernel extent must be odd, got {kt}")
    pooled = T.concat([T.pool_across_channels(a, "avg"), T.pool_across_channels(a, "max")], axis=1)
    return T.sigmoid(T.conv2d(pooled, params.kernel, params.bias, padding=(0, kt // 2)))


def _apply_channel(a: Tensor, params: AttentionParams, layer: str, trace: AttentionTrace | None) -> Tensor:
    if params.channel is None:
        raise AttentionParamError(f"{layer}: channel attention enabled but no channel parameters")
    wc = channel_attention(a, params.channel)
    if trace is not None:
        trace.add(layer, "channel", wc.data)
    n, c = wc.shape
    return T.mul(a, T.reshape(wc, (n, c, 1, 1)))


def _apply_temporal(a: Tensor, params: AttentionParams, layer: str, trace: AttentionTrace | None) -> Tensor:
    if params.temporal is None:
        raise AttentionParamError(f"{layer}: temporal attention enabled but no temporal parameters")
    wt = temporal_attention(a, params.temporal)
    if trace is not None:
        trace.add(layer, "temporal", wt.data)
    return T.mul(a, wt)


def apply_attention(
    a: Tensor,
    config: AttentionConfig,
    params: AttentionParams | None,
    trace: AttentionTrace | None = None,
    layer: str = "block",
) -> Tensor:
    """Rescale ``a`` by the configured arrangement; the second submodule sees the rescaled map."""
    variant = config.variant
    if variant == "none":
        return a
    if params is None:
        raise AttentionParamError(f"{layer}: variant {variant!r} needs attention parameters")
    if variant == "channel_only":
        return _apply_channel(a, params, layer, trace)
    if variant == "temporal_only":
        return _apply_temporal(a, params, layer, trace)
    if variant == "channel_then_temporal":
        return _apply_temporal(_apply_channel(a, params, layer, trace), params, layer, trace)
    if variant == "temporal_then_channel":
        return _apply_channel(_apply_temporal(a, params, layer, trace), params, layer, trace)
    raise ValueError(f"unknown attention variant {variant!r}")
