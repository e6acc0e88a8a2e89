"""Plain and residual convolutional backbones with per-block attention."""

from __future__ import annotations

import copy
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, AttentionParams, AttentionTrace, apply_attention
from .container import ContainerError, ManifestMismatchError, read_container, write_container
from .tensor import BatchNormState, Tensor

CHECKPOINT_MAGIC = b"DANHAR01"
DEFAULT_PLAN = (128, 128, 256, 256, 384, 384)


class ModelConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    num_classes: int
    sensor_axes: int
    window_length: int
    backbone: str = "residual"
    channel_plan: tuple[int, ...] = DEFAULT_PLAN
    kernel: int = 6
    pool: int = 2
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.attention, dict):
            self.attention = AttentionConfig(**self.attention)
        self.channel_plan = tuple(int(c) for c in self.channel_plan)
        if self.backbone not in ("plain", "residual"):
            raise ModelConfigError(f"backbone must be 'plain' or 'residual', got {self.backbone!r}")
        if not self.channel_plan or len(self.channel_plan) % 2:
            raise ModelConfigError(f"channel_plan must have an even, non-zero length, got {list(self.channel_plan)}")
        if min(self.channel_plan) < 1 or self.kernel < 1 or self.pool < 1:
            raise ModelConfigError("channel widths, kernel and pool extent must be positive")
        if self.num_classes < 2:
            raise ModelConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.sensor_axes < 1:
            raise ModelConfigError("sensor_axes must be positive")
        if not 0 <= self.seed < 2**64:
            raise ModelConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.final_width() < 1:
            raise ModelConfigError(
                f"window length {self.window_length} too short for {self.num_blocks} poolings of extent {self.pool}"
            )

    @property
    def num_blocks(self) -> int:
        return len(self.channel_plan) // 2

    def final_width(self) -> int:
        w = self.window_length
        for _ in range(self.num_blocks):
            w //= self.pool
        return w

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_plan"] = list(self.channel_plan)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _tensor_rng(seed: int, name: str) -> np.random.Generator:
    # one independent stream per tensor name; insensitive to which other tensors exist
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, seed >> 32, zlib.crc32(name.encode())]))


def _uniform(seed: int, name: str, shape: tuple[int, ...], bound: float) -> Tensor:
    return Tensor(_tensor_rng(seed, name).uniform(-bound, bound, shape), requires_grad=True)


@dataclass
class Block:
    name: str
    conv_a: Tensor
    bn_a: tuple[Tensor, Tensor, BatchNormState]
    conv_b: Tensor
    bn_b: tuple[Tensor, Tensor, BatchNormState]
    proj: Tensor | None
    attention: AttentionParams | None


class Model:
    def __init__(self, config: ModelConfig, blocks: list[Block], classifier_w: Tensor, classifier_b: Tensor):
        self.config = config
        self.blocks = blocks
        self.classifier_w = classifier_w
        self.classifier_b = classifier_b

    # registry -------------------------------------------------------------
    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for b in self.blocks:
            out[f"{b.name}.conv_a.weight"] = b.conv_a
            out[f"{b.name}.bn_a.gamma"], out[f"{b.name}.bn_a.beta"] = b.bn_a[0], b.bn_a[1]
            out[f"{b.name}.conv_b.weight"] = b.conv_b
            out[f"{b.name}.bn_b.gamma"], out[f"{b.name}.bn_b.beta"] = b.bn_b[0], b.bn_b[1]
            if b.proj is not None:
                out[f"{b.name}.proj.weight"] = b.proj
            if b.attention is not None:
                for k, v in b.attention.tensors().items():
                    out[f"{b.name}.attn.{k}"] = v
        out["classifier.weight"] = self.classifier_w
        out["classifier.bias"] = self.classifier_b
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def named_buffers(self) -> dict[str, tuple[BatchNormState, str]]:
        out = {}
        for b in self.blocks:
            for tag, bn in (("bn_a", b.bn_a), ("bn_b", b.bn_b)):
                out[f"{b.name}.{tag}.running_mean"] = (bn[2], "running_mean")
                out[f"{b.name}.{tag}.running_var"] = (bn[2], "running_var")
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters then BN running statistics, copied."""
        sd = {k: v.data.copy() for k, v in self.named_parameters().items()}
        for k, (st, attr) in self.named_buffers().items():
            sd[k] = getattr(st, attr).copy()
        return sd

    def load_state_dict(self, sd: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        buffers = self.named_buffers()
        expected = list(params) + list(buffers)
        if list(sd) != expected:
            missing = sorted(set(expected) - set(sd))
            extra = sorted(set(sd) - set(expected))
            raise ManifestMismatchError(f"state names differ from model (missing={missing}, unexpected={extra})")
        for k, arr in sd.items():
            target_shape = params[k].shape if k in params else getattr(*buffers[k]).shape
            if tuple(arr.shape) != tuple(target_shape):
                raise ManifestMismatchError(f"{k}: stored shape {tuple(arr.shape)} != model shape {tuple(target_shape)}")
        for k, arr in sd.items():
            if k in params:
                params[k].data = np.array(arr, dtype=np.float64)
            else:
                st, attr = buffers[k]
                setattr(st, attr, np.array(arr, dtype=np.float64))

    def num_parameters(self, predicate=None) -> int:
        return sum(t.size for k, t in self.named_parameters().items() if predicate is None or predicate(k))

    def attention_parameter_count(self) -> int:
        return self.num_parameters(lambda k: ".attn." in k)

    def backbone_parameter_count(self) -> int:
        return self.num_parameters(lambda k: ".attn." not in k)

    def zero_grad(self) -> None:
        T.zero_grads(self.parameters())

    def clone(self) -> "Model":
        return copy.deepcopy(self)

    # forward ----------------------------------------------------------------
    def forward(self, batch: Tensor | np.ndarray, mode: str = "eval", trace: AttentionTrace | None = None) -> Tensor:
        return forward(self, batch, mode, trace)

    __call__ = forward

    def iter_blocks(self) -> Iterator[Block]:
        return iter(self.blocks)


def build_model(config: ModelConfig) -> Model:
    """Deterministic construction: every tensor draws from its own name-keyed stream."""
    seed = config.seed
    k = config.kernel
    blocks = []
    cin = 1
    for i in range(config.num_blocks):
        name = f"block{i}"
        c1, c2 = config.channel_plan[2 * i], config.channel_plan[2 * i + 1]

        def bn(c):
            return (
                Tensor(np.ones(c), requires_grad=True),
                Tensor(np.zeros(c), requires_grad=True),
                BatchNormState(c),
            )

        conv_a = _uniform(seed, f"{name}.conv_a.weight", (c1, cin, 1, k), np.sqrt(6.0 / (cin * k)))
        conv_b = _uniform(seed, f"{name}.conv_b.weight", (c2, c1, 1, k), np.sqrt(6.0 / (c1 * k)))
        proj = None
        if config.backbone == "residual" and cin != c2:
            proj = _uniform(seed, f"{name}.proj.weight", (c2, cin, 1, 1), np.sqrt(6.0 / cin))
        attn = None
        if config.attention.variant != "none":
            attn = AttentionParams.init(c2, config.attention, _tensor_rng(seed, f"{name}.attn"))
        blocks.append(Block(name, conv_a, bn(c1), conv_b, bn(c2), proj, attn))
        cin = c2

    features = cin * config.sensor_axes * config.final_width()
    bound = 1.0 / np.sqrt(features)
    cw = _uniform(seed, "classifier.weight", (config.num_classes, features), bound)
    cb = Tensor(np.zeros(config.num_classes), requires_grad=True)
    return Model(config, blocks, cw, cb)


def _block_forward(b: Block, x: Tensor, cfg: ModelConfig, mode: str, trace: AttentionTrace | None) -> Tensor:
    pad = (0, T.same_padding(cfg.kernel))
    h = T.conv2d(x, b.conv_a, padding=pad)
    h = T.relu(T.batchnorm(h, b.bn_a[0], b.bn_a[1], b.bn_a[2], mode))
    h = T.conv2d(h, b.conv_b, padding=pad)
    h = T.batchnorm(h, b.bn_b[0], b.bn_b[1], b.bn_b[2], mode)
    if cfg.backbone == "residual":
        skip = x if b.proj is None else T.conv2d(x, b.proj)
        h = T.add(h, skip)
    h = T.relu(h)
    h = apply_attention(h, cfg.attention, b.attention, trace, layer=b.name)
    return T.max_pool_temporal(h, cfg.pool)


def forward(model: Model, batch: Tensor | np.ndarray, mode: str = "eval", trace: AttentionTrace | None = None) -> Tensor:
    """Logits N x num_classes for an N x 1 x H x W batch."""
    cfg = model.config
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=np.float64))
    expected = (1, cfg.sensor_axes, cfg.window_length)
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise T.DimensionError(f"batch shape {x.shape} does not match model input N x {' x '.join(map(str, expected))}")
    try:
        for b in model.blocks:
            x = _block_forward(b, x, cfg, mode, trace)
        return T.dense(T.flatten(x), model.classifier_w, model.classifier_b)
    except T.NonFiniteError as exc:
        raise T.NonFiniteError(f"forward ({mode}) produced non-finite values at {exc}") from exc


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model: Model, path: str | Path, dtype: str = "float64", meta: dict | None = None) -> None:
    """``meta`` is stored verbatim in the header (e.g. input normalization statistics)."""
    arrays = {k: (v, dtype) for k, v in model.state_dict().items()}
    header = {"model_config": model.config.to_dict()}
    if meta:
        header["meta"] = meta
    write_container(path, CHECKPOINT_MAGIC, header, arrays)


def checkpoint_meta(path: str | Path) -> dict:
    header, _ = read_container(path, CHECKPOINT_MAGIC)
    return header.get("meta", {})


def load_checkpoint(path: str | Path) -> Model:
    header, arrays = read_container(path, CHECKPOINT_MAGIC)
    try:
        config = ModelConfig.from_dict(header["model_config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ContainerError(f"{path}: invalid model config in header: {exc}") from exc
    model = build_model(config)
    model.load_state_dict(arrays)
    return model
