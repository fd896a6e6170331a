"""Channel-attention restoration transformer for CT slices.

A three-level U-Net of transformer blocks. Each block pairs a
dimension-reduced channel self-attention (similarity is channels x
channels, with queries/keys computed at a spatially strided resolution
and keys/values at a reduced channel width) with a wide-kernel
convolutional feed-forward. The network predicts a residual that is
added back onto the input slice, so a freshly built model (zeroed
output head) is exactly the identity restorer.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Tuple, Union

import numpy as np

from . import io as tio
from .tensor import (
    Tensor,
    ShapeError,
    concat,
    conv2d,
    gelu,
    layernorm_channels,
    matmul,
    pixel_shuffle,
    pixel_unshuffle,
    reshape,
    softmax,
    texp,
    transpose,
)

LEVELS = 3
_ALLOWED_RATIOS = (1, 2, 4, 8, 16)
CKPT_MAGIC = b"MCKP"
CKPT_VERSION = 1


class ConfigError(ValueError):
    """Raised on inconsistent architecture hyperparameters."""


class CheckpointError(ValueError):
    """Raised on corrupt or mismatched checkpoint files."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``num_blocks``/``num_heads`` give the per-level settings for the
    three encoder-decoder levels plus the bottleneck (index 3). With
    ``fixed_width`` every level keeps ``base_channels`` channels;
    otherwise level k has ``base_channels * 2**k`` and the bottleneck
    eight times the base width.
    """

    base_channels: int = 48
    expansion: float = 2.0
    ffn_kernel: int = 7
    spatial_ratio: int = 2
    channel_ratio: int = 2
    num_blocks: Tuple[int, int, int, int] = (1, 2, 4, 8)
    num_heads: Tuple[int, int, int, int] = (1, 2, 4, 8)
    fixed_width: bool = False

    def __post_init__(self):
        if self.base_channels < 1:
            raise ConfigError("base_channels must be positive")
        if self.ffn_kernel < 1 or self.ffn_kernel % 2 == 0:
            raise ConfigError("ffn_kernel must be a positive odd integer")
        if self.spatial_ratio not in _ALLOWED_RATIOS:
            raise ConfigError(f"spatial_ratio must be one of {_ALLOWED_RATIOS}")
        if self.channel_ratio not in _ALLOWED_RATIOS:
            raise ConfigError(f"channel_ratio must be one of {_ALLOWED_RATIOS}")
        if self.expansion <= 0:
            raise ConfigError("expansion must be positive")
        if len(self.num_blocks) != 4 or len(self.num_heads) != 4:
            raise ConfigError("num_blocks and num_heads must have four entries")
        if any(n < 1 for n in self.num_blocks) or any(h < 1 for h in self.num_heads):
            raise ConfigError("block and head counts must be positive")
        for ch, heads in zip(self.level_channels, self.num_heads):
            if ch % heads:
                raise ConfigError(f"{ch} channels not divisible by {heads} heads")
            if ch % (self.channel_ratio * heads):
                raise ConfigError(
                    f"{ch} channels not divisible by channel_ratio*heads = "
                    f"{self.channel_ratio * heads}")

    @property
    def level_channels(self) -> Tuple[int, int, int, int]:
        """Channel widths for levels 1..3 and the bottleneck."""
        if self.fixed_width:
            return (self.base_channels,) * 4
        c = self.base_channels
        return (c, 2 * c, 4 * c, 8 * c)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["num_blocks"] = list(self.num_blocks)
        d["num_heads"] = list(self.num_heads)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["num_blocks"] = tuple(d["num_blocks"])
        d["num_heads"] = tuple(d["num_heads"])
        return ModelConfig(**d)


@dataclass(frozen=True)
class LevelPlan:
    """Static per-level layout: width, depth, heads and resolution divisor."""

    channels: int
    blocks: int
    heads: int
    divisor: int


def level_plans(config: ModelConfig) -> Tuple[LevelPlan, ...]:
    chans = config.level_channels
    return tuple(
        LevelPlan(chans[k], config.num_blocks[k], config.num_heads[k], 2 ** min(k, 3))
        for k in range(4)
    )


_PRESETS = {
    "L": dict(num_blocks=(1, 2, 4, 8), num_heads=(1, 2, 4, 8), fixed_width=False),
    "B": dict(num_blocks=(1, 2, 3, 4), num_heads=(1, 2, 4, 8), fixed_width=False),
    "T": dict(num_blocks=(1, 2, 3, 4), num_heads=(1, 1, 1, 1), fixed_width=True),
}


def preset(name: str) -> ModelConfig:
    """Stock configurations: L (large), B (base), T (tiny, fixed 48-wide)."""
    key = name.strip().upper()
    if key not in _PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of L, B, T")
    return ModelConfig(**_PRESETS[key])


# -- module tree ----------------------------------------------------------------


class Module:
    """Minimal parameter container; children are discovered in insertion order."""

    def named_params(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in self.__dict__.items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield path, value
            elif isinstance(value, Module):
                yield from value.named_params(f"{path}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{path}.{i}.")

    def params(self) -> list:
        return [t for _, t in self.named_params()]


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, k: int,
                 stride: int = 1, groups: int = 1, bias: bool = False,
                 zero_init: bool = False, dtype: str = "f32"):
        fan_in = (c_in // groups) * k * k
        bound = 1.0 / math.sqrt(fan_in)
        shape = (c_out, c_in // groups, k, k)
        w = np.zeros(shape) if zero_init else rng.uniform(-bound, bound, size=shape)
        self.weight = Tensor(w, dtype=dtype, requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), dtype=dtype, requires_grad=True) if bias else None
        self.stride = stride
        self.padding = (k - 1) // 2
        self.groups = groups

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride,
                      padding=self.padding, groups=self.groups)


class ChannelLayerNorm(Module):
    """Bias-free per-pixel normalization across channels."""

    def __init__(self, channels: int, eps: float = 1e-6, dtype: str = "f32"):
        self.gamma = Tensor(np.ones(channels), dtype=dtype, requires_grad=True)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layernorm_channels(x, self.gamma, None, self.eps)


class ChannelAttention(Module):
    """Self-attention whose similarity matrix lives on the channel axis.

    Queries/keys are computed at a 1/spatial_ratio resolution (the 3x3
    depth-wise projection conv takes the stride, so the reduction costs
    no extra parameters) and keys/values at channels/channel_ratio
    width. Values keep full resolution, so the output stays (C,H,W).
    Each branch reduces before it projects: Q/K run the strided
    depth-wise conv first, V shrinks channels first.
    """

    def __init__(self, rng, channels: int, heads: int, spatial_ratio: int,
                 channel_ratio: int, dtype: str = "f32"):
        reduced = channels // channel_ratio
        self.q_dw = Conv2d(rng, channels, channels, 3, stride=spatial_ratio,
                           groups=channels, dtype=dtype)
        self.q_proj = Conv2d(rng, channels, channels, 1, dtype=dtype)
        self.k_dw = Conv2d(rng, channels, channels, 3, stride=spatial_ratio,
                           groups=channels, dtype=dtype)
        self.k_proj = Conv2d(rng, channels, reduced, 1, dtype=dtype)
        self.v_proj = Conv2d(rng, channels, reduced, 1, dtype=dtype)
        self.v_dw = Conv2d(rng, reduced, reduced, 3, stride=1, groups=reduced, dtype=dtype)
        self.out_proj = Conv2d(rng, channels, channels, 1, dtype=dtype)
        # one learnable log-temperature per head; zero means the scores
        # are scaled by exactly 1/sqrt(#query positions)
        self.temperature = Tensor(np.zeros((heads, 1, 1)), dtype=dtype, requires_grad=True)
        self.heads = heads
        self.channels = channels
        self.reduced = reduced

    def project_qkv(self, x: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        """Head-split projections: q (N,h,d,S'), k (N,h,d',S'), v (N,h,d',S)."""
        n = x.shape[0]
        h = self.heads
        q = self.q_proj.forward(self.q_dw.forward(x))
        k = self.k_proj.forward(self.k_dw.forward(x))
        v = self.v_dw.forward(self.v_proj.forward(x))
        sp = q.shape[-2] * q.shape[-1]
        s = v.shape[-2] * v.shape[-1]
        q = reshape(q, (n, h, self.channels // h, sp))
        k = reshape(k, (n, h, self.reduced // h, sp))
        v = reshape(v, (n, h, self.reduced // h, s))
        return q, k, v

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            x = reshape(x, (1,) + x.shape)
            squeeze = True
        else:
            squeeze = False
        n, c, height, width = x.shape
        q, k, v = self.project_qkv(x)
        sp = q.shape[-1]
        scale = texp(-self.temperature) * (1.0 / math.sqrt(sp))
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * scale
        attn = softmax(scores, axis=-1)
        mixed = matmul(attn, v)
        mixed = reshape(mixed, (n, c, height, width))
        out = self.out_proj.forward(mixed)
        if squeeze:
            out = reshape(out, (c, height, width))
        return out


class ConvFeedForward(Module):
    """Expand channels, GELU, wide depth-wise conv, GELU, shrink, plus skip."""

    def __init__(self, rng, channels: int, expansion: float, kernel: int,
                 dtype: str = "f32"):
        hidden = int(round(expansion * channels))
        self.conv_in = Conv2d(rng, channels, hidden, 1, dtype=dtype)
        self.conv_dw = Conv2d(rng, hidden, hidden, kernel, groups=hidden, dtype=dtype)
        self.conv_out = Conv2d(rng, hidden, channels, 1, dtype=dtype)

    def body(self, x: Tensor) -> Tensor:
        y = gelu(self.conv_in.forward(x))
        y = gelu(self.conv_dw.forward(y))
        return self.conv_out.forward(y)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.body(x)


class TransformerBlock(Module):
    """Pre-norm residual pair: attention then feed-forward."""

    def __init__(self, rng, channels: int, heads: int, config: ModelConfig,
                 dtype: str = "f32"):
        self.norm1 = ChannelLayerNorm(channels, dtype=dtype)
        self.attn = ChannelAttention(rng, channels, heads, config.spatial_ratio,
                                     config.channel_ratio, dtype=dtype)
        self.norm2 = ChannelLayerNorm(channels, dtype=dtype)
        self.ffn = ConvFeedForward(rng, channels, config.expansion,
                                   config.ffn_kernel, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn.forward(self.norm1.forward(x))
        return x + self.ffn.body(self.norm2.forward(x))


class Downsample(Module):
    """Pixel-unshuffle by 2, then a 1x1 conv from 4*C_in to C_out."""

    def __init__(self, rng, c_in: int, c_out: int, dtype: str = "f32"):
        self.proj = Conv2d(rng, 4 * c_in, c_out, 1, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.proj.forward(pixel_unshuffle(x, 2))


class Upsample(Module):
    """1x1 conv from C_in to 4*C_out, then pixel-shuffle by 2."""

    def __init__(self, rng, c_in: int, c_out: int, dtype: str = "f32"):
        self.proj = Conv2d(rng, c_in, 4 * c_out, 1, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return pixel_shuffle(self.proj.forward(x), 2)


class MARNet(Module):
    """The end-to-end restorer: encoder levels, bottleneck, decoder, residual add."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype: str = "f32"):
        rng = np.random.default_rng(seed)
        plans = level_plans(config)
        chans = [p.channels for p in plans]
        self.config = config
        self.dtype = dtype
        self.intro = Conv2d(rng, 1, chans[0], 3, bias=True, dtype=dtype)
        self.enc1 = self._blocks(rng, plans[0], config, dtype)
        self.down1 = Downsample(rng, chans[0], chans[1], dtype=dtype)
        self.enc2 = self._blocks(rng, plans[1], config, dtype)
        self.down2 = Downsample(rng, chans[1], chans[2], dtype=dtype)
        self.enc3 = self._blocks(rng, plans[2], config, dtype)
        self.down3 = Downsample(rng, chans[2], chans[3], dtype=dtype)
        self.bottleneck = self._blocks(rng, plans[3], config, dtype)
        self.up3 = Upsample(rng, chans[3], chans[2], dtype=dtype)
        self.reduce3 = Conv2d(rng, 2 * chans[2], chans[2], 1, dtype=dtype)
        self.dec3 = self._blocks(rng, plans[2], config, dtype)
        self.up2 = Upsample(rng, chans[2], chans[1], dtype=dtype)
        self.reduce2 = Conv2d(rng, 2 * chans[1], chans[1], 1, dtype=dtype)
        self.dec2 = self._blocks(rng, plans[1], config, dtype)
        self.up1 = Upsample(rng, chans[1], chans[0], dtype=dtype)
        self.reduce1 = Conv2d(rng, 2 * chans[0], chans[0], 1, dtype=dtype)
        self.dec1 = self._blocks(rng, plans[0], config, dtype)
        # zeroed head: the untrained network adds a zero residual
        self.outro = Conv2d(rng, chans[0], 1, 3, bias=True, zero_init=True, dtype=dtype)

    @staticmethod
    def _blocks(rng, plan: LevelPlan, config: ModelConfig, dtype: str) -> list:
        return [TransformerBlock(rng, plan.channels, plan.heads, config, dtype)
                for _ in range(plan.blocks)]

    @staticmethod
    def _run(blocks: list, x: Tensor) -> Tensor:
        for block in blocks:
            x = block.forward(x)
        return x

    def forward(self, image: Tensor) -> Tensor:
        """Restore a slice; accepts (1,H,W) or (N,1,H,W) with H, W divisible by 8."""
        if image.ndim not in (3, 4) or image.shape[-3] != 1:
            raise ShapeError(f"expected (1,H,W) or (N,1,H,W), got {image.shape}")
        h, w = image.shape[-2:]
        if h % 8 or w % 8:
            raise ShapeError(f"spatial extents {h}x{w} must be divisible by 8")
        x = self.intro.forward(image)
        e1 = self._run(self.enc1, x)
        e2 = self._run(self.enc2, self.down1.forward(e1))
        e3 = self._run(self.enc3, self.down2.forward(e2))
        b = self._run(self.bottleneck, self.down3.forward(e3))
        d3 = concat([self.up3.forward(b), e3], axis=-3)
        d3 = self._run(self.dec3, self.reduce3.forward(d3))
        d2 = concat([self.up2.forward(d3), e2], axis=-3)
        d2 = self._run(self.dec2, self.reduce2.forward(d2))
        d1 = concat([self.up1.forward(d2), e1], axis=-3)
        d1 = self._run(self.dec1, self.reduce1.forward(d1))
        residual = self.outro.forward(d1)
        return image + residual

    def param_dict(self) -> dict:
        return dict(self.named_params())


def build_model(config: ModelConfig, seed: int = 0, dtype: str = "f32") -> MARNet:
    return MARNet(config, seed=seed, dtype=dtype)


# -- checkpoints ------------------------------------------------------------------


def save_checkpoint(model: MARNet, path: Union[str, Path]) -> None:
    """Write config, a tensor manifest and the MTSR1-encoded parameters."""
    entries = []
    blobs = []
    offset = 0
    import io as _io
    for name, t in model.named_params():
        buf = _io.BytesIO()
        n = tio.write_tensor(buf, t.data)
        entries.append({"name": name, "offset": offset,
                        "shape": list(t.shape), "dtype": t.dtype_name})
        blobs.append(buf.getvalue())
        offset += n
    header = {
        "config": model.config.to_dict(),
        "dtype": model.dtype,
        "manifest": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<BI", CKPT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: Union[str, Path],
                    expect_config: Optional[ModelConfig] = None) -> MARNet:
    """Rebuild a model from a checkpoint, bit-exactly.

    If ``expect_config`` is given it must equal the embedded config.
    """
    with open(path, "rb") as fh:
        head = fh.read(9)
        if len(head) != 9 or head[:4] != CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, header_len = struct.unpack("<BI", head[4:])
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
        try:
            config = ModelConfig.from_dict(header["config"])
        except (KeyError, TypeError, ConfigError) as exc:
            raise CheckpointError(f"{path}: bad embedded config ({exc})") from exc
        if expect_config is not None and config != expect_config:
            raise CheckpointError(f"{path}: checkpoint config does not match the "
                                  f"requested config")
        model = build_model(config, seed=0, dtype=header.get("dtype", "f32"))
        params = model.param_dict()
        names_found = set()
        payload_start = 9 + header_len
        for entry in header["manifest"]:
            name = entry["name"]
            if name not in params:
                raise CheckpointError(f"{path}: unknown parameter {name!r}")
            fh.seek(payload_start + entry["offset"])
            try:
                arr = tio.read_tensor(fh)
            except tio.FormatError as exc:
                raise CheckpointError(f"{path}: corrupt tensor {name!r} ({exc})") from exc
            if list(arr.shape) != entry["shape"] or tuple(arr.shape) != params[name].shape:
                raise CheckpointError(f"{path}: shape mismatch for {name!r}")
            params[name].data = np.ascontiguousarray(arr, dtype=params[name].data.dtype)
            names_found.add(name)
        missing = set(params) - names_found
        if missing:
            raise CheckpointError(f"{path}: missing parameters {sorted(missing)[:3]}...")
    return model


def export_config_text(config: ModelConfig) -> str:
    """Key-value structured text form of a config."""
    lines = [f"{key} = {value}" for key, value in sorted(config.to_dict().items())]
    return "\n".join(lines) + "\n"
