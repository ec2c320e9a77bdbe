"""Patch embedding, transformer stages, patch merging, and feature taps.

The encoder halves resolution once at the patch embedding, then runs four
stages of blocks. A merge between stages shrinks the volume 8x while
doubling channels. The feature pyramid handed to the decoder depends on the
decoder wiring:

* ``premerge``: taps are stage outputs *before* merging, so the ladder is
  l0 (embed, C @ /2), l1 (C @ /2), l2 (2C @ /4), l3 (4C @ /8), l4 (8C @ /16)
  and there is no merge after the last stage (3 merges total).
* ``postmerge``: taps follow each stage's trailing merge (4 merges), giving
  l0 (C @ /2), l1 (2C @ /4), l2 (4C @ /8), l3 (8C @ /16), l4 (16C @ /32).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import tokens_to_volume, volume_to_tokens
from .blocks import TransformerBlock, branch_widths_for
from .errors import ConfigError, ShapeError
from .nn import Conv3d, LayerNorm, Linear, Module
from .tensor import Tensor, concat

FF_KINDS = ("inception", "mlp", "depthwise")
MERGE_KINDS = ("linear", "conv")
DECODER_KINDS = ("premerge", "postmerge")


@dataclass
class ModelConfig:
    """Every architectural hyperparameter of the segmentation model."""

    in_channels: int = 1
    base_dim: int = 48
    depths: tuple = (2, 2, 2, 2)
    heads: tuple = (3, 6, 12, 24)
    window: int = 4
    ff_kind: str = "inception"
    branch_weights: tuple = (1.0, 1.0, 1.0, 1.0)
    bottleneck_ratio: float = 0.125
    mlp_ratio: float = 4.0
    merge_kind: str = "conv"
    decoder_kind: str = "premerge"
    num_classes: int = 14
    use_rel_bias: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        if self.ff_kind not in FF_KINDS:
            raise ConfigError(f"ff_kind must be one of {FF_KINDS}, got {self.ff_kind!r}")
        if self.merge_kind not in MERGE_KINDS:
            raise ConfigError(f"merge_kind must be one of {MERGE_KINDS}, got {self.merge_kind!r}")
        if self.decoder_kind not in DECODER_KINDS:
            raise ConfigError(f"decoder_kind must be one of {DECODER_KINDS}, got {self.decoder_kind!r}")
        if len(self.depths) != 4 or len(self.heads) != 4:
            raise ConfigError("depths and heads must have one entry per stage (4)")
        for i, h in enumerate(self.heads):
            if self.stage_dim(i) % h:
                raise ConfigError(f"stage {i} channels {self.stage_dim(i)} not divisible by heads {h}")
        if self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")

    def stage_dim(self, i: int) -> int:
        return self.base_dim * 2**i

    def stage_widths(self, i: int):
        return branch_widths_for(self.stage_dim(i), self.branch_weights, self.mlp_ratio, self.bottleneck_ratio)

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def num_merges(self) -> int:
        return 4 if self.decoder_kind == "postmerge" else 3


@dataclass
class FeaturePyramid:
    """Multi-scale encoder outputs consumed by the decoder, shallow to deep."""

    levels: list = field(default_factory=list)

    def __getitem__(self, i):
        return self.levels[i]

    def __len__(self):
        return len(self.levels)

    @property
    def shapes(self):
        return [lv.shape for lv in self.levels]


class PatchEmbed(Module):
    """Strided conv turning raw voxels into the first token volume: kernel 2,
    stride 2, no activation, no norm. Halves every spatial extent."""

    def __init__(self, in_channels, dim, rng, dtype=np.float64):
        super().__init__()
        self.proj = Conv3d(in_channels, dim, 2, rng, stride=2, padding=0, dtype=dtype)

    def forward(self, x):
        d, h, w = x.shape[2:]
        if d % 2 or h % 2 or w % 2:
            raise ShapeError(f"patch embedding needs even extents, got {(d, h, w)}")
        return self.proj(x)


class PatchMergeLinear(Module):
    """Swin-style merge: gather 2x2x2 neighborhoods into 8C tokens, layer
    norm, then a linear reduction to 2C."""

    def __init__(self, dim, rng, dtype=np.float64):
        super().__init__()
        self.norm = LayerNorm(8 * dim, dtype=dtype)
        self.reduction = Linear(8 * dim, 2 * dim, rng, dtype=dtype)

    def forward(self, x):
        n, c, d, h, w = x.shape
        if d % 2 or h % 2 or w % 2:
            raise ShapeError(f"merge needs even extents, got {(d, h, w)}")
        # Strided gather: every second voxel starting at each parity offset.
        gathered = []
        for pd in range(2):
            for ph in range(2):
                for pw in range(2):
                    gathered.append(_stride2(x, pd, ph, pw))
        vol = concat(gathered, axis=1)
        tokens = volume_to_tokens(vol)
        tokens = self.reduction(self.norm(tokens))
        return tokens_to_volume(tokens, (d // 2, h // 2, w // 2))


def _stride2(x: Tensor, pd: int, ph: int, pw: int) -> Tensor:
    from .tensor import make_op

    sel = (slice(None), slice(None), slice(pd, None, 2), slice(ph, None, 2), slice(pw, None, 2))
    shape = x.shape

    def backward(g, needs):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[sel] = g
        return (gx,)

    return make_op("stride2", x.data[sel].copy(), (x,), backward)


class PatchMergeConv(Module):
    """Overlapping strided conv merge: kernel 3, stride 2, pad 1, C -> 2C,
    followed by a token layer norm."""

    def __init__(self, dim, rng, dtype=np.float64):
        super().__init__()
        self.reduction = Conv3d(dim, 2 * dim, 3, rng, stride=2, padding=1, dtype=dtype)
        self.norm = LayerNorm(2 * dim, dtype=dtype)

    def forward(self, x):
        n, c, d, h, w = x.shape
        if d % 2 or h % 2 or w % 2:
            raise ShapeError(f"merge needs even extents, got {(d, h, w)}")
        y = self.reduction(x)
        tokens = self.norm(volume_to_tokens(y))
        return tokens_to_volume(tokens, (d // 2, h // 2, w // 2))


def make_merge(kind, dim, rng, dtype=np.float64):
    return PatchMergeLinear(dim, rng, dtype) if kind == "linear" else PatchMergeConv(dim, rng, dtype)


class Stage(Module):
    """A run of transformer blocks at one resolution; even-indexed blocks use
    shift 0, odd-indexed blocks shift by half a window."""

    def __init__(self, dim, depth, heads, config: ModelConfig, rng):
        super().__init__()
        dtype = config.np_dtype
        self.blocks = [
            TransformerBlock(
                dim,
                heads,
                config.window,
                shift=0 if j % 2 == 0 else config.window // 2,
                ff_kind=config.ff_kind,
                rng=rng,
                widths=branch_widths_for(dim, config.branch_weights, config.mlp_ratio, config.bottleneck_ratio)
                if config.ff_kind == "inception"
                else None,
                ratio=config.mlp_ratio,
                use_rel_bias=config.use_rel_bias,
                dtype=dtype,
            )
            for j in range(depth)
        ]

    def forward(self, tokens, dims):
        for blk in self.blocks:
            tokens = blk(tokens, dims)
        return tokens


class Encoder(Module):
    """Patch embedding, four stages, merges, and multi-scale feature taps."""

    def __init__(self, config: ModelConfig, rng):
        super().__init__()
        self.config = config
        dtype = config.np_dtype
        c0 = config.base_dim
        self.embed = PatchEmbed(config.in_channels, c0, rng, dtype)
        self.stages = [
            Stage(config.stage_dim(i), config.depths[i], config.heads[i], config, rng) for i in range(4)
        ]
        self.merges = [
            make_merge(config.merge_kind, config.stage_dim(i), rng, dtype) for i in range(config.num_merges)
        ]

    def forward(self, x: Tensor) -> FeaturePyramid:
        d, h, w = x.shape[2:]
        need = 32
        if d % need or h % need or w % need:
            raise ShapeError(f"encoder input extents {(d, h, w)} must be multiples of {need}")
        post = self.config.decoder_kind == "postmerge"
        vol = self.embed(x)
        levels = [vol]
        dims = vol.shape[2:]
        tokens = volume_to_tokens(vol)
        for i in range(4):
            tokens = self.stages[i](tokens, dims)
            if post:
                tokens = _apply_merge(self.merges[i], tokens, dims)
                dims = tuple(e // 2 for e in dims)
                levels.append(tokens_to_volume(tokens, dims))
            else:
                levels.append(tokens_to_volume(tokens, dims))
                if i < 3:
                    tokens = _apply_merge(self.merges[i], tokens, dims)
                    dims = tuple(e // 2 for e in dims)
        return FeaturePyramid(levels)


def _apply_merge(merge, tokens, dims):
    vol = tokens_to_volume(tokens, dims)
    return volume_to_tokens(merge(vol))
