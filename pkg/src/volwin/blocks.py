"""Transformer blocks: windowed attention plus interchangeable feed-forwards.

Three token-mixing variants share one block skeleton:

* ``inception``: four parallel convolutional branches over the token volume
  (pointwise, effective 3x3x3, effective 5x5x5 via two stacked 3x3x3, and
  average-pool + pointwise), concatenated and projected back to C channels.
  The wider branches are bottlenecked to C/8 channels first.
* ``mlp``: the plain two-linear inverted bottleneck.
* ``depthwise``: the mlp with two depth-wise 3x3x3 conv/BN/GELU stages
  between the linears.

With branch widths (4C, 0, 0, 0) and identity batch norm the inception
variant collapses exactly onto the ratio-4 mlp.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import WindowAttention, WindowSpec, tokens_to_volume, volume_to_tokens, w_mhsa
from .errors import ConfigError
from .kernels import avg_pool3d, gelu
from .nn import BatchNorm3d, Conv3d, DepthwiseConv3d, LayerNorm, Linear, Module
from .tensor import Tensor, concat


@dataclass(frozen=True)
class BranchWidths:
    """Output channels of the four feed-forward branches.

    A branch with width 0 is omitted entirely. The 3x3x3 and 5x5x5 branches
    run through a pointwise bottleneck of ``max(1, floor(C * bottleneck_ratio))``
    channels before their spatial convolutions.
    """

    b1: int
    b3: int
    b5: int
    bp: int
    bottleneck_ratio: float = 0.125

    def __post_init__(self):
        if self.b1 + self.b3 + self.b5 + self.bp <= 0:
            raise ConfigError("at least one feed-forward branch must have nonzero width")

    @property
    def total(self) -> int:
        return self.b1 + self.b3 + self.b5 + self.bp

    def bottleneck(self, dim: int) -> int:
        return max(1, int(dim * self.bottleneck_ratio))


def branch_widths_for(dim: int, weights, ratio: float, bottleneck_ratio: float = 0.125) -> BranchWidths:
    """Split a total width of ``ratio * dim`` over the four branches
    proportionally to ``weights`` (floored per branch)."""
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (4,) or weights.sum() <= 0:
        raise ConfigError(f"branch weights must be 4 nonnegative values, got {weights}")
    total = ratio * dim
    dims = [int(total * wt / weights.sum()) for wt in weights]
    return BranchWidths(*dims, bottleneck_ratio=bottleneck_ratio)


class ConvBlock(Module):
    """Shape-preserving conv (stride 1, no dilation) + batch norm + GELU."""

    def __init__(self, cin, cout, k, rng, dtype=np.float64):
        super().__init__()
        if k % 2 == 0:
            raise ConfigError(f"conv block kernel must be odd to preserve shape, got {k}")
        self.conv = Conv3d(cin, cout, k, rng, stride=1, padding=(k - 1) // 2, dtype=dtype)
        self.bn = BatchNorm3d(cout, dtype=dtype)

    def forward(self, x):
        return gelu(self.bn(self.conv(x)))


class InceptionFF(Module):
    def __init__(self, dim, widths: BranchWidths, rng, dtype=np.float64):
        super().__init__()
        self.dim = dim
        self.widths = widths
        m = widths.bottleneck(dim)
        if widths.b1:
            self.branch1 = [ConvBlock(dim, widths.b1, 1, rng, dtype)]
        if widths.b3:
            self.branch3 = [ConvBlock(dim, m, 1, rng, dtype), ConvBlock(m, widths.b3, 3, rng, dtype)]
        if widths.b5:
            self.branch5 = [
                ConvBlock(dim, m, 1, rng, dtype),
                ConvBlock(m, m, 3, rng, dtype),
                ConvBlock(m, widths.b5, 3, rng, dtype),
            ]
        if widths.bp:
            self.branch_pool = [ConvBlock(dim, widths.bp, 1, rng, dtype)]
        self.fc = Linear(widths.total, dim, rng, dtype=dtype)

    def forward(self, u: Tensor, dims) -> Tensor:
        v = tokens_to_volume(u, dims)
        outs = []
        if self.widths.b1:
            outs.append(self.branch1[0](v))
        if self.widths.b3:
            h = v
            for blk in self.branch3:
                h = blk(h)
            outs.append(h)
        if self.widths.b5:
            h = v
            for blk in self.branch5:
                h = blk(h)
            outs.append(h)
        if self.widths.bp:
            outs.append(self.branch_pool[0](avg_pool3d(v, 3, 1, 1)))
        cat = outs[0] if len(outs) == 1 else concat(outs, axis=1)
        return self.fc(volume_to_tokens(cat))


class MlpFF(Module):
    def __init__(self, dim, ratio, rng, dtype=np.float64):
        super().__init__()
        if ratio <= 0:
            raise ConfigError(f"mlp ratio must be positive, got {ratio}")
        hidden = int(round(ratio * dim))
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype=dtype)

    def forward(self, u: Tensor, dims=None) -> Tensor:
        return self.fc2(gelu(self.fc1(u)))


class DepthwiseFF(Module):
    def __init__(self, dim, ratio, rng, dtype=np.float64):
        super().__init__()
        if ratio <= 0:
            raise ConfigError(f"mlp ratio must be positive, got {ratio}")
        hidden = int(round(ratio * dim))
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.dw1 = DepthwiseConv3d(hidden, 3, rng, dtype=dtype)
        self.bn1 = BatchNorm3d(hidden, dtype=dtype)
        self.dw2 = DepthwiseConv3d(hidden, 3, rng, dtype=dtype)
        self.bn2 = BatchNorm3d(hidden, dtype=dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype=dtype)

    def forward(self, u: Tensor, dims) -> Tensor:
        h = self.fc1(u)
        v = tokens_to_volume(h, dims)
        v = gelu(self.bn1(self.dw1(v)))
        v = gelu(self.bn2(self.dw2(v)))
        return self.fc2(volume_to_tokens(v))


def make_ff(kind: str, dim: int, rng, widths: BranchWidths | None = None, ratio: float = 4.0, dtype=np.float64):
    if kind == "inception":
        if widths is None:
            widths = BranchWidths(dim, dim, dim, dim)
        return InceptionFF(dim, widths, rng, dtype)
    if kind == "mlp":
        return MlpFF(dim, ratio, rng, dtype)
    if kind == "depthwise":
        return DepthwiseFF(dim, ratio, rng, dtype)
    raise ConfigError(f"unknown feed-forward kind {kind!r}")


class TransformerBlock(Module):
    """Pre-norm windowed-attention block with a pluggable feed-forward.

    Forward on tokens x with volume dims (D, H, W):
        z = w_mhsa(LN(x)) + x
        y = ff(LN(z)) + z
    """

    def __init__(self, dim, heads, window, shift, ff_kind, rng,
                 widths=None, ratio=4.0, use_rel_bias=True, dtype=np.float64):
        super().__init__()
        self.spec = WindowSpec(window, shift)
        self.ln1 = LayerNorm(dim, dtype=dtype)
        self.attn = WindowAttention(dim, heads, window, rng, use_rel_bias=use_rel_bias, dtype=dtype)
        self.ln2 = LayerNorm(dim, dtype=dtype)
        self.ff = make_ff(ff_kind, dim, rng, widths=widths, ratio=ratio, dtype=dtype)

    def forward(self, x: Tensor, dims) -> Tensor:
        h = tokens_to_volume(self.ln1(x), dims)
        h = volume_to_tokens(w_mhsa(h, self.attn, self.spec))
        z = h + x
        return self.ff(self.ln2(z), dims) + z
