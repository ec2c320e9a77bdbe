"""UNet-style decoders over the encoder's feature pyramid.

Two wirings share the same residual and upsampling blocks:

* ``premerge``: consumes pre-merge taps (deepest at 8C @ /16). Skip blocks
  double the tap channels; the deepest decode stream therefore starts at
  16C. The l0 and l1 taps share the /2 resolution, so the l0 step uses a
  pointwise (kernel 1) projection instead of an upsampling transposed conv.
* ``postmerge``: consumes post-merge taps (deepest at 16C @ /32), mirrors
  the classic UNETR-style wiring: skip blocks keep tap channels, the /16
  tap is concatenated raw, and every decode step upsamples.

Both end with one more upsample to full resolution, concatenation with a
residual stem over the raw input, a final residual block, and a pointwise
head producing per-class logits (no softmax).
"""

from __future__ import annotations

import numpy as np

from .encoder import Encoder, FeaturePyramid, ModelConfig
from .errors import ShapeError
from .nn import Conv3d, ConvTranspose3d, InstanceNorm3d, Module, PReLU
from .tensor import Tensor, concat, narrow, pad_nd


class ResidualBlock(Module):
    """conv3x3x3 -> IN -> PReLU -> conv3x3x3 -> IN, plus a residual path
    (pointwise conv + IN projection when channels change), then PReLU."""

    def __init__(self, cin, cout, rng, dtype=np.float64):
        super().__init__()
        self.conv1 = Conv3d(cin, cout, 3, rng, stride=1, padding=1, dtype=dtype)
        self.norm1 = InstanceNorm3d(cout, dtype=dtype)
        self.act1 = PReLU(cout, dtype=dtype)
        self.conv2 = Conv3d(cout, cout, 3, rng, stride=1, padding=1, dtype=dtype)
        self.norm2 = InstanceNorm3d(cout, dtype=dtype)
        if cin != cout:
            self.proj = Conv3d(cin, cout, 1, rng, dtype=dtype)
            self.proj_norm = InstanceNorm3d(cout, dtype=dtype)
        else:
            self.proj = None
        self.act_out = PReLU(cout, dtype=dtype)

    def forward(self, x):
        h = self.act1(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        skip = x if self.proj is None else self.proj_norm(self.proj(x))
        return self.act_out(h + skip)


class UpsampleBlock(Module):
    """Transposed conv (kernel == stride) + IN + PReLU. Kernel 2 doubles all
    spatial extents; kernel 1 is a pointwise projection at equal resolution."""

    def __init__(self, cin, cout, rng, k=2, dtype=np.float64):
        super().__init__()
        self.up = ConvTranspose3d(cin, cout, k, rng, dtype=dtype)
        self.norm = InstanceNorm3d(cout, dtype=dtype)
        self.act = PReLU(cout, dtype=dtype)

    def forward(self, x):
        return self.act(self.norm(self.up(x)))


class Decoder(Module):
    def __init__(self, config: ModelConfig, rng):
        super().__init__()
        self.kind = config.decoder_kind
        dtype = config.np_dtype
        c0 = config.base_dim
        if self.kind == "premerge":
            db = 2 * c0
            self.stem = ResidualBlock(config.in_channels, db, rng, dtype)
            self.skips = [
                ResidualBlock(c0, db, rng, dtype),        # l0
                ResidualBlock(c0, db, rng, dtype),        # l1
                ResidualBlock(2 * c0, 2 * db, rng, dtype),  # l2
                ResidualBlock(4 * c0, 4 * db, rng, dtype),  # l3
                ResidualBlock(8 * c0, 8 * db, rng, dtype),  # l4
            ]
            self.ups = [
                UpsampleBlock(8 * db, 4 * db, rng, 2, dtype),  # /16 -> /8
                UpsampleBlock(4 * db, 2 * db, rng, 2, dtype),  # /8 -> /4
                UpsampleBlock(2 * db, db, rng, 2, dtype),      # /4 -> /2
                UpsampleBlock(db, db, rng, 1, dtype),          # /2 (l0 step, no resize)
                UpsampleBlock(db, db, rng, 2, dtype),          # /2 -> /1
            ]
            self.fuses = [
                ResidualBlock(8 * db, 4 * db, rng, dtype),
                ResidualBlock(4 * db, 2 * db, rng, dtype),
                ResidualBlock(2 * db, db, rng, dtype),
                ResidualBlock(2 * db, db, rng, dtype),
                ResidualBlock(2 * db, db, rng, dtype),
            ]
            self.head = Conv3d(db, config.num_classes, 1, rng, dtype=dtype)
        else:
            f = c0
            self.stem = ResidualBlock(config.in_channels, f, rng, dtype)
            self.skips = [
                ResidualBlock(f, f, rng, dtype),            # t0
                ResidualBlock(2 * f, 2 * f, rng, dtype),    # t1
                ResidualBlock(4 * f, 4 * f, rng, dtype),    # t2
                None,                                        # t3 concatenated raw
                ResidualBlock(16 * f, 16 * f, rng, dtype),  # t4
            ]
            self.ups = [
                UpsampleBlock(16 * f, 8 * f, rng, 2, dtype),  # /32 -> /16
                UpsampleBlock(8 * f, 4 * f, rng, 2, dtype),   # /16 -> /8
                UpsampleBlock(4 * f, 2 * f, rng, 2, dtype),   # /8 -> /4
                UpsampleBlock(2 * f, f, rng, 2, dtype),       # /4 -> /2
                UpsampleBlock(f, f, rng, 2, dtype),           # /2 -> /1
            ]
            self.fuses = [
                ResidualBlock(16 * f, 8 * f, rng, dtype),
                ResidualBlock(8 * f, 4 * f, rng, dtype),
                ResidualBlock(4 * f, 2 * f, rng, dtype),
                ResidualBlock(2 * f, f, rng, dtype),
                ResidualBlock(2 * f, f, rng, dtype),
            ]
            self.head = Conv3d(f, config.num_classes, 1, rng, dtype=dtype)

    def forward(self, pyramid: FeaturePyramid, raw: Tensor) -> Tensor:
        if len(pyramid) != 5:
            raise ShapeError(f"expected a 5-level pyramid, got {len(pyramid)} levels")
        x = self.skips[4](pyramid[4])
        for step, i in enumerate((3, 2, 1, 0)):
            x = self.ups[step](x)
            tap = pyramid[i]
            skip = tap if self.skips[i] is None else self.skips[i](tap)
            x = self.fuses[step](concat([x, skip], axis=1))
        x = self.ups[4](x)
        x = self.fuses[4](concat([x, self.stem(raw)], axis=1))
        return self.head(x)


class SegModel(Module):
    """Encoder + decoder with padding bookkeeping.

    Inputs of arbitrary spatial size are zero-padded up to multiples of 32
    and the logits are cropped back, so output resolution always equals
    input resolution.
    """

    PAD_MULTIPLE = 32

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.config = config
        self.encoder = Encoder(config, rng)
        self.decoder = Decoder(config, rng)

    def forward(self, x: Tensor) -> Tensor:
        d, h, w = x.shape[2:]
        m = self.PAD_MULTIPLE
        pads = [(0, (m - e % m) % m) for e in (d, h, w)]
        if any(p[1] for p in pads):
            x = pad_nd(x, [(0, 0), (0, 0)] + pads)
        pyramid = self.encoder(x)
        logits = self.decoder(pyramid, x)
        if logits.shape[2:] != (d, h, w):
            logits = narrow(narrow(narrow(logits, 2, 0, d), 3, 0, h), 4, 0, w)
        return logits
