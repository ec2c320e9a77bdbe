"""3D window partitioning, cyclic shifting, masking, and windowed attention.

Feature maps are padded up to window multiples before partitioning; when a
map is no larger than the window along its smallest axis the window shrinks
to that extent and shifting is disabled (a single window has nothing to
shift against). Cross-window contamination after a cyclic shift is blocked
by an additive mask of large negative values built from region labels.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import Linear, Module, trunc_normal
from .tensor import Tensor, concat, narrow, pad_nd, reshape, roll, softmax, take_rows, transpose

MASK_VALUE = -1e9


@dataclass(frozen=True)
class WindowSpec:
    """Cubic window edge and per-axis cyclic shift (0 <= shift < window)."""

    window: int
    shift: int = 0

    def __post_init__(self):
        if not 0 <= self.shift < self.window:
            raise ConfigError(f"shift {self.shift} must lie in [0, window {self.window})")


def effective_spec(spec: WindowSpec, dims) -> WindowSpec:
    """Shrink the window to the smallest extent and drop the shift when the
    map does not exceed the window."""
    m = min(dims)
    if m <= spec.window:
        return WindowSpec(window=m, shift=0)
    return spec


def volume_to_tokens(x: Tensor) -> Tensor:
    """[N, C, D, H, W] -> [N, T, C] with T = D*H*W (D-major ordering)."""
    n, c = x.shape[0], x.shape[1]
    t = x.shape[2] * x.shape[3] * x.shape[4]
    return transpose(reshape(x, (n, c, t)), (0, 2, 1))


def tokens_to_volume(x: Tensor, dims) -> Tensor:
    """[N, T, C] -> [N, C, D, H, W]; T must equal D*H*W."""
    d, h, w = dims
    n, t, c = x.shape
    if t != d * h * w:
        raise ShapeError(f"token count {t} does not match volume {dims}")
    return reshape(transpose(x, (0, 2, 1)), (n, c, d, h, w))


def window_partition(x: Tensor, window: int) -> Tensor:
    """[N, C, D, H, W] -> [N*nw, window**3, C]; extents must divide."""
    n, c, d, h, w = x.shape
    if d % window or h % window or w % window:
        raise ShapeError(f"extents {(d, h, w)} not divisible by window {window}")
    nd, nh, nw_ = d // window, h // window, w // window
    x = transpose(x, (0, 2, 3, 4, 1))
    x = reshape(x, (n, nd, window, nh, window, nw_, window, c))
    x = transpose(x, (0, 1, 3, 5, 2, 4, 6, 7))
    return reshape(x, (n * nd * nh * nw_, window**3, c))


def window_reverse(windows: Tensor, window: int, dims, batch: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    d, h, w = dims
    nd, nh, nw_ = d // window, h // window, w // window
    c = windows.shape[-1]
    x = reshape(windows, (batch, nd, nh, nw_, window, window, window, c))
    x = transpose(x, (0, 1, 4, 2, 5, 3, 6, 7))
    x = reshape(x, (batch, d, h, w, c))
    return transpose(x, (0, 4, 1, 2, 3))


def cyclic_shift(x: Tensor, shift: int, reverse: bool = False) -> Tensor:
    """Circular roll of the three spatial axes by -shift (or +shift back)."""
    if shift == 0:
        return x
    s = shift if reverse else -shift
    return roll(x, (s, s, s), (2, 3, 4))


@lru_cache(maxsize=64)
def build_attention_mask(dims, window: int, shift: int) -> np.ndarray:
    """[nw, window**3, window**3] additive mask: 0 where two window positions
    originate from the same pre-shift region, MASK_VALUE otherwise."""
    d, h, w = dims
    t = window**3
    nw_ = (d // window) * (h // window) * (w // window)
    if shift == 0:
        return np.zeros((nw_, t, t))
    labels = np.zeros((d, h, w))
    bounds = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    cnt = 0
    for sd in bounds:
        for sh in bounds:
            for sw in bounds:
                labels[sd, sh, sw] = cnt
                cnt += 1
    lab = np.ascontiguousarray(
        labels.reshape(d // window, window, h // window, window, w // window, window).transpose(0, 2, 4, 1, 3, 5)
    ).reshape(nw_, t)
    mask = np.where(lab[:, :, None] != lab[:, None, :], MASK_VALUE, 0.0)
    mask.setflags(write=False)
    return mask


@lru_cache(maxsize=16)
def relative_position_index(window: int) -> np.ndarray:
    """[window**3, window**3] lookup into a (2w-1)**3 offset table."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), np.arange(window), indexing="ij"))
    flat = coords.reshape(3, -1)
    rel = flat[:, :, None] - flat[:, None, :]
    rel = rel + (window - 1)
    span = 2 * window - 1
    idx = rel[0] * span * span + rel[1] * span + rel[2]
    idx.setflags(write=False)
    return idx


class WindowAttention(Module):
    """Multi-head scaled dot-product attention inside local 3D windows,
    with an optional learned relative position bias."""

    def __init__(self, dim, heads, window, rng, qkv_bias=True, use_rel_bias=True, dtype=np.float64):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"channels {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.window = window
        self.scale = (dim // heads) ** -0.5
        self.qkv = Linear(dim, 3 * dim, rng, bias=qkv_bias, dtype=dtype)
        self.proj = Linear(dim, dim, rng, dtype=dtype)
        self.use_rel_bias = use_rel_bias
        if use_rel_bias:
            span = 2 * window - 1
            self.rel_bias_table = Tensor(trunc_normal(rng, (span**3, heads), 0.02, dtype), requires_grad=True)

    def _bias(self, wsize: int) -> Tensor:
        """[heads, T, T] bias gathered for an effective window size <= window."""
        idx = relative_position_index(wsize)
        if wsize < self.window:
            # Re-express offsets of the smaller window in the full table.
            span_s, span_f = 2 * wsize - 1, 2 * self.window - 1
            od, rem = np.divmod(idx, span_s * span_s)
            oh, ow = np.divmod(rem, span_s)
            shift = self.window - wsize
            idx = (od + shift) * span_f * span_f + (oh + shift) * span_f + (ow + shift)
        t = wsize**3
        bias = take_rows(self.rel_bias_table, idx.reshape(-1))
        return transpose(reshape(bias, (t, t, self.heads)), (2, 0, 1))

    def forward(self, windows: Tensor, wsize: int, mask: np.ndarray | None = None) -> Tensor:
        bw, t, c = windows.shape
        h = self.heads
        qkv = self.qkv(windows)
        qkv = transpose(reshape(qkv, (bw, t, 3, h, c // h)), (2, 0, 3, 1, 4))
        q = reshape(narrow(qkv, 0, 0, 1), (bw, h, t, c // h))
        k = reshape(narrow(qkv, 0, 1, 1), (bw, h, t, c // h))
        v = reshape(narrow(qkv, 0, 2, 1), (bw, h, t, c // h))
        scores = (q * self.scale) @ transpose(k, (0, 1, 3, 2))
        if self.use_rel_bias:
            scores = scores + reshape(self._bias(wsize), (1, h, t, t))
        if mask is not None:
            nw_ = mask.shape[0]
            scores = reshape(scores, (bw // nw_, nw_, h, t, t))
            scores = scores + Tensor(mask[None, :, None, :, :].astype(scores.dtype))
            scores = reshape(scores, (bw, h, t, t))
        attn = softmax(scores, axis=-1)
        out = attn @ v
        out = reshape(transpose(out, (0, 2, 1, 3)), (bw, t, c))
        return self.proj(out)


def w_mhsa(x: Tensor, attn: WindowAttention, spec: WindowSpec) -> Tensor:
    """Shape-preserving windowed attention over a volume.

    Pipeline: pad to window multiples, cyclic shift (if shifted), partition,
    per-window attention with mask and bias, merge, reverse shift, unpad.
    """
    n, c, d, h, w = x.shape
    eff = effective_spec(spec, (d, h, w))
    ws, s = eff.window, eff.shift
    pads = [(0, (ws - e % ws) % ws) for e in (d, h, w)]
    if any(p[1] for p in pads):
        x = pad_nd(x, [(0, 0), (0, 0)] + pads)
    dp, hp, wp = x.shape[2:]
    if s > 0:
        x = cyclic_shift(x, s)
        mask = build_attention_mask((dp, hp, wp), ws, s)
    else:
        mask = None
    wins = window_partition(x, ws)
    wins = attn(wins, ws, mask)
    x = window_reverse(wins, ws, (dp, hp, wp), n)
    if s > 0:
        x = cyclic_shift(x, s, reverse=True)
    if (dp, hp, wp) != (d, h, w):
        x = narrow(narrow(narrow(x, 2, 0, d), 3, 0, h), 4, 0, w)
    return x
