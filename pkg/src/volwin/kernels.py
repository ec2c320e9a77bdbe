"""Volumetric numerical kernels with hand-written backward rules.

Layout conventions: volumes are ``[N, C, D, H, W]`` and token sequences are
``[N, T, C]``. Convolutions use cross-correlation semantics with zero
padding; the average pool divides by the number of in-bounds voxels so the
result stays mean-preserving at borders.

Forward passes are written as a loop over kernel offsets: each offset
contributes one strided slice of the (padded) input times one ``[Cout,
Cin]`` weight slab, which maps onto a batched matmul. The same trick runs
the backward passes without scatter indexing.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ShapeError
from .tensor import Tensor, make_op

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _pad_volume(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))


def _offset_slice(out_dims, kd, kh, kw, stride):
    do, ho, wo = out_dims
    return (
        slice(None),
        slice(None),
        slice(kd, kd + stride * (do - 1) + 1, stride),
        slice(kh, kh + stride * (ho - 1) + 1, stride),
        slice(kw, kw + stride * (wo - 1) + 1, stride),
    )


def _to_cl(x: np.ndarray) -> np.ndarray:
    """[N, C, D, H, W] -> contiguous [N, D, H, W, C]."""
    return np.ascontiguousarray(np.moveaxis(x, 1, -1))


def _from_cl(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(x, -1, 1))


def _cl_offset_slice(out_dims, kd, kh, kw, stride):
    do, ho, wo = out_dims
    return (
        slice(None),
        slice(kd, kd + stride * (do - 1) + 1, stride),
        slice(kh, kh + stride * (ho - 1) + 1, stride),
        slice(kw, kw + stride * (wo - 1) + 1, stride),
        slice(None),
    )


# -- conv3d ----------------------------------------------------------------


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """3D cross-correlation. ``weight`` is ``[Cout, Cin, k, k, k]``."""
    xd, wd = x.data, weight.data
    if xd.ndim != 5 or wd.ndim != 5:
        raise ShapeError(f"conv3d: expected 5D input/weight, got {xd.shape} and {wd.shape}")
    n, cin, d, h, w = xd.shape
    cout, cin_w, k = wd.shape[0], wd.shape[1], wd.shape[2]
    if wd.shape[2:] != (k, k, k):
        raise ShapeError(f"conv3d: kernel must be cubic, got {wd.shape}")
    if cin != cin_w:
        raise ShapeError(f"conv3d: input channels {xd.shape} do not match weight {wd.shape}")
    if k < 1 or stride < 1 or padding < 0:
        raise ConfigError(f"conv3d: bad k={k}, stride={stride}, padding={padding}")
    out_dims = (_out_extent(d, k, stride, padding), _out_extent(h, k, stride, padding), _out_extent(w, k, stride, padding))
    if min(out_dims) < 1:
        raise ShapeError(f"conv3d: kernel {wd.shape} too large for input {xd.shape} (pad {padding})")

    # Channels-last internally: each kernel offset contributes one batched
    # GEMM over a strided view whose channel axis stays contiguous.
    xc = _to_cl(_pad_volume(xd, padding))
    wcl = np.ascontiguousarray(wd.transpose(2, 3, 4, 1, 0))  # [k, k, k, Cin, Cout]
    ycl = np.zeros((n, *out_dims, cout), dtype=xd.dtype)
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                xs = xc[_cl_offset_slice(out_dims, kd, kh, kw, stride)]
                ycl += xs @ wcl[kd, kh, kw]
    if bias is not None:
        ycl += bias.data
    out = _from_cl(ycl)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g, needs):
        gx = gw = gb = None
        gcl = _to_cl(g)
        if needs[0]:
            gxc = np.zeros_like(xc)
            wclt = np.ascontiguousarray(wd.transpose(2, 3, 4, 0, 1))  # [k, k, k, Cout, Cin]
        if needs[1]:
            gw = np.zeros_like(wd)
        for kd in range(k):
            for kh in range(k):
                for kw in range(k):
                    sel = _cl_offset_slice(out_dims, kd, kh, kw, stride)
                    if needs[1]:
                        gw[:, :, kd, kh, kw] = np.tensordot(gcl, xc[sel], axes=([0, 1, 2, 3], [0, 1, 2, 3]))
                    if needs[0]:
                        gxc[sel] += gcl @ wclt[kd, kh, kw]
        if needs[0]:
            gxp = _from_cl(gxc)
            gx = gxp if padding == 0 else gxp[:, :, padding:-padding, padding:-padding, padding:-padding]
        if bias is not None and needs[2]:
            gb = g.sum(axis=(0, 2, 3, 4))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_op("conv3d", out, inputs, backward)


def conv_transpose3d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 2) -> Tensor:
    """Transposed 3D convolution restricted to kernel == stride, padding 0.

    ``weight`` is ``[Cin, Cout, k, k, k]``. With k == stride each input
    voxel expands into its own disjoint k**3 output block, equal to the
    zero-stuffed input convolved with the flipped kernel.
    """
    xd, wd = x.data, weight.data
    if xd.ndim != 5 or wd.ndim != 5:
        raise ShapeError(f"conv_transpose3d: expected 5D input/weight, got {xd.shape} and {wd.shape}")
    n, cin, d, h, w = xd.shape
    cin_w, cout, k = wd.shape[0], wd.shape[1], wd.shape[2]
    if wd.shape[2:] != (k, k, k):
        raise ShapeError(f"conv_transpose3d: kernel must be cubic, got {wd.shape}")
    if cin != cin_w:
        raise ShapeError(f"conv_transpose3d: input channels {xd.shape} do not match weight {wd.shape}")
    if k != stride:
        raise ConfigError(f"conv_transpose3d: only kernel == stride supported, got k={k}, stride={stride}")

    xc = _to_cl(xd)
    wcl = np.ascontiguousarray(wd.transpose(2, 3, 4, 0, 1))  # [k, k, k, Cin, Cout]
    ycl = np.empty((n, d * k, h * k, w * k, cout), dtype=xd.dtype)
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                ycl[:, kd::k, kh::k, kw::k, :] = xc @ wcl[kd, kh, kw]
    if bias is not None:
        ycl += bias.data
    out = _from_cl(ycl)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g, needs):
        gx = gw = gb = None
        gcl = _to_cl(g)
        if needs[0]:
            gxc = np.zeros_like(xc)
            wclt = np.ascontiguousarray(wd.transpose(2, 3, 4, 1, 0))  # [k, k, k, Cout, Cin]
        if needs[1]:
            gw = np.zeros_like(wd)
        for kd in range(k):
            for kh in range(k):
                for kw in range(k):
                    gs = gcl[:, kd::k, kh::k, kw::k, :]
                    if needs[0]:
                        gxc += gs @ wclt[kd, kh, kw]
                    if needs[1]:
                        gw[:, :, kd, kh, kw] = np.tensordot(xc, gs, axes=([0, 1, 2, 3], [0, 1, 2, 3]))
        gx = _from_cl(gxc) if needs[0] else None
        if bias is not None and needs[2]:
            gb = g.sum(axis=(0, 2, 3, 4))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_op("conv_transpose3d", out, inputs, backward)


def depthwise_conv3d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 1) -> Tensor:
    """Per-channel 3D convolution (groups == channels); weight ``[C, k, k, k]``."""
    xd, wd = x.data, weight.data
    n, c, d, h, w = xd.shape
    if wd.shape[0] != c:
        raise ShapeError(f"depthwise_conv3d: weight channels {wd.shape} do not match input {xd.shape}")
    k = wd.shape[1]
    out_dims = (_out_extent(d, k, stride, padding), _out_extent(h, k, stride, padding), _out_extent(w, k, stride, padding))
    xp = _pad_volume(xd, padding)
    out = np.zeros((n, c, *out_dims), dtype=xd.dtype)
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                xs = xp[_offset_slice(out_dims, kd, kh, kw, stride)]
                out += wd[None, :, kd, kh, kw, None, None, None] * xs
    if bias is not None:
        out = out + bias.data.reshape(1, c, 1, 1, 1)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g, needs):
        gx = gw = gb = None
        if needs[0]:
            gxp = np.zeros_like(xp)
        if needs[1]:
            gw = np.zeros_like(wd)
        for kd in range(k):
            for kh in range(k):
                for kw in range(k):
                    sel = _offset_slice(out_dims, kd, kh, kw, stride)
                    if needs[1]:
                        gw[:, kd, kh, kw] = np.einsum("ncdhw,ncdhw->c", g, xp[sel])
                    if needs[0]:
                        gxp[sel] += wd[None, :, kd, kh, kw, None, None, None] * g
        if needs[0]:
            gx = gxp if padding == 0 else gxp[:, :, padding:-padding, padding:-padding, padding:-padding]
        if bias is not None and needs[2]:
            gb = g.sum(axis=(0, 2, 3, 4))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_op("depthwise_conv3d", out, inputs, backward)


def avg_pool3d(x: Tensor, k: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """Windowed mean; padding contributes zeros and is excluded from the divisor."""
    xd = x.data
    if xd.ndim != 5:
        raise ShapeError(f"avg_pool3d: expected 5D input, got {xd.shape}")
    n, c, d, h, w = xd.shape
    out_dims = (_out_extent(d, k, stride, padding), _out_extent(h, k, stride, padding), _out_extent(w, k, stride, padding))
    xp = _pad_volume(xd, padding)
    acc = np.zeros((n, c, *out_dims), dtype=xd.dtype)
    ones = np.pad(np.ones((1, 1, d, h, w), dtype=xd.dtype), ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    count = np.zeros((1, 1, *out_dims), dtype=xd.dtype)
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                sel = _offset_slice(out_dims, kd, kh, kw, stride)
                acc += xp[sel]
                count += ones[sel]
    out = acc / count

    def backward(g, needs):
        gscaled = g / count
        gxp = np.zeros_like(xp)
        for kd in range(k):
            for kh in range(k):
                for kw in range(k):
                    gxp[_offset_slice(out_dims, kd, kh, kw, stride)] += gscaled
        gx = gxp if padding == 0 else gxp[:, :, padding:-padding, padding:-padding, padding:-padding]
        return (gx,)

    return make_op("avg_pool3d", out, (x,), backward)


# -- linear ---------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """Affine map over the last axis; leading axes broadcast. Weight ``[Dout, Din]``."""
    xd, wd = x.data, weight.data
    if xd.shape[-1] != wd.shape[1]:
        raise ShapeError(f"linear: input {xd.shape} does not match weight {wd.shape}")
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, wd.shape[1])
    out = x2 @ wd.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(*lead, wd.shape[0])

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g, needs):
        g2 = g.reshape(-1, wd.shape[0])
        gx = (g2 @ wd).reshape(xd.shape) if needs[0] else None
        gw = g2.T @ x2 if needs[1] else None
        gb = g2.sum(axis=0) if bias is not None and needs[2] else None
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_op("linear", out, inputs, backward)


# -- normalization --------------------------------------------------------


def norm_affine(x: Tensor, gamma: Tensor, beta: Tensor, axes, eps: float) -> Tensor:
    """Normalize ``x`` to zero mean / unit variance over ``axes``, then scale
    and shift. ``gamma``/``beta`` must already be broadcastable to ``x``."""
    axes = tuple(a % x.ndim for a in axes)
    xd = x.data
    mu = xd.mean(axis=axes, keepdims=True)
    diff = xd - mu
    var = np.mean(diff * diff, axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = diff * inv
    out = xhat * gamma.data + beta.data

    def backward(g, needs):
        gx = ggamma = gbeta = None
        if needs[0]:
            dxhat = g * gamma.data
            t1 = dxhat.mean(axis=axes, keepdims=True)
            t2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
            gx = inv * (dxhat - t1 - xhat * t2)
        if needs[1]:
            from .tensor import _unbroadcast

            ggamma = _unbroadcast(g * xhat, gamma.shape)
        if needs[2]:
            from .tensor import _unbroadcast

            gbeta = _unbroadcast(g, beta.shape)
        return (gx, ggamma, gbeta)

    return make_op("norm_affine", out, (x, gamma, beta), backward)


# -- activations ----------------------------------------------------------


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) with Phi from the error function."""
    xd = x.data
    phi = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = xd * phi

    def backward(g, needs):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return (g * (phi + xd * pdf),)

    return make_op("gelu", out, (x,), backward)


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Per-channel PReLU on a volume; ``slope`` has shape ``[C]``."""
    xd = x.data
    c = xd.shape[1]
    if slope.shape != (c,):
        raise ShapeError(f"prelu: slope {slope.shape} does not match channels of {xd.shape}")
    sb = slope.data.reshape(1, c, 1, 1, 1)
    negmask = xd < 0
    out = np.where(negmask, sb * xd, xd)

    def backward(g, needs):
        gx = gs = None
        if needs[0]:
            gx = np.where(negmask, sb * g, g)
        if needs[1]:
            gs = np.where(negmask, g * xd, 0.0).sum(axis=(0, 2, 3, 4))
        return (gx, gs)

    return make_op("prelu", out, (x, slope), backward)
