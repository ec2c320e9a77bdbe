"""Finite-difference coverage for every differentiable operation.

Each fragment is a small double-precision computation ending in a fixed
random projection to a scalar, checked against central differences. The
suite backs both the `gradcheck` CLI command and the test suite.
"""

from __future__ import annotations

import numpy as np

from .attention import WindowAttention, WindowSpec, tokens_to_volume, volume_to_tokens, w_mhsa
from .blocks import BranchWidths, DepthwiseFF, InceptionFF, MlpFF, TransformerBlock
from .decoder import ResidualBlock, UpsampleBlock
from .diagnostics import GradCheckReport, grad_check
from .encoder import PatchMergeConv, PatchMergeLinear
from .kernels import avg_pool3d, conv3d, conv_transpose3d, depthwise_conv3d, gelu, linear, prelu
from .metrics import dice_ce_loss
from .nn import BatchNorm3d, InstanceNorm3d, LayerNorm
from .tensor import Tensor, concat, matmul, pad_nd, roll, softmax, take_rows


def _t(rng, *shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def _proj(rng, shape):
    return Tensor(rng.standard_normal(shape))


def _fragments(quick: bool):
    rng = np.random.default_rng(7)

    x = _t(rng, 3, 5)
    y = _t(rng, 3, 5, scale=0.5)
    p = _proj(rng, (3, 5))

    def elementwise():
        h = x * y + x / (y * y + 2.0) - y
        return (((h * h + 1.0).sqrt().log() + (0.1 * h).exp()) * p).sum()

    yield "elementwise", elementwise, {"x": x, "y": y}

    a = _t(rng, 2, 3, 4)
    b = _t(rng, 2, 4, 5)
    pm = _proj(rng, (2, 3, 5))
    yield "matmul", lambda: (matmul(a, b) * pm).sum(), {"a": a, "b": b}

    s = _t(rng, 4, 6)
    mask = Tensor(np.where(rng.random((4, 6)) < 0.3, -1e9, 0.0))
    ps = _proj(rng, (4, 6))
    yield "softmax_masked", lambda: (softmax(s + mask, axis=-1) * ps).sum(), {"scores": s}

    g = _t(rng, 3, 7)
    pg = _proj(rng, (3, 7))
    yield "gelu", lambda: (gelu(g) * pg).sum(), {"x": g}

    pv = _t(rng, 2, 3, 4, 4, 4)
    slope = Tensor(rng.uniform(0.1, 0.5, 3), requires_grad=True)
    pp = _proj(rng, (2, 3, 4, 4, 4))
    yield "prelu", lambda: (prelu(pv, slope) * pp).sum(), {"x": pv, "slope": slope}

    lx = _t(rng, 2, 3, 6)
    lw = _t(rng, 4, 6, scale=0.5)
    lb = _t(rng, 4)
    pl = _proj(rng, (2, 3, 4))
    yield "linear", lambda: (linear(lx, lw, lb) * pl).sum(), {"x": lx, "w": lw, "b": lb}

    cx = _t(rng, 2, 2, 5, 5, 5)
    cw = _t(rng, 3, 2, 3, 3, 3, scale=0.4)
    cb = _t(rng, 3)
    pc = _proj(rng, (2, 3, 5, 5, 5))
    yield "conv3d_s1", lambda: (conv3d(cx, cw, cb, 1, 1) * pc).sum(), {"x": cx, "w": cw, "b": cb}

    ex = _t(rng, 1, 1, 6, 6, 6)
    ew = _t(rng, 4, 1, 2, 2, 2, scale=0.5)
    eb = _t(rng, 4)
    pe = _proj(rng, (1, 4, 3, 3, 3))
    yield "conv3d_s2", lambda: (conv3d(ex, ew, eb, 2, 0) * pe).sum(), {"x": ex, "w": ew, "b": eb}

    tx = _t(rng, 1, 3, 3, 3, 3)
    tw = _t(rng, 3, 2, 2, 2, 2, scale=0.5)
    tb = _t(rng, 2)
    pt = _proj(rng, (1, 2, 6, 6, 6))
    yield "conv_transpose3d", lambda: (conv_transpose3d(tx, tw, tb, 2) * pt).sum(), {"x": tx, "w": tw, "b": tb}

    dx = _t(rng, 2, 3, 4, 4, 4)
    dw = _t(rng, 3, 3, 3, 3, scale=0.4)
    db = _t(rng, 3)
    pd = _proj(rng, (2, 3, 4, 4, 4))
    yield "depthwise_conv3d", lambda: (depthwise_conv3d(dx, dw, db, 1, 1) * pd).sum(), {"x": dx, "w": dw, "b": db}

    ax = _t(rng, 2, 2, 5, 4, 5)
    pa = _proj(rng, (2, 2, 5, 4, 5))
    yield "avg_pool3d", lambda: (avg_pool3d(ax, 3, 1, 1) * pa).sum(), {"x": ax}

    ln = LayerNorm(6)
    nx = _t(rng, 2, 5, 6)
    pn = _proj(rng, (2, 5, 6))
    yield "layer_norm", lambda: (ln(nx) * pn).sum(), {"x": nx, "gamma": ln.gamma, "beta": ln.beta}

    inorm = InstanceNorm3d(3)
    ix = _t(rng, 2, 3, 4, 4, 4)
    pi = _proj(rng, (2, 3, 4, 4, 4))
    yield "instance_norm", lambda: (inorm(ix) * pi).sum(), {"x": ix, "gamma": inorm.gamma, "beta": inorm.beta}

    bn = BatchNorm3d(3)
    bx = _t(rng, 2, 3, 4, 4, 4)
    pb = _proj(rng, (2, 3, 4, 4, 4))
    yield "batch_norm_train", lambda: (bn(bx) * pb).sum(), {"x": bx, "gamma": bn.gamma, "beta": bn.beta}

    bne = BatchNorm3d(3)
    bne.set_running_stats(rng.normal(0, 0.5, 3), rng.uniform(0.5, 2.0, 3))
    bne.eval()
    bex = _t(rng, 2, 3, 4, 4, 4)
    pbe = _proj(rng, (2, 3, 4, 4, 4))
    yield "batch_norm_eval", lambda: (bne(bex) * pbe).sum(), {"x": bex, "gamma": bne.gamma, "beta": bne.beta}

    table = _t(rng, 27, 2)
    idx = rng.integers(0, 27, size=(8, 8))
    pr = _proj(rng, (8, 8, 2))
    yield "take_rows", lambda: (take_rows(table, idx) * pr).sum(), {"table": table}

    mx = _t(rng, 1, 4, 4, 4, 4)
    pmov = _proj(rng, (1, 8, 4, 4, 4))

    def movement():
        padded = pad_nd(mx, [(0, 0), (0, 0), (1, 1), (0, 0), (0, 0)])
        rolled = roll(padded.narrow(2, 1, 4), (1, 2, 0), (2, 3, 4))
        return (concat([rolled, mx], axis=1) * pmov).sum()

    yield "movement_composite", movement, {"x": mx}

    attn = WindowAttention(8, 2, 4, rng)
    wx = _t(rng, 1, 8, 6, 6, 6, scale=0.5)
    pw = _proj(rng, (1, 8, 6, 6, 6))
    tensors = {"x": wx, "qkv.w": attn.qkv.weight, "proj.w": attn.proj.weight, "bias_table": attn.rel_bias_table}
    yield "w_mhsa_shifted", lambda: (w_mhsa(wx, attn, WindowSpec(4, 2)) * pw).sum(), tensors

    def _token_scalar(ff, x, proj):
        dims = x.shape[2:]
        return (tokens_to_volume(ff(volume_to_tokens(x), dims), dims) * proj).sum()

    iff = InceptionFF(8, BranchWidths(4, 4, 4, 4), rng)
    ifx = _t(rng, 1, 8, 4, 4, 4, scale=0.5)
    ifp = _proj(rng, (1, 8, 4, 4, 4))
    it = {"x": ifx, "fc.w": iff.fc.weight, "b1.conv": iff.branch1[0].conv.weight,
          "b3.conv": iff.branch3[1].conv.weight, "b5.conv": iff.branch5[2].conv.weight,
          "b5.bn.gamma": iff.branch5[1].bn.gamma, "bp.conv": iff.branch_pool[0].conv.weight}
    yield "inception_ff", lambda: _token_scalar(iff, ifx, ifp), it

    mff = MlpFF(6, 4.0, rng)
    mfx = _t(rng, 1, 6, 6, scale=0.5)  # tokens [N, T, C]
    mfp = _proj(rng, (1, 6, 6))
    yield "mlp_ff", lambda: (mff(mfx) * mfp).sum(), {"x": mfx, "fc1.w": mff.fc1.weight, "fc2.w": mff.fc2.weight}

    dff = DepthwiseFF(4, 2.0, rng)
    dfx = _t(rng, 1, 27, 4, scale=0.5)  # tokens of a 3x3x3 volume
    dfp = _proj(rng, (1, 27, 4))
    yield "depthwise_ff", lambda: (dff(dfx, (3, 3, 3)) * dfp).sum(), {
        "x": dfx, "fc1.w": dff.fc1.weight, "dw1.w": dff.dw1.weight, "bn1.gamma": dff.bn1.gamma, "fc2.w": dff.fc2.weight}

    blk = TransformerBlock(8, 2, 4, 2, "inception", rng)
    bx2 = _t(rng, 1, 64, 8, scale=0.5)
    pb2 = _proj(rng, (1, 64, 8))
    bt = {"x": bx2, "ln1.gamma": blk.ln1.gamma, "attn.qkv.w": blk.attn.qkv.weight,
          "attn.bias_table": blk.attn.rel_bias_table, "ff.fc.w": blk.ff.fc.weight,
          "ff.b5.conv": blk.ff.branch5[1].conv.weight}
    yield "transformer_block", lambda: (blk(bx2, (4, 4, 4)) * pb2).sum(), bt

    res = ResidualBlock(2, 3, rng)
    rx = _t(rng, 1, 2, 4, 4, 4, scale=0.5)
    prx = _proj(rng, (1, 3, 4, 4, 4))
    yield "residual_block", lambda: (res(rx) * prx).sum(), {
        "x": rx, "conv1.w": res.conv1.weight, "conv2.w": res.conv2.weight,
        "proj.w": res.proj.weight, "norm1.gamma": res.norm1.gamma, "act1.slope": res.act1.slope}

    up = UpsampleBlock(3, 2, rng, 2)
    ux = _t(rng, 1, 3, 3, 3, 3, scale=0.5)
    pu = _proj(rng, (1, 2, 6, 6, 6))
    yield "upsample_block", lambda: (up(ux) * pu).sum(), {
        "x": ux, "up.w": up.up.weight, "norm.gamma": up.norm.gamma, "act.slope": up.act.slope}

    ml = PatchMergeLinear(3, rng)
    mlx = _t(rng, 1, 3, 4, 4, 4, scale=0.5)
    pml = _proj(rng, (1, 6, 2, 2, 2))
    yield "patch_merge_linear", lambda: (ml(mlx) * pml).sum(), {
        "x": mlx, "reduction.w": ml.reduction.weight, "norm.gamma": ml.norm.gamma}

    mc = PatchMergeConv(3, rng)
    mcx = _t(rng, 1, 3, 4, 4, 4, scale=0.5)
    pmc = _proj(rng, (1, 6, 2, 2, 2))
    yield "patch_merge_conv", lambda: (mc(mcx) * pmc).sum(), {
        "x": mcx, "reduction.w": mc.reduction.weight, "norm.gamma": mc.norm.gamma}

    logits = _t(rng, 1, 3, 4, 4, 4, scale=2.0)
    labels = rng.integers(0, 3, size=(1, 4, 4, 4))
    yield "dice_ce_loss", lambda: dice_ce_loss(logits, labels), {"logits": logits}


def operation_grad_checks(quick: bool = False, tolerance: float = 1e-3):
    """Yield one GradCheckReport per fragment, every tensor probed."""
    coords = 4 if quick else 12
    for name, fn, tensors in _fragments(quick):
        report = grad_check(fn, tensors, max_coords=coords, tolerance=tolerance, seed=3)
        for entry in report.entries:
            entry.name = f"{name}:{entry.name}"
        yield report
