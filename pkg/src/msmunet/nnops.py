"""Image-shaped differentiable operations (NCHW layout)."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Tensor, as_tensor, make_node


def conv_output_size(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    b, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    return as_strided(
        xp,
        shape=(b, c, ho, wo, k, k),
        strides=(s0, s1, s2 * stride, s3 * stride, s2 * dilation, s3 * dilation),
        writeable=False,
    )


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation.

    ``groups`` may be 1 (dense) or equal to the input channel count
    (depthwise, one filter per channel).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4:
        raise ValueError(f"conv2d: input must be rank 4 (B,C,H,W), got shape {x.shape}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"conv2d: weight must be (Cout,Cin,k,k), got shape {weight.shape}")
    b, cin, h, w = x.shape
    cout, cin_g, k, _ = weight.shape
    if cin_g * groups != cin:
        raise ValueError(
            f"conv2d: channel axis (1) mismatch: input has {cin} channels, "
            f"weight expects {cin_g} x {groups} groups"
        )
    if groups not in (1, cin) or (groups > 1 and cout != cin):
        raise ValueError("conv2d: only dense or depthwise grouping is supported")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {cout} output channels")
    ho = conv_output_size(h, k, stride, padding, dilation)
    wo = conv_output_size(w, k, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: spatial axes (2,3) too small for kernel {k} dilation {dilation}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    depthwise = groups > 1
    if depthwise:
        out = np.zeros((b, cout, ho, wo), dtype=x.data.dtype)
        for i in range(k):
            for j in range(k):
                patch = xp[:, :, i * dilation : i * dilation + stride * (ho - 1) + 1 : stride,
                           j * dilation : j * dilation + stride * (wo - 1) + 1 : stride]
                out += patch * weight.data[:, 0, i, j][None, :, None, None]
    else:
        win = _windows(xp, k, stride, dilation, ho, wo)
        out = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        out = np.ascontiguousarray(out)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        need_x = x.requires_grad
        if depthwise:
            gw = np.zeros_like(weight.data)
            gxp = np.zeros_like(xp) if need_x else None
            for i in range(k):
                for j in range(k):
                    sl = (slice(None), slice(None),
                          slice(i * dilation, i * dilation + stride * (ho - 1) + 1, stride),
                          slice(j * dilation, j * dilation + stride * (wo - 1) + 1, stride))
                    gw[:, 0, i, j] = (g * xp[sl]).sum(axis=(0, 2, 3))
                    if need_x:
                        gxp[sl] += g * weight.data[:, 0, i, j][None, :, None, None]
        else:
            win = _windows(xp, k, stride, dilation, ho, wo)
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            if need_x:
                gwin = np.tensordot(g, weight.data, axes=([1], [0]))  # B,Ho,Wo,Cin,k,k
                gxp = np.zeros_like(xp)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :,
                            i * dilation : i * dilation + stride * (ho - 1) + 1 : stride,
                            j * dilation : j * dilation + stride * (wo - 1) + 1 : stride] += (
                            gwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                        )
        if weight.requires_grad:
            weight._accumulate(gw)
        if need_x:
            if padding:
                gxp = gxp[:, :, padding : padding + h, padding : padding + w]
            x._accumulate(gxp)

    return make_node(out, parents, backward, "conv2d")


def conv_transpose2x2(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Transposed convolution with kernel 2 and stride 2 (exact ×2 upsampling).

    ``weight`` has shape (Cin, Cout, 2, 2).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    b, cin, h, w = x.shape
    if weight.shape[0] != cin or weight.shape[2:] != (2, 2):
        raise ValueError(f"conv_transpose2x2: weight {weight.shape} incompatible with input {x.shape}")
    cout = weight.shape[1]
    out = np.einsum("bchw,coij->bohiwj", x.data, weight.data).reshape(b, cout, 2 * h, 2 * w)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g6 = g.reshape(b, cout, h, 2, w, 2)
        if x.requires_grad:
            x._accumulate(np.einsum("bohiwj,coij->bchw", g6, weight.data))
        if weight.requires_grad:
            weight._accumulate(np.einsum("bchw,bohiwj->coij", x.data, g6))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    return make_node(out, parents, backward, "conv_transpose2x2")


def bilinear_gather(img: np.ndarray, py: np.ndarray, px: np.ndarray):
    """Sample ``img`` (B,C,H,W) at fractional rows ``py`` and columns ``px``.

    ``py``/``px`` have shape (B, ...).  Samples outside the frame read zero.
    Returns the samples (B,C,...) and the cached corner data used for
    gradients.
    """
    b, c, h, w = img.shape
    rest = py.shape[1:]
    y0 = np.floor(py)
    x0 = np.floor(px)
    ly = py - y0
    lx = px - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    flat = img.reshape(b, c, h * w)
    corners = []
    out = np.zeros((b, c) + rest, dtype=img.dtype)
    for dy, dx, wgt in (
        (0, 0, (1 - ly) * (1 - lx)),
        (0, 1, (1 - ly) * lx),
        (1, 0, ly * (1 - lx)),
        (1, 1, ly * lx),
    ):
        yy, xx = y0 + dy, x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        idx = (np.clip(yy, 0, h - 1) * w + np.clip(xx, 0, w - 1)).reshape(b, -1)
        vals = np.take_along_axis(flat, idx[:, None, :], axis=2).reshape((b, c) + rest)
        vals = vals * valid[:, None]
        out += wgt[:, None] * vals
        corners.append((idx, valid, vals))
    return out, (ly, lx, corners)


def deformable_conv2d(
    x: Tensor,
    weight: Tensor,
    offsets: Tensor,
    bias: Tensor | None = None,
    dilation: int = 1,
) -> Tensor:
    """Deformable convolution, stride 1, same-size output.

    ``offsets`` has 2·k·k channels; channel ``2t`` is the row shift and
    ``2t+1`` the column shift of kernel tap ``t`` (row-major taps).
    """
    x, weight, offsets = as_tensor(x), as_tensor(weight), as_tensor(offsets)
    b, c, h, w = x.shape
    cout, cin, k, k2 = weight.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"deformable_conv2d: kernel must be odd and square, got {weight.shape}")
    if cin != c:
        raise ValueError(f"deformable_conv2d: channel axis (1) mismatch {c} vs weight {cin}")
    taps = k * k
    if offsets.shape != (b, 2 * taps, h, w):
        raise ValueError(
            f"deformable_conv2d: offsets must have shape {(b, 2 * taps, h, w)} "
            f"(2k^2 = {2 * taps} channels), got {offsets.shape}"
        )
    pad = dilation * (k - 1) // 2
    ti, tj = np.divmod(np.arange(taps), k)
    base_y = (np.arange(h)[None, :, None] - pad + dilation * ti[:, None, None]).astype(x.data.dtype)
    base_x = (np.arange(w)[None, None, :] - pad + dilation * tj[:, None, None]).astype(x.data.dtype)
    off = offsets.data.reshape(b, taps, 2, h, w)
    py = base_y[None] + off[:, :, 0]
    px = base_x[None] + off[:, :, 1]
    cols, (ly, lx, corners) = bilinear_gather(x.data, py, px)  # B,C,T,H,W
    wmat = weight.data.reshape(cout, c, taps)
    out = np.tensordot(wmat, cols, axes=([1, 2], [1, 2])).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    parents = (x, weight, offsets) if bias is None else (x, weight, offsets, bias)

    def backward(g):
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            weight._accumulate(np.tensordot(g, cols, axes=([0, 2, 3], [0, 3, 4])).reshape(weight.shape))
        if not (x.requires_grad or offsets.requires_grad):
            return
        gcols = np.tensordot(wmat, g, axes=([0], [1])).transpose(2, 0, 1, 3, 4)  # B,C,T,H,W
        (i00, m00, v00), (i01, m01, v01), (i10, m10, v10), (i11, m11, v11) = corners
        if offsets.requires_grad:
            dy = (1 - lx)[:, None] * (v10 - v00) + lx[:, None] * (v11 - v01)
            dx = (1 - ly)[:, None] * (v01 - v00) + ly[:, None] * (v11 - v10)
            goff = np.stack([(gcols * dy).sum(axis=1), (gcols * dx).sum(axis=1)], axis=2)
            offsets._accumulate(goff.reshape(offsets.shape))
        if x.requires_grad:
            gx = np.zeros(b * c * h * w, dtype=x.data.dtype)
            chan = (np.arange(b)[:, None, None] * c + np.arange(c)[None, :, None]) * (h * w)
            for idx, valid, wgt in (
                (i00, m00, (1 - ly) * (1 - lx)),
                (i01, m01, (1 - ly) * lx),
                (i10, m10, ly * (1 - lx)),
                (i11, m11, ly * lx),
            ):
                contrib = (gcols * (wgt * valid)[:, None]).reshape(b, c, -1)
                lin = chan + idx[:, None, :]
                gx += np.bincount(lin.ravel(), weights=contrib.ravel(), minlength=gx.size)
            x._accumulate(gx.reshape(x.shape))

    return make_node(out, parents, backward, "deformable_conv2d")


def layer_norm(x: Tensor, gain: Tensor | None, shift: Tensor | None, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalise to zero mean / unit variance along ``axis`` then apply the affine."""
    x = as_tensor(x)
    axis = axis % x.ndim
    bshape = [1] * x.ndim
    bshape[axis] = x.shape[axis]
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * inv
    g_arr = gain.data.reshape(bshape) if gain is not None else None
    out = xhat * g_arr if g_arr is not None else xhat.copy()
    if shift is not None:
        out = out + shift.data.reshape(bshape)
    parents = [x] + [t for t in (gain, shift) if t is not None]
    others = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        if shift is not None and shift.requires_grad:
            shift._accumulate(g.sum(axis=others).reshape(shift.shape))
        if gain is not None and gain.requires_grad:
            gain._accumulate((g * xhat).sum(axis=others).reshape(gain.shape))
        if x.requires_grad:
            gh = g * g_arr if g_arr is not None else g
            gx = inv * (gh - gh.mean(axis=axis, keepdims=True) - xhat * (gh * xhat).mean(axis=axis, keepdims=True))
            x._accumulate(gx)

    return make_node(out, parents, backward, "layer_norm")


def bilinear_matrix(n: int, factor: int, dtype=np.float64) -> np.ndarray:
    """(factor·n, n) interpolation matrix, half-pixel centres, edge clamped."""
    m = np.zeros((factor * n, n), dtype=dtype)
    dst = np.arange(factor * n)
    src = np.maximum((dst + 0.5) / factor - 0.5, 0.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = src - i0
    np.add.at(m, (dst, i0), 1.0 - frac)
    np.add.at(m, (dst, i1), frac)
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    x = as_tensor(x)
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsample_bilinear: factor must be an integer >= 1, got {factor}")
    factor = int(factor)
    if factor == 1:
        return x
    _, _, h, w = x.shape
    mh = bilinear_matrix(h, factor, x.data.dtype)
    mw = bilinear_matrix(w, factor, x.data.dtype)
    out = mh @ x.data @ mw.T
    return make_node(out, (x,), lambda g: x._accumulate(mh.T @ g @ mw), "upsample_bilinear")


def global_avg_pool(x: Tensor) -> Tensor:
    return x.mean(axis=(2, 3), keepdims=True)
