"""Neural primitives built on the tensor engine: softmax, layer norm, conv, attention."""

from __future__ import annotations

import numpy as np

from .tensor import DTYPE, ShapeError, Tensor, _make, as_tensor, matmul, reshape, transpose


class ParameterError(ValueError):
    """Raised for invalid hyper-parameters (eps, stride, head count...)."""


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for tensor of rank {x.ndim}")
    return axis % x.ndim


def softmax(x, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-stabilised softmax.  ``mask`` (broadcastable bool, True = keep) zeroes
    the weight of excluded positions exactly."""
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    out = z - z.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def fn(g):
        gx = g * out
        gx -= out * gx.sum(axis=axis, keepdims=True)
        return (gx,)
    return _make(out, (x,), fn)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def fn(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)
    return _make(out, (x,), fn)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the affine ``gamma``/``beta``."""
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be positive, got {eps}")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} "
                         f"do not match last dimension {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def fn(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)
    return _make(out, (x, gamma, beta), fn)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else y + bias


def conv2d(x, kernel, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is (C_in, H, W) or batched (B, C_in, H, W); ``kernel`` is
    (C_out, C_in, k, k).  Implemented as im2col + one matrix product.
    """
    if stride <= 0:
        raise ParameterError(f"conv2d stride must be positive, got {stride}")
    if pad < 0:
        raise ParameterError(f"conv2d pad must be non-negative, got {pad}")
    x, kernel = as_tensor(x), as_tensor(kernel)
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    if xd.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: expected (C,H,W) input and 4-D kernel, got {x.shape}, {kernel.shape}")
    B, C, H, W = xd.shape
    C_out, C_in, k, k2 = kernel.shape
    if C_in != C or k != k2:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    if k > H + 2 * pad or k > W + 2 * pad:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {H + 2 * pad}x{W + 2 * pad}")
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :Ho, :Wo]          # B,C,Ho,Wo,k,k
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(B, C * k * k, Ho * Wo)
    wmat = kernel.data.reshape(C_out, -1)
    out = np.matmul(wmat, cols).reshape(B, C_out, Ho, Wo)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, -1, 1, 1)

    def fn(g):
        g = g if batched else g[None]
        gm = g.reshape(B, C_out, Ho * Wo)
        gk = np.matmul(gm, np.swapaxes(cols, 1, 2)).sum(axis=0).reshape(kernel.shape)
        gcols = np.matmul(wmat.T, gm).reshape(B, C, k, k, Ho, Wo)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, :, i, j]
        gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        gx = gx if batched else gx[0]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out if batched else out[0], parents, fn)


def multi_head_attention(q, k, v, heads: int, wq, wk, wv, wo,
                         bq=None, bk=None, bv=None, bo=None,
                         mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention split over ``heads``.

    q: (..., N, D), k/v: (..., M, D).  ``mask`` is a bool (N, M) array (or
    broadcastable to (..., heads, N, M)) with True where attention is allowed.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    D = q.shape[-1]
    if heads <= 0 or D % heads:
        raise ParameterError(f"model dimension {D} is not divisible by {heads} heads")
    dh = D // heads
    lead = q.shape[:-2]
    N, M = q.shape[-2], k.shape[-2]

    def split(t, n):
        t = reshape(t, lead + (n, heads, dh))
        nl = len(lead)
        return transpose(t, tuple(range(nl)) + (nl + 1, nl, nl + 2))

    Q = split(linear(q, wq, bq), N)
    K = split(linear(k, wk, bk), M)
    V = split(linear(v, wv, bv), M)
    nl = len(lead)
    Kt = transpose(K, tuple(range(nl)) + (nl, nl + 2, nl + 1))
    scores = matmul(Q, Kt) * (1.0 / np.sqrt(dh))
    attn = softmax(scores, axis=-1, mask=mask)
    ctx = matmul(attn, V)
    ctx = transpose(ctx, tuple(range(nl)) + (nl + 1, nl, nl + 2))
    ctx = reshape(ctx, lead + (N, D))
    return linear(ctx, wo, bo)


def sine_position_2d(h: int, w: int, dim: int, temperature: float = 10000.0) -> np.ndarray:
    """Fixed 2-D sinusoidal encoding (h*w, dim) over normalised cell centres."""
    if dim % 4:
        raise ParameterError(f"2-D sine encoding needs dim divisible by 4, got {dim}")
    ys = (np.arange(h, dtype=DTYPE) + 0.5) / h
    xs = (np.arange(w, dtype=DTYPE) + 0.5) / w
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return sine_embed(np.stack([xx.ravel(), yy.ravel()], axis=1), dim // 2, temperature)


def sine_embed(coords: np.ndarray, dim_per_coord: int, temperature: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding of each column of ``coords`` (values in [0, 1])."""
    half = dim_per_coord // 2
    freqs = temperature ** (-np.arange(half, dtype=DTYPE) / half)
    ang = coords[..., :, None] * (2 * np.pi) * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    return emb.reshape(coords.shape[:-1] + (-1,))


def sine_embed_tensor(coords, dim_per_coord: int, temperature: float = 10000.0) -> Tensor:
    """Differentiable version of :func:`sine_embed`."""
    coords = as_tensor(coords)
    half = dim_per_coord // 2
    freqs = temperature ** (-np.arange(half, dtype=DTYPE) / half)
    ang = coords.data[..., :, None] * (2 * np.pi) * freqs
    s, c = np.sin(ang), np.cos(ang)
    out = np.concatenate([s, c], axis=-1).reshape(coords.shape[:-1] + (-1,))

    def fn(g):
        g = g.reshape(coords.shape + (2 * half,))
        gs, gc = g[..., :half], g[..., half:]
        return (((gs * c - gc * s) * (2 * np.pi) * freqs).sum(axis=-1),)
    return _make(out, (coords,), fn)


def bilinear_sample(feat, points) -> Tensor:
    """Read a (H, W, C) feature map at (P, 2) continuous (x, y) points in
    normalised [0, 1] page coordinates, cell centres at (i + 0.5) / size.

    Points outside the outermost centres read the border value, and their
    coordinate gradient is zero there.
    """
    feat, points = as_tensor(feat), as_tensor(points)
    if feat.ndim != 3 or points.ndim != 2 or points.shape[1] != 2:
        raise ShapeError(f"bilinear_sample: need (H, W, C) and (P, 2), got {feat.shape} and {points.shape}")
    H, W, _ = feat.shape
    px = points.data[:, 0] * W - 0.5
    py = points.data[:, 1] * H - 0.5
    x = np.clip(px, 0, W - 1)
    y = np.clip(py, 0, H - 1)
    # a NaN point reads cell 0 with NaN weights, so the NaN reaches the output
    x0 = np.minimum(np.floor(np.nan_to_num(x)).astype(np.int64), max(W - 2, 0))
    y0 = np.minimum(np.floor(np.nan_to_num(y)).astype(np.int64), max(H - 2, 0))
    x1, y1 = np.minimum(x0 + 1, W - 1), np.minimum(y0 + 1, H - 1)
    wx, wy = (x - x0)[:, None], (y - y0)[:, None]
    f = feat.data
    f00, f01, f10, f11 = f[y0, x0], f[y0, x1], f[y1, x0], f[y1, x1]
    out = (1 - wy) * ((1 - wx) * f00 + wx * f01) + wy * ((1 - wx) * f10 + wx * f11)
    inside_x = ((px > 0) & (px < W - 1)).astype(DTYPE)
    inside_y = ((py > 0) & (py < H - 1)).astype(DTYPE)

    def fn(g):
        gf = np.zeros_like(f)
        np.add.at(gf, (y0, x0), g * (1 - wx) * (1 - wy))
        np.add.at(gf, (y0, x1), g * wx * (1 - wy))
        np.add.at(gf, (y1, x0), g * (1 - wx) * wy)
        np.add.at(gf, (y1, x1), g * wx * wy)
        dx = ((1 - wy) * (f01 - f00) + wy * (f11 - f10)) * g
        dy = ((1 - wx) * (f10 - f00) + wx * (f11 - f01)) * g
        gp = np.stack([dx.sum(axis=1) * W * inside_x, dy.sum(axis=1) * H * inside_y], axis=1)
        return gf, gp

    return _make(out, (feat, points), fn)
