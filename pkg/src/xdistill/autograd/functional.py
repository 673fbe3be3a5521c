"""Image-shaped differentiable operations (layout N x C x H x W)."""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Tensor, _result, as_tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _im2col(xb: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patches of one padded sample (C,Hp,Wp) as a (C*k*k, Ho*Wo) matrix, row order (c, i, j)."""
    c = xb.shape[0]
    sc, sh, sw = xb.strides
    view = as_strided(xb, shape=(c, k, k, ho, wo), strides=(sc, sh, sw, sh * stride, sw * stride), writeable=False)
    return view.reshape(c * k * k, ho * wo)


# patch matrices are built one sample and a band of output rows at a time so
# they stay cache sized; a single whole-batch matrix is several times slower
_CHUNK_ELEMENTS = 200_000


def _bands(ckk: int, ho: int, wo: int):
    rows = max(1, min(ho, _CHUNK_ELEMENTS // (ckk * wo)))
    return [(r0, min(rows, ho - r0)) for r0 in range(0, ho, rows)]


def _correlate(xp: np.ndarray, wmat: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Valid cross-correlation of padded ``xp`` (N,C,Hp,Wp) with ``wmat`` (Cout, C*k*k)."""
    n, c = xp.shape[:2]
    cout = wmat.shape[0]
    if c >= 16 and cout >= 16:
        return _correlate_nhwc(xp, wmat, k, stride, ho, wo)
    out = np.empty((n, cout, ho, wo), dtype=np.result_type(xp, wmat))
    for b in range(n):
        for r0, rows in _bands(wmat.shape[1], ho, wo):
            band = xp[b, :, r0 * stride : (r0 + rows - 1) * stride + k]
            out[b, :, r0 : r0 + rows] = (wmat @ _im2col(band, k, stride, rows, wo)).reshape(cout, rows, wo)
    return out


def _correlate_nhwc(xp: np.ndarray, wmat: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # With enough channels a tall (pixels x taps) @ (taps x Cout) product runs
    # markedly faster in BLAS than the wide orientation, even after transposes.
    n, c = xp.shape[:2]
    cout = wmat.shape[0]
    xl = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    wl = np.ascontiguousarray(wmat.reshape(cout, c, k, k).transpose(2, 3, 1, 0).reshape(k * k * c, cout))
    out = np.empty((n, ho, wo, cout), dtype=np.result_type(xp, wmat))
    for b in range(n):
        xb = xl[b]
        s0, s1, s2 = xb.strides
        for r0, rows in _bands(c * k * k, ho, wo):
            view = as_strided(xb[r0 * stride :], (rows, wo, k, k, c), (s0 * stride, s1 * stride, s0, s1, s2))
            out[b, r0 : r0 + rows] = (view.reshape(rows * wo, k * k * c) @ wl).reshape(rows, wo, cout)
    return out.transpose(0, 3, 1, 2)


def _zero_pad(a: np.ndarray, p: int) -> np.ndarray:
    # np.pad is general but several times slower than a fill and a copy
    if p == 0:
        return a
    n, c, h, w = a.shape
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=a.dtype)
    out[:, :, p : p + h, p : p + w] = a
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: Optional[int] = None) -> Tensor:
    """Cross-correlation with zero padding (default ``k // 2``, shape preserving at stride 1)."""
    x, weight = as_tensor(x), as_tensor(weight)
    n, c, h, w = x.shape
    cout, cin, k, k2 = weight.shape
    if cin != c:
        raise ValueError(f"conv2d: input has {c} channels but weight expects {cin}")
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    pad = k // 2 if padding is None else padding
    xp = _zero_pad(x.data, pad)
    hp, wp = xp.shape[2:]
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    wmat = weight.data.reshape(cout, -1)
    out = _correlate(xp, wmat, k, stride, ho, wo)
    if bias is not None:
        out += bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, as_tensor(bias))

    def bw(g):
        g = np.ascontiguousarray(g)
        bands = _bands(c * k * k, ho, wo)
        gw = None
        if weight.requires_grad:
            gw = np.zeros((c * k * k, cout), dtype=g.dtype)
            for b in range(n):
                for r0, rows in bands:
                    band = xp[b, :, r0 * stride : (r0 + rows - 1) * stride + k]
                    gb = g[b, :, r0 : r0 + rows].reshape(cout, rows * wo)
                    gw += _im2col(band, k, stride, rows, wo) @ gb.T
            gw = gw.T.reshape(weight.shape)
        gx = None
        if x.requires_grad:
            if stride == 1:
                # correlate the output gradient with the flipped, transposed kernel
                q = k - 1 - pad
                gp = _zero_pad(g, q)
                wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, cout * k * k)
                gx = _correlate(gp, wflip, k, 1, h, w)
            else:
                wt = wmat.T
                gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
                for b in range(n):
                    for r0, rows in _bands(cout * k * k, ho, wo):
                        gb = g[b, :, r0 : r0 + rows].reshape(cout, rows * wo)
                        gcols = (wt @ gb).reshape(c, k * k, rows, wo)
                        y0 = r0 * stride
                        for i in range(k):
                            for j in range(k):
                                gxp[b, :, y0 + i : y0 + i + stride * (rows - 1) + 1 : stride,
                                    j : j + stride * (wo - 1) + 1 : stride] += gcols[:, i * k + j]
                gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _result(out, parents, bw)


# ---------------------------------------------------------------------------
# batch normalisation
# ---------------------------------------------------------------------------


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
              training: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS
              ) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """Per-channel normalisation.

    Returns the output and the *new* running statistics; the arrays passed in
    are never modified.  Training mode uses batch statistics (biased variance
    for normalising, unbiased for the running estimate).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm: gamma/beta must have shape ({c},), got {gamma.shape}, {beta.shape}")
    shape = (1, c, 1, 1)
    dt = x.dtype.type

    def channel_sum(a):
        # reducing the contiguous pixel axis first is much faster than axis=(0, 2, 3)
        return a.reshape(a.shape[0], c, -1).sum(axis=2).sum(axis=0)

    if training:
        count = x.data.size // c
        mu = channel_sum(x.data) / dt(count)
        xc = x.data - mu.reshape(shape)
        var = channel_sum(xc * xc) / dt(count)
        unbiased = var * (count / max(count - 1, 1))
        new_mean = ((1 - momentum) * running_mean + momentum * mu).astype(running_mean.dtype)
        new_var = ((1 - momentum) * running_var + momentum * unbiased).astype(running_var.dtype)
    else:
        count = x.data.size // c
        mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
        new_mean, new_var = running_mean.copy(), running_var.copy()
        xc = x.data - mu.reshape(shape)
    inv_std = (1.0 / np.sqrt(var + dt(eps))).astype(x.dtype)
    xhat = xc
    xhat *= inv_std.reshape(shape)
    out = xhat * gamma.data.reshape(shape)
    out += beta.data.reshape(shape)

    def bw(g):
        gxhat_sum = channel_sum(g * xhat) if (gamma.requires_grad or (x.requires_grad and training)) else None
        g_sum = channel_sum(g) if (beta.requires_grad or (x.requires_grad and training)) else None
        gx = None
        if x.requires_grad:
            scale_ = (gamma.data * inv_std).reshape(shape)
            if training:
                gx = xhat * (-gxhat_sum / dt(count)).reshape(shape)
                gx += g
                gx -= (g_sum / dt(count)).reshape(shape)
                gx *= scale_
            else:
                gx = scale_ * g
        gg = gxhat_sum if gamma.requires_grad else None
        gb = g_sum if beta.requires_grad else None
        return gx, gg, gb

    return _result(out, (x, gamma, beta), bw), new_mean, new_var


# ---------------------------------------------------------------------------
# sampling and resampling
# ---------------------------------------------------------------------------


def bilinear_sample(image: Tensor, coords: Tensor) -> Tuple[Tensor, Tensor]:
    """Sample ``image`` (N,C,H,W) at pixel coordinates ``coords`` (N,2,H',W').

    ``coords[:, 0]`` is the column (x), ``coords[:, 1]`` the row (y).  A
    location is valid when its four interpolation neighbours are inside the
    image, i.e. ``0 <= x <= W-1`` and ``0 <= y <= H-1``; invalid locations
    yield 0.  Differentiable with respect to both image and coordinates.
    """
    image, coords = as_tensor(image), as_tensor(coords)
    n, c, h, w = image.shape
    if coords.ndim != 4 or coords.shape[0] != n or coords.shape[1] != 2:
        raise ValueError(f"bilinear_sample: coords must be ({n},2,H',W'), got {coords.shape}")
    ho, wo = coords.shape[2:]
    p = ho * wo
    dt = image.dtype
    x = coords.data[:, 0].reshape(n, p).astype(dt, copy=False)
    y = coords.data[:, 1].reshape(n, p).astype(dt, copy=False)
    with np.errstate(invalid="ignore"):
        valid = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xs = np.clip(x, 0, w - 1)
    ys = np.clip(y, 0, h - 1)
    if not valid.all():
        # NaN coordinates survive clip; park every invalid location at the origin
        xs[~valid] = 0
        ys[~valid] = 0
    x0f = np.minimum(np.floor(xs), max(w - 2, 0))
    y0f = np.minimum(np.floor(ys), max(h - 2, 0))
    wx = (xs - x0f).astype(dt, copy=False)
    wy = (ys - y0f).astype(dt, copy=False)
    vmask = valid.astype(dt)

    # gather from a channels-first table so every elementwise pass runs over the long pixel axis
    table = np.ascontiguousarray(image.data.transpose(1, 0, 2, 3)).reshape(c, n * h * w)
    i00 = y0f.astype(np.int64) * w + x0f.astype(np.int64) + (np.arange(n, dtype=np.int64) * (h * w))[:, None]
    step_x = 1 if w > 1 else 0
    step_y = w if h > 1 else 0
    idx = (i00, i00 + step_x, i00 + step_y, i00 + step_y + step_x)
    v00, v01, v10, v11 = (np.take(table, i, axis=1) for i in idx)  # each (c, n, p)
    ax, ay = 1 - wx, 1 - wy
    weights = (ax * ay * vmask, wx * ay * vmask, ax * wy * vmask, wx * wy * vmask)
    out_cp = weights[0] * v00 + weights[1] * v01 + weights[2] * v10 + weights[3] * v11
    out = np.ascontiguousarray(out_cp.transpose(1, 0, 2)).reshape(n, c, ho, wo)

    def bw(g):
        g_cp = g.reshape(n, c, p).transpose(1, 0, 2)  # (c, n, p)
        gimg = None
        if image.requires_grad:
            flat_idx = np.concatenate([i.ravel() for i in idx])
            cols = [np.bincount(flat_idx, weights=np.concatenate([(g_cp[ch] * wt).ravel() for wt in weights]),
                                minlength=n * h * w) for ch in range(c)]
            gimg = np.stack(cols, axis=0).reshape(c, n, h, w).transpose(1, 0, 2, 3).astype(dt)
        gco = None
        if coords.requires_grad:
            gx = ((ay * (v01 - v00) + wy * (v11 - v10)) * g_cp).sum(axis=0) * vmask
            gy = ((ax * (v10 - v00) + wx * (v11 - v01)) * g_cp).sum(axis=0) * vmask
            gco = np.stack([gx, gy], axis=1).reshape(n, 2, ho, wo).astype(coords.dtype, copy=False)
        return gimg, gco

    validity = Tensor(vmask.reshape(n, 1, ho, wo), dtype=dt)
    return _result(out, (image, coords), bw), validity


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    return _result(out, (x,), lambda g: (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),))


def pad2d(x: Tensor, pad: int, mode: str = "reflect") -> Tensor:
    """Spatial padding by ``pad`` pixels on every side; ``mode`` is reflect or zero."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if mode not in ("reflect", "zero"):
        raise ValueError(f"unknown pad mode {mode!r}")
    if mode == "reflect" and (pad >= h or pad >= w):
        raise ValueError(f"reflect pad {pad} too large for {h}x{w}")
    widths = ((0, 0), (0, 0), (pad, pad), (pad, pad))
    out = np.pad(x.data, widths, mode="reflect" if mode == "reflect" else "constant")

    def bw(g):
        gc = g[:, :, :, pad : pad + w].copy()
        if mode == "reflect":
            for i in range(1, pad + 1):
                gc[:, :, :, i] += g[:, :, :, pad - i]
                gc[:, :, :, w - 1 - i] += g[:, :, :, pad + w - 1 + i]
        gr = gc[:, :, pad : pad + h, :].copy()
        if mode == "reflect":
            for i in range(1, pad + 1):
                gr[:, :, i, :] += gc[:, :, pad - i, :]
                gr[:, :, h - 1 - i, :] += gc[:, :, pad + h - 1 + i, :]
        return (gr,)

    return _result(out, (x,), bw)


def box_filter(x: Tensor, k: int = 3) -> Tensor:
    """Unpadded k x k mean filter with stride 1: output is (H-k+1, W-k+1)."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    ho, wo = h - k + 1, w - k + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"box_filter: {k}x{k} window larger than {h}x{w}")
    inv = x.dtype.type(1.0 / (k * k))
    # separable: sum over rows, then over columns
    rows = x.data[:, :, 0:ho].copy()
    for i in range(1, k):
        rows += x.data[:, :, i : i + ho]
    acc = rows[:, :, :, 0:wo].copy()
    for j in range(1, k):
        acc += rows[:, :, :, j : j + wo]
    out = acc * inv

    def bw(g):
        gs = g * inv
        gr = np.zeros((n, c, ho, w), dtype=g.dtype)
        for j in range(k):
            gr[:, :, :, j : j + wo] += gs
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        for i in range(k):
            gx[:, :, i : i + ho] += gr
        return (gx,)

    return _result(out, (x,), bw)


def avg_pool_reflect(x: Tensor, k: int = 3) -> Tensor:
    """Shape-preserving k x k local mean with reflection padding."""
    return box_filter(pad2d(x, k // 2, "reflect"), k)


def _pool_np(x: np.ndarray) -> np.ndarray:
    """3x3 reflect-padded local mean of a plain array."""
    # same sums as padding first, without materialising the padded copy
    rows = np.empty_like(x)
    rows[:, :, 1:-1] = x[:, :, :-2] + x[:, :, 1:-1] + x[:, :, 2:]
    rows[:, :, 0] = x[:, :, 1] + x[:, :, 0] + x[:, :, 1]
    rows[:, :, -1] = x[:, :, -2] + x[:, :, -1] + x[:, :, -2]
    out = np.empty_like(x)
    out[..., 1:-1] = rows[..., :-2] + rows[..., 1:-1] + rows[..., 2:]
    out[..., 0] = rows[..., 1] + rows[..., 0] + rows[..., 1]
    out[..., -1] = rows[..., -2] + rows[..., -1] + rows[..., -2]
    out *= x.dtype.type(1.0 / 9.0)
    return out


def _pool_adjoint(g: np.ndarray) -> np.ndarray:
    """Adjoint of ``_pool_np``."""
    n, c, h, w = g.shape
    gs = g * g.dtype.type(1.0 / 9.0)
    gr = np.zeros((n, c, h, w + 2), dtype=g.dtype)
    for j in range(3):
        gr[:, :, :, j : j + w] += gs
    gp = np.zeros((n, c, h + 2, w + 2), dtype=g.dtype)
    for i in range(3):
        gp[:, :, i : i + h] += gr
    # fold the reflected border back: padded column 0 mirrors column 1, and so on
    gp[:, :, :, 2] += gp[:, :, :, 0]
    gp[:, :, :, w - 1] += gp[:, :, :, w + 1]
    gp[:, :, 2] += gp[:, :, 0]
    gp[:, :, h - 1] += gp[:, :, h + 1]
    return gp[:, :, 1 : h + 1, 1 : w + 1]


def local_moments(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """3x3 reflect-padded local mean and variance of a plain (N,C,H,W) array."""
    shift = x.mean(axis=(2, 3), keepdims=True)
    xc = x - shift
    mu = _pool_np(xc) + shift
    # the centred mean is recovered from ``mu`` so that callers holding only
    # ``mu`` reproduce every intermediate bit for bit
    mu_c = mu - shift
    return mu, _pool_np(xc * xc) - mu_c * mu_c


def ssim_map(a: Tensor, b: Tensor, c1: float, c2: float,
             a_stats: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> Tensor:
    """Per-pixel SSIM with 3x3 reflect-padded windows as one fused node.

    ``a_stats`` optionally supplies ``local_moments(a)`` (only allowed when
    ``a`` needs no gradient).  Window moments are taken about each channel's
    global mean: variances and covariances do not depend on that shift, and
    it avoids most of the cancellation in ``E[x^2] - E[x]^2``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape[2:]) < 2:
        raise ValueError("ssim: images must be at least 2x2 for reflect padding")
    if a_stats is not None and a.requires_grad:
        raise ValueError("ssim: precomputed statistics are only valid for a constant image")
    dt = np.result_type(a.data, b.data)
    shift_a = a.data.mean(axis=(2, 3), keepdims=True).astype(dt)
    shift_b = b.data.mean(axis=(2, 3), keepdims=True).astype(dt)
    ac = a.data - shift_a
    bc = b.data - shift_b
    if a_stats is None:
        mu_a, var_a = local_moments(a.data.astype(dt, copy=False))
    else:
        mu_a, var_a = (np.asarray(t, dtype=dt) for t in a_stats)
    # recomputed the same way on both paths so cached statistics change nothing
    mu_ac = mu_a - shift_a
    mu_b = _pool_np(bc) + shift_b
    mu_bc = mu_b - shift_b
    var_b = _pool_np(bc * bc) - mu_bc * mu_bc
    cov = _pool_np(ac * bc) - mu_ac * mu_bc
    c1, c2 = dt.type(c1), dt.type(c2)
    a1 = 2 * mu_a * mu_b + c1
    a2 = 2 * cov + c2
    b1 = mu_a * mu_a + mu_b * mu_b + c1
    b2 = var_a + var_b + c2
    den = b1 * b2
    out = a1 * a2 / den

    def bw(g):
        gs = g * out
        g_cov = 2 * g * a1 / den
        g_var = -gs / b2
        g_lum = 2 * (g * a2 / den)
        pt_cov = _pool_adjoint(g_cov)
        pt_var = _pool_adjoint(g_var)
        ga = gb = None
        if b.requires_grad:
            g_mu = g_lum * mu_a - 2 * gs * mu_b / b1
            gb = _pool_adjoint(g_mu - 2 * g_var * mu_bc - g_cov * mu_ac) + 2 * bc * pt_var + ac * pt_cov
        if a.requires_grad:
            g_mu = g_lum * mu_b - 2 * gs * mu_a / b1
            ga = _pool_adjoint(g_mu - 2 * g_var * mu_ac - g_cov * mu_bc) + 2 * ac * pt_var + bc * pt_cov
        return ga, gb

    return _result(out, (a, b), bw)


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_id: int = 255) -> Tensor:
    """Pixel-wise softmax cross-entropy averaged over non-ignored pixels.

    ``logits`` is (N,C,H,W), ``labels`` an integer (N,H,W) array.  Returns 0
    (still attached to the graph) when every pixel is ignored.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    n, c, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ValueError(f"cross_entropy: labels shape {labels.shape} does not match logits {logits.shape}")
    keep = labels != ignore_id
    bad = keep & ((labels < 0) | (labels >= c))
    if np.any(bad):
        raise ValueError(f"cross_entropy: label {int(labels[bad][0])} outside 0..{c - 1} and not ignore_id")
    safe = np.where(keep, labels, 0).astype(np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    count = int(keep.sum())
    denom = max(count, 1)
    out = np.asarray(-(picked * keep).sum() / denom, dtype=logits.dtype)

    def bw(g):
        prob = np.exp(logp)
        onehot = np.zeros_like(prob)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        return ((prob - onehot) * keep[:, None] * (g / denom),)

    return _result(out, (logits,), bw)
