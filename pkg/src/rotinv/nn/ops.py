"""Differentiable primitives used by the two VAE families.

Every op accepts :class:`Tensor` or plain arrays, computes the forward value
in the dtype of its inputs (float32 for training, float64 for gradient
checks) and, when any input lives on a tape, records its backward rule.
Shapes follow NHWC for images and (N, features) for dense activations.
"""

from __future__ import annotations

import numpy as np

from .tape import Tensor, as_tensor, tape_of

BCE_CLAMP = 1e-7


class ShapeError(ValueError):
    pass


def _emit(out, parents, backward):
    tape = tape_of(*parents)
    if tape is None:
        return Tensor(out)
    return tape.record(out, parents, backward)


def _sum_to(g: np.ndarray, shape) -> np.ndarray:
    """Undo numpy broadcasting on a gradient."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise / structural -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _sum_to(g, a.shape), _sum_to(g, b.shape)

    return _emit(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        return _sum_to(g, a.shape), -_sum_to(g, b.shape)

    return _emit(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return _sum_to(g * b.data, a.shape), _sum_to(g * a.data, b.shape)

    return _emit(out, (a, b), backward)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    out = x.data * x.data.dtype.type(c)

    def backward(g):
        return (g * g.dtype.type(c),)

    return _emit(out, (x,), backward)


def total(x) -> Tensor:
    """Sum of all entries (0-d result)."""
    x = as_tensor(x)
    out = np.asarray(x.data.sum())

    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _emit(out, (x,), backward)


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return scale(total(x), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(src),)

    return _emit(out, (x,), backward)


def flatten(x) -> Tensor:
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def rows(x, start: int, stop: int) -> Tensor:
    """Slice ``x[start:stop]`` along the batch axis."""
    x = as_tensor(x)
    out = x.data[start:stop]

    def backward(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return _emit(out, (x,), backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, x.data.dtype.type(0))

    def backward(g):
        return (g * mask,)

    return _emit(out, (x,), backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(d.dtype, copy=False)

    def backward(g):
        return (g * out * (1 - out),)

    return _emit(out, (x,), backward)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _emit(out, (x,), backward)


# -- layers ---------------------------------------------------------------------

def dense(x, W, b) -> Tensor:
    """``x @ W + b`` with x (N, in), W (in, out), b (out,)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"dense: x {x.shape}, W {W.shape}, b {b.shape}")
    out = x.data @ W.data + b.data

    def backward(g):
        return g @ W.data.T, x.data.T @ g, g.sum(axis=0)

    return _emit(out, (x, W, b), backward)


def _conv_out(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x, K, b, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x (N, H, W, C) with K (kh, kw, C, O), plus bias b (O,).

    Two equivalent evaluation orders are used, chosen from the shapes alone so
    the choice is deterministic: im2col (gather windows, one matmul) when the
    window tensor is the smaller intermediate, otherwise matmul-then-shift
    (project every padded pixel onto all kh*kw*O taps, then add shifted slices).
    """
    x, K, b = as_tensor(x), as_tensor(K), as_tensor(b)
    if x.data.ndim != 4 or K.data.ndim != 4 or x.shape[3] != K.shape[2] or b.shape != (K.shape[3],):
        raise ShapeError(f"conv2d: x {x.shape}, K {K.shape}, b {b.shape}")
    N, H, W, C = x.shape
    kh, kw, _, O = K.shape
    Ho, Wo = _conv_out(H, kh, stride, padding), _conv_out(W, kw, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: kernel {K.shape[:2]} larger than padded input {x.shape[1:3]}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    Hp, Wp = xp.shape[1:3]
    if Ho * Wo * C <= Hp * Wp * O:
        out, backward = _conv_im2col(xp, K.data, b.data, stride, Ho, Wo)
    else:
        out, backward = _conv_shift(xp, K.data, b.data, stride, Ho, Wo)

    def full_backward(g):
        dxp, dK, db = backward(g)
        dx = dxp[:, padding:padding + H, padding:padding + W, :] if padding else dxp
        return np.ascontiguousarray(dx), dK, db

    return _emit(out, (x, K, b), full_backward)


def _conv_im2col(xp, K, b, stride, Ho, Wo):
    N, Hp, Wp, C = xp.shape
    kh, kw, _, O = K.shape
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    cols = np.empty((N, Ho, Wo, kh, kw, C), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + hs:stride, j:j + ws:stride, :]
    cols2 = cols.reshape(N * Ho * Wo, kh * kw * C)
    Kmat = K.reshape(kh * kw * C, O)
    out = (cols2 @ Kmat + b).reshape(N, Ho, Wo, O)

    def backward(g):
        g2 = g.reshape(-1, O)
        dK = (cols2.T @ g2).reshape(K.shape)
        dcols = (g2 @ Kmat.T).reshape(N, Ho, Wo, kh, kw, C)
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + hs:stride, j:j + ws:stride, :] += dcols[:, :, :, i, j, :]
        return dxp, dK, g2.sum(axis=0)

    return out, backward


def _conv_shift(xp, K, b, stride, Ho, Wo):
    N, Hp, Wp, C = xp.shape
    kh, kw, _, O = K.shape
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    Kt = K.transpose(2, 0, 1, 3).reshape(C, kh * kw * O)
    taps = (xp.reshape(-1, C) @ Kt).reshape(N, Hp, Wp, kh * kw, O)
    out = np.empty((N, Ho, Wo, O), dtype=xp.dtype)
    out[...] = b
    for i in range(kh):
        for j in range(kw):
            out += taps[:, i:i + hs:stride, j:j + ws:stride, i * kw + j, :]

    def backward(g):
        dtaps = np.zeros((N, Hp, Wp, kh * kw, O), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dtaps[:, i:i + hs:stride, j:j + ws:stride, i * kw + j, :] = g
        d2 = dtaps.reshape(-1, kh * kw * O)
        dxp = (d2 @ Kt.T).reshape(xp.shape)
        dK = (xp.reshape(-1, C).T @ d2).reshape(C, kh, kw, O).transpose(1, 2, 0, 3)
        return dxp, np.ascontiguousarray(dK), g.reshape(-1, O).sum(axis=0)

    return out, backward


def upsample_nearest(x, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of x (N, H, W, C) along H and W."""
    x = as_tensor(x)
    N, H, W, C = x.shape
    out = x.data.repeat(factor, axis=1).repeat(factor, axis=2)

    def backward(g):
        return (g.reshape(N, H, factor, W, factor, C).sum(axis=(2, 4)),)

    return _emit(out, (x,), backward)


# -- variational pieces -----------------------------------------------------------

def reparameterize(mu, logvar, eps) -> Tensor:
    """z = mu + exp(logvar / 2) * eps, with eps supplied by the caller."""
    mu, logvar = as_tensor(mu), as_tensor(logvar)
    eps = np.asarray(eps.data if isinstance(eps, Tensor) else eps, dtype=mu.dtype)
    if mu.shape != logvar.shape or mu.shape != eps.shape:
        raise ShapeError(f"reparameterize: mu {mu.shape}, logvar {logvar.shape}, eps {eps.shape}")
    std = np.exp(logvar.data * mu.dtype.type(0.5))
    out = mu.data + std * eps

    def backward(g):
        return g, g * eps * std * g.dtype.type(0.5)

    return _emit(out, (mu, logvar), backward)


def kl_diag_gaussian(mu, logvar) -> Tensor:
    """KL(N(mu, diag exp(logvar)) || N(0, I)) summed over the last axis."""
    mu, logvar = as_tensor(mu), as_tensor(logvar)
    if mu.shape != logvar.shape:
        raise ShapeError(f"kl_diag_gaussian: mu {mu.shape}, logvar {logvar.shape}")
    ev = np.exp(logvar.data)
    half = mu.dtype.type(0.5)
    out = half * (mu.data ** 2 + ev - 1 - logvar.data).sum(axis=-1)

    def backward(g):
        g = np.expand_dims(g, -1)
        return g * mu.data, g * half * (ev - 1)

    return _emit(np.asarray(out), (mu, logvar), backward)


def bernoulli_nll(target, recon) -> Tensor:
    """-sum[x log r + (1-x) log(1-r)] per sample, r clamped into [1e-7, 1-1e-7].

    ``target`` is treated as data (no gradient); the sum runs over every axis
    but the first.
    """
    recon = as_tensor(recon)
    x = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=recon.dtype)
    if x.shape != recon.shape:
        raise ShapeError(f"bernoulli_nll: target {x.shape}, recon {recon.shape}")
    lo, hi = recon.dtype.type(BCE_CLAMP), recon.dtype.type(1 - BCE_CLAMP)
    r = np.clip(recon.data, lo, hi)
    inside = (recon.data >= lo) & (recon.data <= hi)
    axes = tuple(range(1, x.ndim))
    out = -(x * np.log(r) + (1 - x) * np.log1p(-r)).sum(axis=axes)

    def backward(g):
        g = g.reshape(g.shape + (1,) * len(axes))
        return (g * (r - x) / (r * (1 - r)) * inside,)

    return _emit(np.asarray(out), (recon,), backward)


def squared_distance(a, b) -> Tensor:
    """Row-wise squared Euclidean distance, reduced over the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"squared_distance: {a.shape} vs {b.shape}")
    d = a.data - b.data
    out = (d ** 2).sum(axis=-1)

    def backward(g):
        g = np.expand_dims(g, -1) * 2 * d
        return g, -g

    return _emit(np.asarray(out), (a, b), backward)


class DegeneratePoseError(ArithmeticError):
    pass


POSE_MIN_NORM = 1e-8


def unit_rows(r) -> Tensor:
    """Normalize each row of r (N, 2) onto the unit circle."""
    r = as_tensor(r)
    n = np.sqrt((r.data ** 2).sum(axis=-1, keepdims=True))
    if np.any(n < POSE_MIN_NORM):
        bad = int(np.argmin(n[..., 0]))
        raise DegeneratePoseError(f"pose head output row {bad} has norm {float(n[bad, 0]):.3g} < {POSE_MIN_NORM}")
    u = r.data / n

    def backward(g):
        # d(r/|r|) = (g - u (u.g)) / |r|
        return ((g - u * (u * g).sum(axis=-1, keepdims=True)) / n,)

    return _emit(u, (r,), backward)
