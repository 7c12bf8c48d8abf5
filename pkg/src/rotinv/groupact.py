"""Planar rotation acting on images.

Pixel (i, j) of a rotated image is the bilinear sample of the source at the
point obtained by rotating (i, j) about the image center ((H-1)/2, (W-1)/2) by
-theta.  Source locations outside the raster read as zero.  With this center
convention quarter turns map the pixel grid onto itself, so rotations by
multiples of 90 degrees are exact permutations.

The same kernel backs :func:`rotate_image` (plain arrays) and
:func:`rotate_differentiable` (tape op), so their forward values agree bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn.tape import Tensor, as_tensor, tape_of

UNIT_TOL = 1e-6


@dataclass(frozen=True)
class GroupElement:
    """Rotation stored as (cos theta, sin theta)."""

    c: float
    s: float

    def __post_init__(self):
        if abs(self.c * self.c + self.s * self.s - 1.0) > UNIT_TOL:
            raise ValueError(f"GroupElement ({self.c}, {self.s}) is not unit norm")

    @classmethod
    def identity(cls) -> "GroupElement":
        return cls(1.0, 0.0)

    @classmethod
    def from_angle(cls, theta: float) -> "GroupElement":
        return cls(math.cos(theta), math.sin(theta))

    @classmethod
    def quarter_turn(cls, k: int) -> "GroupElement":
        """Exact rotation by k * 90 degrees (no trig round-off)."""
        return cls(*((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0))[k % 4])

    @property
    def angle(self) -> float:
        """Angle in [0, 2 pi)."""
        return math.atan2(self.s, self.c) % (2 * math.pi)

    def compose(self, other: "GroupElement") -> "GroupElement":
        c = self.c * other.c - self.s * other.s
        s = self.s * other.c + self.c * other.s
        n = math.hypot(c, s)
        return GroupElement(c / n, s / n)

    def inverse(self) -> "GroupElement":
        return GroupElement(self.c, -self.s)


class AngleSampler:
    """Seeded source of uniform rotations on [0, 2 pi).

    Draws come from numpy's PCG64 bit generator, which produces the same
    stream on every platform; trig is evaluated in float64.
    """

    distribution = "uniform"

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._rng = np.random.Generator(np.random.PCG64(self.seed))

    def angles(self, n: int) -> np.ndarray:
        return self._rng.random(n) * (2 * np.pi)

    def poses(self, n: int) -> np.ndarray:
        """(n, 2) array of (cos, sin) rows."""
        th = self.angles(n)
        return np.stack([np.cos(th), np.sin(th)], axis=1)


def sample_angle(sampler: AngleSampler) -> GroupElement:
    th = float(sampler.angles(1)[0])
    return GroupElement(math.cos(th), math.sin(th))


def poses_from_angles(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    return np.stack([np.cos(theta), np.sin(theta)], axis=-1)


# -- bilinear kernel ------------------------------------------------------------

def _source_coords(H: int, W: int, c: np.ndarray, s: np.ndarray):
    """Source (y, x) of every output pixel for a batch of poses, shape (N, H, W)."""
    dt = c.dtype
    cy, cx = dt.type((H - 1) / 2), dt.type((W - 1) / 2)
    dy = (np.arange(H, dtype=dt) - cy)[None, :, None]
    dx = (np.arange(W, dtype=dt) - cx)[None, None, :]
    c = c[:, None, None]
    s = s[:, None, None]
    src_x = c * dx + s * dy + cx
    src_y = c * dy - s * dx + cy
    return src_y, src_x, dy, dx


class _Sampling:
    """Precomputed bilinear taps for a batch; reused by forward and backward."""

    def __init__(self, imgs: np.ndarray, c: np.ndarray, s: np.ndarray):
        N, H, W = imgs.shape
        self.shape = (N, H, W)
        src_y, src_x, self.dy, self.dx = _source_coords(H, W, c, s)
        y0 = np.floor(src_y)
        x0 = np.floor(src_x)
        self.fy = (src_y - y0).astype(imgs.dtype, copy=False)
        self.fx = (src_x - x0).astype(imgs.dtype, copy=False)
        y0 = y0.astype(np.int64)
        x0 = x0.astype(np.int64)
        base = (np.arange(N, dtype=np.int64) * (H * W))[:, None, None]
        self.idx = []
        self.valid = []
        for oy in (0, 1):
            for ox in (0, 1):
                yy, xx = y0 + oy, x0 + ox
                ok = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
                flat = base + np.clip(yy, 0, H - 1) * W + np.clip(xx, 0, W - 1)
                self.idx.append(flat)
                self.valid.append(ok)

    def taps(self, imgs: np.ndarray):
        flat = imgs.reshape(-1)
        z = imgs.dtype.type(0)
        return [np.where(ok, flat[ix], z) for ix, ok in zip(self.idx, self.valid)]

    def weights(self):
        fy, fx = self.fy, self.fx
        one = fy.dtype.type(1)
        return [(one - fy) * (one - fx), (one - fy) * fx, fy * (one - fx), fy * fx]

    def forward(self, imgs: np.ndarray) -> np.ndarray:
        v00, v01, v10, v11 = self.taps(imgs)
        w00, w01, w10, w11 = self.weights()
        return w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11


def _as_batch(img: np.ndarray):
    img = np.asarray(img)
    if img.ndim == 2:
        return img[None], True
    if img.ndim == 3:
        return img, False
    raise ValueError(f"expected (H, W) or (N, H, W) image array, got shape {img.shape}")


def _pose_arrays(g, n: int, dtype):
    if isinstance(g, GroupElement):
        c = np.full(n, g.c, dtype=dtype)
        s = np.full(n, g.s, dtype=dtype)
        return c, s
    g = np.asarray(g, dtype=dtype).reshape(-1, 2)
    if g.shape[0] == 1 and n > 1:
        g = np.repeat(g, n, axis=0)
    if g.shape[0] != n:
        raise ValueError(f"{g.shape[0]} poses for {n} images")
    return g[:, 0].copy(), g[:, 1].copy()


def rotate_image(img, g) -> np.ndarray:
    """Rotate an (H, W) image, or an (N, H, W) batch, by ``g``.

    ``g`` is a :class:`GroupElement` or an (N, 2) array of (cos, sin) rows.
    Coordinates are computed in the image dtype.
    """
    imgs, single = _as_batch(img)
    c, s = _pose_arrays(g, imgs.shape[0], imgs.dtype)
    out = _Sampling(imgs, c, s).forward(imgs)
    return out[0] if single else out


def rotate_differentiable(img, pose) -> Tensor:
    """Tape-recording rotation of ``img`` (N, H, W) by ``pose`` (N, 2).

    Gradients flow to the pixels and to the raw (cos, sin) entries of the pose,
    which are treated as independent inputs (no unit-norm projection here).
    """
    img, pose = as_tensor(img), as_tensor(pose)
    imgs = img.data
    if imgs.ndim != 3:
        raise ValueError(f"rotate_differentiable expects (N, H, W), got {imgs.shape}")
    N, H, W = imgs.shape
    if pose.data.shape != (N, 2):
        raise ValueError(f"pose must be ({N}, 2), got {pose.data.shape}")
    pd = pose.data.astype(imgs.dtype, copy=False)
    samp = _Sampling(imgs, pd[:, 0].copy(), pd[:, 1].copy())
    out = samp.forward(imgs)

    tape = tape_of(img, pose)
    if tape is None:
        return Tensor(out)

    def backward(g):
        gimg = None
        if img.requires_grad:
            acc = np.zeros(N * H * W, dtype=np.float64)
            for w, ix, ok in zip(samp.weights(), samp.idx, samp.valid):
                acc += np.bincount(ix.reshape(-1), weights=(g * w * ok).reshape(-1), minlength=N * H * W)
            gimg = acc.astype(imgs.dtype).reshape(N, H, W)
        gpose = None
        if pose.requires_grad:
            v00, v01, v10, v11 = samp.taps(imgs)
            one = samp.fy.dtype.type(1)
            d_sx = (one - samp.fy) * (v01 - v00) + samp.fy * (v11 - v10)
            d_sy = (one - samp.fx) * (v10 - v00) + samp.fx * (v11 - v01)
            gx, gy = g * d_sx, g * d_sy
            # src_x = c dx + s dy + cx ; src_y = c dy - s dx + cy
            gc = (gx * samp.dx + gy * samp.dy).sum(axis=(1, 2))
            gs = (gx * samp.dy - gy * samp.dx).sum(axis=(1, 2))
            gpose = np.stack([gc, gs], axis=1).astype(pose.data.dtype)
        return gimg, gpose

    return tape.record(out, (img, pose), backward)
