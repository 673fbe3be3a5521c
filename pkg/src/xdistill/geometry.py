"""Pinhole camera model and inverse warping of a source view into the target frame.

Pixel coordinates are column-first: ``h(p) = [x, y, 1]`` with ``x`` the
column and ``y`` the row, and ``K = [[fx, 0, cx], [0, fy, cy], [0, 0, 1]]``.
A target pixel with depth ``d`` lands in the source image at the
dehomogenised ``K (R K^-1 d h(p) + t)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Tuple, Union

import numpy as np

from .autograd import (
    Tensor,
    add,
    as_tensor,
    bilinear_sample,
    clamp_min,
    div,
    matmul,
    mul,
    reshape,
    sub,
    sum_,
)
from .autograd.tensor import _result

Z_EPS = 1e-3


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def inverse(self) -> np.ndarray:
        return np.array([
            [1.0 / self.fx, 0.0, -self.cx / self.fx],
            [0.0, 1.0 / self.fy, -self.cy / self.fy],
            [0.0, 0.0, 1.0],
        ])

    @classmethod
    def from_matrix(cls, k: np.ndarray) -> "CameraIntrinsics":
        k = np.asarray(k, dtype=np.float64)
        return cls(float(k[0, 0]), float(k[1, 1]), float(k[0, 2]), float(k[1, 2]))


@dataclass(frozen=True)
class RigidPose:
    """T = [R | t], mapping points from the target camera frame into the source frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-5) or abs(np.linalg.det(r) - 1.0) > 1e-5:
            raise ValueError("rotation is not orthonormal with det 1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidPose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "RigidPose":
        rt = self.rotation.T
        return RigidPose(rt, -rt @ self.translation)

    def compose(self, other: "RigidPose") -> "RigidPose":
        """Apply ``other`` first, then ``self``."""
        return RigidPose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)


@lru_cache(maxsize=32)
def _grid_array(h: int, w: int) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    grid = np.stack([xs, ys, np.ones_like(xs)])
    grid.setflags(write=False)
    return grid


def make_pixel_grid(h: int, w: int) -> Tensor:
    """Homogeneous pixel coordinates as a (3, H, W) tensor: x plane, y plane, ones."""
    if h < 1 or w < 1:
        raise ValueError(f"grid size must be positive, got {h}x{w}")
    return Tensor(_grid_array(h, w), dtype=np.float64)


# ---------------------------------------------------------------------------
# rotations
# ---------------------------------------------------------------------------

_SERIES_BELOW = 1e-4

# skew(a) = sum_i a_i G_i, flattened so that skew = a @ _SKEW_BASIS
_SKEW_BASIS = np.array([
    [0, 0, 0, 0, 0, -1, 0, 1, 0],
    [0, 0, 1, 0, 0, 0, -1, 0, 0],
    [0, -1, 0, 1, 0, 0, 0, 0, 0],
], dtype=np.float64)


def _rodrigues_coefficients(theta_sq: Tensor) -> Tuple[Tensor, Tensor]:
    """A = sin(t)/t and B = (1 - cos t)/t^2 as functions of s = t^2, with derivatives."""
    s = theta_sq.data.astype(np.float64)
    small = s < _SERIES_BELOW
    safe = np.where(small, 1.0, s)
    t = np.sqrt(safe)
    a_exact, b_exact = np.sin(t) / t, (1.0 - np.cos(t)) / safe
    a = np.where(small, 1 - s / 6 + s**2 / 120 - s**3 / 5040, a_exact)
    b = np.where(small, 0.5 - s / 24 + s**2 / 720 - s**3 / 40320, b_exact)
    da = np.where(small, -1 / 6 + s / 60 - s**2 / 1680, (np.cos(t) - a_exact) / (2 * safe))
    db = np.where(small, -1 / 24 + s / 360 - s**2 / 13440, (a_exact - 2 * b_exact) / (2 * safe))
    dt = theta_sq.dtype
    da, db = da.astype(dt), db.astype(dt)
    out_a = _result(a.astype(dt), (theta_sq,), lambda g: (g * da,))
    out_b = _result(b.astype(dt), (theta_sq,), lambda g: (g * db,))
    return out_a, out_b


def axis_angle_to_rotation(axis_angle) -> Tensor:
    """Rodrigues formula R = I + A[a]x + B[a]x^2 for (..., 3) axis-angle vectors."""
    aa = as_tensor(axis_angle)
    lead = aa.shape[:-1]
    dt = aa.dtype
    theta_sq = sum_(mul(aa, aa), axis=-1)
    coef_a, coef_b = _rodrigues_coefficients(theta_sq)
    skew = reshape(matmul(reshape(aa, (-1, 3)), Tensor(_SKEW_BASIS, dtype=dt)), lead + (3, 3))
    skew_sq = matmul(skew, skew)
    coef_a = reshape(coef_a, lead + (1, 1))
    coef_b = reshape(coef_b, lead + (1, 1))
    return add(add(Tensor(np.eye(3), dtype=dt), mul(coef_a, skew)), mul(coef_b, skew_sq))


# ---------------------------------------------------------------------------
# warping
# ---------------------------------------------------------------------------

PoseLike = Union[RigidPose, Tuple[object, object]]


def _pose_tensors(pose: PoseLike, n: int, dtype) -> Tuple[Tensor, Tensor]:
    if isinstance(pose, RigidPose):
        rot, trans = pose.rotation, pose.translation
    else:
        rot, trans = pose
    rot = rot if isinstance(rot, Tensor) else Tensor(rot, dtype=dtype)
    trans = trans if isinstance(trans, Tensor) else Tensor(trans, dtype=dtype)
    if rot.ndim == 2:
        rot = reshape(rot, (1, 3, 3))
    if trans.ndim == 1:
        trans = reshape(trans, (1, 3))
    if rot.shape[0] not in (1, n) or trans.shape[0] not in (1, n):
        raise ValueError(f"pose batch does not match depth batch {n}")
    return rot, reshape(trans, (trans.shape[0], 3, 1))


def _intrinsic_arrays(k, n: int) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(k, CameraIntrinsics):
        return k.matrix[None], k.inverse[None]
    k = np.asarray(k, dtype=np.float64)
    k = k.reshape((-1, 3, 3))
    if k.shape[0] not in (1, n):
        raise ValueError(f"intrinsics batch {k.shape[0]} does not match depth batch {n}")
    return k, np.linalg.inv(k)


def warp_coordinates(depth, intrinsics, pose: PoseLike) -> Tuple[Tensor, Tensor]:
    """Source-image pixel location of every target pixel, plus a positive-depth mask.

    ``depth`` is (N,1,H,W); ``intrinsics`` a CameraIntrinsics or (N,)3x3
    array; ``pose`` a RigidPose or ``(rotation, translation)`` tensors of
    shape (N,3,3) and (N,3).  Returns coords (N,2,H,W) and front_mask
    (N,1,H,W).  Depths are clamped to ``Z_EPS`` before dehomogenising.

    The projection is evaluated as the pixel grid plus a displacement, so an
    identity pose reproduces the grid exactly even in float32.
    """
    depth = as_tensor(depth)
    if depth.ndim != 4 or depth.shape[1] != 1:
        raise ValueError(f"depth must be (N,1,H,W), got {depth.shape}")
    if np.any(depth.data <= 0):
        raise ValueError("depth must be strictly positive")
    n, _, h, w = depth.shape
    dt = depth.dtype
    k, k_inv = _intrinsic_arrays(intrinsics, n)
    rot, trans = _pose_tensors(pose, n, dt)
    grid = _grid_array(h, w).reshape(3, h * w)
    rays = Tensor(k_inv @ grid, dtype=dt)  # (1|N, 3, HW), third row exactly 1
    d = reshape(depth, (n, 1, h * w))
    cam = mul(d, rays)
    # q = (R - I) X + t, the motion of the back-projected point
    q = add(sub(matmul(rot, cam), cam), trans)
    q_z = q[:, 2:3]
    z = add(d, q_z)
    # K q - h q_z, i.e. the numerator of (K(X + q))/z - h
    num = sub(matmul(Tensor(k[:, :2], dtype=dt), q), mul(Tensor(grid[:2], dtype=dt), q_z))
    xy = add(Tensor(grid[:2], dtype=dt), div(num, clamp_min(z, Z_EPS)))
    front = (z.data > Z_EPS).astype(dt)
    return reshape(xy, (n, 2, h, w)), Tensor(front.reshape(n, 1, h, w), dtype=dt)


def synthesize_view(source, coords: Tensor, front_mask: Tensor) -> Tuple[Tensor, Tensor]:
    """Sample ``source`` at warped coordinates; validity also requires positive depth."""
    source = as_tensor(source)
    if source.shape[2:] != coords.shape[2:]:
        raise ValueError(f"resolution mismatch: image {source.shape[2:]} vs coords {coords.shape[2:]}")
    warped, valid = bilinear_sample(source, coords)
    mask = valid.data * front_mask.data
    warped = mul(warped, Tensor(front_mask.data, dtype=warped.dtype))
    return warped, Tensor(mask, dtype=valid.dtype)


def _upsample_coords(n: int, h: int, w: int, out_h: int, out_w: int, dtype) -> np.ndarray:
    fy, fx = out_h / h, out_w / w
    xs = np.clip((np.arange(out_w) + 0.5) / fx - 0.5, 0, w - 1)
    ys = np.clip((np.arange(out_h) + 0.5) / fy - 0.5, 0, h - 1)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.broadcast_to(np.stack([gx, gy])[None], (n, 2, out_h, out_w)).astype(dtype)


def scale_disparity_pyramid(disp, size: Tuple[int, int]) -> Tensor:
    """Bilinear (half-pixel centred, edge clamped) upsampling of (N,C,h,w) to ``size``."""
    disp = as_tensor(disp)
    n, _, h, w = disp.shape
    out_h, out_w = size
    if out_h % h or out_w % w:
        raise ValueError(f"scale must divide the full resolution: {h}x{w} -> {out_h}x{out_w}")
    if (h, w) == (out_h, out_w):
        return disp
    coords = Tensor(_upsample_coords(n, h, w, out_h, out_w, disp.dtype), dtype=disp.dtype)
    return bilinear_sample(disp, coords)[0]
