"""Finite-difference gradient checks for every differentiable operation.

Each case builds random inputs for a dtype and returns the function under
test, its inputs and the indices of the inputs to differentiate.  Inputs
are drawn away from kinks (|x| = 0 for abs/relu, integer sample positions
for bilinear lookups, ties for min) so central differences are meaningful.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autograd as ag
from .autograd.gradcheck import gradcheck
from .geometry import CameraIntrinsics, axis_angle_to_rotation, scale_disparity_pyramid, synthesize_view, warp_coordinates
from .losses import d2s_distillation_loss, min_reprojection_automask, photometric_loss, smoothness_loss, ssim
from .networks import disparity_to_depth

TOLERANCE = {"float32": 1e-3, "float64": 1e-6}

Case = Tuple[Callable[..., ag.Tensor], List[np.ndarray], Optional[Sequence[int]]]


def _away_from_zero(rng, shape, lo=0.1, hi=1.0):
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _fractional_coords(rng, n, h, w, out_h, out_w, margin=1.5):
    xs = rng.integers(-1, w, size=(n, out_h, out_w)) + rng.uniform(0.1, 0.9, size=(n, out_h, out_w))
    ys = rng.integers(-1, h, size=(n, out_h, out_w)) + rng.uniform(0.1, 0.9, size=(n, out_h, out_w))
    # keep a few samples outside the image to exercise the invalid branch
    xs[:, 0, 0] = w + margin
    return np.stack([xs, ys], axis=1)


def _spaced_disparity(rng, shape):
    # distinct levels keep every neighbour difference far from the |.| kink
    n = int(np.prod(shape))
    return (0.1 + (0.75 / n) * rng.permutation(n)).reshape(shape)


def _intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(fx=4.0, fy=4.5, cx=3.0, cy=2.0)


def _bn(train: bool):
    def fn(x, g, b):
        c = x.shape[1]
        return ag.batchnorm(x, g, b, np.zeros(c), np.ones(c) * 0.8, training=train)[0]
    return fn


def _cases(rng: np.random.Generator) -> Dict[str, Callable[[], Case]]:
    r = rng

    def img(*shape):
        return r.uniform(0.05, 0.95, size=shape)

    return {
        "add_broadcast": lambda: (ag.add, [r.normal(size=(4, 6, 5)), r.normal(size=(6, 1))], None),
        "sub": lambda: (ag.sub, [r.normal(size=(6, 10)), r.normal(size=(6, 10))], None),
        "mul_broadcast": lambda: (ag.mul, [r.normal(size=(4, 6, 5)), r.normal(size=(1, 5))], None),
        "div": lambda: (ag.div, [r.normal(size=(6, 10)), r.uniform(0.5, 2.0, size=(6, 10))], None),
        "scale": lambda: (lambda a: ag.scale(a, -1.7), [r.normal(size=(10, 12))], None),
        "abs": lambda: (ag.abs_, [_away_from_zero(r, (10, 12))], None),
        "pow": lambda: (lambda a: ag.power(a, 1.5), [r.uniform(0.2, 2.0, size=(10, 12))], None),
        "exp": lambda: (ag.exp, [r.normal(size=(10, 12))], None),
        "log": lambda: (ag.log, [r.uniform(0.2, 3.0, size=(10, 12))], None),
        "relu": lambda: (ag.relu, [_away_from_zero(r, (10, 12))], None),
        "sigmoid": lambda: (ag.sigmoid, [r.normal(scale=3.0, size=(10, 12))], None),
        "clamp_min": lambda: (lambda a: ag.clamp_min(a, 0.0), [_away_from_zero(r, (10, 12))], None),
        "sum_axes": lambda: (lambda a: ag.sum_(a, axis=(0, 2), keepdims=True), [r.normal(size=(4, 6, 5))], None),
        "mean": lambda: (lambda a: ag.mean(a, axis=1), [r.normal(size=(4, 6, 5))], None),
        "min_axis": lambda: (lambda a: ag.min_(a, axis=1, keepdims=True),
                             [r.permutation(120).reshape(4, 3, 10) * 0.05 + r.uniform(0, 0.01, (4, 3, 10))],
                             None),
        "reshape_transpose": lambda: (lambda a: ag.transpose(ag.reshape(a, (10, 12)), (1, 0)), [r.normal(size=(4, 6, 5))],
                                      None),
        "getitem": lambda: (lambda a: a[:, 1:3, ::2], [r.normal(size=(4, 6, 5))], None),
        "concat": lambda: (lambda a, b: ag.concat([a, b], axis=1), [r.normal(size=(4, 4, 5)), r.normal(size=(4, 2, 5))],
                           None),
        "stack": lambda: (lambda a, b: ag.stack([a, b], axis=0), [r.normal(size=(6, 10)), r.normal(size=(6, 10))], None),
        "matmul_batched": lambda: (ag.matmul, [r.normal(size=(3, 4, 6)), r.normal(size=(1, 6, 5))], None),
        "conv2d_3x3": lambda: (lambda x, w, b: ag.conv2d(x, w, b),
                               [r.normal(size=(2, 3, 5, 6)), r.normal(scale=0.3, size=(4, 3, 3, 3)), r.normal(size=4)],
                               None),
        "conv2d_stride2": lambda: (lambda x, w, b: ag.conv2d(x, w, b, stride=2),
                                   [r.normal(size=(2, 3, 6, 7)), r.normal(scale=0.3, size=(4, 3, 3, 3)),
                                    r.normal(size=4)], None),
        "conv2d_wide": lambda: (lambda x, w, b: ag.conv2d(x, w, b),
                                [r.normal(scale=0.5, size=(1, 16, 4, 5)), r.normal(scale=0.05, size=(16, 16, 3, 3)),
                                 r.normal(scale=0.1, size=16)], None),
        "conv2d_pointwise": lambda: (lambda x, w, b: ag.conv2d(x, w, b),
                                     [r.normal(size=(2, 5, 3, 4)), r.normal(size=(3, 5, 1, 1)), r.normal(size=3)], None),
        "batchnorm_train": lambda: (_bn(True), [r.normal(size=(3, 4, 3, 3)), r.uniform(0.5, 1.5, 4), r.normal(size=4)],
                                    None),
        "batchnorm_eval": lambda: (_bn(False), [r.normal(size=(3, 4, 3, 3)), r.uniform(0.5, 1.5, 4), r.normal(size=4)],
                                   None),
        "bilinear_sample": lambda: (lambda im, c: ag.bilinear_sample(im, c)[0],
                                    [img(2, 3, 5, 6), _fractional_coords(r, 2, 5, 6, 4, 5)], None),
        "upsample_nearest": lambda: (lambda a: ag.upsample_nearest(a, 2), [r.normal(size=(2, 4, 4, 4))], None),
        "pad_reflect": lambda: (lambda a: ag.pad2d(a, 1), [r.normal(size=(2, 3, 4, 5))], None),
        "box_filter": lambda: (lambda a: ag.box_filter(a, 3), [r.normal(size=(2, 2, 5, 6))], None),
        "avg_pool_reflect": lambda: (lambda a: ag.avg_pool_reflect(a, 3), [r.normal(size=(2, 2, 5, 6))], None),
        "ssim": lambda: (ssim, [img(2, 3, 5, 6), img(2, 3, 5, 6)], None),
        "cross_entropy": lambda: (lambda z: ag.cross_entropy(z, r_labels), [r.normal(size=(2, 4, 3, 5))], None),
        "axis_angle_to_rotation": lambda: (axis_angle_to_rotation, [r.normal(scale=0.8, size=(40, 3))], None),
        "axis_angle_near_zero": lambda: (axis_angle_to_rotation, [r.normal(scale=2e-3, size=(40, 3))], None),
        "disparity_to_depth": lambda: (disparity_to_depth, [r.uniform(0.05, 0.95, size=(2, 1, 6, 10))], None),
        "warp_coordinates": lambda: (
            lambda d, rot_aa, t: warp_coordinates(d, _intrinsics(), (axis_angle_to_rotation(rot_aa), t))[0],
            [r.uniform(2.0, 8.0, size=(2, 1, 6, 9)), r.normal(scale=0.05, size=(2, 3)),
             r.normal(scale=0.2, size=(2, 3))], None),
        "synthesize_view": lambda: (
            lambda src, d: synthesize_view(src, *warp_coordinates(d, _intrinsics(), (np.eye(3), np.array([0.3, 0.1, 0.2]))))[0],
            [img(1, 3, 5, 7), r.uniform(2.0, 8.0, size=(1, 1, 5, 7))], None),
        "scale_disparity_pyramid": lambda: (lambda d: scale_disparity_pyramid(d, (12, 18)), [r.uniform(0.1, 0.9, (2, 1, 6, 9))],
                                            None),
        "photometric_loss": lambda: (lambda a, b: photometric_loss(a, b).values, [img(2, 3, 5, 6), img(2, 3, 5, 6)], [1]),
        "smoothness_loss": lambda: (smoothness_loss, [_spaced_disparity(r, (2, 1, 6, 9)), img(2, 3, 6, 9)], [0]),
        "min_reprojection": lambda: (_min_reprojection, [img(2, 3, 4, 5), img(2, 3, 4, 5), img(2, 3, 4, 5)], [1, 2]),
        "d2s_distillation_loss": lambda: (lambda z: d2s_distillation_loss(z, r_labels), [r.normal(size=(2, 4, 3, 5))],
                                          None),
    }


r_labels = np.array([[[0, 1, 2, 3, 255], [3, 2, 1, 0, 1], [2, 2, 0, 1, 3]],
                     [[1, 1, 3, 0, 2], [0, 255, 2, 3, 1], [3, 0, 1, 2, 0]]])


def _min_reprojection(target, a, b):
    maps = [photometric_loss(target, s) for s in (a, b)]
    return min_reprojection_automask(maps).values


CASE_NAMES = tuple(_cases(np.random.default_rng(0)))


@dataclass
class SuiteRow:
    op: str
    dtype: str
    max_error: float
    probes: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def run_suite(dtypes: Sequence[str] = ("float32", "float64"), probes: int = 100, seed: int = 0,
              ops: Optional[Sequence[str]] = None) -> List[SuiteRow]:
    unknown = set(ops or ()) - set(CASE_NAMES)
    if unknown:
        raise ValueError(f"unknown ops {sorted(unknown)}")
    rows = []
    for dtype in dtypes:
        for i, name in enumerate(CASE_NAMES):
            if ops and name not in ops:
                continue
            cases = _cases(np.random.default_rng([seed, i]))
            fn, inputs, wrt = cases[name]()
            arrays = [np.asarray(a, dtype=dtype) for a in inputs]
            res = gradcheck(fn, arrays, wrt=wrt, probes=probes, seed=seed + i)
            rows.append(SuiteRow(name, dtype, res.max_error, res.probes, TOLERANCE[dtype]))
    return rows


def format_rows(rows: Sequence[SuiteRow]) -> str:
    lines = [f"{'op':<26} {'dtype':<8} {'max_rel_err':>12} {'probes':>6}  status"]
    for row in rows:
        status = "ok" if row.passed else "FAIL"
        lines.append(f"{row.op:<26} {row.dtype:<8} {row.max_error:>12.3e} {row.probes:>6}  {status}")
    return "\n".join(lines)


def timed_suite(**kwargs) -> Tuple[List[SuiteRow], float]:
    start = time.perf_counter()
    rows = run_suite(**kwargs)
    return rows, time.perf_counter() - start
