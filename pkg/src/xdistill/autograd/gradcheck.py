"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward, mul, sum_


@dataclass
class GradcheckResult:
    max_error: float
    probes: int
    worst_input: int
    worst_index: int
    analytic: float
    numeric: float


def default_step(dtype) -> float:
    return 1e-6 if np.dtype(dtype) == np.float64 else 1e-3


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], wrt: Optional[Sequence[int]] = None,
              probes: int = 100, step: Optional[float] = None, seed: int = 0) -> GradcheckResult:
    """Compare backward() against central differences of ``sum(fn(*inputs) * W)``.

    ``W`` is a fixed random weighting so every output element matters.  The
    projected loss is accumulated in float64 so that outputs untouched by a
    probe cancel exactly.  The error per probe is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``: relative for
    gradients above unit size and absolute below.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a) for a in inputs]
    dtype = arrays[0].dtype
    wrt = list(range(len(arrays))) if wrt is None else list(wrt)
    h = default_step(dtype) if step is None else step

    out0 = fn(*[Tensor(a, dtype=a.dtype) for a in arrays])
    weights = rng.uniform(0.5, 1.5, size=out0.shape) * rng.choice([-1.0, 1.0], size=out0.shape)

    def project(arrs) -> float:
        out = fn(*[Tensor(a, dtype=a.dtype) for a in arrs])
        return float(np.sum(out.data.astype(np.float64) * weights))

    tensors = [Tensor(a, requires_grad=(i in wrt), dtype=a.dtype) for i, a in enumerate(arrays)]
    out = fn(*tensors)
    backward(sum_(mul(out, Tensor(weights, dtype=out.dtype))))
    analytic = {i: (tensors[i].grad if tensors[i].grad is not None else np.zeros_like(arrays[i]))
                for i in wrt}

    pool = [(i, j) for i in wrt for j in range(arrays[i].size)]
    chosen = rng.choice(len(pool), size=min(probes, len(pool)), replace=False)
    worst = GradcheckResult(0.0, len(chosen), -1, -1, 0.0, 0.0)
    for c in chosen:
        i, j = pool[c]
        plus = [a.copy() for a in arrays]
        minus = [a.copy() for a in arrays]
        plus[i].reshape(-1)[j] += h
        minus[i].reshape(-1)[j] -= h
        h_eff = float(plus[i].reshape(-1)[j]) - float(minus[i].reshape(-1)[j])
        numeric = (project(plus) - project(minus)) / h_eff
        a = float(analytic[i].reshape(-1)[j])
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        if err >= worst.max_error:
            worst = GradcheckResult(err, len(chosen), i, j, a, numeric)
    return worst
