"""Training objectives: photometric, masking, smoothness, distillation and their sum."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .autograd import (
    EPS,
    Tensor,
    abs_,
    add,
    as_tensor,
    avg_pool_reflect,
    concat,
    cross_entropy,
    div,
    mean,
    min_,
    mul,
    scale,
    sub,
    local_moments,
    ssim_map,
    sum_,
)

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
IGNORE_ID = 255
# added to the loss of an invalid source pixel so the per-pixel min avoids it
_INVALID_PENALTY = 1e3


@dataclass
class LossConfig:
    alpha: float = 0.85
    lambda_sm_base: float = 1e-3
    n_scales: int = 4
    lambda_d2s_final: float = 0.005
    schedule: str = "linear"
    total_steps: int = 5000
    use_min_reprojection: bool = True
    use_automask: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.n_scales < 1:
            raise ValueError(f"n_scales must be >= 1, got {self.n_scales}")
        if self.lambda_d2s_final < 0:
            raise ValueError(f"lambda_d2s_final must be >= 0, got {self.lambda_d2s_final}")
        if self.schedule not in ("linear", "constant"):
            raise ValueError(f"schedule must be 'linear' or 'constant', got {self.schedule!r}")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


@dataclass
class PerPixelLossMap:
    values: Tensor  # (N,1,H,W), non-negative
    mask: np.ndarray  # (N,1,H,W) of 0/1

    def masked_mean(self) -> Tensor:
        """Mean over mask-1 pixels; exactly 0 when the mask is empty."""
        m = self.mask.astype(self.values.dtype)
        count = max(float(m.sum()), 1.0)
        return scale(sum_(mul(self.values, Tensor(m, dtype=self.values.dtype))), 1.0 / count)


class LocalStats(NamedTuple):
    mean: np.ndarray  # 3x3 local mean
    var: np.ndarray  # 3x3 local variance


def local_stats(image) -> LocalStats:
    """Window statistics of a constant image, reusable across SSIM calls."""
    return LocalStats(*local_moments(np.asarray(getattr(image, "data", image))))


def ssim(a, b, a_stats: Optional[LocalStats] = None) -> Tensor:
    """Per-pixel SSIM over 3x3 reflect-padded windows.

    ``a_stats`` may carry precomputed window statistics of ``a`` when ``a``
    is a constant (the target frame), which are then not recomputed.
    """
    return ssim_map(a, b, SSIM_C1, SSIM_C2, a_stats)


def photometric_loss(target, synthesized, alpha: float = 0.85, mask: Optional[np.ndarray] = None,
                     target_stats: Optional[LocalStats] = None) -> PerPixelLossMap:
    """alpha * channel-mean L1 + (1 - alpha) * channel-mean (1 - SSIM) / 2."""
    target, synthesized = as_tensor(target), as_tensor(synthesized)
    if target.shape != synthesized.shape:
        raise ValueError(f"image shapes differ: {target.shape} vs {synthesized.shape}")
    l1 = mean(abs_(sub(target, synthesized)), axis=1, keepdims=True)
    dssim = scale(sub(1.0, mean(ssim(target, synthesized, target_stats), axis=1, keepdims=True)), 0.5)
    values = add(scale(l1, alpha), scale(dssim, 1.0 - alpha))
    n, _, h, w = target.shape
    if mask is None:
        mask = np.ones((n, 1, h, w), dtype=target.dtype)
    return PerPixelLossMap(values, np.asarray(mask, dtype=target.dtype))


def min_reprojection_automask(losses_per_source: Sequence[PerPixelLossMap],
                              identity_losses: Sequence[PerPixelLossMap] = (),
                              use_min: bool = True, automask: bool = True) -> PerPixelLossMap:
    """Combine per-source reprojection losses.

    With ``use_min`` each pixel takes the smallest loss among the sources
    that are valid there (otherwise the mean over sources).  With
    ``automask`` a pixel is dropped when the best unwarped source already
    beats the best warped one.  A pixel also needs at least one valid source.
    """
    if not losses_per_source:
        raise ValueError("need at least one source frame")
    shape = losses_per_source[0].values.shape
    for lm in list(losses_per_source) + list(identity_losses):
        if lm.values.shape != shape:
            raise ValueError(f"loss maps differ in shape: {lm.values.shape} vs {shape}")
    masks = np.stack([lm.mask for lm in losses_per_source])
    any_valid = masks.max(axis=0)
    if use_min:
        penalised = [add(lm.values, Tensor((1.0 - lm.mask) * _INVALID_PENALTY, dtype=lm.values.dtype))
                     for lm in losses_per_source]
        combined = min_(concat(penalised, axis=1), axis=1, keepdims=True)
    else:
        summed = sum_(concat([mul(lm.values, Tensor(lm.mask, dtype=lm.values.dtype))
                              for lm in losses_per_source], axis=1), axis=1, keepdims=True)
        combined = div(summed, Tensor(np.maximum(masks.sum(axis=0), 1.0), dtype=summed.dtype))
    mask = any_valid
    if automask and identity_losses:
        ident = np.min(np.stack([lm.values.data for lm in identity_losses]), axis=0)
        mask = mask * (ident >= combined.data)
    return PerPixelLossMap(combined, mask.astype(combined.dtype))


def smoothness_loss(disp, image) -> Tensor:
    """Edge-aware first-order smoothness of mean-normalised disparity."""
    disp = as_tensor(disp)
    img = as_tensor(image).data
    if disp.shape[2:] != img.shape[2:]:
        raise ValueError(f"disparity {disp.shape[2:]} and image {img.shape[2:]} sizes differ")
    norm = add(mean(disp, axis=(2, 3), keepdims=True), EPS)
    d = div(disp, norm)
    dx = abs_(sub(d[:, :, :, :-1], d[:, :, :, 1:]))
    dy = abs_(sub(d[:, :, :-1, :], d[:, :, 1:, :]))
    wx = np.exp(-np.abs(img[:, :, :, :-1] - img[:, :, :, 1:]).mean(axis=1, keepdims=True))
    wy = np.exp(-np.abs(img[:, :, :-1, :] - img[:, :, 1:, :]).mean(axis=1, keepdims=True))
    return add(mean(mul(dx, Tensor(wx, dtype=disp.dtype))), mean(mul(dy, Tensor(wy, dtype=disp.dtype))))


def d2s_distillation_loss(logits, teacher_labels, ignore_id: int = IGNORE_ID) -> Tensor:
    """Softmax cross-entropy between translator logits and teacher labels."""
    labels = getattr(teacher_labels, "labels", teacher_labels)
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    return cross_entropy(logits, labels, ignore_id)


def lambda_schedule(step: int, config: LossConfig) -> float:
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    final = config.lambda_d2s_final
    if config.schedule == "constant":
        return final
    if step >= config.total_steps:
        return final
    return final * step / config.total_steps


def smoothness_weight(scale_index: int, config: LossConfig) -> float:
    return config.lambda_sm_base / (2 ** scale_index)


def total_loss(photometric_maps: Sequence[PerPixelLossMap], smoothness_terms: Sequence[Tensor],
               d2s_loss: Optional[Tensor], step: int, config: LossConfig) -> Tuple[Tensor, Dict[str, float]]:
    """Sum over scales of masked photometric and weighted smoothness terms plus the scheduled distillation term.

    Returns the scalar loss and the component values for logging.
    """
    if len(photometric_maps) != config.n_scales or len(smoothness_terms) != config.n_scales:
        raise ValueError(f"expected {config.n_scales} scales, got {len(photometric_maps)} photometric "
                         f"and {len(smoothness_terms)} smoothness terms")
    ph = photometric_maps[0].masked_mean()
    for lm in photometric_maps[1:]:
        ph = add(ph, lm.masked_mean())
    sm = scale(smoothness_terms[0], smoothness_weight(0, config))
    for k, term in enumerate(smoothness_terms[1:], start=1):
        sm = add(sm, scale(term, smoothness_weight(k, config)))
    total = add(ph, sm)
    lam = lambda_schedule(step, config)
    d2s_value = 0.0
    if d2s_loss is not None:
        d2s_value = d2s_loss.item()
        if lam > 0:
            total = add(total, scale(d2s_loss, lam))
    return total, {
        "total": total.item(),
        "photometric": ph.item(),
        "smoothness": sm.item(),
        "d2s": d2s_value,
        "lambda_d2s": lam,
    }
