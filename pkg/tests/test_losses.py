import math

import numpy as np
import pytest

from xdistill.autograd import Tensor
from xdistill.losses import (
    SSIM_C1,
    SSIM_C2,
    LossConfig,
    PerPixelLossMap,
    d2s_distillation_loss,
    lambda_schedule,
    local_stats,
    min_reprojection_automask,
    photometric_loss,
    smoothness_loss,
    ssim,
    total_loss,
)


def ssim_oracle(a, b):
    """Scalar SSIM over reflect-padded 3x3 windows of a single (H,W) channel."""
    h, w = a.shape
    ap, bp = np.pad(a, 1, mode="reflect"), np.pad(b, 1, mode="reflect")
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            wa, wb = ap[y:y + 3, x:x + 3].ravel(), bp[y:y + 3, x:x + 3].ravel()
            ma, mb = wa.mean(), wb.mean()
            va, vb = ((wa - ma) ** 2).mean(), ((wb - mb) ** 2).mean()
            cov = ((wa - ma) * (wb - mb)).mean()
            out[y, x] = ((2 * ma * mb + SSIM_C1) * (2 * cov + SSIM_C2)) / (
                (ma**2 + mb**2 + SSIM_C1) * (va + vb + SSIM_C2))
    return out


def loss_map(values, mask=None):
    values = np.asarray(values, dtype=np.float64)
    return PerPixelLossMap(Tensor(values, dtype=np.float64),
                           np.ones_like(values) if mask is None else np.asarray(mask, dtype=np.float64))


# -- SSIM -----------------------------------------------------------------------


def test_ssim_self_similarity_is_one():
    img = np.random.default_rng(0).uniform(size=(2, 3, 6, 7)).astype(np.float32)
    np.testing.assert_allclose(ssim(Tensor(img), Tensor(img)).data, 1.0, atol=1e-6)


def test_ssim_constant_images():
    a, b = np.zeros((1, 1, 4, 4)), np.ones((1, 1, 4, 4))
    out = ssim(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).data
    np.testing.assert_allclose(out, SSIM_C1 / (1 + SSIM_C1), rtol=1e-9)


def test_ssim_matches_scalar_oracle():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(2, 1, 5, 6)), rng.uniform(size=(2, 1, 5, 6))
    out32 = ssim(Tensor(a), Tensor(b)).data
    out64 = ssim(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).data
    for n in range(2):
        ref = ssim_oracle(a[n, 0], b[n, 0])
        np.testing.assert_allclose(out64[n, 0], ref, atol=1e-12)
        np.testing.assert_allclose(out32[n, 0], ref, atol=1e-5)


def test_ssim_precomputed_stats_match():
    rng = np.random.default_rng(2)
    a, b = rng.uniform(size=(2, 3, 6, 8)).astype(np.float32), rng.uniform(size=(2, 3, 6, 8)).astype(np.float32)
    plain = ssim(Tensor(a), Tensor(b)).data
    cached = ssim(Tensor(a), Tensor(b), local_stats(a)).data
    np.testing.assert_array_equal(plain, cached)


# -- photometric ----------------------------------------------------------------


def test_photometric_identity_is_zero():
    img = np.random.default_rng(3).uniform(size=(1, 3, 5, 5)).astype(np.float32)
    for alpha in (0.0, 0.5, 0.85, 1.0):
        assert np.abs(photometric_loss(Tensor(img), Tensor(img), alpha).values.data).max() <= 1e-6


def test_photometric_alpha_one_is_l1():
    rng = np.random.default_rng(4)
    a, b = rng.uniform(size=(1, 3, 4, 4)), rng.uniform(size=(1, 3, 4, 4))
    out = photometric_loss(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64), alpha=1.0).values.data
    np.testing.assert_allclose(out, np.abs(a - b).mean(axis=1, keepdims=True), atol=1e-12)


def test_photometric_hand_evaluated():
    a = np.array([[0.1, 0.5, 0.9], [0.3, 0.3, 0.7], [0.2, 0.8, 0.4]])[None, None]
    b = np.array([[0.2, 0.4, 0.9], [0.1, 0.6, 0.5], [0.2, 0.7, 0.6]])[None, None]
    out = photometric_loss(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64), 0.85).values.data
    ref = 0.85 * np.abs(a - b)[0, 0] + 0.15 * (1 - ssim_oracle(a[0, 0], b[0, 0])) / 2
    np.testing.assert_allclose(out[0, 0], ref, atol=1e-6)


def test_photometric_positive_for_different_images():
    rng = np.random.default_rng(5)
    a = rng.uniform(size=(1, 3, 4, 4)).astype(np.float32)
    b = np.clip(a + 0.1, 0, 1).astype(np.float32)
    assert np.all(photometric_loss(Tensor(a), Tensor(b)).values.data > 0)


# -- masking --------------------------------------------------------------------


def test_min_selects_clean_source():
    bad = loss_map(np.full((1, 1, 3, 3), 10.0))
    good = loss_map(np.full((1, 1, 3, 3), 0.1))
    out = min_reprojection_automask([bad, good])
    np.testing.assert_allclose(out.values.data, 0.1)


def test_automask_drops_static_pixel():
    warped = loss_map(np.full((1, 1, 2, 2), 0.5))
    ident = np.full((1, 1, 2, 2), 0.6)
    ident[0, 0, 1, 1] = 0.5 - 1e-4
    out = min_reprojection_automask([warped], [loss_map(ident)])
    assert out.mask[0, 0].tolist() == [[1, 1], [1, 0]]


def test_min_matches_argmin_oracle_and_bounds():
    rng = np.random.default_rng(6)
    maps = [rng.uniform(size=(2, 1, 4, 5)) for _ in range(2)]
    masks = [rng.uniform(size=(2, 1, 4, 5)) > 0.2 for _ in range(2)]
    out = min_reprojection_automask([loss_map(m, k) for m, k in zip(maps, masks)])
    for idx in np.ndindex(2, 1, 4, 5):
        candidates = [m[idx] for m, k in zip(maps, masks) if k[idx]]
        if candidates:
            assert out.values.data[idx] == min(candidates) and out.mask[idx] == 1
        else:
            assert out.mask[idx] == 0
    for m, k in zip(maps, masks):
        assert np.all(out.values.data[k] <= m[k])


def test_masking_switches_and_errors():
    a, b = loss_map(np.full((1, 1, 2, 2), 0.2)), loss_map(np.full((1, 1, 2, 2), 0.4))
    np.testing.assert_allclose(min_reprojection_automask([a, b], use_min=False).values.data, 0.3)
    with pytest.raises(ValueError):
        min_reprojection_automask([])


def test_empty_mask_mean_is_zero():
    lm = loss_map(np.full((1, 1, 2, 2), 3.0), np.zeros((1, 1, 2, 2)))
    assert lm.masked_mean().item() == 0.0


# -- smoothness -----------------------------------------------------------------


def test_constant_disparity_smoothness_zero():
    assert smoothness_loss(Tensor(np.full((1, 1, 4, 5), 0.3)), np.random.rand(1, 3, 4, 5)).item() == 0.0


def test_ramp_smoothness_oracle_and_edge_weighting():
    h, w = 4, 6
    ramp = (0.1 + 0.05 * np.arange(w))[None].repeat(h, 0)[None, None]
    flat = np.full((1, 3, h, w), 0.5)
    value = smoothness_loss(Tensor(ramp, dtype=np.float64), flat).item()
    norm = ramp.mean()
    expected = (0.05 / norm) * (h * (w - 1)) / (h * (w - 1))  # dx term only, dy is zero
    assert value == pytest.approx(expected, rel=1e-6)
    edged = flat.copy()
    edged[:, :, :, w // 2:] = 1.0
    assert smoothness_loss(Tensor(ramp, dtype=np.float64), edged).item() < value


# -- distillation ---------------------------------------------------------------


def test_uniform_logits_give_ln4():
    ce = d2s_distillation_loss(Tensor(np.zeros((2, 4, 3, 3)), dtype=np.float64), np.zeros((2, 3, 3), dtype=np.int64))
    assert abs(ce.item() - math.log(4)) <= 1e-6


def test_margin_drives_ce_down():
    labels = np.array([[[0, 1], [2, 3]]])
    values = []
    for margin in (0.0, 1.0, 3.0, 8.0):
        logits = np.zeros((1, 4, 2, 2))
        for (y, x), c in np.ndenumerate(labels[0]):
            logits[0, c, y, x] = margin
        values.append(d2s_distillation_loss(Tensor(logits, dtype=np.float64), labels).item())
    assert all(b < a for a, b in zip(values, values[1:]))


def test_ignored_pixel_excluded():
    rng = np.random.default_rng(7)
    logits = rng.normal(size=(1, 3, 2, 2))
    labels = np.array([[[0, 2], [255, 1]]])
    got = d2s_distillation_loss(Tensor(logits, dtype=np.float64), labels).item()
    terms = []
    for (y, x), c in np.ndenumerate(labels[0]):
        if c == 255:
            continue
        z = logits[0, :, y, x]
        terms.append(-(z[c] - np.log(np.exp(z).sum())))
    assert got == pytest.approx(np.mean(terms), abs=1e-12)
    all_ignored = d2s_distillation_loss(Tensor(logits), np.full((1, 2, 2), 255))
    assert all_ignored.item() == 0.0


def test_bad_label_rejected():
    with pytest.raises(ValueError):
        d2s_distillation_loss(Tensor(np.zeros((1, 3, 1, 1))), np.array([[[3]]]))


def test_ce_permutation_equivariant():
    rng = np.random.default_rng(8)
    logits = rng.normal(size=(1, 4, 3, 3))
    labels = rng.integers(0, 4, size=(1, 3, 3))
    perm = np.array([2, 0, 3, 1])
    base = d2s_distillation_loss(Tensor(logits, dtype=np.float64), labels).item()
    inv = np.argsort(perm)
    permuted = d2s_distillation_loss(Tensor(logits[:, perm], dtype=np.float64), inv[labels]).item()
    assert permuted == pytest.approx(base, abs=1e-12)


# -- schedule and total -----------------------------------------------------------


def test_schedule_endpoints_and_midpoint():
    cfg = LossConfig(total_steps=1000)
    assert lambda_schedule(0, cfg) == 0.0
    assert lambda_schedule(1000, cfg) == 0.005
    assert lambda_schedule(500, cfg) == pytest.approx(0.0025)
    assert lambda_schedule(5000, cfg) == 0.005
    vals = [lambda_schedule(s, cfg) for s in range(0, 1001, 50)]
    assert vals == sorted(vals)
    assert lambda_schedule(0, LossConfig(schedule="constant")) == 0.005


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(alpha=1.5)
    with pytest.raises(ValueError):
        LossConfig(n_scales=0)
    with pytest.raises(ValueError):
        LossConfig(schedule="cosine")


def test_total_loss_hand_sum():
    rng = np.random.default_rng(9)
    cfg = LossConfig(n_scales=2, total_steps=100)
    maps = [loss_map(rng.uniform(size=(1, 1, 3, 3)), rng.uniform(size=(1, 1, 3, 3)) > 0.3) for _ in range(2)]
    smooth = [Tensor(0.2, dtype=np.float64), Tensor(0.4, dtype=np.float64)]
    d2s = Tensor(1.3, dtype=np.float64)
    total, parts = total_loss(maps, smooth, d2s, 40, cfg)
    ph = sum((m.values.data * m.mask).sum() / m.mask.sum() for m in maps)
    expected = ph + 1e-3 * 0.2 + 5e-4 * 0.4 + 0.005 * 0.4 * 1.3
    assert total.item() == pytest.approx(expected, abs=1e-6)
    assert parts["lambda_d2s"] == pytest.approx(0.002)
    with pytest.raises(ValueError):
        total_loss(maps[:1], smooth, d2s, 0, cfg)


def test_zero_lambda_is_baseline_loss():
    cfg = LossConfig(n_scales=1, lambda_sm_base=0.0, lambda_d2s_final=0.0)
    m = loss_map(np.full((1, 1, 2, 2), 0.25))
    with_d2s, _ = total_loss([m], [Tensor(0.0)], Tensor(5.0), 10, cfg)
    assert with_d2s.item() == m.masked_mean().item()
