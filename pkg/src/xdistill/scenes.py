"""Ray-cast street-like scenes with exact depth, poses and semantic labels.

The world frame is the camera frame of the middle view ``t``: x right, y
down, z forward.  The scene holds a textured ground plane at ``y =
camera_height``, axis-aligned boxes standing on it (people and vehicles),
thin poles carrying signs, and a backdrop wall (buildings below a skyline,
sky above).  Textures are attached to world coordinates, so every view of a
surface point sees the same colour and the views are related exactly by the
pinhole warp.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .autograd import Tensor, bilinear_sample
from .geometry import CameraIntrinsics, RigidPose, synthesize_view, warp_coordinates
from .semantics import CLASS_ID, regroup

_NO_HIT = np.inf


@dataclass(frozen=True)
class SceneParams:
    height: int = 64
    width: int = 128
    n_boxes: int = 6
    n_poles: int = 3
    texture_freq: float = 1.0  # lattice cells per metre on near surfaces
    min_translation: float = 0.05
    max_translation: float = 0.3
    max_yaw_deg: float = 2.0
    camera_height: float = 1.5
    backdrop_distance: float = 40.0
    focal_ratio: float = 0.58  # fx = fy = focal_ratio * width

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("image size must be positive")
        if self.camera_height <= 0:
            raise ValueError("camera must be above the ground plane (camera_height > 0)")
        if self.n_boxes < 0 or self.n_poles < 0:
            raise ValueError("object counts must be non-negative")
        if not 0 <= self.min_translation <= self.max_translation:
            raise ValueError("need 0 <= min_translation <= max_translation")
        # keeps most of the target view inside both neighbours
        if self.max_translation > 1.0 or self.max_yaw_deg > 5.0:
            raise ValueError("camera motion too large for reliable co-visibility")
        if self.texture_freq <= 0 or self.backdrop_distance <= 5.0:
            raise ValueError("texture_freq must be positive and the backdrop farther than 5 m")

    def intrinsics(self) -> CameraIntrinsics:
        f = self.focal_ratio * self.width
        return CameraIntrinsics(f, f, (self.width - 1) / 2.0, (self.height - 1) / 2.0)


@dataclass
class Box:
    lo: np.ndarray  # (3,) min corner
    hi: np.ndarray  # (3,) max corner
    class_id: int
    color: np.ndarray  # (3,)
    texture: int  # index into the layout's noise tables


@dataclass
class SceneLayout:
    params: SceneParams
    boxes: List[Box]
    skyline: np.ndarray  # (n_segments, 3): x_start, top y, class id
    noise: np.ndarray  # (n_tables, T, T) lattice values in [0, 1]
    ground_colors: Dict[int, np.ndarray]
    backdrop_colors: Dict[int, np.ndarray]


@dataclass
class SceneSample:
    frames: Tuple[np.ndarray, np.ndarray, np.ndarray]  # I_{t-1}, I_t, I_{t+1}, each (3,H,W) in [0,1]
    gt_depth_t: np.ndarray  # (H,W) metres
    gt_poses: Tuple[RigidPose, RigidPose]  # T_{t->t-1}, T_{t->t+1}
    intrinsics: CameraIntrinsics
    gt_classes: np.ndarray  # (H,W) 19-class train ids
    gt_groups: np.ndarray  # (H,W) proposed4 group ids
    seed: int
    source_depths: Optional[Tuple[np.ndarray, np.ndarray]] = field(default=None, repr=False)

    @property
    def target(self) -> np.ndarray:
        return self.frames[1]


# ---------------------------------------------------------------------------
# layout
# ---------------------------------------------------------------------------

_BOX_CLASSES = {
    # name: (width, height, length) ranges in metres
    "car": ((1.6, 1.9), (1.3, 1.6), (3.5, 4.5)),
    "truck": ((2.0, 2.5), (2.5, 3.2), (5.0, 7.0)),
    "bus": ((2.4, 2.6), (2.8, 3.2), (8.0, 11.0)),
    "person": ((0.4, 0.6), (1.6, 1.9), (0.4, 0.6)),
    "bicycle": ((0.5, 0.7), (1.0, 1.2), (1.5, 1.8)),
}
_BOX_WEIGHTS = np.array([0.45, 0.12, 0.08, 0.2, 0.15])
_TABLE = 64


def _random_color(rng: np.random.Generator, lo: float = 0.15, hi: float = 0.85) -> np.ndarray:
    return rng.uniform(lo, hi, size=3)


def _overlaps(lo: np.ndarray, hi: np.ndarray, boxes: List[Box], margin: float = 0.3) -> bool:
    for b in boxes:
        if (lo[0] < b.hi[0] + margin and hi[0] > b.lo[0] - margin
                and lo[2] < b.hi[2] + margin and hi[2] > b.lo[2] - margin):
            return True
    return False


def make_layout(params: SceneParams, rng: np.random.Generator) -> SceneLayout:
    h = params.camera_height
    boxes: List[Box] = []
    n_tables = 4 + params.n_boxes + 2 * params.n_poles
    noise = rng.random((n_tables, _TABLE, _TABLE))
    names = list(_BOX_CLASSES)
    tex = 4
    # nearest a box may start, in front of the furthest-back camera
    z_min = params.max_translation + 3.0
    for _ in range(params.n_boxes):
        for _attempt in range(20):
            name = names[rng.choice(len(names), p=_BOX_WEIGHTS)]
            (w0, w1), (h0, h1), (l0, l1) = _BOX_CLASSES[name]
            bw, bh, bl = rng.uniform(w0, w1), rng.uniform(h0, h1), rng.uniform(l0, l1)
            z0 = rng.uniform(z_min, 25.0)
            x_c = rng.uniform(-0.5, 0.5) * z0 * params.width / (params.focal_ratio * params.width) * 0.9
            lo = np.array([x_c - bw / 2, h - bh, z0])
            hi = np.array([x_c + bw / 2, h, z0 + bl])
            if not _overlaps(lo, hi, boxes):
                boxes.append(Box(lo, hi, CLASS_ID[name], _random_color(rng), tex))
                break
        tex += 1
    for _ in range(params.n_poles):
        for _attempt in range(20):
            z0 = rng.uniform(z_min, 20.0)
            side = rng.choice([-1.0, 1.0])
            x_c = side * rng.uniform(0.15, 0.45) * z0 / params.focal_ratio
            ph = rng.uniform(3.0, 5.0)
            lo = np.array([x_c - 0.08, h - ph, z0])
            hi = np.array([x_c + 0.08, h, z0 + 0.16])
            sign_lo = np.array([x_c - 0.35, h - ph - 0.6, z0 - 0.02])
            sign_hi = np.array([x_c + 0.35, h - ph + 0.1, z0 + 0.04])
            if not _overlaps(sign_lo, sign_hi, boxes):
                boxes.append(Box(lo, hi, CLASS_ID["pole"], _random_color(rng, 0.3, 0.6), tex))
                boxes.append(Box(sign_lo, sign_hi, CLASS_ID["traffic_sign"], _random_color(rng), tex + 1))
                break
        tex += 2
    # skyline: piecewise-constant building tops along x, some vegetation
    n_seg = 8
    span = params.backdrop_distance * 0.7 / params.focal_ratio
    starts = np.sort(rng.uniform(-span, span, size=n_seg - 1))
    starts = np.concatenate([[-np.inf], starts])
    tops = h - rng.uniform(6.0, 25.0, size=n_seg)
    kinds = rng.choice([CLASS_ID["building"], CLASS_ID["vegetation"]], size=n_seg, p=[0.7, 0.3])
    skyline = np.stack([starts, tops, kinds.astype(float)], axis=1)
    ground_colors = {CLASS_ID["road"]: _random_color(rng, 0.25, 0.5), CLASS_ID["sidewalk"]: _random_color(rng, 0.45, 0.75)}
    backdrop_colors = {
        CLASS_ID["building"]: _random_color(rng, 0.2, 0.7),
        CLASS_ID["vegetation"]: np.array([0.15, 0.45, 0.15]) + rng.uniform(-0.05, 0.05, 3),
        CLASS_ID["sky"]: np.array([0.55, 0.7, 0.9]) + rng.uniform(-0.05, 0.05, 3),
    }
    return SceneLayout(params, boxes, skyline, noise, ground_colors, backdrop_colors)


# ---------------------------------------------------------------------------
# texture
# ---------------------------------------------------------------------------


def _value_noise(table: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Smooth periodic value noise on a lattice of unit spacing, two octaves."""
    out = np.zeros_like(u)
    amp_total = 0.0
    for octave, amp in ((1.0, 0.65), (2.0, 0.35)):
        uu, vv = u * octave, v * octave
        iu, iv = np.floor(uu), np.floor(vv)
        fu, fv = uu - iu, vv - iv
        fu = fu * fu * (3 - 2 * fu)
        fv = fv * fv * (3 - 2 * fv)
        i0 = iu.astype(np.int64) % _TABLE
        j0 = iv.astype(np.int64) % _TABLE
        i1, j1 = (i0 + 1) % _TABLE, (j0 + 1) % _TABLE
        a = table[j0, i0] * (1 - fu) + table[j0, i1] * fu
        b = table[j1, i0] * (1 - fu) + table[j1, i1] * fu
        out += amp * (a * (1 - fv) + b * fv)
        amp_total += amp
    return out / amp_total


def _shade(color: np.ndarray, n: np.ndarray, contrast: float = 0.8) -> np.ndarray:
    """Colour modulated by noise ``n`` in [0,1]; returns (P,3)."""
    tint = 1.0 - contrast / 2 + contrast * n[:, None]
    return np.clip(color[None, :] * tint * 1.2, 0.0, 1.0)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _ray_box(origin: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Entry distance along each ray (inf on miss) and the axis of the entry face."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo[None] - origin[None]) * inv
        t1 = (hi[None] - origin[None]) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    tmin = np.where(np.isnan(tmin), -np.inf, tmin)
    tmax = np.where(np.isnan(tmax), np.inf, tmax)
    t_near = tmin.max(axis=1)
    t_far = tmax.min(axis=1)
    axis = tmin.argmax(axis=1)
    hit = (t_near <= t_far) & (t_near > 1e-6)
    return np.where(hit, t_near, _NO_HIT), axis


def render_view(layout: SceneLayout, cam_to_world: RigidPose) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Image (3,H,W), depth along the optical axis (H,W) and class ids (H,W).

    Depth and labels are sampled at pixel centres.  Colour is the average of
    ``SUPERSAMPLE**2`` sub-pixel rays, which band-limits the texture so that
    bilinear resampling of one view approximates another closely.
    """
    p = layout.params
    hgt, wid = p.height, p.width
    _, depth, classes = _cast(layout, cam_to_world, _pixel_rays(hgt, wid, 1))
    ss = SUPERSAMPLE
    color, _, _ = _cast(layout, cam_to_world, _pixel_rays(hgt, wid, ss))
    image = color.reshape(hgt, ss, wid, ss, 3).mean(axis=(1, 3)).transpose(2, 0, 1)
    return image, depth.reshape(hgt, wid), classes.reshape(hgt, wid)


SUPERSAMPLE = 2


def _pixel_rays(hgt: int, wid: int, ss: int) -> np.ndarray:
    """Pixel positions (3, H*ss*W*ss) in row-major order of the supersampled grid."""
    offs = (np.arange(ss) + 0.5) / ss - 0.5
    ys = (np.arange(hgt)[:, None] + offs[None]).ravel()
    xs = (np.arange(wid)[:, None] + offs[None]).ravel()
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), np.ones(gx.size)])


def _cast(layout: SceneLayout, cam_to_world: RigidPose, pix: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    p = layout.params
    k = p.intrinsics()
    rays_cam = k.inverse @ pix  # z component is exactly 1, so ray length parameter == depth
    dirs = (cam_to_world.rotation @ rays_cam).T
    origin = cam_to_world.translation
    n = dirs.shape[0]
    best_t = np.full(n, _NO_HIT)
    best_obj = np.full(n, -1, dtype=np.int64)  # -1 backdrop, -2 ground, >= 0 box index
    best_axis = np.zeros(n, dtype=np.int64)

    with np.errstate(divide="ignore", invalid="ignore"):
        t_back = (p.backdrop_distance - origin[2]) / dirs[:, 2]
    t_back = np.where(t_back > 0, t_back, _NO_HIT)
    best_t = np.minimum(best_t, t_back)

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = (p.camera_height - origin[1]) / dirs[:, 1]
    t_ground = np.where((dirs[:, 1] > 0) & (t_ground > 0), t_ground, _NO_HIT)
    closer = t_ground < best_t
    best_t = np.where(closer, t_ground, best_t)
    best_obj = np.where(closer, -2, best_obj)

    for i, box in enumerate(layout.boxes):
        t_box, axis = _ray_box(origin, dirs, box.lo, box.hi)
        closer = t_box < best_t
        best_t = np.where(closer, t_box, best_t)
        best_obj = np.where(closer, i, best_obj)
        best_axis = np.where(closer, axis, best_axis)

    if not np.all(np.isfinite(best_t)):
        raise RuntimeError("a camera ray escaped the scene")
    pts = origin[None] + dirs * best_t[:, None]
    color = np.zeros((n, 3))
    classes = np.zeros(n, dtype=np.int64)
    f = p.texture_freq

    sel = best_obj == -2
    if sel.any():
        gx, gz = pts[sel, 0], pts[sel, 2]
        road = np.abs(gx) < 4.0
        cls = np.where(road, CLASS_ID["road"], CLASS_ID["sidewalk"])
        nz = np.where(road, _value_noise(layout.noise[0], gx * f * 2, gz * f * 2),
                      _value_noise(layout.noise[1], gx * f * 2, gz * f * 2))
        base = np.where(road[:, None], layout.ground_colors[CLASS_ID["road"]][None],
                        layout.ground_colors[CLASS_ID["sidewalk"]][None])
        color[sel] = np.clip(base * (0.4 + 1.0 * nz[:, None]), 0, 1)
        classes[sel] = cls

    sel = best_obj == -1
    if sel.any():
        bx, by = pts[sel, 0], pts[sel, 1]
        seg = np.searchsorted(layout.skyline[:, 0], bx, side="right") - 1
        top = layout.skyline[seg, 1]
        kind = layout.skyline[seg, 2].astype(np.int64)
        sky = by < top
        cls = np.where(sky, CLASS_ID["sky"], kind)
        nz_b = _value_noise(layout.noise[2], bx * f * 0.5, by * f * 0.5)
        nz_s = _value_noise(layout.noise[3], bx * f * 0.1, by * f * 0.1)
        out = np.empty((sel.sum(), 3))
        for cid, col in layout.backdrop_colors.items():
            m = cls == cid
            if m.any():
                contrast = 0.3 if cid == CLASS_ID["sky"] else 0.9
                out[m] = _shade(col, (nz_s if cid == CLASS_ID["sky"] else nz_b)[m], contrast)
        color[sel] = out
        classes[sel] = cls

    for i, box in enumerate(layout.boxes):
        sel = best_obj == i
        if not sel.any():
            continue
        q = pts[sel]
        ax = best_axis[sel]
        u = np.where(ax == 0, q[:, 2], q[:, 0])
        v = np.where(ax == 1, q[:, 2], q[:, 1])
        nz = _value_noise(layout.noise[box.texture], u * f * 3, v * f * 3)
        color[sel] = _shade(box.color, nz, 0.9)
        classes[sel] = box.class_id

    return color, best_t, classes


def _yaw(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def camera_path(params: SceneParams, rng: np.random.Generator) -> Tuple[RigidPose, RigidPose]:
    """Camera-to-world poses of the previous and next views (view t sits at the origin)."""
    poses = []
    for direction in (-1.0, 1.0):
        dist = rng.uniform(params.min_translation, params.max_translation)
        yaw = np.deg2rad(rng.uniform(-params.max_yaw_deg, params.max_yaw_deg))
        heading = _yaw(direction * yaw / 2)
        position = direction * (heading @ np.array([0.0, 0.0, dist]))
        poses.append(RigidPose(_yaw(direction * yaw), position))
    return poses[0], poses[1]


def generate_scene(params: SceneParams, seed: int) -> SceneSample:
    rng = np.random.default_rng(seed)
    layout = make_layout(params, rng)
    cam_prev, cam_next = camera_path(params, rng)
    img_t, depth_t, cls_t = render_view(layout, RigidPose.identity())
    img_p, depth_p, _ = render_view(layout, cam_prev)
    img_n, depth_n, _ = render_view(layout, cam_next)
    # T_{t->s} maps target camera coordinates into source camera coordinates
    poses = (cam_prev.inverse(), cam_next.inverse())
    return SceneSample(
        frames=(img_p.astype(np.float32), img_t.astype(np.float32), img_n.astype(np.float32)),
        gt_depth_t=depth_t.astype(np.float32),
        gt_poses=poses,
        intrinsics=params.intrinsics(),
        gt_classes=cls_t.astype(np.uint8),
        gt_groups=regroup(cls_t, "proposed4").labels,
        seed=seed,
        source_depths=(depth_p.astype(np.float32), depth_n.astype(np.float32)),
    )


# ---------------------------------------------------------------------------
# ground-truth consistency
# ---------------------------------------------------------------------------


def warp_consistency(sample: SceneSample, source: int = 1, occlusion_tol: float = 0.05
                     ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Synthesise the target view from a neighbour using ground-truth depth and pose.

    ``source`` is 0 for I_{t-1} and 1 for I_{t+1}.  Returns the per-pixel
    channel-mean L1 error, the resynthesised image and a mask of pixels that
    are valid for sampling and not occluded in the source view.  A pixel
    counts as occluded when the source view sees a surface more than
    ``occlusion_tol`` (relative) closer than the warped point.
    """
    if sample.source_depths is None:
        raise ValueError("sample carries no source-view depth; regenerate it with generate_scene")
    pose = sample.gt_poses[source]
    src = sample.frames[0 if source == 0 else 2]
    depth = Tensor(sample.gt_depth_t[None, None], dtype=np.float64)
    coords, front = warp_coordinates(depth, sample.intrinsics, pose)
    warped, valid = synthesize_view(Tensor(src[None], dtype=np.float64), coords, front)
    h, w = sample.gt_depth_t.shape
    k = sample.intrinsics
    # depth of each target point in the source camera
    rays = k.inverse @ np.stack([*np.meshgrid(np.arange(w), np.arange(h)), np.ones((h, w))]).reshape(3, -1)
    z_src = (pose.rotation @ (rays * sample.gt_depth_t.reshape(1, -1).astype(np.float64))
             + pose.translation[:, None])[2].reshape(h, w)
    seen, _ = bilinear_sample(Tensor(sample.source_depths[source][None, None], dtype=np.float64), coords)
    visible = np.abs(seen.data[0, 0] - z_src) < occlusion_tol * z_src
    mask = valid.data[0, 0] * visible
    err = np.abs(warped.data[0] - sample.frames[1]).mean(axis=0)
    return err, warped.data[0], mask


def masked_mean(values: np.ndarray, mask: np.ndarray) -> float:
    total = mask.sum()
    if total == 0:
        raise ValueError("empty mask")
    return float((values * mask).sum() / total)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def epoch_order(num_samples: int, seed: int, epoch: int, shuffle: bool = True) -> np.ndarray:
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    if not shuffle:
        return np.arange(num_samples)
    return np.random.default_rng(seed + epoch).permutation(num_samples)


class SceneDataset:
    """Lazily generated, cached scenes; sample ``i`` depends only on ``(seed, i)``."""

    def __init__(self, num_samples: int, params: SceneParams, seed: int):
        if num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        self.num_samples = num_samples
        self.params = params
        self.seed = seed
        self._cache: Dict[int, SceneSample] = {}

    def __len__(self) -> int:
        return self.num_samples

    def __getitem__(self, index: int) -> SceneSample:
        if not 0 <= index < self.num_samples:
            raise IndexError(index)
        sample = self._cache.get(index)
        if sample is None:
            sample = generate_scene(self.params, sample_seed(self.seed, index))
            self._cache[index] = sample
        return sample


def dataset_iter(num_samples: int, params: SceneParams, seed: int, shuffle: bool = True,
                 epoch: int = 0, dataset: Optional[SceneDataset] = None) -> Iterator[SceneSample]:
    """Samples of one epoch in a seeded order (identity order without shuffling)."""
    ds = dataset if dataset is not None else SceneDataset(num_samples, params, seed)
    for i in epoch_order(num_samples, seed, epoch, shuffle):
        yield ds[int(i)]
