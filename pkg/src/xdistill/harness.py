"""Optimizer, training loop, depth metrics and ablation runs."""

from __future__ import annotations

import csv
import ctypes
import dataclasses
import hashlib
import io as _io
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import io
from .autograd import Tensor, backward, mean
from .geometry import scale_disparity_pyramid, synthesize_view, warp_coordinates
from .losses import (
    LocalStats,
    LossConfig,
    PerPixelLossMap,
    d2s_distillation_loss,
    local_stats,
    min_reprojection_automask,
    photometric_loss,
    smoothness_loss,
    total_loss,
)
from .networks import (
    MAX_DEPTH,
    MIN_DEPTH,
    DepthNetwork,
    PoseNetwork,
    build_d2s_variant,
    d2s_input,
    disparity_to_depth,
)
from .scenes import SceneDataset, SceneParams, epoch_order
from .semantics import FrozenTeacher, get_scheme, segmentation_accuracy

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, Optional[np.ndarray]], state: AdamState,
              lr: float) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update.  Missing gradients count as zero.

    Returns new parameter arrays and a new state; the inputs are not modified.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    t = state.step + 1
    new_state = AdamState(t, {}, {})
    new_params = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        g = g.astype(p.dtype, copy=False)
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * g * g
        m_hat = m / (1 - ADAM_BETA1**t)
        v_hat = v / (1 - ADAM_BETA2**t)
        new_params[name] = (p - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)).astype(p.dtype)
        new_state.m[name] = m.astype(p.dtype)
        new_state.v[name] = v.astype(p.dtype)
    return new_params, new_state


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    # loss
    alpha: float = 0.85
    lambda_sm_base: float = 1e-3
    n_scales: int = 4
    lambda_d2s_final: float = 0.005
    schedule: str = "linear"
    use_min_reprojection: bool = True
    use_automask: bool = True
    # optimisation
    lr: float = 1e-3
    steps: int = 5000
    batch_size: int = 4
    seed: int = 0
    # distillation
    distill_enabled: bool = True
    grouping: str = "proposed4"
    d2s_variant: str = "standard_2conv"
    d2s_input: str = "disparity"
    noise_rate: float = 0.0
    # networks
    backbone: str = "small"
    # data
    height: int = 64
    width: int = 128
    num_scenes: int = 64
    eval_scenes: int = 16
    data_seed: int = 1234
    n_boxes: int = 6
    n_poles: int = 3
    texture_freq: float = 1.0
    max_translation: float = 0.3
    max_yaw_deg: float = 2.0
    camera_height: float = 1.5
    data_dir: str = ""
    # output
    output_dir: str = "runs"
    checkpoint_interval: int = 500
    eval_interval: int = 0

    def __post_init__(self):
        self.loss_config()
        self.scene_params()
        get_scheme(self.grouping)
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ValueError("noise_rate must lie in [0, 1)")
        if self.checkpoint_interval < 0 or self.eval_interval < 0:
            raise ValueError("intervals must be non-negative")

    def loss_config(self) -> LossConfig:
        return LossConfig(alpha=self.alpha, lambda_sm_base=self.lambda_sm_base, n_scales=self.n_scales,
                          lambda_d2s_final=self.lambda_d2s_final, schedule=self.schedule, total_steps=self.steps,
                          use_min_reprojection=self.use_min_reprojection, use_automask=self.use_automask)

    def scene_params(self) -> SceneParams:
        return SceneParams(height=self.height, width=self.width, n_boxes=self.n_boxes, n_poles=self.n_poles,
                           texture_freq=self.texture_freq, max_translation=self.max_translation,
                           max_yaw_deg=self.max_yaw_deg, camera_height=self.camera_height)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def config_hash(self) -> str:
        """Hash of everything that affects results, excluding seed and output location."""
        skip = {"seed", "output_dir"}
        text = "\n".join(f"{f.name}={getattr(self, f.name)!r}" for f in fields(self) if f.name not in skip)
        return hashlib.sha256(text.encode()).hexdigest()[:10]

    def run_dir(self) -> Path:
        return Path(self.output_dir) / f"{self.config_hash()}_seed{self.seed}"

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format_value(getattr(self, f.name))}\n" for f in fields(self))


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse_value(raw: str, kind, key: str):
    if kind in (bool, "bool"):
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if kind in (int, "int"):
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"{key}: expected an integer, got {raw!r}") from None
    if kind in (float, "float"):
        try:
            return float(raw)
        except ValueError:
            raise ValueError(f"{key}: expected a number, got {raw!r}") from None
    return raw


FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def parse_config_text(text: str) -> Dict[str, object]:
    """``key = value`` lines with ``#`` comments; keys must be TrainConfig fields."""
    values: Dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        if key not in FIELD_TYPES:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _parse_value(raw, FIELD_TYPES[key], key)
    return values


def load_config(path=None, **overrides) -> TrainConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    for key, v in overrides.items():
        if key not in FIELD_TYPES:
            raise ValueError(f"unknown config key {key!r}")
        if v is not None:
            values[key] = v
    return TrainConfig(**values)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float

    def as_dict(self) -> Dict[str, float]:
        return dataclasses.asdict(self)

    @classmethod
    def average(cls, reports: Sequence["MetricsReport"]) -> "MetricsReport":
        if not reports:
            raise ValueError("no reports to average")
        keys = [f.name for f in fields(cls)]
        return cls(**{k: float(np.mean([getattr(r, k) for r in reports])) for k in keys})


def evaluate_depth(pred, gt, median_scale: bool = True,
                   clamp_range: Tuple[float, float] = (MIN_DEPTH, MAX_DEPTH)) -> MetricsReport:
    """Standard depth errors over pixels with finite positive ground truth."""
    pred = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    gt = np.asarray(getattr(gt, "data", gt), dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    valid = np.isfinite(gt) & (gt > 0) & np.isfinite(pred)
    if not valid.any():
        raise ValueError("no valid ground-truth pixels to evaluate")
    p, g = pred[valid], gt[valid]
    if median_scale:
        med = np.median(p)
        if med <= 0:
            raise ValueError("median prediction must be positive for median scaling")
        p = p * (np.median(g) / med)
    p = np.clip(p, *clamp_range)
    ratio = np.maximum(p / g, g / p)
    return MetricsReport(
        abs_rel=float(np.mean(np.abs(p - g) / g)),
        sq_rel=float(np.mean((p - g) ** 2 / g)),
        rmse=float(np.sqrt(np.mean((p - g) ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
    )


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def tune_allocator() -> bool:
    """Keep large numpy temporaries on the heap instead of fresh mmaps (glibc only).

    Training allocates and frees the same multi-megabyte arrays every step;
    with glibc's defaults each one is a new mapping and pays page faults on
    first touch.  Returns whether the tuning was applied.
    """
    try:
        libc = ctypes.CDLL("libc.so.6")
    except OSError:
        return False
    m_trim_threshold, m_top_pad, m_mmap_threshold = -1, -2, -3
    ok = libc.mallopt(m_mmap_threshold, 1 << 30) and libc.mallopt(m_trim_threshold, 1 << 30)
    libc.mallopt(m_top_pad, 1 << 28)
    return bool(ok)

LOG_COLUMNS = ("step", "total", "photometric", "smoothness", "d2s", "lambda_d2s")


class TrainingDiverged(FloatingPointError):
    pass


def _downsample(images: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return images
    n, c, h, w = images.shape
    return images.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))


class Trainer:
    """Joint training of depth, pose and (optionally) the D2S translator."""

    def __init__(self, config: TrainConfig, dataset=None, eval_dataset=None):
        tune_allocator()
        self.config = config
        self.loss_config = config.loss_config()
        params = config.scene_params()
        self.dataset = dataset if dataset is not None else _make_dataset(config, params)
        self.eval_dataset = eval_dataset
        rng = np.random.default_rng(config.seed)
        self.depth_net = DepthNetwork(rng, n_scales=config.n_scales, backbone=config.backbone,
                                      input_size=(config.height, config.width))
        self.pose_net = PoseNetwork(rng)
        self.scheme = get_scheme(config.grouping)
        self.d2s_net = build_d2s_variant(config.d2s_variant, rng, num_groups=self.scheme.num_groups)
        self.teacher = FrozenTeacher(self.scheme, config.noise_rate, seed=config.seed)
        self.optimizer = AdamState()
        self.step = 0
        self.history: List[Dict[str, float]] = []
        # per-sample target statistics and identity losses; they depend on data only
        self._static: Dict[int, Tuple[np.ndarray, np.ndarray, np.ndarray]] = {}

    # -- parameters -------------------------------------------------------

    def modules(self):
        return {"depth": self.depth_net, "pose": self.pose_net, "d2s": self.d2s_net}

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        out = []
        for prefix, mod in self.modules().items():
            out += [(f"{prefix}.{n}", p) for n, p in mod.named_parameters()]
        return out

    def state_entries(self) -> List[Tuple[str, np.ndarray]]:
        entries = []
        for prefix, mod in self.modules().items():
            entries += [(f"{prefix}.{n}", v) for n, v in mod.state_dict().items()]
        for name, _ in self.named_parameters():
            if name in self.optimizer.m:
                entries.append((f"adam.m.{name}", self.optimizer.m[name]))
                entries.append((f"adam.v.{name}", self.optimizer.v[name]))
        entries.append(("adam.step", np.array([self.optimizer.step], dtype=np.float32)))
        entries.append(("trainer.step", np.array([self.step], dtype=np.float32)))
        return entries

    def save_checkpoint(self, path) -> None:
        io.write_checkpoint(path, self.state_entries())

    def load_checkpoint(self, path) -> None:
        state = io.load_state(path)
        for prefix, mod in self.modules().items():
            sub = {k[len(prefix) + 1:]: v for k, v in state.items() if k.startswith(prefix + ".")}
            mod.load_state_dict(sub)
        m, v = {}, {}
        for name, _ in self.named_parameters():
            if f"adam.m.{name}" in state:
                m[name] = state[f"adam.m.{name}"]
                v[name] = state[f"adam.v.{name}"]
        self.optimizer = AdamState(int(state["adam.step"][0]), m, v)
        self.step = int(state["trainer.step"][0])

    # -- data ---------------------------------------------------------------

    def batch_indices(self, step: int) -> List[int]:
        """Sample indices for ``step``: consecutive slices of per-epoch seeded permutations."""
        n, b = len(self.dataset), self.config.batch_size
        out = []
        for pos in range(step * b, (step + 1) * b):
            epoch, offset = divmod(pos, n)
            out.append(int(epoch_order(n, self.config.seed, epoch)[offset]))
        return out

    def batch(self, step: int):
        idx = self.batch_indices(step)
        samples = [self.dataset[i] for i in idx]
        frames = [np.stack([s.frames[j] for s in samples]).astype(np.float32) for j in range(3)]
        teacher = np.stack([self.teacher(i, s.gt_classes) for i, s in zip(idx, samples)])
        teacher.setflags(write=False)
        return idx, samples, frames, teacher

    # -- forward ------------------------------------------------------------

    def _static_terms(self, frames, indices=None):
        """Target window statistics and unwarped-source losses, one sample at a time.

        Computing them per sample keeps the numbers identical whether or not
        they come from the cache.
        """
        prev, target, nxt = frames
        rows = []
        for j in range(target.shape[0]):
            key = None if indices is None else int(indices[j])
            if key is not None and key in self._static:
                rows.append(self._static[key])
                continue
            t = target[j : j + 1]
            st = local_stats(t)
            ident = [photometric_loss(t, src[j : j + 1], self.loss_config.alpha, target_stats=st).values.data
                     for src in (prev, nxt)]
            row = (np.concatenate([st.mean, st.var]), ident[0], ident[1])
            if key is not None:
                self._static[key] = row
            rows.append(row)
        c = target.shape[1]
        both = np.concatenate([r[0] for r in rows]).reshape(len(rows), 2, c, *target.shape[2:])
        stats = LocalStats(both[:, 0], both[:, 1])
        ones = np.ones((target.shape[0], 1, *target.shape[2:]), dtype=target.dtype)
        identity = [PerPixelLossMap(Tensor(np.concatenate([r[k] for r in rows])), ones) for k in (1, 2)]
        return stats, identity

    def compute_losses(self, step: int, frames, teacher: Optional[np.ndarray], lambda_override=None,
                       indices=None):
        """Forward pass; returns (loss tensor, logged components, auxiliaries).

        ``indices`` names the dataset samples in the batch so that their
        data-only loss terms can be cached.
        """
        cfg, lc = self.config, self.loss_config
        prev, target, nxt = frames
        h, w = target.shape[2:]
        intr = self.dataset[0].intrinsics if len(self.dataset) else cfg.scene_params().intrinsics()
        disps = self.depth_net(target)
        sources = (prev, nxt)
        poses = [self.pose_net(target, src) for src in sources]
        stats, identity = self._static_terms(frames, indices)
        photo_maps: List[PerPixelLossMap] = []
        smooth_terms: List[Tensor] = []
        for k, disp in enumerate(disps):
            depth = disparity_to_depth(scale_disparity_pyramid(disp, (h, w)))
            per_source = []
            for src, pose in zip(sources, poses):
                coords, front = warp_coordinates(depth, intr, (pose.rotation, pose.translation))
                warped, valid = synthesize_view(src, coords, front)
                per_source.append(photometric_loss(target, warped, lc.alpha, valid.data, stats))
            photo_maps.append(min_reprojection_automask(per_source, identity, lc.use_min_reprojection,
                                                        lc.use_automask))
            smooth_terms.append(smoothness_loss(disp, _downsample(target, 2**k)))
        d2s_loss = None
        logits = None
        if cfg.distill_enabled and teacher is not None:
            if not isinstance(teacher, np.ndarray) or isinstance(teacher, Tensor):
                raise TypeError("teacher labels must be a plain array")
            logits = self.d2s_net(d2s_input(disps[0], cfg.d2s_input))
            d2s_loss = d2s_distillation_loss(logits, teacher)
        lc_step = lc if lambda_override is None else dataclasses.replace(
            lc, lambda_d2s_final=lambda_override, schedule="constant")
        loss, parts = total_loss(photo_maps, smooth_terms, d2s_loss, step, lc_step)
        aux = {"disps": disps, "logits": logits, "d2s_loss": d2s_loss, "photo_maps": photo_maps}
        return loss, parts, aux

    def train_step(self) -> Dict[str, float]:
        step = self.step
        idx, _, frames, teacher = self.batch(step)
        if teacher.flags.writeable:
            raise AssertionError("teacher labels must be frozen")
        self.depth_net.train()
        self.d2s_net.train()
        loss, parts, _ = self.compute_losses(step, frames, teacher, indices=idx)
        if not math.isfinite(parts["total"]):
            raise TrainingDiverged(f"non-finite loss at step {step}: {parts}")
        backward(loss)
        named = self.named_parameters()
        values = {n: p.data for n, p in named}
        grads = {n: p.grad for n, p in named}
        new_values, self.optimizer = adam_step(values, grads, self.optimizer, self.config.lr)
        for n, p in named:
            p.data = new_values[n]
            p.grad = None
        self.step += 1
        row = {"step": step, **parts}
        self.history.append(row)
        return row

    def train(self, steps: Optional[int] = None, run_dir=None, log: bool = True, callback=None) -> List[Dict[str, float]]:
        """Train until ``steps`` total steps (default: config.steps), writing logs and checkpoints."""
        target = self.config.steps if steps is None else steps
        run_dir = Path(run_dir) if run_dir is not None else None
        log_file = None
        if run_dir is not None and log:
            run_dir.mkdir(parents=True, exist_ok=True)
            (run_dir / "config.cfg").write_text(self.config.to_text())
            log_path = run_dir / "log.csv"
            fresh = self.step == 0 or not log_path.exists()
            log_file = open(log_path, "w" if fresh else "a", newline="")
            if fresh:
                log_file.write(",".join(LOG_COLUMNS) + "\n")
        try:
            while self.step < target:
                row = self.train_step()
                if log_file is not None:
                    log_file.write(format_log_row(row))
                    log_file.flush()
                ci = self.config.checkpoint_interval
                if run_dir is not None and ci and self.step % ci == 0:
                    self.save_checkpoint(run_dir / f"checkpoint_{self.step:06d}.xdc")
                if callback is not None:
                    callback(self, row)
        finally:
            if log_file is not None:
                log_file.close()
        if run_dir is not None:
            self.save_checkpoint(run_dir / "final.xdc")
        return self.history

    # -- evaluation -----------------------------------------------------------

    def predict_depth(self, images: np.ndarray) -> np.ndarray:
        self.depth_net.eval()
        disp = self.depth_net(images.astype(np.float32))[0]
        self.depth_net.train()
        return disparity_to_depth(disp).data[:, 0]

    def evaluate(self, dataset=None, median_scale: bool = True, batch: int = 8) -> MetricsReport:
        ds = dataset if dataset is not None else self.eval_dataset
        if ds is None:
            ds = _make_dataset(self.config, self.config.scene_params(), eval_split=True)
            self.eval_dataset = ds
        reports = []
        for start in range(0, len(ds), batch):
            samples = [ds[i] for i in range(start, min(start + batch, len(ds)))]
            pred = self.predict_depth(np.stack([s.frames[1] for s in samples]))
            reports += [evaluate_depth(p, s.gt_depth_t, median_scale) for p, s in zip(pred, samples)]
        return MetricsReport.average(reports)

    def d2s_accuracy(self, dataset=None, batch: int = 8) -> float:
        """Pixel accuracy of D2S(depth_net(I_t)) against the teacher labels."""
        ds = dataset if dataset is not None else self.dataset
        self.depth_net.eval()
        self.d2s_net.eval()
        correct = total = 0.0
        for start in range(0, len(ds), batch):
            idx = list(range(start, min(start + batch, len(ds))))
            imgs = np.stack([ds[i].frames[1] for i in idx]).astype(np.float32)
            logits = self.d2s_net(d2s_input(self.depth_net(imgs)[0], self.config.d2s_input)).data
            for j, i in enumerate(idx):
                ref = self.teacher(i, ds[i].gt_classes)
                acc = segmentation_accuracy(logits[j].argmax(axis=0), ref)
                correct += acc * ref.size
                total += ref.size
        self.depth_net.train()
        self.d2s_net.train()
        return correct / total


def format_log_row(row: Dict[str, float]) -> str:
    return ",".join([str(int(row["step"]))] + [repr(float(row[k])) for k in LOG_COLUMNS[1:]]) + "\n"


class _DirectoryDataset:
    def __init__(self, root):
        self.root = Path(root)
        self.n = io.count_samples(root)
        if self.n < 1:
            raise FileNotFoundError(f"no samples under {root}")
        self._cache = {}

    def __len__(self):
        return self.n

    def __getitem__(self, i):
        if i not in self._cache:
            self._cache[i] = io.read_sample(self.root, i)
        return self._cache[i]


def _make_dataset(config: TrainConfig, params: SceneParams, eval_split: bool = False):
    if config.data_dir and not eval_split:
        return _DirectoryDataset(config.data_dir)
    if eval_split:
        return SceneDataset(config.eval_scenes, params, config.data_seed + 1)
    return SceneDataset(config.num_scenes, params, config.data_seed)


def train(config: TrainConfig, run_dir=None) -> Trainer:
    trainer = Trainer(config)
    trainer.train(run_dir=run_dir if run_dir is not None else config.run_dir())
    return trainer


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

ABLATION_AXES = ("grouping", "d2s_depth", "schedule_weight", "backbone_size")


def ablation_variants(axis: str) -> List[Tuple[str, Dict[str, object]]]:
    base = [("baseline", {"distill_enabled": False})]
    if axis == "grouping":
        return base + [(g, {"grouping": g}) for g in ("foreback2", "proposed4", "full19")]
    if axis == "d2s_depth":
        return base + [(v, {"d2s_variant": v}) for v in ("pointwise_only", "standard_2conv", "deep_4conv")]
    if axis == "schedule_weight":
        return base + [("constant_0.0050", {"schedule": "constant", "lambda_d2s_final": 0.005})] + [
            (f"linear_0-{w:.4f}", {"schedule": "linear", "lambda_d2s_final": w}) for w in (0.004, 0.005, 0.006)]
    if axis == "backbone_size":
        out = []
        for b in ("tiny", "small"):
            out += [(f"{b}_baseline", {"backbone": b, "distill_enabled": False}),
                    (f"{b}_distill", {"backbone": b})]
        return out
    raise ValueError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")


@dataclass
class AblationResult:
    axis: str
    rows: List[Dict[str, object]]  # one row per variant, metrics averaged over seeds
    per_seed: List[Dict[str, object]]
    flags: List[str]

    def to_csv(self) -> str:
        buf = _io.StringIO()
        cols = list(self.rows[0].keys())
        writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.rows)
        return buf.getvalue()

    def row(self, variant: str) -> Dict[str, object]:
        for r in self.rows:
            if r["variant"] == variant:
                return r
        raise KeyError(variant)


def run_ablation(axis: str, config: TrainConfig, seeds: Sequence[int] = (0, 1, 2), out_dir=None,
                 progress=None, variants: Optional[Sequence[str]] = None) -> AblationResult:
    """Train every variant of ``axis`` for each seed and tabulate evaluation metrics.

    ``variants`` restricts the run to the named variants; baselines are always kept.
    """
    all_variants = ablation_variants(axis)
    if variants is None:
        variants = all_variants
    else:
        known = {name for name, _ in all_variants}
        unknown = sorted(set(variants) - known)
        if unknown:
            raise ValueError(f"unknown {axis} variants {unknown}; choose from {sorted(known)}")
        variants = [(n, c) for n, c in all_variants if n in variants or n.endswith("baseline")]
    if not seeds:
        raise ValueError("need at least one seed")
    per_seed = []
    eval_ds = _make_dataset(config, config.scene_params(), eval_split=True)
    train_ds = _make_dataset(config, config.scene_params())
    for name, changes in variants:
        for seed in seeds:
            cfg = config.replace(seed=seed, **changes)
            trainer = Trainer(cfg, dataset=train_ds, eval_dataset=eval_ds)
            run_dir = None if out_dir is None else Path(out_dir) / f"{axis}_{name}_seed{seed}"
            trainer.train(run_dir=run_dir, log=run_dir is not None)
            report = trainer.evaluate()
            per_seed.append({"variant": name, "seed": seed, **report.as_dict(),
                             "final_photometric": trainer.history[-1]["photometric"]})
            if progress is not None:
                progress(per_seed[-1])
    rows = []
    metric_keys = list(MetricsReport.__dataclass_fields__)
    for name, _ in variants:
        mine = [r for r in per_seed if r["variant"] == name]
        row = {"axis": axis, "variant": name, "seeds": len(mine)}
        row.update({k: float(np.mean([r[k] for r in mine])) for k in metric_keys})
        rows.append(row)
    flags = []
    baselines = {r["variant"]: r["abs_rel"] for r in rows if r["variant"].endswith("baseline")}
    for row in rows:
        base_name = row["variant"].split("_")[0] + "_baseline" if axis == "backbone_size" else "baseline"
        row["abs_rel_gain_vs_baseline"] = baselines[base_name] - row["abs_rel"]
    names = {r["variant"] for r in rows}
    if axis == "d2s_depth" and {"standard_2conv", "deep_4conv"} <= names:
        std, deep = _gain(rows, "standard_2conv"), _gain(rows, "deep_4conv")
        if deep > std:
            flags.append(f"inversion: deep_4conv gain {deep:.4f} exceeds standard_2conv gain {std:.4f}")
    result = AblationResult(axis, rows, per_seed, flags)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / f"ablation_{axis}.csv").write_text(result.to_csv())
    return result


def _gain(rows, variant: str) -> float:
    for r in rows:
        if r["variant"] == variant:
            return float(r["abs_rel_gain_vs_baseline"])
    raise KeyError(variant)
