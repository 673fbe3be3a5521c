"""Depth-compatible grouping of the 19 Cityscapes train ids and the frozen teacher stand-in."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

IGNORE_ID = 255

CITYSCAPES_CLASSES = (
    "road", "sidewalk", "building", "wall", "fence", "pole", "traffic_light", "traffic_sign",
    "vegetation", "terrain", "sky", "person", "rider", "car", "truck", "bus", "motorcycle",
    "bicycle", "train",
)
CLASS_ID = {name: i for i, name in enumerate(CITYSCAPES_CLASSES)}

THIN, PEOPLE_VEHICLES, BACKGROUND, GROUND = 0, 1, 2, 3
GROUP_NAMES = ("thin", "people_and_vehicles", "background", "ground")

_PROPOSED4 = {
    THIN: ("pole", "traffic_light", "traffic_sign"),
    PEOPLE_VEHICLES: ("person", "rider", "car", "truck", "bus", "motorcycle", "bicycle", "train"),
    BACKGROUND: ("building", "wall", "fence", "vegetation", "terrain", "sky"),
    GROUND: ("road", "sidewalk"),
}


@dataclass(frozen=True)
class GroupingScheme:
    name: str
    mapping: Tuple[int, ...]  # source class id -> group id

    @property
    def num_groups(self) -> int:
        return max(self.mapping) + 1

    def lut(self) -> np.ndarray:
        table = np.full(256, -1, dtype=np.int64)
        table[: len(self.mapping)] = self.mapping
        table[IGNORE_ID] = IGNORE_ID
        return table


def _proposed4() -> Tuple[int, ...]:
    mapping = [-1] * len(CITYSCAPES_CLASSES)
    for group, names in _PROPOSED4.items():
        for name in names:
            mapping[CLASS_ID[name]] = group
    return tuple(mapping)


def _foreback2() -> Tuple[int, ...]:
    # thin + people/vehicles are foreground (0), background + ground are background (1)
    return tuple(0 if g in (THIN, PEOPLE_VEHICLES) else 1 for g in _proposed4())


SCHEMES: Dict[str, GroupingScheme] = {
    "proposed4": GroupingScheme("proposed4", _proposed4()),
    "foreback2": GroupingScheme("foreback2", _foreback2()),
    "full19": GroupingScheme("full19", tuple(range(len(CITYSCAPES_CLASSES)))),
}


def get_scheme(name: str) -> GroupingScheme:
    try:
        return SCHEMES[name]
    except KeyError:
        raise ValueError(f"unknown grouping scheme {name!r}; choose from {sorted(SCHEMES)}") from None


@dataclass
class SegmentationMap:
    labels: np.ndarray  # integer (H,W) or (N,H,W)
    num_classes: int
    ignore_id: int = IGNORE_ID

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        bad = (self.labels != self.ignore_id) & ((self.labels < 0) | (self.labels >= self.num_classes))
        if np.any(bad):
            raise ValueError(f"label {int(self.labels[bad][0])} outside 0..{self.num_classes - 1}")


def regroup(labels, scheme) -> SegmentationMap:
    """Map 19-class train ids to the scheme's groups; the ignore id passes through."""
    scheme = get_scheme(scheme) if isinstance(scheme, str) else scheme
    raw = np.asarray(getattr(labels, "labels", labels))
    if raw.size and (raw.min() < 0 or raw.max() > 255):
        raise ValueError("labels must lie in 0..255")
    out = scheme.lut()[raw.astype(np.int64)]
    if np.any(out < 0):
        bad = raw[out < 0][0]
        raise ValueError(f"label {int(bad)} has no group in scheme {scheme.name!r}")
    return SegmentationMap(out.astype(np.uint8), scheme.num_groups)


@dataclass
class FrozenTeacher:
    """Ground-truth labels, optionally corrupted, computed once per sample and reused.

    ``noise_rate`` of the pixels are flipped to a uniformly drawn different
    group.  The corruption is seeded by ``(seed, sample_index)`` so it does not
    depend on the order in which samples are requested.
    """

    scheme: GroupingScheme
    noise_rate: float = 0.0
    seed: int = 0
    _cache: Dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.noise_rate < 1.0:
            raise ValueError(f"noise_rate must lie in [0, 1), got {self.noise_rate}")

    def __call__(self, sample_index: int, class_labels: np.ndarray) -> np.ndarray:
        cached = self._cache.get(sample_index)
        if cached is None:
            cached = corrupt_labels(regroup(class_labels, self.scheme).labels, self.scheme.num_groups,
                                    self.noise_rate, np.random.default_rng([self.seed, sample_index]))
            cached.setflags(write=False)
            self._cache[sample_index] = cached
        return cached


def corrupt_labels(labels: np.ndarray, num_groups: int, noise_rate: float, rng: np.random.Generator) -> np.ndarray:
    out = np.array(labels, copy=True)
    if noise_rate <= 0 or num_groups < 2:
        return out
    flip = (rng.random(out.shape) < noise_rate) & (out != IGNORE_ID)
    # shift by 1..G-1 so the new label always differs
    shift = rng.integers(1, num_groups, size=out.shape)
    out[flip] = ((out[flip].astype(np.int64) + shift[flip]) % num_groups).astype(out.dtype)
    return out


def teacher_segment(scene, noise_rate: float = 0.0, scheme="proposed4", seed: int = 0) -> SegmentationMap:
    """Teacher output for a single scene sample (its ``gt_classes`` regrouped and corrupted)."""
    scheme = get_scheme(scheme) if isinstance(scheme, str) else scheme
    if not 0.0 <= noise_rate < 1.0:
        raise ValueError(f"noise_rate must lie in [0, 1), got {noise_rate}")
    grouped = regroup(scene.gt_classes, scheme).labels
    labels = corrupt_labels(grouped, scheme.num_groups, noise_rate, np.random.default_rng([seed, scene.seed]))
    return SegmentationMap(labels, scheme.num_groups)


def segmentation_accuracy(pred_labels, teacher_labels, ignore_id: int = IGNORE_ID) -> float:
    """Fraction of non-ignored pixels where the labels agree (1.0 if none remain)."""
    pred = np.asarray(getattr(pred_labels, "labels", pred_labels))
    ref = np.asarray(getattr(teacher_labels, "labels", teacher_labels))
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    keep = ref != ignore_id
    if not keep.any():
        return 1.0
    return float((pred[keep] == ref[keep]).mean())
