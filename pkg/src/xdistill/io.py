"""Binary tensor/label containers, checkpoints, pixmap export and dataset directories."""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Dict, Iterable, List, Tuple, Union

import numpy as np

from .geometry import CameraIntrinsics, RigidPose

TENSOR_MAGIC = b"XDT1"
LABEL_MAGIC = b"XDL1"
CHECKPOINT_MAGIC = b"XDC1"
MAX_RANK = 8
MAX_ELEMENTS = 1 << 31

PathLike = Union[str, os.PathLike]


class FormatError(ValueError):
    """Base class for malformed container files."""


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class DimOverflowError(FormatError):
    pass


# ---------------------------------------------------------------------------
# tensor containers
# ---------------------------------------------------------------------------


def encode_array(array, magic: bytes = TENSOR_MAGIC) -> bytes:
    dtype = "<f4" if magic == TENSOR_MAGIC else "u1"
    arr = np.asarray(getattr(array, "data", array))
    if magic == LABEL_MAGIC and arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ValueError("label values must fit in a byte")
    if arr.ndim > MAX_RANK:
        raise DimOverflowError(f"rank {arr.ndim} exceeds {MAX_RANK}")
    header = magic + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=dtype).tobytes()


def decode_array(buf: bytes, offset: int = 0, magic: bytes = TENSOR_MAGIC) -> Tuple[np.ndarray, int]:
    """Parse one container starting at ``offset``; returns the array and the end offset."""
    if len(buf) - offset < 8:
        raise TruncatedError("file too short for a header")
    if buf[offset:offset + 4] != magic:
        raise BadMagicError(f"bad magic {bytes(buf[offset:offset + 4])!r}, expected {magic!r}")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    if rank > MAX_RANK:
        raise DimOverflowError(f"rank {rank} exceeds {MAX_RANK}")
    pos = offset + 8
    if len(buf) - pos < 4 * rank:
        raise TruncatedError("file too short for the dimension list")
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = 1
    for d in dims:
        count *= d
        if count > MAX_ELEMENTS:
            raise DimOverflowError(f"dims {dims} describe more than {MAX_ELEMENTS} elements")
    dtype = np.dtype("<f4") if magic == TENSOR_MAGIC else np.dtype("u1")
    nbytes = count * dtype.itemsize
    if len(buf) - pos < nbytes:
        raise TruncatedError(f"payload truncated: need {nbytes} bytes, have {len(buf) - pos}")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(dims).copy()
    if magic == TENSOR_MAGIC:
        data = data.astype(np.float32)
    return data, pos + nbytes


def write_tensor(path: PathLike, tensor) -> None:
    Path(path).write_bytes(encode_array(tensor, TENSOR_MAGIC))


def read_tensor(path: PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_array(buf, 0, TENSOR_MAGIC)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after tensor payload")
    return arr


def write_labels(path: PathLike, labels) -> None:
    Path(path).write_bytes(encode_array(getattr(labels, "labels", labels), LABEL_MAGIC))


def read_labels(path: PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_array(buf, 0, LABEL_MAGIC)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after label payload")
    return arr


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def write_checkpoint(path: PathLike, entries: Iterable[Tuple[str, np.ndarray]]) -> None:
    """Ordered (name, tensor) pairs: magic, u32 count, then per entry u32 name length, utf8 name, XDT1 blob."""
    entries = list(entries)
    names = [name for name, _ in entries]
    seen = set()
    for name in names:
        if name in seen:
            raise ValueError(f"duplicate parameter name {name!r}")
        seen.add(name)
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(entries))]
    for name, value in entries:
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, encode_array(value, TENSOR_MAGIC)]
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


def read_checkpoint(path: PathLike) -> List[Tuple[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if len(buf) < 8:
        raise TruncatedError("checkpoint too short for a header")
    if buf[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    (count,) = struct.unpack_from("<I", buf, 4)
    pos = 8
    out: List[Tuple[str, np.ndarray]] = []
    for _ in range(count):
        if len(buf) - pos < 4:
            raise TruncatedError("checkpoint truncated inside an entry header")
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if len(buf) - pos < nlen:
            raise TruncatedError("checkpoint truncated inside a parameter name")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        arr, pos = decode_array(buf, pos, TENSOR_MAGIC)
        out.append((name, arr))
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after checkpoint entries")
    names = [n for n, _ in out]
    if len(set(names)) != len(names):
        raise FormatError("checkpoint contains duplicate parameter names")
    return out


# ---------------------------------------------------------------------------
# pixmaps
# ---------------------------------------------------------------------------


def export_image(path: PathLike, tensor) -> None:
    """Plain-text P2 (1 channel) or P3 (3 channels) with maxval 255.

    Accepts (H,W), (C,H,W) or (1,C,H,W); values are clamped to [0,1].
    """
    arr = np.asarray(getattr(tensor, "data", tensor), dtype=np.float64)
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ValueError(f"export_image needs 1 or 3 channels, got shape {arr.shape}")
    q = np.rint(np.clip(arr, 0.0, 1.0) * 255).astype(np.int64)
    c, h, w = q.shape
    kind = "P2" if c == 1 else "P3"
    pixels = q.transpose(1, 2, 0).reshape(h, w * c)
    lines = [kind, f"{w} {h}", "255"] + [" ".join(map(str, row)) for row in pixels]
    Path(path).write_text("\n".join(lines) + "\n")


def read_image(path: PathLike) -> np.ndarray:
    """Inverse of ``export_image``: (C,H,W) float in [0,1]."""
    tokens = []
    for line in Path(path).read_text().splitlines():
        tokens += line.split("#", 1)[0].split()
    if not tokens or tokens[0] not in ("P2", "P3"):
        raise BadMagicError("not a plain P2/P3 pixmap")
    c = 1 if tokens[0] == "P2" else 3
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    values = np.array(tokens[4:], dtype=np.float64)
    if values.size != w * h * c:
        raise TruncatedError(f"expected {w * h * c} samples, found {values.size}")
    return (values / maxval).reshape(h, w, c).transpose(2, 0, 1)


def depth_to_image(depth) -> np.ndarray:
    """Inverse depth normalised to [0,1] for display."""
    d = np.asarray(getattr(depth, "data", depth), dtype=np.float64)
    inv = 1.0 / np.maximum(d, 1e-6)
    lo, hi = inv.min(), inv.max()
    return (inv - lo) / (hi - lo) if hi > lo else np.zeros_like(inv)


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

SAMPLE_FILES = ("frame_prev", "frame_t", "frame_next", "depth", "groups", "pose_prev", "pose_next", "intrinsics")


def sample_dir(root: PathLike, index: int) -> Path:
    return Path(root) / f"sample_{index:06d}"


def write_sample(root: PathLike, index: int, sample) -> Path:
    d = sample_dir(root, index)
    d.mkdir(parents=True, exist_ok=True)
    write_tensor(d / "frame_prev.xdt", sample.frames[0])
    write_tensor(d / "frame_t.xdt", sample.frames[1])
    write_tensor(d / "frame_next.xdt", sample.frames[2])
    write_tensor(d / "depth.xdt", sample.gt_depth_t)
    write_labels(d / "groups.xdl", sample.gt_groups)
    write_labels(d / "classes.xdl", sample.gt_classes)
    write_tensor(d / "pose_prev.xdt", sample.gt_poses[0].matrix)
    write_tensor(d / "pose_next.xdt", sample.gt_poses[1].matrix)
    write_tensor(d / "intrinsics.xdt", sample.intrinsics.matrix)
    (d / "meta.json").write_text(json.dumps({"seed": int(sample.seed)}))
    return d


def read_sample(root: PathLike, index: int):
    from .scenes import SceneSample

    d = sample_dir(root, index)
    if not d.is_dir():
        raise FileNotFoundError(f"no sample directory {d}")
    frames = tuple(read_tensor(d / f"{name}.xdt") for name in ("frame_prev", "frame_t", "frame_next"))
    poses = tuple(_pose_from(read_tensor(d / f"{name}.xdt")) for name in ("pose_prev", "pose_next"))
    classes_path = d / "classes.xdl"
    groups = read_labels(d / "groups.xdl")
    classes = read_labels(classes_path) if classes_path.exists() else None
    meta = json.loads((d / "meta.json").read_text()) if (d / "meta.json").exists() else {"seed": index}
    return SceneSample(
        frames=frames,
        gt_depth_t=read_tensor(d / "depth.xdt"),
        gt_poses=poses,
        intrinsics=CameraIntrinsics.from_matrix(read_tensor(d / "intrinsics.xdt").astype(np.float64)),
        gt_classes=classes,
        gt_groups=groups,
        seed=int(meta["seed"]),
    )


def _pose_from(m: np.ndarray) -> RigidPose:
    # stored as float32; re-orthonormalise so the pose validates
    m = m.astype(np.float64)
    u, _, vt = np.linalg.svd(m[:3, :3])
    return RigidPose(u @ vt, m[:3, 3])


def count_samples(root: PathLike) -> int:
    return len(sorted(Path(root).glob("sample_*")))


def write_dataset(root: PathLike, samples: Iterable) -> int:
    n = 0
    for i, sample in enumerate(samples):
        write_sample(root, i, sample)
        n += 1
    return n


def load_state(path: PathLike) -> Dict[str, np.ndarray]:
    return dict(read_checkpoint(path))
