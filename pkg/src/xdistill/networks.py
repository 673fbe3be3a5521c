"""Depth network, pose network and the depth-to-segmentation translator."""

from __future__ import annotations

from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .autograd import (
    Tensor,
    add,
    as_tensor,
    batchnorm,
    concat,
    conv2d,
    div,
    log,
    mean,
    relu,
    scale,
    sigmoid,
    upsample_nearest,
)
from .geometry import axis_angle_to_rotation

MIN_DEPTH = 0.1
MAX_DEPTH = 100.0
POSE_SCALE = 0.01
_IMAGE_MEAN = 0.45
_IMAGE_STD = 0.225


class Module:
    """Container with named parameters (Tensors) and buffers (numpy arrays)."""

    training = True

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Tensor, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        out = []
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    out.append((full, value))
            else:
                out.extend(value.named_parameters(full + "."))
        return out

    def named_buffers(self, prefix: str = "") -> List[Tuple[str, np.ndarray]]:
        out = []
        for name, value in self._children():
            if isinstance(value, Module):
                out.extend(value.named_buffers(f"{prefix}{name}."))
        return out

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            if isinstance(child, Module):
                child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        missing = expected - set(state)
        if missing:
            raise KeyError(f"missing entries in state: {sorted(missing)}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"shape mismatch for parameter {name!r}: checkpoint {value.shape}, model {p.shape}")
            p.data = value.astype(p.dtype, copy=True)
        for name, buf in buffers.items():
            value = np.asarray(state[name])
            if value.shape != buf.shape:
                raise ValueError(f"shape mismatch for buffer {name!r}: checkpoint {value.shape}, model {buf.shape}")
            self._set_buffer(name, value.astype(buf.dtype, copy=True))

    def _set_buffer(self, dotted: str, value: np.ndarray) -> None:
        head, _, rest = dotted.partition(".")
        target = getattr(self, head)
        if isinstance(target, list):
            idx, _, rest = rest.partition(".")
            target = target[int(idx)]
        if isinstance(target, Module) and rest:
            target._set_buffer(rest, value)
        else:
            setattr(self, head, value)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 zero_init: bool = False):
        fan_in = cin * k * k
        bound = np.sqrt(6.0 / fan_in)
        w = np.zeros((cout, cin, k, k)) if zero_init else rng.uniform(-bound, bound, size=(cout, cin, k, k))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride)


class BatchNorm2d(Module):
    def __init__(self, channels: int):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)

    def named_buffers(self, prefix: str = "") -> List[Tuple[str, np.ndarray]]:
        return [(f"{prefix}running_mean", self.running_mean), (f"{prefix}running_var", self.running_var)]

    def __call__(self, x: Tensor) -> Tensor:
        out, new_mean, new_var = batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                                           self.training)
        if self.training:
            self.running_mean, self.running_var = new_mean, new_var
        return out


def _normalise(images: Tensor) -> Tensor:
    return scale(add(as_tensor(images), -_IMAGE_MEAN), 1.0 / _IMAGE_STD)


# ---------------------------------------------------------------------------
# depth
# ---------------------------------------------------------------------------

BACKBONES = {
    "small": ((16, 32, 64, 128), (8, 16, 16, 32)),
    "tiny": ((8, 16, 32, 64), (4, 8, 8, 16)),
}


class DepthNetwork(Module):
    """Four stride-2 encoder blocks, four upsampling decoder blocks with skips, sigmoid heads."""

    def __init__(self, rng: np.random.Generator, n_scales: int = 4, backbone: str = "small",
                 input_size: Optional[Tuple[int, int]] = None):
        if backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {backbone!r}; choose from {sorted(BACKBONES)}")
        if not 1 <= n_scales <= 4:
            raise ValueError(f"n_scales must be between 1 and 4, got {n_scales}")
        enc_ch, dec_ch = BACKBONES[backbone]
        self.n_scales = n_scales
        self.depth_levels = len(enc_ch)
        if input_size is not None:
            self.check_size(*input_size)
        self.enc_down: List[Conv2d] = []
        self.enc_conv: List[Conv2d] = []
        cin = 3
        for c in enc_ch:
            self.enc_down.append(Conv2d(cin, c, 3, rng, stride=2))
            self.enc_conv.append(Conv2d(c, c, 3, rng))
            cin = c
        self.dec_conv: List[Conv2d] = []
        prev = enc_ch[-1]
        for level in reversed(range(len(enc_ch))):
            skip = enc_ch[level - 1] if level > 0 else 0
            self.dec_conv.append(Conv2d(prev + skip, dec_ch[level], 3, rng))
            prev = dec_ch[level]
        # heads[k] predicts disparity at 1 / 2**k of the input size
        self.heads: List[Conv2d] = [Conv2d(dec_ch[k], 1, 3, rng) for k in range(n_scales)]

    def check_size(self, h: int, w: int) -> None:
        f = 2 ** self.depth_levels
        if h % f or w % f:
            raise ValueError(f"input size {h}x{w} must be divisible by {f}")

    def __call__(self, images) -> List[Tensor]:
        x = as_tensor(images)
        self.check_size(*x.shape[2:])
        x = _normalise(x)
        feats = []
        for down, conv in zip(self.enc_down, self.enc_conv):
            x = relu(conv(relu(down(x))))
            feats.append(x)
        outputs: Dict[int, Tensor] = {}
        x = feats[-1]
        for conv, level in zip(self.dec_conv, reversed(range(self.depth_levels))):
            x = upsample_nearest(x, 2)
            if level > 0:
                x = concat([x, feats[level - 1]], axis=1)
            x = relu(conv(x))
            if level < self.n_scales:
                outputs[level] = sigmoid(self.heads[level](x))
        return [outputs[k] for k in range(self.n_scales)]


def disparity_to_depth(sigma, min_depth: float = MIN_DEPTH, max_depth: float = MAX_DEPTH) -> Tensor:
    """depth = 1 / (1/max + (1/min - 1/max) * sigma)."""
    if not 0 < min_depth < max_depth:
        raise ValueError(f"need 0 < min_depth < max_depth, got {min_depth}, {max_depth}")
    sigma = as_tensor(sigma)
    lo, hi = 1.0 / max_depth, 1.0 / min_depth
    return div(1.0, add(scale(sigma, hi - lo), lo))


# ---------------------------------------------------------------------------
# pose
# ---------------------------------------------------------------------------


class PosePrediction(NamedTuple):
    rotation: Tensor  # (N,3,3)
    translation: Tensor  # (N,3)
    axis_angle: Tensor  # (N,3)


class PoseNetwork(Module):
    def __init__(self, rng: np.random.Generator, channels: Sequence[int] = (16, 32, 64, 128)):
        self.convs: List[Conv2d] = []
        cin = 6
        for c in channels:
            self.convs.append(Conv2d(cin, c, 3, rng, stride=2))
            cin = c
        self.head = Conv2d(cin, 6, 1, rng, zero_init=True)

    def raw(self, target, source) -> Tensor:
        x = concat([_normalise(target), _normalise(source)], axis=1)
        for conv in self.convs:
            x = relu(conv(x))
        out = mean(self.head(x), axis=(2, 3))
        return scale(out, POSE_SCALE)

    def __call__(self, target, source) -> PosePrediction:
        """Predict T_{target->source}."""
        target, source = as_tensor(target), as_tensor(source)
        if target.shape != source.shape:
            raise ValueError(f"frame shapes differ: {target.shape} vs {source.shape}")
        out = self.raw(target, source)
        axis_angle = out[:, 0:3]
        translation = out[:, 3:6]
        return PosePrediction(axis_angle_to_rotation(axis_angle), translation, axis_angle)


# ---------------------------------------------------------------------------
# depth-to-segmentation translator
# ---------------------------------------------------------------------------

D2S_VARIANTS = {"pointwise_only": 0, "standard_2conv": 2, "deep_4conv": 4}


class D2SNetwork(Module):
    """``n_conv`` blocks of 3x3 conv + BatchNorm + ReLU followed by a pointwise classifier."""

    def __init__(self, rng: np.random.Generator, num_groups: int = 4, n_conv: int = 2, width: int = 32,
                 in_channels: int = 1, zero_init_head: bool = False):
        self.convs: List[Conv2d] = []
        self.norms: List[BatchNorm2d] = []
        cin = in_channels
        for _ in range(n_conv):
            self.convs.append(Conv2d(cin, width, 3, rng))
            self.norms.append(BatchNorm2d(width))
            cin = width
        self.head = Conv2d(cin, num_groups, 1, rng, zero_init=zero_init_head)
        self.num_groups = num_groups

    @property
    def receptive_field(self) -> int:
        return 1 + 2 * len(self.convs)

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        for conv, norm in zip(self.convs, self.norms):
            x = relu(norm(conv(x)))
        return self.head(x)


def build_d2s_variant(kind: str, rng: np.random.Generator, num_groups: int = 4, **kwargs) -> D2SNetwork:
    if kind not in D2S_VARIANTS:
        raise ValueError(f"unknown D2S variant {kind!r}; choose from {sorted(D2S_VARIANTS)}")
    return D2SNetwork(rng, num_groups=num_groups, n_conv=D2S_VARIANTS[kind], **kwargs)


def d2s_input(disp: Tensor, mode: str = "disparity") -> Tensor:
    """What the translator sees: the sigmoid disparity itself, metric depth, or log depth."""
    if mode == "disparity":
        return disp
    depth = disparity_to_depth(disp)
    if mode == "depth":
        return depth
    if mode == "log_depth":
        return log(depth)
    raise ValueError(f"unknown D2S input mode {mode!r}")
