"""Compact teacher and student depth networks.

Both share one encoder-decoder: a stride-2 stem, four stride-2 encoder
stages producing features at 1/4..1/32 with channels [16, 32, 64, 128], and
a decoder that mirrors those scales (a conv neck at 1/32, then three
upsample+skip+conv stages back to 1/4). The teacher's stem reads 6 channels
(left and right images concatenated); the student's reads 3.

Heads at the 1/4 level: depth = d_min + (d_max - d_min) * sigmoid(conv), and
the uncertainty module s = s_min + (s_max - s_min) * sigmoid(conv), both
bilinearly resized to input resolution. The bounds make exp(-s) in the
uncertainty losses safe by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    bias_add,
    bilinear_resize,
    concat,
    conv2d,
    pool_avg2,
    relu,
    sigmoid,
    upsample_nearest2,
)

PYRAMID_CHANNELS = (16, 32, 64, 128)
STEM_CHANNELS = 8
D_MIN, D_MAX = 1.0, 80.0
S_MIN, S_MAX = -6.0, 6.0

ROLES = ("teacher", "student", "adapter", "uem")
_ROLE_CODE = {"teacher": 1, "student": 2, "adapter": 3, "uem": 4}


@dataclass
class ModelParams:
    """Ordered named parameters; insertion order defines checkpoint layout."""

    role: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}, expected one of {ROLES}")

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def items(self):
        return self.params.items()

    def tensors(self):
        return self.params.values()

    def add(self, name: str, data: np.ndarray, requires_grad: bool = True) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=requires_grad, name=name)
        self.params[name] = t
        return t

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None

    def freeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = False

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, t in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


def _kaiming_uniform(rng, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(role: str, seed: int) -> ModelParams:
    """Deterministic fan-in scaled uniform init; biases start at zero.

    The adapter role holds per-level query/key/value projections for the
    attention adaptation; teacher and student roles hold the conv net plus
    both heads.
    """
    mp = ModelParams(role=role)
    rng = np.random.default_rng(np.random.SeedSequence([seed, _ROLE_CODE[role]]))

    if role == "adapter":
        # one projection set per pyramid level, separately for encoder and
        # decoder features (8 sets total)
        for side in ("enc", "dec"):
            for lvl, c in enumerate(PYRAMID_CHANNELS):
                for proj in ("q", "k", "v"):
                    mp.add(f"adapt_{side}{lvl}_{proj}", _kaiming_uniform(rng, (c, c), fan_in=c))
        return mp
    if role == "uem":
        c = PYRAMID_CHANNELS[0]
        mp.add("uem_w", _kaiming_uniform(rng, (1, c, 3, 3), fan_in=c * 9))
        mp.add("uem_b", np.zeros(1))
        return mp

    in_ch = 6 if role == "teacher" else 3

    def conv_param(name, c_out, c_in):
        mp.add(f"{name}_w", _kaiming_uniform(rng, (c_out, c_in, 3, 3), fan_in=c_in * 9))
        mp.add(f"{name}_b", np.zeros(c_out))

    c1, c2, c3, c4 = PYRAMID_CHANNELS
    conv_param("stem", STEM_CHANNELS, in_ch)
    conv_param("enc1", c1, STEM_CHANNELS)
    conv_param("enc2", c2, c1)
    conv_param("enc3", c3, c2)
    conv_param("enc4", c4, c3)
    conv_param("dec3", c4, c4)
    conv_param("dec2", c3, c4 + c3)
    conv_param("dec1", c2, c3 + c2)
    conv_param("dec0", c1, c2 + c1)
    conv_param("depth", 1, c1)
    conv_param("uem", 1, c1)
    return mp


@dataclass
class NetOutput:
    enc: list  # features at 1/4, 1/8, 1/16, 1/32
    dec: list
    depth: Tensor  # (N, 1, H, W) meters
    log_var: Tensor  # (N, 1, H, W)


def _conv_block(x: Tensor, mp: ModelParams, name: str, stride: int) -> Tensor:
    y = bias_add(conv2d(x, mp[f"{name}_w"], stride=stride, padding=1), mp[f"{name}_b"])
    return relu(y)


def _head(x: Tensor, mp: ModelParams, name: str, lo: float, hi: float,
          out_h: int, out_w: int) -> Tensor:
    y = bias_add(conv2d(x, mp[f"{name}_w"], stride=1, padding=1), mp[f"{name}_b"])
    y = sigmoid(y) * (hi - lo) + lo
    return bilinear_resize(y, out_h, out_w)


def _check_input(x: Tensor, channels: int, role: str) -> None:
    if x.ndim != 4 or x.shape[1] != channels:
        raise ShapeError(f"{role} expects (N, {channels}, H, W), got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    if h % 32 or w % 32:
        raise ShapeError(f"input extents must divide by 32, got {h}x{w}")


def _forward(x: Tensor, mp: ModelParams) -> NetOutput:
    h, w = x.shape[2], x.shape[3]
    stem = _conv_block(x, mp, "stem", stride=2)
    e1 = _conv_block(stem, mp, "enc1", stride=2)
    e2 = _conv_block(e1, mp, "enc2", stride=2)
    e3 = _conv_block(e2, mp, "enc3", stride=2)
    e4 = _conv_block(e3, mp, "enc4", stride=2)

    d3 = _conv_block(e4, mp, "dec3", stride=1)
    d2 = _conv_block(concat([upsample_nearest2(d3), e3], axis=1), mp, "dec2", stride=1)
    d1 = _conv_block(concat([upsample_nearest2(d2), e2], axis=1), mp, "dec1", stride=1)
    d0 = _conv_block(concat([upsample_nearest2(d1), e1], axis=1), mp, "dec0", stride=1)

    depth = _head(d0, mp, "depth", D_MIN, D_MAX, h, w)
    log_var = uem_forward(d0, mp)
    return NetOutput(enc=[e1, e2, e3, e4], dec=[d0, d1, d2, d3], depth=depth, log_var=log_var)


def student_forward(image: Tensor, params: ModelParams) -> NetOutput:
    """Monocular forward pass; image is (N, 3, H, W) with H, W divisible by 32."""
    _check_input(image, 3, "student")
    return _forward(image, params)


def teacher_forward(left: Tensor, right: Tensor, params: ModelParams) -> NetOutput:
    """Stereo forward pass over channel-concatenated [left; right]."""
    if left.shape != right.shape:
        raise ShapeError(f"stereo pair extents differ: {left.shape} vs {right.shape}")
    _check_input(left, 3, "teacher")
    return _forward(concat([left, right], axis=1), params)


def uem_forward(finest_dec: Tensor, params: ModelParams) -> Tensor:
    """Per-pixel log variance s in [s_min, s_max], resized from the 1/4-scale
    feature back to full resolution (4x the feature extents)."""
    return _head(finest_dec, params, "uem", S_MIN, S_MAX,
                 4 * finest_dec.shape[2], 4 * finest_dec.shape[3])


def rearrange_logvar(log_var: Tensor) -> list:
    """Average-pool a full-resolution s map down to the four pyramid scales."""
    if log_var.ndim != 4 or log_var.shape[1] != 1:
        raise ShapeError(f"expected (N, 1, H, W) log variance, got {log_var.shape}")
    h, w = log_var.shape[2], log_var.shape[3]
    if h % 32 or w % 32:
        raise ShapeError(f"extents must divide by 32, got {h}x{w}")
    quarter = pool_avg2(pool_avg2(log_var))
    maps = [quarter]
    for _ in range(3):
        maps.append(pool_avg2(maps[-1]))
    return maps


def image_to_tensor(img: np.ndarray) -> Tensor:
    """(H, W, 3) float image to a (1, 3, H, W) network input."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) image, got {img.shape}")
    return Tensor(np.ascontiguousarray(img.transpose(2, 0, 1))[None])


def batch_to_tensor(imgs: list) -> Tensor:
    return Tensor(np.stack([np.ascontiguousarray(i.transpose(2, 0, 1)) for i in imgs]))
