"""Task decoders, the local convolutional branch, and mask-aware height refinement."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Conv2d, Module, pointwise
from .tensor import ShapeError, Tensor, as_tensor, ops


class LocalCNN(Module):
    """Three 3x3 convolutions, total stride 4, feeding local detail into both decoders."""

    def __init__(self, width: int, rng: np.random.Generator):
        self.conv1 = Conv2d(3, width, 3, rng, stride=2, padding=1)
        self.conv2 = Conv2d(width, width, 3, rng, stride=2, padding=1)
        self.conv3 = Conv2d(width, width, 3, rng, padding=1)

    def forward(self, img: Tensor) -> Tensor:
        x = ops.silu(self.conv1(img))
        x = ops.silu(self.conv2(x))
        return self.conv3(x)


class Decoder(Module):
    """Sum pyramid levels at the finest stride, add local features, two conv+SiLU, 1x1 head."""

    def __init__(self, fpn_width: int, local_width: int, hidden: int, rng: np.random.Generator):
        self.local_proj = pointwise(local_width, fpn_width, rng)
        self.conv1 = Conv2d(fpn_width, hidden, 3, rng, padding=1)
        self.conv2 = Conv2d(hidden, hidden, 3, rng, padding=1)
        self.head = pointwise(hidden, 1, rng)

    def forward(self, fpn_maps: list, local: Tensor, out_hw: tuple) -> Tensor:
        base = fpn_maps[0]
        if local.shape[-2:] != base.shape[-2:]:
            raise ShapeError(f"local features {local.shape[-2:]} do not match finest pyramid level {base.shape[-2:]}")
        x = base
        for level, fmap in enumerate(fpn_maps[1:], start=1):
            x = ops.add(x, ops.upsample_nearest(fmap, 2 ** level))
        x = ops.add(x, self.local_proj(local))
        x = ops.silu(self.conv1(x))
        x = ops.silu(self.conv2(x))
        return ops.upsample_bilinear(self.head(x), *out_hw)

    def zero_(self) -> None:
        for conv in (self.local_proj, self.conv1, self.conv2, self.head):
            conv.zero_()


def decode_heads(fpn_maps: list, local: Tensor, seg: Decoder, height: Decoder, out_hw: tuple,
                 height_scale: float = 1.0) -> tuple:
    """Return ``(S, H_raw)``: sigmoid mask probabilities and softplus raw heights (metres)."""
    s = ops.sigmoid(seg(fpn_maps, local, out_hw))
    h = ops.softplus(height(fpn_maps, local, out_hw))
    if height_scale != 1.0:
        h = ops.mul(h, height_scale)
    return s, h


@dataclass
class MHRConfig:
    epsilon: float = 0.1
    gamma: float = 1.0
    width: int = 8
    dilations: list = field(default_factory=lambda: [1, 2])

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if len(self.dilations) != 2:
            raise ValueError("the refiner has exactly two residual blocks")


class _ResBlock(Module):
    def __init__(self, width: int, dilation: int, rng: np.random.Generator):
        self.conv_a = Conv2d(width, width, 3, rng, padding=dilation, dilation=dilation)
        self.conv_b = Conv2d(width, width, 3, rng, padding=dilation, dilation=dilation)

    def forward(self, x: Tensor) -> Tensor:
        return ops.silu(ops.add(x, self.conv_b(ops.silu(self.conv_a(x)))))


def mask_gate(s: np.ndarray, epsilon: float, gamma: float) -> np.ndarray:
    """``epsilon + (1 - epsilon) * S**gamma``: in ``[epsilon, 1]`` and nondecreasing in ``S``."""
    s = np.clip(np.asarray(s, dtype=np.float64), 0.0, 1.0)
    return epsilon + (1.0 - epsilon) * s ** gamma


class MHR(Module):
    """Residual height correction from ``[H_raw, S]``, gated by mask confidence.

    ``S`` enters as a constant: no gradient reaches the segmentation branch
    through the refiner or the gate.
    """

    def __init__(self, config: MHRConfig, rng: np.random.Generator):
        self.config = config
        w = config.width
        self.stem = Conv2d(2, w, 3, rng, padding=1)
        self.blocks = [_ResBlock(w, d, rng) for d in config.dilations]
        self.out = pointwise(w, 1, rng)
        self.out.zero_()

    def residual(self, h_raw: Tensor, s) -> Tensor:
        h_raw = as_tensor(h_raw)
        s_const = Tensor(as_tensor(s).data)
        if h_raw.shape != s_const.shape:
            raise ShapeError(f"H_raw {h_raw.shape} and S {s_const.shape} differ")
        x = ops.silu(self.stem(ops.concat([h_raw, s_const], axis=1)))
        for blk in self.blocks:
            x = blk(x)
        return self.out(x)

    def forward(self, h_raw: Tensor, s) -> tuple:
        """Return ``(H_ref, delta_h)``."""
        delta = self.residual(h_raw, s)
        return mhr_gate_and_update(h_raw, s, delta, self.config.epsilon, self.config.gamma), delta


def mhr_residual(h_raw, s, module: MHR) -> Tensor:
    return module.residual(h_raw, s)


def mhr_gate_and_update(h_raw, s, delta_h, epsilon: float, gamma: float) -> Tensor:
    """``ReLU(H_raw + g(S) * delta_h)`` with the gate applied once."""
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    gate = mask_gate(as_tensor(s).data, epsilon, gamma)
    return ops.relu(ops.add(as_tensor(h_raw), ops.mul(as_tensor(delta_h), gate)))
