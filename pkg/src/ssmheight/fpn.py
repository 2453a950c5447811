"""Top-down feature pyramid with state-space refinement at every level.

Three refinement flavours share one topology:

* ``use_mamba=False``: a plain 3x3 convolution (classic FPN smoothing);
* ``use_mamba=True, use_spatial_branch=False``: a VMamba block;
* both on: the VMamba block's scan output gated elementwise by a spatial
  branch (depthwise 3x3 and 7x7, 1x1 fuse, SiLU, SS2D).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Conv2d, Module, pointwise
from .tensor import Tensor, as_tensor, ops
from .vmamba import SS2D, VMambaBlock


@dataclass
class FPNConfig:
    width: int = 32
    levels: int = 4
    use_mamba: bool = True
    use_spatial_branch: bool = True
    state: int = 8
    ffn_ratio: float = 2.0
    drop_path: float = 0.1

    def __post_init__(self):
        if self.levels != 4:
            raise ValueError("the pyramid has exactly four levels")
        if self.width < 1:
            raise ValueError("fpn width must be positive")


class SpatialBranch(Module):
    def __init__(self, channels: int, rng: np.random.Generator, state: int = 8):
        C = channels
        self.dw3 = Conv2d(C, C, 3, rng, padding=1, groups=C)
        self.dw7 = Conv2d(C, C, 7, rng, padding=3, groups=C)
        self.fuse = pointwise(2 * C, C, rng)
        self.ss2d = SS2D(C, rng, state=state)
        # start near a unit gate so the block begins as the plain scan path
        self.ss2d.out_proj.weight.data *= 0.1
        self.ss2d.out_proj.bias.data[:] = 1.0

    def forward(self, x: Tensor) -> Tensor:
        local = ops.concat([self.dw3(x), self.dw7(x)], axis=1)
        return self.ss2d(ops.silu(self.fuse(local)))


class SMambaRefine(VMambaBlock):
    """VMamba block whose scan output is multiplied by a spatial-evidence branch."""

    def __init__(self, channels: int, rng: np.random.Generator, use_spatial_branch: bool = True, state: int = 8,
                 ffn_ratio: float = 2.0, drop_path: float = 0.0, drop_rng=None, spatial_rng=None):
        super().__init__(channels, rng, state=state, ffn_ratio=ffn_ratio, drop_path=drop_path, drop_rng=drop_rng)
        self.use_spatial_branch = use_spatial_branch
        self.spatial = SpatialBranch(channels, spatial_rng or rng, state) if use_spatial_branch else None
        self.force_unit_gate = False

    def mixer(self, x: Tensor) -> Tensor:
        base = self.ss2d(x)
        if self.spatial is None or self.force_unit_gate:
            return base
        return ops.mul(base, self.spatial(x))


def smamba_refine(x, block: SMambaRefine) -> Tensor:
    return block(as_tensor(x))


class MambaFPN(Module):
    def __init__(self, in_channels: list, config: FPNConfig, rng: np.random.Generator,
                 drop_rng: np.random.Generator, spatial_rng: np.random.Generator | None = None):
        self.config = config
        F = config.width
        self.lateral = [pointwise(c, F, rng) for c in in_channels]
        if not config.use_mamba:
            self.refine = [Conv2d(F, F, 3, rng, padding=1) for _ in in_channels]
        else:
            self.refine = [
                SMambaRefine(F, rng, use_spatial_branch=config.use_spatial_branch, state=config.state,
                             ffn_ratio=config.ffn_ratio, drop_path=config.drop_path, drop_rng=drop_rng,
                             spatial_rng=spatial_rng)
                for _ in in_channels
            ]

    def topdown(self, pyramid: list) -> list:
        """Lateral projections summed coarse-to-fine, before refinement."""
        lat = [proj(p) for proj, p in zip(self.lateral, pyramid)]
        merged = [None] * len(lat)
        merged[-1] = lat[-1]
        for i in range(len(lat) - 2, -1, -1):
            merged[i] = ops.add(lat[i], ops.upsample_nearest(merged[i + 1], 2))
        return merged

    def forward(self, pyramid: list) -> list:
        return [ref(m) for ref, m in zip(self.refine, self.topdown(pyramid))]


def fpn_topdown(pyramid: list, fpn: MambaFPN) -> list:
    return fpn(pyramid)
