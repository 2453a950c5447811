"""2-D selective scanning and the hierarchical state-space backbone."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .nn import Conv2d, DropPath, LayerNorm2d, Module, pointwise
from .ssm import SelectiveSSM
from .tensor import ShapeError, Tensor, as_tensor, ops


class ScanDirection(enum.IntEnum):
    ROW_MAJOR = 0
    ROW_MAJOR_REVERSED = 1
    COL_MAJOR = 2
    COL_MAJOR_REVERSED = 3


@lru_cache(maxsize=64)
def scan_orders(h: int, w: int) -> tuple:
    """Flat-index permutation for each direction, and its inverse."""
    grid = np.arange(h * w).reshape(h, w)
    row = grid.ravel()
    col = grid.T.ravel()
    orders = np.stack([row, row[::-1], col, col[::-1]])
    inverses = np.argsort(orders, axis=1)
    orders.setflags(write=False)
    inverses.setflags(write=False)
    return orders, inverses


def cross_scan(x) -> Tensor:
    """``[B, C, H, W]`` -> ``[B, 4, C, H*W]``: the map flattened along each direction."""
    x = as_tensor(x)
    B, C, H, W = x.shape
    orders, inverses = scan_orders(H, W)
    flat = x.data.reshape(B, C, H * W)
    out = np.stack([flat[:, :, orders[k]] for k in range(4)], axis=1)

    def backward(g):
        gx = g[:, 0][:, :, inverses[0]]
        for k in range(1, 4):
            gx = gx + g[:, k][:, :, inverses[k]]
        return (gx.reshape(B, C, H, W),)

    return ops.make_op(out, (x,), backward, "cross_scan")


def cross_merge(y, h: int, w: int) -> Tensor:
    """Scatter each of the four sequences back onto the grid and sum them."""
    y = as_tensor(y)
    if y.ndim != 4 or y.shape[1] != 4:
        raise ShapeError(f"cross_merge expects [B, 4, C, L], got {y.shape}")
    B, _, C, L = y.shape
    if L != h * w:
        raise ShapeError(f"sequence length {L} does not match grid {h}x{w}")
    orders, inverses = scan_orders(h, w)
    yd = y.data
    out = yd[:, 0][:, :, inverses[0]]
    for k in range(1, 4):
        out = out + yd[:, k][:, :, inverses[k]]

    def backward(g):
        gf = g.reshape(B, C, L)
        return (np.stack([gf[:, :, orders[k]] for k in range(4)], axis=1),)

    return ops.make_op(out.reshape(B, C, h, w), (y,), backward, "cross_merge")


class SS2D(Module):
    """Projection, depthwise 3x3, SiLU, four directional scans, merge, norm, projection."""

    def __init__(self, channels: int, rng: np.random.Generator, state: int = 8, expand: int = 1):
        inner = channels * expand
        self.in_proj = pointwise(channels, inner, rng)
        self.dwconv = Conv2d(inner, inner, 3, rng, padding=1, groups=inner)
        self.ssm = SelectiveSSM(inner, 4, rng, state=state)
        self.out_norm = LayerNorm2d(inner)
        self.out_proj = pointwise(inner, channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        H, W = x.shape[-2:]
        z = ops.silu(self.dwconv(self.in_proj(x)))
        y = self.ssm(cross_scan(z))
        return self.out_proj(self.out_norm(cross_merge(y, H, W)))


class FFN(Module):
    def __init__(self, channels: int, ratio: float, rng: np.random.Generator):
        hidden = max(1, int(round(channels * ratio)))
        self.fc1 = pointwise(channels, hidden, rng)
        self.fc2 = pointwise(hidden, channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.silu(self.fc1(x)))


class VMambaBlock(Module):
    """``x + DropPath(SS2D(LN x))`` followed by ``x + DropPath(FFN(LN x))``."""

    def __init__(self, channels: int, rng: np.random.Generator, state: int = 8, ffn_ratio: float = 2.0,
                 drop_path: float = 0.0, drop_rng: np.random.Generator | None = None):
        self.norm1 = LayerNorm2d(channels)
        self.ss2d = SS2D(channels, rng, state=state)
        self.drop1 = DropPath(drop_path, drop_rng)
        self.norm2 = LayerNorm2d(channels)
        self.ffn = FFN(channels, ffn_ratio, rng)
        self.drop2 = DropPath(drop_path, drop_rng)

    def mixer(self, x: Tensor) -> Tensor:
        return self.ss2d(x)

    def forward(self, x: Tensor) -> Tensor:
        x = ops.add(x, self.drop1(self.mixer(self.norm1(x))))
        return ops.add(x, self.drop2(self.ffn(self.norm2(x))))

    def zero_init_outputs(self) -> None:
        self.ss2d.out_proj.zero_()
        self.ffn.fc2.zero_()


def vmamba_block(x: Tensor, block: VMambaBlock, drop_path_active: bool) -> Tensor:
    """Functional entry point: run ``block`` with drop-path on (training) or off."""
    previous = (block.drop1.training, block.drop2.training)
    block.drop1.training = block.drop2.training = drop_path_active
    try:
        return block(x)
    finally:
        block.drop1.training, block.drop2.training = previous


@dataclass
class BlockConfig:
    channels: list = field(default_factory=lambda: [16, 32, 64, 128])
    depths: list = field(default_factory=lambda: [1, 1, 2, 1])
    patch_size: int = 4
    ffn_ratio: float = 2.0
    drop_path: float = 0.1
    state: int = 8

    def __post_init__(self):
        if len(self.channels) != 4 or len(self.depths) != 4:
            raise ValueError("backbone needs exactly four stages")
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ValueError(f"stage channels must increase strictly, got {self.channels}")
        if self.patch_size < 1:
            raise ValueError("patch size must be positive")
        if not 0.0 <= self.drop_path < 1.0:
            raise ValueError("drop-path rate must lie in [0, 1)")

    @property
    def divisor(self) -> int:
        return self.patch_size * 8


class Backbone(Module):
    """Patch embedding then four block stages joined by stride-2 downsampling."""

    def __init__(self, config: BlockConfig, rng: np.random.Generator, drop_rng: np.random.Generator):
        self.config = config
        ch = config.channels
        self.patch_embed = Conv2d(3, ch[0], config.patch_size, rng, stride=config.patch_size)
        self.embed_norm = LayerNorm2d(ch[0])
        total = sum(config.depths)
        rates = np.linspace(0.0, config.drop_path, total) if total > 1 else [config.drop_path]
        self.stages = []
        self.downsample = []
        self.down_norm = []
        k = 0
        for i, (c, depth) in enumerate(zip(ch, config.depths)):
            stage = StageBlocks([
                VMambaBlock(c, rng, state=config.state, ffn_ratio=config.ffn_ratio,
                            drop_path=float(rates[k + j]), drop_rng=drop_rng)
                for j in range(depth)
            ])
            k += depth
            self.stages.append(stage)
            if i < 3:
                self.downsample.append(Conv2d(c, ch[i + 1], 2, rng, stride=2))
                self.down_norm.append(LayerNorm2d(ch[i + 1]))

    def forward(self, img: Tensor) -> list:
        H, W = img.shape[-2:]
        div = self.config.divisor
        if H % div or W % div:
            raise ShapeError(f"input extent {H}x{W} must be divisible by {div} (patch size x 8)")
        x = self.embed_norm(self.patch_embed(img))
        feats = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            feats.append(x)
            if i < 3:
                x = self.down_norm[i](self.downsample[i](x))
        return feats


class StageBlocks(Module):
    def __init__(self, blocks: list):
        self.blocks = blocks

    def forward(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return x


def backbone_forward(img, backbone: Backbone) -> list:
    """Pyramid of four maps at strides ``p, 2p, 4p, 8p`` for patch size ``p``."""
    return backbone(as_tensor(img))
