"""Attention from dual-axis pooled features, with a learnable gain and a residual.

``F_out = alpha * softmax(W_h P_h F  x  W_w P_w F) * F + F``.  The row- and
column-pooled features meet in a ``[B, H, W]`` logit map that is normalised
jointly over all ``H*W`` positions and shared across channels.
"""

from __future__ import annotations

import numpy as np

from .nn import Module, Parameter, uniform_init
from .tensor import Tensor, as_tensor, ops


class MAM(Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        C = channels
        self.w_h = Parameter(uniform_init(rng, (C, C), C))
        self.b_h = Parameter(np.zeros(C))
        self.w_w = Parameter(uniform_init(rng, (C, C), C))
        self.b_w = Parameter(np.zeros(C))
        self.alpha = Parameter(np.zeros(()))

    def attention_logits(self, x: Tensor) -> Tensor:
        B, C, H, W = x.shape
        rows = ops.transpose(ops.reshape(ops.pool_adaptive_avg(x, H, 1), (B, C, H)), (0, 2, 1))   # [B,H,C]
        cols = ops.transpose(ops.reshape(ops.pool_adaptive_avg(x, 1, W), (B, C, W)), (0, 2, 1))   # [B,W,C]
        rows = ops.add(ops.matmul(rows, ops.transpose(self.w_h)), self.b_h)
        cols = ops.add(ops.matmul(cols, ops.transpose(self.w_w)), self.b_w)
        return ops.matmul(rows, ops.transpose(cols, (0, 2, 1)))                                    # [B,H,W]

    def attention(self, x: Tensor, logit_shift: float = 0.0) -> Tensor:
        B, _, H, W = x.shape
        logits = self.attention_logits(x)
        if logit_shift:
            logits = ops.add(logits, logit_shift)
        attn = ops.softmax(ops.reshape(logits, (B, H * W)), axis=-1)
        return ops.reshape(attn, (B, 1, H, W))

    def forward(self, x: Tensor, logit_shift: float = 0.0) -> Tensor:
        gated = ops.mul(ops.mul(self.attention(x, logit_shift), x), self.alpha)
        return ops.add(gated, x)


def mam_forward(f_in, module: MAM) -> Tensor:
    return module(as_tensor(f_in))
