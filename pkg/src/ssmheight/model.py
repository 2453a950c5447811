"""Full multi-task network with ablation switches."""

from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .fpn import FPNConfig, MambaFPN
from .heads import MHR, Decoder, LocalCNN, MHRConfig, decode_heads
from .mam import MAM
from .nn import Module
from .tensor import Tensor, as_tensor, ops
from .vmamba import Backbone, BlockConfig

ARMS = {
    "backbone": dict(use_mam=False, use_smamba_fpn=False, use_spatial_branch=False, use_mhr=False),
    "mam": dict(use_mam=True, use_smamba_fpn=False, use_spatial_branch=False, use_mhr=False),
    "smamba_fpn": dict(use_mam=True, use_smamba_fpn=True, use_spatial_branch=True, use_mhr=False),
    "full": dict(use_mam=True, use_smamba_fpn=True, use_spatial_branch=True, use_mhr=True),
}
LADDER = ["backbone", "mam", "smamba_fpn", "full"]


@dataclass
class ModelConfig:
    backbone: BlockConfig = field(default_factory=BlockConfig)
    fpn_width: int = 32
    local_width: int = 16
    decoder_hidden: int = 32
    mhr: MHRConfig = field(default_factory=MHRConfig)
    height_scale: float = 1.0
    use_mam: bool = True
    use_smamba_fpn: bool = True
    use_spatial_branch: bool = True
    use_mhr: bool = True
    # refiner reads a detached H_raw, so enabling it cannot move the trunk
    mhr_detach_height: bool = True
    seed: int = 0

    def with_arm(self, arm: str) -> "ModelConfig":
        if arm not in ARMS:
            raise ValueError(f"unknown ablation arm {arm!r}; choose from {sorted(ARMS)}")
        return dataclasses.replace(self, **ARMS[arm])

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["backbone"] = BlockConfig(**d["backbone"])
        d["mhr"] = MHRConfig(**d["mhr"])
        return cls(**d)


@dataclass
class Predictions:
    s: Tensor
    h_raw: Tensor
    h_ref: Optional[Tensor] = None
    delta_h: Optional[Tensor] = None

    @property
    def height(self) -> Tensor:
        return self.h_ref if self.h_ref is not None else self.h_raw


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator per component, so toggling one module never shifts another's init."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


class HeightSegNet(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        seed = config.seed
        self.drop_rng = stream(seed, "drop_path")
        self.backbone = Backbone(config.backbone, stream(seed, "backbone"), self.drop_rng)
        chans = config.backbone.channels
        self.mam = [MAM(c, stream(seed, f"mam.{i}")) for i, c in enumerate(chans)] if config.use_mam else None
        fpn_cfg = FPNConfig(
            width=config.fpn_width, use_mamba=config.use_smamba_fpn,
            use_spatial_branch=config.use_smamba_fpn and config.use_spatial_branch,
            state=config.backbone.state, ffn_ratio=config.backbone.ffn_ratio, drop_path=config.backbone.drop_path,
        )
        fpn = MambaFPN(chans, fpn_cfg, stream(seed, "fpn"), self.drop_rng, spatial_rng=stream(seed, "fpn.spatial"))
        # distinct attribute names keep the checkpoint audit meaningful
        if config.use_smamba_fpn:
            self.smfpn = fpn
            self.fpn = None
        else:
            self.fpn = fpn
            self.smfpn = None
        self.local = LocalCNN(config.local_width, stream(seed, "local"))
        self.seg_head = Decoder(config.fpn_width, config.local_width, config.decoder_hidden, stream(seed, "seg"))
        self.height_head = Decoder(config.fpn_width, config.local_width, config.decoder_hidden, stream(seed, "height"))
        self.mhr = MHR(config.mhr, stream(seed, "mhr")) if config.use_mhr else None

    @property
    def pyramid_fpn(self) -> MambaFPN:
        return self.smfpn if self.smfpn is not None else self.fpn

    def features(self, img) -> list:
        img = as_tensor(img)
        feats = self.backbone(img)
        if self.mam is not None:
            feats = [m(f) for m, f in zip(self.mam, feats)]
        return self.pyramid_fpn(feats)

    def forward(self, img) -> Predictions:
        img = as_tensor(img)
        fmaps = self.features(img)
        local = self.local(img)
        s, h_raw = decode_heads(fmaps, local, self.seg_head, self.height_head, img.shape[-2:],
                                self.config.height_scale)
        if self.mhr is None:
            return Predictions(s, h_raw)
        h_in = ops.detach(h_raw) if self.config.mhr_detach_height else h_raw
        h_ref, delta = self.mhr(h_in, s)
        return Predictions(s, h_raw, h_ref, delta)

    def param_groups(self) -> dict:
        groups = {"backbone": [], "main": []}
        for name, p in self.named_parameters():
            groups["backbone" if name.startswith("backbone.") else "main"].append((name, p))
        return groups
