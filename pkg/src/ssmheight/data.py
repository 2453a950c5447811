"""Procedural aerial scenes (image, building mask, height) and preprocessing helpers."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .tensor import load_bmt, save_bmt

VAL_SEED_OFFSET = 1_000_000
INDEX_NAME = "index.json"


@dataclass(frozen=True)
class SceneConfig:
    extent: int = 64
    buildings: tuple = (2, 6)
    size_range: tuple = (6, 20)
    rotated_fraction: float = 0.3
    height_mu: float = math.log(12.0)
    height_sigma: float = 0.5
    shadows: bool = True
    sun_azimuth: float = math.radians(135.0)
    shadow_px_per_m: float = 0.25
    label_noise: float = 0.0
    pixel_noise: float = 0.02

    def __post_init__(self):
        lo, hi = self.buildings
        if not 0 <= lo <= hi:
            raise ValueError(f"building count range {self.buildings} is not ordered")
        if self.extent < 32:
            raise ValueError(f"scene extent must be at least 32, got {self.extent}")
        if not 0 < self.size_range[0] <= self.size_range[1]:
            raise ValueError(f"size range {self.size_range} is not ordered")
        if self.height_sigma <= 0:
            raise ValueError("height sigma must be positive")
        if not 0.0 <= self.label_noise <= 1.0:
            raise ValueError("label-noise rate must lie in [0, 1]")

    @property
    def height_mean(self) -> float:
        return math.exp(self.height_mu + self.height_sigma ** 2 / 2)

    @property
    def height_std(self) -> float:
        s2 = self.height_sigma ** 2
        return math.sqrt((math.exp(s2) - 1.0) * math.exp(2 * self.height_mu + s2))

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        for key in ("buildings", "size_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class SceneSample:
    image: np.ndarray   # [3, H, W] in [0, 1]
    mask: np.ndarray    # [1, H, W] in {0, 1}
    height: np.ndarray  # [1, H, W] meters
    building_heights: list = field(default_factory=list)
    corrupted: int = 0

    def check(self) -> None:
        if self.image.min() < 0 or self.image.max() > 1:
            raise ValueError("image values must stay in [0, 1]")
        on = self.mask[0] > 0
        if np.any(self.height[0][~on] != 0):
            raise ValueError("height outside the building mask")
        if np.any(self.height < 0):
            raise ValueError("negative height")


def _footprint(rng: np.random.Generator, cfg: SceneConfig, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    n = cfg.extent
    lo, hi = cfg.size_range
    h, w = rng.uniform(lo, hi, size=2)
    cy, cx = rng.uniform(h / 2, n - h / 2), rng.uniform(w / 2, n - w / 2)
    theta = rng.uniform(0, math.pi / 2) if rng.random() < cfg.rotated_fraction else 0.0
    c, s = math.cos(theta), math.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (np.abs(u) <= w / 2) & (np.abs(v) <= h / 2)


def _shadow(fp: np.ndarray, length: float, azimuth: float) -> np.ndarray:
    out = np.zeros_like(fp)
    n = fp.shape[0]
    steps = int(math.ceil(length))
    for k in range(1, steps + 1):
        dy = int(round(k * math.sin(azimuth)))
        dx = int(round(k * math.cos(azimuth)))
        src = fp[max(0, -dy):n - max(0, dy), max(0, -dx):n - max(0, dx)]
        out[max(0, dy):max(0, dy) + src.shape[0], max(0, dx):max(0, dx) + src.shape[1]] |= src
    return out


def roof_brightness(height: float) -> float:
    """Luminance gain for a roof of ``height`` meters: taller roofs catch more light."""
    return 0.45 + 0.5 * (1.0 - math.exp(-height / 15.0))


def generate_scene(config: SceneConfig, seed: int) -> SceneSample:
    rng = np.random.default_rng(seed)
    n = config.extent
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    ground = np.array([0.30, 0.36, 0.28]) + rng.uniform(-0.04, 0.04, size=3)
    image = np.broadcast_to(ground[:, None, None], (3, n, n)).copy()
    image += 0.03 * rng.standard_normal((1, n, n))
    mask = np.zeros((n, n))
    height = np.zeros((n, n))
    roofs = np.zeros((n, n), dtype=bool)
    shade = np.zeros((n, n), dtype=bool)
    heights, corrupted = [], 0

    count = int(rng.integers(config.buildings[0], config.buildings[1] + 1))
    for _ in range(count):
        fp = _footprint(rng, config, yy, xx)
        h = float(rng.lognormal(config.height_mu, config.height_sigma))
        heights.append(h)
        tint = rng.uniform(0.85, 1.15, size=3)
        albedo = roof_brightness(h) * tint * np.array([0.95, 0.9, 0.85])
        image[:, fp] = np.clip(albedo, 0, 1)[:, None]
        roofs |= fp
        if config.shadows:
            shade |= _shadow(fp, h * config.shadow_px_per_m, config.sun_azimuth)
        label_h, label_on = h, True
        if config.label_noise and rng.random() < config.label_noise:
            corrupted += 1
            if rng.random() < 0.5:
                label_on = False          # building missing from the labels
            else:
                label_h = h * float(rng.uniform(0.5, 2.0))  # wrong height
        # later buildings occlude earlier ones
        mask[fp] = 1.0 if label_on else 0.0
        height[fp] = label_h if label_on else 0.0

    shade &= ~roofs
    image[:, shade] *= 0.45
    if config.pixel_noise:
        image += config.pixel_noise * rng.standard_normal(image.shape)
    image = np.clip(image, 0.0, 1.0)
    sample = SceneSample(image, mask[None], height[None], heights, corrupted)
    return sample


def impute_nan_nearest(height) -> np.ndarray:
    """Fill NaNs from the nearest finite pixel (Euclidean); ties go to the smaller row, then column."""
    h = np.array(height, dtype=np.float64)
    if h.ndim != 2:
        raise ValueError(f"expected a 2-D map, got shape {h.shape}")
    bad = np.isnan(h)
    if not bad.any():
        return h
    if bad.all():
        raise ValueError("cannot impute a map with no finite pixels")
    good = np.argwhere(~bad)          # row-major order, so argmin breaks ties as required
    vals = h[~bad]
    holes = np.argwhere(bad)
    for start in range(0, len(holes), 512):
        chunk = holes[start:start + 512]
        d2 = ((chunk[:, None, :] - good[None, :, :]) ** 2).sum(axis=2)
        h[chunk[:, 0], chunk[:, 1]] = vals[np.argmin(d2, axis=1)]
    return h


def binarize_semantic(class_map, building_class_id: int) -> np.ndarray:
    m = np.asarray(class_map)
    if np.any(m < 0):
        raise ValueError("class ids must be nonnegative")
    return (m == building_class_id).astype(np.float64)


def random_crops(sample: SceneSample, crop: int, count: int, seed: int) -> list:
    _, H, W = sample.image.shape
    if crop > H or crop > W:
        raise ValueError(f"crop {crop} exceeds scene extent {H}x{W}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        r = int(rng.integers(0, H - crop + 1))
        c = int(rng.integers(0, W - crop + 1))
        win = (slice(None), slice(r, r + crop), slice(c, c + crop))
        out.append(SceneSample(sample.image[win].copy(), sample.mask[win].copy(), sample.height[win].copy(),
                               list(sample.building_heights), sample.corrupted))
    return out


# -- datasets ------------------------------------------------------------------

def split_seeds(seed: int, n_train: int, n_val: int) -> dict:
    """Disjoint consecutive seed ranges for the two splits."""
    if n_train > VAL_SEED_OFFSET:
        raise ValueError(f"at most {VAL_SEED_OFFSET} training scenes per dataset")
    base = int(seed) * 2 * VAL_SEED_OFFSET
    return {
        "train": list(range(base, base + n_train)),
        "val": list(range(base + VAL_SEED_OFFSET, base + VAL_SEED_OFFSET + n_val)),
    }


@dataclass
class Split:
    images: np.ndarray
    masks: np.ndarray
    heights: np.ndarray
    seeds: list

    def __len__(self) -> int:
        return len(self.seeds)


def make_split(config: SceneConfig, seeds) -> Split:
    samples = [generate_scene(config, s) for s in seeds]
    if not samples:
        n = config.extent
        return Split(np.zeros((0, 3, n, n)), np.zeros((0, 1, n, n)), np.zeros((0, 1, n, n)), [])
    return Split(
        np.stack([s.image for s in samples]), np.stack([s.mask for s in samples]),
        np.stack([s.height for s in samples]), list(seeds),
    )


def make_dataset(config: SceneConfig, seed: int, n_train: int, n_val: int) -> dict:
    return {name: make_split(config, seeds) for name, seeds in split_seeds(seed, n_train, n_val).items()}


def write_dataset(root, config: SceneConfig, seed: int, n_train: int, n_val: int) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    seeds = split_seeds(seed, n_train, n_val)
    entries = []
    for split, split_list in seeds.items():
        for s in split_list:
            sample = generate_scene(config, s)
            name = f"{split}_{s:09d}"
            d = root / name
            d.mkdir(exist_ok=True)
            save_bmt(d / "image.bmt", sample.image)
            save_bmt(d / "mask.bmt", sample.mask)
            save_bmt(d / "height.bmt", sample.height)
            entries.append({"dir": name, "seed": s, "split": split})
    index = {"format": "ssmheight-dataset-1", "seed": seed, "scene": dataclasses.asdict(config),
             "samples": entries}
    (root / INDEX_NAME).write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    return root


def read_dataset(root, splits: Optional[tuple] = None) -> dict:
    root = Path(root)
    index_path = root / INDEX_NAME
    if not index_path.exists():
        raise FileNotFoundError(f"no dataset index at {index_path}")
    index = json.loads(index_path.read_text())
    groups: dict = {}
    for e in index["samples"]:
        if splits is None or e["split"] in splits:
            groups.setdefault(e["split"], []).append(e)
    train_seeds = {e["seed"] for e in groups.get("train", [])}
    if any(e["seed"] in train_seeds for e in groups.get("val", [])):
        raise ValueError("train and val splits share a scene seed")
    out = {}
    for split, entries in groups.items():
        imgs, masks, hts = [], [], []
        for e in entries:
            d = root / e["dir"]
            imgs.append(load_bmt(d / "image.bmt"))
            masks.append(load_bmt(d / "mask.bmt"))
            hts.append(load_bmt(d / "height.bmt"))
        out[split] = Split(np.stack(imgs), np.stack(masks), np.stack(hts), [e["seed"] for e in entries])
    return out


def scene_config_of(root) -> SceneConfig:
    index = json.loads((Path(root) / INDEX_NAME).read_text())
    return SceneConfig.from_dict(index["scene"])
