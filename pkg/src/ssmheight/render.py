"""Netpbm dumps of predictions: PGM masks and PPM side-by-side panels."""

from __future__ import annotations

from pathlib import Path

import numpy as np

HEIGHT_RANGE = (0.0, 50.0)

# fixed five-stop ramp, interpolated linearly over HEIGHT_RANGE
_STOPS = np.array([
    [0.05, 0.05, 0.20],
    [0.10, 0.35, 0.75],
    [0.20, 0.75, 0.50],
    [0.95, 0.85, 0.20],
    [0.85, 0.15, 0.10],
])


def height_colormap(height) -> np.ndarray:
    """``[H, W]`` metres -> ``[H, W, 3]`` floats in [0, 1], linear over 0-50 m, clipped."""
    lo, hi = HEIGHT_RANGE
    t = np.clip((np.asarray(height, float) - lo) / (hi - lo), 0.0, 1.0) * (len(_STOPS) - 1)
    i = np.minimum(t.astype(int), len(_STOPS) - 2)
    frac = (t - i)[..., None]
    return _STOPS[i] * (1 - frac) + _STOPS[i + 1] * frac


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255).astype(np.uint8)


def write_pgm(path, mask_prob, threshold: float = 0.5) -> None:
    m = np.asarray(mask_prob)
    m = m.reshape(m.shape[-2:])
    img = np.where(m >= threshold, 255, 0).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def write_ppm(path, rgb) -> None:
    """``rgb``: ``[H, W, 3]`` floats in [0, 1]."""
    img = _to_u8(np.asarray(rgb))
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pnm(path) -> np.ndarray:
    """Minimal reader for the binary PGM/PPM files written here."""
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    magic, w, h, _ = parts[0], int(parts[1]), int(parts[2]), int(parts[3])
    body = np.frombuffer(parts[4], dtype=np.uint8)
    return body.reshape(h, w) if magic == b"P5" else body.reshape(h, w, 3)


def side_by_side(image, mask_gt, mask_pred, h_gt, h_pred, gap: int = 2) -> np.ndarray:
    """image | gt mask | pred mask | gt height | pred height, as one ``[H, W', 3]`` panel."""
    img = np.transpose(np.asarray(image, float)[:3], (1, 2, 0))
    H = img.shape[0]

    def grey(m):
        m = np.asarray(m, float).reshape(H, -1)
        return np.repeat(m[..., None], 3, axis=2)

    tiles = [img, grey(np.asarray(mask_gt) >= 0.5), grey(np.asarray(mask_pred) >= 0.5),
             height_colormap(np.asarray(h_gt).reshape(H, -1)), height_colormap(np.asarray(h_pred).reshape(H, -1))]
    sep = np.ones((H, gap, 3))
    out = [tiles[0]]
    for t in tiles[1:]:
        out += [sep, t]
    return np.concatenate(out, axis=1)
