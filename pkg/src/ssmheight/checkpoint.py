"""Checkpoint directories: one BMT1 file per parameter plus a JSON manifest."""

from __future__ import annotations

import json
from pathlib import Path

from .model import HeightSegNet, ModelConfig
from .tensor import load_bmt, save_bmt

MANIFEST = "manifest.json"


def save_checkpoint(path, model: HeightSegNet, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    files = {}
    for i, (name, p) in enumerate(model.named_parameters()):
        fname = f"p{i:04d}.bmt"
        save_bmt(path / fname, p.data)
        files[name] = fname
    manifest = {"format": "ssmheight-checkpoint-1", "model": model.config.to_dict(), "params": files,
                "extra": extra or {}}
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    mpath = Path(path) / MANIFEST
    if not mpath.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {mpath}")
    return json.loads(mpath.read_text())


def load_checkpoint(path) -> HeightSegNet:
    path = Path(path)
    manifest = read_manifest(path)
    model = HeightSegNet(ModelConfig.from_dict(manifest["model"]))
    model.load_state_dict({name: load_bmt(path / f) for name, f in manifest["params"].items()})
    return model.eval()
