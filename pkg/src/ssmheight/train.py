"""Optimisation loop, learning-rate schedule and the ablation ladder."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .checkpoint import save_checkpoint
from .data import Split
from .heads import MHRConfig
from .losses import LossConfig, loss_breakdown, loss_huber
from .metrics import MetricAccumulator, MetricsReport
from .model import ARMS, LADDER, HeightSegNet, ModelConfig
from .tensor import Tensor, no_grad, ops
from .vmamba import BlockConfig

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "split", "loss_total", "loss_seg", "loss_reg", "iou", "f1", "rmse",
              "delta1", "delta2", "delta3", "lr_main"]
LADDER_HEADER = ["arm", "use_mam", "use_smamba_fpn", "use_mhr", "params", "iou", "f1", "rmse",
                 "delta1", "delta2", "delta3"]


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, component: str, value: float):
        super().__init__(f"non-finite {component} loss ({value}) at step {step}")
        self.step = step
        self.component = component


@dataclass
class TrainConfig:
    # optimisation
    lr_main: float = 5e-4
    lr_backbone: float = 5e-5
    weight_decay: float = 0.0025
    batch_size: int = 4
    epochs: int = 30
    t0: int = 15
    t_mult: int = 2
    lr_min_ratio: float = 0.01
    grad_clip: float = 5.0
    eval_batch: int = 16
    seed: int = 0
    # ablation switches
    use_mam: bool = True
    use_smamba_fpn: bool = True
    use_spatial_branch: bool = True
    use_mhr: bool = True
    # architecture
    channels: tuple = (16, 32, 64, 128)
    depths: tuple = (1, 1, 2, 1)
    patch_size: int = 4
    state: int = 8
    ffn_ratio: float = 2.0
    drop_path: float = 0.1
    fpn_width: int = 32
    local_width: int = 16
    decoder_hidden: int = 32
    height_scale: float = 1.0
    mhr_epsilon: float = 0.1
    mhr_gamma: float = 1.0
    mhr_width: int = 8
    mhr_detach_height: bool = True
    # objective
    edge_weight: float = 10.0
    huber_delta: float = 1.0
    loss_reduction: str = "mean"

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.depths = tuple(int(d) for d in self.depths)
        if self.lr_main <= 0 or self.lr_backbone <= 0:
            raise ValueError("learning rates must be positive")
        if self.t0 < 1 or self.t_mult < 1:
            raise ValueError("scheduler needs t0 >= 1 and t_mult >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch size must be positive and epochs nonnegative")
        if not 0 < self.lr_min_ratio <= 1:
            raise ValueError("lr_min_ratio must lie in (0, 1]")
        if self.weight_decay < 0 or self.grad_clip <= 0:
            raise ValueError("weight decay must be nonnegative and the clip norm positive")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            backbone=BlockConfig(list(self.channels), list(self.depths), self.patch_size, self.ffn_ratio,
                                 self.drop_path, self.state),
            fpn_width=self.fpn_width, local_width=self.local_width, decoder_hidden=self.decoder_hidden,
            mhr=MHRConfig(self.mhr_epsilon, self.mhr_gamma, self.mhr_width),
            height_scale=self.height_scale, use_mam=self.use_mam, use_smamba_fpn=self.use_smamba_fpn,
            use_spatial_branch=self.use_spatial_branch, use_mhr=self.use_mhr,
            mhr_detach_height=self.mhr_detach_height, seed=self.seed,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(self.edge_weight, self.huber_delta, reduction=self.loss_reduction)

    def with_arm(self, arm: str) -> "TrainConfig":
        if arm not in ARMS:
            raise ValueError(f"unknown ablation arm {arm!r}; choose from {sorted(ARMS)}")
        return dataclasses.replace(self, **ARMS[arm])


# -- config files --------------------------------------------------------------

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _coerce(name: str, raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        return tuple(int(v) for v in raw.split(",") if v.strip())
    try:
        return type(default)(raw)
    except ValueError:
        raise ValueError(f"{name}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_config(text: str, base: Optional[TrainConfig] = None) -> TrainConfig:
    """``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    base = base or TrainConfig()
    known = {f.name for f in fields(TrainConfig)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        updates[key] = _coerce(key, value, getattr(base, key))
    return dataclasses.replace(base, **updates)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# -- schedule ------------------------------------------------------------------

def lr_at(fraction: float, lr_base: float, lr_min: float) -> float:
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"cycle fraction must lie in [0, 1], got {fraction}")
    return lr_min + 0.5 * (lr_base - lr_min) * (1.0 + math.cos(math.pi * fraction))


def cycle_position(epoch: float, t0: int, t_mult: int) -> tuple:
    """``(cycle index, fraction within cycle)`` at fractional ``epoch``; cycles last ``t0 * t_mult**i``."""
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    start, length, i = 0, t0, 0
    while epoch >= start + length:
        start += length
        length *= t_mult
        i += 1
    return i, (epoch - start) / length


def restart_epochs(t0: int, t_mult: int, horizon: int) -> list:
    out, start, length = [], 0, t0
    while start + length <= horizon:
        start += length
        out.append(start)
        length *= t_mult
    return out


def scheduled_lr(epoch: float, lr_base: float, cfg: TrainConfig) -> float:
    _, frac = cycle_position(epoch, cfg.t0, cfg.t_mult)
    return lr_at(frac, lr_base, lr_base * cfg.lr_min_ratio)


# -- optimiser -----------------------------------------------------------------

class AdamW:
    """Adam moments with weight decay applied as a direct parameter shrink."""

    def __init__(self, groups: list, weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = [list(g) for g in groups]
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [[np.zeros_like(p.data) for p in g] for g in self.groups]
        self.v = [[np.zeros_like(p.data) for p in g] for g in self.groups]

    def step(self, lrs: list) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for group, ms, vs, lr in zip(self.groups, self.m, self.v, lrs):
            for p, m, v in zip(group, ms, vs):
                if self.weight_decay:
                    p.data *= 1.0 - lr * self.weight_decay
                if p.grad is None:
                    continue
                g = p.grad
                m *= self.b1
                m += (1.0 - self.b1) * g
                v *= self.b2
                v += (1.0 - self.b2) * g * g
                p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params: list, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


# -- training ------------------------------------------------------------------

@dataclass
class TrainResult:
    model: HeightSegNet
    log_rows: list
    step_lrs: list = field(default_factory=list)   # (step, epoch, lr_main, lr_backbone)
    best: dict = field(default_factory=dict)       # criterion -> (epoch, value)
    final: Optional[MetricsReport] = None

    def log_csv(self) -> str:
        return rows_csv(LOG_HEADER, self.log_rows)


def rows_csv(header: list, rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in header])
    return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return "nan"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _objective(model: HeightSegNet, preds, mask, height, loss_cfg: LossConfig) -> tuple:
    parts = loss_breakdown(mask, preds.s, height, preds.height, loss_cfg)
    objective = parts["total"]
    if preds.h_ref is not None and model.config.mhr_detach_height:
        # the trunk's own height supervision; the refiner only sees a detached copy of H_raw
        raw = loss_huber(height, preds.h_raw, loss_cfg.huber_delta, loss_cfg.reduction)
        parts["raw"] = raw
        objective = ops.add(objective, raw)
    return objective, parts


def evaluate_model(model: HeightSegNet, split: Split, loss_cfg: LossConfig, batch: int = 16,
                   h_min: float = 1.0) -> tuple:
    """``(MetricsReport, mean losses)`` on ``split`` with drop-path off and no graph."""
    was_training = model.training
    model.eval()
    acc = MetricAccumulator(h_min=h_min)
    sums = {"total": 0.0, "seg": 0.0, "reg": 0.0}
    n = len(split)
    try:
        with no_grad():
            for i in range(0, n, batch):
                x = split.images[i:i + batch]
                m, h = split.masks[i:i + batch], split.heights[i:i + batch]
                preds = model(x)
                parts = loss_breakdown(m, preds.s, h, preds.height, loss_cfg)
                for k in sums:
                    sums[k] += float(parts[k].data) * len(x)
                acc.update(m, preds.s.data, h, preds.height.data)
    finally:
        model.train(was_training)
    return acc.report(), {k: v / n for k, v in sums.items()}


def _row(epoch: int, split: str, losses: dict, rep: MetricsReport, lr: float) -> dict:
    return {"epoch": epoch, "split": split, "loss_total": losses["total"], "loss_seg": losses["seg"],
            "loss_reg": losses["reg"], "iou": rep.iou, "f1": rep.f1, "rmse": rep.rmse,
            "delta1": rep.delta1, "delta2": rep.delta2, "delta3": rep.delta3, "lr_main": lr}


def train(cfg: TrainConfig, dataset: dict, out=None, model_config: Optional[ModelConfig] = None,
          progress: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Train on ``dataset['train']``, validating on ``dataset['val']`` after every epoch."""
    train_split, val_split = dataset.get("train"), dataset.get("val")
    if train_split is None or len(train_split) == 0:
        raise ValueError("training split is empty")
    if val_split is not None and set(train_split.seeds) & set(val_split.seeds):
        raise ValueError("train and val splits overlap")
    say = progress or log.info
    out = Path(out) if out is not None else None
    model = HeightSegNet(model_config or cfg.model_config())
    model.train()
    loss_cfg = cfg.loss_config()
    groups = model.param_groups()
    opt = AdamW([[p for _, p in groups["backbone"]], [p for _, p in groups["main"]]], cfg.weight_decay)
    # the refiner is clipped on its own so that enabling it never rescales trunk updates
    refiner = model.mhr.parameters() if model.mhr is not None else []
    refiner_ids = {id(p) for p in refiner}
    trunk = [p for p in model.parameters() if id(p) not in refiner_ids]
    order_rng = np.random.default_rng([cfg.seed, zlib.crc32(b"shuffle")])
    n = len(train_split)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    result = TrainResult(model, [])
    step = 0
    lr_main = cfg.lr_main
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(dump_config(cfg))

    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(n)
        acc = MetricAccumulator()
        sums = {"total": 0.0, "seg": 0.0, "reg": 0.0}
        for b in range(steps_per_epoch):
            idx = np.sort(perm[b * cfg.batch_size:(b + 1) * cfg.batch_size])
            x, m, h = train_split.images[idx], train_split.masks[idx], train_split.heights[idx]
            e = epoch + b / steps_per_epoch
            lr_main = scheduled_lr(e, cfg.lr_main, cfg)
            lr_bb = scheduled_lr(e, cfg.lr_backbone, cfg)
            result.step_lrs.append((step, e, lr_main, lr_bb))

            model.zero_grad()
            preds = model(Tensor(x))
            objective, parts = _objective(model, preds, m, h, loss_cfg)
            for name in ("ce", "dice", "edge", "reg", "raw"):
                if name in parts:
                    val = float(parts[name].data)
                    if not math.isfinite(val):
                        raise NonFiniteLossError(step, name, val)
            objective.backward()
            clip_grad_norm(trunk, cfg.grad_clip)
            if refiner:
                clip_grad_norm(refiner, cfg.grad_clip)
            opt.step([lr_bb, lr_main])

            for k in sums:
                sums[k] += float(parts[k].data) * len(idx)
            acc.update(m, preds.s.data, h, preds.height.data)
            step += 1

        train_rep = acc.report()
        result.log_rows.append(_row(epoch, "train", {k: v / n for k, v in sums.items()}, train_rep, lr_main))
        msg = f"epoch {epoch}: train loss {sums['total'] / n:.4f} iou {train_rep.iou:.3f} rmse {train_rep.rmse:.3f}"
        if val_split is not None and len(val_split):
            rep, losses = evaluate_model(model, val_split, loss_cfg, cfg.eval_batch)
            result.log_rows.append(_row(epoch, "val", losses, rep, lr_main))
            result.final = rep
            msg += f" | val iou {rep.iou:.3f} rmse {rep.rmse:.3f}"
            _track_best(result, out, model, epoch, rep)
        say(msg)
        if out is not None:
            (out / "train_log.csv").write_text(result.log_csv())

    if out is not None:
        save_checkpoint(out / "last", model, {"epochs": cfg.epochs})
        (out / "lr_log.csv").write_text(rows_csv(
            ["step", "epoch", "lr_main", "lr_backbone"],
            [dict(zip(("step", "epoch", "lr_main", "lr_backbone"), r)) for r in result.step_lrs]))
    return result


def _track_best(result: TrainResult, out, model, epoch: int, rep: MetricsReport) -> None:
    for key, value, better in (("iou", rep.iou, lambda a, b: a > b), ("rmse", rep.rmse, lambda a, b: a < b)):
        prev = result.best.get(key)
        if prev is None or better(value, prev[1]):
            result.best[key] = (epoch, value)
            if out is not None:
                save_checkpoint(out / f"best_{key}", model, {"epoch": epoch, key: value})


# -- ablation ------------------------------------------------------------------

def run_ablation_ladder(dataset: dict, base: TrainConfig, out=None, arms=None,
                        progress: Optional[Callable[[str], None]] = None) -> tuple:
    """Train every arm on the same data and seed; returns ``(rows, csv_text)``."""
    arms = list(arms or LADDER)
    rows = []
    for arm in arms:
        cfg = base.with_arm(arm)
        res = train(cfg, dataset, out=(Path(out) / arm) if out is not None else None, progress=progress)
        rep = res.final
        if rep is None:
            raise ValueError("ablation needs a validation split")
        rows.append({"arm": arm, "use_mam": cfg.use_mam, "use_smamba_fpn": cfg.use_smamba_fpn,
                     "use_mhr": cfg.use_mhr, "params": res.model.num_parameters(), "iou": rep.iou,
                     "f1": rep.f1, "rmse": rep.rmse, "delta1": rep.delta1, "delta2": rep.delta2,
                     "delta3": rep.delta3})
    text = rows_csv(LADDER_HEADER, rows)
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "ablation.csv").write_text(text)
    return rows, text
