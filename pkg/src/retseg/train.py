"""Adam training loop, evaluation, and the flat key=value train config."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Sample, batch_iterator
from .errors import ConfigError
from .losses import ConfusionCounts, LossConfig, MetricsRecord, total_loss
from .model import RetSegConfig, RetSegParams, _DEFAULTS as _MODEL_DEFAULTS, _parse_value, init_params, retseg_forward
from .tensor import GradMap, Tape, backward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    log_every: int = 1
    grad_clip: float = 0.0
    max_steps: int = 0
    lr_schedule: str = "constant"
    train_fraction: float = 0.8
    checkpoint_out: str = "retseg.ckpt"
    loss: LossConfig = field(default_factory=LossConfig)
    model: RetSegConfig = field(default_factory=RetSegConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.grad_clip < 0 or self.max_steps < 0:
            raise ConfigError("grad_clip and max_steps must be >= 0 (0 disables)")


_TRAIN_KEYS = {f.name: f.default for f in fields(TrainConfig) if f.name not in ("loss", "model")}
_LOSS_KEYS = {f.name: f.default for f in fields(LossConfig)}

CONFIG_KEYS = sorted(_TRAIN_KEYS) + sorted(_LOSS_KEYS) + sorted(_MODEL_DEFAULTS)


def parse_train_config(text: str) -> TrainConfig:
    """Parse flat ``key=value`` lines; ``#`` starts a comment; unknown keys are errors."""
    train, loss, model = {}, {}, {}
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {raw.strip()!r}", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} (first set on line {seen[key]})", lineno)
        seen[key] = lineno
        if key in _TRAIN_KEYS:
            train[key] = _parse_value(key, value, _TRAIN_KEYS[key], lineno)
        elif key in _LOSS_KEYS:
            loss[key] = _parse_value(key, value, _LOSS_KEYS[key], lineno)
        elif key in _MODEL_DEFAULTS:
            model[key] = (value, lineno)
        else:
            raise ConfigError(f"unknown config key {key!r}", lineno)
    try:
        loss_cfg = LossConfig(**loss)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return TrainConfig(loss=loss_cfg, model=RetSegConfig.from_mapping(model), **train)


def load_train_config(path) -> TrainConfig:
    return parse_train_config(Path(path).read_text(encoding="utf-8"))


class Adam:
    def __init__(self, params: RetSegParams, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads: GradMap) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[p]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def learning_rate_at(cfg: TrainConfig, step: int, n_train: int) -> float:
    """Constant, or cosine-decayed to zero over the planned number of steps."""
    if cfg.lr_schedule == "constant":
        return cfg.learning_rate
    per_epoch = -(-n_train // cfg.batch_size)
    total = cfg.epochs * per_epoch
    if cfg.max_steps:
        total = min(total, cfg.max_steps)
    return 0.5 * cfg.learning_rate * (1.0 + np.cos(np.pi * min(step, total) / total))


def clip_global_norm(grads: GradMap, params: RetSegParams, max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((grads[p] ** 2).sum()) for p in params.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p in grads:
                grads[p] = grads[p] * scale
    return norm


def evaluate(params: RetSegParams, config: RetSegConfig, samples: Sequence[Sample], loss_cfg: LossConfig | None = None,
             batch_size: int = 8) -> tuple[MetricsRecord, float]:
    """Pooled metrics and mean loss over ``samples`` in eval mode."""
    counts = ConfusionCounts()
    total, n = 0.0, 0
    for batch in batch_iterator(samples, batch_size, seed=None):
        pred = retseg_forward(batch.images, params, config)
        counts.update(pred, batch.masks)
        if loss_cfg is not None:
            loss, _ = total_loss(pred, batch.masks, loss_cfg)
            total += loss.item() * len(batch.ids)
            n += len(batch.ids)
    return counts.record(), (total / n if n else float("nan"))


LOG_COLUMNS = ("epoch", "steps", "train_loss", "train_bce", "train_focal", "train_recon", "train_dice",
               "val_loss", "val_iou", "val_dice")


@dataclass
class TrainResult:
    params: RetSegParams
    best_params: RetSegParams
    best_val_iou: float
    rows: list[dict]
    steps: int


def train(
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample],
    cfg: TrainConfig,
    params: RetSegParams | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    mcfg = cfg.model
    if not train_samples:
        raise ConfigError("training set is empty")
    s = train_samples[0].image.shape[-1]
    if s != mcfg.image_size:
        raise ConfigError(f"samples are {s}x{s} but model image_size is {mcfg.image_size}")
    params = init_params(mcfg, cfg.seed) if params is None else params
    opt = Adam(params, cfg.learning_rate, (cfg.adam_beta1, cfg.adam_beta2), cfg.adam_eps)
    drop_rng = np.random.default_rng([cfg.seed, 0xD0])
    best_iou, best = -1.0, params.copy()
    rows = []
    step = 0
    for epoch in range(cfg.epochs):
        sums = dict.fromkeys(("loss", "bce", "focal", "recon", "dice"), 0.0)
        seen = 0
        for batch in batch_iterator(train_samples, cfg.batch_size, cfg.seed, epoch):
            with Tape() as tape:
                pred = retseg_forward(batch.images, params, mcfg, training=True, rng=drop_rng)
                loss, parts = total_loss(pred, batch.masks, cfg.loss)
            grads = backward(loss, tape)
            if cfg.grad_clip:
                clip_global_norm(grads, params, cfg.grad_clip)
            opt.lr = learning_rate_at(cfg, step, len(train_samples))
            opt.step(grads)
            step += 1
            b = len(batch.ids)
            sums["loss"] += loss.item() * b
            for k in ("bce", "focal", "recon", "dice"):
                sums[k] += parts[k] * b
            seen += b
            if cfg.max_steps and step >= cfg.max_steps:
                break
        row = {"epoch": epoch + 1, "steps": step}
        row.update({f"train_{k}" if k != "loss" else "train_loss": v / seen for k, v in sums.items()})
        if val_samples:
            rec, vloss = evaluate(params, mcfg, val_samples, cfg.loss, cfg.batch_size)
            row.update(val_loss=vloss, val_iou=rec.iou, val_dice=rec.dice)
            if rec.iou > best_iou:
                best_iou, best = rec.iou, params.copy()
        else:
            row.update(val_loss=float("nan"), val_iou=float("nan"), val_dice=float("nan"))
        rows.append(row)
        if on_epoch is not None:
            on_epoch(row)
        if cfg.log_every and (epoch + 1) % cfg.log_every == 0:
            log.info("epoch %d step %d train_loss %.5f val_iou %.4f", epoch + 1, step, row["train_loss"], row["val_iou"])
        if cfg.max_steps and step >= cfg.max_steps:
            break
    if not val_samples:
        best = params.copy()
    return TrainResult(params, best, best_iou, rows, step)


def write_run_log(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"], r["steps"]] + [repr(float(r[c])) for c in LOG_COLUMNS[2:]])
