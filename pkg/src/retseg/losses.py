"""Composite segmentation loss and pooled evaluation metrics."""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError
from .tensor import Tensor, as_tensor, clip, log, power, tabs


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 1.0
    focal_gamma: float = 2.0
    dice_weight: float = 0.0
    prob_clamp_eps: float = 1e-7

    def __post_init__(self):
        for name in ("alpha", "beta", "focal_gamma", "dice_weight"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ParameterError(f"LossConfig.{name} must be finite and >= 0, got {v}")
        if not 0 < self.prob_clamp_eps < 0.5:
            raise ParameterError(f"LossConfig.prob_clamp_eps must be in (0, 0.5), got {self.prob_clamp_eps}")


def _pair(pred, target) -> tuple[Tensor, Tensor]:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    return pred, target


def bce_loss(pred, target, eps: float = 1e-7) -> Tensor:
    pred, y = _pair(pred, target)
    p = clip(pred, eps, 1.0 - eps)
    ll = y * log(p) + (1.0 - y) * log(1.0 - p)
    return -ll.mean()


def focal_loss(pred, target, focal_gamma: float = 2.0, eps: float = 1e-7) -> Tensor:
    pred, y = _pair(pred, target)
    p = clip(pred, eps, 1.0 - eps)
    pt = y * p + (1.0 - y) * (1.0 - p)
    logpt = log(pt)
    if focal_gamma == 0:
        return -logpt.mean()
    return -(power(1.0 - pt, focal_gamma) * logpt).mean()


def l1_recon_loss(pred, target) -> Tensor:
    pred, y = _pair(pred, target)
    return tabs(pred - y).mean()


def dice_loss(pred, target, smooth: float = 1.0) -> Tensor:
    pred, y = _pair(pred, target)
    inter = (pred * y).sum()
    return 1.0 - (2.0 * inter + smooth) / (pred.sum() + y.sum() + smooth)


def total_loss(pred, target, cfg: LossConfig = LossConfig()) -> tuple[Tensor, dict[str, float]]:
    """``alpha*BCE + beta*focal + L1 (+ dice_weight*dice)`` and the weighted per-term values."""
    pred, target = _pair(pred, target)
    eps = cfg.prob_clamp_eps
    terms = {
        "bce": cfg.alpha * bce_loss(pred, target, eps),
        "focal": cfg.beta * focal_loss(pred, target, cfg.focal_gamma, eps),
        "recon": l1_recon_loss(pred, target),
    }
    if cfg.dice_weight:
        terms["dice"] = cfg.dice_weight * dice_loss(pred, target)
    total = terms["bce"] + terms["focal"] + terms["recon"]
    if "dice" in terms:
        total = total + terms["dice"]
    breakdown = {k: v.item() for k, v in terms.items()}
    breakdown.setdefault("dice", 0.0)
    return total, breakdown


# ---------------------------------------------------------------- metrics

METRIC_COLUMNS = ("iou", "dice", "precision", "recall", "f1", "mse", "fps")


@dataclass
class MetricsRecord:
    iou: float
    dice: float
    precision: float
    recall: float
    f1: float
    mse: float
    fps: float = float("nan")

    def row(self) -> list[float]:
        return [getattr(self, c) for c in METRIC_COLUMNS]


@dataclass
class ConfusionCounts:
    """Pixel counts pooled over any number of batches (micro-averaging)."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    sq_err: float = 0.0
    n: int = 0

    def update(self, pred_prob, target, threshold: float = 0.5) -> "ConfusionCounts":
        p = np.asarray(getattr(pred_prob, "data", pred_prob), dtype=np.float64)
        y = np.asarray(getattr(target, "data", target), dtype=np.float64)
        if p.shape != y.shape:
            raise ShapeError(f"prediction shape {p.shape} != target shape {y.shape}")
        pb = p >= threshold
        yb = y >= 0.5
        self.tp += int(np.count_nonzero(pb & yb))
        self.fp += int(np.count_nonzero(pb & ~yb))
        self.fn += int(np.count_nonzero(~pb & yb))
        self.tn += int(np.count_nonzero(~pb & ~yb))
        self.sq_err += float(((p - y) ** 2).sum())
        self.n += p.size
        return self

    def record(self, fps: float = float("nan")) -> MetricsRecord:
        tp, fp, fn = self.tp, self.fp, self.fn
        mse = self.sq_err / self.n if self.n else 0.0
        pred_empty, true_empty = tp + fp == 0, tp + fn == 0
        if pred_empty or true_empty:
            v = 1.0 if (pred_empty and true_empty) else 0.0
            return MetricsRecord(v, v, v, v, v, mse, fps)
        precision, recall = tp / (tp + fp), tp / (tp + fn)
        f1 = 0.0 if tp == 0 else 2 * precision * recall / (precision + recall)
        return MetricsRecord(
            iou=tp / (tp + fp + fn),
            dice=2 * tp / (2 * tp + fp + fn),
            precision=precision,
            recall=recall,
            f1=f1,
            mse=mse,
            fps=fps,
        )


def compute_metrics(pred_prob, target, threshold: float = 0.5) -> MetricsRecord:
    return ConfusionCounts().update(pred_prob, target, threshold).record()


def measure_fps(model, image_size: int | None = None, iterations: int = 10, warmup: int = 3, runs: int = 3) -> float:
    """Median-of-``runs`` single-image eval-mode throughput in frames per second."""
    if iterations < 10:
        raise ParameterError(f"measure_fps: iterations must be >= 10, got {iterations}")
    if warmup < 3:
        raise ParameterError(f"measure_fps: warmup must be >= 3, got {warmup}")
    if image_size is not None and image_size != model.config.image_size:
        model = model.at_size(image_size)
    s = model.config.image_size
    x = Tensor(np.random.default_rng(0).random((1, model.config.input_channels, s, s)))
    for _ in range(warmup):
        model(x)
    rates = []
    for _ in range(runs):
        t0 = time.perf_counter()
        for _ in range(iterations):
            model(x)
        rates.append(iterations / (time.perf_counter() - t0))
    return statistics.median(rates)
