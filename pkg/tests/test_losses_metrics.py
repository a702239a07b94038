import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from retseg.errors import ParameterError, ShapeError
from retseg.losses import (
    ConfusionCounts,
    LossConfig,
    bce_loss,
    compute_metrics,
    dice_loss,
    focal_loss,
    l1_recon_loss,
    measure_fps,
    total_loss,
)
from retseg.model import RetSegModel, tiny_config
from retseg.verify import OP_TOL, total_loss_grad

LN2 = math.log(2.0)


class TestLosses:
    def test_bce_half(self):
        assert bce_loss(np.array([0.5]), np.array([1.0])).item() == pytest.approx(LN2, abs=1e-12)

    def test_bce_clamp_floor(self):
        y = np.array([0.0, 1.0, 1.0, 0.0])
        assert bce_loss(y, y).item() <= -math.log(1 - 1e-7) + 1e-15

    def test_focal(self):
        p, y = np.array([0.5]), np.array([1.0])
        assert focal_loss(p, y, 2.0).item() == pytest.approx(0.25 * LN2, abs=1e-12)
        assert focal_loss(np.array([1.0]), y, 2.0).item() < 1e-12
        rng = np.random.default_rng(0)
        p = rng.uniform(0.001, 0.999, 50)
        y = (rng.random(50) < 0.5).astype(float)
        assert abs(focal_loss(p, y, 0.0).item() - bce_loss(p, y).item()) < 1e-12

    def test_l1(self):
        assert l1_recon_loss(np.ones(5), np.ones(5)).item() == 0.0
        assert l1_recon_loss(np.full(5, 0.5), np.ones(5)).item() == 0.5

    def test_dice(self):
        assert dice_loss(np.ones(9), np.ones(9)).item() == 0.0
        assert dice_loss(np.zeros(9), np.zeros(9)).item() == 0.0
        small = dice_loss(np.zeros(4), np.ones(4)).item()
        large = dice_loss(np.zeros(10_000), np.ones(10_000)).item()
        assert small < large < 1.0 and large > 0.999

    def test_total_isolation(self):
        rng = np.random.default_rng(1)
        y = (rng.random(20) < 0.5).astype(float)
        loss, parts = total_loss(y, y, LossConfig(alpha=1.0, beta=0.0))
        assert loss.item() < 1e-6
        p = rng.uniform(0.05, 0.95, 20)
        loss, parts = total_loss(p, y, LossConfig(alpha=0.0, beta=0.0))
        assert loss.item() == pytest.approx(l1_recon_loss(p, y).item(), abs=1e-15)
        assert parts["bce"] == parts["focal"] == parts["dice"] == 0.0

    def test_total_breakdown_sums(self):
        rng = np.random.default_rng(2)
        p = rng.uniform(0.05, 0.95, (2, 1, 4, 4))
        y = (rng.random(p.shape) < 0.5).astype(float)
        loss, parts = total_loss(p, y, LossConfig(alpha=3.0, beta=1.0, dice_weight=0.5))
        assert loss.item() == pytest.approx(sum(parts.values()), rel=1e-14)
        assert loss.item() >= 0

    def test_total_loss_grad(self):
        assert total_loss_grad(np.random.default_rng(3)) < OP_TOL

    def test_errors(self):
        with pytest.raises(ShapeError):
            bce_loss(np.ones(3), np.ones(4))
        with pytest.raises(ParameterError):
            LossConfig(alpha=-1.0)


class TestMetrics:
    def test_perfect(self):
        y = np.array([[1.0, 0.0], [1.0, 1.0]])
        m = compute_metrics(y, y)
        assert (m.iou, m.dice, m.precision, m.recall, m.f1, m.mse) == (1, 1, 1, 1, 1, 0)

    def test_disjoint(self):
        m = compute_metrics(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
        assert m.iou == 0 and m.dice == 0

    def test_hand_counted(self):
        pred = np.array([1, 1, 0, 0, 0, 0], dtype=float)
        true = np.array([1, 1, 1, 1, 0, 0], dtype=float)
        m = compute_metrics(pred, true)
        assert m.iou == 0.5
        assert m.dice == pytest.approx(2 / 3, abs=1e-15)
        assert m.precision == 1.0 and m.recall == 0.5

    def test_both_empty(self):
        m = compute_metrics(np.zeros(4), np.zeros(4))
        assert m.iou == m.dice == 1.0

    def test_pooling_is_micro(self):
        rng = np.random.default_rng(4)
        a = rng.random((4, 1, 6, 6))
        b = (rng.random((4, 1, 6, 6)) < 0.4).astype(float)
        c = ConfusionCounts()
        for i in range(4):
            c.update(a[i], b[i])
        whole = compute_metrics(a, b)
        assert c.record().iou == whole.iou and c.record().mse == pytest.approx(whole.mse, rel=1e-14)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 16), st.integers(2, 16))
    def test_identities_and_ranges(self, seed, h, w):
        rng = np.random.default_rng(seed)
        a = (rng.random((h, w)) < rng.uniform(0.05, 0.95)).astype(float)
        b = (rng.random((h, w)) < rng.uniform(0.05, 0.95)).astype(float)
        m = compute_metrics(a, b)
        assert abs(m.dice - 2 * m.iou / (1 + m.iou)) < 1e-12
        assert abs(m.f1 - m.dice) < 1e-12
        for v in (m.iou, m.dice, m.precision, m.recall, m.f1, m.mse):
            assert 0.0 <= v <= 1.0
        perm = rng.permutation(h * w)
        mp = compute_metrics(a.reshape(-1)[perm], b.reshape(-1)[perm])
        assert mp.row()[:6] == m.row()[:6]


class TestFps:
    def test_positive(self):
        fps = measure_fps(RetSegModel.create(tiny_config(16), 0), iterations=10)
        assert fps > 0 and math.isfinite(fps)

    def test_preconditions(self):
        model = RetSegModel.create(tiny_config(16), 0)
        with pytest.raises(ParameterError):
            measure_fps(model, iterations=5)
        with pytest.raises(ParameterError):
            measure_fps(model, warmup=1)

    def test_other_size(self):
        model = RetSegModel.create(tiny_config(16), 0)
        assert measure_fps(model, 32, iterations=10) > 0
