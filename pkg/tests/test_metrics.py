import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssmheight.metrics import (
    CSV_HEADER, MetricAccumulator, MetricsReport, evaluate, metric_delta, metric_iou_f1, metric_rmse,
)


def test_iou_f1_examples():
    m = np.zeros((4, 4), int)
    m[:2, :2] = 1
    assert metric_iou_f1(m, m)[:2] == (1.0, 1.0)
    assert metric_iou_f1(m, 1 - m)[:2] == (0.0, 0.0)
    gt = np.zeros((4, 4), int)
    gt[0, :4] = 1
    pred = np.zeros((4, 4), int)
    pred[0, :2] = 1
    pred[3, :2] = 1
    iou, f1, tp, fp, fn = metric_iou_f1(gt, pred)
    assert (tp, fp, fn) == (2, 2, 2)
    assert abs(iou - 1 / 3) < 1e-15 and f1 == 0.5
    z = np.zeros((3, 3), int)
    assert metric_iou_f1(z, z)[:2] == (1.0, 1.0)


def test_iou_rejects_nonbinary():
    with pytest.raises(ValueError):
        metric_iou_f1(np.array([0, 0.5]), np.array([0, 1]))


def test_rmse_examples():
    h = np.arange(12.0).reshape(3, 4)
    assert metric_rmse(h, h) == 0
    assert abs(metric_rmse(h, h - 2.5) - 2.5) < 1e-12
    assert abs(metric_rmse(np.array([0.0, 0.0]), np.array([1.0, 3.0])) - math.sqrt(5)) < 1e-15


def test_rmse_per_image_then_mean():
    gt = np.zeros((2, 1, 2, 2))
    pred = gt.copy()
    pred[0] = 1.0
    pred[1] = 3.0
    assert metric_rmse(gt, pred) == 2.0
    assert abs(metric_rmse(gt, pred, pooled=True) - math.sqrt(5)) < 1e-15


def test_delta_examples():
    h = np.array([[2.0, 5.0], [10.0, 40.0]])
    for n in (1, 2, 3):
        assert metric_delta(h, h, n) == 1.0
    assert [metric_delta(h, 1.3 * h, n) for n in (1, 2, 3)] == [0.0, 1.0, 1.0]
    assert [metric_delta(h, 2 * h, n) for n in (1, 2, 3)] == [0.0, 0.0, 0.0]
    assert metric_delta(np.zeros(4), np.full(4, 0.5), 1) is None


def test_delta_zero_prediction_counts_as_miss():
    assert metric_delta(np.array([5.0]), np.array([0.0]), 3) == 0.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000))
def test_report_invariants(seed):
    rng = np.random.default_rng(seed)
    gt = (rng.uniform(size=(3, 6, 6)) > 0.6).astype(float)
    prob = rng.uniform(size=gt.shape)
    h = gt * rng.uniform(2, 30, gt.shape)
    hp = np.abs(h + rng.standard_normal(gt.shape) * 3)
    acc = MetricAccumulator()
    acc.update(gt, prob, h, hp)
    r = acc.report()
    assert r.iou <= r.f1 + 1e-15
    assert abs(r.f1 - 2 * r.iou / (1 + r.iou)) < 1e-12
    ds = [d for d in (r.delta1, r.delta2, r.delta3) if d is not None]
    assert ds == sorted(ds)
    # pixels shuffled within each image, images reordered: same report
    perm = rng.permutation(36)
    order = rng.permutation(3)

    def shuf(a):
        return a.reshape(3, 36)[:, perm].reshape(a.shape)[order]

    acc2 = MetricAccumulator()
    acc2.update(shuf(gt), shuf(prob), shuf(h), shuf(hp))
    r2 = acc2.report()
    assert (r.tp, r.fp, r.fn) == (r2.tp, r2.fp, r2.fn)
    assert abs(r.rmse - r2.rmse) < 1e-12


def test_accumulator_matches_single_batch(rng):
    gt = (rng.uniform(size=(4, 1, 5, 5)) > 0.5).astype(float)
    prob = rng.uniform(size=gt.shape)
    h = gt * 10
    hp = h + rng.standard_normal(gt.shape)
    one = MetricAccumulator()
    one.update(gt, prob, h, hp)
    split = MetricAccumulator()
    split.update(gt[:1], prob[:1], h[:1], hp[:1])
    split.update(gt[1:], prob[1:], h[1:], hp[1:])
    assert one.report().as_dict() == pytest.approx(split.report().as_dict())
    via = evaluate([(gt, prob, h, hp)])
    assert via.as_dict() == pytest.approx(one.report().as_dict())
    with pytest.raises(ValueError):
        MetricAccumulator().report()


def test_csv_row():
    r = MetricsReport(0.5, 2 / 3, 1.25, 0.9, 0.95, None, tp=1, fp=1, fn=0)
    assert CSV_HEADER == "iou,f1,rmse,delta1,delta2,delta3"
    fields = r.csv_row().split(",")
    assert len(fields) == 6 and fields[-1] == "nan" and float(fields[0]) == 0.5
