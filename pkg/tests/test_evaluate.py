import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from oracles import brute_metrics
from seisfacies.errors import InputError, MetricError
from seisfacies.evaluate import (
    ConfusionMatrix,
    accumulate,
    evaluate_slices,
    export_features,
    metrics,
    predict_slices,
    predict_volume,
    prediction_image,
    render_report,
    report_to_csv,
)
from seisfacies.model import DualHeadOutput, ModelSpec, build_model
from seisfacies.volume import IGNORE_LABEL, SliceSamplingPlan, SliceSet, SynthSpec, synth_volume


class TestAccumulate:
    def test_perfect_is_diagonal(self):
        cm = ConfusionMatrix.zeros(3)
        gt = np.array([[0, 1], [2, 0]])
        accumulate(cm, gt, gt)
        assert np.array_equal(cm.counts, np.diag([2, 1, 1]))

    def test_ignore_counted_aside(self):
        cm = ConfusionMatrix.zeros(3)
        gt = np.full((2, 2), IGNORE_LABEL)
        accumulate(cm, gt, np.zeros((2, 2), dtype=int))
        assert cm.counts.sum() == 0
        assert cm.ignore_count == 4

    def test_order_independent(self):
        rng = np.random.default_rng(0)
        gts = [rng.integers(-1, 4, size=(6, 6)) for _ in range(3)]
        preds = [rng.integers(0, 4, size=(6, 6)) for _ in range(3)]
        a = ConfusionMatrix.zeros(4)
        b = ConfusionMatrix.zeros(4)
        for g, p in zip(gts, preds):
            accumulate(a, g, p)
        for g, p in zip(reversed(gts), reversed(preds)):
            accumulate(b, g, p)
        assert np.array_equal(a.counts, b.counts)
        assert a.ignore_count == b.ignore_count

    def test_out_of_range_pred(self):
        cm = ConfusionMatrix.zeros(3)
        with pytest.raises(InputError):
            accumulate(cm, np.zeros((2, 2), int), np.full((2, 2), 5))


class TestMetrics:
    def test_hand_example(self):
        cm = ConfusionMatrix.zeros(2)
        accumulate(cm, np.array([[0, 0, 1, 1]]), np.array([[0, 1, 1, 1]]))
        rep = metrics(cm)
        assert round(rep.pixel_accuracy, 2) == 75.00
        assert [round(a, 2) for a in rep.class_accuracy] == [50.00, 100.00]
        assert round(rep.mean_class_accuracy, 2) == 75.00
        assert [round(v, 2) for v in rep.iou] == [50.00, 66.67]
        assert round(rep.mean_iou, 2) == 58.33
        assert round(rep.fw_iou, 2) == 58.33
        assert [round(v, 2) for v in rep.f1] == [66.67, 80.00]
        assert round(rep.mean_f1, 2) == 73.33

    def test_perfect_prediction(self):
        cm = ConfusionMatrix.zeros(3)
        gt = np.array([[0, 1, 2, 1]])
        accumulate(cm, gt, gt)
        rep = metrics(cm)
        assert rep.pixel_accuracy == 100.0
        assert rep.mean_iou == 100.0
        assert rep.mean_f1 == 100.0
        assert rep.fw_iou == 100.0

    def test_absent_class_excluded_from_means(self):
        cm = ConfusionMatrix.zeros(3)
        accumulate(cm, np.array([[0, 0, 1]]), np.array([[0, 1, 1]]))
        rep = metrics(cm)  # class 2 absent everywhere
        assert math.isnan(rep.class_accuracy[2])
        oracle = brute_metrics([np.array([[0, 0, 1]])], [np.array([[0, 1, 1]])], 3)
        assert rep.mean_iou == oracle["MIOU"]
        assert rep.mean_class_accuracy == oracle["MCA"]

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(60):
            classes = int(rng.integers(2, 6))
            subset = rng.integers(0, classes, size=int(rng.integers(1, classes + 1)))
            gt = rng.choice(np.concatenate([subset, [-1]]), size=(16, 16))
            pred = rng.choice(subset, size=(16, 16))
            if not (gt != -1).any():
                continue
            cm = ConfusionMatrix.zeros(classes)
            accumulate(cm, gt, pred)
            rep = metrics(cm)
            oracle = brute_metrics([gt], [pred], classes)
            assert rep.pixel_accuracy == oracle["PA"]
            assert rep.mean_class_accuracy == oracle["MCA"]
            assert rep.mean_iou == oracle["MIOU"]
            assert rep.fw_iou == oracle["FWIOU"]
            assert rep.mean_f1 == oracle["F1"]
            for c in range(classes):
                for got, want in ((rep.iou[c], oracle["iou"][c]),
                                  (rep.f1[c], oracle["f1"][c]),
                                  (rep.class_accuracy[c], oracle["acc"][c])):
                    assert got == want or (math.isnan(got) and math.isnan(want))

    def test_ranges_and_iou_f1_identity(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            gt = rng.integers(0, 4, size=(10, 10))
            pred = rng.integers(0, 4, size=(10, 10))
            cm = ConfusionMatrix.zeros(4)
            accumulate(cm, gt, pred)
            rep = metrics(cm)
            for value in [rep.pixel_accuracy, rep.mean_class_accuracy, rep.fw_iou,
                          rep.mean_iou, rep.mean_f1]:
                assert 0.0 <= value <= 100.0
            for i, f in zip(rep.iou, rep.f1):
                if not math.isnan(i):
                    assert i <= f + 1e-12

    def test_equal_frequency_fwiou_equals_miou(self):
        # two classes, equal gt frequency
        cm = ConfusionMatrix.zeros(2)
        accumulate(cm, np.array([[0, 0, 1, 1]]), np.array([[0, 1, 1, 0]]))
        rep = metrics(cm)
        assert abs(rep.fw_iou - rep.mean_iou) < 1e-12

    def test_empty_matrix(self):
        with pytest.raises(MetricError):
            metrics(ConfusionMatrix.zeros(3))


class _FixedLogitsModel(nn.Module):
    """Emits a constant logits map regardless of input; for tie-rule tests."""

    def __init__(self, logits_map):
        super().__init__()
        self.spec = ModelSpec(classes=logits_map.shape[0], rep_dim=4)
        self.register_buffer("logits_map", torch.as_tensor(logits_map))
        self.dummy = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        b = x.shape[0]
        seg = self.logits_map.unsqueeze(0).expand(b, -1, -1, -1) + 0 * self.dummy
        rep = torch.zeros((b, self.spec.rep_dim) + seg.shape[-2:])
        return DualHeadOutput(seg, rep)


class TestPrediction:
    def test_argmax_tie_takes_lowest_class(self):
        logits = np.zeros((4, 2, 2), dtype=np.float32)
        logits[1] = 5.0
        logits[3] = 5.0  # tie between classes 1 and 3
        model = _FixedLogitsModel(logits)
        preds = predict_slices(model, np.zeros((1, 2, 2), dtype=np.float32))
        assert (preds == 1).all()

    def test_unique_argmax(self):
        logits = np.zeros((3, 2, 2), dtype=np.float32)
        logits[2] = 1.0
        model = _FixedLogitsModel(logits)
        preds = predict_slices(model, np.zeros((1, 2, 2), dtype=np.float32))
        assert (preds == 2).all()

    def test_batched_equals_one_by_one(self):
        model = build_model(ModelSpec(classes=4, rep_dim=8, encoder_channels=(4, 8)), seed=0)
        rng = np.random.default_rng(3)
        data = rng.normal(size=(5, 16, 16)).astype(np.float32)
        batched = predict_slices(model, data, batch_size=5)
        single = np.concatenate([predict_slices(model, data[i : i + 1]) for i in range(5)])
        assert np.array_equal(batched, single)

    def test_predict_volume_covers_held_out_only(self):
        vol, lab = synth_volume(SynthSpec(shape=(8, 16, 32), layers=3, fault_count=0), seed=0)
        model = build_model(ModelSpec(classes=3, rep_dim=8, encoder_channels=(4, 8)), seed=0)
        plan = SliceSamplingPlan(stride=4)
        pred = predict_volume(model, vol, plan)
        assert (pred.labels[plan.selected_indices(8)] == IGNORE_LABEL).all()
        held = plan.held_out_indices(8)
        assert (pred.labels[held] != IGNORE_LABEL).all()
        assert pred.labels.shape == vol.shape

    def test_evaluate_slices(self):
        vol, lab = synth_volume(SynthSpec(shape=(6, 16, 32), layers=3, fault_count=0), seed=1)
        model = build_model(ModelSpec(classes=3, rep_dim=8, encoder_channels=(4, 8)), seed=0)
        slices = SliceSet(np.arange(6), vol.data, lab.labels)
        cm, rep = evaluate_slices(model, slices, classes=3)
        assert cm.counts.sum() == 6 * 16 * 32
        assert 0 <= rep.mean_iou <= 100


class TestExportFeatures:
    def test_rows_and_dim(self, tmp_path):
        model = build_model(ModelSpec(classes=3, rep_dim=8, encoder_channels=(4, 8)), seed=0)
        rng = np.random.default_rng(4)
        slices = SliceSet(
            np.arange(2),
            rng.normal(size=(2, 16, 16)).astype(np.float32),
            rng.integers(0, 3, size=(2, 16, 16)),
        )
        path = export_features(model, slices, stride=4, path=tmp_path / "feat.csv")
        lines = path.read_text().splitlines()
        expected_rows = 2 * 4 * 4
        assert lines[0] == f"# rows={expected_rows} dim=8"
        assert len(lines) == expected_rows + 2
        first = lines[2].split(",")
        assert len(first) == 9  # 8 dims + label

    def test_reexport_bit_identical(self, tmp_path):
        model = build_model(ModelSpec(classes=3, rep_dim=8, encoder_channels=(4, 8)), seed=0)
        rng = np.random.default_rng(5)
        slices = SliceSet(
            np.arange(1),
            rng.normal(size=(1, 16, 16)).astype(np.float32),
            rng.integers(0, 3, size=(1, 16, 16)),
        )
        a = export_features(model, slices, 2, tmp_path / "a.csv")
        b = export_features(model, slices, 2, tmp_path / "b.csv")
        assert a.read_bytes() == b.read_bytes()


def test_report_rendering(tmp_path):
    cm = ConfusionMatrix.zeros(2)
    accumulate(cm, np.array([[0, 0, 1, 1]]), np.array([[0, 1, 1, 1]]))
    rep = metrics(cm)
    text = render_report(rep, ["sand", "shale"])
    assert "MIOU" in text and "sand" in text
    path = report_to_csv(rep, tmp_path / "report.csv")
    header, row = path.read_text().splitlines()
    assert header.startswith("Method,PA,")
    assert "58.33" in row


def test_prediction_image(tmp_path):
    pred = np.array([[0, 1], [2, IGNORE_LABEL]])
    path = prediction_image(pred, tmp_path / "pred.png")
    assert path.exists()
