"""Confusion-matrix metrics, held-out volume prediction, feature export."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import InputError, MetricError
from .model import DualHeadNet, forward
from .volume import IGNORE_LABEL, LabelVolume, SeismicVolume, SliceSamplingPlan, SliceSet


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns prediction; IGNORE pixels counted aside."""

    counts: np.ndarray
    ignore_count: int = 0

    @classmethod
    def zeros(cls, classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((classes, classes), dtype=np.int64))

    @property
    def classes(self) -> int:
        return self.counts.shape[0]

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(
            self.counts + other.counts, self.ignore_count + other.ignore_count
        )


def accumulate(cm: ConfusionMatrix, gt: np.ndarray, pred: np.ndarray) -> ConfusionMatrix:
    """Add one gt/prediction pair into the matrix (order-independent)."""
    gt = np.asarray(gt).ravel()
    pred = np.asarray(pred).ravel()
    if gt.shape != pred.shape:
        raise InputError(f"gt {gt.shape} and pred {pred.shape} differ")
    n = cm.classes
    if ((pred < 0) | (pred >= n)).any():
        raise InputError(f"prediction contains ids outside [0, {n})")
    if ((gt != IGNORE_LABEL) & ((gt < 0) | (gt >= n))).any():
        raise InputError(f"gt contains ids outside [0, {n})")
    valid = gt != IGNORE_LABEL
    cm.ignore_count += int((~valid).sum())
    cm.counts += np.bincount(
        n * gt[valid].astype(np.int64) + pred[valid], minlength=n * n
    ).reshape(n, n)
    return cm


@dataclass
class MetricReport:
    """All values are percentages (x100); absent classes carry NaN."""

    pixel_accuracy: float
    class_accuracy: list[float]
    mean_class_accuracy: float
    fw_iou: float
    mean_iou: float
    iou: list[float]
    f1: list[float]
    mean_f1: float

    def as_row(self) -> dict:
        row = {"PA": self.pixel_accuracy}
        for c, acc in enumerate(self.class_accuracy):
            row[f"acc_{c}"] = acc
        row.update(
            MCA=self.mean_class_accuracy,
            FWIOU=self.fw_iou,
            MIOU=self.mean_iou,
            F1=self.mean_f1,
        )
        return row


def metrics(cm: ConfusionMatrix) -> MetricReport:
    """Pixel accuracy, per-class accuracy/IoU/F1 and their macro means.

    Classes absent from both ground truth and prediction are excluded from
    the macro means; mean class accuracy averages only classes present in
    the ground truth.
    """
    counts = cm.counts
    total = int(counts.sum())
    if total == 0:
        raise MetricError("confusion matrix is empty")
    n = cm.classes
    rows = [int(counts[c].sum()) for c in range(n)]
    cols = [int(counts[:, c].sum()) for c in range(n)]
    diag = [int(counts[c, c]) for c in range(n)]

    pa = sum(diag) / total
    class_acc = [diag[c] / rows[c] if rows[c] > 0 else math.nan for c in range(n)]
    iou = [
        diag[c] / (rows[c] + cols[c] - diag[c]) if rows[c] + cols[c] > 0 else math.nan
        for c in range(n)
    ]
    f1 = [
        2 * diag[c] / (rows[c] + cols[c]) if rows[c] + cols[c] > 0 else math.nan
        for c in range(n)
    ]
    acc_present = [class_acc[c] for c in range(n) if rows[c] > 0]
    present = [c for c in range(n) if rows[c] + cols[c] > 0]
    mca = sum(acc_present) / len(acc_present)
    miou = sum(iou[c] for c in present) / len(present)
    fwiou = sum((rows[c] / total) * iou[c] for c in present)
    mf1 = sum(f1[c] for c in present) / len(present)

    pct = lambda x: x * 100.0
    return MetricReport(
        pixel_accuracy=pct(pa),
        class_accuracy=[pct(a) if not math.isnan(a) else math.nan for a in class_acc],
        mean_class_accuracy=pct(mca),
        fw_iou=pct(fwiou),
        mean_iou=pct(miou),
        iou=[pct(v) if not math.isnan(v) else math.nan for v in iou],
        f1=[pct(v) if not math.isnan(v) else math.nan for v in f1],
        mean_f1=pct(mf1),
    )


def predict_slices(
    model: DualHeadNet, data: np.ndarray, batch_size: int = 8
) -> np.ndarray:
    """Argmax class map per slice; ties resolve to the lowest class id."""
    model.eval()
    preds = []
    for start in range(0, len(data), batch_size):
        out = forward(model, data[start : start + batch_size], grad=False)
        logits = out.seg_logits.detach().to(torch.float64).numpy()
        preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds, axis=0)


def evaluate_slices(
    model: DualHeadNet, slices: SliceSet, classes: int, batch_size: int = 8
) -> tuple[ConfusionMatrix, MetricReport]:
    if slices.labels is None:
        raise InputError("slice set has no labels to evaluate against")
    preds = predict_slices(model, slices.data, batch_size)
    cm = ConfusionMatrix.zeros(classes)
    accumulate(cm, slices.labels, preds)
    return cm, metrics(cm)


def predict_volume(
    model: DualHeadNet,
    volume: SeismicVolume,
    plan: SliceSamplingPlan,
    batch_size: int = 8,
) -> LabelVolume:
    """Predict every held-out slice of the plan; plan slices stay IGNORE."""
    classes = model.spec.classes
    out = np.full(volume.shape, IGNORE_LABEL, dtype=np.int64)
    n = volume.shape[0] if plan.axis == "inline" else volume.shape[1]
    held = plan.held_out_indices(n)
    if held.size:
        if plan.axis == "inline":
            preds = predict_slices(model, volume.data[held], batch_size)
            out[held] = preds
        else:
            data = np.transpose(volume.data[:, held], (1, 0, 2))
            preds = predict_slices(model, data, batch_size)
            out[:, held] = np.transpose(preds, (1, 0, 2))
    return LabelVolume(out, classes)


def export_features(
    model: DualHeadNet, slices: SliceSet, stride: int, path, batch_size: int = 8
) -> Path:
    """Dump (representation vector, gt class) rows on a regular pixel grid.

    The text file starts with ``# rows=<n> dim=<D>`` followed by a CSV
    header; downstream 2-D embedding tools consume it as-is.
    """
    if stride < 1:
        raise InputError(f"stride must be >= 1, got {stride}")
    model.eval()
    dim = model.spec.rep_dim
    rows = []
    for start in range(0, len(slices.data), batch_size):
        chunk = slices.data[start : start + batch_size]
        out = forward(model, chunk, grad=False)
        rep = out.rep_hwd().detach().to(torch.float64).numpy()
        sub = rep[:, ::stride, ::stride, :]
        if slices.labels is not None:
            lab = slices.labels[start : start + batch_size, ::stride, ::stride]
        else:
            lab = np.full(sub.shape[:3], IGNORE_LABEL, dtype=np.int64)
        rows.append((sub.reshape(-1, dim), lab.reshape(-1)))
    vecs = np.concatenate([r[0] for r in rows], axis=0)
    labs = np.concatenate([r[1] for r in rows], axis=0)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(f"# rows={len(vecs)} dim={dim}\n")
        fh.write(",".join([f"rep_{i}" for i in range(dim)] + ["label"]) + "\n")
        for vec, lab in zip(vecs, labs):
            fh.write(",".join(repr(float(v)) for v in vec) + f",{int(lab)}\n")
    return path


# ---------------------------------------------------------------------------
# report rendering
# ---------------------------------------------------------------------------

def report_to_csv(report: MetricReport, path, method: str = "model") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    row = report.as_row()
    with open(path, "w") as fh:
        fh.write("Method," + ",".join(row.keys()) + "\n")
        fh.write(method + "," + ",".join(f"{v:.2f}" for v in row.values()) + "\n")
    return path


def render_report(report: MetricReport, class_names: list[str] | None = None) -> str:
    n = len(report.class_accuracy)
    names = class_names or [f"class_{c}" for c in range(n)]
    fmt = lambda v: "   -" if math.isnan(v) else f"{v:6.2f}"
    lines = [
        f"PA     {report.pixel_accuracy:6.2f}",
        f"MCA    {report.mean_class_accuracy:6.2f}",
        f"FWIOU  {report.fw_iou:6.2f}",
        f"MIOU   {report.mean_iou:6.2f}",
        f"F1     {report.mean_f1:6.2f}",
        "",
        f"{'class':<24}{'acc':>8}{'iou':>8}{'f1':>8}",
    ]
    for c in range(n):
        lines.append(
            f"{names[c]:<24}{fmt(report.class_accuracy[c]):>8}"
            f"{fmt(report.iou[c]):>8}{fmt(report.f1[c]):>8}"
        )
    return "\n".join(lines)


_PALETTE = np.array(
    [
        (68, 1, 84), (59, 82, 139), (33, 145, 140),
        (94, 201, 98), (253, 231, 37), (217, 70, 70),
        (120, 120, 120), (240, 140, 0), (0, 90, 180), (150, 60, 120),
    ],
    dtype=np.uint8,
)


def prediction_image(pred: np.ndarray, path) -> Path:
    """Write one class map as a color PNG (IGNORE pixels black)."""
    from PIL import Image

    pred = np.asarray(pred)
    rgb = np.zeros(pred.shape + (3,), dtype=np.uint8)
    mask = pred != IGNORE_LABEL
    rgb[mask] = _PALETTE[pred[mask] % len(_PALETTE)]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb).save(path)
    return path
