"""Segmentation scoring.

Evaluation accumulates one global confusion matrix over the whole split
(never per-image averages), reports per-class intersection-over-union,
and averages only over classes that actually occur.  `upper_bound` scores
rectilinear predictions against rectilinear groundtruth after pushing both
through the same warp, which bounds what any adaptation of the rectilinear
model could achieve on the warped imagery.
"""

import csv
import json

import numpy as np

from . import geometry as G
from .model import VOID_ID
from .tensor import Tensor


class ConfusionMatrix:
    """Global class-confusion counts; rows = reference, cols = prediction.

    Pixels labeled void on either side are skipped, so the total count
    equals the number of evaluated pixels.  Matrices accumulated over
    disjoint image subsets merge by addition.
    """

    def __init__(self, n_classes, void_id=VOID_ID):
        if n_classes < 1:
            raise ValueError("need at least one class")
        self.n_classes = n_classes
        self.void_id = void_id
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)

    def update(self, predicted, reference):
        predicted = np.asarray(predicted)
        reference = np.asarray(reference)
        if predicted.shape != reference.shape:
            raise ValueError(
                f"shape mismatch {predicted.shape} vs {reference.shape}")
        keep = (predicted != self.void_id) & (reference != self.void_id)
        p = predicted[keep].astype(np.int64)
        r = reference[keep].astype(np.int64)
        if p.size and (p.max() >= self.n_classes or r.max() >= self.n_classes
                       or p.min() < 0 or r.min() < 0):
            raise ValueError("class id outside [0, n_classes)")
        flat = np.bincount(r * self.n_classes + p,
                           minlength=self.n_classes * self.n_classes)
        self.counts += flat.reshape(self.n_classes, self.n_classes)
        return self

    def merge(self, other):
        if other.n_classes != self.n_classes:
            raise ValueError("class count mismatch")
        self.counts += other.counts
        return self

    def __add__(self, other):
        out = ConfusionMatrix(self.n_classes, self.void_id)
        out.counts += self.counts
        return out.merge(other)

    @property
    def total(self):
        return int(self.counts.sum())

    def per_class_iou(self):
        """IoU per class; NaN where a class occurs in neither map."""
        tp = np.diag(self.counts).astype(np.float64)
        union = (self.counts.sum(axis=0) + self.counts.sum(axis=1)
                 - np.diag(self.counts)).astype(np.float64)
        iou = np.full(self.n_classes, np.nan)
        seen = union > 0
        iou[seen] = tp[seen] / union[seen]
        return iou

    def mean_iou(self):
        iou = self.per_class_iou()
        seen = ~np.isnan(iou)
        if not seen.any():
            raise ValueError("no evaluable pixels")
        return float(np.mean(iou[seen]))


def miou(predicted, reference, n_classes=None, void_id=VOID_ID):
    """Mean IoU and the per-class vector for a single pair of label maps."""
    predicted = np.asarray(predicted)
    reference = np.asarray(reference)
    if n_classes is None:
        keep = (predicted != void_id) & (reference != void_id)
        if not keep.any():
            raise ValueError("no evaluable pixels")
        n_classes = int(max(predicted[keep].max(), reference[keep].max())) + 1
    matrix = ConfusionMatrix(n_classes, void_id).update(predicted, reference)
    return matrix.mean_iou(), matrix.per_class_iou()


def _batched(samples, batch_size):
    planes, labels = [], []
    for x, y in samples:
        planes.append(np.asarray(x, dtype=np.float64))
        labels.append(np.asarray(y))
        if len(planes) == batch_size:
            yield planes, labels
            planes, labels = [], []
    if planes:
        yield planes, labels


def evaluate_model(model, samples, void_id=VOID_ID, batch_size=8):
    """Confusion matrix of eval-mode predictions over (planes, labels) pairs.

    Images inside one call must share a spatial size so they can be batched.
    """
    matrix = ConfusionMatrix(model.n_classes, void_id)
    for planes, labels in _batched(samples, batch_size):
        preds = model.predict(Tensor(np.stack(planes)))
        for pred, ref in zip(preds, labels):
            matrix.update(pred, ref)
    return matrix


def upper_bound(model, samples, params=None, field=None, void_id=VOID_ID,
                batch_size=8):
    """Bound on warped-domain mIoU from warping rectilinear outputs.

    Predicts on rectilinear `samples`, warps predictions and groundtruth
    with the same field (built from `params` unless `field` is given), and
    scores the warped pair.  Returns (mean IoU, per-class IoU).
    """
    if (params is None) == (field is None):
        raise ValueError("pass exactly one of params and field")
    matrix = ConfusionMatrix(model.n_classes, void_id)
    fields = {}
    for planes, labels in _batched(samples, batch_size):
        preds = model.predict(Tensor(np.stack(planes)))
        for pred, ref in zip(preds, labels):
            size = ref.shape
            if field is not None:
                warp = field
            elif size in fields:
                warp = fields[size]
            else:
                warp = fields[size] = G.build_warp_field(size, size, params)
            matrix.update(G.remap_labels(pred, warp, void_id),
                          G.remap_labels(np.asarray(ref), warp, void_id))
    return matrix.mean_iou(), matrix.per_class_iou()


def write_class_report(path, matrix, class_names=None):
    """Per-class CSV: id, name, IoU (blank when unseen), pixel counts."""
    iou = matrix.per_class_iou()
    ref_pixels = matrix.counts.sum(axis=1)
    pred_pixels = matrix.counts.sum(axis=0)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_id", "class_name", "iou",
                         "reference_pixels", "predicted_pixels"])
        for c in range(matrix.n_classes):
            name = class_names[c] if class_names else f"class_{c}"
            value = "" if np.isnan(iou[c]) else f"{iou[c]:.6f}"
            writer.writerow([c, name, value,
                             int(ref_pixels[c]), int(pred_pixels[c])])


def write_summary(path, matrix, extra=None):
    """Summary JSON with mean IoU, per-class IoU (null when unseen)."""
    iou = matrix.per_class_iou()
    payload = {
        "mean_iou": matrix.mean_iou(),
        "per_class_iou": [None if np.isnan(v) else float(v) for v in iou],
        "evaluated_pixels": matrix.total,
    }
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
