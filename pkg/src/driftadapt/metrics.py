"""Segmentation scoring: confusion matrices, mIoU, and challenge windows.

The challenge scoring for a 401-frame drift sequence uses three frame
windows: source [0, 19] (before the shift sets in), target [180, 220]
(around peak severity), and loop-back [380, 400] (after the drift has
returned).  All windows are inclusive.  drop = source-window mIoU minus
target-window mIoU; overall = whole-sequence mIoU - 2 * drop, so a
method that adapts hard but never recovers is penalized twice.

Short sequences simply miss some windows; their scores report None for
the absent windows and omit drop/overall rather than guessing.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NumericError, ShapeError

SOURCE_WINDOW = (0, 19)
TARGET_WINDOW = (180, 220)
LOOPBACK_WINDOW = (380, 400)


class ConfusionMatrix:
    """K x K integer counts; rows are ground truth, columns predictions."""

    def __init__(self, num_classes: int):
        if num_classes < 2:
            raise ShapeError(f"confusion matrix needs >= 2 classes, got {num_classes}")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray) -> None:
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction shape {pred.shape} does not match labels {gt.shape}")
        k = self.num_classes
        for name, arr in (("prediction", pred), ("labels", gt)):
            if arr.size and (arr.min() < 0 or arr.max() >= k):
                bad = tuple(int(i) for i in np.argwhere((arr < 0) | (arr >= k))[0])
                raise NumericError(f"{name} value {int(arr[bad])} at {bad} "
                                   f"outside [0, {k})")
        joint = gt.astype(np.int64).ravel() * k + pred.astype(np.int64).ravel()
        self.counts += np.bincount(joint, minlength=k * k).reshape(k, k)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ShapeError(f"cannot merge confusion over {other.num_classes} classes "
                             f"into {self.num_classes}")
        self.counts += other.counts
        return self

    def copy(self) -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts.copy()
        return out

    def total(self) -> int:
        return int(self.counts.sum())


def miou(cm: ConfusionMatrix) -> float:
    """Mean IoU in percent; classes absent from both pred and gt are excluded."""
    if cm.total() == 0:
        raise NumericError("mIoU of an empty confusion matrix is undefined")
    tp = np.diag(cm.counts).astype(np.float64)
    union = cm.counts.sum(axis=0) + cm.counts.sum(axis=1) - np.diag(cm.counts)
    present = union > 0
    return 100.0 * float(np.mean(tp[present] / union[present]))


def argmax_labels(logits: np.ndarray) -> np.ndarray:
    """N x K x H x W scores to N x H x W uint8 labels (first max wins ties)."""
    return np.asarray(logits).argmax(axis=1).astype(np.uint8)


def mean_entropy(probs: np.ndarray) -> float:
    """Mean per-pixel Shannon entropy (nats) of N x K x H x W probabilities."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    h = np.minimum(-plogp.sum(axis=1), np.log(float(p.shape[1])))
    return float(h.mean())


@dataclass
class WindowedScores:
    miou_all: float
    miou_source: float | None
    miou_target: float | None
    miou_loopback: float | None
    drop: float | None = field(default=None)
    overall: float | None = field(default=None)


def challenge_scores(miou_all: float, miou_source: float | None,
                     miou_target: float | None,
                     miou_loopback: float | None = None) -> WindowedScores:
    """drop and overall from window mIoUs; absent windows leave them None."""
    scores = WindowedScores(miou_all, miou_source, miou_target, miou_loopback)
    if miou_source is not None and miou_target is not None:
        scores.drop = miou_source - miou_target
        scores.overall = miou_all - 2.0 * scores.drop
    return scores


def windowed_scores(frame_matrices: list) -> WindowedScores:
    """Challenge scores from per-frame confusion matrices, in frame order."""
    if not frame_matrices:
        raise NumericError("no frames to score")
    total = frame_matrices[0].copy()
    for cm in frame_matrices[1:]:
        total.merge(cm)

    def window(lo: int, hi: int) -> float | None:
        if len(frame_matrices) <= hi:
            return None
        acc = frame_matrices[lo].copy()
        for cm in frame_matrices[lo + 1:hi + 1]:
            acc.merge(cm)
        return miou(acc)

    return challenge_scores(miou(total),
                            window(*SOURCE_WINDOW),
                            window(*TARGET_WINDOW),
                            window(*LOOPBACK_WINDOW))


def fmt_real(value) -> str:
    """Deterministic 6-significant-digit rendering; None becomes empty."""
    if value is None:
        return ""
    return f"{value:.6g}"


def write_report_csv(path, rows: list) -> None:
    """Per-frame report: frame, miou, mean_entropy, kl_to_source, beta, gate."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "miou", "mean_entropy", "kl_to_source", "beta", "gate"])
        for frame, m, ent, kl, beta, gate in rows:
            writer.writerow([frame, fmt_real(m), fmt_real(ent), fmt_real(kl), fmt_real(beta), int(gate)])


def write_analysis_csv(path, rows: list) -> None:
    """Per-frame curves: mIoU, mean entropy, first-layer and layer-mean distance."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "miou", "mean_entropy", "kl_first", "kl_mean"])
        for frame, m, ent, kf, km in rows:
            writer.writerow([frame, fmt_real(m), fmt_real(ent), fmt_real(kf), fmt_real(km)])


SUMMARY_HEADER = ["sequence", "method", "miou", "miou_source", "miou_target",
                  "miou_loopback", "miou_drop", "overall"]


def summary_row(sequence: str, method: str, scores: WindowedScores) -> list:
    return [sequence, method, fmt_real(scores.miou_all), fmt_real(scores.miou_source),
            fmt_real(scores.miou_target), fmt_real(scores.miou_loopback),
            fmt_real(scores.drop), fmt_real(scores.overall)]


def write_summary_csv(path, rows: list) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_HEADER)
        writer.writerows(rows)


def read_summary_csv(path) -> list:
    """Rows of a summary CSV as dicts; numeric fields parsed, '' -> None."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for raw in reader:
            row = {"sequence": raw["sequence"], "method": raw["method"]}
            for key in SUMMARY_HEADER[2:]:
                row[key] = float(raw[key]) if raw[key] != "" else None
            rows.append(row)
    return rows
