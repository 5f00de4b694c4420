"""Segmentation metrics, IoU matching and the caption-stability study."""
from __future__ import annotations

import csv
import io
import json
import logging
import warnings
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from anyword.errors import EmptyDataset, ShapeMismatch

log = logging.getLogger(__name__)


def _grid(m) -> np.ndarray:
    return np.asarray(getattr(m, "grid", m), dtype=bool)


def intersection_union(a, b) -> tuple[int, int]:
    a, b = _grid(a), _grid(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    return int(np.count_nonzero(a & b)), int(np.count_nonzero(a | b))


def iou(a, b) -> float:
    """Intersection over union; two empty masks score 1.0."""
    inter, union = intersection_union(a, b)
    return 1.0 if union == 0 else inter / union


@dataclass
class EvalPair:
    prediction: np.ndarray
    ground_truth: np.ndarray
    phrase: str = ""
    image_id: Hashable = None
    caption_id: Hashable = None

    def __post_init__(self):
        if _grid(self.prediction).shape != _grid(self.ground_truth).shape:
            raise ShapeMismatch("prediction and ground truth resolutions differ")


def ciou(pairs: Sequence[EvalPair]) -> float:
    """Cumulative intersection over cumulative union."""
    if not pairs:
        raise EmptyDataset("cIoU over an empty dataset")
    inter = union = 0
    for p in pairs:
        i, u = intersection_union(p.prediction, p.ground_truth)
        inter += i
        union += u
    return 1.0 if union == 0 else inter / union


def giou(pairs: Sequence[EvalPair]) -> float:
    """Mean per-sample IoU with no-target samples scored 1 if the prediction is empty, else 0."""
    if not pairs:
        raise EmptyDataset("gIoU over an empty dataset")
    scores = []
    for p in pairs:
        gt, pred = _grid(p.ground_truth), _grid(p.prediction)
        if not gt.any():
            scores.append(0.0 if pred.any() else 1.0)
        else:
            scores.append(iou(pred, gt))
    return float(np.mean(scores))


@dataclass
class Assignment:
    """Optimal one-to-one matching of predictions to ground truths."""

    pairs: list[tuple[int, int, float]]  # (prediction index, ground-truth index, IoU)
    unmatched_predictions: list[int]
    unmatched_ground_truths: list[int]
    scores: list[float] = field(default_factory=list)  # confidence per prediction
    n_predictions: int = 0
    n_ground_truths: int = 0

    @property
    def total_iou(self) -> float:
        return float(sum(p[2] for p in self.pairs))


def iou_matrix(predictions: Sequence, ground_truths: Sequence) -> np.ndarray:
    mat = np.zeros((len(predictions), len(ground_truths)))
    for i, p in enumerate(predictions):
        for j, g in enumerate(ground_truths):
            mat[i, j] = iou(p, g)
    return mat


def assign(matrix: np.ndarray) -> list[tuple[int, int]]:
    """Maximum-total assignment on a (possibly rectangular) score matrix."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.size == 0:
        return []
    rows, cols = linear_sum_assignment(matrix, maximize=True)
    return list(zip(rows.tolist(), cols.tolist()))


def cross_match(predictions, ground_truths, scores: Sequence[float] | None = None) -> Assignment:
    """Match predicted masks to ground-truth masks maximising total IoU.

    ``predictions`` may be a GroundedSegmentation or a list of masks;
    ``ground_truths`` a list of masks or ``(phrase, mask)`` pairs.
    """
    if hasattr(predictions, "records"):
        if scores is None:
            scores = [r.score for r in predictions.records]
        predictions = [r.mask for r in predictions.records]
    gts = [g[1] if isinstance(g, tuple) else g for g in ground_truths]
    preds = list(predictions)
    scores = list(scores) if scores is not None else [1.0] * len(preds)
    mat = iou_matrix(preds, gts)
    # a pair with no overlap is not a match; both sides stay unmatched
    pairs = [(i, j, float(mat[i, j])) for i, j in assign(mat) if mat[i, j] > 0]
    mp, mg = {p[0] for p in pairs}, {p[1] for p in pairs}
    return Assignment(
        pairs,
        [i for i in range(len(preds)) if i not in mp],
        [j for j in range(len(gts)) if j not in mg],
        scores,
        len(preds),
        len(gts),
    )


def ap50(matches: Sequence[Assignment], threshold: float = 0.5) -> float:
    """Average precision at an IoU threshold, ranked by prediction confidence.

    Predictions with equal confidence enter the precision-recall curve
    together, so the value does not depend on dataset order.
    """
    if not matches:
        raise EmptyDataset("AP over an empty dataset")
    n_gt = sum(m.n_ground_truths for m in matches)
    if n_gt == 0:
        raise EmptyDataset("AP needs at least one ground-truth instance")
    dets = []
    for m in matches:
        tp = {p[0] for p in m.pairs if p[2] >= threshold}
        for i in range(m.n_predictions):
            dets.append((m.scores[i] if i < len(m.scores) else 1.0, i in tp))
    if not dets:
        return 0.0
    scores = np.array([d[0] for d in dets])
    hits = np.array([d[1] for d in dets], dtype=bool)
    ap, prev_recall = 0.0, 0.0
    for s in np.unique(scores)[::-1]:
        sel = scores >= s
        tp = int(np.count_nonzero(hits & sel))
        fp = int(np.count_nonzero(~hits & sel))
        precision = tp / (tp + fp)
        recall = tp / n_gt
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return float(ap)


def recall50(matches: Sequence[Assignment], threshold: float = 0.5) -> float:
    if not matches:
        raise EmptyDataset("recall over an empty dataset")
    n_gt = sum(m.n_ground_truths for m in matches)
    if n_gt == 0:
        raise EmptyDataset("recall needs at least one ground-truth instance")
    tp = sum(1 for m in matches for p in m.pairs if p[2] >= threshold)
    return tp / n_gt


def miou(matches: Sequence[Assignment]) -> float:
    """Mean IoU over matched pairs."""
    if not matches:
        raise EmptyDataset("mIoU over an empty dataset")
    vals = [p[2] for m in matches for p in m.pairs]
    return float(np.mean(vals)) if vals else 0.0


def class_miou(pairs: Iterable[tuple[str, np.ndarray, np.ndarray]]) -> float:
    """Semantic-segmentation mIoU: cumulative IoU per class, averaged over classes."""
    inter: dict[str, int] = OrderedDict()
    union: dict[str, int] = OrderedDict()
    for label, pred, gt in pairs:
        i, u = intersection_union(pred, gt)
        inter[label] = inter.get(label, 0) + i
        union[label] = union.get(label, 0) + u
    if not inter:
        raise EmptyDataset("mIoU over an empty dataset")
    return float(np.mean([1.0 if union[k] == 0 else inter[k] / union[k] for k in inter]))


# ---------------------------------------------------------------------------
# stability study


class Bucket(str, Enum):
    EASY = "easy"
    MEDIUM = "medium"
    HARD = "hard"


@dataclass(frozen=True)
class StabilityThresholds:
    """Bucket cut-offs. These defaults are a project choice, not canonical values."""

    easy_mean: float = 0.75
    easy_std: float = 0.10
    hard_mean: float = 0.5
    hard_std: float = 0.25

    def bucket(self, mean: float, std: float) -> Bucket:
        if mean < self.hard_mean or std > self.hard_std:
            return Bucket.HARD
        if mean >= self.easy_mean and std <= self.easy_std:
            return Bucket.EASY
        return Bucket.MEDIUM


@dataclass
class ImageStability:
    image_id: Hashable
    n_captions: int
    iou_mean: float
    iou_std: float
    bucket: Bucket


def stability_study(
    results: Mapping[tuple[Hashable, Hashable], float],
    thresholds: StabilityThresholds = StabilityThresholds(),
) -> list[ImageStability]:
    """Mean and population std of IoU across each image's caption variants."""
    grouped: dict[Hashable, list[float]] = OrderedDict()
    for (image_id, _caption), value in results.items():
        grouped.setdefault(image_id, []).append(float(value))
    out = []
    for image_id, vals in grouped.items():
        arr = np.asarray(vals)
        if arr.size == 1:
            warnings.warn(f"image {image_id!r} has a single caption; std set to 0", stacklevel=2)
            std = 0.0
        else:
            std = float(arr.std())
        mean = float(arr.mean())
        out.append(ImageStability(image_id, int(arr.size), mean, std, thresholds.bucket(mean, std)))
    return out


# ---------------------------------------------------------------------------
# reporting


@dataclass
class EvalReport:
    task: str
    ciou: float | None = None
    giou: float | None = None
    miou: float | None = None
    ap50: float | None = None
    recall: float | None = None
    per_image: list[ImageStability] = field(default_factory=list)
    n_records: int = 0
    n_failed: int = 0
    failures: list[dict] = field(default_factory=list)

    METRICS = ("ciou", "giou", "miou", "ap50", "recall")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_image"] = [
            {**asdict(s), "bucket": s.bucket.value, "image_id": s.image_id} for s in self.per_image
        ]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=str)

    def to_table(self) -> str:
        lines = [f"{'metric':<10}{'value':>10}", "-" * 20]
        for name in self.METRICS:
            v = getattr(self, name)
            if v is not None:
                lines.append(f"{name:<10}{v * 100:>10.2f}")
        lines.append(f"{'records':<10}{self.n_records:>10d}")
        lines.append(f"{'failed':<10}{self.n_failed:>10d}")
        return "\n".join(lines) + "\n"

    def per_image_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image_id", "n_captions", "iou_mean", "iou_std", "bucket"])
        for s in self.per_image:
            w.writerow([s.image_id, s.n_captions, repr(s.iou_mean), repr(s.iou_std), s.bucket.value])
        return buf.getvalue()
