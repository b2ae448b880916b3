"""Detection-benchmark metrics: water-edge accuracy and obstacle detection counts.

Per frame, a ground-truth box is a true positive when at least
``coverage_threshold`` of its area is covered by obstacle-labelled pixels,
otherwise a false negative.  False positives are 8-connected blobs of
obstacle pixels strictly below the ground-truth water edge that touch no
ground-truth box and have at least ``min_blob_area`` pixels.  Danger-zone
tallies keep only boxes flagged dangerous and blobs whose centroid row lies
strictly below the annotated danger-zone boundary.  Columns where the
predicted edge is absent are scored as if the prediction sat on the bottom
image row.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .data import LABEL_OBSTACLE, LABEL_WATER
from .errors import ConfigError

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass
class EvalConfig:
    coverage_threshold: float = 0.5
    min_blob_area: int = 25

    def __post_init__(self):
        if not 0.0 < self.coverage_threshold <= 1.0:
            raise ConfigError("coverage_threshold must lie in (0, 1]")
        if self.min_blob_area < 0:
            raise ConfigError("min_blob_area must be >= 0")

    def to_dict(self):
        return {"coverage_threshold": self.coverage_threshold,
                "min_blob_area": self.min_blob_area}


@dataclass
class DetectionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    danger_tp: int = 0
    danger_fp: int = 0
    danger_fn: int = 0

    def __add__(self, other):
        return DetectionCounts(*(a + b for a, b in zip(self.astuple(), other.astuple())))

    def astuple(self):
        return (self.tp, self.fp, self.fn, self.danger_tp, self.danger_fp, self.danger_fn)

    def to_dict(self):
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn,
                "danger_tp": self.danger_tp, "danger_fp": self.danger_fp,
                "danger_fn": self.danger_fn}


@dataclass
class FrameResult:
    counts: DetectionCounts
    edge_sq_err_sum: float = 0.0
    edge_col_count: int = 0
    stem: str = ""

    def to_dict(self):
        out = self.counts.to_dict()
        out.update(edge_sq_err_sum=self.edge_sq_err_sum,
                   edge_col_count=self.edge_col_count, stem=self.stem)
        return out


def extract_water_edge(mask):
    """Topmost water-labelled row per column; -1 where a column has no water."""
    water = np.asarray(mask) == LABEL_WATER
    has_water = water.any(axis=0)
    first = water.argmax(axis=0)
    return np.where(has_water, first, -1).astype(np.int64)


def water_edge_squared_errors(pred_edge, gt_polyline, height):
    """(sum of squared vertical errors, column count) over GT-covered columns."""
    sq_sum = 0.0
    count = 0
    for col, gt_row in gt_polyline:
        pred_row = pred_edge[col] if 0 <= col < len(pred_edge) else -1
        if pred_row < 0:
            pred_row = height - 1
        sq_sum += float(pred_row - gt_row) ** 2
        count += 1
    return sq_sum, count


def water_edge_rmse(pred_edge, gt_polyline, height):
    sq_sum, count = water_edge_squared_errors(pred_edge, gt_polyline, height)
    return float(np.sqrt(sq_sum / count)) if count else 0.0


def _box_slices(bbox):
    x, y, w, h = bbox
    return slice(y, y + h), slice(x, x + w)


def match_frame(pred_mask, annotation, config=None):
    """Score one frame's predicted label mask against its annotation."""
    config = config or EvalConfig()
    pred_mask = np.asarray(pred_mask)
    height, width = pred_mask.shape
    obstacle = pred_mask == LABEL_OBSTACLE
    counts = DetectionCounts()

    box_region = np.zeros_like(obstacle)
    for gt in annotation.obstacles:
        rows, cols = _box_slices(gt.bbox)
        box_region[rows, cols] = True
        area = gt.bbox[2] * gt.bbox[3]
        coverage = obstacle[rows, cols].sum() / area
        hit = coverage >= config.coverage_threshold
        counts.tp += int(hit)
        counts.fn += int(not hit)
        if gt.danger:
            counts.danger_tp += int(hit)
            counts.danger_fn += int(not hit)

    below_edge = np.zeros_like(obstacle)
    for col, row in annotation.water_edge:
        if 0 <= col < width:
            below_edge[row + 1:, col] = True
    labelled, n_blobs = ndimage.label(obstacle & below_edge, structure=EIGHT_CONNECTED)
    for blob_id in range(1, n_blobs + 1):
        blob = labelled == blob_id
        if (blob & box_region).any():
            continue
        area = int(blob.sum())
        if area < config.min_blob_area:
            continue
        counts.fp += 1
        if annotation.danger_zone_row is not None:
            centroid_row = float(np.nonzero(blob)[0].mean())
            if centroid_row > annotation.danger_zone_row:
                counts.danger_fp += 1
    return counts


def evaluate_frame(pred_mask, annotation, config=None, stem=""):
    config = config or EvalConfig()
    counts = match_frame(pred_mask, annotation, config)
    pred_edge = extract_water_edge(pred_mask)
    sq_sum, n_cols = water_edge_squared_errors(pred_edge, annotation.water_edge,
                                               np.asarray(pred_mask).shape[0])
    return FrameResult(counts=counts, edge_sq_err_sum=sq_sum, edge_col_count=n_cols,
                       stem=stem)


def _ratio(numerator, denominator):
    return numerator / denominator if denominator else 1.0


def _f1(precision, recall):
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


@dataclass
class MetricsReport:
    counts: DetectionCounts
    precision: float
    recall: float
    f1: float
    danger_precision: float
    danger_recall: float
    danger_f1: float
    water_edge_rmse: float
    degenerate: bool
    config: dict
    frames: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "counts": self.counts.to_dict(),
            "overall": {"precision": self.precision, "recall": self.recall, "f1": self.f1},
            "danger_zone": {"precision": self.danger_precision,
                            "recall": self.danger_recall, "f1": self.danger_f1},
            "water_edge_rmse_px": self.water_edge_rmse,
            "degenerate": self.degenerate,
            "config": self.config,
            "frames": [f.to_dict() for f in self.frames],
            "metadata": self.metadata,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def summary_row(self):
        """Flat tab-separated row: W-E RMSE, overall Pr/Re/F1, danger Pr/Re/F1."""
        cells = [f"{self.water_edge_rmse:.2f}",
                 f"{self.precision:.4f}", f"{self.recall:.4f}", f"{self.f1:.4f}",
                 f"{self.danger_precision:.4f}", f"{self.danger_recall:.4f}",
                 f"{self.danger_f1:.4f}"]
        return "\t".join(cells)


def aggregate(frame_results, config=None, metadata=None):
    """Sum per-frame counts, then derive Pr/Re/F1 and the pooled edge RMSE.

    A zero denominator makes the corresponding ratio 1 by convention; a run
    with no detections at all is flagged degenerate.
    """
    config = config or EvalConfig()
    frame_results = list(frame_results)
    total = DetectionCounts()
    sq_sum = 0.0
    n_cols = 0
    for frame in frame_results:
        counts = frame.counts if isinstance(frame, FrameResult) else frame
        total = total + counts
        if isinstance(frame, FrameResult):
            sq_sum += frame.edge_sq_err_sum
            n_cols += frame.edge_col_count
    precision = _ratio(total.tp, total.tp + total.fp)
    recall = _ratio(total.tp, total.tp + total.fn)
    d_precision = _ratio(total.danger_tp, total.danger_tp + total.danger_fp)
    d_recall = _ratio(total.danger_tp, total.danger_tp + total.danger_fn)
    return MetricsReport(
        counts=total,
        precision=precision, recall=recall, f1=_f1(precision, recall),
        danger_precision=d_precision, danger_recall=d_recall,
        danger_f1=_f1(d_precision, d_recall),
        water_edge_rmse=float(np.sqrt(sq_sum / n_cols)) if n_cols else 0.0,
        degenerate=(total.tp + total.fp + total.fn) == 0,
        config=config.to_dict(),
        frames=[f for f in frame_results if isinstance(f, FrameResult)],
        metadata=metadata or {},
    )
