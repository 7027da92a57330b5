"""Scoring loop-closure detections against ground-truth poses.

Conventions, also stamped into the output headers:

* lower match score means a better match; acceptance is score < threshold;
* a test frame "has a true loop" when some reference pose lies within
  d_thresh meters in the ground plane;
* precision defaults to 1.0 when nothing was accepted, recall to 0.0 when
  no scored frame has a true loop.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataIntegrityError, UndefinedAUCError
from .matching import MatchResult
from .scenes import Pose


@dataclass
class GroundTruth:
    ref_poses: list[Pose]
    test_poses: list[Pose]
    d_thresh: float = 10.0

    def __post_init__(self):
        if self.d_thresh <= 0:
            raise ValueError("d_thresh must be positive")

    def planar_distance(self, ref_idx: int, test_idx: int) -> float:
        r, t = self.ref_poses[ref_idx], self.test_poses[test_idx]
        return math.hypot(r.x - t.x, r.y - t.y)

    def has_true_loop(self, test_idx: int) -> bool:
        t = self.test_poses[test_idx]
        return any(math.hypot(r.x - t.x, r.y - t.y) <= self.d_thresh
                   for r in self.ref_poses)

    def match_correct(self, ref_idx: int, test_idx: int) -> bool:
        return self.planar_distance(ref_idx, test_idx) <= self.d_thresh


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def classify(matches: list[MatchResult], gt: GroundTruth) -> ConfusionCounts:
    """Count one decision per match: accepted matches are TP when the matched
    reference pose lies within d_thresh of the test pose, FP otherwise;
    rejected frames are FN when a true loop exists, TN otherwise."""
    counts = ConfusionCounts()
    for m in matches:
        if m.test_index >= len(gt.test_poses) or m.test_index < 0:
            raise DataIntegrityError(f"match test index {m.test_index} has no pose")
        if m.accepted:
            if m.s_star >= len(gt.ref_poses) or m.s_star < 0:
                raise DataIntegrityError(f"match reference index {m.s_star} has no pose")
            if gt.match_correct(m.s_star, m.test_index):
                counts.tp += 1
            else:
                counts.fp += 1
        else:
            if gt.has_true_loop(m.test_index):
                counts.fn += 1
            else:
                counts.tn += 1
    return counts


def precision_recall(counts: ConfusionCounts) -> tuple[float, float]:
    """P = TP/(TP+FP), R = TP/(TP+FN); empty denominators give P=1, R=0."""
    p = 1.0 if counts.tp + counts.fp == 0 else counts.tp / (counts.tp + counts.fp)
    r = 0.0 if counts.tp + counts.fn == 0 else counts.tp / (counts.tp + counts.fn)
    return p, r


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float


@dataclass(frozen=True)
class ROCPoint:
    threshold: float
    tpr: float
    fpr: float


def _accept_at(matches, threshold: float) -> list[MatchResult]:
    return [MatchResult(m.test_index, m.s_star, m.v_star, m.score,
                        m.score < threshold) for m in matches]


def pr_curve(matches: list[MatchResult], gt: GroundTruth,
             n_thresholds: int | None = None) -> list[PRPoint]:
    """Sweep the acceptance threshold over the sorted unique scores plus
    +-inf sentinels, re-classifying at each point. n_thresholds, if given,
    subsamples the interior thresholds evenly (the sentinels stay)."""
    for m in matches:
        if not math.isfinite(m.score) and not math.isinf(m.score):
            raise ValueError("match scores must not be NaN")
    interior = sorted({m.score for m in matches if math.isfinite(m.score)})
    if n_thresholds is not None and len(interior) > max(n_thresholds - 2, 0):
        idx = np.linspace(0, len(interior) - 1, max(n_thresholds - 2, 0))
        interior = [interior[int(round(i))] for i in idx]
    points = []
    for th in [-math.inf] + interior + [math.inf]:
        p, r = precision_recall(classify(_accept_at(matches, th), gt))
        points.append(PRPoint(threshold=th, precision=p, recall=r))
    return points


def recall_at_full_precision(curve: list[PRPoint]) -> float:
    """Highest recall among operating points with precision exactly 1."""
    best = 0.0
    for pt in curve:
        if pt.precision == 1.0:
            best = max(best, pt.recall)
    return best


def _roc_vertices(scores, labels):
    """One ROC vertex per unique score; lower scores are more positive, so
    the sweep negates scores internally. Tied scores move together."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must align")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("AUC needs at least one positive and one negative")
    order = np.argsort(scores, kind="stable")
    pts = [(0.0, 0.0, -math.inf)]
    tp = fp = 0
    i = 0
    while i < scores.size:
        j = i
        while j < scores.size and scores[order[j]] == scores[order[i]]:
            tp += bool(labels[order[j]])
            fp += not labels[order[j]]
            j += 1
        pts.append((fp / n_neg, tp / n_pos, float(scores[order[i]])))
        i = j
    return pts


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve by trapezoidal integration over the grouped
    vertices; equals the Mann-Whitney statistic with ties counted half."""
    pts = _roc_vertices(scores, labels)
    auc = 0.0
    for (x0, y0, _), (x1, y1, _) in zip(pts, pts[1:]):
        auc += (x1 - x0) * (y0 + y1) / 2.0
    return auc


def roc_points(scores, labels) -> list[ROCPoint]:
    return [ROCPoint(threshold=th, tpr=tpr, fpr=fpr)
            for fpr, tpr, th in _roc_vertices(scores, labels)]


# --- emission -------------------------------------------------------------

_CSV_HEADERS = {"pr": "threshold,precision,recall", "roc": "threshold,tpr,fpr"}


def _fmt(v: float) -> str:
    return repr(float(v))


def emit_curves(curves: dict[str, list], out_dir) -> list[Path]:
    """Write each named curve as a CSV of exact values plus a standalone SVG
    line plot (one polyline per file). PRPoint lists plot recall/precision,
    ROCPoint lists plot fpr/tpr."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, points in curves.items():
        if not points:
            continue
        is_pr = isinstance(points[0], PRPoint)
        header = _CSV_HEADERS["pr" if is_pr else "roc"]
        rows = [header]
        for pt in points:
            if is_pr:
                rows.append(f"{_fmt(pt.threshold)},{_fmt(pt.precision)},{_fmt(pt.recall)}")
            else:
                rows.append(f"{_fmt(pt.threshold)},{_fmt(pt.tpr)},{_fmt(pt.fpr)}")
        csv_path = out_dir / f"{name}.csv"
        csv_path.write_text("\n".join(rows) + "\n")
        written.append(csv_path)

        if is_pr:
            xy = [(pt.recall, pt.precision) for pt in points]
            labels = ("recall", "precision")
        else:
            xy = [(pt.fpr, pt.tpr) for pt in points]
            labels = ("fpr", "tpr")
        svg_path = out_dir / f"{name}.svg"
        svg_path.write_text(_svg_plot(name, xy, labels))
        written.append(svg_path)
    return written


def _svg_plot(title: str, xy: list[tuple[float, float]],
              axis_labels: tuple[str, str], size: int = 360, margin: int = 45) -> str:
    span = size - 2 * margin

    def px(x):
        return margin + x * span

    def py(y):
        return size - margin - y * span

    pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in xy)
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">\n'
        f'  <rect x="0" y="0" width="{size}" height="{size}" fill="white"/>\n'
        f'  <line x1="{margin}" y1="{size - margin}" x2="{size - margin}" '
        f'y2="{size - margin}" stroke="black"/>\n'
        f'  <line x1="{margin}" y1="{margin}" x2="{margin}" y2="{size - margin}" '
        f'stroke="black"/>\n'
        f'  <text x="{size // 2}" y="{size - 8}" text-anchor="middle" '
        f'font-size="12">{axis_labels[0]}</text>\n'
        f'  <text x="12" y="{size // 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 12 {size // 2})">{axis_labels[1]}</text>\n'
        f'  <text x="{size // 2}" y="20" text-anchor="middle" font-size="13">'
        f'{title}</text>\n'
        f'  <polyline points="{pts}" fill="none" stroke="#1f6fb2" stroke-width="1.5"/>\n'
        f'</svg>\n')


def write_summary(path, records: list[dict]) -> None:
    """JSON-lines summary, one record per experiment."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_summary(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
