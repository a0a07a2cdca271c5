"""Detection evaluation: greedy IoU matching, AP/AR overall and per size band.

Boxes are center-size (cx, cy, w, h) in a shared coordinate space; ground
truths carry a physical diameter in mm used only for band assignment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .loss import iou_giou

BANDS = ("small", "medium", "large")
SMALL_MAX_MM = 7.0
MEDIUM_MAX_MM = 15.0


class MetricsError(ValueError):
    """Invalid evaluation input (no ground truths, empty role, bad diameter)."""


def size_band(diameter_mm: float) -> str:
    """Band for a nodule diameter; boundaries belong to the lower band."""
    if diameter_mm <= 0:
        raise MetricsError(f"diameter must be positive, got {diameter_mm}")
    if diameter_mm <= SMALL_MAX_MM:
        return "small"
    if diameter_mm <= MEDIUM_MAX_MM:
        return "medium"
    return "large"


@dataclass
class ImageEval:
    """Detections and ground truths for one image, already in one space."""

    det_boxes: np.ndarray    # (N, 4)
    det_scores: np.ndarray   # (N,)
    gt_boxes: np.ndarray     # (M, 4)
    gt_diameters: np.ndarray  # (M,) in mm


@dataclass
class MatchResult:
    """Per-image matching in descending-score order."""

    order: np.ndarray       # detection indices sorted by (-score, index)
    tp: np.ndarray          # bool per sorted detection
    matched_gt: np.ndarray  # gt index per sorted detection, -1 when FP
    fn: int


@dataclass
class PrCurve:
    recalls: np.ndarray
    precisions: np.ndarray
    thresholds: np.ndarray


@dataclass
class EvalReport:
    ap: float
    ar: float
    ap_by_band: dict = field(default_factory=dict)
    ar_by_band: dict = field(default_factory=dict)
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    threshold: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0


def match_detections(det_boxes, det_scores, gt_boxes,
                     iou_threshold: float = 0.5) -> MatchResult:
    """Greedy one-to-one matching in descending score order.

    Each detection takes the unmatched ground truth of highest IoU when that
    IoU reaches the threshold; ties in score keep the lower detection index
    first, ties in IoU take the lower ground-truth index.
    """
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    det_scores = np.asarray(det_scores, dtype=np.float64).reshape(-1)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n, m = det_boxes.shape[0], gt_boxes.shape[0]
    order = np.argsort(-det_scores, kind="stable")
    tp = np.zeros(n, dtype=bool)
    matched_gt = np.full(n, -1, dtype=np.int64)
    taken = np.zeros(m, dtype=bool)
    for pos, det_idx in enumerate(order):
        if m == 0:
            break
        iou, _ = iou_giou(det_boxes[det_idx][None, :], gt_boxes)
        iou = np.where(taken, -1.0, iou)
        best = int(np.argmax(iou))
        if iou[best] >= iou_threshold:
            tp[pos] = True
            matched_gt[pos] = best
            taken[best] = True
    return MatchResult(order=order, tp=tp, matched_gt=matched_gt,
                       fn=int(m - taken.sum()))


def _sorted_flags(tp_flags, scores):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    tp_flags = np.asarray(tp_flags, dtype=bool).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    return tp_flags[order], scores[order]


def pr_curve(tp_flags, scores, n_pos: int) -> PrCurve:
    """One PR point per detection, in descending score order."""
    if n_pos <= 0:
        raise MetricsError("precision-recall needs at least one ground truth")
    flags, scores = _sorted_flags(tp_flags, scores)
    cum_tp = np.cumsum(flags)
    cum_fp = np.cumsum(~flags)
    denom = cum_tp + cum_fp
    precisions = np.where(denom > 0, cum_tp / np.maximum(denom, 1), 0.0)
    recalls = cum_tp / n_pos
    return PrCurve(recalls=recalls, precisions=precisions, thresholds=scores)


def average_precision(tp_flags, scores, n_pos: int) -> float:
    """Exact area under the precision envelope p(r) = max precision at recall >= r."""
    curve = pr_curve(tp_flags, scores, n_pos)
    if curve.recalls.size == 0:
        return 0.0
    env = np.maximum.accumulate(curve.precisions[::-1])[::-1]
    prev = np.concatenate([[0.0], curve.recalls[:-1]])
    return float(np.sum((curve.recalls - prev) * env))


def _pooled(items, iou_threshold, band=None):
    """Pool per-image matches; with a band, restrict gts to it and drop
    detections matched to gts of other bands."""
    flags, scores = [], []
    n_pos = 0
    n_matched = 0
    for item in items:
        res = match_detections(item.det_boxes, item.det_scores, item.gt_boxes,
                               iou_threshold)
        diam = np.asarray(item.gt_diameters, dtype=np.float64).reshape(-1)
        in_band = np.ones(diam.shape[0], dtype=bool)
        if band is not None:
            in_band = np.array([size_band(d) == band for d in diam], dtype=bool)
        n_pos += int(in_band.sum())
        sorted_scores = np.asarray(item.det_scores, dtype=np.float64)[res.order]
        for pos in range(res.order.shape[0]):
            gt = res.matched_gt[pos]
            if gt >= 0 and not in_band[gt]:
                continue  # matched a gt outside the band: ignored, not FP
            flags.append(bool(res.tp[pos]))
            scores.append(float(sorted_scores[pos]))
            if res.tp[pos]:
                n_matched += 1
    return np.array(flags, dtype=bool), np.array(scores), n_pos, n_matched


def evaluate(items, operating_threshold: float,
             iou_threshold: float = 0.5) -> EvalReport:
    """AP and AR overall and per band, plus P/R/F1 at the operating threshold.

    AR uses every detection; the threshold only affects the F1 block. A band
    with no ground truths reports NaN for its AP and AR.
    """
    items = list(items)
    if not items:
        raise MetricsError("cannot evaluate an empty role")
    flags, scores, n_pos, n_matched = _pooled(items, iou_threshold)
    if n_pos == 0:
        raise MetricsError("role has no ground truths")
    report = EvalReport(
        ap=average_precision(flags, scores, n_pos),
        ar=n_matched / n_pos,
    )
    for band in BANDS:
        bf, bs, bp, bm = _pooled(items, iou_threshold, band)
        if bp == 0:
            report.ap_by_band[band] = float("nan")
            report.ar_by_band[band] = float("nan")
        else:
            report.ap_by_band[band] = average_precision(bf, bs, bp)
            report.ar_by_band[band] = bm / bp

    tp = fp = fn = 0
    for item in items:
        keep = np.asarray(item.det_scores, dtype=np.float64) >= operating_threshold
        res = match_detections(np.asarray(item.det_boxes).reshape(-1, 4)[keep],
                               np.asarray(item.det_scores).reshape(-1)[keep],
                               item.gt_boxes, iou_threshold)
        tp += int(res.tp.sum())
        fp += int((~res.tp).sum())
        fn += res.fn
    report.tp, report.fp, report.fn = tp, fp, fn
    report.precision = tp / (tp + fp) if tp + fp else 0.0
    report.recall = tp / (tp + fn) if tp + fn else 0.0
    report.f1 = f1_score(report.precision, report.recall)
    report.threshold = operating_threshold
    return report


def f1_score(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def select_operating_threshold(items, iou_threshold: float = 0.5):
    """Sweep every detection score as a candidate threshold and keep the one
    with the best F1; ties prefer the higher threshold. Returns (threshold, f1)."""
    candidates = sorted({float(s)
                         for item in items
                         for s in np.asarray(item.det_scores).reshape(-1)})
    best = (0.0, 0.0)
    for thr in candidates:
        rep = evaluate(items, thr, iou_threshold)
        if rep.f1 >= best[1]:
            best = (thr, rep.f1)
    return best


# -- reporting -------------------------------------------------------------

def format_report(report: EvalReport) -> str:
    """Fixed-width text block mirroring the banded AP/AR layout."""
    rows = [
        ("Average Precision @ IoU 0.5 (All Areas)", report.ap),
        ("Average Precision @ IoU 0.5 (Small Areas)", report.ap_by_band.get("small")),
        ("Average Precision @ IoU 0.5 (Medium Areas)", report.ap_by_band.get("medium")),
        ("Average Precision @ IoU 0.5 (Large Areas)", report.ap_by_band.get("large")),
        ("Average Recall @ IoU 0.5 (All Areas)", report.ar),
        ("Average Recall @ IoU 0.5 (Small Areas)", report.ar_by_band.get("small")),
        ("Average Recall @ IoU 0.5 (Medium Areas)", report.ar_by_band.get("medium")),
        ("Average Recall @ IoU 0.5 (Large Areas)", report.ar_by_band.get("large")),
        ("Precision @ threshold", report.precision),
        ("Recall @ threshold", report.recall),
        ("F1 Score", report.f1),
    ]
    def fmt(value):
        if value is None or np.isnan(value):
            return "   n/a"
        return f"{value:6.1%}"

    lines = [f"{name:<44s} {fmt(value)}" for name, value in rows]
    lines.append(f"{'Operating threshold':<44s} {report.threshold:8.4f}")
    lines.append(f"{'TP / FP / FN':<44s} {report.tp} / {report.fp} / {report.fn}")
    return "\n".join(lines)


def render_pr_svg(curve: PrCurve, path, title: str = "precision-recall") -> None:
    """Write a small standalone SVG of the PR curve."""
    w, h, pad = 480, 360, 48
    xs = pad + curve.recalls * (w - 2 * pad)
    ys = h - pad - curve.precisions * (h - 2 * pad)
    pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in zip(xs, ys))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
        f'viewBox="0 0 {w} {h}">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" '
        'stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" stroke="black"/>',
        f'<text x="{w / 2:.0f}" y="{h - pad / 3:.0f}" text-anchor="middle" '
        'font-size="12">recall</text>',
        f'<text x="{pad / 3:.0f}" y="{h / 2:.0f}" text-anchor="middle" '
        f'font-size="12" transform="rotate(-90 {pad / 3:.0f} {h / 2:.0f})">'
        'precision</text>',
        f'<text x="{w / 2:.0f}" y="{pad / 2:.0f}" text-anchor="middle" '
        f'font-size="13">{title}</text>',
    ]
    if pts:
        parts.append(f'<polyline points="{pts}" fill="none" stroke="#1f6fb2" '
                     'stroke-width="1.5"/>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts))
