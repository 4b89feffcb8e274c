"""Temporal-IoU matching and detection mAP over a threshold grid."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

THUMOS_GRID = tuple(round(0.1 * i, 1) for i in range(1, 8))          # 0.1:0.1:0.7
ACTIVITYNET_GRID = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))  # 0.5:0.05:0.95


def tiou(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Temporal intersection over union; zero-length intervals overlap nothing."""
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = max(a[1], b[1]) - min(a[0], b[0])
    if union <= 0:
        return 0.0
    return inter / union


@dataclass(frozen=True)
class Detection:
    video_id: str
    class_id: int
    score: float
    start: float
    end: float


@dataclass(frozen=True)
class GroundTruthInstance:
    video_id: str
    class_id: int
    start: float
    end: float


def _sorted_detections(detections: list[Detection]) -> list[Detection]:
    # deterministic tie-break on equal scores
    return sorted(detections,
                  key=lambda d: (-d.score, d.video_id, d.start, d.end, d.class_id))


def average_precision(detections: list[Detection],
                      ground_truths: list[GroundTruthInstance],
                      tiou_threshold: float) -> float:
    """Uninterpolated AP: greedy best-overlap matching in score order, each
    ground truth matched at most once."""
    if not ground_truths:
        return 0.0
    gt_by_video: dict[str, list] = {}
    for gt in sorted(ground_truths, key=lambda g: (g.video_id, g.start, g.end)):
        gt_by_video.setdefault(gt.video_id, []).append([gt, False])
    true_pos = 0
    ap = 0.0
    for rank, det in enumerate(_sorted_detections(detections), start=1):
        best = None
        best_overlap = 0.0
        for entry in gt_by_video.get(det.video_id, ()):
            if entry[1]:
                continue
            overlap = tiou((det.start, det.end), (entry[0].start, entry[0].end))
            if overlap >= tiou_threshold and overlap > best_overlap:
                best, best_overlap = entry, overlap
        if best is not None:
            best[1] = True
            true_pos += 1
            ap += true_pos / rank
    return ap / len(ground_truths)


@dataclass
class EvalReport:
    thresholds: tuple[float, ...]
    num_classes: int
    ap: dict[float, dict[int, float]]        # threshold -> class -> AP
    map_at: dict[float, float]               # threshold -> mAP
    average_map: float
    classes_with_gt: tuple[int, ...]


def map_report(detections: list[Detection], ground_truths: list[GroundTruthInstance],
               thresholds, num_classes: int) -> EvalReport:
    """mAP at each threshold, averaged over classes that have ground truth."""
    thresholds = tuple(float(t) for t in thresholds)
    if not thresholds:
        raise ContractError("threshold grid must be non-empty")
    det_by_class = {c: [] for c in range(num_classes)}
    gt_by_class = {c: [] for c in range(num_classes)}
    for d in detections:
        det_by_class[d.class_id].append(d)
    for g in ground_truths:
        gt_by_class[g.class_id].append(g)
    with_gt = tuple(c for c in range(num_classes) if gt_by_class[c])
    ap: dict[float, dict[int, float]] = {}
    map_at: dict[float, float] = {}
    for threshold in thresholds:
        per_class = {c: average_precision(det_by_class[c], gt_by_class[c], threshold)
                     for c in range(num_classes)}
        ap[threshold] = per_class
        map_at[threshold] = (float(np.mean([per_class[c] for c in with_gt]))
                             if with_gt else 0.0)
    return EvalReport(
        thresholds=thresholds,
        num_classes=num_classes,
        ap=ap,
        map_at=map_at,
        average_map=float(np.mean([map_at[t] for t in thresholds])),
        classes_with_gt=with_gt,
    )


def format_report(report: EvalReport, class_names: list[str] | None = None) -> str:
    """Aligned text table: thresholds as columns, per-class AP rows, the mAP
    row last with the grid average in the final column."""
    names = class_names or [f"class_{c}" for c in range(report.num_classes)]
    width = max(12, max(len(n) for n in names) + 2)
    header = "tIoU".ljust(width) + "".join(f"{t:>8.2f}" for t in report.thresholds)
    header += f"{'AVG':>8}"
    lines = [header]
    for c in range(report.num_classes):
        row = names[c].ljust(width)
        cells = [report.ap[t][c] for t in report.thresholds]
        row += "".join(f"{v:>8.3f}" for v in cells)
        if c in report.classes_with_gt:
            row += f"{float(np.mean(cells)):>8.3f}"
        else:
            row += f"{'-':>8}"
        lines.append(row)
    map_row = "mAP".ljust(width)
    map_row += "".join(f"{report.map_at[t]:>8.3f}" for t in report.thresholds)
    map_row += f"{report.average_map:>8.3f}"
    lines.append(map_row)
    return "\n".join(lines)


def report_to_dict(report: EvalReport, class_names: list[str] | None = None) -> dict:
    names = class_names or [f"class_{c}" for c in range(report.num_classes)]
    return {
        "thresholds": list(report.thresholds),
        "per_class_ap": {
            names[c]: {str(t): report.ap[t][c] for t in report.thresholds}
            for c in range(report.num_classes)
        },
        "map": {str(t): report.map_at[t] for t in report.thresholds},
        "average_map": report.average_map,
        "classes_with_ground_truth": [names[c] for c in report.classes_with_gt],
    }


def write_report_json(path, report: EvalReport, class_names: list[str] | None = None) -> None:
    with open(path, "w") as fh:
        json.dump(report_to_dict(report, class_names), fh, indent=2)
