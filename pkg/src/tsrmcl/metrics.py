"""Detection scoring: matching protocol, precision/recall, 11-point
AP50, and the mAP50:95 suite with per-category and long-tail-stratum
breakdowns.

All AP math uses the 11-point interpolated form
AP = (1/11) * sum_k max_{r >= k/10} p(r), and mAP50:95 is the double
mean: over the 10 IoU thresholds per category first, then over
categories. Matching is greedy in descending confidence (ties broken by
stable input order), one ground truth matched at most once, the
highest-IoU unmatched ground truth of the same category wins.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

from .boxes import BBox, iou
from .errors import ContractError

__all__ = [
    "Detection",
    "GroundTruth",
    "APReport",
    "IOU_THRESHOLDS",
    "match_detections",
    "precision_recall",
    "ap_at",
    "ap50",
    "map_suite",
    "load_predictions_jsonl",
    "load_tt100k_ground_truth",
    "strata_of",
]

IOU_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    category: str
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ContractError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class GroundTruth:
    bbox: BBox
    category: str


def match_detections(dets, gts, iou_threshold: float):
    """Greedy TP/FP assignment within one image.

    Returns (labels, fn): ``labels[i]`` is True iff detection i (input
    order) matched an unmatched same-category ground truth with
    IoU >= threshold; ``fn`` counts ground truths left unmatched.
    """
    dets = list(dets)
    gts = list(gts)
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    taken = [False] * len(gts)
    labels = [False] * len(dets)
    for i in order:
        det = dets[i]
        best_iou = 0.0
        best_j = -1
        for j, gt in enumerate(gts):
            if taken[j] or gt.category != det.category:
                continue
            ov = iou(det.bbox, gt.bbox)
            if ov >= iou_threshold and ov > best_iou:
                best_iou = ov
                best_j = j
        if best_j >= 0:
            taken[best_j] = True
            labels[i] = True
    return labels, taken.count(False)


def precision_recall(tp: int, fp: int, fn: int) -> tuple[float, float]:
    """P = TP/(TP+FP), R = TP/(TP+FN); zero denominators yield 0."""
    if min(tp, fp, fn) < 0:
        raise ContractError("counts must be nonnegative")
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return p, r


def _eleven_point_ap(recalls, precisions) -> float:
    total = 0.0
    for k in range(11):
        level = k / 10.0
        best = 0.0
        for r, p in zip(recalls, precisions):
            if r >= level and p > best:
                best = p
        total += best
    return total / 11.0


def _category_sweep(dets_by_image, gts_by_image, category: str, iou_threshold: float):
    """Global confidence sweep for one category.

    Yields cumulative TP flags in sweep order plus the total ground
    truth count. Images iterate in sorted id order so confidence ties
    stay deterministic.
    """
    entries = []  # (confidence, image order, input order, detection)
    for img_rank, image_id in enumerate(sorted(dets_by_image)):
        for idx, det in enumerate(dets_by_image[image_id]):
            if det.category == category:
                entries.append((-det.confidence, img_rank, idx, image_id, det))
    entries.sort(key=lambda e: (e[0], e[1], e[2]))

    total_gts = 0
    gt_pool: dict[str, list[GroundTruth]] = {}
    for image_id, gts in gts_by_image.items():
        mine = [g for g in gts if g.category == category]
        gt_pool[image_id] = mine
        total_gts += len(mine)

    taken: dict[str, list[bool]] = {k: [False] * len(v) for k, v in gt_pool.items()}
    flags = []
    for _, _, _, image_id, det in entries:
        pool = gt_pool.get(image_id, [])
        marks = taken.get(image_id, [])
        best_iou = 0.0
        best_j = -1
        for j, gt in enumerate(pool):
            if marks[j]:
                continue
            ov = iou(det.bbox, gt.bbox)
            if ov >= iou_threshold and ov > best_iou:
                best_iou = ov
                best_j = j
        if best_j >= 0:
            marks[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags, total_gts


def ap_at(dets_by_image, gts_by_image, category: str, iou_threshold: float):
    """11-point interpolated AP for one category at one IoU threshold.

    Returns None when the category appears in neither ground truths nor
    detections (undefined); 0.0 when it has detections but no ground
    truths.
    """
    flags, total_gts = _category_sweep(dets_by_image, gts_by_image, category, iou_threshold)
    if total_gts == 0:
        return 0.0 if flags else None
    if not flags:
        return 0.0
    recalls = []
    precisions = []
    tp = 0
    for rank, is_tp in enumerate(flags, start=1):
        tp += int(is_tp)
        recalls.append(tp / total_gts)
        precisions.append(tp / rank)
    return _eleven_point_ap(recalls, precisions)


def ap50(dets_by_image, gts_by_image, category: str):
    return ap_at(dets_by_image, gts_by_image, category, 0.50)


def strata_of(count: int) -> str:
    """head: > 100 instances, middle: 10..100, tail: < 10."""
    if count > 100:
        return "head"
    if count >= 10:
        return "middle"
    return "tail"


@dataclass
class APReport:
    per_category: dict = field(default_factory=dict)  # cat -> {thr: ap}
    ap50_per_category: dict = field(default_factory=dict)
    map50: float = 0.0
    map50_95: float = 0.0
    precision: float = 0.0
    recall: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0
    strata: dict = field(default_factory=dict)  # stratum -> rollup

    def to_json(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "mAP50": self.map50,
            "mAP50:95": self.map50_95,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "per_category": {
                cat: {f"{thr:.2f}": ap for thr, ap in thrs.items()}
                for cat, thrs in self.per_category.items()
            },
            "ap50_per_category": self.ap50_per_category,
            "strata": self.strata,
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1)

    def write_csv(self, path) -> None:
        """One row mirroring the headline table columns."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["Precision", "Recall", "mAP50", "mAP50:95"])
            writer.writerow([
                f"{self.precision:.6f}",
                f"{self.recall:.6f}",
                f"{self.map50:.6f}",
                f"{self.map50_95:.6f}",
            ])


def map_suite(dets_by_image, gts_by_image, train_counts: dict | None = None) -> APReport:
    """Full AP report over IoU thresholds 0.50..0.95.

    Categories are averaged only when annotated (present in the ground
    truth); detections for unannotated categories still count as false
    positives in P/R. Stratum assignment uses ``train_counts`` when
    given, otherwise the ground-truth instance counts of this set.
    """
    gt_counts: dict[str, int] = {}
    for gts in gts_by_image.values():
        for gt in gts:
            gt_counts[gt.category] = gt_counts.get(gt.category, 0) + 1
    if not gt_counts:
        raise ContractError("map_suite requires at least one ground truth")

    categories = sorted(gt_counts)
    report = APReport()
    for cat in categories:
        thrs = {}
        for thr in IOU_THRESHOLDS:
            thrs[thr] = ap_at(dets_by_image, gts_by_image, cat, thr)
        report.per_category[cat] = thrs
        report.ap50_per_category[cat] = thrs[0.50]
    report.map50 = sum(report.ap50_per_category.values()) / len(categories)
    report.map50_95 = sum(
        sum(thrs.values()) / len(IOU_THRESHOLDS) for thrs in report.per_category.values()
    ) / len(categories)

    tp = fp = fn = 0
    for image_id in sorted(set(dets_by_image) | set(gts_by_image)):
        dets = dets_by_image.get(image_id, [])
        gts = gts_by_image.get(image_id, [])
        labels, miss = match_detections(dets, gts, 0.50)
        tp += sum(labels)
        fp += len(labels) - sum(labels)
        fn += miss
    report.tp, report.fp, report.fn = tp, fp, fn
    report.precision, report.recall = precision_recall(tp, fp, fn)

    counts = train_counts if train_counts is not None else gt_counts
    strata: dict[str, dict] = {
        s: {"categories": 0, "mAP50": 0.0, "mAP50:95": 0.0} for s in ("head", "middle", "tail")
    }
    for cat in categories:
        s = strata_of(counts.get(cat, 0))
        strata[s]["categories"] += 1
        strata[s]["mAP50"] += report.ap50_per_category[cat]
        strata[s]["mAP50:95"] += sum(report.per_category[cat].values()) / len(IOU_THRESHOLDS)
    for s, roll in strata.items():
        n = roll["categories"]
        if n:
            roll["mAP50"] /= n
            roll["mAP50:95"] /= n
    report.strata = strata
    return report


# -- interchange formats ---------------------------------------------------


def load_predictions_jsonl(path) -> dict[str, list[Detection]]:
    """JSON lines of {image_id, category, bbox: [x0,y0,x1,y1], confidence}."""
    out: dict[str, list[Detection]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ContractError(f"{path}:{lineno}: bad JSON: {exc}") from exc
            out.setdefault(str(row["image_id"]), []).append(
                Detection(
                    bbox=BBox.from_json(row["bbox"]),
                    category=str(row["category"]),
                    confidence=float(row["confidence"]),
                )
            )
    return out


def load_tt100k_ground_truth(path) -> dict[str, list[GroundTruth]]:
    """TT100K-style {"imgs": {id: {"path", "objects": [...]}}} annotations."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    out: dict[str, list[GroundTruth]] = {}
    for image_id, entry in doc.get("imgs", {}).items():
        gts = []
        for obj in entry.get("objects", []):
            bb = obj["bbox"]
            gts.append(
                GroundTruth(
                    bbox=BBox(float(bb["xmin"]), float(bb["ymin"]),
                              float(bb["xmax"]), float(bb["ymax"])),
                    category=str(obj["category"]),
                )
            )
        out[str(image_id)] = gts
    return out
