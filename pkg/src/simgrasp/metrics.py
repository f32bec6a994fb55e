"""Detection, layout-consistency and grasp metrics, plus report files.

Detection quality follows the usual protocol: greedy score-ordered
matching at an IoU threshold, precision/recall at a fixed score
threshold, and 101-point interpolated average precision (mAP50 and the
0.50:0.05:0.95 range).  Layout consistency is measured as the mean IoU
between a segmenter's prediction on a generated image and the layout it
was conditioned on, plus center deviations between matched boxes.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import statistics
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .detector import Detection, iou
from .scenes import LayoutScene, ObjectRecord

METHOD_ORDER = ("sim_only", "no_adv", "adversarial")


class MetricsError(ValueError):
    pass


def _gt_class_bbox(gt) -> tuple[int, tuple[float, float, float, float]]:
    if isinstance(gt, ObjectRecord):
        return gt.class_id, tuple(gt.bbox)
    class_id, bbox = gt
    return int(class_id), tuple(bbox)


@dataclass(frozen=True)
class MatchPair:
    image_id: str
    class_id: int
    pred_index: int
    gt_index: int
    iou: float
    pred_bbox: tuple[float, float, float, float]
    gt_bbox: tuple[float, float, float, float]
    score: float


@dataclass
class MatchResult:
    pairs: list[MatchPair]
    false_positives: list[tuple[str, int, int]]  # (image_id, class_id, pred_index)
    false_negatives: list[tuple[str, int, int]]  # (image_id, class_id, gt_index)

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def fp(self) -> int:
        return len(self.false_positives)

    @property
    def fn(self) -> int:
        return len(self.false_negatives)

    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if (self.tp + self.fp) else 0.0

    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if (self.tp + self.fn) else 0.0


def match_detections(preds: dict[str, list[Detection]], gts: dict[str, list],
                     iou_threshold: float) -> MatchResult:
    """Greedy per-class matching within each image.

    Predictions are taken in descending score order (ties by input
    index); each is assigned the unmatched ground-truth box of its class
    with the highest IoU >= threshold, ties broken by ground-truth index.
    """
    pairs: list[MatchPair] = []
    fps: list[tuple[str, int, int]] = []
    fns: list[tuple[str, int, int]] = []
    for image_id in sorted(set(preds) | set(gts)):
        image_preds = list(enumerate(preds.get(image_id, [])))
        image_gts = [(_i, *_gt_class_bbox(g)) for _i, g in enumerate(gts.get(image_id, []))]
        matched_gt: set[int] = set()
        classes = {d.class_id for _, d in image_preds} | {c for _, c, _ in image_gts}
        for class_id in sorted(classes):
            cls_preds = sorted(
                ((i, d) for i, d in image_preds if d.class_id == class_id),
                key=lambda t: (-t[1].score, t[0]))
            cls_gts = [(i, bbox) for i, c, bbox in image_gts if c == class_id]
            for pred_index, det in cls_preds:
                best = None
                for gt_index, bbox in cls_gts:
                    if gt_index in matched_gt:
                        continue
                    overlap = iou(det.bbox, bbox)
                    if overlap >= iou_threshold and (best is None or overlap > best[1]):
                        best = (gt_index, overlap, bbox)
                if best is None:
                    fps.append((image_id, class_id, pred_index))
                else:
                    matched_gt.add(best[0])
                    pairs.append(MatchPair(image_id, class_id, pred_index, best[0],
                                           best[1], tuple(det.bbox), tuple(best[2]), det.score))
            for gt_index, _ in cls_gts:
                if gt_index not in matched_gt:
                    fns.append((image_id, class_id, gt_index))
    return MatchResult(pairs, fps, fns)


def _interpolated_ap(recalls: list[float], precisions: list[float]) -> float:
    """101-point interpolated AP (precision envelope sampled on recall)."""
    total = 0.0
    for k in range(101):
        r = k / 100.0
        best = 0.0
        for rec, prec in zip(recalls, precisions):
            if rec >= r - 1e-12 and prec > best:
                best = prec
        total += best
    return total / 101.0


def average_precision(preds: dict[str, list[Detection]], gts: dict[str, list],
                      iou_threshold: float) -> float | None:
    """Mean 101-point AP over classes present in the ground truth.

    Returns None (metric absent) when there is no ground truth at all.
    """
    gt_classes = sorted({_gt_class_bbox(g)[0] for boxes in gts.values() for g in boxes})
    if not gt_classes:
        return None
    aps = []
    for class_id in gt_classes:
        flat = []
        for image_id in sorted(set(preds)):
            for idx, det in enumerate(preds[image_id]):
                if det.class_id == class_id:
                    flat.append((-det.score, image_id, idx, det))
        flat.sort(key=lambda t: t[:3])
        gt_boxes = {
            image_id: [(_i, bbox) for _i, (c, bbox) in
                       enumerate(map(_gt_class_bbox, gts.get(image_id, []))) if c == class_id]
            for image_id in gts
        }
        n_gt = sum(len(v) for v in gt_boxes.values())
        if n_gt == 0:
            aps.append(0.0)
            continue
        matched: dict[str, set[int]] = {}
        tp_flags = []
        for _, image_id, _, det in flat:
            best = None
            for gt_index, bbox in gt_boxes.get(image_id, []):
                if gt_index in matched.get(image_id, set()):
                    continue
                overlap = iou(det.bbox, bbox)
                if overlap >= iou_threshold and (best is None or overlap > best[1]):
                    best = (gt_index, overlap)
            if best is None:
                tp_flags.append(False)
            else:
                matched.setdefault(image_id, set()).add(best[0])
                tp_flags.append(True)
        tp_cum = 0
        recalls, precisions = [], []
        for rank, is_tp in enumerate(tp_flags, start=1):
            tp_cum += int(is_tp)
            recalls.append(tp_cum / n_gt)
            precisions.append(tp_cum / rank)
        aps.append(_interpolated_ap(recalls, precisions))
    return float(np.mean(aps))


MAP_RANGE_THRESHOLDS = tuple(round(0.50 + 0.05 * k, 2) for k in range(10))


def mean_ap_range(preds: dict[str, list[Detection]], gts: dict[str, list],
                  thresholds=MAP_RANGE_THRESHOLDS) -> float | None:
    values = [average_precision(preds, gts, t) for t in thresholds]
    if any(v is None for v in values):
        return None
    return float(np.mean(values))


@dataclass
class DeviationStats:
    mean: float
    median: float
    max: float
    count: int


def center_deviation(matches: MatchResult) -> DeviationStats | None:
    """Euclidean distances between matched GT/prediction centers."""
    if not matches.pairs:
        return None
    dists = []
    for pair in matches.pairs:
        px = (pair.pred_bbox[0] + pair.pred_bbox[2]) / 2
        py = (pair.pred_bbox[1] + pair.pred_bbox[3]) / 2
        gx = (pair.gt_bbox[0] + pair.gt_bbox[2]) / 2
        gy = (pair.gt_bbox[1] + pair.gt_bbox[3]) / 2
        dists.append(math.hypot(px - gx, py - gy))
    return DeviationStats(mean=float(np.mean(dists)), median=float(statistics.median(dists)),
                          max=float(max(dists)), count=len(dists))


def layout_miou(layout: LayoutScene, generated_image: np.ndarray, segmenter) -> float:
    """Mean IoU between the segmenter's argmax map and the layout.

    The fake channel is excluded from the argmax; background competes as
    class 0.  Averaged over the classes present in the layout.
    """
    img = torch.from_numpy(np.ascontiguousarray(generated_image.transpose(2, 0, 1))) \
        .float().unsqueeze(0)
    with torch.no_grad():
        probs = segmenter(img)[0]
    seg = probs[:-1].argmax(dim=0).numpy()
    return segmentation_miou(seg, layout.semantic_map)


def segmentation_miou(seg: np.ndarray, reference: np.ndarray) -> float:
    """Mean per-class IoU over the classes present in ``reference``."""
    classes = np.unique(reference)
    ious = []
    for c in classes:
        a = seg == c
        b = reference == c
        union = (a | b).sum()
        ious.append(float((a & b).sum() / union) if union else 0.0)
    return float(np.mean(ious))


def success_rate(trials) -> float:
    """Fraction of trials with success = True."""
    trials = list(trials)
    if not trials:
        raise MetricsError("success_rate of zero trials is undefined")
    return sum(1 for t in trials if t.success) / len(trials)


@dataclass
class MethodMetrics:
    precision: float | None = None
    recall: float | None = None
    map50: float | None = None
    map50_95: float | None = None
    center_deviation_mean: float | None = None
    center_deviation_median: float | None = None
    layout_miou: float | None = None
    grasp_success_plain: float | None = None
    grasp_success_complex: float | None = None

    def validate(self) -> None:
        for name in ("precision", "recall", "map50", "map50_95", "layout_miou",
                     "grasp_success_plain", "grasp_success_complex"):
            v = getattr(self, name)
            if v is not None and not (0.0 <= v <= 1.0):
                raise MetricsError(f"{name} = {v} outside [0, 1]")
        for name in ("center_deviation_mean", "center_deviation_median"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise MetricsError(f"{name} must be >= 0")


@dataclass
class MetricsReport:
    methods: dict[str, MethodMetrics]

    def validate(self) -> None:
        for m in self.methods.values():
            m.validate()

    def method_order(self) -> list[str]:
        known = [m for m in METHOD_ORDER if m in self.methods]
        extra = sorted(set(self.methods) - set(METHOD_ORDER))
        return known + extra

    def to_json(self) -> dict:
        return {
            "schema_version": "1",
            "methods": {k: dataclasses.asdict(v) for k, v in self.methods.items()},
        }

    @staticmethod
    def from_json(d: dict) -> "MetricsReport":
        return MetricsReport({k: MethodMetrics(**v) for k, v in d["methods"].items()})


DETECTION_COLUMNS = ("P", "R", "mAP50", "mAP50-95")


def _fmt(v: float | None) -> str:
    return "-" if v is None else f"{v:.3f}"


def build_report(per_method: dict[str, MethodMetrics], out_dir: Path | None = None) -> MetricsReport:
    """Assemble the comparative report; optionally write json/csv/md files."""
    report = MetricsReport(dict(per_method))
    report.validate()
    if out_dir is not None:
        write_report_files(report, Path(out_dir))
    return report


def write_report_files(report: MetricsReport, out_dir: Path) -> dict[str, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "report.json"
    json_path.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")

    csv_path = out_dir / "report.csv"
    fields = ["method"] + [f.name for f in dataclasses.fields(MethodMetrics)]
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(fields)
        for name in report.method_order():
            m = report.methods[name]
            writer.writerow([name] + [
                "" if getattr(m, fld) is None else repr(getattr(m, fld))
                for fld in fields[1:]])

    md_path = out_dir / "report.md"
    lines = ["# Evaluation report", "", "## Detection on the real-style test split", ""]
    lines.append("| Method | " + " | ".join(DETECTION_COLUMNS) + " |")
    lines.append("|---" * (len(DETECTION_COLUMNS) + 1) + "|")
    for name in report.method_order():
        m = report.methods[name]
        lines.append(f"| {name} | {_fmt(m.precision)} | {_fmt(m.recall)} | "
                     f"{_fmt(m.map50)} | {_fmt(m.map50_95)} |")
    lines += ["", "## Layout consistency", ""]
    lines.append("| Method | layout mIoU | center dev (mean px) | center dev (median px) |")
    lines.append("|---|---|---|---|")
    for name in report.method_order():
        m = report.methods[name]
        lines.append(f"| {name} | {_fmt(m.layout_miou)} | {_fmt(m.center_deviation_mean)} | "
                     f"{_fmt(m.center_deviation_median)} |")
    lines += ["", "## Grasp success rate (20 trials per tier)", ""]
    lines.append("| Method | Plain background | Complex background |")
    lines.append("|---|---|---|")
    for name in report.method_order():
        m = report.methods[name]
        lines.append(f"| {name} | {_fmt(m.grasp_success_plain)} | {_fmt(m.grasp_success_complex)} |")
    md_path.write_text("\n".join(lines) + "\n")
    return {"json": json_path, "csv": csv_path, "md": md_path}


def load_report(path: Path) -> MetricsReport:
    return MetricsReport.from_json(json.loads(Path(path).read_text()))


def save_detections(path: Path, preds: dict[str, list[Detection]]) -> None:
    """Detection dump as JSON lines: one detection per line."""
    with open(path, "w") as f:
        for image_id in sorted(preds):
            for det in preds[image_id]:
                f.write(json.dumps({
                    "image_id": image_id,
                    "class_id": det.class_id,
                    "bbox": [float(v) for v in det.bbox],
                    "score": float(det.score),
                }, sort_keys=True) + "\n")


def load_detections(path: Path) -> dict[str, list[Detection]]:
    preds: dict[str, list[Detection]] = {}
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            d = json.loads(line)
            preds.setdefault(d["image_id"], []).append(
                Detection(class_id=int(d["class_id"]), bbox=tuple(d["bbox"]),
                          score=float(d["score"])))
    return preds
