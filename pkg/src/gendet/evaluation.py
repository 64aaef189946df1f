"""Open-ended evaluation: similarity rescaling and class-agnostic COCO AP.

Generated names are matched to the ground-truth category with the highest
similarity (pluggable backend; token-overlap Dice by default) and that
similarity rescales the objectness score. AP pools detections across the
whole set class-agnostically, but a true positive must also agree with its
matched category; precision is integrated on the 101-point recall grid at
IoU thresholds 0.50:0.05:0.95.
"""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, replace

import numpy as np

from .objective import cxcywh_to_xyxy, iou_xyxy

COCO_IOU_THRESHOLDS = tuple(np.round(np.linspace(0.50, 0.95, 10), 2))
RECALL_GRID = np.linspace(0.0, 1.0, 101)


@dataclass
class Detection:
    """One predicted object. ``final_score`` starts equal to the objectness
    and only drops after similarity rescaling; ``matched_category`` records
    which ground-truth category the name was credited to."""

    box: np.ndarray  # (4,) cxcywh in [0, 1]
    objectness: float
    token_ids: tuple
    final_score: float
    matched_category: tuple | None = None


@dataclass
class EvalReport:
    ap: float
    ap50: float
    ap75: float
    curves: dict  # iou threshold -> 101 interpolated precisions

    def to_dict(self):
        return {
            "AP": self.ap,
            "AP50": self.ap50,
            "AP75": self.ap75,
            "recall_grid": [float(r) for r in RECALL_GRID],
            "pr_curves": {f"{t:.2f}": [float(p) for p in c] for t, c in self.curves.items()},
        }


def dice_similarity(generated, reference):
    """Multiset token overlap 2|A∩B| / (|A|+|B|); empty generated gives 0."""
    if len(generated) == 0:
        return 0.0
    a = Counter(generated)
    b = Counter(reference)
    inter = sum((a & b).values())
    return 2.0 * inter / (len(generated) + len(reference))


def rescale_scores(detections, categories, similarity=dice_similarity):
    """Rescale each detection by its best category similarity.

    ``categories`` is an ordered sequence of ground-truth names (token
    tuples); the first of any tied maxima wins. Returns new detections with
    ``final_score = objectness * max_similarity`` and the matched category
    recorded for AP credit.
    """
    categories = list(categories)
    if not categories:
        raise ValueError("rescale_scores needs at least one ground-truth category")
    out = []
    for det in detections:
        sims = [similarity(det.token_ids, cat) for cat in categories]
        best = int(np.argmax(sims))
        out.append(
            replace(
                det,
                final_score=det.objectness * sims[best],
                matched_category=tuple(categories[best]),
            )
        )
    return out


def _detection_order(dets):
    """Sort keys: score desc, box area desc, then input order."""

    def area(d):
        return float(d.box[2] * d.box[3])

    return sorted(range(len(dets)), key=lambda i: (-dets[i].final_score, -area(dets[i]), i))


def _match_image(dets, gts, iou_threshold, require_category):
    """Greedy matching at one threshold; returns tp flags in ``dets`` order.

    Detections are visited best-first; each grabs the unmatched ground
    truth with the highest IoU >= threshold (ties to the lower gt index),
    restricted to its matched category when ``require_category``.
    """
    tp = np.zeros(len(dets), dtype=bool)
    if not gts:
        return tp
    gt_boxes = cxcywh_to_xyxy(np.array([b for b, _ in gts], dtype=np.float64))
    taken = np.zeros(len(gts), dtype=bool)
    for i in _detection_order(dets):
        det = dets[i]
        box = cxcywh_to_xyxy(np.asarray(det.box, dtype=np.float64))
        best_j, best_iou = -1, iou_threshold
        for j, (_, name) in enumerate(gts):
            if taken[j]:
                continue
            if require_category and det.matched_category != tuple(name):
                continue
            iou = float(iou_xyxy(box, gt_boxes[j]))
            if iou > best_iou or (iou == best_iou and best_j == -1 and iou >= iou_threshold):
                best_j, best_iou = j, iou
        if best_j >= 0:
            taken[best_j] = True
            tp[i] = True
    return tp


def _interpolated_precision(tp_flags, order_keys, total_gt):
    """101-point interpolated precision from pooled detections."""
    if total_gt == 0 or len(tp_flags) == 0:
        return np.zeros_like(RECALL_GRID)
    order = sorted(range(len(tp_flags)), key=lambda i: order_keys[i])
    tp = np.cumsum([tp_flags[i] for i in order])
    fp = np.cumsum([not tp_flags[i] for i in order])
    recall = tp / total_gt
    precision = tp / np.maximum(tp + fp, 1)
    # precision envelope from the right, then sample the recall grid
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    out = np.zeros_like(RECALL_GRID)
    for gi, r in enumerate(RECALL_GRID):
        k = np.searchsorted(recall, r, side="left")
        out[gi] = envelope[k] if k < len(envelope) else 0.0
    return out


def compute_ap(dets_per_image, gts_per_image, iou_thresholds=COCO_IOU_THRESHOLDS):
    """Class-agnostic AP over rescaled detections.

    ``gts_per_image`` holds (box cxcywh, name token tuple) pairs. A true
    positive needs IoU >= threshold against an unmatched ground truth whose
    category equals the detection's matched category.
    """
    total_gt = sum(len(g) for g in gts_per_image)
    curves = {}
    for thr in iou_thresholds:
        flags = []
        keys = []
        for img_idx, (dets, gts) in enumerate(zip(dets_per_image, gts_per_image)):
            tp = _match_image(dets, gts, float(thr), require_category=True)
            for di, det in enumerate(dets):
                flags.append(bool(tp[di]))
                keys.append(
                    (-det.final_score, -float(det.box[2] * det.box[3]), img_idx, di)
                )
        curves[float(thr)] = _interpolated_precision(flags, keys, total_gt)
    aps = {t: float(np.mean(c)) for t, c in curves.items()}
    return EvalReport(
        ap=float(np.mean(list(aps.values()))) if aps else 0.0,
        ap50=aps.get(0.5, 0.0),
        ap75=aps.get(0.75, 0.0),
        curves=curves,
    )


def exact_name_rate(dets_per_image, gts_per_image, iou_threshold=0.5):
    """Fraction of ground truths whose box-matched detection (IoU >= 0.5,
    category-agnostic, best-score-first) reproduces the name exactly."""
    total = sum(len(g) for g in gts_per_image)
    if total == 0:
        return 0.0
    exact = 0
    for dets, gts in zip(dets_per_image, gts_per_image):
        if not gts:
            continue
        gt_boxes = cxcywh_to_xyxy(np.array([b for b, _ in gts], dtype=np.float64))
        taken = np.zeros(len(gts), dtype=bool)
        for i in _detection_order(dets):
            det = dets[i]
            box = cxcywh_to_xyxy(np.asarray(det.box, dtype=np.float64))
            best_j, best_iou = -1, iou_threshold
            for j in range(len(gts)):
                if taken[j]:
                    continue
                iou = float(iou_xyxy(box, gt_boxes[j]))
                if iou > best_iou or (iou == best_iou and best_j == -1 and iou >= iou_threshold):
                    best_j, best_iou = j, iou
            if best_j >= 0:
                taken[best_j] = True
                if tuple(det.token_ids) == tuple(gts[best_j][1]):
                    exact += 1
    return exact / total


def save_report(path, report):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=1)
        fh.write("\n")


def save_pr_csv(path, report):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iou_threshold", "recall", "precision"])
        for thr in sorted(report.curves):
            for r, p in zip(RECALL_GRID, report.curves[thr]):
                writer.writerow([f"{thr:.2f}", f"{r:.2f}", repr(float(p))])


def save_predictions(path, dets_per_image, vocab=None):
    """Dump detections as JSON records {image_id, box, objectness, name,
    final_score}; names become strings when a vocabulary is given."""
    records = []
    for img_idx, dets in enumerate(dets_per_image):
        for det in dets:
            name_tokens = list(map(int, det.token_ids))
            record = {
                "image_id": img_idx,
                "box": [float(v) for v in det.box],
                "objectness": float(det.objectness),
                "name": name_tokens,
                "final_score": float(det.final_score),
            }
            if vocab is not None:
                record["name_text"] = " ".join(vocab.id_word(t) for t in name_tokens)
            records.append(record)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(records, fh, indent=1)
        fh.write("\n")
