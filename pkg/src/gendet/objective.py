"""Class-agnostic set-prediction objective.

Hungarian matching on an objectness + box cost, then a four-term loss:
L1 box regression and a GIoU term averaged over the ground-truth count,
binary cross-entropy objectness over all queries, and the per-region DAG
text loss scaled by the (detached) IoU of each matched pair and summed
without ground-truth normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import numcore as nc
from .dag_head import dag_nll
from .numcore import DiffArray, DimensionError
from .synthdata import EOS_ID


@dataclass
class LossWeights:
    reg: float = 5.0
    iou: float = 2.0
    obj: float = 1.0
    dag: float = 1.0


@dataclass
class MatchAssignment:
    """One-to-one pairing (query index, ground-truth index) plus the
    queries left unmatched; len(pairs) == number of ground truths."""

    pairs: list
    unmatched: list


def cxcywh_to_xyxy(boxes):
    """(..., 4) center-format boxes to corner format, plain numpy."""
    boxes = np.asarray(boxes, dtype=np.float64)
    cx, cy, w, h = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def iou_xyxy(a, b):
    """Elementwise IoU of corner-format boxes (broadcasts over leading dims);
    zero-area unions give 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def giou(a, b):
    """Generalized IoU of corner-format boxes, in [-1, 1].

    IoU minus the normalized hull excess; if both boxes are degenerate
    (zero union) the result is 0 by convention.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    hull = (np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])) * (
        np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    )
    iou = inter / np.where(union > 0, union, 1.0)
    penalty = (hull - union) / np.where(hull > 0, hull, 1.0)
    return np.where(union > 0, iou - penalty, 0.0)


def giou_graph(pred_xyxy, gt_xyxy):
    """Differentiable GIoU of predicted (..., 4) corner boxes against
    constant ground-truth boxes; assumes at least one box per pair has
    positive area (a tiny epsilon guards the denominators)."""
    gt = np.asarray(gt_xyxy, dtype=pred_xyxy.data.dtype)
    eps = 1e-12
    ax1, ay1, ax2, ay2 = (pred_xyxy[..., i] for i in range(4))
    bx1, by1, bx2, by2 = (gt[..., i] for i in range(4))
    iw = nc.relu(nc.minimum(ax2, bx2) - nc.maximum(ax1, bx1))
    ih = nc.relu(nc.minimum(ay2, by2) - nc.maximum(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    hull = (nc.maximum(ax2, bx2) - nc.minimum(ax1, bx1)) * (
        nc.maximum(ay2, by2) - nc.minimum(ay1, by1)
    )
    return inter / (union + eps) - (hull - union) / (hull + eps)


def cxcywh_to_xyxy_graph(boxes):
    """Differentiable center-to-corner conversion for (..., 4) boxes."""
    cx, cy, w, h = (boxes[..., i] for i in range(4))
    half_w = w * 0.5
    half_h = h * 0.5
    parts = [cx - half_w, cy - half_h, cx + half_w, cy + half_h]
    lead = boxes.data.shape[:-1]
    return nc.concat([nc.reshape(p, lead + (1,)) for p in parts], axis=-1)


def matching_cost(boxes, objectness_logits, gt_boxes, weights):
    """Pairwise matching cost (num_queries, num_gt).

    cost = w.obj * (-sigmoid(logit)) + w.reg * L1(box, gt)
         + w.iou * (1 - GIoU(box, gt)), boxes in normalized center format.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64)
    if gt_boxes.shape[0] < 1:
        raise DimensionError("matching_cost needs at least one ground truth")
    obj = 1.0 / (1.0 + np.exp(-np.asarray(objectness_logits, dtype=np.float64)))
    l1 = np.abs(boxes[:, None, :] - gt_boxes[None, :, :]).sum(axis=-1)
    g = giou(cxcywh_to_xyxy(boxes)[:, None, :], cxcywh_to_xyxy(gt_boxes)[None, :, :])
    return weights.obj * (-obj)[:, None] + weights.reg * l1 + weights.iou * (1.0 - g)


def hungarian_match(cost):
    """Minimum-cost one-to-one assignment of queries to ground truths.

    Requires at least as many queries as ground truths. Among cost ties the
    lexicographically smallest pair list wins, resolved by greedily fixing
    the smallest (query, gt) pair that still admits an optimal completion.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, g = cost.shape
    if n < g:
        raise DimensionError(f"need num_queries >= num_gt, got {n} < {g}")
    rows, cols = linear_sum_assignment(cost)
    best_total = float(cost[rows, cols].sum())
    tol = 1e-9 * max(1.0, abs(best_total))
    witness = dict(zip(rows.tolist(), cols.tolist()))
    rows_left = list(range(n))
    cols_left = list(range(g))
    budget = best_total
    pairs = []
    while cols_left:
        chosen = None
        for j in rows_left:
            for i in cols_left:
                if witness.get(j) == i:
                    chosen = (j, i)
                    witness = {r: c for r, c in witness.items() if r != j}
                    break
                sub_rows = [r for r in rows_left if r != j]
                sub_cols = [c for c in cols_left if c != i]
                if len(sub_cols) == 0:
                    completion = 0.0
                    sub_assign = {}
                else:
                    sub = cost[np.ix_(sub_rows, sub_cols)]
                    rr, cc = linear_sum_assignment(sub)
                    completion = float(sub[rr, cc].sum())
                    sub_assign = {sub_rows[r]: sub_cols[c] for r, c in zip(rr, cc)}
                if cost[j, i] + completion <= budget + tol:
                    chosen = (j, i)
                    witness = sub_assign
                    break
            if chosen is not None:
                break
        j, i = chosen
        pairs.append((j, i))
        rows_left.remove(j)
        cols_left.remove(i)
        budget -= float(cost[j, i])
    matched = {p[0] for p in pairs}
    return MatchAssignment(pairs=pairs, unmatched=[j for j in range(n) if j not in matched])


def total_loss(
    boxes, objectness_logits, dags, sample, assignment, weights, end_id=EOS_ID, dag_scales=None
):
    """Combined set-prediction loss for one image.

    boxes: DiffArray (N, 4) sigmoid center-format predictions;
    objectness_logits: DiffArray (N,); dags: per-query TokenDAGs;
    sample: ground truth with ``boxes`` (G, 4) and ``names`` token tuples;
    assignment: frozen matching (never differentiated).

    Box terms are averaged over G; the DAG term multiplies each matched
    region's NLL by its clamped IoU (held constant, no gradient) and is
    summed without dividing by G. ``dag_scales`` overrides those detached
    IoU factors (one per assignment pair), which keeps the loss a smooth
    function of its inputs for finite-difference checks.
    Returns (scalar loss, per-term floats).
    """
    n = boxes.data.shape[0]
    num_gt = len(sample.boxes)
    dtype = boxes.data.dtype
    targets = np.zeros(n, dtype=dtype)
    zero = DiffArray(np.asarray(0.0, dtype=dtype))
    reg_term, iou_term, dag_term = zero, zero, zero
    if num_gt > 0 and assignment.pairs:
        q_idx = np.array([p[0] for p in assignment.pairs])
        g_idx = np.array([p[1] for p in assignment.pairs])
        targets[q_idx] = 1.0
        gt = np.asarray(sample.boxes, dtype=dtype)[g_idx]
        pred = boxes[q_idx]
        reg_term = nc.array_sum(nc.absolute(pred - gt)) * (1.0 / num_gt)
        pred_xyxy = cxcywh_to_xyxy_graph(pred)
        gt_xyxy = cxcywh_to_xyxy(gt)
        iou_term = nc.array_sum(1.0 - giou_graph(pred_xyxy, gt_xyxy)) * (1.0 / num_gt)
        if dag_scales is None:
            iou_scale = np.clip(iou_xyxy(pred_xyxy.data, gt_xyxy), 0.0, 1.0)
        else:
            iou_scale = np.asarray(dag_scales, dtype=np.float64)
        pieces = []
        for (q, g), scale in zip(assignment.pairs, iou_scale):
            target = tuple(sample.names[g]) + (end_id,)
            pieces.append(dag_nll(dags[q], target) * float(scale))
        dag_term = pieces[0]
        for piece in pieces[1:]:
            dag_term = dag_term + piece
    # summed over queries and normalized by the ground-truth count (not by
    # N), matching the box-term normalization; a strong separation signal
    # is what lets duplicate queries resolve into one confident detection
    obj_term = nc.array_sum(nc.bce_with_logits(objectness_logits, targets)) * (
        1.0 / max(num_gt, 1)
    )
    loss = (
        weights.reg * reg_term
        + weights.iou * iou_term
        + weights.obj * obj_term
        + weights.dag * dag_term
    )
    terms = {
        "reg": float(reg_term.data),
        "iou": float(iou_term.data),
        "obj": float(obj_term.data),
        "dag": float(dag_term.data),
        "total": float(loss.data),
    }
    return loss, terms
