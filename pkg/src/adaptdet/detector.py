"""Toy single-shot grid detector.

One box hypothesis per cell: a per-cell MLP backbone with one
neighborhood-mixing step produces a 32-dim feature per cell (the alignment
layer), and linear heads predict class probabilities (index 0 = background)
and box offsets (dcx, dcy, log w, log h) relative to the cell center and a
reference size. Matching assigns each annotation to its center cell.
Evaluation is VOC-style mAP at IoU 0.5 with all-points interpolation.

Cell convention: cell (u, v) covers cx in [u/G, (u+1)/G), cy in
[v/G, (v+1)/G); arrays are indexed [u, v] and flattened as u * G + v.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Node, Tensor

FEAT_DIM = 32
REF_BOX_SIZE = 0.15
BG_WEIGHT = 0.25
DEFAULT_CONF_THRESH = 0.3


@dataclass
class Predictions:
    class_probs: np.ndarray   # (G, G, K+1), softmax over the last axis
    box_offsets: np.ndarray   # (G, G, 4)


@dataclass
class Detection:
    class_id: int
    score: float
    box: tuple[float, float, float, float]   # (cx, cy, w, h)


@dataclass
class CellTargets:
    labels: np.ndarray    # (G, G) int, 0 = background
    offsets: np.ndarray   # (G, G, 4), zero rows for background cells


@dataclass
class EvalResult:
    ap: dict[int, float | None]   # None: class absent from ground truth
    mean_ap: float


# -- parameters and graph builders -------------------------------------------

def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_detector_params(obs_dim: int, num_classes: int,
                         rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Backbone + head weights; uniform(+-1/sqrt(fan_in)), zero biases."""
    kp1 = num_classes + 1
    return {
        "backbone.w1": _uniform(rng, obs_dim, (obs_dim, FEAT_DIM)),
        "backbone.b1": np.zeros(FEAT_DIM),
        "backbone.w2": _uniform(rng, FEAT_DIM, (FEAT_DIM, FEAT_DIM)),
        "backbone.b2": np.zeros(FEAT_DIM),
        "backbone.mix_w": _uniform(rng, FEAT_DIM, (FEAT_DIM, FEAT_DIM)),
        "backbone.mix_b": np.zeros(FEAT_DIM),
        "backbone.out_w": _uniform(rng, FEAT_DIM, (FEAT_DIM, FEAT_DIM)),
        "backbone.out_b": np.zeros(FEAT_DIM),
        "heads.cls_w": _uniform(rng, FEAT_DIM, (FEAT_DIM, kp1)),
        "heads.cls_b": np.zeros(kp1),
        "heads.box_w": _uniform(rng, FEAT_DIM, (FEAT_DIM, 4)),
        "heads.box_b": np.zeros(4),
    }


_NEIGH_CACHE: dict[int, np.ndarray] = {}


def neighborhood_matrix(grid: int) -> np.ndarray:
    """Row-normalized averaging over each cell's 4-neighborhood plus itself."""
    if grid not in _NEIGH_CACHE:
        n = grid * grid
        mat = np.zeros((n, n))
        for u in range(grid):
            for v in range(grid):
                i = u * grid + v
                group = [(u, v), (u - 1, v), (u + 1, v), (u, v - 1), (u, v + 1)]
                members = [uu * grid + vv for uu, vv in group
                           if 0 <= uu < grid and 0 <= vv < grid]
                mat[i, members] = 1.0 / len(members)
        _NEIGH_CACHE[grid] = mat
    return _NEIGH_CACHE[grid]


def params_to_nodes(g: Graph, params: dict[str, np.ndarray],
                    requires_grad: bool = True) -> dict[str, Node]:
    return {name: g.param(name, value, requires_grad=requires_grad)
            for name, value in params.items()}


def build_backbone(g: Graph, p: dict[str, Node], inputs: list[Node],
                   grid: int) -> Node:
    """Per-image inputs (G*G, obs_dim) -> stacked alignment features (N*G*G, 32).

    The per-cell MLP and the neighborhood mean run per image; the mixing
    linear map and the final relu layer are per-cell and run once on the
    concatenated stack.
    """
    mix = g.const(neighborhood_matrix(grid))
    per_image = []
    for x in inputs:
        h = g.relu(g.add(g.matmul(x, p["backbone.w1"]), p["backbone.b1"]))
        h = g.relu(g.add(g.matmul(h, p["backbone.w2"]), p["backbone.b2"]))
        per_image.append(g.matmul(mix, h))
    stack = per_image[0] if len(per_image) == 1 else g.concat(per_image, axis=0)
    mixed = g.add(g.matmul(stack, p["backbone.mix_w"]), p["backbone.mix_b"])
    return g.relu(g.add(g.matmul(mixed, p["backbone.out_w"]), p["backbone.out_b"]))


def build_heads(g: Graph, p: dict[str, Node], feat: Node) -> tuple[Node, Node]:
    """Alignment features -> (class probabilities, box offsets)."""
    logits = g.add(g.matmul(feat, p["heads.cls_w"]), p["heads.cls_b"])
    probs = g.softmax(logits)
    offsets = g.add(g.matmul(feat, p["heads.box_w"]), p["heads.box_b"])
    return probs, offsets


def build_detection_loss(g: Graph, probs: Node, offsets: Node,
                         labels_flat: np.ndarray, target_offsets_flat: np.ndarray,
                         num_classes: int, bg_weight: float = BG_WEIGHT) -> Node:
    """Weighted cross-entropy over all cells + smooth-L1 over positive cells.

    The classification term is the mean over cells of per-cell CE with
    background cells weighted by `bg_weight`; the localization term is the
    mean over positive cells of the summed smooth-L1 of the 4 offsets.
    """
    n = labels_flat.shape[0]
    kp1 = num_classes + 1
    pick = np.zeros((n, kp1))
    pick[np.arange(n), labels_flat] = np.where(labels_flat == 0, bg_weight, 1.0)
    ce = g.scale(g.reduce_mean(g.multiply(g.log(probs), g.const(pick))), -float(kp1))
    positives = labels_flat > 0
    n_pos = int(positives.sum())
    if n_pos == 0:
        return ce
    mask = np.zeros((n, 4))
    mask[positives] = 1.0
    residual = g.add(offsets, g.const(-target_offsets_flat))
    masked = g.multiply(residual, g.const(mask))
    loc = g.scale(g.reduce_mean(g.smooth_l1(masked)), (n * 4.0) / n_pos)
    return g.add(ce, loc)


# -- box encoding -------------------------------------------------------------

def center_cell(cx: float, cy: float, grid: int) -> tuple[int, int]:
    return (min(int(cx * grid), grid - 1), min(int(cy * grid), grid - 1))


def encode_box(box, u: int, v: int, grid: int) -> np.ndarray:
    cx, cy, w, h = box
    return np.array([cx * grid - (u + 0.5), cy * grid - (v + 0.5),
                     np.log(w / REF_BOX_SIZE), np.log(h / REF_BOX_SIZE)])


def decode_box(offsets, u: int, v: int, grid: int) -> tuple[float, float, float, float]:
    dcx, dcy, dw, dh = offsets
    return ((u + 0.5 + dcx) / grid, (v + 0.5 + dcy) / grid,
            REF_BOX_SIZE * np.exp(dw), REF_BOX_SIZE * np.exp(dh))


def match_targets(annotations, grid: int) -> CellTargets:
    """Assign each annotation to its center cell; everything else background."""
    labels = np.zeros((grid, grid), dtype=np.int64)
    offsets = np.zeros((grid, grid, 4))
    areas = np.zeros((grid, grid))
    for a in annotations:
        u, v = center_cell(a.cx, a.cy, grid)
        area = a.w * a.h
        if labels[u, v] != 0:
            warnings.warn(f"two annotations map to cell ({u}, {v}); keeping the larger box")
            if area <= areas[u, v]:
                continue
        labels[u, v] = a.class_id
        offsets[u, v] = encode_box(a.box, u, v, grid)
        areas[u, v] = area
    return CellTargets(labels, offsets)


# -- pure forward / loss wrappers ---------------------------------------------

def backbone_forward(sample, params: dict[str, np.ndarray]) -> np.ndarray:
    """Alignment-layer features (G, G, 32) for one sample."""
    cells = getattr(sample, "cells", sample)
    grid = cells.shape[0]
    g = Graph()
    p = params_to_nodes(g, params, requires_grad=False)
    feat = build_backbone(g, p, [g.const(cells.reshape(grid * grid, -1))], grid)
    g.evaluate()
    return g.value(feat).reshape(grid, grid, FEAT_DIM)


def heads_forward(featmap: np.ndarray, params: dict[str, np.ndarray]) -> Predictions:
    grid = featmap.shape[0]
    g = Graph()
    p = params_to_nodes(g, params, requires_grad=False)
    probs, offsets = build_heads(g, p, g.const(featmap.reshape(grid * grid, FEAT_DIM)))
    g.evaluate()
    kp1 = g.value(probs).shape[-1]
    return Predictions(g.value(probs).reshape(grid, grid, kp1),
                       g.value(offsets).reshape(grid, grid, 4))


def detection_loss(preds: Predictions, targets: CellTargets,
                   bg_weight: float = BG_WEIGHT) -> float:
    grid, _, kp1 = preds.class_probs.shape
    n = grid * grid
    g = Graph()
    loss = build_detection_loss(
        g, g.const(preds.class_probs.reshape(n, kp1)),
        g.const(preds.box_offsets.reshape(n, 4)),
        targets.labels.reshape(n), targets.offsets.reshape(n, 4),
        kp1 - 1, bg_weight)
    del loss
    return float(g.evaluate().data)


# -- detection post-processing ------------------------------------------------

def decode_predictions(preds: Predictions, conf_thresh: float) -> list[Detection]:
    """Every (cell, foreground class) with probability above the threshold."""
    if not 0.0 < conf_thresh < 1.0:
        raise ValueError(f"conf_thresh must be in (0,1), got {conf_thresh}")
    grid = preds.class_probs.shape[0]
    out = []
    for u in range(grid):
        for v in range(grid):
            probs = preds.class_probs[u, v]
            for k in range(1, probs.shape[0]):
                if probs[k] > conf_thresh:
                    box = decode_box(preds.box_offsets[u, v], u, v, grid)
                    out.append(Detection(k, float(probs[k]), tuple(float(x) for x in box)))
    return out


def iou(box_a, box_b) -> float:
    ax, ay, aw, ah = box_a
    bx, by, bw, bh = box_b
    ix = max(0.0, min(ax + aw / 2, bx + bw / 2) - max(ax - aw / 2, bx - bw / 2))
    iy = max(0.0, min(ay + ah / 2, by + bh / 2) - max(ay - ah / 2, by - bh / 2))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def nms(detections: list[Detection], iou_thresh: float = 0.5) -> list[Detection]:
    """Greedy per-class suppression; ties broken by earlier index."""
    kept: list[Detection] = []
    for k in sorted({d.class_id for d in detections}):
        group = [(i, d) for i, d in enumerate(detections) if d.class_id == k]
        group.sort(key=lambda item: (-item[1].score, item[0]))
        chosen: list[Detection] = []
        for _, d in group:
            if all(iou(d.box, c.box) <= iou_thresh for c in chosen):
                chosen.append(d)
        kept.extend(chosen)
    return kept


def average_precision(recalls: np.ndarray, precisions: np.ndarray) -> float:
    """Area under the all-points-interpolated PR curve."""
    r = np.concatenate([[0.0], recalls, [recalls[-1] if recalls.size else 0.0]])
    p = np.concatenate([[0.0], precisions, [0.0]])
    for i in range(p.size - 2, -1, -1):
        p[i] = max(p[i], p[i + 1])
    steps = np.nonzero(r[1:] != r[:-1])[0]
    return float(np.sum((r[steps + 1] - r[steps]) * p[steps + 1]))


def evaluate_map(detections_per_image: list[list[Detection]],
                 gts_per_image: list[list],
                 num_classes: int, iou_thresh: float = 0.5) -> EvalResult:
    """VOC-style mAP@iou_thresh with greedy best-IoU matching per class.

    Classes absent from the ground truth are excluded from the mean; with
    no present classes at all the mAP is 0.
    """
    ap: dict[int, float | None] = {}
    for k in range(1, num_classes + 1):
        gt_boxes = [[a.box for a in gts if a.class_id == k] for gts in gts_per_image]
        n_pos = sum(len(b) for b in gt_boxes)
        if n_pos == 0:
            ap[k] = None
            continue
        dets = [(img, i, d) for img, dd in enumerate(detections_per_image)
                for i, d in enumerate(dd) if d.class_id == k]
        dets.sort(key=lambda t: (-t[2].score, t[0], t[1]))
        matched = [np.zeros(len(b), dtype=bool) for b in gt_boxes]
        tp = np.zeros(len(dets))
        for rank, (img, _, d) in enumerate(dets):
            best, best_iou = -1, iou_thresh
            for j, gtb in enumerate(gt_boxes[img]):
                if matched[img][j]:
                    continue
                val = iou(d.box, gtb)
                if val >= best_iou:
                    best, best_iou = j, val
            if best >= 0:
                matched[img][best] = True
                tp[rank] = 1.0
        cum_tp = np.cumsum(tp)
        recalls = cum_tp / n_pos
        precisions = cum_tp / np.arange(1, len(dets) + 1)
        ap[k] = average_precision(recalls, precisions)
    present = [v for v in ap.values() if v is not None]
    return EvalResult(ap, float(np.mean(present)) if present else 0.0)


def detect_image(sample, params: dict[str, np.ndarray],
                 conf_thresh: float = DEFAULT_CONF_THRESH,
                 nms_thresh: float = 0.5) -> list[Detection]:
    feat = backbone_forward(sample, params)
    preds = heads_forward(feat, params)
    return nms(decode_predictions(preds, conf_thresh), nms_thresh)


def evaluate_detector(params: dict[str, np.ndarray], dataset,
                      conf_thresh: float = DEFAULT_CONF_THRESH,
                      iou_thresh: float = 0.5, nms_thresh: float = 0.5) -> EvalResult:
    """Full pipeline over a dataset; only backbone/head parameters are read."""
    det_params = {k: v for k, v in params.items()
                  if k.startswith(("backbone.", "heads."))}
    detections = [detect_image(s, det_params, conf_thresh, nms_thresh)
                  for s in dataset.samples]
    gts = [s.annotations_for_eval() for s in dataset.samples]
    return evaluate_map(detections, gts, dataset.gen_config.num_classes, iou_thresh)
