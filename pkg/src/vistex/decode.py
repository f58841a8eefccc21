"""Decode dense grounding outputs into scored, class-labelled boxes."""

from __future__ import annotations

from typing import NamedTuple

import torch

from .config import NO_OBJECT
from .errors import InvalidInputError
from .ovlm import GroundingOutput, cell_centers


class Detection(NamedTuple):
    box: tuple[float, float, float, float]
    class_id: int
    score: float


def greedy_nms(candidates: list[Detection], iou_threshold: float) -> list[Detection]:
    """Keep highest-scored boxes, dropping any later box with IoU above the
    threshold against an already kept one.  Stable under score ties."""
    order = sorted(range(len(candidates)), key=lambda i: -candidates[i].score)
    kept: list[Detection] = []
    for i in order:
        cand = candidates[i]
        if all(_iou(cand.box, k.box) <= iou_threshold for k in kept):
            kept.append(cand)
    return kept


def _iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter <= 0.0:
        return 0.0
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def decode_detections(output: GroundingOutput, token_class_map: list[int],
                      score_threshold: float = 0.3, nms_iou: float = 0.5,
                      max_per_class: int = 100) -> list[Detection]:
    """Max-pool each class's token columns, threshold, decode boxes, NMS.

    A class's score at a cell is the maximum sigmoid alignment over all of
    that class's prompt tokens (text and visual pooled together), so extra
    shots can only add score support, never remove it.
    """
    if not token_class_map:
        raise InvalidInputError("token_class_map is empty")
    if not (0.0 < score_threshold < 1.0 and 0.0 < nms_iou < 1.0):
        raise InvalidInputError("thresholds must lie strictly inside (0, 1)")
    columns: dict[int, list[int]] = {}
    for t, cid in enumerate(token_class_map):
        if cid != NO_OBJECT:
            columns.setdefault(cid, []).append(t)
    detections: list[Detection] = []
    for cid in sorted(columns):
        cols = columns[cid]
        candidates: list[Detection] = []
        for j, logits in enumerate(output.logits):
            scores = torch.sigmoid(logits[:, cols]).max(dim=1).values
            over = torch.nonzero(scores > score_threshold).flatten()
            if over.numel() == 0:
                continue
            stride = output.strides[j]
            centers = cell_centers(output.grid_shapes[j], stride, dtype=scores.dtype)
            deltas = output.box_deltas[j]
            size = float(output.image_size)
            for idx in over.tolist():
                cx, cy = centers[idx].tolist()
                l, t, r, b = (deltas[idx] * stride).tolist()
                x0, y0 = max(cx - l, 0.0), max(cy - t, 0.0)
                x1, y1 = min(cx + r, size), min(cy + b, size)
                if x1 <= x0 or y1 <= y0:
                    continue
                candidates.append(Detection((x0, y0, x1, y1), cid, float(scores[idx])))
        detections.extend(greedy_nms(candidates, nms_iou)[:max_per_class])
    return detections
