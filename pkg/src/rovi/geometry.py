"""Box arithmetic shared by fusion, resampling, and validation.

Boxes are (x1, y1, x2, y2) in absolute pixels, real-valued, x1 < x2 and
y1 < y2.  No pixel snapping happens here; detectors return sub-pixel boxes.
"""

from __future__ import annotations

import math
from typing import Sequence

from .datamodel import DetBox

Box = tuple[float, float, float, float]


def box_area(b: Box) -> float:
    return (b[2] - b[0]) * (b[3] - b[1])


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 for disjoint or edge-touching boxes."""
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = box_area(a) + box_area(b) - inter
    return inter / union


def nms_per_category(boxes: Sequence[DetBox], threshold: float) -> list[DetBox]:
    """Greedy per-category NMS by descending score.

    Boxes of different categories never suppress each other.  A box is
    suppressed when its IoU with an already-kept same-category box exceeds
    the threshold.  Score ties break by (smaller x1, smaller y1, detector id)
    so output is platform-stable.  Output is sorted by (category, descending
    score) with the same tie order.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    groups: dict[str, list[DetBox]] = {}
    for det in boxes:
        groups.setdefault(det.category, []).append(det)

    kept: list[DetBox] = []
    for category in sorted(groups):
        group = sorted(
            groups[category],
            key=lambda d: (-d.score, d.box[0], d.box[1], d.detector),
        )
        kept_here: list[DetBox] = []
        for det in group:
            if all(iou(det.box, k.box) <= threshold for k in kept_here):
                kept_here.append(det)
        kept.extend(kept_here)
    return kept


def center_distance_norm(b: Box, width: float, height: float) -> float:
    """Distance from box center to image center over half the image diagonal."""
    cx = (b[0] + b[2]) / 2.0 - width / 2.0
    cy = (b[1] + b[3]) / 2.0 - height / 2.0
    half_diag = math.hypot(width, height) / 2.0
    return math.hypot(cx, cy) / half_diag


def area_fraction(b: Box, width: float, height: float) -> float:
    """Box area as a fraction of the image area."""
    return box_area(b) / (width * height)
