"""Layered resampling of fused detections before cross-checking.

Up to five layers of low-overlap boxes are selected by weight-proportional
sampling without replacement.  The weight multiplicatively penalizes
overlap with already-selected boxes, duplicate captions, distance from the
image center, and small box sizes, and down-weights detectors that already
contributed many selections.  Selection is deterministic: the RNG is seeded
per image from (config seed, image id), so records are order- and
parallelism-independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .datamodel import DetBox, Instance
from .geometry import area_fraction, center_distance_norm, iou


@dataclass
class ResampleConfig:
    layers: int = 5
    layer_iou_max: float = 0.3
    per_image_cap: int = 64
    retention_target: float = 0.30
    overlap_penalty: float = 2.0  # alpha
    dup_caption_factor: float = 0.5  # beta
    center_penalty: float = 1.0  # gamma
    small_area_floor: float = 0.005  # tau, area fraction
    weight_floor: float = 0.05  # epsilon
    seed: int = 0

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if not 0.0 < self.dup_caption_factor <= 1.0 or not 0.0 < self.weight_floor <= 1.0:
            raise ValueError("dup_caption_factor and weight_floor must be in (0, 1]")
        if not 0.0 < self.layer_iou_max < 1.0:
            raise ValueError("layer_iou_max must be in (0, 1)")


FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def image_seed(seed: int, image_id: str) -> int:
    return fnv1a64(seed.to_bytes(8, "big", signed=False) + image_id.encode("utf-8"))


def sampling_weight(
    candidate: DetBox,
    sampled: Sequence[DetBox],
    counts: dict[str, int],
    detector_share: dict[str, float],
    width: float,
    height: float,
    cfg: ResampleConfig,
) -> float:
    """Multiplicative penalty weight for one candidate box."""
    share = detector_share.get(candidate.detector, 0.0)
    w_det = 1.0 / (1.0 + share * len(detector_share))
    max_iou = max((iou(candidate.box, s.box) for s in sampled), default=0.0)
    overlap = math.exp(-cfg.overlap_penalty * max_iou)
    duplicate = cfg.dup_caption_factor ** counts.get(candidate.category, 0)
    center = math.exp(-cfg.center_penalty * center_distance_norm(candidate.box, width, height))
    size = min(max(area_fraction(candidate.box, width, height) / cfg.small_area_floor,
                   cfg.weight_floor), 1.0)
    return w_det * overlap * duplicate * center * size


def draw_weighted(rng: np.random.Generator, weights: Sequence[float]) -> int:
    """One weight-proportional draw by the exponential-keys method.

    key_i = -ln(u_i) / w_i with u_i uniform; the smallest key wins, which
    selects index i with probability w_i / sum(w).  One uniform is consumed
    per entry in order, so the draw is reproducible given the generator.
    """
    best, best_key = -1, math.inf
    for i, w in enumerate(weights):
        u = rng.random()
        if w <= 0.0:
            continue
        key = -math.log(u) / w
        if key < best_key:
            best, best_key = i, key
    if best < 0:
        raise ValueError("all weights are zero")
    return best


def resample_image(
    instances: list[Instance],
    width: float,
    height: float,
    image_id: str,
    cfg: ResampleConfig,
) -> list[Instance]:
    """Select layered low-overlap instances; others stay status=candidate.

    Returns a new instance list in input order.  Selected instances get
    status=resampled and their layer index.  Selection stops at
    min(per_image_cap, max(1, round(retention_target * N))) or when the
    layer budget is exhausted.
    """
    candidates = [inst for inst in instances if inst.status == "candidate"]
    if not candidates:
        return list(instances)
    n = len(candidates)
    target = min(cfg.per_image_cap, max(1, round(cfg.retention_target * n)))
    rng = np.random.default_rng(image_seed(cfg.seed, image_id))

    remaining = list(range(n))
    selected: dict[int, int] = {}  # candidate index -> layer
    sampled_boxes: list[DetBox] = []
    counts: dict[str, int] = {}
    det_counts: dict[str, int] = {}
    detector_ids = sorted({inst.det.detector for inst in candidates})

    for layer in range(cfg.layers):
        if len(selected) >= target or not remaining:
            break
        layer_boxes: list[DetBox] = []
        while len(selected) < target:
            qualified = [
                i
                for i in remaining
                if all(iou(candidates[i].det.box, lb.box) <= cfg.layer_iou_max for lb in layer_boxes)
            ]
            if not qualified:
                break
            total = len(selected)
            share = {
                d: (det_counts.get(d, 0) / total if total else 0.0) for d in detector_ids
            }
            weights = [
                sampling_weight(candidates[i].det, sampled_boxes, counts, share, width, height, cfg)
                for i in qualified
            ]
            pick = qualified[draw_weighted(rng, weights)]
            selected[pick] = layer
            remaining.remove(pick)
            det = candidates[pick].det
            layer_boxes.append(det)
            sampled_boxes.append(det)
            counts[det.category] = counts.get(det.category, 0) + 1
            det_counts[det.detector] = det_counts.get(det.detector, 0) + 1

    out: list[Instance] = []
    cand_iter = iter(range(n))
    for inst in instances:
        if inst.status != "candidate":
            out.append(inst)
            continue
        idx = next(cand_iter)
        if idx in selected:
            out.append(replace(inst, status="resampled", layer=selected[idx]))
        else:
            out.append(inst)
    return out
