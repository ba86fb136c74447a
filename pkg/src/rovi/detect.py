"""Multi-detector fan-out, per-category NMS fusion, and threshold calibration.

Category lists are sent verbatim to every configured detector, chunked to
each detector's per-call limit.  Returned boxes are threshold-filtered,
clipped to image bounds, tagged with their origin detector, concatenated,
and fused with per-category NMS (cross-detector suppression allowed).
"""

from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass

from .datamodel import DetBox, ImageRecord
from .geometry import nms_per_category
from .modelgateway import Gateway, GatewayError

log = logging.getLogger(__name__)

DEFAULT_NMS_THRESHOLD = 0.4
CALIBRATION_FLOOR = 0.05


class DetectError(RuntimeError):
    pass


@dataclass
class DetectorSpec:
    id: str
    endpoint: str
    threshold: float = 0.20
    max_categories_per_call: int = 80

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"detector {self.id!r}: threshold must be in (0, 1)")
        if self.max_categories_per_call < 1:
            raise ValueError(f"detector {self.id!r}: max_categories_per_call must be >= 1")


def _clip_box(box, width, height):
    x1 = min(max(box[0], 0.0), float(width))
    y1 = min(max(box[1], 0.0), float(height))
    x2 = min(max(box[2], 0.0), float(width))
    y2 = min(max(box[3], 0.0), float(height))
    if x1 >= x2 or y1 >= y2:
        return None
    return (x1, y1, x2, y2)


def detect_all(
    record: ImageRecord,
    image_bytes: bytes,
    detectors: list[DetectorSpec],
    gateway: Gateway,
    threshold_overrides: dict[str, float] | None = None,
) -> list[DetBox]:
    """Run every detector over the record's merged categories.

    Individual detector failures (after gateway retries) degrade to a
    partial-result warning; only a full ensemble failure raises.
    """
    categories = record.categories.merged if record.categories else []
    if not categories:
        log.warning("record %s: empty category list, nothing to detect", record.id)
        return []
    width, height = record.width, record.height
    boxes: list[DetBox] = []
    failures = 0
    for spec in detectors:
        threshold = (threshold_overrides or {}).get(spec.id, spec.threshold)
        try:
            for start in range(0, len(categories), spec.max_categories_per_call):
                chunk = categories[start : start + spec.max_categories_per_call]
                for raw_box, category, score in gateway.detect(
                    image_bytes, chunk, threshold, spec.id
                ):
                    if score < threshold:
                        continue
                    clipped = _clip_box(raw_box, width, height)
                    if clipped is None:
                        continue
                    boxes.append(DetBox(box=clipped, category=category, score=score, detector=spec.id))
        except GatewayError as exc:
            failures += 1
            log.warning("record %s: detector %s failed: %s", record.id, spec.id, exc)
    if failures == len(detectors):
        raise DetectError(f"record {record.id!r}: all {failures} detectors failed")
    return boxes


def fuse(boxes: list[DetBox], nms_threshold: float = DEFAULT_NMS_THRESHOLD) -> list[DetBox]:
    """Per-category NMS over the concatenated ensemble output."""
    return nms_per_category(boxes, nms_threshold)


def choose_threshold(
    score_lists: list[list[float]], target_mean: float, floor: float = CALIBRATION_FLOOR
) -> float:
    """Pick the threshold whose post-filter mean boxes/image is closest to target.

    Candidates are the observed raw scores (plus the floor); the box count
    at threshold t is located by binary search in the sorted score array.
    Ties prefer the higher threshold.
    """
    if not score_lists:
        raise DetectError("calibration sample is empty")
    n_images = len(score_lists)
    scores = sorted(s for image_scores in score_lists for s in image_scores)
    candidates = sorted(set(scores) | {floor})
    best_t, best_err = floor, float("inf")
    for t in candidates:
        # boxes kept at threshold t: scores >= t
        kept = len(scores) - bisect.bisect_left(scores, t)
        err = abs(kept / n_images - target_mean)
        if err < best_err or (err == best_err and t > best_t):
            best_t, best_err = t, err
    return best_t


def calibrate_thresholds(
    sample: list[ImageRecord],
    detectors: list[DetectorSpec],
    target_mean: float,
    gateway: Gateway,
    image_bytes_for,
    floor: float = CALIBRATION_FLOOR,
) -> dict[str, float]:
    """Balance per-detector average detection counts against a common target.

    The sample is detected once per detector at a low floor threshold with
    raw scores retained; each detector's threshold is then chosen
    independently from its own score distribution.
    """
    if not sample:
        raise DetectError("calibration sample is empty")
    per_detector: dict[str, list[list[float]]] = {spec.id: [] for spec in detectors}
    for record in sample:
        image_bytes = image_bytes_for(record)
        boxes = detect_all(
            record,
            image_bytes,
            detectors,
            gateway,
            threshold_overrides={spec.id: floor for spec in detectors},
        )
        for spec in detectors:
            per_detector[spec.id].append([b.score for b in boxes if b.detector == spec.id])
    return {
        spec.id: choose_threshold(per_detector[spec.id], target_mean, floor)
        for spec in detectors
    }
