"""Dataset-level metrics and per-detector statistics over any manifest."""

from __future__ import annotations

from .datamodel import ImageRecord, read_manifest


class StatsError(ValueError):
    pass


ALL_STATUSES = frozenset({"candidate", "resampled", "verified", "rejected", "indeterminate"})


def _load(manifest) -> list[ImageRecord]:
    if isinstance(manifest, (str,)) or hasattr(manifest, "__fspath__"):
        records = list(read_manifest(manifest))
    else:
        records = list(manifest)
    return [r for r in records if r.failed is None]


def _filtered_instances(record: ImageRecord, statuses) -> list:
    if record.instances is None:
        return []
    return [inst for inst in record.instances if inst.status in statuses]


def dataset_stats(manifest, status_filter=frozenset({"verified"})) -> dict:
    """Global dataset metrics over instances with the given statuses.

    Images with zero surviving instances still count toward the per-image
    means with 0.
    """
    records = _load(manifest)
    if not records:
        raise StatsError("empty manifest")
    statuses = frozenset(status_filter)
    global_categories: set[str] = set()
    cat_counts: list[int] = []
    box_counts: list[int] = []
    widths: list[float] = []
    heights: list[float] = []
    aesthetics: list[float] = []
    for record in records:
        instances = _filtered_instances(record, statuses)
        cats = {inst.det.category for inst in instances}
        global_categories.update(cats)
        cat_counts.append(len(cats))
        box_counts.append(len(instances))
        if record.width is not None and record.height is not None:
            widths.append(record.width)
            heights.append(record.height)
        if record.aesthetic is not None:
            aesthetics.append(record.aesthetic)
    n = len(records)
    return {
        "images": n,
        "distinct_categories": len(global_categories),
        "avg_category": sum(cat_counts) / n,
        "avg_box": sum(box_counts) / n,
        "avg_resolution": (
            sum(widths) / len(widths) if widths else 0.0,
            sum(heights) / len(heights) if heights else 0.0,
        ),
        "avg_aesthetic": sum(aesthetics) / len(aesthetics) if aesthetics else 0.0,
    }


def per_detector_stats(manifest, status_filter=frozenset({"verified"})) -> dict:
    """Box contribution, category coverage, and unique-category share per detector."""
    records = _load(manifest)
    statuses = frozenset(status_filter)
    total_boxes = 0
    boxes_by_detector: dict[str, int] = {}
    categories_by_detector: dict[str, set[str]] = {}
    global_categories: set[str] = set()
    for record in records:
        for inst in _filtered_instances(record, statuses):
            d = inst.det.detector
            total_boxes += 1
            boxes_by_detector[d] = boxes_by_detector.get(d, 0) + 1
            categories_by_detector.setdefault(d, set()).add(inst.det.category)
            global_categories.add(inst.det.category)
    out: dict[str, dict] = {}
    n_global = len(global_categories)
    for d in sorted(boxes_by_detector):
        cats = categories_by_detector[d]
        others = set().union(
            *(c for dd, c in categories_by_detector.items() if dd != d)
        ) if len(categories_by_detector) > 1 else set()
        out[d] = {
            "box_contribution": boxes_by_detector[d] / total_boxes if total_boxes else 0.0,
            "cat_coverage": len(cats) / n_global if n_global else 0.0,
            "unique_cat": len(cats - others) / n_global if n_global else 0.0,
        }
    return out
