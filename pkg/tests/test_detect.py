import io

import pytest

from conftest import synth_image
from rovi.datamodel import CategorySet, DetBox, ImageRecord
from rovi.detect import (
    DetectError,
    DetectorSpec,
    choose_threshold,
    detect_all,
    fuse,
)
from rovi.modelgateway import BackendSpec, Gateway


def det(box, category="cat", score=0.5, detector="gd"):
    return DetBox(box=box, category=category, score=score, detector=detector)


@pytest.fixture
def gateway(mock_service):
    names = ["gd", "yw", "ow", "od"]
    backends = {
        n: BackendSpec(kind="detector", endpoint=mock_service.url(f"/detect/{n}"))
        for n in names
    }
    return Gateway(backends)


def make_record(categories, rid="r", size=(640, 512)):
    cats = CategorySet(phrases=list(categories), terms=[], merged=list(categories))
    return ImageRecord(id=rid, uri="file:///x.png", width=size[0], height=size[1],
                       web_caption="", categories=cats)


def image_bytes(seed=3, size=(640, 512)):
    buf = io.BytesIO()
    synth_image(seed, size=size).save(buf, format="PNG")
    return buf.getvalue()


DETECTORS = [
    DetectorSpec(id=n, endpoint="", threshold=0.2) for n in ("gd", "yw", "ow", "od")
]


class TestDetectAll:
    def test_empty_categories(self, gateway):
        record = make_record([])
        assert detect_all(record, image_bytes(), DETECTORS, gateway) == []

    def test_four_detector_origins(self, gateway):
        record = make_record(["wooden chair", "glass vase", "brick wall"])
        boxes = detect_all(record, image_bytes(), DETECTORS, gateway,
                           threshold_overrides={d.id: 0.05 for d in DETECTORS})
        assert boxes
        assert {b.detector for b in boxes} == {"gd", "yw", "ow", "od"}
        for b in boxes:
            assert 0 <= b.box[0] < b.box[2] <= record.width
            assert 0 <= b.box[1] < b.box[3] <= record.height
            assert b.category in record.categories.merged

    def test_threshold_filters_low_scores(self, gateway):
        record = make_record(["wooden chair", "glass vase", "brick wall", "green lamp"])
        low = detect_all(record, image_bytes(), DETECTORS, gateway,
                         threshold_overrides={d.id: 0.05 for d in DETECTORS})
        high = detect_all(record, image_bytes(), DETECTORS, gateway,
                          threshold_overrides={d.id: 0.6 for d in DETECTORS})
        assert len(high) < len(low)
        assert all(b.score >= 0.6 for b in high)

    def test_chunking_invariant(self, gateway):
        categories = ["wooden chair", "glass vase", "brick wall", "green lamp", "striped cat"]
        record = make_record(categories)
        img = image_bytes()
        whole = detect_all(record, img, DETECTORS, gateway)
        chunked_specs = [
            DetectorSpec(id=d.id, endpoint="", threshold=d.threshold, max_categories_per_call=2)
            for d in DETECTORS
        ]
        chunked = detect_all(record, img, chunked_specs, gateway)
        key = lambda b: (b.detector, b.category, b.box, b.score)
        assert sorted(whole, key=key) == sorted(chunked, key=key)

    def test_partial_failure_degrades(self, mock_service):
        backends = {
            "gd": BackendSpec(kind="detector", endpoint=mock_service.url("/detect/gd")),
            "yw": BackendSpec(kind="detector", endpoint="http://127.0.0.1:9/detect/yw",
                              max_retries=0, timeout=0.2),
        }
        gateway = Gateway(backends)
        specs = [
            DetectorSpec(id="gd", endpoint=""),
            DetectorSpec(id="yw", endpoint=""),
        ]
        record = make_record(["brick wall", "glass vase"])
        boxes = detect_all(record, image_bytes(), specs, gateway,
                           threshold_overrides={"gd": 0.05, "yw": 0.05})
        assert {b.detector for b in boxes} == {"gd"}

    def test_all_failed_raises(self):
        backends = {
            "gd": BackendSpec(kind="detector", endpoint="http://127.0.0.1:9/x",
                              max_retries=0, timeout=0.2),
        }
        gateway = Gateway(backends)
        record = make_record(["cat"])
        with pytest.raises(DetectError):
            detect_all(record, image_bytes(), [DetectorSpec(id="gd", endpoint="")], gateway)


class TestFuse:
    def test_cross_detector_suppression(self):
        boxes = [
            det((0, 0, 10, 10), score=0.8, detector="gd"),
            det((0, 0, 10, 10), score=0.7, detector="yw"),
        ]
        fused = fuse(boxes)
        assert len(fused) == 1
        assert fused[0].detector == "gd"

    def test_iou_below_threshold_keeps_both(self):
        # IoU = 50*100 / (2*100*100 - 50*100) = 1/3 < 0.4
        boxes = [
            det((0, 0, 100, 100), score=0.9),
            det((50, 0, 150, 100), score=0.8),
        ]
        from rovi.geometry import iou

        assert iou(boxes[0].box, boxes[1].box) < 0.4
        assert len(fuse(boxes)) == 2

    def test_dense_candidate_count_strictly_decreases(self):
        from test_resample import make_dense_candidates

        candidates = [inst.det for inst in make_dense_candidates(n=107)]
        fused = fuse(candidates)
        assert len(fused) < len(candidates)
        assert set(map(id, fused)) <= set(map(id, candidates))


class TestCalibration:
    def test_fixed_point(self):
        # mean count at 0.2 is exactly the target
        score_lists = [[0.1, 0.3, 0.5], [0.25, 0.7, 0.05]]  # at 0.2: 2+2=4 boxes, mean 2.0
        t = choose_threshold(score_lists, target_mean=2.0)
        assert 0.1 < t <= 0.25

    def test_over_target_raises_threshold(self):
        score_lists = [[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]] * 4
        t = choose_threshold(score_lists, target_mean=3.0, floor=0.05)
        assert t > 0.05
        kept = sum(1 for s in score_lists[0] if s >= t)
        assert kept == 3

    def test_tie_prefers_higher_threshold(self):
        score_lists = [[0.2, 0.8]]
        # thresholds 0.05, 0.2 both keep 2; 0.8 keeps 1. target 1.5 ties 0.2-keep-2 vs 0.8-keep-1
        t = choose_threshold(score_lists, target_mean=1.5)
        assert t == 0.8

    def test_empty_sample_rejected(self):
        with pytest.raises(DetectError):
            choose_threshold([], 1.0)

    def test_count_monotone_in_threshold(self):
        import numpy as np

        rng = np.random.default_rng(0)
        score_lists = [list(rng.uniform(0.05, 1.0, rng.integers(0, 30))) for _ in range(20)]
        thresholds = [0.1, 0.3, 0.5, 0.7, 0.9]
        counts = []
        for t in thresholds:
            counts.append(sum(sum(1 for s in lst if s >= t) for lst in score_lists))
        assert counts == sorted(counts, reverse=True)

    def test_per_detector_isolation(self, gateway):
        from rovi.detect import calibrate_thresholds

        records = [make_record(["wooden chair", "glass vase", "brick wall"], rid=f"r{i}")
                   for i in range(4)]
        images = {r.id: image_bytes(seed=50 + i) for i, r in enumerate(records)}
        thresholds = calibrate_thresholds(
            records, DETECTORS, target_mean=2.0, gateway=gateway,
            image_bytes_for=lambda r: images[r.id],
        )
        assert set(thresholds) == {"gd", "yw", "ow", "od"}
        for t in thresholds.values():
            assert 0.05 <= t < 1.0
