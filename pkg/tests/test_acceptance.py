"""End-to-end acceptance checks.

Each test covers one release criterion and prints a single [PASS] line when
it holds; any assertion failure is the corresponding [FAIL].  Run with
``pytest tests/test_acceptance.py -v`` for the per-criterion verdicts.
"""

import itertools
import math
import re
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import make_config
from rovi.crosscheck import CrosscheckConfig, aggregate_yes_no, verdict
from rovi.curation import dedup, dedup_bruteforce
from rovi.datamodel import DetBox, ImageRecord, read_manifest
from rovi.geometry import iou, nms_per_category
from rovi.orchestrator import STAGES, PipelineRunner, load_config
from rovi.recaption import (
    RecaptionConfig,
    merge_categories,
    postprocess_description,
)
from rovi.resample import ResampleConfig, resample_image
from rovi.stats import dataset_stats, per_detector_stats

from test_geometry import greedy_nms_oracle
from test_resample import make_dense_candidates
from test_stats import inst, record


def ok(n: int, text: str) -> None:
    print(f"[PASS] criterion {n}: {text}")


def random_boxes(rng, count, categories=("a", "b", "c")):
    out = []
    for _ in range(count):
        x1, y1 = rng.uniform(0, 300, 2)
        w, h = rng.uniform(5, 120, 2)
        out.append(
            DetBox(
                box=(float(x1), float(y1), float(x1 + w), float(y1 + h)),
                category=str(rng.choice(categories)),
                score=float(round(rng.uniform(0.05, 1.0), 3)),
                detector=str(rng.choice(["gd", "yw", "ow", "od"])),
            )
        )
    return out


def test_criterion_1_nms_matches_bruteforce_oracle():
    rng = np.random.default_rng(11)
    start = time.monotonic()
    for trial in range(1000):
        boxes = random_boxes(rng, int(rng.integers(0, 51)))
        threshold = float(rng.uniform(0.1, 0.9))
        key = lambda b: (b.category, b.box, b.score, b.detector)
        got = sorted(nms_per_category(boxes, threshold), key=key)
        want = sorted(greedy_nms_oracle(boxes, threshold), key=key)
        assert [key(b) for b in got] == [key(b) for b in want], f"trial {trial}"
    elapsed = time.monotonic() - start
    assert elapsed < 10.0, f"1000 NMS trials took {elapsed:.1f}s"
    ok(1, f"fused box sets match the brute-force oracle on 1000 random inputs ({elapsed:.1f}s)")


def test_criterion_2_dedup_matches_bruteforce_oracle():
    rng = np.random.default_rng(7)
    for trial in range(500):
        n = int(rng.integers(2, 40))
        hashes = []
        for i in range(n):
            if i and rng.random() < 0.45:
                # mutate an earlier hash to plant chains of near-duplicates
                base = hashes[int(rng.integers(len(hashes)))]
                flips = int(rng.integers(0, 14))
                for bit in rng.choice(64, size=flips, replace=False):
                    base ^= 1 << int(bit)
                hashes.append(base)
            else:
                hashes.append(int(rng.integers(0, 2**63)) * 2 + int(rng.integers(2)))
        records = [
            ImageRecord(id=f"r{i:03d}", uri="file:///x", width=1280, height=1024,
                        aesthetic=float(rng.choice([5.0, 6.0, 7.0])), phash=h)
            for i, h in enumerate(hashes)
        ]
        max_hamming = int(rng.integers(0, 13))
        kept, clusters = dedup(records, max_hamming)
        kept_o, clusters_o = dedup_bruteforce(records, max_hamming)
        assert [r.id for r in kept] == [r.id for r in kept_o], f"trial {trial}"
        assert clusters == clusters_o, f"trial {trial}"
    ok(2, "banded dedup equals the O(n^2) transitive-closure oracle on 500 random corpora")


def test_criterion_3_resample_retention_and_layer_overlap():
    checked = 0
    for n, clusters, seed in [(107, 8, 1), (80, 6, 2), (150, 10, 3), (107, 8, 9),
                              (120, 8, 4), (96, 7, 5)]:
        candidates = make_dense_candidates(n=n, clusters=clusters, seed=seed)
        cfg = ResampleConfig(seed=seed)
        out = resample_image(candidates, 1000, 1000, f"img-{n}-{seed}", cfg)
        selected = [i for i in out if i.status == "resampled"]
        retention = len(selected) / len(candidates)
        assert 0.20 <= retention <= 0.40, f"retention {retention:.3f} for n={n} seed={seed}"
        layers = {}
        for i in selected:
            assert i.layer is not None and 0 <= i.layer < cfg.layers
            layers.setdefault(i.layer, []).append(i)
        for members in layers.values():
            for a, b in itertools.combinations(members, 2):
                assert iou(a.det.box, b.det.box) <= cfg.layer_iou_max + 1e-12
        assert len(selected) <= cfg.per_image_cap
        checked += 1
    ok(3, f"retention stayed in [0.20, 0.40] with per-layer overlap <= 0.3 on {checked} dense sets")


def test_criterion_4_crosscheck_decision_table():
    cfg = CrosscheckConfig()

    def alts(pairs):
        return [(tok, math.log(p)) for tok, p in pairs]

    # 20 frozen logprob tables with independently computed expectations
    cases = [
        (alts([("Yes", 0.8), ("No", 0.1)]), 0.8, 0.1, "verified"),
        (alts([("Yes", 0.56), ("yes", 0.24), ("No", 0.1)]), 0.8, 0.1, "verified"),
        (alts([("No", 0.8), ("Yes", 0.1)]), 0.1, 0.8, "rejected"),
        (alts([("Yes", 0.3), ("No", 0.1)]), 0.3, 0.1, "indeterminate"),
        (alts([("Yes", 0.75), ("No", 0.25)]), 0.75, 0.25, "verified"),
        (alts([("Yes", 0.74), ("No", 0.26)]), 0.74, 0.26, "rejected"),
        (alts([("Yes", 0.38), ("No", 0.13)]), 0.38, 0.13, "rejected"),
        (alts([("Yes", 0.376), ("No", 0.125)]), 0.376, 0.125, "verified"),
        (alts([("yes", 0.2), (" yes", 0.2), ("YES", 0.2)]), 0.6, 0.0, "verified"),
        (alts([("no", 0.2), (" No", 0.2), ("NO!", 0.2)]), 0.0, 0.6, "rejected"),
        (alts([("maybe", 0.9)]), 0.0, 0.0, "indeterminate"),
        ([], 0.0, 0.0, "indeterminate"),
        (alts([("Yes.", 0.5), ("no,", 0.1)]), 0.5, 0.1, "verified"),
        (alts([("Yes", 0.5), ("No", 0.5)]), 0.5, 0.5, "rejected"),
        (alts([("Yes", 0.45), ("No", 0.05)]), 0.45, 0.05, "verified"),
        (alts([("Yes", 0.44), ("No", 0.05)]), 0.44, 0.05, "indeterminate"),
        (alts([("Yes", 0.05), ("No", 0.45)]), 0.05, 0.45, "rejected"),
        (alts([("Yes", 0.9), ("No", 0.1)]), 0.9, 0.1, "verified"),
        (alts([("Yes", 0.3), ("No", 0.3)]), 0.3, 0.3, "rejected"),
        (alts([("Yes", 0.1), ("no", 0.2), (" no", 0.3)]), 0.1, 0.5, "rejected"),
    ]
    assert len(cases) == 20
    for idx, (table, want_yes, want_no, want_verdict) in enumerate(cases):
        p_yes, p_no = aggregate_yes_no(table, cfg)
        assert p_yes == pytest.approx(want_yes, abs=1e-12), f"case {idx}"
        assert p_no == pytest.approx(want_no, abs=1e-12), f"case {idx}"
        assert verdict(p_yes, p_no, cfg) == want_verdict, f"case {idx}"

    # decision rule re-derived independently across 10000 probability pairs
    rng = np.random.default_rng(21)
    for _ in range(10000):
        p_yes = float(rng.uniform(0, 1))
        p_no = float(rng.uniform(0, 1 - p_yes))
        mass = p_yes + p_no
        if mass < cfg.min_mass:
            want = "indeterminate"
        elif p_yes >= cfg.keep_ratio * mass:
            want = "verified"
        else:
            want = "rejected"
        assert verdict(p_yes, p_no, cfg) == want, (p_yes, p_no)
    ok(4, "20 frozen logprob tables and 10000 sampled probability pairs all decided correctly")


def test_criterion_5_pipeline_deterministic_and_resumable(corpus, mock_service,
                                                          tmp_path_factory):
    root = tmp_path_factory.mktemp("accept_e2e")
    start = time.monotonic()

    def run_full(tag, workers, stagewise=False):
        cfg_path = make_config(root / f"{tag}.yaml", corpus["manifest"],
                               root / tag, mock_service, workers=workers)
        if stagewise:
            # fresh runner per stage simulates a process restart at each boundary
            for stage in STAGES:
                PipelineRunner(load_config(cfg_path)).run_stage(stage)
            runner = PipelineRunner(load_config(cfg_path))
        else:
            runner = PipelineRunner(load_config(cfg_path))
            runner.run()
        return runner.manifest_path("finalize").read_bytes()

    baseline = run_full("base", workers=4)
    assert run_full("repeat", workers=4) == baseline
    assert run_full("w1", workers=1) == baseline
    assert run_full("w16", workers=16) == baseline
    assert run_full("stagewise", workers=4, stagewise=True) == baseline

    finals = list(read_manifest(root / "base" / "06_finalize.jsonl"))
    assert finals and any(r.instances for r in finals)
    elapsed = time.monotonic() - start
    assert elapsed < 60.0, f"five pipeline runs took {elapsed:.1f}s"
    ok(5, "final manifest byte-identical across repeats, worker counts 1/4/16, "
          f"and restart at every stage boundary ({elapsed:.1f}s)")


def test_criterion_6_stats_match_hand_computation():
    a = record("a", ["cat", "dog"], [inst("cat"), inst("cat", box=(20, 20, 30, 30)),
                                     inst("dog", box=(40, 40, 50, 50))],
               width=2000, height=1000, aesthetic=5.0)
    b = record("b", ["cat"], [inst("cat")], width=2204, height=1976, aesthetic=7.0)
    m = dataset_stats([a, b])
    assert m["images"] == 2
    assert m["distinct_categories"] == 2
    assert m["avg_category"] == pytest.approx(1.5)
    assert m["avg_box"] == pytest.approx(2.0)
    assert m["avg_resolution"] == (pytest.approx(2102), pytest.approx(1488))
    assert m["avg_aesthetic"] == pytest.approx(6.0)

    counts = {"gd": 267, "yw": 217, "ow": 280, "od": 236}
    instances = []
    n = 0
    for detector, count in counts.items():
        for _ in range(count):
            instances.append(inst(f"c{n % 40}", detector=detector,
                                  box=(n % 100, (n // 100) * 10, n % 100 + 5, (n // 100) * 10 + 5)))
            n += 1
    shares = per_detector_stats([record("c", [], instances)])
    assert shares["gd"]["box_contribution"] == pytest.approx(0.267, abs=1e-9)
    assert shares["yw"]["box_contribution"] == pytest.approx(0.217, abs=1e-9)
    assert shares["ow"]["box_contribution"] == pytest.approx(0.280, abs=1e-9)
    assert shares["od"]["box_contribution"] == pytest.approx(0.236, abs=1e-9)
    assert sum(v["box_contribution"] for v in shares.values()) == pytest.approx(1.0, abs=1e-9)
    ok(6, "dataset stats equal hand computations; detector shares recovered to 1e-9")


def test_criterion_7_recaption_contracts():
    cfg = RecaptionConfig()

    fragments = [
        "This is a watercolor illustration of a harbor.",
        "A lighthouse stands near the center.",
        "There are no visible boats on the water.",
        "The pier has no other structures around it.",
        "This is clearly the oldest building.",
        "Two gulls sit on the railing.",
        "The sky is not visible behind the fog.",
        "Paint strokes are without any sharp edges.",
    ]
    tested = 0
    for combo in itertools.islice(
        (c for r in range(1, 5) for c in itertools.permutations(fragments, r)), 200
    ):
        text = " ".join(combo)
        once = postprocess_description(text, cfg)
        assert postprocess_description(once, cfg) == once, text
        for sentence in re.split(r"(?<=[.?!])\s+", once):
            low = sentence.lower()
            assert "there are no" not in low and "no visible" not in low
            assert "no other" not in low and "without any" not in low
            assert "not visible" not in low
        tested += 1
    assert tested == 200

    text = ("This is a black and white photograph of a city street. "
            "A tram crosses the intersection. There are no visible cars. "
            "Street lamps line the curb.")
    cleaned = postprocess_description(text, cfg)
    assert cleaned == ("A black and white photograph of a city street. "
                       "A tram crosses the intersection. Street lamps line the curb.")

    pass1 = [f"phrase {i}" for i in range(100)]
    pass2 = ["phrase 5"] + [f"term {i}" for i in range(100)]
    merged = merge_categories(pass1, pass2, cfg).merged
    assert len(merged) == cfg.category_cap
    assert merged[:100] == pass1  # pass-1 phrases keep priority
    assert merged[100:] == [f"term {i}" for i in range(20)]
    ok(7, "description cleanup idempotent on 200 fuzzed inputs; negatives dropped; "
          "merge priority and cap hold")


def test_criterion_8_offline_scope_documented():
    """Real-model output quality cannot be reproduced on this machine; the
    README must say that tests exercise the deterministic mock services."""
    readme = Path(__file__).resolve().parent.parent / "README.md"
    assert readme.exists(), "README.md missing"
    text = readme.read_text(encoding="utf-8").lower()
    assert "mock" in text
    assert "offline" in text or "deterministic" in text
    ok(8, "offline-mock scope and its limits are documented in the README")
