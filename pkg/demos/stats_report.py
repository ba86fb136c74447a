"""Statistics over a finished manifest.

Usage: python3 demos/stats_report.py [manifest.jsonl]

Without an argument this first produces a manifest by running the pipeline
demo logic on a tiny synthetic corpus, then prints dataset-level numbers and
the per-detector contribution breakdown for several status filters.
"""

import sys

from rovi.stats import ALL_STATUSES, dataset_stats, per_detector_stats


def report(manifest, statuses, label):
    print(f"\n--- {label} ---")
    try:
        ds = dataset_stats(manifest, statuses)
    except Exception as exc:
        print(f"  (no data: {exc})")
        return
    print(f"  images              {ds['images']}")
    print(f"  distinct categories {ds['distinct_categories']}")
    print(f"  avg categories/img  {ds['avg_category']:.2f}")
    print(f"  avg boxes/img       {ds['avg_box']:.2f}")
    w, h = ds["avg_resolution"]
    print(f"  avg resolution      {w:.0f} x {h:.0f}")
    print(f"  avg aesthetic       {ds['avg_aesthetic']:.2f}")
    for det, m in per_detector_stats(manifest, statuses).items():
        print(f"    {det}: boxes {m['box_contribution']:6.1%}  "
              f"coverage {m['cat_coverage']:6.1%}  unique {m['unique_cat']:6.1%}")


def main():
    if len(sys.argv) > 1:
        manifest = sys.argv[1]
    else:
        print("no manifest given; generating one with the pipeline demo")
        import run_pipeline  # noqa: F401  (same directory)
        import tempfile
        from pathlib import Path

        from rovi.datamodel import write_manifest
        from rovi.mockserver import serve_mocks
        from rovi.orchestrator import PipelineRunner, config_from_dict

        root = Path(tempfile.mkdtemp(prefix="rovi_stats_demo_"))
        records = []
        for i, caption in enumerate(run_pipeline.CAPTIONS):
            path = root / f"demo_{i}.png"
            run_pipeline.synth_image(300 + i).save(path)
            from rovi.datamodel import ImageRecord

            records.append(
                ImageRecord(id=f"demo_{i}", uri=str(path), width=1280, height=1100,
                            aesthetic=6.0 + 0.1 * i, web_caption=caption)
            )
        write_manifest(records, root / "input.jsonl")
        service = serve_mocks(root / "fixtures", fallback="template")
        try:
            cfg = config_from_dict({
                "input_manifest": str(root / "input.jsonl"),
                "workdir": str(root / "workdir"),
                "workers": 4,
                "backends": {
                    "vlm": {"kind": "chat", "endpoint": service.url("/chat")},
                    "llm": {"kind": "chat", "endpoint": service.url("/chat")},
                    "verifier": {"kind": "chat", "endpoint": service.url("/chat")},
                },
                "detectors": [
                    {"id": name, "endpoint": service.url(f"/detect/{name}"), "threshold": 0.2}
                    for name in ("gd", "yw", "ow", "od")
                ],
            })
            manifest = PipelineRunner(cfg).run()
        finally:
            service.close()

    report(manifest, {"verified"}, "verified instances (the released set)")
    report(manifest, ALL_STATUSES, "all instance statuses")


if __name__ == "__main__":
    sys.path.insert(0, str(__file__.rsplit("/", 1)[0]))
    main()
