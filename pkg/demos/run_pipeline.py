"""End-to-end walkthrough: synthetic corpus, mock backends, full pipeline.

Creates a handful of synthetic images, starts the deterministic mock
services in-process, runs every stage, and prints what each stage produced.
Everything lands in a temporary directory that is echoed at the end so you
can poke at the intermediate manifests.
"""

import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from rovi.datamodel import ImageRecord, read_manifest, write_manifest
from rovi.mockserver import serve_mocks
from rovi.orchestrator import STAGES, PipelineRunner, config_from_dict

CAPTIONS = [
    "a chocolate cake on a wooden chair",
    "stone bridge over a quiet canal",
    "red bicycle leaning on a brick wall",
    "a cockatoo perched near a green lamp",
    "glass vase with dried flowers",
    "striped cat asleep on a leather sofa",
]


def synth_image(seed, size=(1280, 1100)):
    rng = np.random.default_rng(seed)
    arr = np.full((size[1], size[0], 3), rng.integers(0, 256, 3), dtype=np.uint8)
    for _ in range(8):
        x1, x2 = sorted(int(v) for v in rng.integers(0, size[0], 2))
        y1, y2 = sorted(int(v) for v in rng.integers(0, size[1], 2))
        if x2 > x1 and y2 > y1:
            arr[y1:y2, x1:x2] = rng.integers(0, 256, 3)
    return Image.fromarray(arr)


def main():
    root = Path(tempfile.mkdtemp(prefix="rovi_demo_"))
    print(f"working in {root}")

    records = []
    for i, caption in enumerate(CAPTIONS):
        path = root / f"demo_{i}.png"
        synth_image(200 + i).save(path)
        records.append(
            ImageRecord(id=f"demo_{i}", uri=str(path), width=1280, height=1100,
                        aesthetic=6.0 + 0.1 * i, web_caption=caption)
        )
    manifest = root / "input.jsonl"
    write_manifest(records, manifest)

    service = serve_mocks(root / "fixtures", fallback="template")
    print(f"mock backends listening on {service.base_url}")
    try:
        cfg = config_from_dict({
            "input_manifest": str(manifest),
            "workdir": str(root / "workdir"),
            "seed": 0,
            "workers": 4,
            "backends": {
                "vlm": {"kind": "chat", "endpoint": service.url("/chat"), "model_name": "mock-vlm"},
                "llm": {"kind": "chat", "endpoint": service.url("/chat"), "model_name": "mock-llm"},
                "verifier": {"kind": "chat", "endpoint": service.url("/chat"),
                             "model_name": "mock-verifier"},
            },
            "detectors": [
                {"id": name, "endpoint": service.url(f"/detect/{name}"), "threshold": 0.2}
                for name in ("gd", "yw", "ow", "od")
            ],
        })
        runner = PipelineRunner(cfg)
        for stage in STAGES:
            metrics = runner.run_stage(stage)
            print(f"stage {stage:<10} processed={metrics['processed']:<3} "
                  f"failed={metrics['failed']:<2} wall={metrics['wall_time']:.2f}s")

        print("\nfinal records:")
        for record in read_manifest(runner.manifest_path("finalize")):
            cats = ", ".join((record.categories.merged if record.categories else [])[:6])
            print(f"  {record.id}: {len(record.instances or [])} verified boxes "
                  f"(categories: {cats}, ...)")
            for inst in (record.instances or [])[:3]:
                x1, y1, x2, y2 = inst.det.box
                print(f"    [{x1:6.1f} {y1:6.1f} {x2:6.1f} {y2:6.1f}] "
                      f"{inst.det.category!r} via {inst.det.detector} "
                      f"layer={inst.layer} p_yes={inst.p_yes:.2f}")
    finally:
        service.close()
    print(f"\nintermediate manifests kept under {root / 'workdir'}")


if __name__ == "__main__":
    main()
