"""Shared fixtures: synthetic images, mock model services, pipeline configs."""

import numpy as np
import pytest
import yaml
from PIL import Image

from rovi.datamodel import ImageRecord, write_manifest
from rovi.mockserver import serve_mocks

DETECTOR_NAMES = ["gd", "yw", "ow", "od"]


def synth_image(seed: int, size=(1280, 1100)) -> Image.Image:
    """Deterministic test image: colored rectangles on a flat background."""
    rng = np.random.default_rng(seed)
    arr = np.full((size[1], size[0], 3), rng.integers(0, 256, 3), dtype=np.uint8)
    for _ in range(8):
        x1, x2 = sorted(int(v) for v in rng.integers(0, size[0], 2))
        y1, y2 = sorted(int(v) for v in rng.integers(0, size[1], 2))
        if x2 > x1 and y2 > y1:
            arr[y1:y2, x1:x2] = rng.integers(0, 256, 3)
    return Image.fromarray(arr)


@pytest.fixture(scope="session")
def mock_service(tmp_path_factory):
    service = serve_mocks(tmp_path_factory.mktemp("mock_fixtures"), fallback="template")
    yield service
    service.close()


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """20 synthetic images plus an input manifest; shared across tests."""
    root = tmp_path_factory.mktemp("corpus")
    captions = [
        "Gypsy caravan with a cockatoo",
        "a chocolate cake on a wooden chair",
        "stone bridge at dawn",
        "",
        "red bicycle against a brick wall",
    ]
    records = []
    for i in range(20):
        if i == 19:
            # pixel-identical duplicate of image 0 with a lower aesthetic score,
            # so deduplication must drop it and keep image 0
            seed, size, aesthetic = 100, (1280, 1100), 5.76
        else:
            seed = 100 + i
            size = (1280 + 16 * (i % 5), 1100 + 8 * (i % 3))
            aesthetic = 5.8 + 0.1 * (i % 10)
        img = synth_image(seed, size=size)
        path = root / f"img_{i:02d}.png"
        img.save(path)
        records.append(
            ImageRecord(
                id=f"img_{i:02d}",
                uri=str(path),
                width=img.width,
                height=img.height,
                aesthetic=aesthetic,
                web_caption=captions[i % len(captions)],
            )
        )
    manifest = root / "input.jsonl"
    write_manifest(records, manifest)
    return {"root": root, "manifest": manifest, "records": records}


def make_config(path, input_manifest, workdir, service, seed=0, workers=4, **extra):
    """Write a pipeline YAML config pointing every backend at the mock service."""
    data = {
        "input_manifest": str(input_manifest),
        "workdir": str(workdir),
        "seed": seed,
        "workers": workers,
        "backends": {
            "vlm": {"kind": "chat", "endpoint": service.url("/chat"), "model_name": "mock-vlm"},
            "llm": {"kind": "chat", "endpoint": service.url("/chat"), "model_name": "mock-llm"},
            "verifier": {"kind": "chat", "endpoint": service.url("/chat"), "model_name": "mock-verifier"},
        },
        "detectors": [
            {"id": name, "endpoint": service.url(f"/detect/{name}"), "threshold": 0.2}
            for name in DETECTOR_NAMES
        ],
    }
    data.update(extra)
    path.write_text(yaml.safe_dump(data))
    return path
