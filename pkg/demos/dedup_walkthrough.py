"""Perceptual-hash deduplication on images with controlled perturbations.

Builds one base image plus slightly edited copies (re-encoded, dimmed,
downscaled) and one unrelated image, then shows the 64-bit hashes, pairwise
Hamming distances, and which records the dedup step keeps.
"""

import io

import numpy as np
from PIL import Image, ImageEnhance

from rovi.curation import dedup, hamming, phash64
from rovi.datamodel import ImageRecord


def synth_image(seed, size=(1280, 1100)):
    rng = np.random.default_rng(seed)
    arr = np.full((size[1], size[0], 3), rng.integers(0, 256, 3), dtype=np.uint8)
    for _ in range(8):
        x1, x2 = sorted(int(v) for v in rng.integers(0, size[0], 2))
        y1, y2 = sorted(int(v) for v in rng.integers(0, size[1], 2))
        if x2 > x1 and y2 > y1:
            arr[y1:y2, x1:x2] = rng.integers(0, 256, 3)
    return Image.fromarray(arr)


def jpeg_roundtrip(img, quality=60):
    buf = io.BytesIO()
    img.save(buf, format="JPEG", quality=quality)
    return Image.open(io.BytesIO(buf.getvalue()))


def main():
    base = synth_image(42)
    variants = {
        "original": base,
        "jpeg_q60": jpeg_roundtrip(base),
        "dimmed": ImageEnhance.Brightness(base).enhance(0.85),
        "half_size": base.resize((base.width // 2, base.height // 2)),
        "unrelated": synth_image(43),
    }

    hashes = {name: phash64(img) for name, img in variants.items()}
    print("hashes:")
    for name, h in hashes.items():
        print(f"  {name:<10} {h:016x}")

    print("\npairwise Hamming distances:")
    names = list(hashes)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            print(f"  {a:<10} vs {b:<10} {hamming(hashes[a], hashes[b]):3d}")

    records = [
        ImageRecord(id=name, uri=f"file:///{name}.png", width=1280, height=1100,
                    aesthetic=6.0 + 0.1 * i, phash=h)
        for i, (name, h) in enumerate(hashes.items())
    ]
    kept, clusters = dedup(records, max_hamming=10)
    print(f"\nkept after dedup (max Hamming 10): {[r.id for r in kept]}")
    for dup, rep in clusters.items():
        print(f"  {dup} folded into {rep}")


if __name__ == "__main__":
    main()
