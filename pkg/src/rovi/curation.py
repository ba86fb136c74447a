"""Admission filters and perceptual-hash deduplication.

Filters: aesthetic score >= 5.75, both sides >= 1024 px, and an oversize cap
of 6144 px on the longer edge / 4096 px on the shorter edge.  Near-duplicates
are clustered by 64-bit DCT pHash at Hamming distance <= 10 using pigeonhole
banding for candidate generation and union-find for transitive closure.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple, Optional

import numpy as np
from PIL import Image
from scipy.fft import dctn

from .datamodel import ImageRecord


class CurationError(ValueError):
    pass


@dataclass
class CurationConfig:
    min_aesthetic: float = 5.75
    min_side: int = 1024
    max_long_edge: int = 6144
    max_short_edge: int = 4096
    max_hamming: int = 10

    def __post_init__(self):
        if not self.min_side <= self.max_short_edge <= self.max_long_edge:
            raise CurationError("require min_side <= max_short_edge <= max_long_edge")
        if not 0 <= self.max_hamming <= 64:
            raise CurationError("max_hamming must be in [0, 64]")


class FilterVerdict(NamedTuple):
    passed: bool
    reason: Optional[str]  # resolution | oversize | aesthetic | unscored


def passes_filters(record: ImageRecord, cfg: CurationConfig) -> FilterVerdict:
    """Apply admission checks in order resolution -> oversize -> aesthetic."""
    w, h = record.width, record.height
    if w is None or h is None:
        raise CurationError(f"record {record.id!r}: dimensions missing")
    short, long = min(w, h), max(w, h)
    if short < cfg.min_side:
        return FilterVerdict(False, "resolution")
    if long > cfg.max_long_edge or short > cfg.max_short_edge:
        return FilterVerdict(False, "oversize")
    if record.aesthetic is None:
        return FilterVerdict(False, "unscored")
    if record.aesthetic < cfg.min_aesthetic:
        return FilterVerdict(False, "aesthetic")
    return FilterVerdict(True, None)


_LUMA = np.array([0.299, 0.587, 0.114])


def phash64(image: Image.Image) -> int:
    """64-bit DCT perceptual hash.

    Bilinear-resize the luma channel to 32x32, take the 2-D type-II DCT,
    keep the 8x8 lowest-frequency block, and threshold each AC coefficient
    against the median of the 63 retained AC coefficients (lower-middle
    element for even-length lists).  The DC slot bit is fixed to 0.
    """
    if image.mode in ("L", "F", "I"):
        luma = np.asarray(image, dtype=np.float64)
    else:
        rgb = np.asarray(image.convert("RGB"), dtype=np.float64)
        luma = rgb @ _LUMA
    small = Image.fromarray(luma.astype(np.float32), mode="F").resize((32, 32), Image.BILINEAR)
    coeffs = dctn(np.asarray(small, dtype=np.float64), type=2)
    block = coeffs[:8, :8].ravel()  # slot 0 is the DC term
    ac = np.sort(block[1:])
    median = ac[(len(ac) - 1) // 2]
    h = 0
    for i in range(1, 64):
        if block[i] > median:
            h |= 1 << (63 - i)
    return h


def hamming(a: int, b: int) -> int:
    """Bit count of a XOR b."""
    return (a ^ b).bit_count()


def _bands(max_hamming: int) -> list[tuple[int, int]]:
    """Split 64 bits into max_hamming+1 contiguous (shift, mask) bands."""
    n = max_hamming + 1
    base, extra = divmod(64, n)
    bands = []
    shift = 0
    for i in range(n):
        width = base + (1 if i < extra else 0)
        bands.append((shift, (1 << width) - 1))
        shift += width
    return bands


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def banding_candidates(hashes: list[int], max_hamming: int) -> set[tuple[int, int]]:
    """Candidate index pairs sharing at least one exact band.

    Any pair within Hamming distance max_hamming differs in at most
    max_hamming of the max_hamming+1 bands, so it shares one exactly.
    """
    pairs: set[tuple[int, int]] = set()
    for shift, mask in _bands(max_hamming):
        buckets: dict[int, list[int]] = {}
        for i, h in enumerate(hashes):
            buckets.setdefault((h >> shift) & mask, []).append(i)
        for members in buckets.values():
            for a in range(len(members)):
                for b in range(a + 1, len(members)):
                    pairs.add((members[a], members[b]))
    return pairs


def dedup(
    records: list[ImageRecord], max_hamming: int
) -> tuple[list[ImageRecord], dict[str, str]]:
    """Cluster records by transitive closure of hamming <= max_hamming.

    Keeps one representative per connected component: highest aesthetic,
    ties broken by lexicographically smallest id.  Returns the retained
    records in original order and a map from each dropped id to its
    representative id.
    """
    hashes = []
    for record in records:
        if record.phash is None:
            raise CurationError(f"record {record.id!r}: phash missing")
        hashes.append(record.phash)

    uf = _UnionFind(len(records))
    for a, b in banding_candidates(hashes, max_hamming):
        if hamming(hashes[a], hashes[b]) <= max_hamming:
            uf.union(a, b)

    components: dict[int, list[int]] = {}
    for i in range(len(records)):
        components.setdefault(uf.find(i), []).append(i)

    keep: set[int] = set()
    clusters: dict[str, str] = {}
    for members in components.values():
        rep = min(
            members,
            key=lambda i: (
                -(records[i].aesthetic if records[i].aesthetic is not None else float("-inf")),
                records[i].id,
            ),
        )
        keep.add(rep)
        for i in members:
            if i != rep:
                clusters[records[i].id] = records[rep].id

    retained = [records[i] for i in range(len(records)) if i in keep]
    return retained, clusters


def dedup_bruteforce(
    records: list[ImageRecord], max_hamming: int
) -> tuple[list[ImageRecord], dict[str, str]]:
    """O(n^2) transitive-closure oracle with the same representative rule."""
    uf = _UnionFind(len(records))
    for a in range(len(records)):
        for b in range(a + 1, len(records)):
            if hamming(records[a].phash, records[b].phash) <= max_hamming:
                uf.union(a, b)
    components: dict[int, list[int]] = {}
    for i in range(len(records)):
        components.setdefault(uf.find(i), []).append(i)
    keep: set[int] = set()
    clusters: dict[str, str] = {}
    for members in components.values():
        rep = min(
            members,
            key=lambda i: (
                -(records[i].aesthetic if records[i].aesthetic is not None else float("-inf")),
                records[i].id,
            ),
        )
        keep.add(rep)
        for i in members:
            if i != rep:
                clusters[records[i].id] = records[rep].id
    return [records[i] for i in range(len(records)) if i in keep], clusters
