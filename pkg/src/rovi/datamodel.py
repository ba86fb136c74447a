"""Record types, the JSONL manifest format, and digests used for resumability.

Manifests are append-only JSONL: one record per line in canonical JSON
(sorted keys, no insignificant whitespace, UTF-8), terminated by a line
``{"__end__": true, "count": N}``.  A missing terminator marks a crashed
write.  Absent fields are omitted, never null, so stage progression is
detectable by field presence.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, Optional


class ManifestError(ValueError):
    """Raised for malformed manifest lines or record invariant violations."""


INSTANCE_STATUSES = ("candidate", "resampled", "verified", "rejected", "indeterminate")


def canonical_json(obj: Any) -> str:
    """Serialize to the canonical form used for manifests and digests."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass
class CategorySet:
    """Flat detector input: pass-1 phrases, pass-2 terms, and their merge."""

    phrases: list[str] = field(default_factory=list)
    terms: list[str] = field(default_factory=list)
    merged: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"phrases": self.phrases, "terms": self.terms, "merged": self.merged}

    @classmethod
    def from_json(cls, obj: dict) -> "CategorySet":
        return cls(
            phrases=list(obj.get("phrases", [])),
            terms=list(obj.get("terms", [])),
            merged=list(obj.get("merged", [])),
        )


@dataclass
class DetBox:
    """A single detection: absolute-pixel box, category, confidence, origin."""

    box: tuple[float, float, float, float]
    category: str
    score: float
    detector: str

    def to_json(self) -> dict:
        return {
            "box": list(self.box),
            "category": self.category,
            "score": self.score,
            "detector": self.detector,
        }


@dataclass
class Instance:
    """A surviving annotation with resampling / cross-check provenance."""

    det: DetBox
    layer: Optional[int] = None
    p_yes: Optional[float] = None
    p_no: Optional[float] = None
    status: str = "candidate"

    def to_json(self) -> dict:
        obj = self.det.to_json()
        if self.layer is not None:
            obj["layer"] = self.layer
        if self.p_yes is not None:
            obj["p_yes"] = self.p_yes
        if self.p_no is not None:
            obj["p_no"] = self.p_no
        obj["status"] = self.status
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "Instance":
        box = obj["box"]
        det = DetBox(
            box=(float(box[0]), float(box[1]), float(box[2]), float(box[3])),
            category=obj["category"],
            score=float(obj["score"]),
            detector=obj["detector"],
        )
        return cls(
            det=det,
            layer=obj.get("layer"),
            p_yes=obj.get("p_yes"),
            p_no=obj.get("p_no"),
            status=obj.get("status", "candidate"),
        )


@dataclass
class ImageRecord:
    """One source image and its stage-by-stage derived fields."""

    id: str
    uri: str
    width: Optional[int] = None
    height: Optional[int] = None
    aesthetic: Optional[float] = None
    web_caption: str = ""
    phash: Optional[int] = None  # 64-bit, serialized as 16 hex chars
    description: Optional[str] = None
    categories: Optional[CategorySet] = None
    instances: Optional[list[Instance]] = None
    failed: Optional[dict] = None  # {"stage": ..., "reason": ...}, extension field

    def to_json(self) -> dict:
        obj: dict[str, Any] = {"id": self.id, "uri": self.uri}
        if self.width is not None:
            obj["width"] = self.width
        if self.height is not None:
            obj["height"] = self.height
        if self.aesthetic is not None:
            obj["aesthetic"] = self.aesthetic
        obj["web_caption"] = self.web_caption
        if self.phash is not None:
            obj["phash"] = format(self.phash, "016x")
        if self.description is not None:
            obj["description"] = self.description
        if self.categories is not None:
            obj["categories"] = self.categories.to_json()
        if self.instances is not None:
            obj["instances"] = [inst.to_json() for inst in self.instances]
        if self.failed is not None:
            obj["failed"] = self.failed
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "ImageRecord":
        phash = obj.get("phash")
        return cls(
            id=obj["id"],
            uri=obj["uri"],
            width=obj.get("width"),
            height=obj.get("height"),
            aesthetic=obj.get("aesthetic"),
            web_caption=obj.get("web_caption", ""),
            phash=int(phash, 16) if phash is not None else None,
            description=obj.get("description"),
            categories=CategorySet.from_json(obj["categories"]) if "categories" in obj else None,
            instances=[Instance.from_json(i) for i in obj["instances"]] if "instances" in obj else None,
            failed=obj.get("failed"),
        )


def _dedup_lower(items: Iterable[str]) -> list[str]:
    seen: set[str] = set()
    out: list[str] = []
    for item in items:
        key = item.lower()
        if key and key not in seen:
            seen.add(key)
            out.append(key)
    return out


def validate_record(record: ImageRecord) -> None:
    """Check record invariants; raise ManifestError naming the offending id."""
    rid = record.id
    if not rid:
        raise ManifestError("record with empty id")
    if record.width is not None and record.width < 1:
        raise ManifestError(f"record {rid!r}: width must be >= 1")
    if record.height is not None and record.height < 1:
        raise ManifestError(f"record {rid!r}: height must be >= 1")
    if record.phash is not None and not 0 <= record.phash < 2**64:
        raise ManifestError(f"record {rid!r}: phash out of 64-bit range")
    cats = record.categories
    if cats is not None:
        expected = _dedup_lower(cats.phrases + cats.terms)
        if cats.merged != expected[: len(cats.merged)]:
            raise ManifestError(f"record {rid!r}: merged categories inconsistent with phrases+terms")
    if record.instances is not None:
        for inst in record.instances:
            x1, y1, x2, y2 = inst.det.box
            if not all(math.isfinite(v) for v in (x1, y1, x2, y2)):
                raise ManifestError(f"record {rid!r}: non-finite box coordinates")
            if not (x1 < x2 and y1 < y2):
                raise ManifestError(f"record {rid!r}: degenerate box {inst.det.box}")
            if record.width is not None and record.height is not None:
                if x1 < 0 or y1 < 0 or x2 > record.width or y2 > record.height:
                    raise ManifestError(f"record {rid!r}: box outside image bounds")
            if not 0.0 <= inst.det.score <= 1.0:
                raise ManifestError(f"record {rid!r}: score outside [0,1]")
            if inst.status not in INSTANCE_STATUSES:
                raise ManifestError(f"record {rid!r}: unknown instance status {inst.status!r}")
            if inst.p_yes is not None and inst.p_no is not None and inst.p_yes + inst.p_no > 1.0 + 1e-9:
                raise ManifestError(f"record {rid!r}: p_yes + p_no > 1")
            if cats is not None and inst.det.category not in cats.merged:
                raise ManifestError(f"record {rid!r}: instance category {inst.det.category!r} not in merged set")


def write_manifest(records: Iterable[ImageRecord], path) -> int:
    """Write records as canonical JSONL plus a terminator line; return the count."""
    count = 0
    seen_ids: set[str] = set()
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            validate_record(record)
            if record.id in seen_ids:
                raise ManifestError(f"duplicate record id {record.id!r}")
            seen_ids.add(record.id)
            fh.write(canonical_json(record.to_json()))
            fh.write("\n")
            count += 1
        fh.write(canonical_json({"__end__": True, "count": count}))
        fh.write("\n")
    return count


def read_manifest(path, require_terminator: bool = True) -> Iterator[ImageRecord]:
    """Yield records in file order, validating invariants per record.

    Malformed lines raise ManifestError carrying the line number; invariant
    violations carry the record id.  With ``require_terminator`` the stream
    must end with a matching terminator line (a complete manifest).
    """
    count = 0
    terminated = False
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            if terminated:
                raise ManifestError(f"line {lineno}: content after terminator")
            try:
                obj = json.loads(stripped)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
            if obj.get("__end__"):
                if require_terminator and obj.get("count") != count:
                    raise ManifestError(
                        f"line {lineno}: terminator count {obj.get('count')} != {count} records"
                    )
                terminated = True
                continue
            try:
                record = ImageRecord.from_json(obj)
            except (KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"line {lineno}: bad record ({exc})") from exc
            validate_record(record)
            count += 1
            yield record
    if require_terminator and not terminated:
        raise ManifestError(f"{path}: missing terminator line (incomplete manifest)")


def record_digest(record: ImageRecord, stage_config: Any) -> str:
    """128-bit digest of (record contents, stage config), as 32 hex chars.

    Stable across runs and platforms; changes whenever any record field or
    any stage config value changes.
    """
    h = hashlib.blake2b(digest_size=16)
    h.update(canonical_json(record.to_json()).encode("utf-8"))
    h.update(b"\x00")
    h.update(canonical_json(stage_config).encode("utf-8"))
    return h.hexdigest()
