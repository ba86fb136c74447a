"""Stage DAG execution with resumability, configuration, and image ingestion.

Stage order is fixed: curate -> describe -> summarize -> detect -> resample
-> crosscheck -> finalize (description and category summarization strictly
precede detection).  Each stage writes an append-only partial manifest and
a status sidecar keyed by (record digest, stage config digest), so a rerun
processes only records not already marked done and a crashed run resumes to
an identical output.  Records are independent; one bad image never aborts a
run.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import io
import json
import logging
import os
import threading
import time
import urllib.parse
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import requests
import yaml
from PIL import Image

from . import crosscheck as cc
from . import recaption as rc
from .curation import CurationConfig, dedup, passes_filters, phash64
from .datamodel import (
    ImageRecord,
    Instance,
    ManifestError,
    canonical_json,
    read_manifest,
    record_digest,
    validate_record,
    write_manifest,
)
from .detect import DEFAULT_NMS_THRESHOLD, DetectError, DetectorSpec, detect_all, fuse
from .geometry import iou
from .modelgateway import BackendSpec, Gateway, GatewayError
from .resample import ResampleConfig, resample_image

log = logging.getLogger(__name__)

STAGES = ["curate", "describe", "summarize", "detect", "resample", "crosscheck", "finalize"]


class PipelineError(RuntimeError):
    pass


class StaleStateError(PipelineError):
    """Existing partial output was produced under a different config/input."""


@dataclass
class PipelineConfig:
    input_manifest: str
    workdir: str
    seed: int = 0
    workers: int = 4
    backends: dict = field(default_factory=dict)  # id -> BackendSpec
    detectors: list = field(default_factory=list)  # DetectorSpec
    nms_threshold: float = DEFAULT_NMS_THRESHOLD
    curation: CurationConfig = field(default_factory=CurationConfig)
    recaption: rc.RecaptionConfig = field(default_factory=rc.RecaptionConfig)
    templates: rc.PromptTemplates = field(default_factory=rc.PromptTemplates)
    resample: ResampleConfig = field(default_factory=ResampleConfig)
    crosscheck: cc.CrosscheckConfig = field(default_factory=cc.CrosscheckConfig)


def _apply_dotted(data: dict, dotted: str, value):
    keys = dotted.split(".")
    node = data
    for key in keys[:-1]:
        node = node.setdefault(key, {})
    node[keys[-1]] = yaml.safe_load(value) if isinstance(value, str) else value


def _apply_env(data: dict) -> None:
    if "ROVI_WORKDIR" in os.environ:
        data["workdir"] = os.environ["ROVI_WORKDIR"]
    if "ROVI_SEED" in os.environ:
        data["seed"] = int(os.environ["ROVI_SEED"])
    for bid in list(data.get("backends", {})):
        url = os.environ.get(f"ROVI_BACKEND_{bid.upper()}_URL")
        if url:
            data["backends"][bid]["endpoint"] = url
    for det in data.get("detectors", []):
        url = os.environ.get(f"ROVI_BACKEND_{det['id'].upper()}_URL")
        if url:
            det["endpoint"] = url


def config_from_dict(data: dict) -> PipelineConfig:
    data = json.loads(json.dumps(data))  # deep copy
    _apply_env(data)
    backends = {
        bid: BackendSpec(**spec) for bid, spec in data.get("backends", {}).items()
    }
    detectors = [DetectorSpec(**d) for d in data.get("detectors", [])]
    recaption_raw = dict(data.get("recaption", {}))
    templates_dir = recaption_raw.pop("templates_dir", None)
    templates = (
        rc.PromptTemplates.from_files(templates_dir) if templates_dir else rc.PromptTemplates()
    )
    seed = int(data.get("seed", 0))
    resample_raw = dict(data.get("resample", {}))
    resample_raw.setdefault("seed", seed)
    crosscheck_raw = dict(data.get("crosscheck", {}))
    for key in ("yes_variants", "no_variants"):
        if key in crosscheck_raw:
            crosscheck_raw[key] = frozenset(crosscheck_raw[key])
    return PipelineConfig(
        input_manifest=data["input_manifest"],
        workdir=data["workdir"],
        seed=seed,
        workers=int(data.get("workers", 4)),
        backends=backends,
        detectors=detectors,
        nms_threshold=float(data.get("detect", {}).get("nms_threshold", DEFAULT_NMS_THRESHOLD)),
        curation=CurationConfig(**data.get("curation", {})),
        recaption=rc.RecaptionConfig(**recaption_raw),
        templates=templates,
        resample=ResampleConfig(**resample_raw),
        crosscheck=cc.CrosscheckConfig(**crosscheck_raw),
    )


def load_config(path, overrides: Optional[list[str]] = None) -> PipelineConfig:
    """Load YAML config; ``overrides`` are dotted-path assignments like a.b=1."""
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    for item in overrides or []:
        dotted, _, value = item.partition("=")
        _apply_dotted(data, dotted.strip(), value.strip())
    return config_from_dict(data)


@dataclass
class FetchedImage:
    data: bytes
    image: Image.Image
    digest: str
    width: int
    height: int


def fetch_image(uri: str, cache_dir) -> FetchedImage:
    """Fetch and decode one image; http(s) bytes are cached by URI hash."""
    cache_dir = Path(cache_dir)
    parsed = urllib.parse.urlparse(uri)
    if parsed.scheme in ("http", "https"):
        cache_dir.mkdir(parents=True, exist_ok=True)
        cached = cache_dir / (hashlib.sha256(uri.encode("utf-8")).hexdigest() + ".bin")
        if cached.exists():
            data = cached.read_bytes()
        else:
            resp = requests.get(uri, timeout=120)
            if resp.status_code != 200:
                raise PipelineError(f"fetch failed: HTTP {resp.status_code} for {uri}")
            data = resp.content
            cached.write_bytes(data)
    else:
        path = urllib.parse.unquote(parsed.path) if parsed.scheme == "file" else uri
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise PipelineError(f"fetch failed: {exc}") from exc
    try:
        image = Image.open(io.BytesIO(data))
        image.load()
    except Exception as exc:
        raise PipelineError(f"decode failed for {uri}: {exc}") from exc
    digest = hashlib.sha256(data).hexdigest()
    return FetchedImage(data=data, image=image, digest=digest, width=image.width, height=image.height)


def _config_digest(stage_config) -> str:
    return hashlib.blake2b(canonical_json(stage_config).encode("utf-8"), digest_size=16).hexdigest()


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _jsonable(obj) -> dict:
    out = asdict(obj)
    for key, value in out.items():
        if isinstance(value, frozenset):
            out[key] = sorted(value)
    return out


class PipelineRunner:
    """Executes the stage DAG for one configuration."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.workdir = Path(cfg.workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.image_cache = self.workdir / "images"
        backends = dict(cfg.backends)
        for spec in cfg.detectors:
            backends[spec.id] = BackendSpec(kind="detector", endpoint=spec.endpoint)
        self.gateway = Gateway(backends)

    # --- paths ---------------------------------------------------------

    def manifest_path(self, stage: str) -> Path:
        return self.workdir / f"{STAGES.index(stage):02d}_{stage}.jsonl"

    def input_path(self, stage: str) -> Path:
        idx = STAGES.index(stage)
        if idx == 0:
            return Path(self.cfg.input_manifest)
        return self.manifest_path(STAGES[idx - 1])

    # --- per-stage configuration digests -------------------------------

    def stage_config(self, stage: str) -> dict:
        cfg = self.cfg
        if stage == "curate":
            scorer = cfg.backends.get("scorer")
            return {
                "curation": asdict(cfg.curation),
                "scorer_model": scorer.model_name if scorer else None,
            }
        if stage == "describe":
            return {
                "template": cfg.templates.describe,
                "clauses": [
                    cfg.templates.style_prefix_instruction,
                    cfg.templates.no_speculation_clause,
                    cfg.templates.no_transcription_clause,
                ],
                "max_description_tokens": cfg.recaption.max_description_tokens,
                "negative_patterns": cfg.recaption.negative_patterns,
                "model": cfg.backends["vlm"].model_name,
            }
        if stage == "summarize":
            return {
                "templates": [cfg.templates.summarize_pass1, cfg.templates.summarize_pass2],
                "category_cap": cfg.recaption.category_cap,
                "max_category_words": cfg.recaption.max_category_words,
                "model": cfg.backends["llm"].model_name,
            }
        if stage == "detect":
            return {
                "detectors": [
                    {
                        "id": d.id,
                        "threshold": d.threshold,
                        "max_categories_per_call": d.max_categories_per_call,
                    }
                    for d in cfg.detectors
                ],
                "nms_threshold": cfg.nms_threshold,
            }
        if stage == "resample":
            return {"resample": asdict(cfg.resample)}
        if stage == "crosscheck":
            return {
                "crosscheck": _jsonable(cfg.crosscheck),
                "template": cfg.templates.verify,
                "model": cfg.backends["verifier"].model_name,
            }
        if stage == "finalize":
            return {}
        raise PipelineError(f"unknown stage {stage!r}")

    # --- per-record stage work -----------------------------------------

    def _fetch(self, record: ImageRecord) -> FetchedImage:
        return fetch_image(record.uri, self.image_cache)

    def _curate_record(self, record: ImageRecord) -> ImageRecord:
        fetched = self._fetch(record)
        if (record.width, record.height) != (fetched.width, fetched.height) and record.width:
            log.warning(
                "record %s: manifest claims %sx%s, file is %sx%s; corrected",
                record.id, record.width, record.height, fetched.width, fetched.height,
            )
        record = replace(record, width=fetched.width, height=fetched.height)
        if record.aesthetic is None and "scorer" in self.cfg.backends:
            record = replace(record, aesthetic=self.gateway.score(fetched.data, "scorer"))
        record = replace(record, phash=phash64(fetched.image))
        verdict = passes_filters(record, self.cfg.curation)
        if not verdict.passed:
            raise PipelineError(verdict.reason)
        return record

    def _describe_record(self, record: ImageRecord) -> ImageRecord:
        fetched = self._fetch(record)
        req = rc.build_describe_request(fetched.data, self.cfg.templates, self.cfg.recaption)
        resp = self.gateway.chat_complete(req, "vlm")
        return replace(
            record, description=rc.postprocess_description(resp.content, self.cfg.recaption)
        )

    def _summarize_record(self, record: ImageRecord) -> ImageRecord:
        pass1_req, pass2_builder = rc.build_summarize_requests(
            record.description or "", record.web_caption, self.cfg.templates
        )
        phrases = rc.parse_category_list(
            self.gateway.chat_complete(pass1_req, "llm").content, self.cfg.recaption
        )
        terms: list[str] = []
        if phrases:
            terms = rc.parse_category_list(
                self.gateway.chat_complete(pass2_builder(phrases), "llm").content,
                self.cfg.recaption,
            )
        return replace(record, categories=rc.merge_categories(phrases, terms, self.cfg.recaption))

    def _detect_record(self, record: ImageRecord) -> ImageRecord:
        fetched = self._fetch(record)
        boxes = detect_all(record, fetched.data, self.cfg.detectors, self.gateway)
        fused = fuse(boxes, self.cfg.nms_threshold)
        return replace(record, instances=[Instance(det=b) for b in fused])

    def _resample_record(self, record: ImageRecord) -> ImageRecord:
        instances = resample_image(
            record.instances or [], record.width, record.height, record.id, self.cfg.resample
        )
        return replace(record, instances=instances)

    def _crosscheck_record(self, record: ImageRecord) -> ImageRecord:
        fetched = self._fetch(record)
        out: list[Instance] = []
        for inst in record.instances or []:
            if inst.status != "resampled":
                out.append(inst)
                continue
            try:
                crop = cc.crop_region(fetched.image, inst.det.box, self.cfg.crosscheck)
            except cc.CrosscheckError:
                out.append(replace(inst, p_yes=0.0, p_no=0.0, status="indeterminate"))
                continue
            buf = io.BytesIO()
            crop.convert("RGB").save(buf, format="PNG")
            req = cc.build_verify_request(inst.det.category, buf.getvalue(), self.cfg.templates)
            resp = self.gateway.chat_complete(req, "verifier")
            alts = resp.alternatives[0] if resp.alternatives else []
            p_yes, p_no = cc.aggregate_yes_no(alts, self.cfg.crosscheck)
            status = cc.verdict(p_yes, p_no, self.cfg.crosscheck)
            out.append(replace(inst, p_yes=p_yes, p_no=p_no, status=status))
        return replace(record, instances=out)

    def _finalize_record(self, record: ImageRecord) -> ImageRecord:
        verified = [inst for inst in record.instances or [] if inst.status == "verified"]
        return replace(record, instances=verified)

    def _process(self, stage: str, record: ImageRecord) -> ImageRecord:
        worker = {
            "curate": self._curate_record,
            "describe": self._describe_record,
            "summarize": self._summarize_record,
            "detect": self._detect_record,
            "resample": self._resample_record,
            "crosscheck": self._crosscheck_record,
            "finalize": self._finalize_record,
        }[stage]
        try:
            return worker(record)
        except (PipelineError, GatewayError, DetectError, rc.RecaptionError) as exc:
            log.warning("record %s failed at %s: %s", record.id, stage, exc)
            return replace(record, failed={"stage": stage, "reason": str(exc)})

    def _batch_hook(self, stage: str, records: list[ImageRecord]) -> list[ImageRecord]:
        if stage == "curate":
            ok = [r for r in records if r.failed is None]
            _, clusters = dedup(ok, self.cfg.curation.max_hamming)
            out = []
            for r in records:
                if r.failed is None and r.id in clusters:
                    out.append(
                        replace(r, failed={"stage": stage, "reason": f"duplicate_of:{clusters[r.id]}"})
                    )
                else:
                    out.append(r)
            return out
        if stage == "finalize":
            return [r for r in records if r.failed is None]
        return records

    # --- stage execution with resume -----------------------------------

    def run_stage(self, stage: str, force: bool = False) -> dict:
        input_path = self.input_path(stage)
        if not input_path.exists():
            raise PipelineError(f"missing prerequisite manifest {input_path}")
        out_path = self.manifest_path(stage)
        partial_path = out_path.with_suffix(".partial.jsonl")
        sidecar_path = out_path.with_suffix(".status.jsonl")

        stage_cfg = self.stage_config(stage)
        config_digest = _config_digest(stage_cfg)
        input_digest = _file_digest(input_path)

        done: dict[str, str] = {}  # id -> record digest marked done
        if sidecar_path.exists():
            lines = sidecar_path.read_text(encoding="utf-8").splitlines()
            header = json.loads(lines[0]) if lines else {}
            if header.get("config_digest") != config_digest or header.get("input_digest") != input_digest:
                if not force:
                    raise StaleStateError(
                        f"stage {stage}: existing partial state was produced under a "
                        "different config or input; rerun with --force to discard"
                    )
                sidecar_path.unlink()
                partial_path.unlink(missing_ok=True)
            else:
                for line in lines[1:]:
                    entry = json.loads(line)
                    if entry.get("status") == "done":
                        done[entry["id"]] = entry["digest"]

        partial: dict[str, ImageRecord] = {}
        if partial_path.exists():
            for line in partial_path.read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                rec = ImageRecord.from_json(json.loads(line))
                partial[rec.id] = rec  # last occurrence wins

        records = list(read_manifest(input_path))
        to_process: list[tuple[int, ImageRecord, str]] = []
        results: dict[int, ImageRecord] = {}
        skipped = 0
        for idx, record in enumerate(records):
            digest = record_digest(record, stage_cfg)
            if done.get(record.id) == digest and record.id in partial:
                results[idx] = partial[record.id]
                skipped += 1
            else:
                to_process.append((idx, record, digest))

        start = time.monotonic()
        if not sidecar_path.exists():
            with open(sidecar_path, "w", encoding="utf-8") as fh:
                fh.write(json.dumps({"config_digest": config_digest, "input_digest": input_digest}) + "\n")

        append_lock = threading.Lock()

        def handle(item):
            idx, record, digest = item
            if record.failed is not None:
                out = record  # carried forward untouched
            else:
                out = self._process(stage, record)
            with append_lock:
                with open(partial_path, "a", encoding="utf-8") as fh:
                    fh.write(canonical_json(out.to_json()) + "\n")
                with open(sidecar_path, "a", encoding="utf-8") as fh:
                    if out.failed is None or record.failed is not None:
                        # passthrough of an upstream failure still counts as done
                        entry = {"id": record.id, "digest": digest, "status": "done"}
                    else:
                        entry = {"id": record.id, "digest": digest, "status": "failed",
                                 "reason": out.failed.get("reason")}
                    fh.write(json.dumps(entry) + "\n")
            return idx, out

        if to_process:
            with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, self.cfg.workers)) as pool:
                for idx, out in pool.map(handle, to_process):
                    results[idx] = out

        ordered = [results[i] for i in range(len(records))]
        final = self._batch_hook(stage, ordered)
        write_manifest(final, out_path)
        failed = sum(1 for r in final if r.failed is not None)
        metrics = {
            "stage": stage,
            "processed": len(to_process),
            "skipped": skipped,
            "failed": failed,
            "wall_time": time.monotonic() - start,
        }
        log.info("stage %(stage)s: processed=%(processed)d skipped=%(skipped)d "
                 "failed=%(failed)d wall=%(wall_time).2fs", metrics)
        return metrics

    def run(self, from_stage: str = "curate", to_stage: str = "finalize", force: bool = False) -> Path:
        i, j = STAGES.index(from_stage), STAGES.index(to_stage)
        if i > j:
            raise PipelineError(f"from_stage {from_stage} comes after to_stage {to_stage}")
        for stage in STAGES[i : j + 1]:
            self.run_stage(stage, force=force)
        return self.manifest_path(to_stage)


def validate_manifest(path, nms_threshold: float = DEFAULT_NMS_THRESHOLD,
                      layer_iou_max: float = 0.3) -> list[str]:
    """Collect invariant violations instead of stopping at the first one."""
    violations: list[str] = []
    seen_ids: set[str] = set()
    terminated = False
    count = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            try:
                obj = json.loads(stripped)
            except json.JSONDecodeError:
                violations.append(f"line {lineno}: malformed JSON")
                continue
            if obj.get("__end__"):
                terminated = True
                if obj.get("count") != count:
                    violations.append(f"line {lineno}: terminator count mismatch")
                continue
            try:
                record = ImageRecord.from_json(obj)
                validate_record(record)
            except (ManifestError, KeyError, TypeError, ValueError) as exc:
                violations.append(f"line {lineno}: {exc}")
                continue
            count += 1
            if record.id in seen_ids:
                violations.append(f"line {lineno}: duplicate id {record.id!r}")
            seen_ids.add(record.id)
            insts = record.instances or []
            by_cat: dict[str, list] = {}
            by_layer: dict[int, list] = {}
            for inst in insts:
                by_cat.setdefault(inst.det.category, []).append(inst)
                if inst.layer is not None and inst.status in ("resampled", "verified"):
                    by_layer.setdefault(inst.layer, []).append(inst)
            for cat, group in by_cat.items():
                for a in range(len(group)):
                    for b in range(a + 1, len(group)):
                        if iou(group[a].det.box, group[b].det.box) > nms_threshold:
                            violations.append(
                                f"record {record.id!r}: NMS violated for category {cat!r}"
                            )
            for layer, group in by_layer.items():
                for a in range(len(group)):
                    for b in range(a + 1, len(group)):
                        if iou(group[a].det.box, group[b].det.box) > layer_iou_max:
                            violations.append(
                                f"record {record.id!r}: layer {layer} overlap above {layer_iou_max}"
                            )
    if not terminated:
        violations.append("missing terminator line (incomplete manifest)")
    return violations
