"""Open-vocabulary, instance-grounded annotation pipeline.

Converts a manifest of (image, web caption) records into verified
per-instance box annotations: curate -> describe -> summarize -> detect ->
fuse -> resample -> cross-check -> finalize.  All model inference is
delegated to external services; deterministic mocks make the whole pipeline
testable offline.
"""

from .datamodel import (
    CategorySet,
    DetBox,
    ImageRecord,
    Instance,
    ManifestError,
    read_manifest,
    record_digest,
    write_manifest,
)

__all__ = [
    "CategorySet",
    "DetBox",
    "ImageRecord",
    "Instance",
    "ManifestError",
    "read_manifest",
    "record_digest",
    "write_manifest",
]

__version__ = "0.1.0"
