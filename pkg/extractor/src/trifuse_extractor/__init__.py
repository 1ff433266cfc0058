"""Offline extraction adapter for trifuse feature files.

Turns a CSV manifest of (id, text, image path, label) rows into the
binary feature format the trifuse trainer reads, running one encoder
backend per channel role. See ``adapter`` for the channel conventions
and ``encoders`` for the backend families.
"""

from .adapter import (
    AdapterFormatError,
    ExtractionReport,
    ExtractionSpec,
    ManifestRow,
    RecordError,
    build_dataset,
    extract_image,
    extract_pair,
    extract_text,
    fit_block,
    read_manifest,
)
from .encoders import (
    BACKENDS,
    DUMMY_TEXT,
    ZERO_IMAGE,
    AdapterDependencyError,
    HashedEncoder,
    PretrainedEncoder,
    load_backend,
)

__version__ = "0.1.0"

__all__ = [
    "AdapterDependencyError",
    "AdapterFormatError",
    "BACKENDS",
    "DUMMY_TEXT",
    "ExtractionReport",
    "ExtractionSpec",
    "HashedEncoder",
    "ManifestRow",
    "PretrainedEncoder",
    "RecordError",
    "ZERO_IMAGE",
    "build_dataset",
    "extract_image",
    "extract_pair",
    "extract_text",
    "fit_block",
    "load_backend",
    "read_manifest",
    "__version__",
]
