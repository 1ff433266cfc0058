"""Manifest-to-feature-file extraction.

The adapter reads a CSV manifest (columns id, text, image_path, label),
runs one encoder backend per channel role, and writes a feature file the
trifuse loader accepts unchanged:

  text channel     = [text-encoder tokens ; joint encoder fed the
                      all-zeros image] stacked along the token axis
  image channel    = [image-encoder tokens ; joint encoder fed the fixed
                      dummy text] stacked along the token axis
  imgtext channel  = joint encoder on the real (image, text) pair

Blocks are fitted to the requested (tokens, width) by parameter-free
average pooling: the sequence is tiled cyclically if too short, then
split into even contiguous chunks and averaged, on each axis. The first
(specific-encoder) half of a stacked channel gets the extra token when
the target length is odd. Per-record failures are collected in the
report, never silently dropped.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from trifuse.data import DatasetHeader, FeatureRecord, file_sha256, write_dataset, write_sidecar
from trifuse.fusion import ModalityFeatures
from trifuse.model import ModelDims

from .encoders import DUMMY_TEXT, ZERO_IMAGE

__all__ = [
    "AdapterFormatError",
    "ManifestRow",
    "read_manifest",
    "fit_block",
    "extract_text",
    "extract_image",
    "extract_pair",
    "ExtractionSpec",
    "RecordError",
    "ExtractionReport",
    "build_dataset",
]

logger = logging.getLogger("trifuse_extractor")

_REQUIRED_COLUMNS = ("id", "text", "image_path", "label")


class AdapterFormatError(ValueError):
    """The manifest itself (not one record) is unusable."""


@dataclass(frozen=True)
class ManifestRow:
    row_index: int
    id: int
    text: str
    image_path: str
    label: int


def read_manifest(path) -> list[ManifestRow]:
    """Parse the input CSV; structural problems raise, row content is
    validated later so one bad row cannot hide the rest."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise AdapterFormatError(f"{path}: empty manifest")
        missing = [c for c in _REQUIRED_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise AdapterFormatError(f"{path}: missing columns {', '.join(missing)}")
        rows = []
        for index, raw in enumerate(reader):
            rows.append(ManifestRow(
                row_index=index,
                id=_parse_int(raw["id"], "id", index),
                text=raw["text"] if raw["text"] is not None else "",
                image_path=raw["image_path"] or "",
                label=_parse_int(raw["label"], "label", index),
            ))
    return rows


def _parse_int(value, name: str, index: int) -> int:
    try:
        return int(value)
    except (TypeError, ValueError):
        raise AdapterFormatError(f"row {index}: {name} {value!r} is not an integer") from None


def _pool_axis(block: np.ndarray, target: int, axis: int) -> np.ndarray:
    size = block.shape[axis]
    if size < target:
        reps = [1, 1]
        reps[axis] = -(-target // size)
        block = np.tile(block, reps)
        block = block.take(range(target), axis=axis)
    chunks = np.array_split(block, target, axis=axis)
    return np.stack([chunk.mean(axis=axis) for chunk in chunks], axis=axis)


def fit_block(block: np.ndarray, tokens: int, width: int) -> np.ndarray:
    """Average-pool a [tokens, width] block to the requested shape.

    Sequences shorter than the target are tiled cyclically first, so the
    mapping stays deterministic and parameter-free in both directions.
    """
    block = np.asarray(block, dtype=np.float32)
    if block.ndim != 2:
        raise ValueError(f"encoder blocks must be [tokens, width], got {block.shape}")
    if tokens < 1 or width < 1:
        raise ValueError("target dims must be positive")
    out = _pool_axis(_pool_axis(block, width, 1), tokens, 0)
    return np.ascontiguousarray(out, dtype=np.float32)


def _halves(total: int) -> tuple[int, int]:
    first = (total + 1) // 2
    return first, total - first


def extract_text(backend, text: str, tokens: int, width: int) -> np.ndarray:
    """Text channel: text-encoder tokens stacked over the joint encoder
    run with the all-zeros image, so the block never depends on any real
    image content."""
    if not text:
        raise ValueError("text must be non-empty")
    if tokens < 2:
        raise ValueError("text channel needs at least 2 tokens to hold both parts")
    first, second = _halves(tokens)
    part1 = fit_block(backend.encode_text(text), first, width)
    part2 = fit_block(backend.encode_multimodal(ZERO_IMAGE, text), second, width)
    return np.concatenate([part1, part2], axis=0)


def extract_image(backend, image: bytes, tokens: int, width: int) -> np.ndarray:
    """Image channel: image-encoder tokens stacked over the joint
    encoder run with the fixed dummy text."""
    if tokens < 2:
        raise ValueError("image channel needs at least 2 tokens to hold both parts")
    first, second = _halves(tokens)
    part1 = fit_block(backend.encode_image(image), first, width)
    part2 = fit_block(backend.encode_multimodal(image, DUMMY_TEXT), second, width)
    return np.concatenate([part1, part2], axis=0)


def extract_pair(backend, image: bytes, text: str, tokens: int, width: int) -> np.ndarray:
    """Joint channel: the joint encoder on the real image and text."""
    if not text:
        raise ValueError("text must be non-empty")
    return fit_block(backend.encode_multimodal(image, text), tokens, width)


@dataclass(frozen=True)
class ExtractionSpec:
    manifest_path: str
    out_path: str
    dims: ModelDims
    backend: object

    def __post_init__(self):
        d = self.dims
        widths = (d.l_text, d.d_text, d.l_image, d.d_image, d.l_imgtext, d.d_imgtext)
        if any(v < 1 for v in widths):
            raise ValueError(f"all dims must be positive, got {d}")
        if d.l_text < 2 or d.l_image < 2:
            raise ValueError("stacked channels need at least 2 tokens (text and image)")


@dataclass(frozen=True)
class RecordError:
    row_index: int
    record_id: int | None
    message: str


@dataclass
class ExtractionReport:
    out_path: str
    sidecar_path: str
    requested: int
    written: int
    errors: list[RecordError] = field(default_factory=list)


def _extract_row(spec: ExtractionSpec, row: ManifestRow) -> FeatureRecord:
    if row.id < 0:
        raise ValueError(f"id {row.id} must be non-negative")
    if row.label not in (0, 1):
        raise ValueError(f"label {row.label} must be 0 (real) or 1 (fake)")
    with open(row.image_path, "rb") as fh:
        image = fh.read()
    d = spec.dims
    features = ModalityFeatures(
        text=extract_text(spec.backend, row.text, d.l_text, d.d_text),
        image=extract_image(spec.backend, image, d.l_image, d.d_image),
        imgtext=extract_pair(spec.backend, image, row.text, d.l_imgtext, d.d_imgtext),
    )
    return FeatureRecord(id=row.id, label=row.label, features=features)


def build_dataset(spec: ExtractionSpec) -> ExtractionReport:
    """Extract every manifest row and write the feature file.

    Rows that fail (unreadable image, empty text, bad id or label,
    duplicate id) become error entries; the remaining records are still
    written. The sidecar records the encoder identity, the dummy-text
    constant, and the alignment scheme for auditability.
    """
    rows = read_manifest(spec.manifest_path)
    records: list[FeatureRecord] = []
    errors: list[RecordError] = []
    seen_ids: set[int] = set()
    for row in rows:
        try:
            if row.id in seen_ids:
                raise ValueError(f"duplicate id {row.id}")
            record = _extract_row(spec, row)
        except Exception as exc:
            errors.append(RecordError(row.row_index, row.id, f"{type(exc).__name__}: {exc}"))
            logger.error("row %d (id %s): %s", row.row_index, row.id, exc)
            continue
        seen_ids.add(row.id)
        records.append(record)

    d = spec.dims
    header = DatasetHeader(len(records), d.l_text, d.d_text, d.l_image, d.d_image, d.l_imgtext, d.d_imgtext)
    write_dataset(header, records, spec.out_path)
    sidecar = write_sidecar(spec.out_path, {
        "source": "extractor",
        "manifest": {"path": str(spec.manifest_path), "sha256": file_sha256(spec.manifest_path)},
        "encoder": spec.backend.version,
        "features": "token-level final-layer outputs",
        "alignment": "cyclic tile if short, then contiguous-chunk average pooling per axis",
        "stacking": "text = [text-encoder; joint(zero image)], image = [image-encoder; joint(dummy text)]",
        "dummy_text": DUMMY_TEXT,
        "extracted_utc": datetime.now(timezone.utc).isoformat(),
        "requested": len(rows),
        "written": len(records),
        "errors": [
            {"row": e.row_index, "id": e.record_id, "message": e.message} for e in errors
        ],
    })
    return ExtractionReport(
        out_path=str(spec.out_path),
        sidecar_path=sidecar,
        requested=len(rows),
        written=len(records),
        errors=errors,
    )
