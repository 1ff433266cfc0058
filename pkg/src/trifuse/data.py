"""Feature file format, synthetic data, splits, and batch iteration.

The on-disk format (TTBF) is little-endian and self-describing: a 44
byte header fixes the per-channel shapes, then fixed-size records follow
back to back. Writes go through a temp file and an atomic rename so a
crash never leaves a half-written dataset behind.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .fusion import ModalityFeatures
from .model import ModelDims

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "HEADER_BYTES",
    "DatasetHeader",
    "FeatureRecord",
    "DatasetFormatError",
    "read_dataset",
    "write_dataset",
    "write_sidecar",
    "synth_generate",
    "SplitManifest",
    "split",
    "resolve_split",
    "batches",
    "stack_features",
    "atomic_write_bytes",
    "file_sha256",
]

logger = logging.getLogger("trifuse.data")

MAGIC = b"TTBF"
FORMAT_VERSION = 1

# magic, version, record_count, six dims, label-semantics tag, reserved.
# The label-semantics slot is the constant 1, meaning label 1 is fake.
_HEADER = struct.Struct("<4s10I")
HEADER_BYTES = _HEADER.size
LABEL_SEMANTICS_TAG = 1

_RECORD_PREFIX = struct.Struct("<QB3s")


class DatasetFormatError(ValueError):
    """A feature file violates the format contract.

    ``record_index`` points at the offending record when the problem is
    inside the record stream rather than the header.
    """

    def __init__(self, message: str, record_index: int | None = None):
        if record_index is not None:
            message = f"record {record_index}: {message}"
        super().__init__(message)
        self.record_index = record_index


@dataclass(frozen=True)
class DatasetHeader:
    record_count: int
    l_text: int
    d_text: int
    l_image: int
    d_image: int
    l_imgtext: int
    d_imgtext: int

    # label semantics are fixed by the format: 1 = fake, 0 = real
    label_semantics = "fake=1"

    def dims(self) -> ModelDims:
        return ModelDims(self.l_text, self.d_text, self.l_image, self.d_image, self.l_imgtext, self.d_imgtext)

    def block_floats(self) -> tuple[int, int, int]:
        return (self.l_text * self.d_text, self.l_image * self.d_image, self.l_imgtext * self.d_imgtext)

    def record_bytes(self) -> int:
        return _RECORD_PREFIX.size + 4 * sum(self.block_floats())


@dataclass
class FeatureRecord:
    id: int
    label: int
    features: ModalityFeatures


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a sibling temp file and rename over the target."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=os.path.basename(path) + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_sidecar(dataset_path, info: dict) -> str:
    """Drop an informative JSON manifest next to a feature file."""
    sidecar = os.fspath(dataset_path) + ".manifest.json"
    atomic_write_bytes(sidecar, (json.dumps(info, sort_keys=True, indent=2) + "\n").encode("utf-8"))
    return sidecar


def _validate_against_header(header: DatasetHeader, records: Sequence[FeatureRecord]) -> None:
    if header.record_count != len(records):
        raise DatasetFormatError(
            f"header says {header.record_count} records but {len(records)} were provided"
        )
    shapes = (
        ("text", (header.l_text, header.d_text)),
        ("image", (header.l_image, header.d_image)),
        ("imgtext", (header.l_imgtext, header.d_imgtext)),
    )
    for index, record in enumerate(records):
        if not 0 <= record.id < 2 ** 64:
            raise DatasetFormatError(f"id {record.id} does not fit in u64", index)
        if record.label not in (0, 1):
            raise DatasetFormatError(f"label {record.label} outside {{0, 1}}", index)
        for name, expected in shapes:
            block = getattr(record.features, name)
            if block.shape != expected:
                raise DatasetFormatError(
                    f"{name} block has shape {block.shape}, header says {expected}", index
                )
            if not np.all(np.isfinite(block)):
                raise DatasetFormatError(f"{name} block contains non-finite values", index)


def write_dataset(header: DatasetHeader, records: Sequence[FeatureRecord], path) -> None:
    """Serialize and atomically write a feature file.

    Every record is validated against the header before a single byte
    goes to disk.
    """
    _validate_against_header(header, records)
    out = bytearray()
    out.extend(_HEADER.pack(
        MAGIC, FORMAT_VERSION, header.record_count,
        header.l_text, header.d_text, header.l_image, header.d_image,
        header.l_imgtext, header.d_imgtext, LABEL_SEMANTICS_TAG, 0,
    ))
    for record in records:
        out.extend(_RECORD_PREFIX.pack(record.id, record.label, b"\x00\x00\x00"))
        for block in record.features.blocks():
            out.extend(np.ascontiguousarray(block, dtype="<f4").tobytes())
    atomic_write_bytes(path, bytes(out))


def read_dataset(path) -> tuple[DatasetHeader, list[FeatureRecord]]:
    """Parse a feature file, checking every format invariant."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_BYTES:
        raise DatasetFormatError(f"file is {len(raw)} bytes, shorter than the {HEADER_BYTES} byte header")
    magic, version, count, lt, dt, li, di, lm, dm, semantics, reserved = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported format version {version}, expected {FORMAT_VERSION}")
    if semantics != LABEL_SEMANTICS_TAG:
        raise DatasetFormatError(f"unknown label-semantics tag {semantics}, expected {LABEL_SEMANTICS_TAG}")
    if reserved != 0:
        raise DatasetFormatError(f"reserved header field is {reserved}, expected 0")
    header = DatasetHeader(count, lt, dt, li, di, lm, dm)

    record_bytes = header.record_bytes()
    body = len(raw) - HEADER_BYTES
    if body != count * record_bytes:
        have = body // record_bytes if record_bytes else 0
        raise DatasetFormatError(
            f"expected {count * record_bytes} record bytes for {count} records, found {body}",
            record_index=min(have, max(count - 1, 0)),
        )

    n_text, n_image, n_imgtext = header.block_floats()
    records = []
    offset = HEADER_BYTES
    for index in range(count):
        rec_id, label, pad = _RECORD_PREFIX.unpack_from(raw, offset)
        offset += _RECORD_PREFIX.size
        if label not in (0, 1):
            raise DatasetFormatError(f"label {label} outside {{0, 1}}", index)
        if pad != b"\x00\x00\x00":
            raise DatasetFormatError(f"nonzero padding {pad!r}", index)
        blocks = []
        for name, n_floats, shape in (
            ("text", n_text, (lt, dt)),
            ("image", n_image, (li, di)),
            ("imgtext", n_imgtext, (lm, dm)),
        ):
            flat = np.frombuffer(raw, dtype="<f4", count=n_floats, offset=offset)
            offset += 4 * n_floats
            if not np.all(np.isfinite(flat)):
                raise DatasetFormatError(f"{name} block contains non-finite values", index)
            blocks.append(flat.reshape(shape).copy())
        records.append(FeatureRecord(rec_id, int(label), ModalityFeatures(*blocks)))
    return header, records


DEFAULT_DIMS = ModelDims(l_text=4, d_text=16, l_image=4, d_image=16, l_imgtext=4, d_imgtext=16)


def synth_generate(
    n: int,
    class_separation: float,
    cross_modal_weight: float,
    seed: int,
    dims: ModelDims = DEFAULT_DIMS,
    noise_std: float = 0.5,
    latent_dims: int = 4,
) -> tuple[DatasetHeader, list[FeatureRecord]]:
    """Build a labeled synthetic dataset with a controllable signal split.

    ``class_separation`` scales the total class signal. A fraction
    ``cross_modal_weight`` of it is hidden in the correlation between the
    image and imgtext channels: both carry shared random sign latents,
    and the imgtext copy is flipped for real samples. Neither channel
    alone correlates with the label, so only joint processing can use
    it. The remaining fraction is a plain mean shift of the text channel.
    Labels are balanced to within one record. The signal is constant
    across sequence positions; the noise is drawn per position.
    """
    if n < 4:
        raise ValueError(f"need at least 4 samples, got {n}")
    if not 0.0 <= cross_modal_weight <= 1.0:
        raise ValueError(f"cross_modal_weight must be in [0, 1], got {cross_modal_weight}")
    if class_separation < 0:
        raise ValueError(f"class_separation must be non-negative, got {class_separation}")
    if latent_dims < 1:
        raise ValueError(f"latent_dims must be positive, got {latent_dims}")

    rng = np.random.default_rng(seed)
    n_fake = (n + 1) // 2
    labels = np.array([1] * n_fake + [0] * (n - n_fake), dtype=np.int64)
    rng.shuffle(labels)

    text_dir = rng.standard_normal(dims.d_text)
    text_dir /= np.linalg.norm(text_dir)
    k = min(latent_dims, dims.d_image, dims.d_imgtext)
    image_dirs = np.linalg.qr(rng.standard_normal((dims.d_image, k)))[0].T
    imgtext_dirs = np.linalg.qr(rng.standard_normal((dims.d_imgtext, k)))[0].T

    text_shift = (1.0 - cross_modal_weight) * class_separation / 2.0
    latent_amp = cross_modal_weight * class_separation / np.sqrt(k)

    header = DatasetHeader(
        n, dims.l_text, dims.d_text, dims.l_image, dims.d_image, dims.l_imgtext, dims.d_imgtext
    )
    records = []
    for i in range(n):
        sign = 2.0 * labels[i] - 1.0
        latents = rng.integers(0, 2, size=k) * 2.0 - 1.0
        text = noise_std * rng.standard_normal((dims.l_text, dims.d_text)) + sign * text_shift * text_dir
        image = noise_std * rng.standard_normal((dims.l_image, dims.d_image)) + (latent_amp * latents) @ image_dirs
        imgtext = noise_std * rng.standard_normal((dims.l_imgtext, dims.d_imgtext)) + (
            latent_amp * latents * sign
        ) @ imgtext_dirs
        records.append(FeatureRecord(i, int(labels[i]), ModalityFeatures(text, image, imgtext)))
    return header, records


@dataclass(frozen=True)
class SplitManifest:
    train_ids: tuple[int, ...]
    test_ids: tuple[int, ...]
    test_fraction: float
    seed: int


def split(records: Sequence[FeatureRecord], test_fraction: float, seed: int) -> SplitManifest:
    """Stratified train/test split by record id.

    Each label group contributes its rounded share to the test side, so
    the test fraction per label is within one record of the target.
    """
    if not 0.0 <= test_fraction <= 1.0:
        raise ValueError(f"test_fraction must be in [0, 1], got {test_fraction}")
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("record ids must be unique to split by id")
    rng = np.random.default_rng([seed, 1])
    train_ids: list[int] = []
    test_ids: list[int] = []
    for label in (0, 1):
        group = [r.id for r in records if r.label == label]
        order = rng.permutation(len(group))
        n_test = round(test_fraction * len(group))
        shuffled = [group[i] for i in order]
        test_ids.extend(shuffled[:n_test])
        train_ids.extend(shuffled[n_test:])
    return SplitManifest(tuple(sorted(train_ids)), tuple(sorted(test_ids)), test_fraction, seed)


def resolve_split(
    records: Sequence[FeatureRecord], manifest: SplitManifest
) -> tuple[list[FeatureRecord], list[FeatureRecord]]:
    by_id = {r.id: r for r in records}
    return [by_id[i] for i in manifest.train_ids], [by_id[i] for i in manifest.test_ids]


def batches(
    records: Sequence[FeatureRecord], batch_size: int, seed: int, epoch: int
) -> Iterator[list[FeatureRecord]]:
    """Yield shuffled batches; the shuffle is keyed by (seed, epoch).

    A final short batch is kept when it has at least two samples and
    dropped (with a warning) when it is a singleton, because batch
    statistics are undefined for one row.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(len(records))
    for start in range(0, len(records), batch_size):
        chunk = [records[i] for i in order[start:start + batch_size]]
        if len(chunk) == 1 and batch_size > 1:
            logger.warning("dropping singleton final batch (epoch %d): batch statistics need 2 rows", epoch)
            continue
        yield chunk


def stack_features(records: Sequence[FeatureRecord]) -> tuple[tuple[np.ndarray, np.ndarray, np.ndarray], np.ndarray]:
    """Stack per-record blocks into [batch, length, width] arrays."""
    text = np.stack([r.features.text for r in records])
    image = np.stack([r.features.image for r in records])
    imgtext = np.stack([r.features.imgtext for r in records])
    labels = np.array([r.label for r in records], dtype=np.int64)
    return (text, image, imgtext), labels
