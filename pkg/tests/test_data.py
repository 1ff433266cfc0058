"""Binary dataset format, synthetic generator, and batching. Corruption
tests rewrite specific byte ranges and expect precise failures."""

import json
import logging
import struct

import numpy as np
import pytest

from trifuse.data import (
    DEFAULT_DIMS,
    HEADER_BYTES,
    DatasetFormatError,
    DatasetHeader,
    FeatureRecord,
    batches,
    file_sha256,
    read_dataset,
    resolve_split,
    split,
    stack_features,
    synth_generate,
    write_dataset,
    write_sidecar,
)
from trifuse.fusion import ModalityFeatures
from trifuse.model import ModelDims

CHANNEL_NAMES = ("text", "image", "imgtext")


def small_dataset(n=12, seed=0, **kwargs):
    return synth_generate(n, class_separation=2.0, cross_modal_weight=0.5, seed=seed, **kwargs)


class TestRoundTrip:
    def test_bit_exact(self, tmp_path):
        header, records = small_dataset()
        path = tmp_path / "d.ttbf"
        write_dataset(header, records, path)
        header2, records2 = read_dataset(path)
        assert header2 == header
        assert len(records2) == len(records)
        for a, b in zip(records, records2):
            assert a.id == b.id
            assert a.label == b.label
            for name in CHANNEL_NAMES:
                left = getattr(a.features, name)
                right = getattr(b.features, name)
                assert left.dtype == np.float32 and right.dtype == np.float32
                np.testing.assert_array_equal(left, right)

    def test_empty_dataset_is_header_only(self, tmp_path):
        path = tmp_path / "empty.ttbf"
        header = DatasetHeader(0, 4, 16, 4, 16, 4, 16)
        write_dataset(header, [], path)
        assert path.stat().st_size == HEADER_BYTES
        header2, records2 = read_dataset(path)
        assert records2 == []
        assert header2.record_count == 0

    def test_sidecar_contains_given_info(self, tmp_path):
        header, records = small_dataset()
        path = tmp_path / "d.ttbf"
        write_dataset(header, records, path)
        digest = file_sha256(path)
        sidecar = write_sidecar(path, {"sha256": digest, "records": header.record_count})
        loaded = json.loads(open(sidecar).read())
        assert loaded == {"sha256": digest, "records": 12}
        assert sidecar.endswith(".manifest.json")

    def test_failed_write_leaves_original(self, tmp_path):
        header, records = small_dataset()
        path = tmp_path / "d.ttbf"
        write_dataset(header, records, path)
        original = path.read_bytes()
        bad_header = DatasetHeader(1, 4, 16, 4, 16, 4, 16)
        bad = [FeatureRecord(id=999, label=2, features=records[0].features)]
        with pytest.raises(DatasetFormatError, match="label 2"):
            write_dataset(bad_header, bad, path)
        assert path.read_bytes() == original

    def test_write_rejects_count_mismatch(self, tmp_path):
        header, records = small_dataset()
        with pytest.raises(DatasetFormatError, match="header says"):
            write_dataset(header, records[:-1], tmp_path / "bad.ttbf")

    def test_write_rejects_nan_features(self, tmp_path):
        header, records = small_dataset()
        records[0].features.image[0, 0] = np.nan
        with pytest.raises(DatasetFormatError, match="record 0"):
            write_dataset(header, records, tmp_path / "bad.ttbf")

    def test_write_rejects_shape_mismatch(self, tmp_path):
        header, records = small_dataset(n=4)
        wrong = ModalityFeatures(
            np.zeros((4, 16), dtype=np.float32),
            np.zeros((3, 16), dtype=np.float32),
            np.zeros((4, 16), dtype=np.float32),
        )
        records[1] = FeatureRecord(id=records[1].id, label=0, features=wrong)
        with pytest.raises(DatasetFormatError, match="record 1"):
            write_dataset(header, records, tmp_path / "bad.ttbf")


class TestCorruption:
    def write_good(self, tmp_path):
        header, records = small_dataset(n=8, seed=1)
        path = tmp_path / "d.ttbf"
        write_dataset(header, records, path)
        return path

    def patch(self, path, offset, payload):
        raw = bytearray(path.read_bytes())
        raw[offset:offset + len(payload)] = payload
        path.write_bytes(bytes(raw))

    def test_bad_magic(self, tmp_path):
        path = self.write_good(tmp_path)
        self.patch(path, 0, b"XXXX")
        with pytest.raises(DatasetFormatError, match="magic"):
            read_dataset(path)

    def test_unsupported_version(self, tmp_path):
        path = self.write_good(tmp_path)
        self.patch(path, 4, struct.pack("<I", 9))
        with pytest.raises(DatasetFormatError, match="version"):
            read_dataset(path)

    def test_unknown_label_semantics(self, tmp_path):
        path = self.write_good(tmp_path)
        self.patch(path, 36, struct.pack("<I", 7))
        with pytest.raises(DatasetFormatError, match="semantics"):
            read_dataset(path)

    def test_nonzero_reserved(self, tmp_path):
        path = self.write_good(tmp_path)
        self.patch(path, 40, struct.pack("<I", 1))
        with pytest.raises(DatasetFormatError, match="reserved"):
            read_dataset(path)

    def test_file_shorter_than_header(self, tmp_path):
        path = self.write_good(tmp_path)
        path.write_bytes(path.read_bytes()[:20])
        with pytest.raises(DatasetFormatError, match="header"):
            read_dataset(path)

    def test_truncation_reports_record_index(self, tmp_path):
        path = self.write_good(tmp_path)
        header, _ = read_dataset(path)
        record_bytes = header.record_bytes()
        keep = HEADER_BYTES + 3 * record_bytes + record_bytes // 2
        path.write_bytes(path.read_bytes()[:keep])
        with pytest.raises(DatasetFormatError, match="record 3"):
            read_dataset(path)

    def test_trailing_garbage_rejected(self, tmp_path):
        path = self.write_good(tmp_path)
        path.write_bytes(path.read_bytes() + b"\x00" * 5)
        with pytest.raises(DatasetFormatError):
            read_dataset(path)

    def test_bad_label_byte_names_record(self, tmp_path):
        path = self.write_good(tmp_path)
        header, _ = read_dataset(path)
        offset = HEADER_BYTES + 2 * header.record_bytes() + 8
        self.patch(path, offset, b"\x05")
        with pytest.raises(DatasetFormatError, match="record 2"):
            read_dataset(path)

    def test_nonzero_record_padding(self, tmp_path):
        path = self.write_good(tmp_path)
        offset = HEADER_BYTES + 9
        self.patch(path, offset, b"\x01")
        with pytest.raises(DatasetFormatError, match="record 0"):
            read_dataset(path)

    def test_nan_feature_names_record(self, tmp_path):
        path = self.write_good(tmp_path)
        header, _ = read_dataset(path)
        offset = HEADER_BYTES + header.record_bytes() + 12
        self.patch(path, offset, struct.pack("<f", float("nan")))
        with pytest.raises(DatasetFormatError, match="record 1"):
            read_dataset(path)


class TestGenerator:
    def test_shapes_and_dtypes(self):
        header, records = small_dataset(n=10)
        dims = DEFAULT_DIMS
        assert header.record_count == 10
        for record in records:
            assert record.features.text.shape == (dims.l_text, dims.d_text)
            assert record.features.image.shape == (dims.l_image, dims.d_image)
            assert record.features.imgtext.shape == (dims.l_imgtext, dims.d_imgtext)
            for block in record.features.blocks():
                assert block.dtype == np.float32

    def test_labels_balanced(self):
        _, records = small_dataset(n=100, seed=2)
        labels = [r.label for r in records]
        assert labels.count(0) == 50
        assert labels.count(1) == 50

    def test_odd_n_is_balanced_within_one(self):
        _, records = small_dataset(n=11, seed=2)
        labels = [r.label for r in records]
        assert labels.count(1) == 6
        assert labels.count(0) == 5

    def test_ids_unique_and_sequential(self):
        _, records = small_dataset(n=20, seed=3)
        assert sorted(r.id for r in records) == list(range(20))

    def test_seed_determinism(self):
        _, a = small_dataset(n=16, seed=4)
        _, b = small_dataset(n=16, seed=4)
        for left, right in zip(a, b):
            assert left.label == right.label
            for name in CHANNEL_NAMES:
                np.testing.assert_array_equal(
                    getattr(left.features, name), getattr(right.features, name)
                )

    def test_different_seeds_differ(self):
        _, a = small_dataset(n=16, seed=5)
        _, b = small_dataset(n=16, seed=6)
        assert any(
            not np.array_equal(l.features.text, r.features.text)
            for l, r in zip(a, b)
        )

    def test_zero_weight_shifts_text_only(self):
        # with cross_modal_weight=0 the class signal lives entirely in
        # the text mean; image and imgtext class means stay put
        _, records = synth_generate(
            4000, class_separation=3.0, cross_modal_weight=0.0, seed=7
        )

        def class_mean_gap(name):
            grouped = {0: [], 1: []}
            for record in records:
                grouped[record.label].append(getattr(record.features, name).mean(axis=0))
            gap = np.mean(grouped[1], axis=0) - np.mean(grouped[0], axis=0)
            return float(np.linalg.norm(gap))

        assert class_mean_gap("text") > 2.0
        assert class_mean_gap("image") < 0.2
        assert class_mean_gap("imgtext") < 0.2

    def test_full_weight_hides_signal_from_single_channels(self):
        # with cross_modal_weight=1 no single channel's class mean moves;
        # the signal is only in the image/imgtext correlation
        _, records = synth_generate(
            4000, class_separation=3.0, cross_modal_weight=1.0, seed=8
        )

        def class_mean_gap(name):
            grouped = {0: [], 1: []}
            for record in records:
                grouped[record.label].append(getattr(record.features, name).mean(axis=0))
            gap = np.mean(grouped[1], axis=0) - np.mean(grouped[0], axis=0)
            return float(np.linalg.norm(gap))

        for name in CHANNEL_NAMES:
            assert class_mean_gap(name) < 0.25, name

        # the image/imgtext alignment is equal and opposite across
        # classes; which class gets the positive sign depends on the
        # sampled direction frames, so assert the antisymmetry
        def corr(label):
            pairs = [
                (r.features.image.mean(axis=0), r.features.imgtext.mean(axis=0))
                for r in records if r.label == label
            ]
            return float(np.mean([a @ b for a, b in pairs]))

        fake, real = corr(1), corr(0)
        assert abs(fake) > 0.5
        assert fake * real < 0
        assert abs(fake + real) < 0.25

    def test_custom_dims(self):
        dims = ModelDims(3, 5, 2, 7, 4, 6)
        _, records = small_dataset(n=8, seed=8, dims=dims)
        assert records[0].features.text.shape == (3, 5)
        assert records[0].features.image.shape == (2, 7)
        assert records[0].features.imgtext.shape == (4, 6)

    def test_rejects_tiny_n(self):
        with pytest.raises(ValueError):
            synth_generate(3, class_separation=1.0, cross_modal_weight=0.5, seed=0)

    def test_rejects_weight_out_of_range(self):
        with pytest.raises(ValueError):
            synth_generate(10, class_separation=1.0, cross_modal_weight=1.5, seed=0)
        with pytest.raises(ValueError):
            synth_generate(10, class_separation=-1.0, cross_modal_weight=0.5, seed=0)


class TestSplit:
    def test_partition_and_stratification(self):
        _, records = small_dataset(n=100, seed=9)
        manifest = split(records, test_fraction=0.2, seed=0)
        train_ids = set(manifest.train_ids)
        test_ids = set(manifest.test_ids)
        assert not train_ids & test_ids
        assert train_ids | test_ids == {r.id for r in records}
        assert len(test_ids) == 20
        by_id = {r.id: r for r in records}
        test_labels = [by_id[i].label for i in manifest.test_ids]
        assert test_labels.count(0) == 10
        assert test_labels.count(1) == 10

    def test_split_deterministic(self):
        _, records = small_dataset(n=60, seed=10)
        a = split(records, test_fraction=0.25, seed=3)
        b = split(records, test_fraction=0.25, seed=3)
        assert a.train_ids == b.train_ids
        assert a.test_ids == b.test_ids

    def test_split_ids_sorted(self):
        _, records = small_dataset(n=40, seed=11)
        manifest = split(records, test_fraction=0.5, seed=1)
        assert list(manifest.train_ids) == sorted(manifest.train_ids)
        assert list(manifest.test_ids) == sorted(manifest.test_ids)

    def test_resolve_returns_records(self):
        _, records = small_dataset(n=30, seed=12)
        manifest = split(records, test_fraction=0.3, seed=2)
        train, test = resolve_split(records, manifest)
        assert {r.id for r in train} == set(manifest.train_ids)
        assert {r.id for r in test} == set(manifest.test_ids)

    def test_duplicate_ids_rejected(self):
        _, records = small_dataset(n=8, seed=13)
        records[3] = FeatureRecord(id=records[0].id, label=0, features=records[3].features)
        with pytest.raises(ValueError, match="unique"):
            split(records, test_fraction=0.25, seed=0)


class TestBatches:
    def test_singleton_tail_dropped_with_warning(self, caplog):
        _, records = small_dataset(n=129, seed=13)
        with caplog.at_level(logging.WARNING, logger="trifuse.data"):
            chunks = list(batches(records, batch_size=64, seed=0, epoch=0))
        assert [len(c) for c in chunks] == [64, 64]
        assert any("dropping" in message for message in caplog.messages)

    def test_two_sample_tail_kept(self):
        _, records = small_dataset(n=130, seed=14)
        chunks = list(batches(records, batch_size=32, seed=0, epoch=0))
        assert [len(c) for c in chunks] == [32, 32, 32, 32, 2]

    def test_epochs_shuffle_differently(self):
        _, records = small_dataset(n=64, seed=15)
        first = [r.id for c in batches(records, batch_size=16, seed=0, epoch=0) for r in c]
        second = [r.id for c in batches(records, batch_size=16, seed=0, epoch=1) for r in c]
        assert first != second
        assert sorted(first) == sorted(second)

    def test_same_seed_same_epoch_identical(self):
        _, records = small_dataset(n=48, seed=16)
        a = [r.id for c in batches(records, batch_size=16, seed=5, epoch=2) for r in c]
        b = [r.id for c in batches(records, batch_size=16, seed=5, epoch=2) for r in c]
        assert a == b

    def test_stack_features_layout(self):
        _, records = small_dataset(n=6, seed=17)
        (text, image, imgtext), labels = stack_features(records)
        assert text.shape == (6, DEFAULT_DIMS.l_text, DEFAULT_DIMS.d_text)
        assert image.shape == (6, DEFAULT_DIMS.l_image, DEFAULT_DIMS.d_image)
        assert imgtext.shape == (6, DEFAULT_DIMS.l_imgtext, DEFAULT_DIMS.d_imgtext)
        np.testing.assert_array_equal(text[2], records[2].features.text)
        np.testing.assert_array_equal(labels, [r.label for r in records])


class TestHeader:
    def test_record_bytes(self):
        header = DatasetHeader(0, 4, 16, 4, 16, 4, 16)
        assert header.record_bytes() == 12 + 4 * (64 + 64 + 64)

    def test_label_semantics_is_fake_one(self):
        assert DatasetHeader.label_semantics == "fake=1"
