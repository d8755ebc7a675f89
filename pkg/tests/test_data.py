"""Data pipeline: parsing, splitting, weights, images, augmentation, synthesis."""

from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from cbamnet.data import (
    AugmentConfig,
    ClassLabel,
    DatasetError,
    DatasetIndex,
    DatasetRecord,
    SyntheticSpec,
    augment,
    compute_class_weights,
    derive_subtype_from_filename,
    ingest_kermany_layout,
    load_image,
    normalize,
    stratified_split,
    synthesize_dataset,
)
from cbamnet.resample import bilinear_resize

REFERENCE_COUNTS = (1341, 2530, 1345)


def fake_records(counts, split="train"):
    records = []
    for c, n in enumerate(counts):
        for i in range(n):
            records.append(DatasetRecord(Path(f"/img/c{c}_{i}.png"), ClassLabel(c), split))
    return records


class TestSubtypeParsing:
    def test_bacteria_token(self):
        assert derive_subtype_from_filename("person88_bacteria_437.jpeg") == ClassLabel.BACTERIAL

    def test_virus_token_case_insensitive(self):
        assert derive_subtype_from_filename("PERSON1_VIRUS_6.jpeg") == ClassLabel.VIRAL

    def test_unrecognized(self):
        assert derive_subtype_from_filename("scan_0042.jpeg") is None

    def test_both_tokens_ambiguous(self):
        assert derive_subtype_from_filename("bacteria_virus_1.png") is None


def write_png(path, value=128, size=(4, 4)):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.full(size, value, dtype=np.uint8), mode="L").save(path)


class TestIngest:
    def make_layout(self, root):
        write_png(root / "train" / "NORMAL" / "a.png")
        write_png(root / "train" / "PNEUMONIA" / "person1_bacteria_1.png")
        write_png(root / "train" / "PNEUMONIA" / "person2_virus_3.png")
        write_png(root / "test" / "NORMAL" / "b.png")
        write_png(root / "test" / "PNEUMONIA" / "person4_virus_7.png")

    def test_labels_and_splits(self, tmp_path):
        self.make_layout(tmp_path)
        index = ingest_kermany_layout(tmp_path)
        by_name = {r.path.name: r for r in index}
        assert by_name["a.png"].label == ClassLabel.NORMAL
        assert by_name["person1_bacteria_1.png"].label == ClassLabel.BACTERIAL
        assert by_name["person2_virus_3.png"].label == ClassLabel.VIRAL
        assert by_name["a.png"].split == "train"
        assert by_name["b.png"].split == "test"
        assert by_name["person4_virus_7.png"].split == "test"

    def test_unlabeled_pneumonia_file_is_fatal_and_named(self, tmp_path):
        self.make_layout(tmp_path)
        write_png(tmp_path / "train" / "PNEUMONIA" / "unknown.png")
        with pytest.raises(DatasetError, match="unknown.png"):
            ingest_kermany_layout(tmp_path)

    def test_missing_directory(self, tmp_path):
        write_png(tmp_path / "train" / "NORMAL" / "a.png")
        with pytest.raises(DatasetError, match="missing dataset directory"):
            ingest_kermany_layout(tmp_path)

    def test_index_covers_every_image(self, tmp_path):
        self.make_layout(tmp_path)
        index = ingest_kermany_layout(tmp_path)
        n_files = sum(1 for _ in tmp_path.rglob("*.png"))
        assert len(index) == n_files
        assert all(r.label in (ClassLabel.NORMAL, ClassLabel.BACTERIAL, ClassLabel.VIRAL)
                   for r in index)


class TestStratifiedSplit:
    def test_reference_counts_reproduce_validation_split(self):
        # floor(n_c / 5) per class: (268, 506, 269), totalling 1043.
        records = fake_records(REFERENCE_COUNTS)
        train, val = stratified_split(records, train_fraction=0.8, seed=7)
        val_counts = np.zeros(3, dtype=int)
        for r in val:
            val_counts[int(r.label)] += 1
        assert tuple(val_counts) == (268, 506, 269)
        assert len(val) == 1043
        assert len(train) + len(val) == sum(REFERENCE_COUNTS)

    def test_fraction_one_empty_validation(self):
        records = fake_records((5, 5, 5))
        train, val = stratified_split(records, train_fraction=1.0, seed=0)
        assert val == []
        assert len(train) == 15

    def test_seed_reproducibility(self):
        records = fake_records((30, 40, 50))
        t1, v1 = stratified_split(records, seed=11)
        t2, v2 = stratified_split(records, seed=11)
        assert [r.path for r in v1] == [r.path for r in v2]
        t3, v3 = stratified_split(records, seed=12)
        assert [r.path for r in v3] != [r.path for r in v1]
        counts = lambda rs: tuple(sum(1 for r in rs if int(r.label) == c) for c in range(3))
        assert counts(v3) == counts(v1)

    def test_empty_class_rejected(self):
        records = fake_records((3, 0, 3))
        with pytest.raises(DatasetError, match="no records"):
            stratified_split(records)

    @given(st.tuples(st.integers(1, 60), st.integers(1, 60), st.integers(1, 60)),
           st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_partition_properties(self, counts, seed):
        records = fake_records(counts)
        train, val = stratified_split(records, train_fraction=0.8, seed=seed)
        train_paths = {r.path for r in train}
        val_paths = {r.path for r in val}
        assert not train_paths & val_paths
        assert train_paths | val_paths == {r.path for r in records}
        for c in range(3):
            n_val = sum(1 for r in val if int(r.label) == c)
            assert n_val == counts[c] // 5
        assert all(r.split == "val" for r in val)
        assert all(r.split == "train" for r in train)


class TestClassWeights:
    def test_balanced_counts(self):
        np.testing.assert_array_equal(compute_class_weights((10, 10, 10)), np.ones(3))

    def test_reference_counts(self):
        w = compute_class_weights(REFERENCE_COUNTS)
        np.testing.assert_allclose(w, [1.29655, 0.68722, 1.29269], atol=1e-4)

    def test_weighted_count_identity_exact_for_reference_counts(self):
        counts = np.asarray(REFERENCE_COUNTS)
        w = compute_class_weights(counts)
        assert (counts * w).sum() == float(counts.sum())

    @given(st.tuples(st.integers(1, 10_000), st.integers(1, 10_000), st.integers(1, 10_000)))
    def test_weighted_count_identity(self, counts):
        counts = np.asarray(counts)
        w = compute_class_weights(counts)
        np.testing.assert_allclose((counts * w).sum(), counts.sum(), rtol=1e-12)

    def test_zero_count_rejected(self):
        with pytest.raises(DatasetError, match="populated"):
            compute_class_weights((5, 0, 5))


class TestImageLoading:
    def test_single_white_pixel(self, tmp_path):
        path = tmp_path / "one.png"
        write_png(path, value=255, size=(1, 1))
        out = load_image(path, side=1)
        np.testing.assert_array_equal(out, np.ones((1, 1, 3)))

    def test_normalize_values(self):
        assert normalize(0) == 0.0
        assert normalize(255) == 1.0
        assert normalize(51) == 0.2

    def test_no_resample_when_size_matches(self, tmp_path):
        path = tmp_path / "four.png"
        raw = np.arange(16, dtype=np.uint8).reshape(4, 4) * 16
        Image.fromarray(raw, mode="L").save(path)
        out = load_image(path, side=4)
        np.testing.assert_array_equal(out, (raw / 255.0)[..., None].repeat(3, axis=2))

    def test_upscale_matches_shared_resampler(self, tmp_path):
        path = tmp_path / "grad.png"
        raw = np.array([[0, 80], [160, 240]], dtype=np.uint8)
        Image.fromarray(raw, mode="L").save(path)
        out = load_image(path, side=4)
        expected = bilinear_resize(raw.astype(float)[..., None].repeat(3, axis=2), 4, 4) / 255.0
        np.testing.assert_allclose(out, expected, atol=1e-15)

    def test_rgb_pass_through(self, tmp_path):
        path = tmp_path / "rgb.png"
        raw = np.zeros((2, 2, 3), dtype=np.uint8)
        raw[..., 0] = 255
        Image.fromarray(raw, mode="RGB").save(path)
        out = load_image(path, side=2)
        np.testing.assert_array_equal(out[..., 0], np.ones((2, 2)))
        np.testing.assert_array_equal(out[..., 1:], np.zeros((2, 2, 2)))

    def test_non_8bit_rejected(self, tmp_path):
        path = tmp_path / "deep.png"
        Image.fromarray(np.zeros((2, 2), dtype=np.uint16)).save(path)
        with pytest.raises(DatasetError, match="mode"):
            load_image(path, side=2)

    def test_undecodable_rejected(self, tmp_path):
        path = tmp_path / "junk.png"
        path.write_bytes(b"not a png at all")
        with pytest.raises(DatasetError, match="decode"):
            load_image(path, side=2)


class TestAugment:
    def test_collapsed_config_is_identity(self, rng):
        image = rng.uniform(0, 1, size=(9, 9, 3))
        out = augment(image, AugmentConfig.disabled(), np.random.default_rng(0))
        np.testing.assert_array_equal(out, image)

    def test_brightness_clamped(self):
        config = AugmentConfig(rotation_deg=0, flip_prob=0, shift_frac=0, zoom_frac=0,
                               brightness_range=(1.1, 1.1))
        image = np.ones((4, 4, 3))
        out = augment(image, config, np.random.default_rng(0))
        np.testing.assert_array_equal(out, np.ones((4, 4, 3)))

    def test_fixed_seed_bit_identical(self, rng):
        image = rng.uniform(0, 1, size=(12, 12, 3))
        a = augment(image, AugmentConfig(), np.random.default_rng(123))
        b = augment(image, AugmentConfig(), np.random.default_rng(123))
        np.testing.assert_array_equal(a, b)

    def test_flip_only_reverses_columns(self, rng):
        config = AugmentConfig(rotation_deg=0, flip_prob=1.0, shift_frac=0, zoom_frac=0,
                               brightness_range=(1.0, 1.0))
        image = rng.uniform(0, 1, size=(5, 7, 3))
        out = augment(image, config, np.random.default_rng(0))
        np.testing.assert_array_equal(out, image[:, ::-1])

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_output_in_range_and_same_shape(self, seed):
        r = np.random.default_rng(seed)
        image = r.uniform(0, 1, size=(10, 10, 3))
        out = augment(image, AugmentConfig(), r)
        assert out.shape == image.shape
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestSynthesis:
    def test_counts_and_balance(self, tmp_path):
        spec = SyntheticSpec(per_class=10, side=16, seed=1)
        index = synthesize_dataset(spec, tmp_path / "corpus")
        assert len(index) == 30
        np.testing.assert_array_equal(index.counts(), [10, 10, 10])
        np.testing.assert_array_equal(index.counts("test"), [2, 2, 2])
        assert sum(1 for _ in (tmp_path / "corpus").rglob("*.png")) == 30

    def test_deterministic_bytes(self, tmp_path):
        spec = SyntheticSpec(per_class=4, side=16, seed=9)
        a = synthesize_dataset(spec, tmp_path / "a")
        b = synthesize_dataset(spec, tmp_path / "b")
        for ra, rb in zip(a, b):
            assert ra.path.name == rb.path.name
            assert ra.path.read_bytes() == rb.path.read_bytes()
            assert ra.box == rb.box

    def test_bacterial_records_carry_boxes(self, tmp_path):
        index = synthesize_dataset(SyntheticSpec(per_class=5, side=24, seed=2), tmp_path / "c")
        for r in index:
            if r.label == ClassLabel.BACTERIAL:
                y0, x0, y1, x1 = r.box
                assert 0 <= y0 < y1 <= 24 and 0 <= x0 < x1 <= 24
            else:
                assert r.box is None

    def test_sidecar_round_trip(self, tmp_path):
        root = tmp_path / "d"
        index = synthesize_dataset(SyntheticSpec(per_class=3, side=16, seed=5), root)
        loaded = DatasetIndex.load(root / "index.tsv")
        assert len(loaded) == len(index)
        for ra, rb in zip(index, loaded):
            assert ra.path == rb.path
            assert ra.label == rb.label
            assert ra.split == rb.split
            assert ra.box == rb.box

    def test_reject_tiny_side(self, tmp_path):
        with pytest.raises(DatasetError, match="side"):
            synthesize_dataset(SyntheticSpec(per_class=2, side=8), tmp_path / "e")

    def test_ingest_reads_synthetic_corpus(self, tmp_path):
        root = tmp_path / "f"
        synthesize_dataset(SyntheticSpec(per_class=4, side=16, seed=3), root)
        index = ingest_kermany_layout(root)
        np.testing.assert_array_equal(index.counts(), [4, 4, 4])
