"""Dataset ingestion, composition, deterministic generation, serialization."""
import struct

import numpy as np
import pytest
from scipy import stats

from multicaps import datasets as ds
from multicaps.errors import ConfigurationError, FormatError


def make_idx_bytes(images, labels):
    """Assemble a canonical IDX image/label byte pair from uint8 arrays."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    image_bytes = struct.pack(">IIII", ds.IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes()
    label_bytes = struct.pack(">II", ds.IDX_LABELS_MAGIC, n) + labels.tobytes()
    return image_bytes, label_bytes


def synthetic_pool(rng, per_class=12, start_index=0):
    """A small labeled pool of random /255-quantized digit images."""
    pool = []
    index = start_index
    for cls in range(10):
        for _ in range(per_class):
            img = np.round(rng.random((28, 28)) * 255.0) / 255.0
            pool.append(ds.SourceDigit(image=img, label=cls, source_index=index))
            index += 1
    return pool


@pytest.fixture(scope="module")
def pool():
    return synthetic_pool(np.random.default_rng(42))


class TestLoadIdx:
    def test_parses_canonical_files(self):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, size=(30, 28, 28), dtype=np.uint8)
        labels = rng.integers(0, 10, size=30, dtype=np.uint8)
        digits = ds.load_idx(*make_idx_bytes(images, labels))
        assert len(digits) == 30
        assert digits[7].image.shape == (28, 28)
        assert digits[7].label == labels[7]
        assert digits[7].source_index == 7

    def test_pixel_scaling_endpoints(self):
        images = np.zeros((1, 28, 28), dtype=np.uint8)
        images[0, 0, 0] = 255
        digits = ds.load_idx(*make_idx_bytes(images, [3]))
        assert digits[0].image[0, 0] == 1.0
        assert digits[0].image[1, 1] == 0.0

    def test_bad_image_magic(self):
        img, lab = make_idx_bytes(np.zeros((1, 28, 28), dtype=np.uint8), [0])
        with pytest.raises(FormatError, match="magic"):
            ds.load_idx(b"\x00\x00\x08\x04" + img[4:], lab)

    def test_truncated_payload_names_offset(self):
        img, lab = make_idx_bytes(np.zeros((2, 28, 28), dtype=np.uint8), [0, 1])
        with pytest.raises(FormatError, match="truncated"):
            ds.load_idx(img[:-5], lab)

    def test_count_mismatch(self):
        img, _ = make_idx_bytes(np.zeros((2, 28, 28), dtype=np.uint8), [0, 1])
        _, lab = make_idx_bytes(np.zeros((3, 28, 28), dtype=np.uint8), [0, 1, 2])
        with pytest.raises(FormatError, match="images but"):
            ds.load_idx(img, lab)

    def test_label_out_of_range(self):
        img, lab = make_idx_bytes(np.zeros((2, 28, 28), dtype=np.uint8), [0, 0])
        lab = lab[:9] + bytes([12])
        with pytest.raises(FormatError, match="out of range"):
            ds.load_idx(img, lab)


class TestBuiltinPools:
    def test_disjoint_quantized_and_complete(self):
        train, test = ds.builtin_digit_pools()
        assert len(train) + len(test) == 1797
        assert {d.source_index for d in train}.isdisjoint(d.source_index for d in test)
        for pool_part in (train, test):
            assert {d.label for d in pool_part} == set(range(10))
        sample = train[0].image
        assert sample.shape == (28, 28)
        assert np.array_equal(sample, np.round(sample * 255.0) / 255.0)
        assert sample.min() >= 0.0 and sample.max() <= 1.0


class TestComposePair:
    def test_zero_digits_give_zero_canvas(self, pool):
        zero = ds.SourceDigit(np.zeros((28, 28)), 0, 0)
        one = ds.SourceDigit(np.zeros((28, 28)), 1, 1)
        ex = ds.compose_pair(zero, one, (3, 4), (5, 6))
        assert not ex.image.any()
        assert ex.shift == 2

    def test_max_is_idempotent_for_identical_placements(self, pool):
        img = pool[0].image
        a = ds.SourceDigit(img, 0, 10)
        b = ds.SourceDigit(img, 1, 11)
        ex = ds.compose_pair(a, b, (2, 2), (2, 2))
        assert np.array_equal(ex.image, ds.place_digit(img, (2, 2)))
        assert ex.shift == 0

    def test_single_bright_pixels_land_at_offset_plus_position(self):
        img_a = np.zeros((28, 28))
        img_a[5, 7] = 1.0  # row 5, col 7
        img_b = np.zeros((28, 28))
        img_b[5, 7] = 1.0
        a = ds.SourceDigit(img_a, 2, 0)
        b = ds.SourceDigit(img_b, 3, 1)
        ex = ds.compose_pair(a, b, (0, 0), (8, 8))
        lit = set(map(tuple, np.argwhere(ex.image > 0)))
        assert lit == {(5, 7), (13, 15)}
        assert ex.shift == 8

    def test_rejects_same_class(self, pool):
        with pytest.raises(ValueError, match="differ"):
            ds.compose_pair(pool[0], pool[1], (0, 0), (1, 1))

    def test_rejects_out_of_range_offset(self, pool):
        with pytest.raises(ValueError, match="offset"):
            ds.compose_pair(pool[0], pool[20], (0, 9), (0, 0))

    def test_labels_ascending(self, pool):
        ex = ds.compose_pair(pool[9 * 12], pool[0], (1, 1), (2, 2))
        assert ex.labels == (0, 9)
        assert ex.provenance == (pool[9 * 12].source_index, pool[0].source_index)


class TestSpecValidation:
    def test_full_rejects_held_out(self):
        with pytest.raises(ConfigurationError):
            ds.DatasetSpec(variant="full", seed=1, held_out=6)

    def test_exclude_requires_digit(self):
        with pytest.raises(ConfigurationError):
            ds.DatasetSpec(variant="exclude", seed=1)

    def test_lowdata_requires_k(self):
        with pytest.raises(ConfigurationError):
            ds.DatasetSpec(variant="lowdata", seed=1, held_out=6)

    def test_k_rejected_outside_lowdata(self):
        with pytest.raises(ConfigurationError):
            ds.DatasetSpec(variant="exclude", seed=1, held_out=6, k=10)


class TestTrainingStream:
    def test_exclude_stream_never_contains_held_out(self, pool):
        spec = ds.DatasetSpec(variant="exclude", seed=7, held_out=6, train_size=20_000)
        for ex in ds.gen_training_set(spec, pool):
            assert 6 not in ex.labels

    def test_lowdata_reuses_exactly_k_sources(self, pool):
        for k in (1, 5, 10):
            spec = ds.DatasetSpec(variant="lowdata", seed=11, held_out=6, k=k, train_size=6000)
            seen = set()
            index_to_digit = ds.source_index_map(pool)
            for ex in ds.gen_training_set(spec, pool):
                for src in ex.provenance:
                    if index_to_digit[src].label == 6:
                        seen.add(src)
            assert len(seen) == min(k, 12)

    def test_lowdata_caps_at_available_sources(self, pool):
        spec = ds.DatasetSpec(variant="lowdata", seed=11, held_out=6, k=5000, train_size=6000)
        seen = set()
        index_to_digit = ds.source_index_map(pool)
        for ex in ds.gen_training_set(spec, pool):
            for src in ex.provenance:
                if index_to_digit[src].label == 6:
                    seen.add(src)
        assert len(seen) == 12  # every available class-6 source, no more exist

    def test_lowdata_keeps_class_frequency(self, pool):
        # restricting the source pool must not make the class rarer
        spec = ds.DatasetSpec(variant="lowdata", seed=3, held_out=6, k=1, train_size=5000)
        hits = sum(6 in ex.labels for ex in ds.gen_training_set(spec, pool))
        # P(pair contains a fixed class) = 1/5; 3 sigma band for n=5000
        assert abs(hits / 5000 - 0.2) < 3 * np.sqrt(0.2 * 0.8 / 5000)

    def test_same_seed_streams_identical(self, pool):
        spec = ds.DatasetSpec(variant="full", seed=123, train_size=200)
        first = list(ds.gen_training_set(spec, pool))
        second = list(ds.gen_training_set(spec, pool))
        assert first == second

    def test_generation_is_index_addressable(self, pool):
        spec = ds.DatasetSpec(variant="full", seed=123, train_size=50)
        stream = list(ds.gen_training_set(spec, pool))
        tail = list(ds.gen_training_set(spec, pool, start=30, count=20))
        assert stream[30:] == tail

    def test_every_example_recomposes_bit_exactly(self, pool):
        spec = ds.DatasetSpec(variant="full", seed=5, train_size=300)
        lookup = ds.source_index_map(pool)
        for ex in ds.gen_training_set(spec, pool):
            assert np.array_equal(ex.image, ds.recompose(ex, lookup))

    def test_offsets_marginally_uniform(self, pool):
        spec = ds.DatasetSpec(variant="full", seed=17, train_size=20_000)
        offsets = np.array(
            [ex.offsets[0] + ex.offsets[1] for ex in ds.gen_training_set(spec, pool)]
        )
        for column in range(4):
            counts = np.bincount(offsets[:, column], minlength=9)
            assert counts.size == 9
            _, p = stats.chisquare(counts)
            assert p > 0.001

    def test_labels_always_distinct_pairs(self, pool):
        spec = ds.DatasetSpec(variant="full", seed=29, train_size=500)
        for ex in ds.gen_training_set(spec, pool):
            assert ex.labels[0] < ex.labels[1]


class TestTestSets:
    def test_ten_sets_for_held_out_spec(self, pool):
        spec = ds.DatasetSpec(variant="exclude", seed=2, held_out=6, test_size_per_set=40)
        sets = ds.gen_test_sets(spec, pool)
        assert len(sets) == 10
        assert set(sets) == {(v, s) for v in ("nine", "ten") for s in ds.TEST_SHIFTS}

    def test_shift_levels_exact(self, pool):
        spec = ds.DatasetSpec(variant="exclude", seed=2, held_out=6, test_size_per_set=60)
        sets = ds.gen_test_sets(spec, pool)
        for (variant, shift), examples in sets.items():
            assert len(examples) == 60
            for ex in examples:
                (ax, ay), (bx, by) = ex.offsets
                assert max(abs(ax - bx), abs(ay - by)) == shift == ex.shift

    def test_shift_zero_identical_offsets(self, pool):
        spec = ds.DatasetSpec(variant="full", seed=4, test_size_per_set=30)
        sets = ds.gen_test_sets(spec, pool)
        for ex in sets[("ten", 0)]:
            assert ex.offsets[0] == ex.offsets[1]

    def test_nine_digit_excludes_held_out_ten_includes_it(self, pool):
        spec = ds.DatasetSpec(variant="exclude", seed=6, held_out=6, test_size_per_set=400)
        sets = ds.gen_test_sets(spec, pool)
        nine = [ex for s in ds.TEST_SHIFTS for ex in sets[("nine", s)]]
        ten = [ex for s in ds.TEST_SHIFTS for ex in sets[("ten", s)]]
        assert all(6 not in ex.labels for ex in nine)
        assert any(6 in ex.labels for ex in ten)

    def test_full_variant_has_only_ten_digit_sets(self, pool):
        spec = ds.DatasetSpec(variant="full", seed=4, test_size_per_set=10)
        sets = ds.gen_test_sets(spec, pool)
        assert {v for v, _ in sets} == {"ten"}

    def test_direction_covers_the_sphere(self, pool):
        spec = ds.DatasetSpec(variant="full", seed=31, test_size_per_set=2000)
        sets = ds.gen_test_sets(spec, pool)
        displacements = {
            (bx - ax, by - ay)
            for (ax, ay), (bx, by) in (ex.offsets for ex in sets[("ten", 2)])
        }
        assert displacements == {
            ds._perimeter_point(2, t) for t in range(16)
        }


class TestSerialization:
    def build(self, pool, n=40):
        spec = ds.DatasetSpec(variant="lowdata", seed=99, held_out=6, k=5, train_size=n)
        examples = list(ds.gen_training_set(spec, pool))
        return ds.Dataset(spec=spec, kind="train", shift=None, examples=examples)

    def test_record_size_arithmetic(self, pool):
        dataset = self.build(pool, n=40)
        blob = ds.serialize(dataset)
        assert ds.RECORD_SIZE == 1307
        assert len(blob) == ds._HEADER.size + 40 * 1307

    def test_round_trip_identity(self, pool):
        dataset = self.build(pool)
        blob = ds.serialize(dataset)
        recovered = ds.deserialize(blob)
        assert recovered == dataset
        assert ds.serialize(recovered) == blob

    def test_spec_echo_supports_regeneration(self, pool):
        dataset = self.build(pool)
        recovered = ds.deserialize(ds.serialize(dataset))
        regenerated = list(
            ds.gen_training_set(recovered.spec, pool, count=len(recovered.examples))
        )
        assert regenerated == recovered.examples

    def test_same_seed_serialization_byte_identical(self, pool):
        assert ds.serialize(self.build(pool)) == ds.serialize(self.build(pool))

    def test_bad_magic_rejected(self, pool):
        blob = ds.serialize(self.build(pool, n=2))
        with pytest.raises(FormatError, match="magic"):
            ds.deserialize(b"XXXX" + blob[4:])

    def test_bad_version_rejected(self, pool):
        blob = bytearray(ds.serialize(self.build(pool, n=2)))
        blob[4:6] = struct.pack("<H", 9)
        with pytest.raises(FormatError, match="version"):
            ds.deserialize(bytes(blob))

    def test_truncation_rejected(self, pool):
        blob = ds.serialize(self.build(pool, n=2))
        with pytest.raises(FormatError, match="header implies"):
            ds.deserialize(blob[:-10])

    def test_file_round_trip(self, pool, tmp_path):
        dataset = self.build(pool, n=5)
        path = tmp_path / "set.mcds"
        ds.save(dataset, path)
        assert ds.load(path) == dataset
