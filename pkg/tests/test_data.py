"""Data pipeline: IDX parsing, warps, glyph fixture, partitions, streams."""

import struct

import numpy as np
import pytest

from lrt.data import (
    AUG_KINDS,
    IDX_IMAGE_MAGIC,
    IDX_LABEL_MAGIC,
    IdxFormatError,
    OnlineStream,
    background_gradient,
    default_shift_schedule,
    elastic_transform,
    format_schedule,
    load_idx,
    load_idx_pair,
    make_partitions,
    parse_schedule,
    read_manifest,
    save_idx,
    spatial_transform,
    synthetic_digits,
    white_noise,
    write_manifest,
)


@pytest.fixture(scope="module")
def sources():
    return synthetic_digits(0, 6000)


@pytest.fixture(scope="module")
def parts(sources):
    return make_partitions(*sources, seed=1, desk_scale=True)


class _ScriptedRng:
    """Stub generator whose uniform() replays a fixed value sequence."""

    def __init__(self, values):
        self.values = list(values)

    def uniform(self, lo, hi, size=None):
        v = self.values.pop(0)
        if size is None:
            return v
        return np.full(size, v)


class TestIdx:
    def test_image_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        imgs = rng.random((7, 5, 4))
        path = tmp_path / "imgs.idx"
        save_idx(path, imgs)
        back = load_idx(path)
        assert back.shape == (7, 5, 4)
        assert back.dtype == np.float64
        assert np.abs(back - imgs).max() <= 0.5 / 255 + 1e-12
        assert back.min() >= 0.0 and back.max() <= 1.0

    def test_label_round_trip(self, tmp_path):
        labels = np.array([0, 9, 3, 3, 7], dtype=np.int64)
        path = tmp_path / "labels.idx"
        save_idx(path, labels)
        back = load_idx(path)
        assert back.dtype == np.int64
        np.testing.assert_array_equal(back, labels)

    def test_header_layout_is_big_endian(self, tmp_path):
        path = tmp_path / "hand.idx"
        payload = bytes(range(24))
        with open(path, "wb") as fh:
            fh.write(struct.pack(">iiii", IDX_IMAGE_MAGIC, 2, 3, 4))
            fh.write(payload)
        arr = load_idx(path)
        assert arr.shape == (2, 3, 4)
        assert arr[0, 0, 1] == pytest.approx(1 / 255)
        assert IDX_IMAGE_MAGIC == 0x00000803
        assert IDX_LABEL_MAGIC == 0x00000801

    def test_bad_magic_is_reported_in_hex(self, tmp_path):
        path = tmp_path / "bad.idx"
        path.write_bytes(struct.pack(">i", 0x00000999) + b"\x00" * 16)
        with pytest.raises(IdxFormatError, match="0x00000999"):
            load_idx(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.idx"
        save_idx(path, np.zeros((3, 4, 4)))
        data = path.read_bytes()
        path.write_bytes(data[:-5])
        with pytest.raises(IdxFormatError, match="payload"):
            load_idx(path)

    def test_trailing_garbage(self, tmp_path):
        path = tmp_path / "long.idx"
        save_idx(path, np.zeros(4))
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(IdxFormatError):
            load_idx(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.idx"
        path.write_bytes(b"")
        with pytest.raises(IdxFormatError, match="truncated"):
            load_idx(path)

    def test_pair_count_mismatch(self, tmp_path):
        save_idx(tmp_path / "i.idx", np.zeros((3, 2, 2)))
        save_idx(tmp_path / "l.idx", np.zeros(4, dtype=np.int64))
        with pytest.raises(IdxFormatError, match="3 images but 4 labels"):
            load_idx_pair(tmp_path / "i.idx", tmp_path / "l.idx")

    def test_pair_rejects_swapped_files(self, tmp_path):
        save_idx(tmp_path / "i.idx", np.zeros((3, 2, 2)))
        save_idx(tmp_path / "l.idx", np.zeros(3, dtype=np.int64))
        with pytest.raises(IdxFormatError):
            load_idx_pair(tmp_path / "l.idx", tmp_path / "i.idx")

    def test_save_rejects_matrices(self, tmp_path):
        with pytest.raises(IdxFormatError):
            save_idx(tmp_path / "m.idx", np.zeros((2, 2)))


class TestElastic:
    def test_zero_alpha_is_identity(self):
        img = np.random.default_rng(1).random((28, 28))
        out = elastic_transform(img, alpha=0.0, seed=5)
        np.testing.assert_allclose(out, img, atol=1e-12)

    def test_output_stays_in_input_range(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            img = rng.random((28, 28))
            out = elastic_transform(img, seed=rng)
            assert out.min() >= img.min() - 1e-12
            assert out.max() <= img.max() + 1e-12

    def test_seed_determinism(self):
        img = np.random.default_rng(3).random((28, 28))
        a = elastic_transform(img, seed=11)
        b = elastic_transform(img, seed=11)
        c = elastic_transform(img, seed=12)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_moves_pixels_at_default_strength(self):
        img = np.zeros((28, 28))
        img[10:18, 10:18] = 1.0
        out = elastic_transform(img, seed=4)
        assert np.abs(out - img).max() > 0.1


class TestShiftAugmentations:
    def test_white_noise_zero_sigma_is_identity(self):
        img = np.random.default_rng(0).random((28, 28))
        out = white_noise(img, np.random.default_rng(1), sigma=0.0)
        np.testing.assert_array_equal(out, img)

    def test_white_noise_clips(self):
        img = np.ones((28, 28))
        out = white_noise(img, np.random.default_rng(2))
        assert out.max() <= 1.0 and out.min() >= 0.0
        assert not np.array_equal(out, img)

    def test_spatial_identity_at_neutral_parameters(self):
        img = np.random.default_rng(3).random((28, 28))
        rng = _ScriptedRng([0.0, 1.0, 0.0])
        out = spatial_transform(img, rng)
        np.testing.assert_allclose(out, img, atol=1e-12)

    def test_spatial_rotates_content(self):
        img = np.zeros((28, 28))
        img[4:6, 4:24] = 1.0
        out = spatial_transform(img, np.random.default_rng(7))
        assert out.shape == img.shape
        assert not np.array_equal(out, img)

    def test_background_identity_at_neutral_parameters(self):
        img = np.random.default_rng(4).random((28, 28))
        rng = _ScriptedRng([1.0, 0.0, 0.7])
        np.testing.assert_allclose(background_gradient(img, rng), img,
                                   atol=1e-12)

    def test_background_adds_ramp_to_black_image(self):
        out = background_gradient(np.zeros((28, 28)),
                                  np.random.default_rng(5))
        assert out.min() == pytest.approx(0.0, abs=1e-12)
        assert 0.0 < out.max() <= 0.3

    def test_all_augmentations_stay_in_unit_range(self):
        rng = np.random.default_rng(6)
        for _ in range(25):
            img = rng.random((28, 28))
            for fn in (spatial_transform, background_gradient, white_noise):
                out = fn(img, rng)
                assert np.isfinite(out).all()
                assert out.min() >= 0.0 and out.max() <= 1.0


class TestSyntheticDigits:
    def test_empty_request(self):
        imgs, labs = synthetic_digits(0, 0)
        assert imgs.shape == (0, 28, 28) and labs.shape == (0,)

    def test_exact_class_balance(self):
        _, labs = synthetic_digits(1, 1000)
        np.testing.assert_array_equal(np.bincount(labs, minlength=10),
                                      np.full(10, 100))

    def test_seed_determinism(self):
        a, _ = synthetic_digits(2, 50)
        b, _ = synthetic_digits(2, 50)
        c, _ = synthetic_digits(3, 50)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_values_and_shapes(self):
        imgs, labs = synthetic_digits(4, 30)
        assert imgs.shape == (30, 28, 28)
        assert imgs.min() >= 0.0 and imgs.max() <= 1.0
        assert labs.min() == 0 and labs.max() == 9

    def test_glyph_classes_differ_in_ink(self):
        imgs, labs = synthetic_digits(5, 200)
        ink_one = np.mean([im.sum() for im, l in zip(imgs, labs) if l == 1])
        ink_eight = np.mean([im.sum() for im, l in zip(imgs, labs) if l == 8])
        assert ink_eight > 2.0 * ink_one


class TestPartitions:
    def test_desk_scale_sizes(self, parts):
        assert parts.offline_train[0].shape == (5000, 28, 28)
        assert parts.offline_val[0].shape == (1000, 28, 28)
        assert len(parts.online_images) == 5000
        assert parts.online_count == 10000
        assert parts.block_size == 1000

    def test_source_partitions_are_disjoint(self, parts):
        ids = parts.source_indices
        train = set(ids["offline_train"].tolist())
        val = set(ids["offline_val"].tolist())
        online = set(ids["online"].tolist())
        assert not train & val
        assert not train & online
        assert not val & online
        assert len(ids["offline_train"]) == 900
        assert len(ids["offline_val"]) == 100
        assert len(ids["online"]) == 5000

    def test_stream_reads_only_the_online_pool(self, parts):
        stream = parts.stream(seed=2)
        assert stream.images is parts.online_images
        assert len(stream) == parts.online_count

    def test_labels_stay_in_range(self, parts):
        for _, labels in (parts.offline_train, parts.offline_val):
            assert labels.min() >= 0 and labels.max() <= 9

    def test_insufficient_sources(self, sources):
        imgs, labs = sources
        with pytest.raises(ValueError, match="6000"):
            make_partitions(imgs[:100], labs[:100], desk_scale=True)


class TestOnlineStream:
    def test_two_instances_agree(self, parts):
        sched = default_shift_schedule(10)
        a = parts.stream(seed=5, schedule=sched)
        b = parts.stream(seed=5, schedule=sched)
        for i in (0, 17, 1003, 9999):
            ia, la = a[i]
            ib, lb = b[i]
            np.testing.assert_array_equal(ia, ib)
            assert la == lb

    def test_access_order_is_irrelevant(self, parts):
        a = parts.stream(seed=6)
        b = parts.stream(seed=6)
        fwd = [a[i] for i in (0, 1, 2, 3)]
        rev = [b[i] for i in (3, 2, 1, 0)][::-1]
        for (ia, la), (ib, lb) in zip(fwd, rev):
            np.testing.assert_array_equal(ia, ib)
            assert la == lb

    def test_iteration_matches_indexing(self, parts):
        stream = parts.stream(seed=7, count=5)
        for i, (img, lab) in enumerate(stream):
            ref_img, ref_lab = stream[i]
            np.testing.assert_array_equal(img, ref_img)
            assert lab == ref_lab

    def test_sample_contract(self, parts):
        stream = parts.stream(seed=8, schedule=default_shift_schedule(10))
        for i in (0, 1500, 4200, 9000):
            img, lab = stream[i]
            assert img.shape == (28, 28, 1)
            assert np.isfinite(img).all()
            assert img.min() >= 0.0 and img.max() <= 1.0
            assert 0 <= lab <= 9

    def test_index_bounds(self, parts):
        stream = parts.stream(seed=9, count=10)
        with pytest.raises(IndexError):
            stream[10]
        with pytest.raises(IndexError):
            stream[-1]

    def test_seed_changes_the_stream(self, parts):
        a = parts.stream(seed=10)
        b = parts.stream(seed=11)
        assert any(not np.array_equal(a[i][0], b[i][0]) for i in range(3))

    def test_empty_schedule_equals_no_schedule(self, parts):
        bare = parts.stream(seed=12)
        empty = parts.stream(seed=12, schedule=[(), ()])
        for i in (0, 500, 2500):
            np.testing.assert_array_equal(bare[i][0], empty[i][0])

    def test_noise_flag_changes_pixels(self, parts):
        plain = parts.stream(seed=13)
        noisy = parts.stream(seed=13, schedule=[("wn",)])
        assert not np.array_equal(plain[5][0], noisy[5][0])
        assert np.array_equal(plain[1500][0], noisy[1500][0])

    def test_class_clustering_lowers_window_entropy(self, parts):
        def entropy(stream, n=300):
            counts = np.bincount([stream[i][1] for i in range(n)],
                                 minlength=10)
            p = counts[counts > 0] / counts.sum()
            return float(-(p * np.log(p)).sum())

        clustered = parts.stream(seed=5, schedule=[("cd",)])
        plain = parts.stream(seed=5)
        assert entropy(clustered) < entropy(plain)

    def test_rejects_bad_inputs(self, parts):
        with pytest.raises(ValueError):
            OnlineStream(np.zeros((0, 28, 28)), np.zeros(0, np.int64), 10)
        with pytest.raises(ValueError):
            OnlineStream(np.zeros((2, 28, 28)), np.array([0, 11]), 10)
        with pytest.raises(ValueError):
            parts.stream(seed=0, schedule=[("sparkle",)])


class TestScheduleAndManifest:
    def test_schedule_round_trip(self):
        schedule = [(), ("cd", "st"), ("wn",), ()]
        text = format_schedule(schedule)
        assert text == "none|cd+st|wn|none"
        assert parse_schedule(text) == schedule

    def test_parse_rejects_unknown_flags(self):
        with pytest.raises(ValueError):
            parse_schedule("cd|blur")

    def test_default_schedule_is_valid(self):
        schedule = default_shift_schedule(12)
        assert len(schedule) == 12
        for flags in schedule:
            assert flags
            assert all(f in AUG_KINDS for f in flags)

    def test_manifest_round_trip(self, parts, tmp_path):
        stream = parts.stream(seed=21, schedule=default_shift_schedule(10))
        path = tmp_path / "stream.manifest"
        write_manifest(stream, path)
        kwargs = read_manifest(path)
        clone = OnlineStream(parts.online_images, parts.online_labels,
                             **kwargs)
        assert clone.manifest() == stream.manifest()
        np.testing.assert_array_equal(clone[42][0], stream[42][0])

    def test_manifest_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_manifest(tmp_path / "nope.manifest")
