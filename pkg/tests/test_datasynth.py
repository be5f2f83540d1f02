"""Corpus generator, occlusion mask, split, and container tests.  Mask
coverage is checked against exact pixel-count oracles, and the container
format against its byte layout."""

import struct

import numpy as np
import pytest

from occludiff.datasynth import (
    MASK_KINDS,
    ContainerError,
    Dataset,
    OcclusionSpec,
    generate_dataset,
    load_container,
    make_mask,
    occlude,
    save_container,
    split,
    split_indices,
    write_png,
)


class TestGenerate:
    def test_deterministic(self):
        a = generate_dataset(4, 3, 16, 16, seed=11)
        b = generate_dataset(4, 3, 16, 16, seed=11)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_seed_changes_content(self):
        a = generate_dataset(4, 3, 16, 16, seed=11)
        b = generate_dataset(4, 3, 16, 16, seed=12)
        assert not np.array_equal(a.images, b.images)

    def test_identity_major_label_order(self):
        ds = generate_dataset(5, 4, 16, 16, seed=0)
        assert np.array_equal(ds.labels, np.repeat(np.arange(5), 4))

    def test_shape_dtype_range(self):
        ds = generate_dataset(3, 2, 12, 20, seed=3)
        assert ds.images.shape == (6, 12, 20, 1)
        assert ds.images.dtype == np.float32
        assert ds.images.min() >= -1.0 and ds.images.max() <= 1.0
        assert len(ds) == 6
        assert ds.image_shape == (12, 20, 1)

    def test_zero_variation_repeats_renders(self):
        ds = generate_dataset(3, 4, 16, 16, seed=7, variation=0.0)
        for lab in range(3):
            imgs = ds.images[ds.labels == lab]
            assert np.array_equal(imgs[0], imgs[1])
            assert np.array_equal(imgs[0], imgs[3])
        # identities still differ from each other
        assert not np.array_equal(ds.images[0], ds.images[4])

    def test_variation_spreads_images(self):
        quiet = generate_dataset(3, 4, 16, 16, seed=7, variation=0.0)
        noisy = generate_dataset(3, 4, 16, 16, seed=7, variation=1.0)
        for lab in range(3):
            q = quiet.images[quiet.labels == lab]
            n = noisy.images[noisy.labels == lab]
            assert np.std(q - q[0]) == 0.0
            assert np.std(n - n[0]) > 0.0

    def test_validation(self):
        with pytest.raises(ValueError):
            generate_dataset(1, 3, 16, 16, seed=0)
        with pytest.raises(ValueError):
            generate_dataset(3, 0, 16, 16, seed=0)
        with pytest.raises(ValueError):
            generate_dataset(3, 3, 4, 16, seed=0)

    def test_dataset_validation(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((3, 4, 4)), np.zeros(3))
        with pytest.raises(ValueError):
            Dataset(np.zeros((3, 4, 4, 1)), np.zeros(2))


class TestMasks:
    def test_rect_oracle(self):
        # [DERIVED] severity .5 on 32 rows: rows 16..31 occluded, 0..15 kept
        m = make_mask(OcclusionSpec("rect_mask", 0.5), 32, 32)
        assert np.all(m[:16] == 1.0)
        assert np.all(m[16:] == 0.0)

    def test_lines_oracle(self):
        # [DERIVED] severity .4 on 16 rows: 6 lines at floor(i*16/6)
        m = make_mask(OcclusionSpec("lines", 0.4), 16, 16)
        occluded_rows = np.flatnonzero((m == 0.0).all(axis=1))
        assert occluded_rows.tolist() == [0, 2, 5, 8, 10, 13]
        kept = (m == 1.0).all(axis=1)
        assert kept.sum() == 10

    def test_random_loss_exact_count(self):
        # [DERIVED] round(.4 * 256) = 102 occluded pixels
        m = make_mask(OcclusionSpec("random_loss", 0.4, seed=5), 16, 16)
        assert int((m == 0.0).sum()) == 102

    def test_leaves_exact_count(self):
        # [DERIVED] same exact-count contract as random_loss
        m = make_mask(OcclusionSpec("leaves", 0.4, seed=5), 16, 16)
        assert int((m == 0.0).sum()) == 102
        # leaves are blobs: occluded pixels should clump, so the number of
        # occluded rows touched is well below the pixel count
        touched = int(((m == 0.0).any(axis=1)).sum())
        assert touched < 102

    @pytest.mark.parametrize("kind", MASK_KINDS)
    @pytest.mark.parametrize("severity", [0.1, 0.3, 0.5, 0.7, 0.9])
    def test_coverage_matches_severity(self, kind, severity):
        h = w = 20
        m = make_mask(OcclusionSpec(kind, severity, seed=9), h, w)
        assert m.shape == (h, w)
        assert set(np.unique(m)) <= {0.0, 1.0}
        occ = int((m == 0.0).sum())
        if kind in ("rect_mask", "lines"):
            want = max(1, int(np.round(severity * h))) * w
        else:
            want = max(1, int(np.round(severity * h * w)))
        assert occ == want

    @pytest.mark.parametrize("kind", MASK_KINDS)
    def test_deterministic_per_seed(self, kind):
        a = make_mask(OcclusionSpec(kind, 0.4, seed=3), 16, 16)
        b = make_mask(OcclusionSpec(kind, 0.4, seed=3), 16, 16)
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("kind", ["random_loss", "leaves"])
    def test_seed_moves_random_kinds(self, kind):
        a = make_mask(OcclusionSpec(kind, 0.4, seed=3), 16, 16)
        b = make_mask(OcclusionSpec(kind, 0.4, seed=4), 16, 16)
        assert not np.array_equal(a, b)

    def test_full_severity_blanks_everything(self):
        m = make_mask(OcclusionSpec("rect_mask", 1.0), 8, 8)
        assert np.all(m == 0.0)

    def test_spec_validation(self):
        with pytest.raises(ValueError, match="kind"):
            OcclusionSpec("blur", 0.5)
        with pytest.raises(ValueError, match="severity"):
            OcclusionSpec("rect_mask", 0.0)
        with pytest.raises(ValueError, match="severity"):
            OcclusionSpec("rect_mask", 1.5)
        with pytest.raises(ValueError, match="degenerate"):
            make_mask(OcclusionSpec("rect_mask", 0.5), 0, 8)


class TestOcclude:
    def test_zero_fill_oracle(self):
        img = np.ones((2, 2, 1), dtype=np.float32)
        mask = np.array([[1.0, 0.0], [0.0, 1.0]])
        out = occlude(img, mask)
        assert out[0, 0, 0] == 1.0 and out[1, 1, 0] == 1.0
        assert out[0, 1, 0] == 0.0 and out[1, 0, 0] == 0.0
        assert out.dtype == np.float32

    def test_custom_fill(self):
        img = np.ones((2, 2, 1), dtype=np.float32)
        mask = np.zeros((2, 2))
        assert np.all(occlude(img, mask, fill=0.5) == 0.5)

    def test_batch_broadcast(self, rng):
        imgs = rng.normal(size=(4, 6, 5, 1)).astype(np.float32)
        mask = (rng.uniform(size=(6, 5)) > 0.5).astype(np.float32)
        out = occlude(imgs, mask)
        for i in range(4):
            assert np.array_equal(out[i], occlude(imgs[i], mask))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            occlude(np.ones((4, 4, 1)), np.ones((3, 4)))


class TestSplit:
    def test_partition_properties(self):
        labels = np.repeat(np.arange(6), 10)
        gal, probe = split_indices(labels, 0.8, seed=2)
        assert len(set(gal) & set(probe)) == 0
        assert sorted(np.concatenate([gal, probe]).tolist()) == list(range(60))
        for lab in range(6):
            assert (labels[gal] == lab).sum() == 8
            assert (labels[probe] == lab).sum() == 2

    def test_every_identity_on_both_sides_even_when_tiny(self):
        labels = np.repeat(np.arange(3), 2)
        gal, probe = split_indices(labels, 0.9, seed=0)
        for lab in range(3):
            assert (labels[gal] == lab).sum() == 1
            assert (labels[probe] == lab).sum() == 1

    def test_deterministic(self):
        labels = np.repeat(np.arange(4), 5)
        a = split_indices(labels, 0.75, seed=3)
        b = split_indices(labels, 0.75, seed=3)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_dataset_split_subsets(self):
        ds = generate_dataset(4, 5, 16, 16, seed=1)
        gal, probe = split(ds, 0.8, seed=1)
        assert len(gal) + len(probe) == len(ds)
        # images must really correspond to their labels; spot-check by
        # rebuilding the union multiset of (label, checksum) pairs
        def keyset(d):
            return sorted((int(l), float(im.sum())) for l, im in zip(d.labels, d.images))
        assert sorted(keyset(gal) + keyset(probe)) == keyset(ds)

    def test_validation(self):
        with pytest.raises(ValueError):
            split_indices(np.repeat(np.arange(3), 4), 1.0, seed=0)
        with pytest.raises(ValueError, match="at least 2"):
            split_indices(np.array([0, 0, 1]), 0.5, seed=0)


class TestContainer:
    def small_dataset(self, rng, n=5, h=6, w=4, c=1):
        imgs = rng.uniform(-1.0, 1.0, (n, h, w, c)).astype(np.float32)
        labels = rng.integers(0, 1000, n)
        return Dataset(imgs, labels)

    def test_round_trip_bit_exact(self, tmp_path, rng):
        ds = self.small_dataset(rng)
        path = tmp_path / "corpus.mode"
        save_container(path, ds)
        back = load_container(path)
        assert np.array_equal(back.images, ds.images)
        assert np.array_equal(back.labels, ds.labels)
        assert back.images.dtype == np.float32

    def test_header_layout(self, tmp_path, rng):
        # [DERIVED] magic + <HIHHH header: version 1, count, h, w, c
        ds = self.small_dataset(rng, n=3, h=6, w=4, c=1)
        path = tmp_path / "corpus.mode"
        save_container(path, ds)
        blob = path.read_bytes()
        assert blob[:4] == b"MODE"
        version, n, h, w, c = struct.unpack_from("<HIHHH", blob, 4)
        assert (version, n, h, w, c) == (1, 3, 6, 4, 1)
        assert len(blob) == 16 + 3 * (4 + 4 * 6 * 4 * 1)

    def test_truncation_rejected(self, tmp_path, rng):
        ds = self.small_dataset(rng)
        path = tmp_path / "corpus.mode"
        save_container(path, ds)
        blob = path.read_bytes()
        path.write_bytes(blob[:-1])
        with pytest.raises(ContainerError, match="header implies"):
            load_container(path)

    def test_bad_magic_rejected(self, tmp_path, rng):
        ds = self.small_dataset(rng)
        path = tmp_path / "corpus.mode"
        save_container(path, ds)
        blob = path.read_bytes()
        path.write_bytes(b"MXDE" + blob[4:])
        with pytest.raises(ContainerError, match="magic"):
            load_container(path)

    def test_bad_version_rejected(self, tmp_path, rng):
        ds = self.small_dataset(rng)
        path = tmp_path / "corpus.mode"
        save_container(path, ds)
        blob = bytearray(path.read_bytes())
        blob[4] = 9
        path.write_bytes(bytes(blob))
        with pytest.raises(ContainerError, match="version"):
            load_container(path)

    def test_out_of_range_pixels_rejected(self, tmp_path):
        imgs = np.full((1, 4, 4, 1), 2.0, dtype=np.float32)
        with pytest.raises(ContainerError, match="within"):
            save_container(tmp_path / "x.mode", Dataset(imgs, np.zeros(1)))
        imgs = np.full((1, 4, 4, 1), np.nan, dtype=np.float32)
        with pytest.raises(ContainerError, match="finite"):
            save_container(tmp_path / "x.mode", Dataset(imgs, np.zeros(1)))

    def test_label_range_rejected(self, tmp_path):
        imgs = np.zeros((1, 4, 4, 1), dtype=np.float32)
        with pytest.raises(ContainerError, match="u32"):
            save_container(tmp_path / "x.mode", Dataset(imgs, np.array([-1])))
        with pytest.raises(ContainerError, match="u32"):
            save_container(tmp_path / "x.mode", Dataset(imgs, np.array([2**40])))

    def test_oversize_dims_rejected(self, tmp_path):
        imgs = np.zeros((1, 65536, 1, 1), dtype=np.float32)
        with pytest.raises(ContainerError, match="u16"):
            save_container(tmp_path / "x.mode", Dataset(imgs, np.zeros(1)))


class TestPng:
    def test_round_trip_levels(self, tmp_path):
        # [DERIVED] -1 -> 0, 0 -> 128 (ties round to even), 1 -> 255
        from PIL import Image

        img = np.array([[[-1.0], [0.0], [1.0]]], dtype=np.float32)
        path = tmp_path / "img.png"
        write_png(path, img)
        back = np.asarray(Image.open(path))
        assert back.shape == (1, 3)
        assert back.tolist() == [[0, 128, 255]]

    def test_bad_shape_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            write_png(tmp_path / "x.png", np.zeros((4, 4)))
        with pytest.raises(ValueError):
            write_png(tmp_path / "x.png", np.zeros((4, 4, 2)))
