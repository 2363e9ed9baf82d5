import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mewunet.data import (
    DatasetManifest, PGMError, Sample, apply_geometry, augment, augment_params, batch_iter, load_image, load_pgm,
    parse_pgm, save_image, save_pgm, split_ids, synth_generate,
)


def geometry_loop(a, hflip, vflip, turns):
    """Per-pixel oracle: out[i, j] = a[source(i, j)] for the same map as apply_geometry."""
    h, w = a.shape
    cur = a
    if hflip:
        cur = np.array([[cur[i, w - 1 - j] for j in range(w)] for i in range(h)])
    if vflip:
        cur = np.array([[cur[h - 1 - i, j] for j in range(w)] for i in range(h)])
    for _ in range(turns):
        # counter-clockwise quarter turn: out[i, j] = in[j, W - 1 - i]
        hh, ww = cur.shape
        cur = np.array([[cur[j, ww - 1 - i] for j in range(hh)] for i in range(ww)])
    return cur


class TestPgm:
    def test_round_trip_8bit(self, rng, tmp_path):
        g = rng.integers(0, 256, (13, 17)).astype(np.uint8)
        save_pgm(g, tmp_path / "a.pgm")
        assert np.array_equal(load_pgm(tmp_path / "a.pgm"), g)

    def test_round_trip_16bit(self, rng, tmp_path):
        g = rng.integers(0, 65536, (5, 4))
        save_pgm(g, tmp_path / "b.pgm")
        assert np.array_equal(load_pgm(tmp_path / "b.pgm"), g)

    def test_ascii_equals_binary(self, rng, tmp_path):
        g = rng.integers(0, 256, (6, 9))
        save_pgm(g, tmp_path / "a.pgm", binary=True)
        save_pgm(g, tmp_path / "b.pgm", binary=False)
        assert (tmp_path / "b.pgm").read_bytes().startswith(b"P2")
        assert np.array_equal(load_pgm(tmp_path / "a.pgm"), load_pgm(tmp_path / "b.pgm"))

    def test_comments_in_header(self):
        buf = b"P2\n# made by hand\n3 1 # width height\n255\n1 2 3\n"
        assert parse_pgm(buf).tolist() == [[1, 2, 3]]

    def test_truncated(self):
        buf = b"P5\n4 4\n255\n" + bytes(10)
        with pytest.raises(PGMError) as err:
            parse_pgm(buf)
        assert err.value.offset == len(buf)

    @pytest.mark.parametrize("buf", [b"P6\n1 1\n255\n\x00", b"P5\n2", b"P5\n1 1\n70000\n\x00\x00", b"P5\n0 1\n255\n"])
    def test_malformed(self, buf):
        with pytest.raises(PGMError):
            parse_pgm(buf)

    def test_error_offset_points_at_token(self):
        with pytest.raises(PGMError) as err:
            parse_pgm(b"P2\n3 x\n255\n")
        assert err.value.offset == 5

    def test_colour_planes(self, rng, tmp_path):
        img = rng.integers(0, 256, (3, 8, 8)) / 255.0
        save_image(img, tmp_path / "im.pgm")
        assert not (tmp_path / "im.pgm").exists()
        assert np.abs(load_image(tmp_path / "im.pgm") - img).max() < 1e-12


class TestSynth:
    def test_deterministic(self, tmp_path):
        a = synth_generate(6, 32, 2, 11, tmp_path / "a")
        b = synth_generate(6, 32, 2, 11, tmp_path / "b")
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.pgm"))
        assert len(files) == 6 * 4
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        assert a.entries == b.entries

    def test_contract(self, tmp_path):
        m = synth_generate(10, 32, 3, 5, tmp_path)
        samples = m.samples("train") + m.samples("test")
        assert len(samples) == 10 and len(m.samples("train")) == 7
        for s in samples:
            assert s.image.shape == (3, 32, 32) and s.mask.shape == (32, 32)
            assert 0.0 <= s.image.min() and s.image.max() <= 1.0
            assert s.mask.max() < 3
            assert 0.05 < np.count_nonzero(s.mask) / s.mask.size < 0.6

    def test_bad_extent(self, tmp_path):
        with pytest.raises(ValueError):
            synth_generate(2, 30, 2, 0, tmp_path)

    def test_manifest_round_trip(self, tmp_path):
        m = synth_generate(4, 16, 2, 3, tmp_path)
        loaded = DatasetManifest.load(tmp_path / "manifest.tsv")
        assert loaded.entries == m.entries and loaded.seed == 3 and loaded.num_classes == 2
        loaded.check_files()

    def test_missing_file(self, tmp_path):
        m = synth_generate(2, 16, 2, 3, tmp_path)
        (tmp_path / m.entries[0][2]).unlink()
        with pytest.raises(FileNotFoundError):
            DatasetManifest.load(tmp_path / "manifest.tsv").check_files()

    def test_duplicate_ids_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="more than once"):
            DatasetManifest(tmp_path, [("a", "x", "y", "train"), ("a", "x", "y", "test")])


class TestSplit:
    def test_partition(self):
        ids = [f"s{i}" for i in range(10)]
        s = split_ids(ids, 0.7, 4)
        assert sorted(s) == sorted(ids)
        assert list(s.values()).count("train") == 7
        assert s == split_ids(ids, 0.7, 4)


class TestAugment:
    def test_identity_seed(self, rng):
        seed = next(s for s in range(1000) if augment_params(s) == (False, False, 0))
        smp = Sample(rng.random((3, 5, 5)), rng.integers(0, 2, (5, 5)), "x")
        out = augment(smp, seed)
        assert np.array_equal(out.image, smp.image) and np.array_equal(out.mask, smp.mask)

    def test_double_hflip(self, rng):
        a = rng.random((3, 4, 6))
        once = apply_geometry(a, True, False, 0)
        assert not np.array_equal(once, a)
        assert np.array_equal(apply_geometry(once, True, False, 0), a)

    @pytest.mark.parametrize("h,v,t", [(h, v, t) for h in (0, 1) for v in (0, 1) for t in range(4)])
    def test_loop_oracle(self, rng, h, v, t):
        m = rng.integers(0, 3, (4, 6))
        assert np.array_equal(apply_geometry(m, bool(h), bool(v), t), geometry_loop(m, bool(h), bool(v), t))

    def test_image_and_mask_move_together(self, rng):
        img = rng.random((3, 8, 8))
        mask = (img[0] > 0.5).astype(int)
        for seed in range(20):
            out = augment(Sample(img, mask, "x"), seed)
            assert np.array_equal(out.mask, (out.image[0] > 0.5).astype(int))

    def test_all_outcomes_reachable(self):
        assert len({augment_params(s) for s in range(400)}) == 16


@settings(max_examples=50, deadline=None)
@given(arrays(np.int64, st.tuples(st.integers(1, 7), st.integers(1, 7)), elements=st.integers(0, 3)),
       st.integers(0, 10 ** 6))
def test_augment_preserves_label_counts(mask, seed):
    out = augment(Sample(np.zeros((1,) + mask.shape), mask, "x"), seed).mask
    assert np.array_equal(np.bincount(out.ravel(), minlength=4), np.bincount(mask.ravel(), minlength=4))


class TestBatches:
    @pytest.fixture
    def manifest(self, tmp_path):
        return synth_generate(10, 16, 2, 0, tmp_path, train_fraction=1.0)

    def test_sizes(self, manifest):
        sizes = [len(b.ids) for b in batch_iter(manifest, "train", 8, shuffle_seed=1)]
        assert sizes == [8, 2]

    def test_order_deterministic(self, manifest):
        def ids(seed):
            return [i for b in batch_iter(manifest, "train", 3, shuffle_seed=seed) for i in b.ids]

        assert ids(5) == ids(5)
        assert ids(5) != ids(6)
        assert sorted(ids(5)) == sorted(manifest.ids("train"))
        assert len(set(ids(5))) == 10

    def test_augmented_batches_deterministic(self, manifest):
        a = [b.images for b in batch_iter(manifest, "train", 4, 1, augment_seed=2)]
        b = [b.images for b in batch_iter(manifest, "train", 4, 1, augment_seed=2)]
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_shapes(self, manifest):
        batch = next(batch_iter(manifest, "train", 4))
        assert batch.images.shape == (4, 3, 16, 16) and batch.masks.shape == (4, 16, 16)

    def test_empty_split(self, manifest):
        with pytest.raises(ValueError):
            next(batch_iter(manifest, "test", 4))
