import numpy as np
import pytest
from PIL import Image

from retseg.data import (
    BlobParams,
    batch_iterator,
    generate_synthetic_dataset,
    load_mask,
    load_sample,
    scan_dataset,
    split_dataset,
    split_indices,
    synthetic_sample,
    write_dataset,
    write_mask_png,
)
from retseg.errors import DataError, DecodeError, ParameterError


class TestSplit:
    def test_counts(self):
        tr, va = split_indices(1612, 0.8, 0)
        assert (len(tr), len(va)) == (1290, 322)
        tr, va = split_indices(10, 0.5, 0)
        assert (len(tr), len(va)) == (5, 5)

    def test_seeded(self):
        a = split_indices(50, 0.8, 1)
        b = split_indices(50, 0.8, 1)
        c = split_indices(50, 0.8, 2)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert not np.array_equal(a[0], c[0])
        assert sorted(np.concatenate(a).tolist()) == list(range(50))

    def test_bad_fraction(self):
        with pytest.raises(ParameterError):
            split_indices(10, 1.0)

    def test_manifest_split(self, tmp_path):
        man = write_dataset(generate_synthetic_dataset(10, 16, 0), tmp_path)
        tr, va = split_dataset(man, 0.8, 0)
        assert len(tr) == 8 and len(va) == 2
        assert set(tr.ids) | set(va.ids) == set(man.ids)
        assert tr.ids == sorted(tr.ids)


class TestSynthetic:
    def test_deterministic(self):
        a = generate_synthetic_dataset(4, 32, 3)
        b = generate_synthetic_dataset(4, 32, 3)
        for x, y in zip(a, b):
            assert x.id == y.id
            assert x.image.tobytes() == y.image.tobytes() and x.mask.tobytes() == y.mask.tobytes()

    def test_area_bounds_and_ranges(self):
        bp = BlobParams()
        for s in generate_synthetic_dataset(40, 32, 0):
            frac = s.mask.mean()
            assert bp.min_area <= frac <= bp.max_area
            assert s.image.shape == (3, 32, 32) and s.mask.shape == (1, 32, 32)
            assert s.image.min() >= 0 and s.image.max() <= 1
            assert set(np.unique(s.mask)) <= {0.0, 1.0}

    def test_mask_matches_ellipse_predicate(self):
        for i in range(10):
            sample, shapes = synthetic_sample(5, i, 24)
            for r in range(24):
                for c in range(24):
                    inside = False
                    for e in shapes:
                        dy, dx = r - e.cy, c - e.cx
                        u = np.cos(e.angle) * dy + np.sin(e.angle) * dx
                        v = -np.sin(e.angle) * dy + np.cos(e.angle) * dx
                        inside |= (u / e.a) ** 2 + (v / e.b) ** 2 <= 1.0
                    assert sample.mask[0, r, c] == float(inside)

    def test_preconditions(self):
        with pytest.raises(ParameterError):
            generate_synthetic_dataset(0, 32)
        with pytest.raises(ParameterError):
            generate_synthetic_dataset(2, 8)


class TestBatching:
    def test_sizes_and_coverage(self):
        samples = generate_synthetic_dataset(10, 16, 0)
        batches = list(batch_iterator(samples, 4, seed=0, epoch=0))
        assert [len(b.ids) for b in batches] == [4, 4, 2]
        assert batches[0].images.shape == (4, 3, 16, 16) and batches[0].masks.shape == (4, 1, 16, 16)
        assert sorted(i for b in batches for i in b.ids) == sorted(s.id for s in samples)

    def test_order_reproducible_and_varies_by_epoch(self):
        samples = generate_synthetic_dataset(10, 16, 0)
        ids = lambda e: [i for b in batch_iterator(samples, 4, 0, e) for i in b.ids]
        assert ids(0) == ids(0)
        assert ids(0) != ids(1)
        assert [i for b in batch_iterator(samples, 3, None) for i in b.ids] == [s.id for s in samples]


class TestMaskIO:
    def test_binary_roundtrip(self, tmp_path):
        m = (np.random.default_rng(0).random((1, 13, 9)) < 0.5).astype(float)
        write_mask_png(m, tmp_path / "m.png")
        np.testing.assert_array_equal(load_mask(tmp_path / "m.png"), m)
        write_mask_png(load_mask(tmp_path / "m.png"), tmp_path / "m2.png")
        assert (tmp_path / "m.png").read_bytes() == (tmp_path / "m2.png").read_bytes()

    def test_raw_half_is_128(self, tmp_path):
        write_mask_png(np.full((4, 4), 0.5), tmp_path / "r.png", mode="raw")
        assert np.all(np.asarray(Image.open(tmp_path / "r.png")) == 128)

    def test_zero_mask_is_black(self, tmp_path):
        write_mask_png(np.zeros((5, 5)), tmp_path / "z.png")
        assert np.asarray(Image.open(tmp_path / "z.png")).max() == 0

    def test_unwritable(self, tmp_path):
        with pytest.raises(DataError):
            write_mask_png(np.zeros((2, 2)), tmp_path / "missing" / "x.png")


class TestLoading:
    def test_white_mask_and_resize(self, tmp_path):
        Image.fromarray(np.full((10, 10), 255, np.uint8)).save(tmp_path / "w.png")
        Image.fromarray(np.zeros((10, 10, 3), np.uint8)).save(tmp_path / "i.png")
        s = load_sample(tmp_path / "i.png", tmp_path / "w.png", 16)
        assert s.mask.shape == (1, 16, 16) and np.all(s.mask == 1.0)
        assert s.image.shape == (3, 16, 16)
        again = load_sample(tmp_path / "i.png", tmp_path / "w.png", 16)
        assert again.image.tobytes() == s.image.tobytes()

    def test_resized_mask_stays_binary(self, tmp_path):
        m = np.zeros((17, 17), np.uint8)
        m[4:11, 3:9] = 255
        Image.fromarray(m).save(tmp_path / "m.png")
        assert set(np.unique(load_mask(tmp_path / "m.png", 32))) == {0.0, 1.0}

    def test_errors(self, tmp_path):
        with pytest.raises(DataError):
            load_mask(tmp_path / "nope.png")
        (tmp_path / "bad.png").write_bytes(b"not an image")
        with pytest.raises(DecodeError):
            load_mask(tmp_path / "bad.png")
        with pytest.raises(DataError):
            scan_dataset(tmp_path)

    def test_scan_requires_pairs(self, tmp_path):
        write_dataset(generate_synthetic_dataset(3, 16, 0), tmp_path)
        next((tmp_path / "masks").iterdir()).unlink()
        with pytest.raises(DataError, match="no mask"):
            scan_dataset(tmp_path)
