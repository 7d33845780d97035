"""Dataset generation and file-format tests."""

import hashlib

import numpy as np
import pytest

from trajdiff.datasets import (
    Dataset,
    MixtureSpec,
    gen_dataset,
    read_dataset,
    write_dataset,
)


class TestGenerate:
    def test_ring_stratification_is_exact(self):
        ds = gen_dataset("gaussian-ring", n=8000, k=8, seed=0)
        assert ds.samples.shape == (8000, 2)
        counts = np.bincount(ds.labels, minlength=8)
        assert counts.tolist() == [1000] * 8

    def test_uneven_split_spreads_remainder(self):
        ds = gen_dataset("gaussian-ring", n=10, k=3, seed=0)
        assert sorted(np.bincount(ds.labels).tolist()) == [3, 3, 4]

    def test_ring_means_on_circle(self):
        ds = gen_dataset("gaussian-ring", n=100, k=8, seed=0)
        radii = np.linalg.norm(ds.mixture.means, axis=1)
        assert np.allclose(radii, 4.0, atol=1e-12)
        assert np.allclose(ds.mixture.means[0], [4.0, 0.0], atol=1e-12)
        assert np.allclose(ds.mixture.covs, 0.09 * np.eye(2), atol=1e-12)

    def test_single_component_centers_at_origin(self):
        ds = gen_dataset("gaussian-ring", n=4000, k=1, seed=3)
        se = 0.3 / np.sqrt(4000)
        assert np.all(np.abs(ds.samples.mean(axis=0) - [4.0, 0.0]) < 5 * se)
        grid = gen_dataset("gaussian-grid", n=4000, k=1, seed=3)
        assert np.all(np.abs(grid.samples.mean(axis=0)) < 5 * se)

    def test_component_means_within_five_se(self):
        for kind, k in [("gaussian-ring", 8), ("gaussian-grid", 9)]:
            ds = gen_dataset(kind, n=8000, k=k, seed=1)
            for j in range(k):
                pts = ds.samples[ds.labels == j]
                se = 0.3 / np.sqrt(pts.shape[0])
                assert np.all(np.abs(pts.mean(axis=0) - ds.mixture.means[j]) < 5 * se)

    def test_same_seed_is_bit_identical(self):
        for kind, k in [("gaussian-ring", 8), ("gaussian-grid", 4),
                        ("two-moons", 2), ("checkerboard", 8)]:
            a = gen_dataset(kind, n=500, k=k, seed=11)
            b = gen_dataset(kind, n=500, k=k, seed=11)
            assert a.samples.tobytes() == b.samples.tobytes()
            assert a.labels.tobytes() == b.labels.tobytes()

    def test_different_seeds_differ(self):
        a = gen_dataset("gaussian-ring", n=100, k=8, seed=0)
        b = gen_dataset("gaussian-ring", n=100, k=8, seed=1)
        assert a.samples.tobytes() != b.samples.tobytes()

    def test_grid_lattice(self):
        ds = gen_dataset("gaussian-grid", n=90, k=9, seed=0)
        xs = sorted(set(ds.mixture.means[:, 0]))
        assert np.allclose(xs, [-4.0, 0.0, 4.0], atol=1e-12)

    def test_two_moons_shape(self):
        ds = gen_dataset("two-moons", n=400, k=2, seed=5)
        assert ds.mixture is None
        assert set(np.unique(ds.labels)) == {0, 1}
        assert np.all(np.isfinite(ds.samples))

    def test_checkerboard_cells(self):
        ds = gen_dataset("checkerboard", n=1600, k=8, seed=2)
        assert ds.mixture is None
        assert np.all(np.abs(ds.samples) <= 4.0)
        # points land only on dark cells: (i + j) even in board coordinates
        cell = np.floor((ds.samples + 4.0) / 2.0).astype(int)
        cell = np.clip(cell, 0, 3)
        assert np.all((cell[:, 0] + cell[:, 1]) % 2 == 0)
        assert np.bincount(ds.labels, minlength=8).tolist() == [200] * 8

    def test_rejections(self):
        with pytest.raises(ValueError, match="unknown dataset kind"):
            gen_dataset("spiral", n=10)
        with pytest.raises(ValueError, match="n >= K >= 1"):
            gen_dataset("gaussian-ring", n=4, k=8)
        with pytest.raises(ValueError, match="two-dimensional"):
            gen_dataset("gaussian-ring", n=10, d=3, k=2)
        with pytest.raises(ValueError, match="square K"):
            gen_dataset("gaussian-grid", n=10, k=5)
        with pytest.raises(ValueError, match="exactly 2"):
            gen_dataset("two-moons", n=10, k=3)
        with pytest.raises(ValueError, match="must be 8"):
            gen_dataset("checkerboard", n=10, k=4)


class TestContainer:
    def test_rejects_nonfinite(self):
        bad = np.array([[0.0, np.inf]])
        with pytest.raises(ValueError, match="finite"):
            Dataset(kind="gaussian-ring", samples=bad, labels=np.array([0]))

    def test_rejects_label_shape(self):
        with pytest.raises(ValueError, match="one label per row"):
            Dataset(kind="gaussian-ring", samples=np.zeros((3, 2)),
                    labels=np.array([0, 1]))

    def test_rejects_out_of_range_label(self):
        mix = MixtureSpec(means=np.zeros((2, 2)), covs=np.tile(np.eye(2), (2, 1, 1)))
        with pytest.raises(ValueError, match="missing mixture component"):
            Dataset(kind="gaussian-ring", samples=np.zeros((1, 2)),
                    labels=np.array([2]), mixture=mix)

    def test_mixture_shape_check(self):
        with pytest.raises(ValueError, match=r"\(K, d, d\)"):
            MixtureSpec(means=np.zeros((2, 2)), covs=np.eye(2))


class TestFileFormat:
    @pytest.mark.parametrize("kind,k", [("gaussian-ring", 8), ("gaussian-grid", 4),
                                        ("two-moons", 2), ("checkerboard", 8)])
    def test_round_trip_bit_exact(self, tmp_path, kind, k):
        ds = gen_dataset(kind, n=300, k=k, seed=9)
        p = tmp_path / "d.bin"
        write_dataset(ds, p)
        back = read_dataset(p)
        assert back.kind == ds.kind
        assert back.samples.tobytes() == ds.samples.tobytes()
        assert back.labels.tobytes() == ds.labels.tobytes()
        if ds.mixture is None:
            assert back.mixture is None
        else:
            assert back.mixture.means.tobytes() == ds.mixture.means.tobytes()
            assert back.mixture.covs.tobytes() == ds.mixture.covs.tobytes()

    def test_rewrite_gives_identical_file_hash(self, tmp_path):
        ds = gen_dataset("gaussian-ring", n=200, k=8, seed=7)
        pa, pb = tmp_path / "a.bin", tmp_path / "b.bin"
        write_dataset(ds, pa)
        write_dataset(ds, pb)
        ha = hashlib.sha256(pa.read_bytes()).hexdigest()
        hb = hashlib.sha256(pb.read_bytes()).hexdigest()
        assert ha == hb

    def test_rejects_bad_magic(self, tmp_path):
        p = tmp_path / "junk.bin"
        p.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError, match="bad magic"):
            read_dataset(p)

    def test_rejects_bad_version(self, tmp_path):
        ds = gen_dataset("gaussian-ring", n=10, k=2, seed=0)
        p = tmp_path / "d.bin"
        write_dataset(ds, p)
        blob = bytearray(p.read_bytes())
        blob[4] = 99
        p.write_bytes(bytes(blob))
        with pytest.raises(ValueError, match="version"):
            read_dataset(p)
