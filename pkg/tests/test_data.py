"""Dataset generation: sampling modes, crops, noise, manifests."""

import math

import numpy as np
import pytest

from dualreg.data import (
    AXISYMMETRIC_CATEGORIES,
    DataConfig,
    IngestError,
    ManifestError,
    add_noise,
    build_dataset,
    crop_partial,
    load_shapes,
    make_pair,
    pairs_from_manifest,
    read_manifest,
    sample_pair,
    write_manifest,
)
from dualreg.plyio import write_ply


def small_config(**overrides) -> DataConfig:
    params = dict(
        n_surface_samples=256,
        train_shapes=4,
        val_shapes=2,
        test_shapes=2,
        n_points=64,
        train_pairs=6,
        val_pairs=2,
        test_pairs=2,
        seed=0,
    )
    params.update(overrides)
    return DataConfig(**params)


class TestProceduralShapes:
    def test_normalization(self):
        shapes = load_shapes("procedural", "train", count=8, n_surface_samples=200, seed=1)
        assert len(shapes) == 8
        for s in shapes:
            assert s.points.shape == (200, 3)
            assert np.abs(s.points).max() == pytest.approx(1.0, abs=1e-9)

    def test_determinism_and_distinct_ids(self):
        a = load_shapes("procedural", "train", count=4, n_surface_samples=128, seed=5)
        b = load_shapes("procedural", "train", count=4, n_surface_samples=128, seed=5)
        assert len({s.shape_id for s in a}) == 4
        for sa, sb in zip(a, b):
            assert sa.shape_id == sb.shape_id
            assert np.array_equal(sa.points, sb.points)

    def test_splits_use_different_streams(self):
        tr = load_shapes("procedural", "train", count=2, n_surface_samples=64, seed=0)
        te = load_shapes("procedural", "test", count=2, n_surface_samples=64, seed=0)
        assert not np.array_equal(tr[0].points, te[0].points)

    def test_bad_split_rejected(self):
        with pytest.raises(ValueError):
            load_shapes("procedural", "dev", count=2)


class TestExternalIngest:
    def _tree(self, tmp_path, categories=("chair", "cup")):
        rng = np.random.default_rng(0)
        for cat in categories:
            d = tmp_path / cat / "train"
            d.mkdir(parents=True)
            write_ply(d / "0001.ply", rng.normal(size=(32, 3)))
        return tmp_path

    def test_excluded_categories_skipped(self, tmp_path):
        root = self._tree(tmp_path)
        shapes = load_shapes(str(root), "train", excluded_categories=AXISYMMETRIC_CATEGORIES)
        # "cup" is axisymmetric and must not appear
        assert [s.shape_id for s in shapes] == ["chair/train/0001.ply"]

    def test_missing_directory(self):
        with pytest.raises(IngestError):
            load_shapes("/nonexistent/shapes", "train")

    def test_empty_tree(self, tmp_path):
        (tmp_path / "chair" / "val").mkdir(parents=True)
        with pytest.raises(IngestError, match="no shapes found"):
            load_shapes(str(tmp_path), "train", excluded_categories=())

    def test_bad_file_named_in_error(self, tmp_path):
        d = tmp_path / "chair" / "train"
        d.mkdir(parents=True)
        (d / "broken.ply").write_text("not a ply\n")
        with pytest.raises(IngestError, match="broken.ply"):
            load_shapes(str(tmp_path), "train", excluded_categories=())


class TestSamplePair:
    def test_os_shares_the_subset(self):
        pts = np.random.default_rng(0).normal(size=(100, 3))
        a, b = sample_pair(pts, "os", 40, np.random.default_rng(1))
        assert np.array_equal(a, b)

    def test_ts_draws_independently(self):
        pts = np.random.default_rng(0).normal(size=(100, 3))
        a, b = sample_pair(pts, "ts", 40, np.random.default_rng(1))
        assert a.shape == b.shape == (40, 3)
        assert not np.array_equal(a, b)

    def test_rejects_oversampling(self):
        pts = np.zeros((10, 3)) + np.arange(10)[:, None]
        with pytest.raises(ValueError, match="only 10"):
            sample_pair(pts, "ts", 11, 0)

    def test_rejects_unknown_mode(self):
        with pytest.raises(ValueError):
            sample_pair(np.ones((5, 3)), "thrice", 2, 0)


class TestCropPartial:
    def test_keep_counts_match_ceiling(self):
        rng = np.random.default_rng(2)
        pts = rng.normal(size=(1024, 3))
        for manner in ("prnet", "rpmnet"):
            out = crop_partial(pts, manner, 0.7, np.random.default_rng(3))
            assert out.shape == (717, 3)  # ceil(0.7 * 1024)

    def test_keep_all_is_identity(self):
        pts = np.random.default_rng(4).normal(size=(50, 3))
        assert np.array_equal(crop_partial(pts, "prnet", 1.0, 0), pts)

    def test_prnet_keeps_nearest_to_viewpoint(self):
        rng = np.random.default_rng(5)
        pts = rng.normal(size=(200, 3))
        out, info = crop_partial(pts, "prnet", 0.5, np.random.default_rng(6), return_info=True)
        m = out.shape[0]
        dist = np.linalg.norm(pts - info["viewpoint"], axis=1)
        cutoff = np.sort(dist)[m - 1]
        assert np.all(np.linalg.norm(out - info["viewpoint"], axis=1) <= cutoff + 1e-12)

    def test_rpmnet_is_a_half_space(self):
        rng = np.random.default_rng(7)
        pts = rng.normal(size=(300, 3))
        out, info = crop_partial(pts, "rpmnet", 0.6, np.random.default_rng(8), return_info=True)
        assert out.shape == (math.ceil(0.6 * 300), 3)
        kept_proj = out @ info["normal"]
        dropped = np.array([p for p in pts if not any(np.array_equal(p, q) for q in out)])
        assert np.all(dropped @ info["normal"] <= kept_proj.min() + 1e-12)

    def test_crop_preserves_original_order(self):
        # indices are sorted, so surviving points keep their relative order
        pts = np.random.default_rng(9).normal(size=(100, 3))
        out = crop_partial(pts, "rpmnet", 0.5, np.random.default_rng(10))
        idx = [int(np.flatnonzero((pts == p).all(axis=1))[0]) for p in out]
        assert idx == sorted(idx)

    def test_too_few_survivors_rejected(self):
        with pytest.raises(ValueError, match="< 3"):
            crop_partial(np.random.default_rng(0).normal(size=(5, 3)), "prnet", 0.4, 0)

    def test_unknown_manner(self):
        with pytest.raises(ValueError):
            crop_partial(np.ones((10, 3)), "voxel", 0.5, 0)


class TestNoise:
    def test_zero_sigma_is_identity(self):
        pts = np.random.default_rng(0).normal(size=(20, 3))
        assert add_noise(pts, 0.0, 0.05, 0) is pts

    def test_noise_is_clipped(self):
        pts = np.zeros((5000, 3))
        out = add_noise(pts, 0.2, 0.05, np.random.default_rng(1))
        assert np.abs(out).max() <= 0.05
        # with sigma >> clip, some draws must actually hit the bound
        assert np.abs(out).max() == pytest.approx(0.05)

    def test_seeded_reproducibility(self):
        pts = np.random.default_rng(2).normal(size=(30, 3))
        a = add_noise(pts, 0.01, 0.05, np.random.default_rng(3))
        b = add_noise(pts, 0.01, 0.05, np.random.default_rng(3))
        assert np.array_equal(a, b)

    def test_parameter_validation(self):
        with pytest.raises(ValueError):
            add_noise(np.ones((3, 3)), -0.1, 0.05, 0)
        with pytest.raises(ValueError):
            add_noise(np.ones((3, 3)), 0.1, 0.0, 0)


class TestMakePair:
    def test_full_overlap_reference_matches_gt(self):
        cfg = small_config(mode="os", crop_manner="none", keep_fraction=1.0, noise_sigma=0.0)
        shapes = load_shapes("procedural", "train", count=1, n_surface_samples=256, seed=0)
        pair = make_pair(shapes[0], cfg, np.random.default_rng(5))
        assert np.allclose(pair.reference, pair.gt.apply(pair.source), atol=1e-12)

    def test_partial_sizes(self):
        cfg = small_config(mode="ts", crop_manner="rpmnet", keep_fraction=0.7)
        shapes = load_shapes("procedural", "train", count=1, n_surface_samples=256, seed=0)
        pair = make_pair(shapes[0], cfg, np.random.default_rng(5))
        expected = math.ceil(0.7 * cfg.n_points)
        assert pair.source.shape == (expected, 3)
        assert pair.reference.shape == (expected, 3)

    def test_gt_within_configured_ranges(self):
        cfg = small_config(max_angle=45.0, max_translation=0.5)
        shapes = load_shapes("procedural", "train", count=1, n_surface_samples=256, seed=0)
        for seed in range(20):
            pair = make_pair(shapes[0], cfg, np.random.default_rng(seed))
            assert pair.gt.rotation.angle_deg() <= 45.0 + 1e-9
            assert np.abs(pair.gt.translation).max() <= 0.5


class TestBuildDataset:
    def test_deterministic(self):
        cfg = small_config(noise_sigma=0.01)
        pairs_a, man_a = build_dataset(cfg, "train")
        pairs_b, man_b = build_dataset(cfg, "train")
        assert man_a.records == man_b.records
        for pa, pb in zip(pairs_a, pairs_b):
            assert np.array_equal(pa.source, pb.source)
            assert np.array_equal(pa.reference, pb.reference)
            assert np.array_equal(pa.gt.as_matrix4(), pb.gt.as_matrix4())

    def test_pair_seeds_are_distinct(self):
        cfg = small_config()
        _, manifest = build_dataset(cfg, "train")
        seeds = [rec["seed"] for rec in manifest.records]
        assert len(set(seeds)) == len(seeds)

    def test_split_sizes(self):
        cfg = small_config()
        for split, expect in (("train", 6), ("val", 2), ("test", 2)):
            pairs, manifest = build_dataset(cfg, split)
            assert len(pairs) == expect
            assert len(manifest.records) == expect

    def test_different_seed_different_data(self):
        pairs_a, _ = build_dataset(small_config(seed=0), "train")
        pairs_b, _ = build_dataset(small_config(seed=1), "train")
        assert not np.array_equal(pairs_a[0].source, pairs_b[0].source)


class TestManifestRoundTrip:
    def test_pairs_regenerate_exactly(self, tmp_path):
        cfg = small_config(noise_sigma=0.01)
        pairs, manifest = build_dataset(cfg, "val")
        path = tmp_path / "manifest.json"
        write_manifest(manifest, path)
        regenerated = pairs_from_manifest(read_manifest(path))
        assert len(regenerated) == len(pairs)
        for pa, pb in zip(pairs, regenerated):
            assert np.array_equal(pa.source, pb.source)
            assert np.array_equal(pa.reference, pb.reference)
            assert np.array_equal(pa.gt.as_matrix4(), pb.gt.as_matrix4())

    def test_parse_error_reports_location(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{"format": "dualreg-manifest",\n  "version": oops\n}')
        with pytest.raises(ManifestError, match="line 2"):
            read_manifest(p)

    def test_wrong_format_rejected(self, tmp_path):
        p = tmp_path / "other.json"
        p.write_text('{"format": "something-else", "version": 1}')
        with pytest.raises(ManifestError, match="not a"):
            read_manifest(p)

    def test_wrong_version_rejected(self, tmp_path):
        cfg = small_config()
        _, manifest = build_dataset(cfg, "val")
        manifest.version = 99
        p = tmp_path / "v99.json"
        write_manifest(manifest, p)
        with pytest.raises(ManifestError, match="version 99"):
            read_manifest(p)

    def test_unknown_shape_in_records(self, tmp_path):
        cfg = small_config()
        _, manifest = build_dataset(cfg, "val")
        manifest.records[0]["shape_id"] = "procedural/val/999_ghost"
        p = tmp_path / "ghost.json"
        write_manifest(manifest, p)
        with pytest.raises(ManifestError, match="unknown shape"):
            pairs_from_manifest(read_manifest(p))


class TestDataConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            DataConfig(mode="never")
        with pytest.raises(ValueError):
            DataConfig(crop_manner="laser")
        with pytest.raises(ValueError):
            DataConfig(keep_fraction=0.0)
        with pytest.raises(ValueError):
            DataConfig(noise_sigma=-1.0)

    def test_counts_by_split(self):
        cfg = DataConfig(train_pairs=10, val_pairs=3, test_pairs=4)
        assert cfg.pair_count("train") == 10
        assert cfg.pair_count("val") == 3
        assert cfg.pair_count("test") == 4
