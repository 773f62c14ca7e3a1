import numpy as np
import pytest

from abyss.errors import ConfigError, InvalidDataError, ParseError, ShapeError
from abyss.grid import MIN_STD
from abyss.interp import upsample
from abyss.synth import (DESK_REGIONS, DatasetManifest, SyntheticSpec,
                         build_manifest, default_region_configs, degrade,
                         generate_bathymetry, load_ascii_grid, load_dataset,
                         read_raster, region_slug, tile_seed, write_raster)


class TestGenerate:
    def test_same_seed_bit_identical(self):
        spec = SyntheticSpec(seed=99, size=64)
        a = generate_bathymetry(spec)
        b = generate_bathymetry(spec)
        assert np.array_equal(a, b)

    def test_all_components_off_gives_constant(self):
        spec = SyntheticSpec(seed=1, size=32, base_depth=-2500.0, relief_amplitude=0.0,
                             n_seamounts=0, n_ridges=0, n_trenches=0, noise_sigma=0.0)
        grid = generate_bathymetry(spec)
        assert np.all(grid == -2500.0)

    def test_different_seeds_differ(self):
        a = generate_bathymetry(SyntheticSpec(seed=1, size=64))
        b = generate_bathymetry(SyntheticSpec(seed=2, size=64))
        frac_diff = np.mean(a != b)
        assert frac_diff >= 0.01

    def test_depths_non_positive(self):
        grid = generate_bathymetry(SyntheticSpec(seed=5, size=64, base_depth=-100.0,
                                                 relief_amplitude=4000.0))
        assert grid.max() <= 0.0

    def test_spec_validation(self):
        with pytest.raises(ConfigError):
            SyntheticSpec(size=4)
        with pytest.raises(ConfigError):
            SyntheticSpec(noise_sigma=-1.0)

    def test_tile_seed_is_order_independent(self):
        assert tile_seed(7, 2, 5) == tile_seed(7, 2, 5)
        assert tile_seed(7, 2, 5) != tile_seed(7, 2, 6)
        assert tile_seed(7, 2, 5) != tile_seed(8, 2, 5)


class TestDegrade:
    def test_2x2_mean(self):
        out = degrade(np.array([[1.0, 2.0], [3.0, 4.0]]), 2)
        assert np.array_equal(out, [[2.5]])

    def test_constant_preserved(self):
        out = degrade(np.full((6, 6), -42.0), 3)
        assert np.allclose(out, -42.0)

    def test_checkerboard_averages_to_half(self):
        board = np.indices((8, 8)).sum(axis=0) % 2
        out = degrade(board.astype(float), 2)
        assert np.allclose(out, 0.5)

    def test_non_divisible_rejected(self):
        with pytest.raises(ShapeError):
            degrade(np.zeros((6, 6)), 4)

    def test_mean_preserved_through_degrade_and_upsample(self):
        hr = generate_bathymetry(SyntheticSpec(seed=3, size=64))
        lr = degrade(hr, 2)
        up = upsample(lr, 2, "nearest")
        assert up.mean() == pytest.approx(hr.mean(), abs=1e-9)


class TestRawRaster:
    def test_round_trip(self, tmp_path):
        grid = generate_bathymetry(SyntheticSpec(seed=4, size=16))
        path = tmp_path / "tile.f32"
        write_raster(path, grid)
        back = read_raster(path)
        assert back.shape == grid.shape
        assert np.allclose(back, grid, atol=1e-3)  # float32 storage

    def test_header_is_eight_bytes(self, tmp_path):
        path = tmp_path / "t.f32"
        write_raster(path, np.zeros((3, 5)))
        raw = path.read_bytes()
        assert len(raw) == 8 + 3 * 5 * 4
        assert int.from_bytes(raw[0:4], "little") == 3
        assert int.from_bytes(raw[4:8], "little") == 5

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "bad.f32"
        path.write_bytes(b"\x02\x00\x00\x00\x02\x00\x00\x00\x00\x00")
        with pytest.raises(ParseError):
            read_raster(path)


class TestAsciiGrid:
    def write(self, tmp_path, text):
        path = tmp_path / "grid.asc"
        path.write_text(text)
        return path

    def test_direct_read(self, tmp_path):
        path = self.write(tmp_path, "\n".join([
            "ncols 2", "nrows 2", "xllcorner 0.0", "yllcorner 0.0",
            "cellsize 30.0", "NODATA_value -9999", "1 2", "3 4", ""]))
        grid = load_ascii_grid(path)
        assert np.array_equal(grid, [[1.0, 2.0], [3.0, 4.0]])

    def test_nodata_replaced_by_mean_of_valid(self, tmp_path):
        path = self.write(tmp_path, "\n".join([
            "ncols 2", "nrows 2", "xllcorner 0", "yllcorner 0",
            "cellsize 1", "NODATA_value -9999", "0 0", "0 -9999", ""]))
        grid = load_ascii_grid(path)
        assert grid[1, 1] == 0.0

    def test_missing_nrows_is_parse_error(self, tmp_path):
        path = self.write(tmp_path, "\n".join([
            "ncols 2", "xllcorner 0", "yllcorner 0", "cellsize 1",
            "1 2", ""]))
        with pytest.raises(ParseError):
            load_ascii_grid(path)

    def test_value_count_mismatch(self, tmp_path):
        path = self.write(tmp_path, "\n".join([
            "ncols 2", "nrows 2", "xllcorner 0", "yllcorner 0",
            "cellsize 1", "NODATA_value -9999", "1 2 3", ""]))
        with pytest.raises(ParseError):
            load_ascii_grid(path)

    def test_bad_token_reports_line_number(self, tmp_path):
        path = self.write(tmp_path, "\n".join([
            "ncols 2", "nrows 1", "xllcorner 0", "yllcorner 0",
            "cellsize 1", "NODATA_value -9999", "1 oops", ""]))
        with pytest.raises(ParseError) as exc:
            load_ascii_grid(path)
        assert exc.value.line == 7

    def test_all_nodata_rejected(self, tmp_path):
        path = self.write(tmp_path, "\n".join([
            "ncols 1", "nrows 1", "xllcorner 0", "yllcorner 0",
            "cellsize 1", "NODATA_value -9999", "-9999", ""]))
        with pytest.raises(InvalidDataError):
            load_ascii_grid(path)


class TestManifest:
    def test_desk_default_split_matches_published_ratios(self):
        manifest, dataset = build_manifest(
            regions=[(n, c, SyntheticSpec(size=16, **m)) for n, c, m in DESK_REGIONS],
            tile_size=16, seed=1)
        train_counts = {r.name: r.train_count for r in manifest.regions}
        assert train_counts == {
            "Eastern Pacific Basin": 240,
            "Eastern Atlantic Coast": 144,
            "Western Pacific Region": 120,
            "South Pacific Region": 64,
            "North Atlantic Basin": 40,
            "Indian Ocean Basin": 8,
        }
        # proportions track the full-scale regional distribution
        published = {"Eastern Pacific Basin": 24000, "Eastern Atlantic Coast": 14400,
                     "Western Pacific Region": 12000, "South Pacific Region": 6400,
                     "North Atlantic Basin": 4000, "Indian Ocean Basin": 720}
        total_desk = sum(train_counts.values())
        total_pub = sum(published.values())
        for name, count in train_counts.items():
            assert count / total_desk == pytest.approx(published[name] / total_pub,
                                                       abs=0.005)

    def test_split_ratio_within_one_tile(self):
        manifest, _ = build_manifest(
            regions=[("Western Pacific Region", 37, SyntheticSpec(size=16))],
            tile_size=16, seed=2)
        region = manifest.regions[0]
        assert abs(region.train_count - 0.8 * 37) <= 1.0
        assert region.train_count + region.val_count == 37

    def test_single_region_exact_split(self):
        manifest, dataset = build_manifest(
            regions=[("South Pacific Region", 10, SyntheticSpec(size=16))],
            tile_size=16, seed=3)
        assert manifest.regions[0].train_count == 8
        assert manifest.regions[0].val_count == 2
        assert len(dataset["train"]) == 8 and len(dataset["val"]) == 2

    def test_zero_region_count_rejected(self):
        with pytest.raises(ConfigError):
            build_manifest(regions=[("Indian Ocean Basin", 0, SyntheticSpec(size=16))],
                           tile_size=16)

    def test_normalization_from_train_split_spans_unit_interval(self):
        from abyss.grid import normalize
        manifest, dataset = build_manifest(
            regions=[("North Atlantic Basin", 20, SyntheticSpec(size=16))],
            tile_size=16, seed=4)
        normalized = [normalize(p.hr, manifest.normalization) for p in dataset["train"]]
        stack = np.stack(normalized)
        assert stack.min() == pytest.approx(0.0, abs=1e-12)
        assert stack.max() == pytest.approx(1.0, abs=1e-12)

    def test_constant_tiles_trigger_std_floor(self):
        flat = SyntheticSpec(size=16, base_depth=-100.0, relief_amplitude=0.0,
                             n_seamounts=0, n_ridges=0, n_trenches=0, noise_sigma=0.0)
        manifest, _ = build_manifest(regions=[("Indian Ocean Basin", 5, flat)],
                                     tile_size=16, seed=5)
        assert manifest.normalization.mean == pytest.approx(-100.0)
        assert manifest.normalization.std == MIN_STD

    def test_region_names_are_the_six_published(self):
        names = [name for name, _, _ in DESK_REGIONS]
        assert sorted(names) == sorted([
            "Eastern Pacific Basin", "Eastern Atlantic Coast", "Western Pacific Region",
            "South Pacific Region", "North Atlantic Basin", "Indian Ocean Basin"])

    def test_manifest_json_round_trip(self):
        manifest, _ = build_manifest(
            regions=[("Indian Ocean Basin", 3, SyntheticSpec(size=16))],
            tile_size=16, seed=6)
        back = DatasetManifest.from_json(manifest.to_json())
        assert back == manifest

    def test_write_and_load_dataset(self, tmp_path):
        manifest, dataset = build_manifest(
            regions=[("South Pacific Region", 5, SyntheticSpec(size=16))],
            tile_size=16, seed=7, out_dir=tmp_path)
        loaded_manifest, loaded = load_dataset(tmp_path)
        assert loaded_manifest == manifest
        assert len(loaded["train"]) == len(dataset["train"])
        for a, b in zip(loaded["train"], dataset["train"]):
            assert np.allclose(a.hr, b.hr, atol=1e-3)
            assert a.region == b.region

    def test_default_regions_scale_with_tile_size(self):
        regions = default_region_configs(tile_size=32)
        assert all(spec.size == 32 for _, _, spec in regions)

    def test_region_slug(self):
        assert region_slug("Eastern Pacific Basin") == "eastern-pacific-basin"
