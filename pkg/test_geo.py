import sys
import os
sys.path.insert(0, os.path.abspath(os.path.dirname(__file__)))

import math

import numpy as np
import pytest

from spatial.errors import ArgumentError, RasterFormatError
from spatial.geo import (
    CovariateRaster,
    build_grid,
    format_raster,
    gaussian_site_layer,
    generate_synthetic_map,
    load_raster,
    load_raster_directory,
    read_raster_grid,
    save_raster,
)
from spatial.types import TERRAIN_LAYERS


def test_grid_cell_geometry_of_full_scale_lattice():
    grid = build_grid(4000, 2700, 50, 33)
    assert grid.n_cells == 1650
    assert grid.cell_area == pytest.approx(6545.4545, rel=1e-6)
    assert grid.dx == pytest.approx(80.0)
    assert grid.dy == pytest.approx(81.818, rel=1e-4)
    x, y = grid.center(0, 0)
    assert x == pytest.approx(40.0)
    assert y == pytest.approx(40.909, rel=1e-4)


def test_single_cell_grid():
    grid = build_grid(100, 100, 1, 1)
    assert grid.n_cells == 1
    assert grid.cell_area == pytest.approx(10000.0)
    assert grid.neighbors(0) == []


def test_grid_rejects_non_positive_dimensions():
    with pytest.raises(ArgumentError):
        build_grid(0, 100, 2, 2)
    with pytest.raises(ArgumentError):
        build_grid(100, 100, 2, 0)


def test_flat_index_is_row_major_in_j():
    grid = build_grid(300, 200, 3, 2)
    assert grid.flatten(2, 1) == 5
    assert grid.unflatten(5) == (2, 1)
    with pytest.raises(ArgumentError):
        grid.flatten(3, 0)
    with pytest.raises(ArgumentError):
        grid.unflatten(6)


def test_neighbors_and_distances():
    grid = build_grid(300, 300, 3, 3)
    assert sorted(grid.neighbors(4)) == [1, 3, 5, 7]
    assert sorted(grid.neighbors(0)) == [1, 3]
    assert grid.distance_m(0, 1) == pytest.approx(100.0)
    assert grid.distance_m(0, 8) == pytest.approx(math.hypot(200, 200))


def test_load_two_by_two_raster(tmp_path):
    path = tmp_path / "elevation.asc"
    path.write_text("2 2 100 100\n0 1\n0 1\n")
    grid = build_grid(100, 100, 2, 2)
    values = load_raster(str(path), grid)
    assert list(values) == [0.0, 1.0, 0.0, 1.0]


def test_load_raster_with_missing_values_reports_line(tmp_path):
    path = tmp_path / "bad.asc"
    path.write_text("2 2 100 100\n0 1\n0\n")
    with pytest.raises(RasterFormatError) as info:
        load_raster(str(path), build_grid(100, 100, 2, 2))
    assert info.value.line == 3


def test_load_raster_with_bad_token_reports_column(tmp_path):
    path = tmp_path / "bad.asc"
    path.write_text("2 2 100 100\n0 1\n0 x\n")
    with pytest.raises(RasterFormatError) as info:
        load_raster(str(path), build_grid(100, 100, 2, 2))
    assert (info.value.line, info.value.column) == (3, 2)


def test_load_raster_rejects_grid_mismatch(tmp_path):
    path = tmp_path / "layer.asc"
    path.write_text("3 1 300 100\n0 1 2\n")
    with pytest.raises(RasterFormatError):
        load_raster(str(path), build_grid(100, 100, 2, 2))


def test_saved_raster_reloads_bit_exact(tmp_path):
    grid = build_grid(4000, 2700, 7, 5)
    values = np.random.default_rng(4).normal(size=grid.n_cells) * 1e3
    path = str(tmp_path / "sub" / "noise.asc")
    save_raster(path, grid, values)
    assert np.array_equal(load_raster(path, grid), values)
    assert read_raster_grid(path) == grid


def test_format_raster_writes_rows_from_j_zero():
    grid = build_grid(200, 200, 2, 2)
    text = format_raster(grid, np.array([1.0, 2.0, 3.0, 4.0]))
    assert text.splitlines()[1:] == ["1.0 2.0", "3.0 4.0"]


def test_load_raster_directory_collects_layers(tmp_path):
    grid = build_grid(200, 100, 2, 1)
    save_raster(str(tmp_path / "forest.asc"), grid, [1.0, 0.0])
    save_raster(str(tmp_path / "field.asc"), grid, [0.0, 1.0])
    rasters = load_raster_directory(str(tmp_path))
    assert rasters.grid == grid
    assert sorted(rasters.names) == ["field", "forest"]
    assert rasters.dominant_class() == ["forest", "field"]


def test_empty_raster_directory_is_an_error(tmp_path):
    with pytest.raises(RasterFormatError):
        load_raster_directory(str(tmp_path))


def test_indicator_layers_must_lie_in_unit_interval():
    grid = build_grid(200, 100, 2, 1)
    with pytest.raises(ArgumentError):
        CovariateRaster(grid, {"water": np.array([0.0, 2.0])})
    with pytest.raises(ArgumentError):
        CovariateRaster(grid, {"slope": np.array([0.0, np.nan])})


def test_synthetic_map_is_deterministic_in_seed():
    grid = build_grid(4000, 2700, 25, 17)
    a = generate_synthetic_map(grid, 11)
    b = generate_synthetic_map(grid, 11)
    for name in TERRAIN_LAYERS:
        assert np.array_equal(a.layer(name), b.layer(name))


def test_synthetic_map_indicators_partition_every_cell():
    grid = build_grid(4000, 2700, 25, 17)
    rasters = generate_synthetic_map(grid, 3)
    total = rasters.stack(TERRAIN_LAYERS).sum(axis=1)
    assert np.all(total == 1.0)


def test_synthetic_maps_contain_every_class():
    grid = build_grid(4000, 2700, 25, 17)
    for seed in range(100):
        rasters = generate_synthetic_map(grid, seed)
        for name in TERRAIN_LAYERS:
            assert rasters.layer(name).sum() >= 1, f"seed {seed} lacks {name}"


def test_gaussian_site_layer_closed_forms():
    grid = build_grid(500, 100, 5, 1)
    center = grid.center(2, 0)
    layer = gaussian_site_layer(grid, center, lengthscale_m=100.0)
    assert layer[2] == pytest.approx(1.0)
    assert layer[3] == pytest.approx(math.exp(-0.5))
    assert np.all(gaussian_site_layer(grid, center, 100.0, amplitude=0.0) == 0.0)
    with pytest.raises(ArgumentError):
        gaussian_site_layer(grid, center, 0.0)
