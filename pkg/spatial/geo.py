"""
Geo Module - Lattice geometry, covariate rasters, ASCII-grid I/O and synthetic maps.
"""

import os
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from spatial.errors import ArgumentError, RasterFormatError
from spatial.types import TERRAIN_LAYERS, TerrainClass

logger = logging.getLogger(__name__)

RASTER_SUFFIX = ".asc"


@dataclass(frozen=True)
class Grid:
    """Rectangular lattice of nx by ny equally sized cells."""
    extent_x_m: float
    extent_y_m: float
    nx: int
    ny: int

    def __post_init__(self):
        if self.extent_x_m <= 0 or self.extent_y_m <= 0 or self.nx <= 0 or self.ny <= 0:
            raise ArgumentError(
                f"Grid dimensions must be positive, got extent=({self.extent_x_m}, "
                f"{self.extent_y_m}) cells=({self.nx}, {self.ny})"
            )

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def dx(self) -> float:
        return self.extent_x_m / self.nx

    @property
    def dy(self) -> float:
        return self.extent_y_m / self.ny

    @property
    def cell_area(self) -> float:
        return (self.extent_x_m * self.extent_y_m) / (self.nx * self.ny)

    def flatten(self, i: int, j: int) -> int:
        if not (0 <= i < self.nx and 0 <= j < self.ny):
            raise ArgumentError(f"Cell ({i}, {j}) outside {self.nx}x{self.ny} grid")
        return j * self.nx + i

    def unflatten(self, k: int) -> Tuple[int, int]:
        if not 0 <= k < self.n_cells:
            raise ArgumentError(f"Flat index {k} outside grid of {self.n_cells} cells")
        return k % self.nx, k // self.nx

    def center(self, i: int, j: int) -> Tuple[float, float]:
        return (i + 0.5) * self.dx, (j + 0.5) * self.dy

    def centers(self) -> np.ndarray:
        """(n_cells, 2) array of cell centers in meters, flat-index order."""
        ii, jj = np.meshgrid(np.arange(self.nx), np.arange(self.ny))
        return np.column_stack([(ii.ravel() + 0.5) * self.dx, (jj.ravel() + 0.5) * self.dy])

    def neighbors(self, k: int) -> List[int]:
        """4-adjacent cells in the order east, west, north, south."""
        i, j = self.unflatten(k)
        out = []
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            a, b = i + di, j + dj
            if 0 <= a < self.nx and 0 <= b < self.ny:
                out.append(b * self.nx + a)
        return out

    def distance_m(self, a: int, b: int) -> float:
        """Euclidean distance between two cell centers."""
        ia, ja = self.unflatten(a)
        ib, jb = self.unflatten(b)
        return float(np.hypot((ia - ib) * self.dx, (ja - jb) * self.dy))


def build_grid(extent_x_m: float, extent_y_m: float, nx: int, ny: int) -> Grid:
    return Grid(float(extent_x_m), float(extent_y_m), int(nx), int(ny))


@dataclass(frozen=True)
class CovariateRaster:
    """Named per-cell covariate layers over a grid."""
    grid: Grid
    layers: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        frozen = {}
        for name, values in self.layers.items():
            frozen[name] = _checked_layer(self.grid, name, values)
        object.__setattr__(self, 'layers', frozen)

    @property
    def names(self) -> List[str]:
        return list(self.layers)

    def layer(self, name: str) -> np.ndarray:
        if name not in self.layers:
            raise ArgumentError(f"Unknown raster layer: {name}")
        return self.layers[name]

    def with_layer(self, name: str, values: np.ndarray) -> 'CovariateRaster':
        layers = dict(self.layers)
        layers[name] = values
        return CovariateRaster(self.grid, layers)

    def stack(self, names: Iterable[str]) -> np.ndarray:
        """(n_cells, len(names)) design matrix of the named layers."""
        names = list(names)
        if not names:
            return np.zeros((self.grid.n_cells, 0))
        return np.column_stack([self.layer(n) for n in names])

    def dominant_class(self) -> List[str]:
        present = [t for t in TERRAIN_LAYERS if t in self.layers]
        if not present:
            raise ArgumentError("Raster carries none of the canonical terrain layers")
        idx = np.argmax(self.stack(present), axis=1)
        return [present[k] for k in idx]


def _checked_layer(grid: Grid, name: str, values) -> np.ndarray:
    arr = np.array(values, dtype=float).ravel()
    if arr.size != grid.n_cells:
        raise ArgumentError(f"Layer '{name}' has {arr.size} values, grid needs {grid.n_cells}")
    if not np.all(np.isfinite(arr)):
        raise ArgumentError(f"Layer '{name}' contains non-finite values")
    if name in TERRAIN_LAYERS and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ArgumentError(f"Indicator layer '{name}' must lie in [0, 1]")
    arr.setflags(write=False)
    return arr


# === ASCII-grid raster format ===
# line 1: nx ny extent_x extent_y
# then ny rows (j = 0..ny-1) of nx values (i = 0..nx-1)

def _read_header(lines: List[str]) -> Tuple[int, int, float, float]:
    if not lines or not lines[0].strip():
        raise RasterFormatError("Missing raster header", line=1)
    tokens = lines[0].split()
    if len(tokens) != 4:
        raise RasterFormatError(f"Header needs 4 fields (nx ny extent_x extent_y), got {len(tokens)}", line=1)
    try:
        nx, ny = int(tokens[0]), int(tokens[1])
    except ValueError:
        raise RasterFormatError("Header cell counts must be integers", line=1)
    try:
        ex, ey = float(tokens[2]), float(tokens[3])
    except ValueError:
        raise RasterFormatError("Header extents must be numeric", line=1)
    return nx, ny, ex, ey


def _parse_raster_text(text: str) -> Tuple[Grid, np.ndarray]:
    lines = text.splitlines()
    nx, ny, ex, ey = _read_header(lines)
    try:
        grid = build_grid(ex, ey, nx, ny)
    except ArgumentError as e:
        raise RasterFormatError(str(e), line=1)
    rows = [line for line in lines[1:]]
    # trailing blank lines are tolerated
    while rows and not rows[-1].strip():
        rows.pop()
    if len(rows) != ny:
        raise RasterFormatError(f"Expected {ny} data rows, found {len(rows)}", line=len(rows) + 2)
    values = np.empty(grid.n_cells)
    for j, row in enumerate(rows):
        tokens = row.split()
        if len(tokens) != nx:
            raise RasterFormatError(f"Expected {nx} values, found {len(tokens)}", line=j + 2)
        for i, tok in enumerate(tokens):
            try:
                values[j * nx + i] = float(tok)
            except ValueError:
                raise RasterFormatError(f"Non-numeric token '{tok}'", line=j + 2, column=i + 1)
    return grid, values


def load_raster(path: str, grid: Grid) -> np.ndarray:
    """Read one ASCII-grid layer and check it against the target grid."""
    with open(path, 'r', encoding='utf-8') as f:
        text = f.read()
    file_grid, values = _parse_raster_text(text)
    if (file_grid.nx, file_grid.ny) != (grid.nx, grid.ny):
        raise RasterFormatError(
            f"Raster is {file_grid.nx}x{file_grid.ny}, grid is {grid.nx}x{grid.ny}", line=1
        )
    return values


def read_raster_grid(path: str) -> Grid:
    with open(path, 'r', encoding='utf-8') as f:
        first = f.readline()
    nx, ny, ex, ey = _read_header([first])
    return build_grid(ex, ey, nx, ny)


def format_raster(grid: Grid, values: np.ndarray) -> str:
    """ASCII-grid text for a layer; repr() keeps floats bit-exact on reload."""
    values = np.asarray(values, dtype=float).ravel()
    if values.size != grid.n_cells:
        raise ArgumentError(f"Layer has {values.size} values, grid needs {grid.n_cells}")
    lines = [f"{grid.nx} {grid.ny} {grid.extent_x_m!r} {grid.extent_y_m!r}"]
    for j in range(grid.ny):
        row = values[j * grid.nx:(j + 1) * grid.nx]
        lines.append(" ".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def save_raster(path: str, grid: Grid, values: np.ndarray) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        f.write(format_raster(grid, values))


def load_raster_directory(directory: str, grid: Optional[Grid] = None) -> CovariateRaster:
    """Load every '<layer>.asc' file in a directory into one raster."""
    files = sorted(f for f in os.listdir(directory) if f.endswith(RASTER_SUFFIX))
    if not files:
        raise RasterFormatError(f"No {RASTER_SUFFIX} layers found in {directory}")
    if grid is None:
        grid = read_raster_grid(os.path.join(directory, files[0]))
    layers = {}
    for name in files:
        layers[name[:-len(RASTER_SUFFIX)]] = load_raster(os.path.join(directory, name), grid)
    logger.info(f"Loaded {len(layers)} layers from {directory}")
    return CovariateRaster(grid, layers)


def gaussian_site_layer(grid: Grid, center_m: Tuple[float, float], lengthscale_m: float,
                        amplitude: float = 1.0) -> np.ndarray:
    """Gaussian bump around a reported site, evaluated at cell centers."""
    if lengthscale_m <= 0:
        raise ArgumentError(f"Site lengthscale must be positive, got {lengthscale_m}")
    c = grid.centers()
    d2 = (c[:, 0] - center_m[0]) ** 2 + (c[:, 1] - center_m[1]) ** 2
    return amplitude * np.exp(-d2 / (2.0 * lengthscale_m ** 2))


# === Synthetic maps ===

def _disc(grid: Grid, center: Tuple[float, float], radius_x: float, radius_y: float) -> np.ndarray:
    c = grid.centers()
    return ((c[:, 0] - center[0]) / radius_x) ** 2 + ((c[:, 1] - center[1]) / radius_y) ** 2 <= 1.0


def _polyline_cells(grid: Grid, points: List[Tuple[float, float]]) -> np.ndarray:
    """Cells crossed by a polyline, sampled at a quarter of the cell size."""
    mask = np.zeros(grid.n_cells, dtype=bool)
    step = 0.25 * min(grid.dx, grid.dy)
    for (x0, y0), (x1, y1) in zip(points[:-1], points[1:]):
        n = max(2, int(np.hypot(x1 - x0, y1 - y0) / step) + 1)
        xs = np.linspace(x0, x1, n)
        ys = np.linspace(y0, y1, n)
        i = np.clip((xs / grid.dx).astype(int), 0, grid.nx - 1)
        j = np.clip((ys / grid.dy).astype(int), 0, grid.ny - 1)
        mask[j * grid.nx + i] = True
    return mask


def generate_synthetic_map(grid: Grid, seed: int) -> CovariateRaster:
    """
    One-hot terrain map with a town, a road through it, a lake and a forest.

    Deterministic in seed. Every class is present whenever the grid has at
    least five cells.
    """
    rng = np.random.default_rng(seed)
    W, H = grid.extent_x_m, grid.extent_y_m
    cls = np.full(grid.n_cells, TerrainClass.FIELD.value, dtype=object)

    # forest: upper quantile of smoothed noise
    noise = rng.standard_normal((grid.ny, grid.nx))
    smooth = gaussian_filter(noise, sigma=max(1.0, 0.12 * min(grid.nx, grid.ny)), mode='reflect').ravel()
    cls[smooth >= np.quantile(smooth, 0.7)] = TerrainClass.FOREST.value

    # town somewhere in the middle band, lake in the farthest corner from it
    town = (rng.uniform(0.3, 0.7) * W, rng.uniform(0.3, 0.7) * H)
    corners = [(0.15 * W, 0.15 * H), (0.85 * W, 0.15 * H), (0.15 * W, 0.85 * H), (0.85 * W, 0.85 * H)]
    lake = max(corners, key=lambda p: np.hypot(p[0] - town[0], p[1] - town[1]))
    lake = (lake[0] + rng.uniform(-0.05, 0.05) * W, lake[1] + rng.uniform(-0.05, 0.05) * H)
    cls[_disc(grid, lake, rng.uniform(0.08, 0.12) * W, rng.uniform(0.08, 0.12) * H)] = TerrainClass.WATER.value
    cls[_disc(grid, town, rng.uniform(0.08, 0.12) * W, rng.uniform(0.1, 0.15) * H)] = TerrainClass.BUILDINGS.value

    # road from the west edge through the town to the east edge
    road = [(0.0, rng.uniform(0.1, 0.9) * H), town, (W, rng.uniform(0.1, 0.9) * H)]
    cls[_polyline_cells(grid, road)] = TerrainClass.ROADS.value

    if grid.n_cells >= len(TERRAIN_LAYERS):
        _ensure_all_classes(cls, smooth)

    layers = {name: (cls == name).astype(float) for name in TERRAIN_LAYERS}
    logger.debug(f"Synthetic map seed={seed}: " + ", ".join(
        f"{k}={int(v.sum())}" for k, v in layers.items()))
    return CovariateRaster(grid, layers)


def _ensure_all_classes(cls: np.ndarray, score: np.ndarray) -> None:
    """Reassign cells of the most common class to any class that is missing."""
    for name in TERRAIN_LAYERS:
        if np.any(cls == name):
            continue
        counts = {t: int(np.sum(cls == t)) for t in TERRAIN_LAYERS}
        donor = max(counts, key=counts.get)
        candidates = np.flatnonzero(cls == donor)
        cls[candidates[np.argmax(score[candidates])]] = name
