"""
Simworld Module - Ground-truth disaster scenes and the cell-observation protocol.

A scene is a thinned, marked log-Gaussian Cox process realized on the
lattice: persons ~ Poisson(Δλ), detectable ~ Binomial(persons, r), and
detectable-and-injured ~ Binomial(detectable, q).
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set

import numpy as np
import pandas as pd
from scipy.special import expit

from spatial.errors import ArgumentError, ModelError, UsageError
from spatial.geo import CovariateRaster, Grid
from spatial.gp import GmrfPrecision, sample_field
from spatial.types import Link, Observation

logger = logging.getLogger(__name__)

FIELD_ROLES = ('population', 'detection', 'injury')


@dataclass(frozen=True)
class FieldSpec:
    """Linear predictor intercept + Σ weight·layer (+ latent field) under a link."""
    link: Link
    intercept: float = 0.0
    weights: Dict[str, float] = field(default_factory=dict)
    latent: Optional[GmrfPrecision] = None

    def validate(self, rasters: CovariateRaster) -> None:
        for name in self.weights:
            if name not in rasters.layers:
                raise ModelError(f"Field weight refers to unknown layer '{name}'")

    def linear_predictor(self, rasters: CovariateRaster, xi: Optional[np.ndarray] = None) -> np.ndarray:
        z = np.full(rasters.grid.n_cells, float(self.intercept))
        for name, w in self.weights.items():
            z = z + w * rasters.layer(name)
        if xi is not None:
            z = z + xi
        return z


@dataclass(frozen=True)
class WorldRealization:
    grid: Grid
    n_total: np.ndarray
    n_detectable: np.ndarray
    m_detectable_injured: np.ndarray
    intensity: np.ndarray    # λ per m²
    detection: np.ndarray    # r, clamped to [0, 1]
    injury: np.ndarray       # q

    @property
    def total_detectable(self) -> int:
        return int(self.n_detectable.sum())

    @property
    def total_injured(self) -> int:
        return int(self.m_detectable_injured.sum())

    def expected_injured(self) -> np.ndarray:
        """Δ·λ·r·q per cell: the truth counterpart of the predicted map."""
        return self.grid.cell_area * self.intensity * self.detection * self.injury


def _checked(z: np.ndarray, role: str) -> np.ndarray:
    bad = np.flatnonzero(~np.isfinite(z))
    if bad.size:
        raise ModelError(f"Non-finite {role} field value at cell {int(bad[0])}")
    return z


def realize_world(rasters: CovariateRaster, truth_specs: Dict[str, FieldSpec], seed: int,
                  field_seed: Optional[int] = None) -> WorldRealization:
    """
    Sample a scene. `truth_specs` maps 'population' (required), 'detection'
    and 'injury' (optional) to FieldSpecs. Latent fields are drawn from
    `field_seed` (defaults to a stream derived from `seed`).
    """
    if 'population' not in truth_specs:
        raise ArgumentError("A population field spec is required")
    unknown = set(truth_specs) - set(FIELD_ROLES)
    if unknown:
        raise ArgumentError(f"Unknown field roles: {sorted(unknown)}")
    for spec in truth_specs.values():
        spec.validate(rasters)

    grid = rasters.grid
    field_rng = np.random.default_rng(field_seed if field_seed is not None else [seed, 1])
    rng = np.random.default_rng(seed)

    def predictor(role: str) -> Optional[np.ndarray]:
        spec = truth_specs.get(role)
        if spec is None:
            return None
        xi = sample_field(spec.latent, field_rng) if spec.latent is not None else None
        return _checked(spec.linear_predictor(rasters, xi), role)

    z_pop = predictor('population')
    z_det = predictor('detection')
    z_inj = predictor('injury')

    with np.errstate(over='ignore'):
        intensity = np.exp(z_pop)
        mean_count = grid.cell_area * intensity
    _checked(mean_count, 'population')
    detection = np.ones(grid.n_cells) if z_det is None else np.exp(np.minimum(z_det, 0.0))
    injury = np.zeros(grid.n_cells) if z_inj is None else expit(z_inj)

    n_total = rng.poisson(mean_count)
    n_detectable = rng.binomial(n_total, detection)
    m_injured = rng.binomial(n_detectable, injury)

    world = WorldRealization(grid=grid, n_total=n_total, n_detectable=n_detectable,
                             m_detectable_injured=m_injured, intensity=intensity,
                             detection=detection, injury=injury)
    logger.info(f"Realized world seed={seed}: persons={int(n_total.sum())} "
                f"detectable={world.total_detectable} injured={world.total_injured}")
    return world


class SceneObserver:
    """Per-episode exploration bookkeeping around an immutable world."""

    def __init__(self, world: WorldRealization):
        self.world = world
        self.explored: Set[int] = set()
        self.observations: List[Observation] = []

    def observe_cell(self, cell: int, t: float) -> Observation:
        if not 0 <= cell < self.world.grid.n_cells:
            raise ArgumentError(f"Cell {cell} outside the grid")
        if cell in self.explored:
            raise UsageError(f"Cell {cell} was already observed in this episode")
        self.explored.add(cell)
        obs = Observation(cell=cell, n=int(self.world.n_detectable[cell]),
                          m=int(self.world.m_detectable_injured[cell]), t=float(t))
        self.observations.append(obs)
        return obs

    @property
    def complete(self) -> bool:
        return len(self.explored) == self.world.grid.n_cells


def world_to_frame(world: WorldRealization) -> pd.DataFrame:
    grid = world.grid
    cells = np.arange(grid.n_cells)
    return pd.DataFrame({
        'cell': cells,
        'i': cells % grid.nx,
        'j': cells // grid.nx,
        'n_total': world.n_total,
        'n_detectable': world.n_detectable,
        'm': world.m_detectable_injured,
    })


def scatter_points(world: WorldRealization, seed: int) -> pd.DataFrame:
    """Persons placed uniformly inside their cells, for scene pictures only."""
    grid = world.grid
    rng = np.random.default_rng(seed)
    cells = np.repeat(np.arange(grid.n_cells), world.n_total)
    i, j = cells % grid.nx, cells // grid.nx
    x = (i + rng.uniform(size=cells.size)) * grid.dx
    y = (j + rng.uniform(size=cells.size)) * grid.dy
    # within a cell the first n_detectable persons are the detectable ones,
    # and the first m of those are injured
    rank = np.arange(cells.size) - np.repeat(np.cumsum(world.n_total) - world.n_total, world.n_total)
    detectable = rank < world.n_detectable[cells]
    injured = rank < world.m_detectable_injured[cells]
    return pd.DataFrame({'x': x, 'y': y, 'cell': cells, 'detectable': detectable, 'injured': injured})
