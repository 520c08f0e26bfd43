"""
Inference Module - Laplace-approximate posteriors for the lattice LGCP.

Two independent blocks are fitted:
- the Poisson block over (α_λ, β_λ, β_r, ξ_λ) on detected counts n,
- the Binomial block over (α_q, β_q, ξ_q) on detected injured m given n.

Each block's latent vector is u = (ξ, β). The negative Hessian of the log
posterior has the arrow structure

    H = [[Q + W,  W X      ],
         [Xᵀ W,   XᵀWX + P ]]

with Q + W banded, so every solve, log-determinant and marginal variance is
done through the banded factor of Q + W and a small dense Schur complement.
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sps
from numpy.polynomial.hermite import hermgauss
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import expit, gammaln, log_expit, logit

from spatial.errors import ArgumentError, ConfigError, ModelError, NumericalError
from spatial.geo import CovariateRaster, Grid
from spatial.gp import LOG_2PI, BandedCholesky, GmrfPrecision, bandwidth_ordering, log_density, matern_precision
from spatial.types import Link, Observation

logger = logging.getLogger(__name__)

# Newton settings
GRAD_TOL = 1e-6
MAX_NEWTON_ITER = 50
MAX_HALVINGS = 20

# Empirical Bayes settings
EB_BRACKET = math.log(4.0)
EB_TOL = 0.02
EB_MAX_SWEEPS = 2
VARIANCE_BOUNDS = (1e-3, 1e3)

GH_NODES = 9
INTERCEPT = 'intercept'

DEFAULT_POPULATION_RATE = math.exp(-10.0)   # persons per m²
DEFAULT_INJURY_RATE = 0.1
DEFAULT_COEFFICIENT_SD = 10.0
DEFAULT_INTERCEPT_SD = 1.0


# === Observations ===

@dataclass(frozen=True)
class ObservationData:
    """Observations gathered into per-cell arrays (one entry per visited cell)."""
    cells: np.ndarray
    n: np.ndarray
    m: np.ndarray

    @classmethod
    def from_observations(cls, observations: Sequence[Observation], grid: Grid) -> 'ObservationData':
        cells = np.array([o.cell for o in observations], dtype=int)
        if cells.size and (cells.min() < 0 or cells.max() >= grid.n_cells):
            raise ArgumentError("Observation cell outside the grid")
        if np.unique(cells).size != cells.size:
            raise ArgumentError("Each cell can be observed at most once")
        return cls(cells=cells,
                   n=np.array([o.n for o in observations], dtype=float),
                   m=np.array([o.m for o in observations], dtype=float))


# === Likelihood families ===

class Likelihood(ABC):
    """Cell likelihood of one block, as a function of the linear predictor η."""
    link: Link

    @abstractmethod
    def select(self, data: ObservationData) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(cells, response, trials) of the cells that carry likelihood."""

    @abstractmethod
    def log_likelihood(self, eta: np.ndarray, y: np.ndarray, trials: np.ndarray) -> float:
        pass

    @abstractmethod
    def derivatives(self, eta: np.ndarray, y: np.ndarray, trials: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Gradient and negative second derivative w.r.t. η."""


class PoissonLikelihood(Likelihood):
    link = Link.LOG

    def __init__(self, exposure: float):
        self.exposure = float(exposure)

    def select(self, data):
        return data.cells, data.n, np.ones_like(data.n)

    def log_likelihood(self, eta, y, trials):
        with np.errstate(over='ignore'):
            rate = self.exposure * np.exp(eta)
        return float(np.sum(y * (math.log(self.exposure) + eta) - rate - gammaln(y + 1.0)))

    def derivatives(self, eta, y, trials):
        rate = self.exposure * np.exp(eta)
        return y - rate, rate


class BinomialLikelihood(Likelihood):
    link = Link.LOGIT

    def select(self, data):
        keep = data.n > 0
        return data.cells[keep], data.m[keep], data.n[keep]

    def log_likelihood(self, eta, y, trials):
        log_comb = gammaln(trials + 1.0) - gammaln(y + 1.0) - gammaln(trials - y + 1.0)
        return float(np.sum(log_comb + y * log_expit(eta) + (trials - y) * log_expit(-eta)))

    def derivatives(self, eta, y, trials):
        p = expit(eta)
        return y - trials * p, trials * p * (1.0 - p)


class GaussianLikelihood(Likelihood):
    """Identity-link surrogate on the detected counts; the Laplace evidence is exact for it."""
    link = Link.IDENTITY

    def __init__(self, noise_variance: float):
        if noise_variance <= 0:
            raise ArgumentError("Noise variance must be positive")
        self.noise_variance = float(noise_variance)

    def select(self, data):
        return data.cells, data.n, np.ones_like(data.n)

    def log_likelihood(self, eta, y, trials):
        r = y - eta
        return float(np.sum(-0.5 * (LOG_2PI + math.log(self.noise_variance)) - 0.5 * r * r / self.noise_variance))

    def derivatives(self, eta, y, trials):
        return (y - eta) / self.noise_variance, np.full(eta.shape, 1.0 / self.noise_variance)


# === Model ===

@dataclass(frozen=True)
class CoefficientPrior:
    """Normal prior on one coefficient; sd = inf means improper flat."""
    mean: float = 0.0
    sd: float = DEFAULT_COEFFICIENT_SD

    def __post_init__(self):
        if not self.sd > 0:
            raise ArgumentError(f"Prior sd must be positive, got {self.sd}")

    @property
    def precision(self) -> float:
        return 0.0 if math.isinf(self.sd) else 1.0 / self.sd ** 2


@dataclass(frozen=True)
class FieldHyper:
    """θ of one latent field: marginal variance and range in meters."""
    variance: float
    range_m: float

    def __post_init__(self):
        if not (self.variance > 0 and self.range_m > 0):
            raise ArgumentError(f"Field hyperparameters must be positive, got {self}")


@dataclass(frozen=True)
class BlockDesign:
    name: str
    family: Likelihood
    columns: Tuple[str, ...]
    X: np.ndarray
    priors: Tuple[CoefficientPrior, ...]
    groups: Tuple[str, ...]      # which predictor each column belongs to
    has_field: bool = True

    def __post_init__(self):
        if not self.columns:
            raise ModelError(f"Block '{self.name}' needs at least an intercept")
        if self.X.shape[1] != len(self.columns) or len(self.priors) != len(self.columns) \
                or len(self.groups) != len(self.columns):
            raise ModelError(f"Block '{self.name}' design, priors and columns disagree")

    @property
    def n_coefficients(self) -> int:
        return len(self.columns)

    @property
    def prior_mean(self) -> np.ndarray:
        return np.array([p.mean for p in self.priors])

    @property
    def prior_precision(self) -> np.ndarray:
        return np.array([p.precision for p in self.priors])

    def column_mask(self, groups: Optional[Iterable[str]] = None) -> np.ndarray:
        if groups is None:
            return np.ones(len(self.columns), dtype=bool)
        wanted = set(groups)
        return np.array([g in wanted for g in self.groups])


@dataclass(frozen=True)
class LatentModel:
    grid: Grid
    population: BlockDesign
    injury: Optional[BlockDesign] = None

    @property
    def blocks(self) -> List[BlockDesign]:
        return [b for b in (self.population, self.injury) if b is not None]

    @classmethod
    def from_layers(cls, rasters: CovariateRaster,
                    population_layers: Sequence[str] = (),
                    detection_layers: Sequence[str] = (),
                    injury_layers: Optional[Sequence[str]] = None,
                    population_rate: float = DEFAULT_POPULATION_RATE,
                    injury_rate: float = DEFAULT_INJURY_RATE,
                    priors: Optional[Dict[str, CoefficientPrior]] = None,
                    population_field: bool = True,
                    injury_field: bool = True,
                    coefficient_sd: float = DEFAULT_COEFFICIENT_SD,
                    intercept_sd: float = DEFAULT_INTERCEPT_SD) -> 'LatentModel':
        """
        Build the two block designs from named raster layers.

        `priors` overrides default coefficient priors by key '<group>.<column>',
        e.g. 'population.buildings', 'detection.forest' or 'injury.intercept'.
        `injury_layers=None` drops the Binomial block altogether.
        """
        overlap = set(population_layers) & set(detection_layers)
        if overlap:
            raise ConfigError(f"Population and detection layers must be disjoint, shared: {sorted(overlap)}")
        if population_rate <= 0 or not 0 < injury_rate < 1:
            raise ArgumentError("Base rates must be positive (injury rate inside (0, 1))")
        priors = dict(priors or {})

        def design(name, family, entries, intercept_mean, has_field):
            columns, groups, cols, block_priors = [], [], [], []
            for group, column in entries:
                key = f"{group}.{column}"
                if column == INTERCEPT:
                    cols.append(np.ones(rasters.grid.n_cells))
                    default = CoefficientPrior(intercept_mean, intercept_sd)
                else:
                    cols.append(rasters.layer(column))
                    default = CoefficientPrior(0.0, coefficient_sd)
                columns.append(column)
                groups.append(group)
                block_priors.append(priors.pop(key, default))
            return BlockDesign(name=name, family=family, columns=tuple(columns),
                               X=np.column_stack(cols), priors=tuple(block_priors),
                               groups=tuple(groups), has_field=has_field)

        pop_entries = [('population', INTERCEPT)] + [('population', c) for c in population_layers] \
            + [('detection', c) for c in detection_layers]
        population = design('population', PoissonLikelihood(rasters.grid.cell_area), pop_entries,
                            math.log(population_rate), population_field)
        injury = None
        if injury_layers is not None:
            inj_entries = [('injury', INTERCEPT)] + [('injury', c) for c in injury_layers]
            injury = design('injury', BinomialLikelihood(), inj_entries,
                            float(logit(injury_rate)), injury_field)
        if priors:
            raise ConfigError(f"Prior overrides match no model coefficient: {sorted(priors)}")
        return cls(grid=rasters.grid, population=population, injury=injury)


# === Block objective ===

class BlockObjective:
    """Log posterior of one block at fixed θ, with its gradient and curvature."""

    def __init__(self, grid: Grid, design: BlockDesign, data: ObservationData, hyper: Optional[FieldHyper]):
        self.grid = grid
        self.design = design
        self.hyper = hyper
        if design.has_field:
            if hyper is None:
                raise ArgumentError(f"Block '{design.name}' has a latent field but no hyperparameters")
            self.field: Optional[GmrfPrecision] = matern_precision(grid, hyper.variance, hyper.range_m)
            self.n_field = grid.n_cells
        else:
            self.field = None
            self.n_field = 0
        self.cells, self.y, self.trials = design.family.select(data)
        self.prior_mean = design.prior_mean
        self.prior_precision = design.prior_precision
        proper = self.prior_precision > 0
        self._prior_const = float(np.sum(-0.5 * LOG_2PI + 0.5 * np.log(self.prior_precision[proper])))
        self._proper = proper

    @property
    def dim(self) -> int:
        return self.n_field + self.design.n_coefficients

    def initial(self) -> np.ndarray:
        return np.concatenate([np.zeros(self.n_field), self.prior_mean])

    def split(self, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return u[:self.n_field], u[self.n_field:]

    def predictor(self, u: np.ndarray) -> np.ndarray:
        xi, beta = self.split(u)
        eta = self.design.X @ beta
        return eta + xi if self.n_field else eta

    def log_posterior(self, u: np.ndarray) -> float:
        xi, beta = self.split(u)
        eta = self.predictor(u)
        value = self.design.family.log_likelihood(eta[self.cells], self.y, self.trials)
        if self.field is not None:
            value += log_density(self.field, xi)
        d = (beta - self.prior_mean)[self._proper]
        value += self._prior_const - 0.5 * float(np.sum(self.prior_precision[self._proper] * d * d))
        return value

    def gradient(self, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Gradient of the log posterior and the per-cell likelihood curvature W."""
        xi, beta = self.split(u)
        eta = self.predictor(u)
        g_cells, w_cells = self.design.family.derivatives(eta[self.cells], self.y, self.trials)
        g_eta = np.zeros(self.grid.n_cells)
        w = np.zeros(self.grid.n_cells)
        g_eta[self.cells] = g_cells
        w[self.cells] = w_cells
        g_beta = self.design.X.T @ g_eta - self.prior_precision * (beta - self.prior_mean)
        if self.field is None:
            return g_beta, w
        g_xi = g_eta - self.field.Q @ xi
        return np.concatenate([g_xi, g_beta]), w


class HessianSystem:
    """Factorized negative Hessian of a block (arrow structure, see module docstring)."""

    def __init__(self, objective: BlockObjective, w: np.ndarray):
        X = objective.design.X
        self.n_field = objective.n_field
        self.B = w[:, None] * X
        C = X.T @ self.B + np.diag(objective.prior_precision)
        if objective.field is not None:
            self.A = (objective.field.Q + sps.diags(w)).tocsc()
            self.factor: Optional[BandedCholesky] = BandedCholesky(self.A, bandwidth_ordering(objective.grid))
            self.G = self.factor.solve(self.B)
            S = C - self.B.T @ self.G
        else:
            self.A = None
            self.factor = None
            self.G = np.zeros_like(X)
            S = C
        self.C = C
        S = 0.5 * (S + S.T)
        try:
            self.S_chol = cho_factor(S, lower=True)
        except LinAlgError as e:
            raise NumericalError(f"Coefficient block of the posterior precision is singular: {e}",
                                 diagnostics={'block': objective.design.name})

    def solve(self, g: np.ndarray) -> np.ndarray:
        g_xi, g_beta = g[:self.n_field], g[self.n_field:]
        if self.factor is None:
            return cho_solve(self.S_chol, g_beta)
        a = self.factor.solve(g_xi)
        d_beta = cho_solve(self.S_chol, g_beta - self.B.T @ a)
        return np.concatenate([a - self.G @ d_beta, d_beta])

    def logdet(self) -> float:
        value = 2.0 * float(np.sum(np.log(np.diag(self.S_chol[0]))))
        if self.factor is not None:
            value += self.factor.logdet()
        return value

    @cached_property
    def S_inv(self) -> np.ndarray:
        return cho_solve(self.S_chol, np.eye(self.S_chol[0].shape[0]))

    @cached_property
    def field_variance(self) -> np.ndarray:
        """diag((Q + W)⁻¹), zero when the block has no field."""
        if self.factor is None:
            return np.zeros(self.G.shape[0])
        return self.factor.diag_inverse()

    def precision(self) -> sps.csc_matrix:
        if self.A is None:
            return sps.csc_matrix(self.C)
        return sps.bmat([[self.A, sps.csr_matrix(self.B)],
                         [sps.csr_matrix(self.B.T), sps.csr_matrix(self.C)]], format='csc')


# === Posterior ===

@dataclass(frozen=True)
class BlockPosterior:
    design: BlockDesign
    hyper: Optional[FieldHyper]
    mode: np.ndarray
    log_posterior: float
    log_marginal: float
    iterations: int
    converged: bool
    history: Tuple[float, ...]
    system: HessianSystem = field(repr=False, compare=False)

    @property
    def name(self) -> str:
        return self.design.name

    @property
    def n_field(self) -> int:
        return self.system.n_field

    @property
    def xi(self) -> np.ndarray:
        return self.mode[:self.n_field]

    @property
    def beta(self) -> np.ndarray:
        return self.mode[self.n_field:]

    @property
    def coefficients(self) -> Dict[str, float]:
        return {f"{g}.{c}": float(b) for g, c, b in zip(self.design.groups, self.design.columns, self.beta)}

    @cached_property
    def precision(self) -> sps.csc_matrix:
        return self.system.precision()

    def predictor_moments(self, groups: Optional[Iterable[str]] = None) -> Tuple[np.ndarray, np.ndarray]:
        """
        Posterior mean and variance of ξ + X̃β per cell, where X̃ keeps only the
        columns of the given predictor groups (all columns by default).
        """
        X = self.design.X * self.design.column_mask(groups)
        mean = X @ self.beta
        if self.n_field:
            mean = mean + self.xi
        D = self.system.G - X
        var = self.system.field_variance + np.einsum('ij,jk,ik->i', D, self.system.S_inv, D)
        return mean, np.maximum(var, 0.0)


@dataclass(frozen=True)
class Posterior:
    grid: Grid
    blocks: Dict[str, BlockPosterior]
    theta: Dict[str, FieldHyper]

    @property
    def population(self) -> BlockPosterior:
        return self.blocks['population']

    @property
    def injury(self) -> Optional[BlockPosterior]:
        return self.blocks.get('injury')

    @property
    def log_marginal(self) -> float:
        return float(sum(b.log_marginal for b in self.blocks.values()))

    @property
    def converged(self) -> bool:
        return all(b.converged for b in self.blocks.values())


def _newton(objective: BlockObjective, u0: np.ndarray) -> Tuple[np.ndarray, float, List[float], int, bool]:
    u = u0.copy()
    f = objective.log_posterior(u)
    if not np.isfinite(f):
        u = objective.initial()
        f = objective.log_posterior(u)
    history = [f]
    for it in range(MAX_NEWTON_ITER):
        g, w = objective.gradient(u)
        gmax = float(np.max(np.abs(g)))
        logger.debug(f"[{objective.design.name}] newton it={it} f={f:.6f} |g|={gmax:.3e}")
        if gmax < GRAD_TOL:
            return u, f, history, it, True
        step = HessianSystem(objective, w).solve(g)
        t = 1.0
        for _ in range(MAX_HALVINGS + 1):
            candidate = u + t * step
            fc = objective.log_posterior(candidate)
            if np.isfinite(fc) and fc >= f - 1e-12 * (1.0 + abs(f)):
                break
            t *= 0.5
        else:
            if gmax < 1e-4:
                logger.warning(f"[{objective.design.name}] Newton stalled at |g|={gmax:.2e}; accepting mode")
                return u, f, history, it, False
            raise NumericalError(
                f"Newton iteration diverged in block '{objective.design.name}'",
                diagnostics={'iteration': it, 'log_posterior': f, 'grad_max': gmax, 'history': history},
            )
        u, f = candidate, fc
        history.append(f)
    g, _ = objective.gradient(u)
    gmax = float(np.max(np.abs(g)))
    converged = gmax < GRAD_TOL
    if not converged:
        logger.warning(f"[{objective.design.name}] Newton hit {MAX_NEWTON_ITER} iterations, |g|={gmax:.2e}")
    return u, f, history, MAX_NEWTON_ITER, converged


def fit_block(grid: Grid, design: BlockDesign, data: ObservationData, hyper: Optional[FieldHyper],
              warm_mode: Optional[np.ndarray] = None) -> BlockPosterior:
    objective = BlockObjective(grid, design, data, hyper)
    u0 = warm_mode if warm_mode is not None and warm_mode.shape == (objective.dim,) else objective.initial()
    u, f, history, iterations, converged = _newton(objective, u0)
    _, w = objective.gradient(u)
    system = HessianSystem(objective, w)
    evidence = f + 0.5 * objective.dim * LOG_2PI - 0.5 * system.logdet()
    return BlockPosterior(design=design, hyper=hyper, mode=u, log_posterior=f, log_marginal=evidence,
                          iterations=iterations, converged=converged, history=tuple(history), system=system)


def _warm_mode(warm_start: Optional[Posterior], name: str) -> Optional[np.ndarray]:
    if warm_start is None or name not in warm_start.blocks:
        return None
    return warm_start.blocks[name].mode


def _hyper_for(design: BlockDesign, theta: Dict[str, FieldHyper]) -> Optional[FieldHyper]:
    if not design.has_field:
        return None
    if design.name not in theta:
        raise ArgumentError(f"Missing hyperparameters for the '{design.name}' field")
    return theta[design.name]


def fit_laplace(model: LatentModel, observations: Sequence[Observation], theta: Dict[str, FieldHyper],
                warm_start: Optional[Posterior] = None) -> Posterior:
    """Newton-Laplace fit of every block at fixed θ."""
    data = ObservationData.from_observations(observations, model.grid)
    blocks = {}
    for design in model.blocks:
        blocks[design.name] = fit_block(model.grid, design, data, _hyper_for(design, theta),
                                        _warm_mode(warm_start, design.name))
    return Posterior(grid=model.grid, blocks=blocks, theta=dict(theta))


def log_marginal(model: LatentModel, observations: Sequence[Observation], theta: Dict[str, FieldHyper]) -> float:
    return fit_laplace(model, observations, theta).log_marginal


# === Empirical Bayes ===

def _golden_section_max(fn, lo: float, hi: float, tol: float) -> Tuple[float, float]:
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = fn(c), fn(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = fn(d)
    return (c, fc) if fc >= fd else (d, fd)


def _log_bounds(grid: Grid) -> List[Tuple[float, float]]:
    cell = math.sqrt(grid.dx * grid.dy)
    return [(math.log(VARIANCE_BOUNDS[0]), math.log(VARIANCE_BOUNDS[1])),
            (math.log(0.25 * cell), math.log(4.0 * max(grid.extent_x_m, grid.extent_y_m)))]


def _optimize_block(grid: Grid, design: BlockDesign, data: ObservationData, hyper: FieldHyper,
                    warm_mode: Optional[np.ndarray], max_sweeps: int) -> BlockPosterior:
    bounds = _log_bounds(grid)
    cache: Dict[Tuple[float, float], Optional[BlockPosterior]] = {}
    state = {'warm': warm_mode}

    x_init = (math.log(hyper.variance), math.log(hyper.range_m))

    def evaluate(x: Tuple[float, float]) -> float:
        key = (round(x[0], 10), round(x[1], 10))
        if key not in cache:
            candidate = hyper if x == x_init else FieldHyper(math.exp(x[0]), math.exp(x[1]))
            try:
                fit = fit_block(grid, design, data, candidate, state['warm'])
                state['warm'] = fit.mode
            except NumericalError as e:
                logger.debug(f"[{design.name}] EB candidate {key} failed: {e}")
                fit = None
            cache[key] = fit
        fit = cache[key]
        return -math.inf if fit is None else fit.log_marginal

    x = list(x_init)
    current = evaluate(x_init)
    for sweep in range(max_sweeps):
        moved = False
        for k in range(2):
            lo = max(bounds[k][0], x[k] - EB_BRACKET)
            hi = min(bounds[k][1], x[k] + EB_BRACKET)
            if hi - lo <= EB_TOL:
                continue

            def along(v, k=k):
                y = list(x)
                y[k] = v
                return evaluate(tuple(y))

            best_v, best = _golden_section_max(along, lo, hi, EB_TOL)
            if best > current + 1e-8 * (1.0 + abs(current)):
                x[k], current, moved = best_v, best, True
        logger.debug(f"[{design.name}] EB sweep {sweep}: θ=({math.exp(x[0]):.3g}, {math.exp(x[1]):.3g}) "
                     f"evidence={current:.4f}")
        if not moved:
            break

    best_fit = cache[(round(x[0], 10), round(x[1], 10))]
    if best_fit is None:
        raise NumericalError(f"Every empirical-Bayes candidate failed in block '{design.name}'",
                             diagnostics={'evaluations': len(cache)})
    return best_fit


def empirical_bayes(model: LatentModel, observations: Sequence[Observation], theta_init: Dict[str, FieldHyper],
                    warm_start: Optional[Posterior] = None,
                    max_sweeps: int = EB_MAX_SWEEPS) -> Tuple[Dict[str, FieldHyper], Posterior]:
    """Coordinate-wise golden-section ascent of the Laplace evidence over log θ, block by block."""
    data = ObservationData.from_observations(observations, model.grid)
    theta = dict(theta_init)
    blocks = {}
    for design in model.blocks:
        hyper = _hyper_for(design, theta)
        warm = _warm_mode(warm_start, design.name)
        if hyper is None:
            blocks[design.name] = fit_block(model.grid, design, data, None, warm)
            continue
        fit = _optimize_block(model.grid, design, data, hyper, warm, max_sweeps)
        blocks[design.name] = fit
        theta[design.name] = fit.hyper
    return theta, Posterior(grid=model.grid, blocks=blocks, theta=theta)


# === Predictions ===

@dataclass(frozen=True)
class InjuryIntensityMap:
    """Expected unexplored detectable injured per cell (ê); zero on explored cells."""
    expected: np.ndarray
    explored: np.ndarray

    @property
    def total(self) -> float:
        return float(self.expected.sum())


def logistic_normal_moments(mu, var, nodes: int = GH_NODES) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and variance of logistic(Z), Z ~ N(mu, var), by Gauss–Hermite quadrature."""
    x, w = hermgauss(nodes)
    mu = np.asarray(mu, dtype=float)[..., None]
    sd = np.sqrt(np.maximum(np.asarray(var, dtype=float), 0.0))[..., None]
    p = expit(mu + math.sqrt(2.0) * sd * x)
    mean = (p * w).sum(axis=-1) / math.sqrt(math.pi)
    second = (p * p * w).sum(axis=-1) / math.sqrt(math.pi)
    return mean, np.maximum(second - mean * mean, 0.0)


def expected_injured(mu_p, var_p, mu_b, var_b, cell_area: float) -> np.ndarray:
    """Δ·E[exp(z_P)]·E[logistic(z_B)] for independent Gaussian block predictors."""
    q_mean, _ = logistic_normal_moments(mu_b, var_b)
    return cell_area * np.exp(np.asarray(mu_p) + 0.5 * np.asarray(var_p)) * q_mean


def _explored_mask(grid: Grid, explored) -> np.ndarray:
    mask = np.zeros(grid.n_cells, dtype=bool)
    explored = np.asarray(list(explored) if not isinstance(explored, np.ndarray) else explored)
    if explored.dtype == bool:
        mask[:] = explored
    elif explored.size:
        mask[explored.astype(int)] = True
    return mask


def predict_injured(posterior: Posterior, explored) -> InjuryIntensityMap:
    """
    ê per unexplored cell. Without an injury block the objective is detectable
    persons, ê = Δ·E[rλ].
    """
    grid = posterior.grid
    mask = _explored_mask(grid, explored)
    mu_p, var_p = posterior.population.predictor_moments()
    if posterior.injury is None:
        expected = grid.cell_area * np.exp(mu_p + 0.5 * var_p)
    else:
        mu_b, var_b = posterior.injury.predictor_moments()
        expected = expected_injured(mu_p, var_p, mu_b, var_b, grid.cell_area)
    expected = np.where(mask, 0.0, expected)
    expected.setflags(write=False)
    return InjuryIntensityMap(expected=expected, explored=mask)


def _lognormal(mu: np.ndarray, var: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean = np.exp(mu + 0.5 * var)
    return mean, np.expm1(var) * mean * mean


@dataclass(frozen=True)
class FieldMarginals:
    """Per-cell posterior means and variances; intensities are per m²."""
    intensity: Tuple[np.ndarray, np.ndarray]
    detected_intensity: Tuple[np.ndarray, np.ndarray]
    injury_probability: Optional[Tuple[np.ndarray, np.ndarray]] = None
    injured_intensity: Optional[Tuple[np.ndarray, np.ndarray]] = None
    injury_field_exp: Optional[np.ndarray] = None


def posterior_marginals(posterior: Posterior) -> FieldMarginals:
    pop = posterior.population
    intensity = _lognormal(*pop.predictor_moments(['population']))
    detected = _lognormal(*pop.predictor_moments())
    if posterior.injury is None:
        return FieldMarginals(intensity=intensity, detected_intensity=detected)
    inj = posterior.injury
    q_mean, q_var = logistic_normal_moments(*inj.predictor_moments())
    # blocks are independent: E[XY] = E[X]E[Y], E[(XY)²] = E[X²]E[Y²]
    lrq_mean = detected[0] * q_mean
    second = (detected[1] + detected[0] ** 2) * (q_var + q_mean ** 2)
    field_exp = np.exp(inj.xi) if inj.n_field else np.ones(posterior.grid.n_cells)
    return FieldMarginals(intensity=intensity, detected_intensity=detected,
                          injury_probability=(q_mean, q_var),
                          injured_intensity=(lrq_mean, np.maximum(second - lrq_mean ** 2, 0.0)),
                          injury_field_exp=field_exp)


def posterior_frame(posterior: Posterior) -> pd.DataFrame:
    grid = posterior.grid
    cells = np.arange(grid.n_cells)
    marg = posterior_marginals(posterior)
    table = {
        'cell': cells,
        'i': cells % grid.nx,
        'j': cells // grid.nx,
        'lambda_mean': marg.intensity[0],
        'lambda_var': marg.intensity[1],
        'rlambda_mean': marg.detected_intensity[0],
        'rlambda_var': marg.detected_intensity[1],
    }
    if marg.injury_probability is not None:
        table.update({
            'q_mean': marg.injury_probability[0],
            'q_var': marg.injury_probability[1],
            'lrq_mean': marg.injured_intensity[0],
            'lrq_var': marg.injured_intensity[1],
            'exp_xi_q': marg.injury_field_exp,
        })
    return pd.DataFrame(table)


def observations_from_frame(frame: pd.DataFrame) -> List[Observation]:
    """Rebuild observations from a recorded trace (rows without a cell observation are skipped)."""
    missing = {'cell', 'n', 'm'} - set(frame.columns)
    if missing:
        raise ConfigError(f"Trace table lacks columns: {sorted(missing)}")
    rows = frame.dropna(subset=['cell', 'n', 'm'])
    times = rows['t'] if 't' in rows.columns else pd.Series(range(len(rows)), index=rows.index, dtype=float)
    return [Observation(cell=int(c), n=int(n), m=int(m), t=float(t))
            for c, n, m, t in zip(rows['cell'], rows['n'], rows['m'], times)]


# === Per-episode engine ===

class InferenceEngine:
    """
    Holds the running posterior of one episode. Every refit warm-starts from
    the previous mode; every `eb_every`-th refit also re-optimizes θ.
    """

    def __init__(self, model: LatentModel, theta_init: Dict[str, FieldHyper],
                 eb_every: int = 1, use_eb: bool = True):
        if eb_every < 1:
            raise ArgumentError("eb_every must be at least 1")
        self.model = model
        self.theta = dict(theta_init)
        self.eb_every = eb_every
        self.use_eb = use_eb
        self.observations: List[Observation] = []
        self.refits = 0
        self.posterior = fit_laplace(model, [], self.theta)

    def update(self, new_observations: Iterable[Observation]) -> Posterior:
        self.observations.extend(new_observations)
        self.refits += 1
        if self.use_eb and self.refits % self.eb_every == 0:
            self.theta, self.posterior = empirical_bayes(self.model, self.observations, self.theta,
                                                         warm_start=self.posterior)
        else:
            self.posterior = fit_laplace(self.model, self.observations, self.theta, warm_start=self.posterior)
        if not self.posterior.converged:
            logger.warning(f"Posterior after {len(self.observations)} observations did not fully converge")
        return self.posterior

    def predict(self, explored) -> InjuryIntensityMap:
        return predict_injured(self.posterior, explored)
