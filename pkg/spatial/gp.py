"""
GP Module - Gaussian Markov random field priors on the lattice.

Precision matrices are kept sparse and factorized in banded form. The
natural lattice order is already banded; we additionally let the shorter
axis run fastest so the band is as narrow as the grid allows.
"""

import logging
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Optional, Union

import numpy as np
import scipy.sparse as sps
from scipy.linalg import LinAlgError, cho_solve_banded, cholesky_banded, solve_banded

from spatial.errors import ArgumentError, NumericalError
from spatial.geo import Grid

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))


def bandwidth_ordering(grid: Grid) -> np.ndarray:
    """Permutation (new -> old flat index) making the shorter axis run fastest."""
    idx = np.arange(grid.n_cells)
    if grid.ny >= grid.nx:
        return idx
    # column-major: j runs fastest
    return idx.reshape(grid.ny, grid.nx).T.ravel()


class BandedCholesky:
    """
    Cholesky factor P = L Lᵀ of a permuted sparse SPD matrix, stored in
    lower banded form (cb[k, j] = L[j + k, j]).
    """

    def __init__(self, matrix: sps.spmatrix, perm: Optional[np.ndarray] = None):
        n = matrix.shape[0]
        self.n = n
        self.perm = np.arange(n) if perm is None else np.asarray(perm)
        self.iperm = np.empty(n, dtype=int)
        self.iperm[self.perm] = np.arange(n)

        coo = sps.coo_matrix(matrix)
        r = self.iperm[coo.row]
        c = self.iperm[coo.col]
        lower = r >= c
        r, c, v = r[lower], c[lower], coo.data[lower]
        self.bandwidth = int((r - c).max()) if r.size else 0

        band = np.zeros((self.bandwidth + 1, n))
        np.add.at(band, (r - c, c), v)
        try:
            self.cb = cholesky_banded(band, lower=True)
        except LinAlgError as e:
            raise NumericalError(f"Cholesky factorization failed: {e}",
                                 diagnostics={'n': n, 'bandwidth': self.bandwidth})

    @property
    def diag(self) -> np.ndarray:
        return self.cb[0]

    def logdet(self) -> float:
        return float(2.0 * np.sum(np.log(self.cb[0])))

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve P x = rhs in the original ordering."""
        rhs = np.asarray(rhs, dtype=float)
        x = cho_solve_banded((self.cb, True), rhs[self.perm])
        return x[self.iperm]

    def solve_lower_transpose(self, z: np.ndarray) -> np.ndarray:
        """x = L⁻ᵀ z, which has covariance P⁻¹ when z is standard normal."""
        b = self.bandwidth
        upper = np.zeros((b + 1, self.n))
        for k in range(b + 1):
            upper[b - k, k:] = self.cb[k, :self.n - k]
        x = solve_banded((0, b), upper, np.asarray(z, dtype=float))
        return x[self.iperm]

    def diag_inverse(self) -> np.ndarray:
        """
        diag(P⁻¹) by the Takahashi recursion restricted to the band of L.
        Only entries of the inverse inside the band are ever formed.
        """
        n, b, cb = self.n, self.bandwidth, self.cb
        # sband[k, i] = Sigma[i, i + k]
        sband = np.zeros((b + 1, n))
        a = np.arange(b)
        offs = np.abs(a[:, None] - a[None, :])
        base = np.minimum(a[:, None], a[None, :])
        for i in range(n - 1, -1, -1):
            lii = cb[0, i]
            m = min(b, n - 1 - i)
            if m == 0:
                sband[0, i] = 1.0 / lii ** 2
                continue
            col = cb[1:m + 1, i]
            window = sband[offs[:m, :m], i + 1 + base[:m, :m]]
            row = -(window @ col) / lii
            sband[1:m + 1, i] = row
            sband[0, i] = 1.0 / lii ** 2 - (col @ row) / lii
        return sband[0][self.iperm]


def graph_laplacian(grid: Grid) -> sps.csr_matrix:
    """5-point graph Laplacian with reflecting (Neumann) boundary."""
    nx, ny = grid.nx, grid.ny
    rows, cols = [], []
    for j in range(ny):
        for i in range(nx):
            k = j * nx + i
            if i + 1 < nx:
                rows += [k, k + 1]
                cols += [k + 1, k]
            if j + 1 < ny:
                rows += [k, k + nx]
                cols += [k + nx, k]
    adj = sps.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(grid.n_cells, grid.n_cells))
    degree = np.asarray(adj.sum(axis=1)).ravel()
    return (sps.diags(degree) - adj).tocsr()


def range_in_cells(grid: Grid, range_m: float) -> float:
    return range_m / np.sqrt(grid.dx * grid.dy)


def _unit_precision(grid: Grid, range_m: float) -> sps.csc_matrix:
    kappa2 = 8.0 / range_in_cells(grid, range_m) ** 2
    m = sps.identity(grid.n_cells, format='csr') * kappa2 + graph_laplacian(grid)
    q = (m @ m).tocsc()
    # exact symmetry
    return ((q + q.T) * 0.5).tocsc()


@lru_cache(maxsize=256)
def _unit_scale(grid: Grid, range_m: float):
    """Unnormalized precision for a range and the average of diag(Q0⁻¹)."""
    q0 = _unit_precision(grid, range_m)
    factor = BandedCholesky(q0, bandwidth_ordering(grid))
    return q0, float(np.mean(factor.diag_inverse()))


@dataclass(frozen=True)
class GmrfPrecision:
    """Sparse precision of a Matérn (ν=1) field on the lattice."""
    grid: Grid
    Q: sps.csc_matrix
    variance: float
    range_m: float
    tau: float

    @property
    def dim(self) -> int:
        return self.grid.n_cells

    @cached_property
    def factor(self) -> BandedCholesky:
        return BandedCholesky(self.Q, bandwidth_ordering(self.grid))

    @cached_property
    def logdet(self) -> float:
        return self.factor.logdet()


def matern_precision(grid: Grid, variance: float, range_m: float) -> GmrfPrecision:
    """
    Q = τ (κ²I + L)² with κ = √8 / range (cells), τ chosen so that the
    average marginal variance over the lattice equals `variance`.
    """
    if variance <= 0 or range_m <= 0:
        raise ArgumentError(f"Matérn hyperparameters must be positive, got variance={variance} range={range_m}")
    q0, mean_var = _unit_scale(grid, float(range_m))
    tau = mean_var / variance
    return GmrfPrecision(grid=grid, Q=(q0 * tau).tocsc(), variance=float(variance),
                         range_m=float(range_m), tau=float(tau))


def marginal_variances(precision: GmrfPrecision) -> np.ndarray:
    return precision.factor.diag_inverse()


def sample_field(precision: GmrfPrecision,
                 seed: Union[int, np.random.SeedSequence, np.random.Generator]) -> np.ndarray:
    """ξ = L⁻ᵀ z with z standard normal; deterministic in seed."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    z = rng.standard_normal(precision.dim)
    return precision.factor.solve_lower_transpose(z)


def log_density(precision: GmrfPrecision, xi: np.ndarray) -> float:
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (precision.dim,):
        raise ArgumentError(f"Field has shape {xi.shape}, precision needs ({precision.dim},)")
    quad = float(xi @ (precision.Q @ xi))
    return 0.5 * precision.logdet - 0.5 * precision.dim * LOG_2PI - 0.5 * quad
