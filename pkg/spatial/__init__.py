"""
Model stack for the search-and-rescue testbed: lattice geometry, GMRF priors,
ground-truth scenes and Laplace inference.
"""

from .geo import CovariateRaster, Grid, build_grid, generate_synthetic_map, load_raster, save_raster
from .gp import GmrfPrecision, marginal_variances, matern_precision, sample_field
from .simworld import FieldSpec, SceneObserver, WorldRealization, realize_world
from .inference import (
    FieldHyper,
    InferenceEngine,
    InjuryIntensityMap,
    LatentModel,
    Posterior,
    empirical_bayes,
    fit_laplace,
    log_marginal,
    predict_injured,
)

__all__ = [
    'CovariateRaster',
    'Grid',
    'build_grid',
    'generate_synthetic_map',
    'load_raster',
    'save_raster',
    'GmrfPrecision',
    'marginal_variances',
    'matern_precision',
    'sample_field',
    'FieldSpec',
    'SceneObserver',
    'WorldRealization',
    'realize_world',
    'FieldHyper',
    'InferenceEngine',
    'InjuryIntensityMap',
    'LatentModel',
    'Posterior',
    'empirical_bayes',
    'fit_laplace',
    'log_marginal',
    'predict_injured',
]
