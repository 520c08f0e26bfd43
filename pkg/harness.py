"""
Harness - Scenarios A-D, the observe → infer → plan episode loop, replication
statistics and result outputs.
"""

import os
import math
import time
import asyncio
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from PIL import Image, ImageDraw
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from scipy.special import expit

from file_writer import FileWriter, image_to_ppm, table_to_csv
from planner import (
    Action,
    ActionKind,
    CostConfig,
    PlannerDecision,
    SearchMap,
    SearchState,
    action_duration,
    decisions_frame,
    make_policy,
)
from spatial.errors import ConfigError, EpisodeError
from spatial.geo import CovariateRaster, Grid, build_grid, gaussian_site_layer, generate_synthetic_map, load_raster_directory
from spatial.gp import matern_precision
from spatial.inference import CoefficientPrior, FieldHyper, InferenceEngine, LatentModel
from spatial.settings import EXTENT_X_M, EXTENT_Y_M, output_root, scale_preset
from spatial.simworld import FieldSpec, SceneObserver, WorldRealization, realize_world, scatter_points, world_to_frame
from spatial.types import Link

logger = logging.getLogger(__name__)

# Seed offsets from the replicate seed
FIELD_SEED_OFFSET = 10000
MCTS_SEED_OFFSET = 20000
SCATTER_SEED_OFFSET = 30000

MAX_FAILURE_RATE = 0.10
Z_95 = 1.959963984540054


# === Scenarios ===

@dataclass(frozen=True)
class TruthField:
    """Data-generating linear predictor of one field, before rasters are attached."""
    link: Link
    intercept: float = 0.0
    weights: Dict[str, float] = field(default_factory=dict)
    hyper: Optional[FieldHyper] = None


@dataclass(frozen=True)
class SiteSpec:
    """Gaussian site covariate; the center is given as fractions of the extent."""
    x_frac: float
    y_frac: float
    lengthscale_m: float
    amplitude: float = 1.0


@dataclass(frozen=True)
class Scenario:
    name: str
    truth: Dict[str, TruthField]
    model_population: Tuple[str, ...] = ()
    model_detection: Tuple[str, ...] = ()
    model_injury: Optional[Tuple[str, ...]] = None
    population_field: bool = True
    injury_field: bool = True
    sites: Dict[str, SiteSpec] = field(default_factory=dict)
    nx: int = 25
    ny: int = 17
    extent_x_m: float = EXTENT_X_M
    extent_y_m: float = EXTENT_Y_M
    map_seed: int = 1
    map_dir: Optional[str] = None
    use_eb: bool = True
    eb_every: int = 5
    replicates: int = 15
    base_seed: int = 0
    plans: int = 20000
    seconds: Optional[float] = None
    population_rate: float = math.exp(-10.0)
    injury_rate: float = 0.1
    priors: Dict[str, CoefficientPrior] = field(default_factory=dict)
    theta_init: Dict[str, FieldHyper] = field(default_factory=dict)

    def __post_init__(self):
        if 'population' not in self.truth:
            raise ConfigError(f"Scenario '{self.name}' has no population truth")
        overlap = set(self.model_population) & set(self.model_detection)
        if overlap:
            raise ConfigError(f"Scenario '{self.name}': population and detection layers must be disjoint, "
                              f"shared: {sorted(overlap)}")

    @property
    def objective(self) -> str:
        return 'persons' if self.model_injury is None else 'injured'

    @property
    def grid(self) -> Grid:
        return build_grid(self.extent_x_m, self.extent_y_m, self.nx, self.ny)

    def build_rasters(self) -> CovariateRaster:
        grid = self.grid
        if self.map_dir:
            rasters = load_raster_directory(self.map_dir, grid)
        else:
            rasters = generate_synthetic_map(grid, self.map_seed)
        for name, site in self.sites.items():
            center = (site.x_frac * grid.extent_x_m, site.y_frac * grid.extent_y_m)
            rasters = rasters.with_layer(name, gaussian_site_layer(grid, center, site.lengthscale_m, site.amplitude))
        return rasters

    def truth_specs(self, rasters: CovariateRaster) -> Dict[str, FieldSpec]:
        specs = {}
        for role, truth in self.truth.items():
            latent = None
            if truth.hyper is not None:
                latent = matern_precision(rasters.grid, truth.hyper.variance, truth.hyper.range_m)
            specs[role] = FieldSpec(link=truth.link, intercept=truth.intercept,
                                    weights=dict(truth.weights), latent=latent)
        return specs

    def latent_model(self, rasters: CovariateRaster) -> LatentModel:
        return LatentModel.from_layers(
            rasters,
            population_layers=self.model_population,
            detection_layers=self.model_detection,
            injury_layers=self.model_injury,
            population_rate=self.population_rate,
            injury_rate=self.injury_rate,
            priors=self.priors,
            population_field=self.population_field,
            injury_field=self.injury_field,
        )

    def initial_theta(self) -> Dict[str, FieldHyper]:
        theta = {'population': FieldHyper(1.0, 400.0), 'injury': FieldHyper(0.5, 500.0)}
        theta.update(self.theta_init)
        return theta

    def cost_config(self, seed: int, plans: Optional[int] = None, seconds: Optional[float] = None) -> CostConfig:
        return CostConfig(plans=plans or self.plans, seconds=seconds if seconds is not None else self.seconds,
                          seed=seed)


POPULATION_TRUTH = TruthField(Link.LOG, intercept=-10.0,
                              weights={'buildings': 3.0, 'roads': 1.5, 'water': -3.0},
                              hyper=FieldHyper(1.0, 400.0))
DETECTION_TRUTH = TruthField(Link.LOG, weights={'forest': math.log(0.5)})
SITE_G1 = SiteSpec(0.3, 0.35, 300.0)
SITE_G3 = SiteSpec(0.7, 0.7, 300.0)

SCENARIO_NAMES = ('A', 'B', 'C', 'D')


def _scenario_a(**grid) -> Scenario:
    # persons only; the model sees no covariates
    return Scenario(name='A',
                    truth={'population': TruthField(Link.LOG, intercept=-10.0, weights={'buildings': 3.0})},
                    model_population=(), replicates=30, **grid)


def _scenario_b(**grid) -> Scenario:
    return Scenario(
        name='B',
        truth={'population': POPULATION_TRUTH, 'detection': DETECTION_TRUTH,
               'injury': TruthField(Link.LOGIT, intercept=-2.5, weights={'buildings': 1.5},
                                    hyper=FieldHyper(0.5, 500.0))},
        model_population=('buildings', 'roads', 'water'), model_detection=('forest',),
        model_injury=('buildings',), injury_rate=float(expit(-2.5)), **grid)


def _scenario_c(**grid) -> Scenario:
    return Scenario(
        name='C',
        truth={'population': POPULATION_TRUTH, 'detection': DETECTION_TRUTH,
               'injury': TruthField(Link.LOGIT, intercept=-4.0, weights={'G1': 5.0})},
        model_population=('buildings', 'roads', 'water'), model_detection=('forest',),
        model_injury=('G1',), sites={'G1': SITE_G1}, injury_rate=float(expit(-4.0)), **grid)


def _scenario_d(**grid) -> Scenario:
    # G2 is reported, G3 is not
    return Scenario(
        name='D',
        truth={'population': POPULATION_TRUTH, 'detection': DETECTION_TRUTH,
               'injury': TruthField(Link.LOGIT, intercept=-4.0, weights={'G2': 5.0, 'G3': 5.0})},
        model_population=('buildings', 'roads', 'water'), model_detection=('forest',),
        model_injury=('G2',), sites={'G2': SITE_G1, 'G3': SITE_G3}, injury_rate=float(expit(-4.0)), **grid)


def build_scenario(name: str, scale: str = 'desk') -> Scenario:
    builders = {'A': _scenario_a, 'B': _scenario_b, 'C': _scenario_c, 'D': _scenario_d}
    key = name.strip().upper()
    if key not in builders:
        raise ConfigError(f"Unknown scenario: {name}")
    try:
        preset = scale_preset(scale)
    except ValueError as e:
        raise ConfigError(str(e))
    return builders[key](nx=preset['nx'], ny=preset['ny'], plans=preset['plans'], eb_every=preset['eb_every'])


# === Scenario files ===

class PriorEntry(BaseModel):
    mean: float = 0.0
    sd: float = Field(10.0, gt=0)


class SiteEntry(BaseModel):
    x: float = Field(ge=0, le=1)
    y: float = Field(ge=0, le=1)
    lengthscale: float = Field(gt=0)
    amplitude: float = 1.0


class TruthEntry(BaseModel):
    intercept: float = 0.0
    weights: Dict[str, float] = {}
    latent: Optional[Tuple[float, float]] = None

    @field_validator('latent')
    @classmethod
    def positive_field(cls, v):
        if v is not None and (v[0] <= 0 or v[1] <= 0):
            raise ValueError("field variance and range must be positive")
        return v


class ScenarioFile(BaseModel):
    """Declarative scenario: truth rows, model rows and constants. Unset keys come from `base`."""
    model_config = ConfigDict(extra='forbid')

    name: Optional[str] = None
    base: Optional[str] = None
    grid: Optional[str] = None
    map_seed: Optional[int] = None
    map_dir: Optional[str] = None
    truth: Dict[str, TruthEntry] = {}
    model: Dict[str, Optional[List[str]]] = {}
    sites: Dict[str, SiteEntry] = {}
    priors: Dict[str, PriorEntry] = {}
    theta: Dict[str, Tuple[float, float]] = {}
    eb: Optional[bool] = None
    eb_every: Optional[int] = Field(None, ge=1)
    replicates: Optional[int] = Field(None, ge=2)
    base_seed: Optional[int] = None
    plans: Optional[int] = Field(None, ge=1)
    population_rate: Optional[float] = Field(None, gt=0)
    injury_rate: Optional[float] = Field(None, gt=0, lt=1)

    @field_validator('truth', 'model')
    @classmethod
    def known_roles(cls, v):
        unknown = set(v) - {'population', 'detection', 'injury'}
        if unknown:
            raise ValueError(f"unknown field roles {sorted(unknown)}")
        return v

    def to_scenario(self, scale: str = 'desk') -> Scenario:
        grid_scale = self.grid or scale
        if self.base:
            scenario = build_scenario(self.base, grid_scale)
        else:
            if 'population' not in self.truth:
                raise ConfigError("Scenario file needs 'truth.population' or a 'base' scenario")
            try:
                preset = scale_preset(grid_scale)
            except ValueError as e:
                raise ConfigError(str(e))
            scenario = Scenario(name=self.name or 'custom',
                                truth={'population': TruthField(Link.LOG)},
                                nx=preset['nx'], ny=preset['ny'], plans=preset['plans'],
                                eb_every=preset['eb_every'])

        links = {'population': Link.LOG, 'detection': Link.LOG, 'injury': Link.LOGIT}
        truth = dict(scenario.truth)
        for role, entry in self.truth.items():
            truth[role] = TruthField(links[role], intercept=entry.intercept, weights=dict(entry.weights),
                                     hyper=FieldHyper(*entry.latent) if entry.latent else None)

        changes = {'truth': truth}
        if self.name:
            changes['name'] = self.name
        for role, layers in self.model.items():
            has_field = layers is not None and 'S' in layers
            plain = None if layers is None else tuple(l for l in layers if l != 'S')
            if role == 'population':
                changes['model_population'] = plain or ()
                changes['population_field'] = has_field
            elif role == 'detection':
                changes['model_detection'] = plain or ()
            else:
                changes['model_injury'] = plain
                changes['injury_field'] = has_field
        if self.sites:
            sites = dict(scenario.sites)
            sites.update({k: SiteSpec(s.x, s.y, s.lengthscale, s.amplitude) for k, s in self.sites.items()})
            changes['sites'] = sites
        if self.priors:
            priors = dict(scenario.priors)
            priors.update({k: CoefficientPrior(p.mean, p.sd) for k, p in self.priors.items()})
            changes['priors'] = priors
        if self.theta:
            theta = dict(scenario.theta_init)
            theta.update({k: FieldHyper(*v) for k, v in self.theta.items()})
            changes['theta_init'] = theta
        scalars = {'map_seed': self.map_seed, 'map_dir': self.map_dir, 'use_eb': self.eb,
                   'eb_every': self.eb_every, 'replicates': self.replicates, 'base_seed': self.base_seed,
                   'plans': self.plans, 'population_rate': self.population_rate,
                   'injury_rate': self.injury_rate}
        changes.update({k: v for k, v in scalars.items() if v is not None})
        return replace(scenario, **changes)


def _parse_numbers(text: str, lineno: int) -> Tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(','))
    except ValueError:
        raise ConfigError(f"Expected numbers, got '{text}' (line {lineno})")


def _parse_pairs(tokens: Sequence[str], lineno: int) -> Dict[str, str]:
    pairs = {}
    for token in tokens:
        if '=' not in token:
            raise ConfigError(f"Expected key=value, got '{token}' (line {lineno})")
        key, value = token.split('=', 1)
        pairs[key.strip()] = value.strip()
    return pairs


def parse_scenario_text(text: str) -> ScenarioFile:
    """
    Parse the line-oriented scenario format, e.g.

        base: B
        truth.injury: intercept=-4 G1=5
        model.injury: G1 S
        site G1: x=0.3 y=0.35 lengthscale=300
        prior population.buildings: mean=23 sd=10
    """
    raw: Dict = {'truth': {}, 'model': {}, 'sites': {}, 'priors': {}, 'theta': {}}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        if ':' not in line:
            raise ConfigError(f"Expected 'key: value' (line {lineno})")
        key, value = (part.strip() for part in line.split(':', 1))
        tokens = value.split()
        if key.startswith('truth.'):
            entry = {'weights': {}}
            for k, v in _parse_pairs(tokens, lineno).items():
                if k == 'intercept':
                    entry['intercept'] = _parse_numbers(v, lineno)[0]
                elif k == 'S':
                    entry['latent'] = _parse_numbers(v, lineno)
                else:
                    entry['weights'][k] = _parse_numbers(v, lineno)[0]
            raw['truth'][key[len('truth.'):]] = entry
        elif key.startswith('model.'):
            raw['model'][key[len('model.'):]] = None if value in ('-', 'none') else tokens
        elif key.startswith('site '):
            raw['sites'][key[len('site '):].strip()] = _parse_pairs(tokens, lineno)
        elif key.startswith('prior '):
            raw['priors'][key[len('prior '):].strip()] = _parse_pairs(tokens, lineno)
        elif key.startswith('theta.'):
            raw['theta'][key[len('theta.'):]] = _parse_numbers(value, lineno)
        elif key == 'eb':
            raw['eb'] = value.lower() in ('on', 'true', 'yes', '1')
        else:
            raw[key] = value
    try:
        return ScenarioFile.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"Invalid scenario file: {e}")


def load_scenario_file(path: str, scale: str = 'desk') -> Scenario:
    if not os.path.isfile(path):
        raise ConfigError(f"Scenario file not found: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        return parse_scenario_text(f.read()).to_scenario(scale)


def resolve_scenario(name_or_path: str, scale: str = 'desk') -> Scenario:
    if name_or_path.strip().upper() in SCENARIO_NAMES:
        return build_scenario(name_or_path, scale)
    if os.path.exists(name_or_path):
        return load_scenario_file(name_or_path, scale)
    raise ConfigError(f"Unknown scenario: {name_or_path}")


# === Episodes ===

@dataclass(frozen=True)
class TraceRow:
    step: int
    t: float
    action: str
    cell: int
    n: Optional[int]
    m: Optional[int]
    injured_found: int
    persons_found: int


@dataclass
class EpisodeTrace:
    scenario: str
    policy: str
    seed: int
    objective: str
    total_injured: int
    total_persons: int
    rows: List[TraceRow] = field(default_factory=list)
    decisions: List[PlannerDecision] = field(default_factory=list)
    maps: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.total_injured if self.objective == 'injured' else self.total_persons

    @property
    def degenerate(self) -> bool:
        return self.total < 1

    def found_series(self) -> Tuple[np.ndarray, np.ndarray]:
        key = 'injured_found' if self.objective == 'injured' else 'persons_found'
        return (np.array([r.t for r in self.rows], dtype=float),
                np.array([getattr(r, key) for r in self.rows], dtype=float))

    @property
    def path(self) -> List[int]:
        return [r.cell for r in self.rows]


@dataclass
class EpisodeResult:
    """Result of one episode; failed episodes keep their partial trace."""
    success: bool
    trace: EpisodeTrace
    errors: List[str]
    warnings: List[str]
    execution_time: float


def run_episode(scenario: Scenario, policy_name: str, seed: int,
                plans: Optional[int] = None, seconds: Optional[float] = None,
                rasters: Optional[CovariateRaster] = None) -> EpisodeResult:
    """Realize a world, then alternate observe → refit → predict → plan until every cell is explored."""
    start_time = time.perf_counter()
    rasters = rasters or scenario.build_rasters()
    grid = rasters.grid
    world = realize_world(rasters, scenario.truth_specs(rasters), seed=seed,
                          field_seed=seed + FIELD_SEED_OFFSET)
    trace = EpisodeTrace(scenario=scenario.name, policy=policy_name, seed=seed, objective=scenario.objective,
                         total_injured=world.total_injured, total_persons=world.total_detectable)
    warnings = []
    if trace.degenerate:
        warnings.append(f"World has no detectable {scenario.objective}; time-until-half is undefined")

    try:
        config = scenario.cost_config(seed + MCTS_SEED_OFFSET, plans, seconds)
        search_map = SearchMap.build(rasters, config)
        policy = make_policy(policy_name, config)
        engine = None
        if policy.uses_inference:
            engine = InferenceEngine(scenario.latent_model(rasters), scenario.initial_theta(),
                                     eb_every=scenario.eb_every, use_eb=scenario.use_eb)

        observer = SceneObserver(world)
        expected = np.zeros(grid.n_cells)
        state = SearchState(expected=expected, explored=frozenset(), position=0, elapsed=0.0)
        # launch: explore the cell under the UAV
        action = Action(ActionKind.JUMP, 0)
        injured = persons = 0
        idle = 0
        step = 0

        while True:
            t = state.elapsed + action_duration(action, state, search_map)
            n = m = None
            new_observations = []
            if action.explores:
                obs = observer.observe_cell(action.target, t)
                new_observations.append(obs)
                n, m = obs.n, obs.m
                injured += obs.m
                persons += obs.n
                idle = 0
            else:
                idle += 1
                if idle > grid.n_cells:
                    raise EpisodeError(f"Episode stalled after {step} actions without exploring")
            trace.rows.append(TraceRow(step=step, t=t, action=action.kind.value, cell=action.target,
                                       n=n, m=m, injured_found=injured, persons_found=persons))
            step += 1
            explored = state.explored | {action.target} if action.explores else state.explored
            if observer.complete:
                break

            if engine is not None:
                if new_observations:
                    engine.update(new_observations)
                expected = np.asarray(engine.predict(explored).expected)
                trace.maps.setdefault('predicted_first', expected)
                trace.maps['predicted_last'] = expected
            state = SearchState(expected=expected, explored=frozenset(explored), position=action.target, elapsed=t)
            decision = policy.decide(state, search_map)
            trace.decisions.append(decision)
            action = decision.action

        logger.info(f"Episode {scenario.name}/{policy_name}/seed={seed}: {len(trace.rows)} actions, "
                    f"{trace.rows[-1].t:.1f} min, found {injured}/{world.total_injured} injured")
        return EpisodeResult(success=True, trace=trace, errors=[], warnings=warnings,
                             execution_time=time.perf_counter() - start_time)

    except Exception as e:
        error_msg = f"Episode {scenario.name}/{policy_name}/seed={seed} failed: {e}"
        logger.error(error_msg)
        logger.debug(traceback.format_exc())
        return EpisodeResult(success=False, trace=trace, errors=[error_msg], warnings=warnings,
                             execution_time=time.perf_counter() - start_time)


def time_until_half(trace: EpisodeTrace) -> Optional[float]:
    """
    Minutes until ⌈total/2⌉ of the objective is found, interpolated linearly
    inside the crossing action. None when the trace is degenerate.
    """
    if trace.degenerate:
        return None
    target = math.ceil(trace.total / 2.0)
    times, found = trace.found_series()
    prev_t, prev_found = 0.0, 0.0
    for t, f in zip(times, found):
        if f >= target:
            fraction = (target - prev_found) / (f - prev_found)
            return float(prev_t + fraction * (t - prev_t))
        prev_t, prev_found = t, f
    return None


# === Replication statistics ===

def proportion_curve(trace: EpisodeTrace, grid_minutes: np.ndarray) -> np.ndarray:
    """Proportion of the objective found at each grid time (step interpolation)."""
    times, found = trace.found_series()
    idx = np.searchsorted(times, grid_minutes, side='right') - 1
    values = np.where(idx >= 0, found[np.clip(idx, 0, None)] if found.size else 0.0, 0.0)
    return values / trace.total if trace.total > 0 else np.zeros_like(grid_minutes, dtype=float)


def _band_stats(matrix: np.ndarray) -> Dict[str, np.ndarray]:
    n = matrix.shape[0]
    mean = matrix.mean(axis=0)
    sd = matrix.std(axis=0, ddof=1) if n > 1 else np.zeros_like(mean)
    half = Z_95 * sd / math.sqrt(n)
    return {'mean': mean, 'ci_lo': mean - half, 'ci_hi': mean + half,
            'pred_lo': np.percentile(matrix, 2.5, axis=0), 'pred_hi': np.percentile(matrix, 97.5, axis=0)}


def curves_frame(results: Dict[str, List[EpisodeResult]], step_minutes: float = 1.0) -> pd.DataFrame:
    """Mean proportion-found curve per policy with 95% CI and predictive band."""
    usable = {p: [r for r in rs if r.success and not r.trace.degenerate] for p, rs in results.items()}
    horizon = max((r.trace.rows[-1].t for rs in usable.values() for r in rs if r.trace.rows), default=0.0)
    grid_minutes = np.arange(0.0, math.ceil(horizon) + step_minutes, step_minutes)
    frames = []
    for policy, rs in usable.items():
        if not rs:
            continue
        stats = _band_stats(np.vstack([proportion_curve(r.trace, grid_minutes) for r in rs]))
        frames.append(pd.DataFrame({'t': grid_minutes, 'policy': policy, **stats}))
    columns = ['t', 'policy', 'mean', 'ci_lo', 'ci_hi', 'pred_lo', 'pred_hi']
    return pd.concat(frames, ignore_index=True)[columns] if frames else pd.DataFrame(columns=columns)


def paired_difference(results: Dict[str, List[EpisodeResult]], a: str, b: str,
                      step_minutes: float = 1.0) -> pd.DataFrame:
    """Per-seed difference of proportion curves a − b over seeds that succeeded under both."""
    by_seed_a = {r.trace.seed: r for r in results.get(a, []) if r.success and not r.trace.degenerate}
    by_seed_b = {r.trace.seed: r for r in results.get(b, []) if r.success and not r.trace.degenerate}
    seeds = sorted(set(by_seed_a) & set(by_seed_b))
    columns = ['t', 'mean', 'ci_lo', 'ci_hi', 'pred_lo', 'pred_hi']
    if not seeds:
        return pd.DataFrame(columns=columns)
    horizon = max(max(by_seed_a[s].trace.rows[-1].t, by_seed_b[s].trace.rows[-1].t) for s in seeds)
    grid_minutes = np.arange(0.0, math.ceil(horizon) + step_minutes, step_minutes)
    diffs = np.vstack([proportion_curve(by_seed_a[s].trace, grid_minutes)
                       - proportion_curve(by_seed_b[s].trace, grid_minutes) for s in seeds])
    return pd.DataFrame({'t': grid_minutes, **_band_stats(diffs)})[columns]


def summary_frame(results: Dict[str, List[EpisodeResult]]) -> pd.DataFrame:
    rows = []
    for policy, rs in results.items():
        halves = [time_until_half(r.trace) for r in rs if r.success]
        values = np.array([h for h in halves if h is not None], dtype=float)
        n = values.size
        mean = float(values.mean()) if n else math.nan
        half = Z_95 * float(values.std(ddof=1)) / math.sqrt(n) if n > 1 else 0.0
        rows.append({'policy': policy, 'mean_t_half': mean, 'ci_lo': mean - half, 'ci_hi': mean + half,
                     'n_ok': n, 'n_failed': sum(1 for r in rs if not r.success),
                     'n_degenerate': sum(1 for h in halves if h is None)})
    return pd.DataFrame(rows, columns=['policy', 'mean_t_half', 'ci_lo', 'ci_hi', 'n_ok', 'n_failed', 'n_degenerate'])


def trace_frame(trace: EpisodeTrace) -> pd.DataFrame:
    frame = pd.DataFrame([vars(r) for r in trace.rows],
                         columns=['step', 't', 'action', 'cell', 'n', 'm', 'injured_found', 'persons_found'])
    frame['n'] = frame['n'].astype('Int64')
    frame['m'] = frame['m'].astype('Int64')
    return frame


@dataclass
class ReplicationResult:
    scenario: str
    results: Dict[str, List[EpisodeResult]]
    summary: pd.DataFrame
    curves: pd.DataFrame
    difference: pd.DataFrame

    @property
    def failure_rate(self) -> float:
        total = sum(len(rs) for rs in self.results.values())
        failed = sum(1 for rs in self.results.values() for r in rs if not r.success)
        return failed / total if total else 0.0

    @property
    def healthy(self) -> bool:
        return self.failure_rate <= MAX_FAILURE_RATE


def _run_replicate(job: Tuple[Scenario, str, int, Optional[int], Optional[float]]) -> EpisodeResult:
    scenario, policy, seed, plans, seconds = job
    return run_episode(scenario, policy, seed, plans=plans, seconds=seconds)


def replicate(scenario: Scenario, policies: Sequence[str], n: int, base_seed: int = 0,
              plans: Optional[int] = None, seconds: Optional[float] = None,
              workers: int = 1) -> ReplicationResult:
    """n paired replicates per policy (seeds base_seed .. base_seed+n-1), reduced in seed order."""
    if n < 2:
        raise ConfigError("Replication needs at least 2 replicates")
    for p in policies:
        make_policy(p, CostConfig())
    jobs = [(scenario, p, base_seed + i, plans, seconds) for p in policies for i in range(n)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_replicate, jobs))
    else:
        outcomes = [_run_replicate(job) for job in jobs]

    results: Dict[str, List[EpisodeResult]] = {p: [] for p in policies}
    for (_, policy, _, _, _), outcome in zip(jobs, outcomes):
        results[policy].append(outcome)
    for rs in results.values():
        rs.sort(key=lambda r: r.trace.seed)

    difference = paired_difference(results, 'mctsjump', 'mcts') \
        if {'mcts', 'mctsjump'} <= set(policies) else pd.DataFrame()
    replication = ReplicationResult(scenario=scenario.name, results=results, summary=summary_frame(results),
                                    curves=curves_frame(results), difference=difference)
    if not replication.healthy:
        logger.warning(f"{replication.failure_rate:.0%} of replicates failed in scenario {scenario.name}")
    return replication


# === Heatmaps ===

# anchor colours of the ramp, low to high
RAMP = np.array([
    [48, 18, 59],
    [40, 120, 220],
    [30, 200, 120],
    [250, 200, 40],
    [220, 40, 30],
], dtype=float)

def ramp_colours(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    lo, hi = float(values.min()), float(values.max())
    v = (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)
    anchors = np.linspace(0.0, 1.0, len(RAMP))
    return np.stack([np.interp(v, anchors, RAMP[:, c]) for c in range(3)], axis=-1).round().astype(np.uint8)


def _cells_image(colours: np.ndarray, grid: Grid, scale: int) -> Image.Image:
    # north-up: row j = ny-1 is the top of the picture
    pixels = colours.reshape(grid.ny, grid.nx, 3)[::-1]
    image = Image.fromarray(np.ascontiguousarray(pixels))
    return image.resize((grid.nx * scale, grid.ny * scale), Image.Resampling.NEAREST) if scale > 1 else image


def _pixel(grid: Grid, cell: int, scale: int) -> Tuple[float, float]:
    i, j = cell % grid.nx, cell // grid.nx
    return (i + 0.5) * scale, (grid.ny - 1 - j + 0.5) * scale


def heatmap_image(values: np.ndarray, grid: Grid, path_cells: Optional[Sequence[int]] = None,
                  scale: int = 8) -> Image.Image:
    values = np.asarray(values, dtype=float)
    if values.shape != (grid.n_cells,) or not np.all(np.isfinite(values)):
        raise ConfigError("Heatmap needs one finite value per cell")
    image = _cells_image(ramp_colours(values), grid, scale)
    if path_cells is not None and len(path_cells) > 1:
        ImageDraw.Draw(image).line([_pixel(grid, c, scale) for c in path_cells], fill=(255, 255, 255),
                                   width=max(1, scale // 4))
    return image


def render_heatmap(values: np.ndarray, grid: Grid, path: str, path_cells: Optional[Sequence[int]] = None,
                   scale: int = 8) -> None:
    """Write a PPM heatmap of a per-cell field with an optional UAV path polyline."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(image_to_ppm(heatmap_image(values, grid, path_cells, scale)))


def scene_image(world: WorldRealization, seed: int, scale: int = 8) -> Image.Image:
    """Log population intensity with persons as dots: injured red, detectable yellow, undetectable grey."""
    grid = world.grid
    image = _cells_image(ramp_colours(np.log(world.intensity)), grid, scale)
    draw = ImageDraw.Draw(image)
    points = scatter_points(world, seed)
    sx, sy = grid.nx * scale / grid.extent_x_m, grid.ny * scale / grid.extent_y_m
    for x, y, detectable, injured in zip(points['x'], points['y'], points['detectable'], points['injured']):
        colour = (220, 30, 30) if injured else (250, 230, 40) if detectable else (120, 120, 120)
        px, py = x * sx, grid.ny * scale - y * sy
        draw.ellipse([px - 1, py - 1, px + 1, py + 1], fill=colour)
    return image


def render_scene(world: WorldRealization, path: str, seed: int = 0) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(image_to_ppm(scene_image(world, seed)))


# === Runner ===

@dataclass
class RunResult:
    """Result of a simulate/bench run, in the shape of the episode results."""
    success: bool
    output_path: str
    written_files: List[str]
    errors: List[str]
    warnings: List[str]
    execution_time: float
    summary: Optional[pd.DataFrame] = None


class ExperimentRunner:
    """Coordinates episodes and writes their outputs under `<output_dir>/<scenario>/`."""

    def __init__(self, output_dir: Optional[str] = None):
        self.output_dir = output_dir or output_root()
        self.file_writer = FileWriter(self.output_dir)

    def _truth_map(self, scenario: Scenario, world: WorldRealization) -> np.ndarray:
        if scenario.objective == 'persons':
            return world.grid.cell_area * world.intensity * world.detection
        return world.expected_injured()

    async def simulate(self, scenario: Scenario, policy: str, seed: int,
                       plans: Optional[int] = None, seconds: Optional[float] = None) -> RunResult:
        """One episode with its trace, decisions, world snapshot and heatmaps."""
        start_time = time.perf_counter()
        print(f"📋 Scenario {scenario.name}: {scenario.nx}x{scenario.ny} grid, policy {policy}, seed {seed}")
        rasters = scenario.build_rasters()
        print("🔨 Running episode...")
        result = await asyncio.to_thread(run_episode, scenario, policy, seed, plans, seconds, rasters)
        if not result.success:
            for error in result.errors:
                print(f"❌ {error}")
            return RunResult(success=False, output_path="", written_files=[], errors=result.errors,
                             warnings=result.warnings, execution_time=time.perf_counter() - start_time)

        print("💾 Writing outputs...")
        run_path = os.path.join(self.output_dir, scenario.name, policy)
        trace = result.trace
        world = realize_world(rasters, scenario.truth_specs(rasters), seed=seed,
                              field_seed=seed + FIELD_SEED_OFFSET)
        files = {
            f"trace_{seed}.csv": table_to_csv(trace_frame(trace)),
            f"world_{seed}.csv": table_to_csv(world_to_frame(world)),
            f"truth_{seed}.ppm": image_to_ppm(heatmap_image(self._truth_map(scenario, world), rasters.grid,
                                                            trace.path)),
            f"scene_{seed}.ppm": image_to_ppm(scene_image(world, seed + SCATTER_SEED_OFFSET)),
        }
        if trace.decisions:
            files[f"decisions_{seed}.csv"] = table_to_csv(decisions_frame(trace.decisions))
        for key, values in trace.maps.items():
            files[f"{key}_{seed}.ppm"] = image_to_ppm(heatmap_image(values, rasters.grid, trace.path))
        written = await self.file_writer.write_files(files, run_path)
        half = time_until_half(trace)
        await self.file_writer.save_run_log(run_path, {
            'scenario': scenario.name, 'policy': policy, 'seed': seed, 'actions': len(trace.rows),
            'minutes': trace.rows[-1].t, 'time_until_half': half, 'execution_time': result.execution_time,
        })
        print(f"✅ {len(trace.rows)} actions, time until half: "
              f"{'undefined' if half is None else f'{half:.1f} min'}")
        return RunResult(success=len(written) == len(files), output_path=run_path, written_files=written,
                         errors=[] if len(written) == len(files) else ["Some outputs could not be written"],
                         warnings=result.warnings, execution_time=time.perf_counter() - start_time)

    async def bench(self, scenario: Scenario, policies: Sequence[str], n: int, base_seed: int,
                    plans: Optional[int] = None, seconds: Optional[float] = None, workers: int = 1) -> RunResult:
        """Replicate every policy and write summary, curves, difference curve and traces."""
        start_time = time.perf_counter()
        print(f"📋 Scenario {scenario.name}: {len(policies)} policies x {n} replicates")
        replication = await asyncio.to_thread(replicate, scenario, policies, n, base_seed, plans, seconds, workers)

        print("💾 Writing outputs...")
        run_path = os.path.join(self.output_dir, scenario.name)
        files = {
            'summary.csv': table_to_csv(replication.summary),
            'curves.csv': table_to_csv(replication.curves),
        }
        if not replication.difference.empty:
            files['difference.csv'] = table_to_csv(replication.difference)
        for policy, rs in replication.results.items():
            for r in rs:
                files[os.path.join(policy, f"trace_{r.trace.seed}.csv")] = table_to_csv(trace_frame(r.trace))
        written = await self.file_writer.write_files(files, run_path)

        errors = [e for rs in replication.results.values() for r in rs for e in r.errors]
        if not replication.healthy:
            errors.append(f"Failure rate {replication.failure_rate:.0%} exceeds {MAX_FAILURE_RATE:.0%}")
        if len(written) != len(files):
            errors.append("Some outputs could not be written")
        for row in replication.summary.itertuples():
            print(f"  📊 {row.policy}: mean time until half {row.mean_t_half:.1f} min "
                  f"[{row.ci_lo:.1f}, {row.ci_hi:.1f}] ({row.n_ok} ok, {row.n_failed} failed)")
        success = replication.healthy and len(written) == len(files)
        return RunResult(success=success, output_path=run_path, written_files=written, errors=errors,
                         warnings=[w for rs in replication.results.values() for r in rs for w in r.warnings],
                         execution_time=time.perf_counter() - start_time, summary=replication.summary)
