import sys
import os
sys.path.insert(0, os.path.abspath(os.path.dirname(__file__)))

import asyncio
import math
import time

import numpy as np
import pytest
from PIL import Image

from harness import (
    FIELD_SEED_OFFSET,
    MCTS_SEED_OFFSET,
    RAMP,
    EpisodeResult,
    EpisodeTrace,
    ExperimentRunner,
    Scenario,
    TraceRow,
    TruthField,
    build_scenario,
    curves_frame,
    heatmap_image,
    paired_difference,
    parse_scenario_text,
    proportion_curve,
    render_heatmap,
    render_scene,
    replicate,
    resolve_scenario,
    run_episode,
    summary_frame,
    time_until_half,
    trace_frame,
)
from planner import SearchMap, SearchState, mcts_search
from spatial.errors import ConfigError
from spatial.geo import build_grid
from spatial.inference import CoefficientPrior, FieldHyper, InferenceEngine
from spatial.simworld import SceneObserver, realize_world
from spatial.types import Link

SMALL = '6x4'


def hand_trace(rows, total_injured, seed=0, objective='injured'):
    trace = EpisodeTrace(scenario='X', policy='p', seed=seed, objective=objective,
                         total_injured=total_injured, total_persons=total_injured)
    for step, (t, found) in enumerate(rows):
        trace.rows.append(TraceRow(step=step, t=t, action='explore', cell=step, n=found, m=found,
                                   injured_found=found, persons_found=found))
    return trace


def ok(trace):
    return EpisodeResult(success=True, trace=trace, errors=[], warnings=[], execution_time=0.0)


# --- scenarios ---

def test_scenario_a_models_persons_with_intercept_and_field_only():
    scenario = build_scenario('a', SMALL)
    assert scenario.name == 'A'
    assert scenario.objective == 'persons'
    assert scenario.model_population == () and scenario.model_detection == ()
    assert scenario.population_field
    assert (scenario.nx, scenario.ny) == (6, 4)
    model = scenario.latent_model(scenario.build_rasters())
    assert model.injury is None
    assert model.population.columns == ('intercept',)


def test_scenario_d_reports_only_one_of_two_sites():
    scenario = build_scenario('D', SMALL)
    assert scenario.objective == 'injured'
    assert scenario.model_injury == ('G2',)
    assert scenario.injury_field
    rasters = scenario.build_rasters()
    assert {'G2', 'G3'} <= set(rasters.names)
    assert set(scenario.truth['injury'].weights) == {'G2', 'G3'}
    assert scenario.injury_rate == pytest.approx(1.0 / (1.0 + math.exp(4.0)))


def test_unknown_scenario_or_scale_is_a_config_error():
    with pytest.raises(ConfigError):
        build_scenario('Z')
    with pytest.raises(ConfigError):
        build_scenario('B', 'huge')
    with pytest.raises(ConfigError):
        build_scenario('A', '0x5')
    with pytest.raises(ConfigError):
        resolve_scenario('no-such-file.txt')


def test_overlapping_population_and_detection_layers_are_rejected():
    with pytest.raises(ConfigError):
        Scenario(name='bad', truth={'population': TruthField(Link.LOG)},
                 model_population=('forest',), model_detection=('forest',))
    text = "base: B\nmodel.population: buildings forest S\n"
    with pytest.raises(ConfigError):
        parse_scenario_text(text).to_scenario(SMALL)


def test_scenario_without_population_truth_is_rejected():
    with pytest.raises(ConfigError):
        Scenario(name='bad', truth={'injury': TruthField(Link.LOGIT)})


def test_scenario_file_overrides_base(tmp_path):
    path = tmp_path / 'shifted.txt'
    path.write_text(
        "# a shifted injury site\n"
        "name: B-shifted\n"
        "base: B\n"
        "prior population.buildings: mean=20 sd=10\n"
        "site G1: x=0.6 y=0.5 lengthscale=250\n"
        "truth.injury: intercept=-4 G1=5 S=0.5,500\n"
        "model.injury: G1 S\n"
        "theta.population: 2,600\n"
        "eb: off\n"
        "replicates: 4\n"
    )
    scenario = resolve_scenario(str(path), SMALL)
    assert scenario.name == 'B-shifted'
    assert scenario.model_injury == ('G1',)
    assert scenario.injury_field
    assert not scenario.use_eb
    assert scenario.replicates == 4
    assert scenario.priors['population.buildings'] == CoefficientPrior(20.0, 10.0)
    assert scenario.truth['injury'].weights == {'G1': 5.0}
    assert scenario.truth['injury'].hyper == FieldHyper(0.5, 500.0)
    assert scenario.initial_theta()['population'] == FieldHyper(2.0, 600.0)
    # untouched keys come from B
    assert scenario.model_population == ('buildings', 'roads', 'water')
    assert scenario.sites['G1'].x_frac == pytest.approx(0.6)


def test_scenario_file_without_injury_model():
    scenario = parse_scenario_text("base: B\nmodel.injury: -\n").to_scenario(SMALL)
    assert scenario.model_injury is None
    assert scenario.objective == 'persons'


@pytest.mark.parametrize("text", [
    "colour: blue\n",
    "truth.weather: intercept=1\n",
    "base B\n",
    "truth.injury: intercept=abc\n",
    "site G1: x=2 y=0.5 lengthscale=100\n",
    "replicates: 1\n",
])
def test_malformed_scenario_files_are_config_errors(text):
    with pytest.raises(ConfigError):
        parse_scenario_text(text)


def test_scenario_file_needs_population_truth_or_base():
    with pytest.raises(ConfigError):
        parse_scenario_text("truth.injury: intercept=-2\n").to_scenario(SMALL)


# --- episodes ---

def test_lawnmower_episode_explores_every_cell_once():
    scenario = build_scenario('A', SMALL)
    result = run_episode(scenario, 'lawnmower', seed=3)
    assert result.success, result.errors
    trace = result.trace
    explored = [r.cell for r in trace.rows if r.n is not None]
    assert sorted(explored) == list(range(24))
    assert trace.rows[0].cell == 0
    times = [r.t for r in trace.rows]
    assert all(a < b for a, b in zip(times, times[1:]))
    assert trace.rows[-1].persons_found == trace.total_persons
    assert sum(r.n for r in trace.rows if r.n is not None) == trace.total_persons
    assert not trace.maps


def test_episode_is_deterministic_in_seed():
    scenario = build_scenario('A', SMALL)
    a = run_episode(scenario, 'lawnmower', seed=5).trace
    b = run_episode(scenario, 'lawnmower', seed=5).trace
    assert a.rows == b.rows


def test_mcts_episode_records_decisions_and_predictions():
    scenario = build_scenario('D', SMALL)
    result = run_episode(scenario, 'mctsjump', seed=1, plans=40)
    assert result.success, result.errors
    trace = result.trace
    assert len(trace.decisions) == len(trace.rows) - 1
    assert set(trace.maps) == {'predicted_first', 'predicted_last'}
    assert trace.maps['predicted_last'].shape == (24,)
    assert trace.rows[-1].injured_found == trace.total_injured
    frame = trace_frame(trace)
    assert list(frame.columns) == ['step', 't', 'action', 'cell', 'n', 'm', 'injured_found', 'persons_found']
    assert str(frame['n'].dtype) == 'Int64'


def test_unknown_policy_fails_the_episode_with_a_partial_trace():
    result = run_episode(build_scenario('A', SMALL), 'greedy', seed=0)
    assert not result.success
    assert 'greedy' in result.errors[0]
    assert result.trace.rows == []


def test_empty_world_is_degenerate():
    scenario = Scenario(name='empty', truth={'population': TruthField(Link.LOG, intercept=-60.0)}, nx=3, ny=2)
    result = run_episode(scenario, 'lawnmower', seed=0)
    assert result.success
    assert result.trace.degenerate
    assert result.warnings
    assert time_until_half(result.trace) is None


# --- time until half ---

def test_time_until_half_interpolates_inside_crossing_action():
    trace = hand_trace([(2.0, 1), (6.0, 4)], total_injured=4)
    # target 2 found: one third of the way from 2 min to 6 min
    assert time_until_half(trace) == pytest.approx(2.0 + 4.0 / 3.0)


def test_time_until_half_single_injured():
    trace = hand_trace([(1.0, 0), (5.0, 1)], total_injured=1)
    assert time_until_half(trace) == pytest.approx(5.0)


def test_time_until_half_of_truncated_trace_is_none():
    assert time_until_half(hand_trace([(1.0, 0), (2.0, 1)], total_injured=6)) is None
    assert time_until_half(hand_trace([(1.0, 0)], total_injured=0)) is None


def test_proportion_curve_is_a_step_function():
    trace = hand_trace([(1.5, 1), (3.0, 3), (4.0, 4)], total_injured=4)
    curve = proportion_curve(trace, np.array([0.0, 1.0, 2.0, 3.0, 4.0, 5.0]))
    assert np.allclose(curve, [0.0, 0.0, 0.25, 0.75, 1.0, 1.0])


# --- replication statistics ---

def test_identical_replicates_have_zero_width_intervals():
    results = {'lawnmower': [ok(hand_trace([(2.0, 1), (6.0, 4)], 4, seed=s)) for s in (0, 1)]}
    summary = summary_frame(results)
    row = summary.iloc[0]
    assert row['mean_t_half'] == pytest.approx(2.0 + 4.0 / 3.0)
    assert row['ci_lo'] == row['ci_hi']
    assert (row['n_ok'], row['n_failed'], row['n_degenerate']) == (2, 0, 0)
    curves = curves_frame(results)
    assert np.allclose(curves['ci_lo'], curves['ci_hi'])
    assert curves['mean'].iloc[-1] == pytest.approx(1.0)


def test_self_difference_is_zero():
    results = {'a': [ok(hand_trace([(1.0, 1), (3.0, 2)], 2, seed=s)) for s in (0, 1, 2)]}
    diff = paired_difference(results, 'a', 'a')
    assert np.allclose(diff['mean'], 0.0)
    assert np.allclose(diff['pred_hi'] - diff['pred_lo'], 0.0)


def test_summary_counts_failed_and_degenerate_replicates():
    failed = EpisodeResult(success=False, trace=hand_trace([], 3, seed=1), errors=['boom'], warnings=[],
                           execution_time=0.0)
    empty = ok(hand_trace([(1.0, 0)], 0, seed=2))
    summary = summary_frame({'mcts': [ok(hand_trace([(1.0, 2)], 2)), failed, empty]})
    row = summary.iloc[0]
    assert (row['n_ok'], row['n_failed'], row['n_degenerate']) == (1, 1, 1)


def test_replicate_pairs_seeds_across_policies():
    scenario = build_scenario('A', SMALL)
    replication = replicate(scenario, ['lawnmower', 'mcts'], n=2, base_seed=10, plans=20)
    assert replication.healthy
    assert [r.trace.seed for r in replication.results['mcts']] == [10, 11]
    lawn = [r.trace.total for r in replication.results['lawnmower']]
    mcts = [r.trace.total for r in replication.results['mcts']]
    assert lawn == mcts
    assert list(replication.summary['policy']) == ['lawnmower', 'mcts']
    assert replication.difference.empty


def test_replicate_needs_two_replicates_and_known_policies():
    scenario = build_scenario('A', SMALL)
    with pytest.raises(ConfigError):
        replicate(scenario, ['lawnmower'], n=1)
    with pytest.raises(ConfigError):
        replicate(scenario, ['greedy'], n=2)


# --- heatmaps ---

def test_constant_field_renders_uniformly():
    grid = build_grid(300, 200, 3, 2)
    image = heatmap_image(np.full(6, 2.5), grid, scale=2)
    assert image.size == (6, 4)
    assert set(image.getdata()) == {tuple(int(c) for c in RAMP[0])}


def test_heatmap_is_north_up_and_spans_the_ramp():
    grid = build_grid(200, 200, 2, 2)
    image = heatmap_image(np.array([0.0, 1.0, 2.0, 3.0]), grid, scale=1)
    colours = {image.getpixel((x, y)) for x in range(2) for y in range(2)}
    assert len(colours) == 4
    # cell 3 is (i=1, j=1): top right
    assert image.getpixel((1, 0)) == tuple(int(c) for c in RAMP[-1])
    assert image.getpixel((0, 1)) == tuple(int(c) for c in RAMP[0])


def test_heatmap_rejects_non_finite_values():
    grid = build_grid(200, 100, 2, 1)
    with pytest.raises(ConfigError):
        heatmap_image(np.array([1.0, np.nan]), grid)
    with pytest.raises(ConfigError):
        heatmap_image(np.array([1.0, 2.0, 3.0]), grid)


def test_heatmap_render_is_byte_identical(tmp_path):
    grid = build_grid(400, 300, 4, 3)
    values = np.arange(12, dtype=float) ** 2
    first, second = tmp_path / 'a.ppm', tmp_path / 'b' / 'b.ppm'
    render_heatmap(values, grid, str(first), path_cells=[0, 1, 5, 6])
    render_heatmap(values, grid, str(second), path_cells=[0, 1, 5, 6])
    data = first.read_bytes()
    assert data.startswith(b'P6')
    assert data == second.read_bytes()


def test_scene_render_is_sized_to_the_grid_and_repeatable(tmp_path):
    scenario = build_scenario('B', SMALL)
    rasters = scenario.build_rasters()
    world = realize_world(rasters, scenario.truth_specs(rasters), seed=1)
    path = tmp_path / 'scene' / 'scene.ppm'
    render_scene(world, str(path), seed=3)
    with Image.open(path) as image:
        assert image.size == (6 * 8, 4 * 8)
    first = path.read_bytes()
    render_scene(world, str(path), seed=3)
    assert path.read_bytes() == first


# --- runner ---

def test_runner_simulate_writes_trace_and_heatmaps(tmp_path):
    runner = ExperimentRunner(str(tmp_path))
    result = asyncio.run(runner.simulate(build_scenario('B', SMALL), 'mcts', seed=2, plans=30))
    assert result.success, result.errors
    names = set(os.listdir(result.output_path))
    assert {'trace_2.csv', 'world_2.csv', 'truth_2.ppm', 'scene_2.ppm', 'decisions_2.csv',
            'predicted_first_2.ppm', 'predicted_last_2.ppm', 'run_log.json'} <= names


def test_runner_bench_writes_summary_and_traces(tmp_path):
    runner = ExperimentRunner(str(tmp_path))
    result = asyncio.run(runner.bench(build_scenario('A', SMALL), ['lawnmower', 'mcts', 'mctsjump'],
                                      n=2, base_seed=0, plans=20))
    assert result.success, result.errors
    assert len(result.summary) == 3
    root = tmp_path / 'A'
    assert (root / 'summary.csv').exists()
    assert (root / 'curves.csv').exists()
    assert (root / 'difference.csv').exists()
    assert (root / 'mctsjump' / 'trace_1.csv').exists()


# --- policy comparisons ---

def halves_by_seed(replication, policy):
    return {r.trace.seed: time_until_half(r.trace) for r in replication.results[policy]
            if r.success and time_until_half(r.trace) is not None}


def paired_halves(replication, a, b):
    first, second = halves_by_seed(replication, a), halves_by_seed(replication, b)
    seeds = sorted(set(first) & set(second))
    return np.array([first[s] - second[s] for s in seeds])


@pytest.mark.slow
def test_policy_ordering_on_informative_covariates():
    replication = replicate(build_scenario('B', '25x17'), ['lawnmower', 'mcts', 'mctsjump'], n=15,
                            base_seed=0, plans=1000, workers=os.cpu_count() or 1)
    assert replication.healthy
    summary = replication.summary.set_index('policy')['mean_t_half']
    assert summary['mctsjump'] <= summary['mcts'] < summary['lawnmower']
    assert summary['mcts'] <= 0.5 * summary['lawnmower']
    assert paired_halves(replication, 'mctsjump', 'mcts').mean() <= 0.0


@pytest.mark.slow
def test_field_only_model_beats_lawnmower_with_confidence():
    replication = replicate(build_scenario('A', '25x17'), ['lawnmower', 'mcts'], n=10,
                            base_seed=0, plans=1000, workers=os.cpu_count() or 1)
    diffs = paired_halves(replication, 'mcts', 'lawnmower')
    assert diffs.size >= 8
    upper = diffs.mean() + 1.96 * diffs.std(ddof=1) / math.sqrt(diffs.size)
    assert upper < 0.0


@pytest.mark.slow
def test_small_fixture_dominance():
    replication = replicate(build_scenario('B', '10x7'), ['lawnmower', 'mcts', 'mctsjump'], n=5,
                            base_seed=0, plans=2000)
    summary = replication.summary.set_index('policy')['mean_t_half']
    assert summary['mctsjump'] <= summary['mcts'] <= summary['lawnmower']


@pytest.mark.slow
def test_jumps_do_not_hurt_on_clustered_injuries():
    scenario = build_scenario('C', '12x8')
    replication = replicate(scenario, ['mcts', 'mctsjump'], n=10, base_seed=0, plans=2000)
    summary = replication.summary.set_index('policy')
    assert summary.loc['mctsjump', 'mean_t_half'] <= summary.loc['mcts', 'mean_t_half'] * 1.1


@pytest.mark.slow
def test_jump_planner_reaches_the_unreported_site_earlier():
    scenario = build_scenario('D', '12x8')
    grid = scenario.grid
    ci, cj = int(0.7 * grid.nx), int(0.7 * grid.ny)
    block = {grid.flatten(i, j) for i in range(ci - 1, ci + 2) for j in range(cj - 1, cj + 2)}

    def first_visit(trace):
        explored = [r.cell for r in trace.rows if r.n is not None]
        return min(explored.index(c) for c in block)

    earlier = 0
    for seed in range(15):
        jump = run_episode(scenario, 'mctsjump', seed, plans=2000)
        lawn = run_episode(scenario, 'lawnmower', seed)
        assert jump.success and lawn.success
        earlier += first_visit(jump.trace) < first_visit(lawn.trace)
    assert earlier >= 9


@pytest.mark.slow
def test_full_scale_refit_predict_and_plan_fit_the_real_time_loop():
    scenario = build_scenario('B', 'full')
    rasters = scenario.build_rasters()
    world = realize_world(rasters, scenario.truth_specs(rasters), seed=0, field_seed=FIELD_SEED_OFFSET)
    config = scenario.cost_config(seed=MCTS_SEED_OFFSET, plans=100000)
    search_map = SearchMap.build(rasters, config)
    engine = InferenceEngine(scenario.latent_model(rasters), scenario.initial_theta(),
                             eb_every=scenario.eb_every, use_eb=False)
    observer = SceneObserver(world)
    sweep = search_map.sweep_order
    engine.update([observer.observe_cell(c, float(t)) for t, c in enumerate(sweep[:199])])

    start = time.perf_counter()
    engine.update([observer.observe_cell(sweep[199], 199.0)])
    explored = frozenset(sweep[:200])
    prediction = engine.predict(explored)
    state = SearchState(expected=prediction.expected, explored=explored, position=sweep[199])
    result = mcts_search(state, search_map, config)
    assert time.perf_counter() - start < 10.0
    assert result.plans == 100000
