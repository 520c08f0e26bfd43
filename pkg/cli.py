"""
Command-line entry point: map tools, single episodes, replicated benches and
offline inference from a recorded trace.

    python cli.py map generate --seed 3 --out maps/
    python cli.py simulate --scenario D --policy mctsjump --seed 1
    python cli.py bench --scenario B --policies lawnmower,mcts,mctsjump --reps 15 --seed 7
    python cli.py infer --scenario B --trace results/B/mcts/trace_1.csv
"""

import os
import sys
import asyncio
import logging
import argparse
from collections import Counter
from typing import List, Optional

import pandas as pd
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from file_writer import FileWriter, table_to_csv
from harness import ExperimentRunner, resolve_scenario
from planner import POLICY_NAMES
from spatial.errors import ConfigError, RasterFormatError, SarError
from spatial.geo import (
    CovariateRaster,
    build_grid,
    generate_synthetic_map,
    load_raster,
    load_raster_directory,
    read_raster_grid,
    save_raster,
)
from spatial.inference import empirical_bayes, fit_laplace, observations_from_frame, posterior_frame
from spatial.settings import EXTENT_X_M, EXTENT_Y_M, LOG_LEVEL, output_root, scale_preset

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


class RunConfig(BaseModel):
    """Validated arguments of one CLI invocation."""
    subcommand: str
    scenario: Optional[str] = None
    policies: List[str] = []
    reps: int = Field(15, ge=2)
    seed: int = 0
    scale: str = 'desk'
    plans: Optional[int] = Field(None, gt=0)
    seconds: Optional[float] = Field(None, gt=0)
    output_dir: str = Field(default_factory=output_root)
    workers: int = Field(1, ge=1)

    @field_validator('policies')
    @classmethod
    def known_policies(cls, v):
        unknown = [p for p in v if p not in POLICY_NAMES]
        if unknown:
            raise ValueError(f"unsupported policies {unknown}; choose from {list(POLICY_NAMES)}")
        return v

    @model_validator(mode='after')
    def check_budget_and_output(self):
        if self.plans is not None and self.seconds is not None:
            raise ValueError("give either --plans or --seconds, not both")
        existing = os.path.abspath(self.output_dir)
        while not os.path.exists(existing):
            existing = os.path.dirname(existing)
        if not os.access(existing, os.W_OK):
            raise ValueError(f"output directory {self.output_dir} is not writable")
        return self


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog='sar', description='UAV search-and-rescue planning testbed')
    parser.add_argument('--verbose', '-v', action='store_true', help='debug logging')
    sub = parser.add_subparsers(dest='command', required=True)

    map_parser = sub.add_parser('map', help='generate or inspect terrain rasters')
    map_sub = map_parser.add_subparsers(dest='map_command', required=True)
    generate = map_sub.add_parser('generate', help='write a synthetic terrain map as ASCII-grid layers')
    generate.add_argument('--seed', type=int, default=0)
    generate.add_argument('--scale', default='desk', help="'desk', 'full' or NXxNY")
    generate.add_argument('--out', required=True, help='output directory')
    info = map_sub.add_parser('info', help='describe a raster file or a layer directory')
    info.add_argument('path')

    def add_run_arguments(p):
        p.add_argument('--scenario', required=True, help='A, B, C, D or a scenario file')
        p.add_argument('--seed', type=int, default=0)
        p.add_argument('--scale', default='desk', help="'desk', 'full' or NXxNY")
        budget = p.add_mutually_exclusive_group()
        budget.add_argument('--plans', type=int, help='MCTS plans per decision')
        budget.add_argument('--seconds', type=float, help='MCTS wall-clock seconds per decision')
        p.add_argument('--out', help='output root (default $SAR_OUTPUT_DIR or ./results)')

    simulate = sub.add_parser('simulate', help='run one episode and write its trace and heatmaps')
    add_run_arguments(simulate)
    simulate.add_argument('--policy', default='mctsjump', choices=POLICY_NAMES)

    bench = sub.add_parser('bench', help='replicate policies and write summary and curves')
    add_run_arguments(bench)
    bench.add_argument('--policies', default=','.join(POLICY_NAMES), help='comma-separated policy names')
    bench.add_argument('--reps', type=int, help='replicates per policy (default from the scenario)')
    bench.add_argument('--workers', type=int, default=1, help='worker processes')

    infer = sub.add_parser('infer', help='fit the posterior to a recorded trace')
    infer.add_argument('--scenario', required=True)
    infer.add_argument('--scale', default='desk')
    infer.add_argument('--trace', required=True, help='trace CSV with cell, n, m columns')
    infer.add_argument('--no-eb', action='store_true', help='keep the initial hyperparameters')
    infer.add_argument('--out', help='output root')
    return parser


def _run_config(args: argparse.Namespace) -> RunConfig:
    values = {'subcommand': args.command, 'scenario': args.scenario, 'seed': getattr(args, 'seed', 0),
              'scale': args.scale, 'plans': getattr(args, 'plans', None),
              'seconds': getattr(args, 'seconds', None), 'workers': getattr(args, 'workers', 1)}
    if args.out:
        values['output_dir'] = args.out
    if args.command == 'simulate':
        values['policies'] = [args.policy]
    elif args.command == 'bench':
        values['policies'] = [p.strip() for p in args.policies.split(',') if p.strip()]
        if args.reps is not None:
            values['reps'] = args.reps
    try:
        return RunConfig(**values)
    except ValidationError as e:
        raise ConfigError(f"Invalid arguments: {e}")


def cmd_map_generate(args) -> int:
    try:
        preset = scale_preset(args.scale)
    except ValueError as e:
        raise ConfigError(str(e))
    grid = build_grid(EXTENT_X_M, EXTENT_Y_M, preset['nx'], preset['ny'])
    rasters = generate_synthetic_map(grid, args.seed)
    for name in rasters.names:
        save_raster(os.path.join(args.out, f"{name}.asc"), grid, rasters.layer(name))
    print(f"💾 Wrote {len(rasters.names)} layers ({grid.nx}x{grid.ny}) to {args.out}")
    return EXIT_OK


def cmd_map_info(args) -> int:
    if os.path.isdir(args.path):
        rasters = load_raster_directory(args.path)
    elif os.path.isfile(args.path):
        grid = read_raster_grid(args.path)
        name = os.path.splitext(os.path.basename(args.path))[0]
        rasters = CovariateRaster(grid, {name: load_raster(args.path, grid)})
    else:
        raise ConfigError(f"No raster at {args.path}")
    grid = rasters.grid
    print(f"📋 Grid {grid.nx}x{grid.ny}, cells {grid.dx:.1f} m x {grid.dy:.1f} m, "
          f"extent {grid.extent_x_m:.0f} m x {grid.extent_y_m:.0f} m")
    for name in rasters.names:
        values = rasters.layer(name)
        print(f"  {name}: min {values.min():.3f}, mean {values.mean():.3f}, max {values.max():.3f}")
    try:
        counts = Counter(rasters.dominant_class())
        print("  dominant classes: " + ", ".join(f"{k} {v}" for k, v in sorted(counts.items())))
    except SarError:
        pass
    return EXIT_OK


def cmd_simulate(config: RunConfig) -> int:
    scenario = resolve_scenario(config.scenario, config.scale)
    runner = ExperimentRunner(config.output_dir)
    result = asyncio.run(runner.simulate(scenario, config.policies[0], config.seed,
                                         plans=config.plans, seconds=config.seconds))
    for warning in result.warnings:
        print(f"⚠️  {warning}")
    if not result.success:
        for error in result.errors:
            print(f"❌ {error}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"✅ Outputs in {result.output_path} ({result.execution_time:.1f}s)")
    return EXIT_OK


def cmd_bench(config: RunConfig, reps_given: bool) -> int:
    scenario = resolve_scenario(config.scenario, config.scale)
    reps = config.reps if reps_given else scenario.replicates
    runner = ExperimentRunner(config.output_dir)
    result = asyncio.run(runner.bench(scenario, config.policies, reps, config.seed,
                                      plans=config.plans, seconds=config.seconds, workers=config.workers))
    if not result.success:
        for error in result.errors:
            print(f"❌ {error}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"✅ Outputs in {result.output_path} ({result.execution_time:.1f}s)")
    return EXIT_OK


def cmd_infer(args, config: RunConfig) -> int:
    scenario = resolve_scenario(config.scenario, config.scale)
    if not os.path.isfile(args.trace):
        raise ConfigError(f"Trace not found: {args.trace}")
    observations = observations_from_frame(pd.read_csv(args.trace))
    rasters = scenario.build_rasters()
    model = scenario.latent_model(rasters)
    print(f"🔨 Fitting {len(observations)} observations for scenario {scenario.name}")
    if args.no_eb:
        theta, posterior = scenario.initial_theta(), fit_laplace(model, observations, scenario.initial_theta())
    else:
        theta, posterior = empirical_bayes(model, observations, scenario.initial_theta())
    for name, hyper in theta.items():
        if name in posterior.blocks:
            print(f"  📊 {name}: variance {hyper.variance:.3f}, range {hyper.range_m:.0f} m")
    print(f"  📊 log marginal {posterior.log_marginal:.3f}")

    run_path = os.path.join(config.output_dir, scenario.name)
    writer = FileWriter(config.output_dir)
    written = asyncio.run(writer.write_files({'posterior.csv': table_to_csv(posterior_frame(posterior))}, run_path))
    if not written:
        return EXIT_RUNTIME
    print(f"💾 {written[0]}")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (None, 0) else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else LOG_LEVEL,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        if args.command == 'map':
            return cmd_map_generate(args) if args.map_command == 'generate' else cmd_map_info(args)
        config = _run_config(args)
        if args.command == 'simulate':
            return cmd_simulate(config)
        if args.command == 'bench':
            return cmd_bench(config, reps_given=args.reps is not None)
        return cmd_infer(args, config)
    except (ConfigError, RasterFormatError) as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SarError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
