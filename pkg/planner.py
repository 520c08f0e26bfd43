"""
Planner Module - Chooses the next UAV action by Monte-Carlo tree search over the
certainty-equivalent search problem, plus the lawnmower baseline.

The belief over unexplored injured is collapsed to its expectation ê, so a plan
is scored by the harm integral c = ∫ Σ ê(t) h dt (trapezoid rule over action
durations) plus a lawnmower-style cost-to-go for whatever is left at the horizon.
"""

import logging
import math
import random
import time
from abc import ABC, abstractmethod
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from spatial.errors import ArgumentError, ConfigError, UsageError
from spatial.geo import CovariateRaster, Grid
from spatial.types import TerrainClass

logger = logging.getLogger(__name__)

# Explore minutes per terrain indicator
DEFAULT_EXPLORE_MINUTES = {
    TerrainClass.BUILDINGS.value: 1.0,
    TerrainClass.FOREST.value: 2.0,
    TerrainClass.ROADS.value: 0.5,
    TerrainClass.FIELD.value: 0.5,
    TerrainClass.WATER.value: 0.75,
}


class ActionKind(Enum):
    EXPLORE = "explore"
    FLY_THROUGH = "fly_through"
    JUMP = "jump"


class PlannerVariant(Enum):
    MCTS = "mcts"
    MCTS_JUMP = "mctsjump"


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    target: int

    @property
    def explores(self) -> bool:
        return self.kind is not ActionKind.FLY_THROUGH

    def __str__(self):
        return f"{self.kind.value}:{self.target}"


@dataclass(frozen=True)
class CostConfig:
    """Cost model and search budget. Budget is a plan count unless `seconds` is set."""
    explore_minutes: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_EXPLORE_MINUTES))
    speed_mps: float = 10.0
    harm_rate: float = 1.0
    horizon: int = 20
    plans: int = 100000
    seconds: Optional[float] = None
    ucb_c: float = math.sqrt(2.0)
    jump_candidates: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.speed_mps <= 0 or self.harm_rate <= 0 or self.horizon < 1 or self.plans < 1:
            raise ArgumentError("Speed, harm rate, horizon and plan budget must be positive")
        if self.seconds is not None and self.seconds <= 0:
            raise ArgumentError("Seconds budget must be positive")
        if self.ucb_c < 0 or self.jump_candidates < 0:
            raise ArgumentError("UCB constant and jump-candidate count must be non-negative")
        if any(v < 0 for v in self.explore_minutes.values()):
            raise ArgumentError("Explore minutes must be non-negative")


@dataclass(frozen=True)
class SearchMap:
    """Per-episode planning geometry: explore minutes, adjacency with fly minutes, sweep order."""
    grid: Grid
    explore_minutes: Tuple[float, ...]
    neighbors: Tuple[Tuple[Tuple[int, float], ...], ...]
    minutes_per_m: float
    sweep_order: Tuple[int, ...]
    fly_index: Tuple[Dict[int, float], ...] = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        if not self.fly_index:
            object.__setattr__(self, 'fly_index', tuple(dict(moves) for moves in self.neighbors))

    @classmethod
    def build(cls, rasters: CovariateRaster, config: CostConfig) -> 'SearchMap':
        grid = rasters.grid
        minutes = np.zeros(grid.n_cells)
        for name, weight in config.explore_minutes.items():
            if name in rasters.layers:
                minutes = minutes + weight * rasters.layer(name)
        bad = np.flatnonzero(minutes <= 0)
        if bad.size:
            raise ArgumentError(f"Cell {int(bad[0])} has no positive explore time; check terrain layers")
        minutes_per_m = 1.0 / (config.speed_mps * 60.0)
        neighbors = tuple(
            tuple((nb, grid.distance_m(k, nb) * minutes_per_m) for nb in grid.neighbors(k))
            for k in range(grid.n_cells)
        )
        return cls(grid=grid, explore_minutes=tuple(float(m) for m in minutes), neighbors=neighbors,
                   minutes_per_m=minutes_per_m, sweep_order=tuple(boustrophedon_order(grid)))

    def fly_minutes(self, a: int, b: int) -> float:
        return 0.0 if a == b else self.grid.distance_m(a, b) * self.minutes_per_m

    def is_adjacent(self, a: int, b: int) -> bool:
        return b in self.fly_index[a]


def boustrophedon_order(grid: Grid) -> List[int]:
    """Row 0 left to right, row 1 right to left, and so on."""
    order = []
    for j in range(grid.ny):
        row = range(grid.nx) if j % 2 == 0 else range(grid.nx - 1, -1, -1)
        order.extend(j * grid.nx + i for i in row)
    return order


@dataclass(frozen=True)
class SearchState:
    """Certainty-equivalent search state: ê per cell, explored cells, UAV cell, elapsed minutes."""
    expected: np.ndarray
    explored: FrozenSet[int]
    position: int
    elapsed: float = 0.0

    def __post_init__(self):
        n = len(self.expected)
        if not 0 <= self.position < n:
            raise ArgumentError(f"Position {self.position} outside the grid")
        if any(self.expected[c] != 0.0 for c in self.explored):
            raise ArgumentError("Explored cells must carry ê = 0")

    @property
    def remaining(self) -> float:
        return float(np.sum(self.expected))

    @property
    def complete(self) -> bool:
        return len(self.explored) == len(self.expected)


def action_duration(action: Action, state: SearchState, search_map: SearchMap) -> float:
    target = action.target
    if not 0 <= target < search_map.grid.n_cells:
        raise UsageError(f"Action target {target} outside the grid")
    explored = target in state.explored
    if action.kind is ActionKind.JUMP:
        if explored:
            raise UsageError(f"Jump target {target} is already explored")
        return search_map.fly_minutes(state.position, target) + search_map.explore_minutes[target]
    if not search_map.is_adjacent(state.position, target):
        raise UsageError(f"Cell {target} is not adjacent to {state.position}")
    if action.kind is ActionKind.EXPLORE:
        if explored:
            raise UsageError(f"Explore target {target} is already explored")
        return search_map.fly_minutes(state.position, target) + search_map.explore_minutes[target]
    if not explored:
        raise UsageError(f"Fly-through target {target} is not explored")
    return search_map.fly_minutes(state.position, target)


def _adjacent_actions(position: int, explored, search_map: SearchMap) -> List[Action]:
    return [Action(ActionKind.FLY_THROUGH if nb in explored else ActionKind.EXPLORE, nb)
            for nb, _ in search_map.neighbors[position]]


def jump_targets(state: SearchState, search_map: SearchMap, k: int) -> List[int]:
    """Top-k unexplored cells by ê (ties by flat index), minus cells adjacent to the UAV."""
    if k == 0:
        return []
    adjacent = {nb for nb, _ in search_map.neighbors[state.position]}
    order = np.lexsort((np.arange(len(state.expected)), -state.expected))
    out = []
    for cell in order:
        cell = int(cell)
        if cell in state.explored or cell == state.position:
            continue
        out.append(cell)
        if len(out) == k:
            break
    return [c for c in out if c not in adjacent]


def legal_actions(state: SearchState, search_map: SearchMap, variant: PlannerVariant = PlannerVariant.MCTS,
                  at_root: bool = True, jump_candidates: int = 10) -> List[Action]:
    actions = _adjacent_actions(state.position, state.explored, search_map)
    if variant is PlannerVariant.MCTS_JUMP and at_root:
        actions += [Action(ActionKind.JUMP, c) for c in jump_targets(state, search_map, jump_candidates)]
    return actions


def apply_action(state: SearchState, action: Action, search_map: SearchMap) -> SearchState:
    duration = action_duration(action, state, search_map)
    explored, expected = state.explored, state.expected
    if action.explores:
        explored = explored | {action.target}
        expected = expected.copy()
        expected[action.target] = 0.0
        expected.setflags(write=False)
    return SearchState(expected=expected, explored=explored, position=action.target,
                       elapsed=state.elapsed + duration)


def plan_cost(state: SearchState, actions: Sequence[Action], search_map: SearchMap, config: CostConfig) -> float:
    """Trapezoid harm integral of the plan plus ½·R·(explore minutes left) at its end."""
    remaining = state.remaining
    cost = 0.0
    for action in actions:
        duration = action_duration(action, state, search_map)
        gained = float(state.expected[action.target]) if action.explores else 0.0
        cost += duration * (remaining + (remaining - gained)) / 2.0
        remaining -= gained
        state = apply_action(state, action, search_map)
    rest = sum(search_map.explore_minutes[c] for c in range(search_map.grid.n_cells) if c not in state.explored)
    return config.harm_rate * (cost + 0.5 * remaining * rest)


# === Monte-Carlo tree search ===

class TreeNode:
    __slots__ = ('action', 'children', 'untried', 'visits', 'total_cost', 'depth')

    def __init__(self, action: Optional[Action], depth: int):
        self.action = action
        self.children: List['TreeNode'] = []
        self.untried: Optional[List[Action]] = None   # filled on first visit
        self.visits = 0
        self.total_cost = 0.0
        self.depth = depth

    @property
    def mean_cost(self) -> float:
        return self.total_cost / self.visits if self.visits else math.inf

    def size(self) -> int:
        return 1 + sum(c.size() for c in self.children)

    def reroot(self) -> 'TreeNode':
        """
        Detach as a new root. Depths shift by one level; visit counts and costs
        are cleared since they were measured from the old root's baseline and
        beliefs. Children and untried lists are kept.
        """
        offset = self.depth
        stack = [self]
        while stack:
            node = stack.pop()
            node.depth -= offset
            node.visits = 0
            node.total_cost = 0.0
            stack.extend(node.children)
        return self


@dataclass
class SearchResult:
    action: Action
    subtree: TreeNode
    plans: int
    best_cost: float
    root_visits: Dict[str, int] = field(default_factory=dict)


class _Simulator:
    """Mutable scratch state for one search; every iteration is undone afterwards."""

    def __init__(self, state: SearchState, search_map: SearchMap, harm_rate: float):
        self.map = search_map
        self.expected = [float(v) for v in state.expected]
        self.explored = bytearray(search_map.grid.n_cells)
        for c in state.explored:
            self.explored[c] = 1
        self.root_position = state.position
        self.root_remaining = float(sum(self.expected))
        self.root_unexplored = search_map.grid.n_cells - len(state.explored)
        self.root_rest = sum(m for c, m in enumerate(search_map.explore_minutes) if not self.explored[c])
        self.harm_rate = harm_rate
        self.distance = self._distance_to_unexplored()
        self.reset()

    def _distance_to_unexplored(self) -> List[int]:
        n = self.map.grid.n_cells
        dist = [n] * n
        queue = deque()
        for c in range(n):
            if not self.explored[c]:
                dist[c] = 0
                queue.append(c)
        while queue:
            c = queue.popleft()
            for nb, _ in self.map.neighbors[c]:
                if dist[nb] > dist[c] + 1:
                    dist[nb] = dist[c] + 1
                    queue.append(nb)
        return dist

    def reset(self):
        self.position = self.root_position
        self.remaining = self.root_remaining
        self.unexplored = self.root_unexplored
        self.rest = self.root_rest
        self.cost = 0.0
        self.undo: List[int] = []

    def restore(self):
        for c in self.undo:
            self.explored[c] = 0
        self.reset()

    def step(self, action: Action):
        target = action.target
        if action.kind is ActionKind.JUMP:
            duration = self.map.fly_minutes(self.position, target)
        else:
            duration = self.map.fly_index[self.position][target]
        self._advance(target, duration, action.explores)

    def _advance(self, target: int, duration: float, explore: bool):
        gained = 0.0
        if explore:
            minutes = self.map.explore_minutes[target]
            duration += minutes
            gained = self.expected[target]
            self.explored[target] = 1
            self.undo.append(target)
            self.unexplored -= 1
            self.rest -= minutes
        self.cost += duration * (2.0 * self.remaining - gained) * 0.5
        self.remaining -= gained
        self.position = target

    def actions_here(self, with_jumps: List[Action]) -> List[Action]:
        return _adjacent_actions(self.position, _ExploredView(self.explored), self.map) + with_jumps

    def rollout(self, depth: int, horizon: int, rng: random.Random):
        """
        Greedy ratio default policy: best ê gained per minute among adjacent
        unexplored cells. With none adjacent, fly toward the nearest
        unexplored cell.
        """
        explore_minutes = self.map.explore_minutes
        neighbors = self.map.neighbors
        explored, expected, distance = self.explored, self.expected, self.distance
        while depth < horizon and self.unexplored > 0:
            best_ratio = -1.0
            best_dist = math.inf
            ties: List[Tuple[int, float, bool]] = []
            for nb, fly in neighbors[self.position]:
                if not explored[nb]:
                    ratio = expected[nb] / (fly + explore_minutes[nb])
                    if ratio > best_ratio:
                        best_ratio, ties = ratio, [(nb, fly, True)]
                    elif ratio == best_ratio:
                        ties.append((nb, fly, True))
                elif best_ratio < 0.0:
                    d = distance[nb]
                    if d < best_dist:
                        best_dist, ties = d, [(nb, fly, False)]
                    elif d == best_dist:
                        ties.append((nb, fly, False))
            nb, fly, explore = ties[0] if len(ties) == 1 else rng.choice(ties)
            self._advance(nb, fly, explore)
            depth += 1

    def plan_cost(self) -> float:
        return self.harm_rate * (self.cost + 0.5 * self.remaining * self.rest)


class _ExploredView:
    """Set-like membership over the simulator's explored flags."""
    __slots__ = ('flags',)

    def __init__(self, flags: bytearray):
        self.flags = flags

    def __contains__(self, cell: int) -> bool:
        return bool(self.flags[cell])


def _root_matches(tree: Optional[TreeNode], state: SearchState) -> bool:
    return tree is not None and tree.action is not None and tree.action.target == state.position


def mcts_search(state: SearchState, search_map: SearchMap, config: CostConfig,
                variant: PlannerVariant = PlannerVariant.MCTS,
                warm_tree: Optional[TreeNode] = None) -> SearchResult:
    """
    UCT over plans of at most `config.horizon` actions. Returns the root child
    with the lowest mean cost (ties by target flat index) and its subtree for
    the next call.
    """
    root_actions = legal_actions(state, search_map, variant, at_root=True,
                                 jump_candidates=config.jump_candidates)
    if not root_actions:
        raise UsageError("No legal action from this state")

    if _root_matches(warm_tree, state):
        root = warm_tree.reroot()
        known = {c.action for c in root.children} | set(root.untried or [])
        missing = [a for a in root_actions if a not in known]
        if root.untried is None:
            root.untried = list(root_actions)
        else:
            root.untried.extend(missing)
    else:
        root = TreeNode(action=None, depth=0)
        root.untried = list(root_actions)

    if len(root_actions) == 1:
        child = next((c for c in root.children if c.action == root_actions[0]), None) \
            or TreeNode(root_actions[0], 1)
        return SearchResult(action=root_actions[0], subtree=child, plans=0,
                            best_cost=child.mean_cost if child.visits else math.nan)

    rng = random.Random(config.seed)
    sim = _Simulator(state, search_map, config.harm_rate)
    lo, hi = math.inf, -math.inf
    for child in root.children:
        if child.visits:
            lo, hi = min(lo, child.mean_cost), max(hi, child.mean_cost)
    deadline = time.perf_counter() + config.seconds if config.seconds is not None else None
    horizon = config.horizon
    ucb_c = config.ucb_c
    plans = 0

    while True:
        if deadline is not None:
            if time.perf_counter() >= deadline:
                break
        elif plans >= config.plans:
            break

        node = root
        path = [root]
        # selection
        while True:
            if node.untried is None:
                node.untried = sim.actions_here([])
            if node.untried or node.depth >= horizon or sim.unexplored == 0 or not node.children:
                break
            log_n = math.log(node.visits) if node.visits > 1 else 0.0
            span = hi - lo
            best, best_score = None, -math.inf
            for child in node.children:
                if child.visits == 0:
                    score = math.inf
                else:
                    norm = (child.mean_cost - lo) / span if span > 0 else 0.0
                    score = -norm + ucb_c * math.sqrt(log_n / child.visits)
                if score > best_score:
                    best, best_score = child, score
            node = best
            sim.step(node.action)
            path.append(node)

        # expansion
        if node.untried and node.depth < horizon and sim.unexplored > 0:
            action = node.untried.pop(0)
            child = TreeNode(action, node.depth + 1)
            node.children.append(child)
            sim.step(action)
            node = child
            path.append(node)

        sim.rollout(node.depth, horizon, rng)
        cost = sim.plan_cost()
        for n in path:
            n.visits += 1
            n.total_cost += cost
        lo, hi = min(lo, cost), max(hi, cost)
        sim.restore()
        plans += 1

    visited = [c for c in root.children if c.visits]
    if not visited:
        raise UsageError("Search budget too small to evaluate any plan")
    chosen = min(visited, key=lambda c: (c.mean_cost, c.action.target))
    logger.debug(f"MCTS {variant.value}: plans={plans} tree={root.size()} "
                 f"choice={chosen.action} cost={chosen.mean_cost:.3f}")
    return SearchResult(action=chosen.action, subtree=chosen, plans=plans, best_cost=chosen.mean_cost,
                        root_visits={str(c.action): c.visits for c in root.children})


def lawnmower_policy(state: SearchState, search_map: SearchMap) -> Action:
    """Next unexplored cell of the boustrophedon sweep."""
    for cell in search_map.sweep_order:
        if cell not in state.explored:
            if search_map.is_adjacent(state.position, cell):
                return Action(ActionKind.EXPLORE, cell)
            return Action(ActionKind.JUMP, cell)
    raise UsageError("Every cell is already explored")


# === Policies ===

@dataclass(frozen=True)
class PlannerDecision:
    t: float
    action: Action
    plans: int
    best_cost: float


class Policy(ABC):
    name: str
    uses_inference: bool = True

    @abstractmethod
    def decide(self, state: SearchState, search_map: SearchMap) -> PlannerDecision:
        pass

    def reset(self):
        """Forget per-episode state."""


class LawnmowerPolicy(Policy):
    name = "lawnmower"
    uses_inference = False

    def decide(self, state, search_map):
        return PlannerDecision(t=state.elapsed, action=lawnmower_policy(state, search_map),
                               plans=0, best_cost=math.nan)


class MctsPolicy(Policy):
    """MCTS policy carrying its tree between decisions of one episode."""

    def __init__(self, config: CostConfig, variant: PlannerVariant = PlannerVariant.MCTS):
        self.config = config
        self.variant = variant
        self.name = variant.value
        self.tree: Optional[TreeNode] = None

    def decide(self, state, search_map):
        result = mcts_search(state, search_map, self.config, self.variant, warm_tree=self.tree)
        self.tree = result.subtree
        return PlannerDecision(t=state.elapsed, action=result.action, plans=result.plans,
                               best_cost=result.best_cost)

    def reset(self):
        self.tree = None


POLICY_NAMES = ('lawnmower', 'mcts', 'mctsjump')


def make_policy(name: str, config: CostConfig) -> Policy:
    factories = {
        'lawnmower': lambda: LawnmowerPolicy(),
        'mcts': lambda: MctsPolicy(config, PlannerVariant.MCTS),
        'mctsjump': lambda: MctsPolicy(config, PlannerVariant.MCTS_JUMP),
    }
    key = name.strip().lower()
    if key not in factories:
        raise ConfigError(f"Unsupported policy: {name}")
    return factories[key]()


def decisions_frame(decisions: Iterable[PlannerDecision]) -> pd.DataFrame:
    return pd.DataFrame([{
        't': d.t,
        'plans': d.plans,
        'best_cost': d.best_cost,
        'action': d.action.kind.value,
        'target': d.action.target,
    } for d in decisions], columns=['t', 'plans', 'best_cost', 'action', 'target'])
