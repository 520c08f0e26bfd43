from enum import Enum
from dataclasses import dataclass


class Link(Enum):
    LOG = "log"
    LOGIT = "logit"
    IDENTITY = "identity"


class TerrainClass(Enum):
    BUILDINGS = "buildings"
    ROADS = "roads"
    WATER = "water"
    FOREST = "forest"
    FIELD = "field"
    # Order matters: synthetic maps and dominant_class() use it


TERRAIN_LAYERS = tuple(t.value for t in TerrainClass)


@dataclass(frozen=True)
class Observation:
    """Detected persons / detected injured in one explored cell."""
    cell: int
    n: int
    m: int
    t: float

    def __post_init__(self):
        if not 0 <= self.m <= self.n:
            raise ValueError(f"Observation needs 0 <= m <= n, got n={self.n} m={self.m}")
