"""Planning-scene domain model and the geometric primitives the pipeline uses.

Coordinates are ego-centric at plan time: the ego sits at (0, 0), +y points
along its heading and +x to its right. Trajectories are sampled at a fixed
cadence (``frame_dt``), one waypoint per future frame.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from safepath.errors import ContractViolation

HORIZON = 6
FRAME_DT = 0.5
HISTORY_LEN = 4
EGO_RADIUS = 1.0


class AgentKind(str, enum.Enum):
    VEHICLE = "vehicle"
    CYCLIST = "cyclist"
    PEDESTRIAN = "pedestrian"
    OBJECT = "object"


DEFAULT_RADIUS = {
    AgentKind.VEHICLE: 1.0,
    AgentKind.CYCLIST: 0.6,
    AgentKind.PEDESTRIAN: 0.5,
    AgentKind.OBJECT: 0.7,
}


class Goal(str, enum.Enum):
    GO_STRAIGHT = "GO STRAIGHT"
    LEFT = "LEFT"
    RIGHT = "RIGHT"
    STOP = "STOP"


def _frozen_points(points, name: str) -> np.ndarray:
    arr = np.array(points, dtype=float).reshape(-1, 2)
    if not np.all(np.isfinite(arr)):
        raise ContractViolation(f"{name} contains non-finite coordinates")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Ordered future waypoints, shape ``(H, 2)``."""

    points: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "points", _frozen_points(self.points, "trajectory"))
        if len(self.points) == 0:
            raise ContractViolation("trajectory must have at least one waypoint")

    def __len__(self) -> int:
        return len(self.points)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return self.points.shape == other.points.shape and bool(
            np.array_equal(self.points, other.points)
        )

    def __hash__(self) -> int:
        return hash(self.points.tobytes())

    def as_tuples(self) -> list[tuple[float, float]]:
        return [(float(x), float(y)) for x, y in self.points]


@dataclass(frozen=True)
class EgoState:
    velocity: tuple[float, float] = (0.0, 0.0)
    heading_rate: float = 0.0
    acceleration: tuple[float, float] = (0.0, 0.0)
    heading_speed: float = 0.0
    steering: float = 0.0
    position: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if tuple(self.position) != (0.0, 0.0):
            raise ContractViolation("ego position must be the origin at plan time")
        values = [*self.velocity, self.heading_rate, *self.acceleration,
                  self.heading_speed, self.steering]
        if not all(math.isfinite(v) for v in values):
            raise ContractViolation("ego state fields must be finite")

    @property
    def speed(self) -> float:
        return math.hypot(*self.velocity)


@dataclass(frozen=True, eq=False)
class AgentTrack:
    agent_id: str
    kind: AgentKind
    current: tuple[float, float]
    predicted: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    radius: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", AgentKind(self.kind))
        object.__setattr__(self, "current", (float(self.current[0]), float(self.current[1])))
        object.__setattr__(self, "predicted", _frozen_points(self.predicted, "agent track"))
        if self.radius == 0.0:
            object.__setattr__(self, "radius", DEFAULT_RADIUS[self.kind])
        if not self.radius > 0:
            raise ContractViolation("agent radius must be positive")

    def positions(self, horizon: int) -> np.ndarray:
        """Position at each of the next ``horizon`` frames, holding the last known one."""
        if len(self.predicted) > horizon:
            raise ContractViolation("agent track longer than the trajectory horizon")
        out = np.empty((horizon, 2))
        n = len(self.predicted)
        out[:n] = self.predicted
        out[n:] = self.predicted[-1] if n else self.current
        return out


@dataclass(frozen=True)
class Scene:
    ego: EgoState
    agents: tuple[AgentTrack, ...] = ()
    history: tuple[tuple[float, float], ...] = ()
    goal: Goal = Goal.GO_STRAIGHT
    frame_dt: float = FRAME_DT
    horizon: int = HORIZON

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        object.__setattr__(self, "goal", Goal(self.goal))
        hist = tuple((float(x), float(y)) for x, y in self.history)
        if len(hist) != HISTORY_LEN:
            raise ContractViolation(f"history must have exactly {HISTORY_LEN} points")
        object.__setattr__(self, "history", hist)
        if not self.frame_dt > 0:
            raise ContractViolation("frame_dt must be positive")

    # serialization mirrors the prompt inputs: perception, ego states, history, goal
    def to_dict(self) -> dict:
        return {
            "perception": [
                {
                    "id": a.agent_id,
                    "kind": a.kind.value,
                    "current": list(a.current),
                    "predicted": [list(p) for p in a.predicted.tolist()],
                    "radius": a.radius,
                }
                for a in self.agents
            ],
            "ego_states": {
                "velocity": list(self.ego.velocity),
                "heading_rate": self.ego.heading_rate,
                "acceleration": list(self.ego.acceleration),
                "heading_speed": self.ego.heading_speed,
                "steering": self.ego.steering,
            },
            "history": [list(p) for p in self.history],
            "goal": self.goal.value,
            "frame_dt": self.frame_dt,
            "horizon": self.horizon,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Scene":
        ego = doc["ego_states"]
        return cls(
            ego=EgoState(
                velocity=tuple(ego["velocity"]),
                heading_rate=ego["heading_rate"],
                acceleration=tuple(ego["acceleration"]),
                heading_speed=ego["heading_speed"],
                steering=ego["steering"],
            ),
            agents=tuple(
                AgentTrack(a["id"], a["kind"], tuple(a["current"]),
                           np.array(a["predicted"], dtype=float).reshape(-1, 2), a["radius"])
                for a in doc["perception"]
            ),
            history=tuple(tuple(p) for p in doc["history"]),
            goal=doc["goal"],
            frame_dt=doc.get("frame_dt", FRAME_DT),
            horizon=doc.get("horizon", HORIZON),
        )


def straight_history(speed: float, dt: float = FRAME_DT) -> tuple[tuple[float, float], ...]:
    """Past waypoints for an ego that drove straight at constant ``speed``."""
    return tuple((0.0, -speed * dt * k) for k in range(HISTORY_LEN, 0, -1))


# -- metrics -----------------------------------------------------------------

def _check_same_length(p: Trajectory, q: Trajectory):
    if len(p) != len(q):
        raise ContractViolation(f"trajectory lengths differ: {len(p)} vs {len(q)}")


def displacement_errors(planned: Trajectory, reference: Trajectory,
                        dt: float = FRAME_DT) -> dict[str, float]:
    """L2 error at 1/2/3 s (nearest waypoint in time) and averaged over all waypoints."""
    _check_same_length(planned, reference)
    dists = np.linalg.norm(planned.points - reference.points, axis=1)
    times = dt * np.arange(1, len(dists) + 1)
    out = {}
    for t in (1, 2, 3):
        out[f"l2_at_{t}s"] = float(dists[int(np.argmin(np.abs(times - t)))])
    out["average"] = float(np.mean(dists))
    return out


def _agent_hits(points: np.ndarray, agents: Sequence[AgentTrack], ego_radius: float,
                margin: float = 0.0) -> list[bool]:
    horizon = len(points)
    hits = []
    for agent in agents:
        gaps = np.linalg.norm(points - agent.positions(horizon), axis=1)
        hits.append(bool(np.any(gaps < ego_radius + agent.radius + margin)))
    return hits


def collision_fraction(p: Trajectory, scene: Scene, ego_radius: float = EGO_RADIUS) -> float:
    """Share of scene agents whose footprint overlaps the ego at some aligned frame."""
    if not scene.agents:
        return 0.0
    hits = _agent_hits(p.points, scene.agents, ego_radius)
    return sum(hits) / len(hits)


@dataclass(frozen=True)
class SafetyOracle:
    """Judges a trajectory against one scene (typically the true future).

    A path is safe when it is collision free, rule compliant and keeps
    ``margin`` meters of clearance beyond the footprints.
    """

    scene: Scene
    margin: float = 0.0
    ego_radius: float = EGO_RADIUS
    rules: tuple[Callable[[Trajectory, Scene], bool], ...] = ()

    def collision_free(self, p: Trajectory) -> bool:
        return not any(_agent_hits(p.points, self.scene.agents, self.ego_radius))

    def rule_compliant(self, p: Trajectory) -> bool:
        return all(rule(p, self.scene) for rule in self.rules)

    def margin_ok(self, p: Trajectory) -> bool:
        return not any(_agent_hits(p.points, self.scene.agents, self.ego_radius, self.margin))

    def is_safe(self, p: Trajectory) -> bool:
        return self.collision_free(p) and self.rule_compliant(p) and self.margin_ok(p)


# -- similarity --------------------------------------------------------------

@dataclass(frozen=True)
class SimilarityConfig:
    sigma: float = 2.0
    backend: str = "geometric"


def average_displacement(p: Trajectory, q: Trajectory) -> float:
    _check_same_length(p, q)
    return float(np.mean(np.linalg.norm(p.points - q.points, axis=1)))


def _geometric(p: Trajectory, q: Trajectory, cfg: SimilarityConfig) -> float:
    return math.exp(-average_displacement(p, q) / cfg.sigma)


SIMILARITY_BACKENDS: dict[str, Callable[[Trajectory, Trajectory, SimilarityConfig], float]] = {
    "geometric": _geometric,
}


def register_similarity_backend(name: str, fn) -> None:
    """Plug in another Sim(p, q) -> [0, 1] (e.g. an embedding cosine)."""
    SIMILARITY_BACKENDS[name] = fn


def similarity(p: Trajectory, q: Trajectory, cfg: SimilarityConfig | None = None) -> float:
    cfg = cfg or SimilarityConfig()
    _check_same_length(p, q)
    if p == q:
        return 1.0
    try:
        backend = SIMILARITY_BACKENDS[cfg.backend]
    except KeyError:
        raise ContractViolation(f"unknown similarity backend {cfg.backend!r}") from None
    return backend(p, q, cfg)


def min_pairwise_similarity(paths: Sequence[Trajectory], cfg: SimilarityConfig | None = None) -> float:
    if len(paths) < 2:
        raise ContractViolation("need at least two paths for pairwise similarity")
    return min(similarity(p, q, cfg) for p, q in itertools.combinations(paths, 2))
