"""Desk-scale closed-loop driving environments.

The ego replans every frame through generate -> score -> predict_set -> decide
and executes only the first waypoint of what it adopts. Traffic follows fixed
routes with a gap-keeping longitudinal rule that also yields to the ego.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from safepath.conformal import CalibratedThreshold, set_from_scores
from safepath.decision import DecisionConfig, decide
from safepath.generation import GeneratorConfig, generate_candidates
from safepath.scene import (EGO_RADIUS, HISTORY_LEN, AgentKind, AgentTrack, EgoState, Goal,
                            SafetyOracle, Scene)
from safepath.scoring import MockScorer, NoiseConfig, Scorer, build_mcqa


class EnvKind(str, enum.Enum):
    HIGHWAY = "highway"
    INTERSECTION = "intersection"
    ROUNDABOUT = "roundabout"


@dataclass(frozen=True)
class EnvConfig:
    kind: EnvKind = EnvKind.HIGHWAY
    n_agents: int = 8
    frames: int = 100
    dt: float = 0.5
    seed: int = 0
    replan_every: int = 1
    v_max: float = 15.0
    max_turn_rate: float = 1.0
    perception_range: float = 60.0

    def __post_init__(self):
        object.__setattr__(self, "kind", EnvKind(self.kind))
        if self.frames < 1 or self.dt <= 0 or self.replan_every < 1:
            raise ValueError("frames >= 1, dt > 0 and replan_every >= 1 required")


# -- geometry ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Route:
    points: np.ndarray
    closed: bool = False

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if self.closed:
            pts = np.vstack([pts, pts[:1]])
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "_cum", np.concatenate([[0.0], np.cumsum(seg)]))

    @property
    def length(self) -> float:
        return float(self._cum[-1])

    def at(self, s: float) -> tuple[np.ndarray, np.ndarray]:
        """Position and unit tangent at arc length ``s``."""
        if self.closed:
            s = s % self.length
        s = min(max(s, 0.0), self.length)
        i = int(np.clip(np.searchsorted(self._cum, s, side="right") - 1, 0, len(self.points) - 2))
        a, b = self.points[i], self.points[i + 1]
        d = b - a
        n = np.linalg.norm(d)
        u = (s - self._cum[i]) / n if n > 0 else 0.0
        return a + u * d, d / n if n > 0 else np.array([0.0, 1.0])

    def curvature(self) -> float:
        """Mean absolute heading change per meter."""
        d = np.diff(self.points, axis=0)
        ang = np.unwrap(np.arctan2(d[:, 1], d[:, 0]))
        return float(np.sum(np.abs(np.diff(ang))) / self.length)


def straight_route(start, direction, length=4000.0) -> Route:
    start = np.asarray(start, dtype=float)
    d = np.asarray(direction, dtype=float)
    return Route(np.array([start, start + length * d / np.linalg.norm(d)]))


def ring_route(center, radius, n=96) -> Route:
    ang = np.linspace(0, 2 * math.pi, n, endpoint=False)
    pts = np.column_stack([center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang)])
    return Route(pts, closed=True)


# -- world -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Agent:
    agent_id: str
    kind: AgentKind
    route: Route
    s: float
    v: float
    v_desired: float
    radius: float = 1.0

    @property
    def position(self) -> np.ndarray:
        return self.route.at(self.s)[0]

    @property
    def velocity(self) -> np.ndarray:
        return self.v * self.route.at(self.s)[1]


@dataclass(frozen=True, eq=False)
class Ego:
    position: np.ndarray
    heading: float
    speed: float
    history: tuple = ()
    heading_rate: float = 0.0
    radius: float = EGO_RADIUS


@dataclass(frozen=True, eq=False)
class WorldState:
    cfg: EnvConfig
    ego: Ego
    agents: tuple[Agent, ...]
    frame: int = 0
    collided: bool = False


_SPAWN_SPEED = {EnvKind.HIGHWAY: 10.0, EnvKind.INTERSECTION: 8.0, EnvKind.ROUNDABOUT: 8.0}
LANE_WIDTH = 3.5


def _place(rng, n, lo, hi, min_gap, taken=()):
    out = list(taken)
    picked = []
    for _ in range(200 * max(n, 1)):
        if len(picked) == n:
            break
        s = rng.uniform(lo, hi)
        if all(abs(s - t) >= min_gap for t in out):
            out.append(s)
            picked.append(s)
    return picked


def env_init(cfg: EnvConfig) -> WorldState:
    rng = np.random.default_rng([cfg.seed, list(EnvKind).index(cfg.kind)])
    agents = []
    if cfg.kind is EnvKind.HIGHWAY:
        lanes = [-LANE_WIDTH, 0.0, LANE_WIDTH]
        per_lane = {x: [] for x in lanes}
        for i in range(cfg.n_agents):
            per_lane[lanes[int(rng.integers(3))]].append(i)
        for x, ids in per_lane.items():
            taken = [0.0] if x == 0.0 else []
            for i, y in zip(ids, _place(rng, len(ids), -40.0, 160.0, 14.0, taken)):
                vd = float(rng.uniform(4.0, 12.0))
                agents.append(Agent(f"v{i}", AgentKind.VEHICLE,
                                    straight_route((x, -500.0), (0, 1)), y + 500.0, vd, vd))
    elif cfg.kind is EnvKind.INTERSECTION:
        cross_y = 40.0
        east = [i for i in range(cfg.n_agents) if i % 2 == 0]
        west = [i for i in range(cfg.n_agents) if i % 2 == 1]
        for ids, y, start, d in ((east, cross_y - LANE_WIDTH / 2, (-500.0, 0), (1, 0)),
                                 (west, cross_y + LANE_WIDTH / 2, (500.0, 0), (-1, 0))):
            for i, off in zip(ids, _place(rng, len(ids), 380.0, 620.0, 14.0)):
                vd = float(rng.uniform(5.0, 10.0))
                agents.append(Agent(f"v{i}", AgentKind.VEHICLE,
                                    straight_route((start[0], y), d), off, vd, vd))
    else:
        center, radius = (0.0, 45.0), 15.0
        ring = ring_route(center, radius)
        arcs = _place(rng, cfg.n_agents, 0.0, ring.length, 12.0)
        for i, s in enumerate(arcs):
            vd = float(rng.uniform(5.0, 9.0))
            kind = AgentKind.VEHICLE if rng.random() < 0.8 else AgentKind.CYCLIST
            agents.append(Agent(f"v{i}", kind, ring, s, vd, vd,
                                1.0 if kind is AgentKind.VEHICLE else 0.6))
    speed = _SPAWN_SPEED[cfg.kind]
    heading = math.pi / 2
    ego = Ego(np.zeros(2), heading, speed,
              tuple(np.array([0.0, -speed * cfg.dt * k]) for k in range(HISTORY_LEN, 0, -1)))
    return WorldState(cfg, ego, tuple(agents))


# -- frames ------------------------------------------------------------------

def _axes(heading: float):
    fwd = np.array([math.cos(heading), math.sin(heading)])
    right = np.array([math.sin(heading), -math.cos(heading)])
    return fwd, right


def to_ego(world_pts, ego: Ego) -> np.ndarray:
    fwd, right = _axes(ego.heading)
    d = np.atleast_2d(world_pts) - ego.position
    return np.column_stack([d @ right, d @ fwd])


def to_world(ego_pts, ego: Ego) -> np.ndarray:
    fwd, right = _axes(ego.heading)
    p = np.atleast_2d(ego_pts)
    return ego.position + np.outer(p[:, 0], right) + np.outer(p[:, 1], fwd)


def _agent_accel(agent: Agent, others, ego: Ego) -> float:
    if agent.v_desired <= 0.0:
        return -8.0  # parked
    pos, tan = agent.route.at(agent.s)
    gap = math.inf
    bodies = [(o.position, o.radius) for o in others if o is not agent] + [(ego.position, ego.radius)]
    for p, r in bodies:
        d = p - pos
        fwd = float(d @ tan)
        lat = abs(float(d[0] * tan[1] - d[1] * tan[0]))
        if 0.0 < fwd < 50.0 and lat < LANE_WIDTH * 0.6 + r:
            gap = min(gap, fwd - agent.radius - r)
    desired = 2.0 + 1.5 * agent.v
    a = 2.0 * (1.0 - (agent.v / max(agent.v_desired, 0.1)) ** 4)
    if math.isfinite(gap):
        a -= 2.0 * (desired / max(gap, 0.1)) ** 2
    return max(a, -8.0)


def _swept_overlap(ego_from, ego_to, before, after, ego_radius, substeps=8) -> bool:
    # sub-sampled so fast movers cannot tunnel through each other between frames
    for a0, a1 in zip(before, after):
        p0, p1 = a0.position, a1.position
        for u in np.linspace(0.0, 1.0, substeps + 1)[1:]:
            e = ego_from + u * (ego_to - ego_from)
            p = p0 + u * (p1 - p0)
            if np.linalg.norm(p - e) < a1.radius + ego_radius:
                return True
    return False


def env_step(world: WorldState, target) -> WorldState:
    """Advance one frame; ``target`` is the commanded next ego position (world frame)."""
    cfg = world.cfg
    target = np.asarray(target, dtype=float)
    if not np.all(np.isfinite(target)):
        raise ValueError("ego command must be finite")
    ego = world.ego
    d = target - ego.position
    dist = float(np.linalg.norm(d))
    heading = ego.heading
    step = 0.0
    if dist > 1e-9:
        want = math.atan2(d[1], d[0])
        delta = (want - heading + math.pi) % (2 * math.pi) - math.pi
        limit = cfg.max_turn_rate * cfg.dt
        turn = max(-limit, min(limit, delta))
        # reversing is not allowed; a target behind the ego just stops it
        step = min(dist * max(math.cos(delta - turn), 0.0), cfg.v_max * cfg.dt)
        if step > 1e-9:
            heading = ego.heading + turn
    fwd, _ = _axes(heading)
    new_pos = ego.position + step * fwd
    hist = (ego.history + (ego.position.copy(),))[-HISTORY_LEN:]
    new_ego = replace(ego, position=new_pos, heading=heading, speed=step / cfg.dt,
                      history=hist, heading_rate=(heading - ego.heading) / cfg.dt)

    moved = []
    for a in world.agents:
        acc = _agent_accel(a, world.agents, ego)
        v = max(0.0, a.v + acc * cfg.dt)
        moved.append(replace(a, s=a.s + 0.5 * (a.v + v) * cfg.dt, v=v))
    collided = world.collided or _swept_overlap(ego.position, new_pos, world.agents, moved,
                                                new_ego.radius)
    return WorldState(cfg, new_ego, tuple(moved), world.frame + 1, collided)


def observe(world: WorldState, horizon: int = 6, truth: bool = False) -> Scene:
    """Ego-frame scene. ``truth`` rolls agents along their routes; otherwise
    motion is extrapolated at constant velocity, as an onboard predictor would."""
    ego, cfg = world.ego, world.cfg
    t = cfg.dt * np.arange(1, horizon + 1)
    tracks = []
    for a in world.agents:
        if np.linalg.norm(a.position - ego.position) > cfg.perception_range:
            continue
        if truth:
            future = np.array([a.route.at(a.s + a.v * ti)[0] for ti in t])
        else:
            future = a.position + np.outer(t, a.velocity)
        cur = to_ego(a.position, ego)[0]
        tracks.append(AgentTrack(a.agent_id, a.kind, tuple(cur), to_ego(future, ego), a.radius))
    hist = to_ego(np.array(ego.history), ego) if ego.history else np.zeros((0, 2))
    return Scene(
        ego=EgoState(velocity=(0.0, ego.speed), heading_rate=ego.heading_rate,
                     heading_speed=ego.speed),
        agents=tuple(tracks),
        history=tuple(map(tuple, hist)),
        goal=Goal.GO_STRAIGHT,
        frame_dt=cfg.dt,
        horizon=horizon,
    )


# -- episodes ----------------------------------------------------------------

def _frame_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass(frozen=True)
class Pipeline:
    """What the ego runs each replan.

    ``policy`` is ``"safepath"`` (full pipeline) or ``"greedy"`` (always the
    generator's first candidate). ``scorer_factory(oracle, seed)`` builds the
    selector for one frame; the default is the mock scorer with ``noise``.
    """

    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    threshold: CalibratedThreshold | None = None
    decision: DecisionConfig = field(default_factory=DecisionConfig)
    noise: NoiseConfig = field(default_factory=lambda: NoiseConfig(scale=0.0))
    policy: str = "safepath"
    oracle_margin: float = 0.5
    brake_decel: float = 4.0
    scorer_factory: Callable[[SafetyOracle, int], Scorer] | None = None
    generator_backend: Callable | None = None


@dataclass
class EpisodeLog:
    env: str
    seed: int
    frames: int
    decisions: list = field(default_factory=list)
    first_collision_frame: int | None = None
    hud_count: int = 0
    error: str | None = None

    @property
    def success(self) -> bool:
        return self.first_collision_frame is None and self.error is None

    @property
    def ttc(self) -> int:
        return self.frames if self.first_collision_frame is None else self.first_collision_frame

    def summary(self, arm: str) -> dict:
        return {"arm": arm, "env": self.env, "seed": self.seed, "success": self.success,
                "ttc": self.ttc, "hud_count": self.hud_count, "error": self.error or ""}


def brake_trajectory(speed: float, dt: float, horizon: int, decel: float) -> np.ndarray:
    """Fallback plan: brake in lane at constant deceleration."""
    pts, y, v = [], 0.0, speed
    for _ in range(horizon):
        nv = max(0.0, v - decel * dt)
        y += 0.5 * (v + nv) * dt
        v = nv
        pts.append((0.0, y))
    return np.array(pts)


def plan_frame(world: WorldState, pipeline: Pipeline, frame_seed: int):
    """One replan. Returns (ego-frame waypoints, decision record)."""
    scene = observe(world, pipeline.generator.horizon)
    gen = replace(pipeline.generator, seed=_frame_seed(frame_seed, 1))
    cands = generate_candidates(scene, gen, pipeline.generator_backend)
    if pipeline.policy == "greedy":
        first = cands.candidates[0]
        return first.trajectory.points, {"outcome": "adopt", "chosen_label": first.label,
                                         "set_size": None, "min_similarity": None}
    truth = observe(world, pipeline.generator.horizon, truth=True)
    oracle = SafetyOracle(truth, margin=pipeline.oracle_margin)
    score_seed = _frame_seed(frame_seed, 2)
    if pipeline.scorer_factory is not None:
        scorer = pipeline.scorer_factory(oracle, score_seed)
    else:
        scorer = MockScorer(oracle, pipeline.noise, score_seed)
    instance = build_mcqa(cands, scene_ref=str(world.frame))
    pset = set_from_scores(instance, scorer(instance), pipeline.threshold)
    dec = decide(pset, scene, replace(pipeline.decision, seed=_frame_seed(frame_seed, 3)))
    if dec.is_delegate:
        plan = brake_trajectory(world.ego.speed, world.cfg.dt, gen.horizon, pipeline.brake_decel)
    else:
        plan = dec.trajectory.points
    rec = dec.record(world.frame)
    rec.pop("scenario_id")
    return plan, rec


def run_episode(cfg: EnvConfig, pipeline: Pipeline, world: WorldState | None = None) -> EpisodeLog:
    if pipeline.policy not in ("safepath", "greedy"):
        raise ValueError(f"unknown policy {pipeline.policy!r}")
    if pipeline.policy == "safepath" and pipeline.threshold is None:
        raise ValueError("the safepath policy needs a calibrated threshold")
    world = world or env_init(cfg)
    log = EpisodeLog(cfg.kind.value, cfg.seed, cfg.frames)
    plan_world, plan_ego, step_in_plan = None, None, 0
    for f in range(cfg.frames):
        if f % cfg.replan_every == 0 or plan_world is None or step_in_plan >= len(plan_world):
            try:
                plan_ego, rec = plan_frame(world, pipeline, _frame_seed(cfg.seed, f))
            except Exception as exc:  # episodes are independent; report and stop this one
                log.error = f"frame {f}: {type(exc).__name__}: {exc}"
                return log
            rec["frame"] = f
            log.decisions.append(rec)
            log.hud_count += rec["outcome"] == "delegate"
            plan_world = to_world(plan_ego, world.ego)
            step_in_plan = 0
        world = env_step(world, plan_world[step_in_plan])
        step_in_plan += 1
        if world.collided:
            log.first_collision_frame = f
            break
    return log
