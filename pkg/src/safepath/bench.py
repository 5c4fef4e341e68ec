"""Seeded synthetic scenes with a known true future.

Every bench item carries two views of the same instant: ``scene`` is what the
planner sees (agent motion from a constant-velocity predictor that is sometimes
wrong) and ``truth`` holds the agents' actual future. Safety is always judged
against ``truth``; collision-argmin only ever sees ``scene``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from safepath.conformal import (CalibrationRecord, PredictionSet, calibrate, make_record,
                                set_from_scores)
from safepath.decision import Decision, DecisionConfig, Strategy, decide, knowno_decide
from safepath.generation import (MANEUVERS, PRIMARY_MANEUVER, CandidateSet, GeneratorConfig,
                                 generate_candidates, maneuver_trajectory)
from safepath.scene import (FRAME_DT, HORIZON, AgentKind, AgentTrack, EgoState, Goal,
                            SafetyOracle, Scene, Trajectory, average_displacement,
                            straight_history)
from safepath.scoring import (McqaInstance, NoiseConfig, NonconformityConfig, OptionScores,
                              build_mcqa, mock_score, nonconformity)
from safepath.sim import brake_trajectory

_KINDS = (AgentKind.VEHICLE, AgentKind.CYCLIST, AgentKind.PEDESTRIAN, AgentKind.OBJECT)
_KIND_P = (0.5, 0.2, 0.15, 0.15)
_MAX_SPEED = {AgentKind.VEHICLE: 8.0, AgentKind.CYCLIST: 5.0,
              AgentKind.PEDESTRIAN: 1.5, AgentKind.OBJECT: 0.0}
_GOALS = (Goal.GO_STRAIGHT, Goal.LEFT, Goal.RIGHT, Goal.STOP)
_GOAL_P = (0.55, 0.15, 0.15, 0.15)


@dataclass(frozen=True)
class BenchConfig:
    k: int = 4
    maneuver_jitter: float = 0.3
    speed_range: tuple[float, float] = (3.0, 12.0)
    max_agents: int = 4
    anchor_noise: float = 0.7
    prediction_error: float = 0.35
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    safety_margin: float = 0.0
    inject_ground_truth: bool = True
    # extra logit for the recorded path; 0 keeps the scorer purely safety-driven
    reference_bonus: float = 0.0


@dataclass(frozen=True, eq=False)
class BenchItem:
    index: int
    scene: Scene
    truth: Scene
    candidates: CandidateSet
    reference: Trajectory
    instance: McqaInstance
    scores: OptionScores
    safety_margin: float = 0.0

    @cached_property
    def oracle(self) -> SafetyOracle:
        return SafetyOracle(self.truth, margin=self.safety_margin)

    @cached_property
    def correct_label(self) -> str | None:
        """The injected ground truth, else the safe candidate closest to the reference."""
        if self.candidates.ground_truth_index is not None:
            return self.candidates.ground_truth_label
        safe = [(average_displacement(c.trajectory, self.reference), c.label)
                for c in self.candidates.candidates if c.label in self.safe_labels]
        return min(safe)[1] if safe else None

    @cached_property
    def safe_labels(self) -> frozenset:
        return frozenset(lab for lab, c in self.instance.options
                         if self.oracle.is_safe(c.trajectory))

    def record(self, cfg: NonconformityConfig) -> CalibrationRecord:
        return make_record(self.instance, self.scores, self.correct_label, cfg)


def _rotate(v, angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([c * v[0] - s * v[1], s * v[0] + c * v[1]])


def _sample_agents(rng, speed, cfg: BenchConfig, dt=FRAME_DT, horizon=HORIZON):
    t = dt * np.arange(1, horizon + 1)[:, None]
    observed, truth = [], []
    for i in range(int(rng.integers(1, cfg.max_agents + 1))):
        kind = _KINDS[rng.choice(len(_KINDS), p=_KIND_P)]
        path = maneuver_trajectory(MANEUVERS[rng.integers(len(MANEUVERS))], speed, dt, horizon)
        frame = int(rng.integers(1, horizon + 1))
        anchor = path.points[frame - 1] + rng.normal(0.0, cfg.anchor_noise, 2)
        heading = rng.uniform(0, 2 * math.pi)
        vel = _rotate((rng.uniform(0, _MAX_SPEED[kind]), 0.0), heading)
        current = anchor - vel * frame * dt
        vel_seen = vel
        if kind is not AgentKind.OBJECT and rng.random() < cfg.prediction_error:
            vel_seen = _rotate(vel, rng.choice([-1, 1]) * rng.uniform(0.5, 1.6))
            vel_seen = vel_seen * rng.uniform(0.3, 1.5)
        aid = f"a{i}"
        truth.append(AgentTrack(aid, kind, tuple(current), current + vel * t))
        observed.append(AgentTrack(aid, kind, tuple(current), current + vel_seen * t))
    return observed, truth


def make_item(index: int, seed: int, cfg: BenchConfig, stream: int = 0,
              score: bool = True) -> BenchItem:
    """One bench instance, reproducible from ``(seed, stream, index)``.

    With ``score=False`` the item carries uniform placeholder scores so an
    external scorer can fill them in later.
    """
    rng = np.random.default_rng([seed, stream, index])
    while True:
        speed = float(rng.uniform(*cfg.speed_range))
        goal = _GOALS[rng.choice(len(_GOALS), p=_GOAL_P)]
        observed, true_agents = _sample_agents(rng, speed, cfg)
        ego = EgoState(velocity=(0.0, speed), heading_speed=speed)
        hist = straight_history(speed)
        scene = Scene(ego, tuple(observed), hist, goal)
        truth = Scene(ego, tuple(true_agents), hist, goal)
        oracle = SafetyOracle(truth, margin=cfg.safety_margin)
        order = [PRIMARY_MANEUVER[goal]] + [m for m in MANEUVERS if m != PRIMARY_MANEUVER[goal]]
        # the recorded path must itself be safe
        reference = next((tr for tr in (maneuver_trajectory(m, speed) for m in order)
                          if oracle.is_safe(tr)), None)
        if reference is not None:
            break
    gen = GeneratorConfig(k=cfg.k, seed=int(rng.integers(2**31)),
                          maneuver_jitter=cfg.maneuver_jitter)
    cands = generate_candidates(scene, gen)
    if cfg.inject_ground_truth:
        cands = cands.with_ground_truth(reference)
    instance = build_mcqa(cands, scene_ref=f"{seed}:{stream}:{index}")
    score_seed = int(rng.integers(2**31))
    if score:
        scores = mock_score(instance, oracle, cfg.noise, seed=score_seed)
        if cfg.reference_bonus and cands.ground_truth_index is not None:
            logits = dict(scores.logits)
            logits[cands.ground_truth_label] += cfg.reference_bonus
            scores = OptionScores.from_logits(logits)
    else:
        scores = OptionScores.from_logits({lab: 0.0 for lab in instance.labels})
    return BenchItem(index, scene, truth, cands, reference, instance, scores, cfg.safety_margin)


def build_pool(n: int, seed: int = 0, cfg: BenchConfig | None = None, stream: int = 0,
               score: bool = True) -> list[BenchItem]:
    cfg = cfg or BenchConfig()
    return [make_item(i, seed, cfg, stream, score) for i in range(n)]


def rescore(items, scorer, workers: int = 1) -> list[BenchItem]:
    """Replace each item's scores with ``scorer``'s; order-preserving fan-out."""
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(lambda it: scorer(it.instance), items))
    else:
        scores = [scorer(it.instance) for it in items]
    return [replace(it, scores=s) for it, s in zip(items, scores)]


def brake_in_lane(item: BenchItem, decel: float = 4.0) -> Trajectory:
    """Fallback executed when a bench decision delegates."""
    return Trajectory(brake_trajectory(item.scene.ego.speed, item.scene.frame_dt,
                                       item.scene.horizon, decel))


class DecisionCache:
    """Memoizes decisions per (item, set members, delta); sets recur across splits."""

    def __init__(self, strategy=Strategy.MIN_COLLISION):
        self.strategy = strategy
        self._memo = {}

    def decide(self, item: BenchItem, pset: PredictionSet, delta: float) -> Decision:
        key = (item.instance.scene_ref, tuple(pset.labels), delta)
        if key not in self._memo:
            self._memo[key] = decide(pset, item.scene, DecisionConfig(delta, self.strategy))
        return self._memo[key]

    def knowno(self, item: BenchItem, pset: PredictionSet) -> Decision:
        key = (item.instance.scene_ref, tuple(pset.labels), "knowno")
        if key not in self._memo:
            self._memo[key] = knowno_decide(pset, item.scene)
        return self._memo[key]


def outcome_is_safe(item: BenchItem, dec: Decision) -> bool:
    """Delegation counts as safe (a human takes over); adopted paths face the oracle."""
    return dec.is_delegate or item.oracle.is_safe(dec.trajectory)


@dataclass
class SplitResult:
    coverage: list = field(default_factory=list)
    set_size: list = field(default_factory=list)
    safe_rate: dict = field(default_factory=dict)
    safe_adopted_rate: dict = field(default_factory=dict)
    hud_rate: dict = field(default_factory=dict)


def run_splits(pool, alpha: float, kind: NonconformityConfig, n_cal: int, n_test: int,
               splits: int, seed: int = 0, deltas=(), cache: DecisionCache | None = None
               ) -> SplitResult:
    """Repeated random calibration/test splits of one exchangeable pool."""
    if n_cal + n_test > len(pool):
        raise ValueError("pool too small for the requested split sizes")
    cache = cache or DecisionCache()
    cal_scores = np.array([nonconformity(it.scores.probabilities, it.correct_label, kind)
                           for it in pool])
    rng = np.random.default_rng(seed)
    out = SplitResult(safe_rate={d: [] for d in deltas},
                      safe_adopted_rate={d: [] for d in deltas},
                      hud_rate={d: [] for d in deltas})
    for _ in range(splits):
        perm = rng.permutation(len(pool))
        cal, test = perm[:n_cal], perm[n_cal:n_cal + n_test]
        threshold = calibrate(cal_scores[cal], alpha, kind)
        covered, sizes = 0, []
        safe = {d: 0 for d in deltas}
        safe_adopted = {d: 0 for d in deltas}
        hud = {d: 0 for d in deltas}
        for i in test:
            item = pool[i]
            pset = set_from_scores(item.instance, item.scores, threshold)
            covered += item.correct_label in pset.labels
            sizes.append(len(pset))
            for d in deltas:
                dec = cache.decide(item, pset, d)
                hud[d] += dec.is_delegate
                safe[d] += outcome_is_safe(item, dec)
                safe_adopted[d] += (not dec.is_delegate) and item.oracle.is_safe(dec.trajectory)
        out.coverage.append(covered / len(test))
        out.set_size.append(float(np.mean(sizes)))
        for d in deltas:
            out.safe_rate[d].append(safe[d] / len(test))
            out.safe_adopted_rate[d].append(safe_adopted[d] / len(test))
            out.hud_rate[d].append(hud[d] / len(test))
    return out


class PoolScorer:
    """Scorer for bench instances: replays each item's precomputed option scores."""

    def __init__(self, items):
        self._by_ref = {it.instance.scene_ref: it.scores for it in items}

    def __call__(self, instance: McqaInstance) -> OptionScores:
        return self._by_ref[instance.scene_ref]
