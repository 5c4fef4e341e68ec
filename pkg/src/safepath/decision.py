"""Stage 3: adopt, aggregate-and-adopt, or delegate to a human."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from safepath.conformal import PredictionSet
from safepath.errors import ContractViolation
from safepath.scene import (EGO_RADIUS, Scene, SimilarityConfig, Trajectory,
                            collision_fraction, min_pairwise_similarity)


class Strategy(str, enum.Enum):
    MIN_COLLISION = "MinCollision"
    RANDOM_SAMPLE = "RandomSample"
    AVERAGE = "Average"
    CONFORMAL_WEIGHTED_AVERAGE = "ConformalWeightedAverage"
    CONFORMAL_TOP_PATH = "ConformalTopPath"


@dataclass(frozen=True)
class DecisionConfig:
    delta: float = 0.85
    strategy: Strategy = Strategy.MIN_COLLISION
    seed: int = 0
    similarity: SimilarityConfig = field(default_factory=SimilarityConfig)
    ego_radius: float = EGO_RADIUS

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if not 0.0 <= self.delta <= 1.0:
            raise ContractViolation("delta must lie in [0, 1]")


@dataclass(frozen=True)
class Decision:
    outcome: str  # "adopt" | "delegate"
    trajectory: Trajectory | None = None
    set_size: int = 0
    min_similarity: float | None = None
    chosen_collision_fraction: float | None = None
    chosen_label: str | None = None

    @property
    def is_delegate(self) -> bool:
        return self.outcome == "delegate"

    def record(self, scenario_id) -> dict:
        return {
            "scenario_id": scenario_id,
            "set_size": self.set_size,
            "min_similarity": self.min_similarity,
            "outcome": self.outcome,
            "chosen_label": self.chosen_label,
            "collision_fraction": self.chosen_collision_fraction,
        }


def delegate(set_size: int, min_similarity: float | None = None) -> Decision:
    return Decision("delegate", None, set_size, min_similarity)


def _min_collision(c: PredictionSet, scene: Scene, ego_radius: float):
    fracs = [collision_fraction(m.trajectory, scene, ego_radius) for m in c.members]
    # members are in option order, so argmin's first-hit rule is the label tie-break
    i = int(np.argmin(fracs))
    return c.members[i].trajectory, c.members[i].label


def aggregate(c: PredictionSet, scene: Scene, strategy: Strategy | str = Strategy.MIN_COLLISION,
              seed: int = 0, ego_radius: float = EGO_RADIUS) -> tuple[Trajectory, str | None]:
    """Reduce a δ-equivalent set to one trajectory.

    Returns the trajectory and the member label it came from (``None`` for
    synthesized averages).
    """
    strategy = Strategy(strategy)
    if len(c) < 2:
        raise ContractViolation("aggregation needs at least two members")
    lengths = {len(m.trajectory) for m in c.members}
    if len(lengths) != 1:
        raise ContractViolation("members have unequal lengths")

    if strategy is Strategy.MIN_COLLISION:
        return _min_collision(c, scene, ego_radius)
    if strategy is Strategy.RANDOM_SAMPLE:
        i = int(np.random.default_rng(seed).integers(len(c)))
        return c.members[i].trajectory, c.members[i].label
    if strategy is Strategy.CONFORMAL_TOP_PATH:
        probs = [c.probability(m.label) for m in c.members]
        i = int(np.argmax(probs))
        return c.members[i].trajectory, c.members[i].label

    stack = np.stack([m.trajectory.points for m in c.members])
    if strategy is Strategy.AVERAGE:
        weights = np.full(len(c), 1.0 / len(c))
    else:
        w = np.array([c.probability(m.label) for m in c.members])
        weights = w / w.sum()
    avg = Trajectory(np.tensordot(weights, stack, axes=1))
    # an average can smooth away the evasive part of every member
    if collision_fraction(avg, scene, ego_radius) > 0:
        fracs = [collision_fraction(m.trajectory, scene, ego_radius) for m in c.members]
        if min(fracs) == 0:
            return _min_collision(c, scene, ego_radius)
    return avg, None


def decide(c: PredictionSet, scene: Scene, cfg: DecisionConfig | None = None) -> Decision:
    cfg = cfg or DecisionConfig()
    n = len(c)
    if n == 0:
        return delegate(0)
    if n == 1:
        only = c.members[0]
        return Decision("adopt", only.trajectory, 1, None,
                        collision_fraction(only.trajectory, scene, cfg.ego_radius), only.label)
    sim = min_pairwise_similarity([m.trajectory for m in c.members], cfg.similarity)
    if sim < cfg.delta:
        return delegate(n, sim)
    traj, label = aggregate(c, scene, cfg.strategy, cfg.seed, cfg.ego_radius)
    return Decision("adopt", traj, n, sim, collision_fraction(traj, scene, cfg.ego_radius), label)


def knowno_decide(c: PredictionSet, scene: Scene | None = None) -> Decision:
    """Baseline: act only on singleton sets, otherwise ask for help."""
    if len(c) != 1:
        return delegate(len(c))
    only = c.members[0]
    frac = collision_fraction(only.trajectory, scene) if scene is not None else None
    return Decision("adopt", only.trajectory, 1, None, frac, only.label)
