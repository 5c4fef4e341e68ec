"""Stage 2, front half: multiple-choice framing and non-conformity scores."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Protocol

import numpy as np

from safepath import prompts
from safepath.errors import ContractViolation
from safepath.generation import CandidatePath, CandidateSet, render_scene
from safepath.scene import SafetyOracle, Scene


@dataclass(frozen=True)
class McqaInstance:
    scene: Scene
    options: tuple[tuple[str, CandidatePath], ...]
    prompt: str
    scene_ref: str = ""

    @property
    def labels(self) -> list[str]:
        return [label for label, _ in self.options]

    def path(self, label: str) -> CandidatePath:
        for lab, cand in self.options:
            if lab == label:
                return cand
        raise ContractViolation(f"unknown option label {label!r}")


@dataclass(frozen=True)
class OptionScores:
    logits: dict[str, float]
    probabilities: dict[str, float]

    @classmethod
    def from_logits(cls, logits: Mapping[str, float]) -> "OptionScores":
        logits = {k: float(v) for k, v in logits.items()}
        return cls(logits, softmax_probs(logits))


class Scorer(Protocol):
    def __call__(self, instance: McqaInstance) -> OptionScores: ...


class ScoreKind(str, enum.Enum):
    LAC = "LAC"
    APS = "APS"
    RAPS = "RAPS"


@dataclass(frozen=True)
class NonconformityConfig:
    kind: ScoreKind = ScoreKind.LAC
    raps_lambda: float = 0.1
    raps_k_reg: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", ScoreKind(self.kind))
        if self.raps_lambda < 0 or self.raps_k_reg < 0:
            raise ContractViolation("RAPS parameters must be non-negative")


def _option_line(label: str, cand: CandidatePath) -> str:
    pts = ", ".join(f"({x:.2f}, {y:.2f})" for x, y in cand.trajectory.points)
    parts = [cand.meta_action, f"Trajectory: [{pts}]"]
    if cand.rationale:
        parts.append(f"Reasoning: {cand.rationale}")
    return f"{label}: " + " ".join(p for p in parts if p)


def _letters(labels: list[str]) -> str:
    if len(labels) == 1:
        return labels[0]
    return ", ".join(labels[:-1]) + ", or " + labels[-1]


def build_mcqa(cs: CandidateSet, scene_ref: str = "") -> McqaInstance:
    labels = cs.labels
    if any(not lab for lab in labels) or len(set(labels)) != len(labels):
        raise ContractViolation("candidates must carry distinct labels")
    options = tuple((c.label, c) for c in cs.candidates)
    text = "\n".join([
        prompts.SELECTION_HEADER,
        render_scene(cs.scene),
        "",
        *(_option_line(lab, c) for lab, c in options),
        "",
        prompts.SELECTION_INSTRUCTION.format(letters=_letters(labels)),
    ])
    return McqaInstance(cs.scene, options, text, scene_ref)


def softmax_probs(logits: Mapping[str, float]) -> dict[str, float]:
    if not logits:
        raise ContractViolation("softmax over an empty option set")
    labels = list(logits)
    z = np.array([logits[k] for k in labels], dtype=float)
    if not np.all(np.isfinite(z)):
        raise ContractViolation("non-finite logit")
    e = np.exp(z - z.max())
    p = e / e.sum()
    return dict(zip(labels, p.tolist()))


def _rank_order(probabilities: Mapping[str, float]) -> list[str]:
    # descending probability, ties broken by label order
    return sorted(probabilities, key=lambda k: (-probabilities[k], k))


def nonconformity(probabilities: Mapping[str, float], label: str,
                  cfg: NonconformityConfig | None = None) -> float:
    cfg = cfg or NonconformityConfig()
    if label not in probabilities:
        raise ContractViolation(f"label {label!r} not among options")
    if cfg.kind is ScoreKind.LAC:
        return 1.0 - probabilities[label]
    order = _rank_order(probabilities)
    rank = order.index(label) + 1
    aps = math.fsum(probabilities[k] for k in order[:rank])
    if cfg.kind is ScoreKind.APS:
        return aps
    return aps + cfg.raps_lambda * max(0, rank - cfg.raps_k_reg)


def option_scores(probabilities: Mapping[str, float],
                  cfg: NonconformityConfig | None = None) -> dict[str, float]:
    return {label: nonconformity(probabilities, label, cfg) for label in probabilities}


# -- mock scorer -------------------------------------------------------------

@dataclass(frozen=True)
class NoiseConfig:
    scale: float = 1.0
    b_safe: float = 2.0
    b_unsafe: float = 0.0


def mock_score(instance: McqaInstance, oracle: SafetyOracle, noise: NoiseConfig | None = None,
               seed: int = 0) -> OptionScores:
    """Oracle-informed stand-in for the selector model.

    Safe options get ``b_safe``, the rest ``b_unsafe``, plus Gaussian noise drawn
    in option order from ``default_rng(seed)``.
    """
    noise = noise or NoiseConfig()
    if not instance.options:
        raise ContractViolation("instance has no options")
    rng = np.random.default_rng(seed)
    eps = rng.normal(0.0, 1.0, size=len(instance.options)) * noise.scale
    logits = {}
    for (label, cand), e in zip(instance.options, eps):
        base = noise.b_safe if oracle.is_safe(cand.trajectory) else noise.b_unsafe
        logits[label] = base + float(e)
    return OptionScores.from_logits(logits)


@dataclass(frozen=True)
class MockScorer:
    oracle: SafetyOracle
    noise: NoiseConfig = NoiseConfig()
    seed: int = 0

    def __call__(self, instance: McqaInstance) -> OptionScores:
        return mock_score(instance, self.oracle, self.noise, self.seed)


@dataclass(frozen=True)
class FixedScorer:
    """Returns preset logits; handy for tests and constructed worst cases."""

    pick: Callable[[McqaInstance], Mapping[str, float]]

    def __call__(self, instance: McqaInstance) -> OptionScores:
        return OptionScores.from_logits(self.pick(instance))
