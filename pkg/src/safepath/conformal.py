"""Stage 2, back half: split-conformal calibration and prediction sets."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from safepath.errors import ContractViolation
from safepath.generation import CandidatePath
from safepath.scoring import (McqaInstance, NonconformityConfig, OptionScores, Scorer,
                              nonconformity, option_scores)


@dataclass(frozen=True)
class CalibrationRecord:
    instance: McqaInstance
    correct_label: str
    score: float


def make_record(instance: McqaInstance, scores: OptionScores, correct_label: str,
                cfg: NonconformityConfig | None = None) -> CalibrationRecord:
    return CalibrationRecord(instance, correct_label,
                             nonconformity(scores.probabilities, correct_label, cfg))


@dataclass(frozen=True)
class CalibratedThreshold:
    q_hat: float
    alpha: float
    n: int
    score_kind: NonconformityConfig = field(default_factory=NonconformityConfig)

    def to_dict(self) -> dict:
        return {
            "q_hat": "inf" if math.isinf(self.q_hat) else self.q_hat,
            "alpha": self.alpha,
            "n": self.n,
            "score_kind": self.score_kind.kind.value,
            "raps_lambda": self.score_kind.raps_lambda,
            "raps_k_reg": self.score_kind.raps_k_reg,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CalibratedThreshold":
        q = doc["q_hat"]
        return cls(math.inf if q == "inf" else float(q), doc["alpha"], doc["n"],
                   NonconformityConfig(doc["score_kind"], doc["raps_lambda"], doc["raps_k_reg"]))


def conformal_rank(n: int, alpha: float) -> int:
    """The 1-based order statistic ceil((n + 1)(1 - alpha))."""
    # rounding first keeps e.g. 10 * (1 - 0.7) from ceiling to 4
    return math.ceil(round((n + 1) * (1.0 - alpha), 9))


def calibrate(records: Sequence[CalibrationRecord] | Sequence[float], alpha: float,
              score_kind: NonconformityConfig | None = None) -> CalibratedThreshold:
    """Threshold at the ceil((n+1)(1-alpha))-th smallest score, or +inf past n.

    Accepts records or bare scores.
    """
    if not 0.0 < alpha < 1.0:
        raise ContractViolation(f"alpha must lie in (0, 1), got {alpha}")
    scores = [r.score if isinstance(r, CalibrationRecord) else float(r) for r in records]
    n = len(scores)
    if n == 0:
        raise ContractViolation("empty calibration set")
    if not all(math.isfinite(s) for s in scores):
        raise ContractViolation("calibration scores must be finite")
    rank = conformal_rank(n, alpha)
    q_hat = math.inf if rank > n else float(np.sort(scores)[rank - 1])
    return CalibratedThreshold(q_hat, alpha, n, score_kind or NonconformityConfig())


@dataclass(frozen=True)
class PredictionSet:
    instance: McqaInstance
    members: tuple[CandidatePath, ...]
    scores: dict[str, float]
    threshold: CalibratedThreshold
    option_scores: OptionScores | None = None

    def __len__(self) -> int:
        return len(self.members)

    @property
    def labels(self) -> list[str]:
        return [m.label for m in self.members]

    def probability(self, label: str) -> float:
        if self.option_scores is None:
            raise ContractViolation("prediction set carries no probabilities")
        return self.option_scores.probabilities[label]


def set_from_scores(instance: McqaInstance, scores: OptionScores,
                    threshold: CalibratedThreshold) -> PredictionSet:
    nc = option_scores(scores.probabilities, threshold.score_kind)
    members = tuple(cand for label, cand in instance.options if nc[label] <= threshold.q_hat)
    return PredictionSet(instance, members, nc, threshold, scores)


def predict_set(instance: McqaInstance, scorer: Scorer,
                threshold: CalibratedThreshold) -> PredictionSet:
    return set_from_scores(instance, scorer(instance), threshold)


@dataclass(frozen=True)
class CpMetrics:
    coverage: float
    dtc: float
    avg_set_size: float
    hud_rate: float
    effective_size: float = float("nan")

    def row(self, alpha: float, score_kind: str, **extra) -> dict:
        return {"alpha": alpha, "score_kind": score_kind, "coverage": self.coverage,
                "dtc": self.dtc, "avg_set_size": self.avg_set_size,
                "hud_rate": self.hud_rate, "effective_size": self.effective_size, **extra}


def evaluate_cp(test: Sequence[CalibrationRecord], scorer: Scorer,
                threshold: CalibratedThreshold,
                decision_policy: Callable[[PredictionSet], "object"] | None = None) -> CpMetrics:
    """Coverage, deviation from target, mean set size and delegation rate.

    ``decision_policy`` maps a prediction set to a decision exposing
    ``is_delegate``; without one, HuD and effective size are reported as NaN.
    Effective size counts 1 for an adopted path and |C| for a delegation.
    """
    if not test:
        raise ContractViolation("empty test set")
    covered, sizes, delegated, effective = 0, [], 0, []
    for rec in test:
        pset = predict_set(rec.instance, scorer, threshold)
        covered += rec.correct_label in pset.labels
        sizes.append(len(pset))
        if decision_policy is not None:
            dec = decision_policy(pset)
            delegated += dec.is_delegate
            effective.append(len(pset) if dec.is_delegate else 1)
    n = len(test)
    coverage = covered / n
    return CpMetrics(
        coverage=coverage,
        dtc=coverage - (1.0 - threshold.alpha),
        avg_set_size=float(np.mean(sizes)),
        hud_rate=delegated / n if decision_policy is not None else float("nan"),
        effective_size=float(np.mean(effective)) if effective else float("nan"),
    )
