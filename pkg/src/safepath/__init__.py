"""Conformal path selection for LLM-proposed driving trajectories.

Three stages: generate candidate paths, keep the ones a calibrated
non-conformity threshold admits, then adopt one or delegate to a human.
"""

from safepath.conformal import CalibratedThreshold, PredictionSet, calibrate, predict_set
from safepath.decision import Decision, DecisionConfig, Strategy, decide, knowno_decide
from safepath.errors import AdapterError, BackendError, ContractViolation, ParseError
from safepath.generation import CandidatePath, CandidateSet, GeneratorConfig, generate_candidates
from safepath.scene import SafetyOracle, Scene, Trajectory
from safepath.scoring import (McqaInstance, NonconformityConfig, OptionScores, ScoreKind,
                              build_mcqa, mock_score, nonconformity, softmax_probs)

__version__ = "0.1.0"
