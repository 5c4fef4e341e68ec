"""Stage 1: candidate path generation.

Two backends share one contract. The synthetic backend perturbs a small set
of maneuver templates with seeded noise; the external backend renders a
prompt, hands it to a language-model callable and parses the answer.
"""

from __future__ import annotations

import re
import string
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from safepath import prompts
from safepath.errors import ContractViolation, ParseError
from safepath.scene import HORIZON, Goal, Scene, Trajectory

MANEUVERS = ("keep_lane", "shift_left", "shift_right", "decelerate_stop", "accelerate")

PRIMARY_MANEUVER = {
    Goal.GO_STRAIGHT: "keep_lane",
    Goal.LEFT: "shift_left",
    Goal.RIGHT: "shift_right",
    Goal.STOP: "decelerate_stop",
}

META_ACTIONS = {
    "keep_lane": "Maintain lane position and current speed.",
    "shift_left": "Shift one lane to the left while maintaining speed.",
    "shift_right": "Shift one lane to the right while maintaining speed.",
    "decelerate_stop": "Decelerate smoothly and come to a complete stop.",
    "accelerate": "Increase speed moderately while keeping the lane.",
}

_REASONS = {
    "keep_lane": "Holding the lane keeps the plan predictable for {objects}.",
    "shift_left": "Moving left opens lateral space from {objects} on the current line.",
    "shift_right": "Moving right opens lateral space from {objects} on the current line.",
    "decelerate_stop": "Stopping lets {objects} clear the area before proceeding.",
    "accelerate": "Passing quickly reduces interaction time with {objects}.",
}

LABELS = string.ascii_uppercase


@dataclass(frozen=True)
class CandidatePath:
    trajectory: Trajectory
    rationale: str = ""
    meta_action: str = ""
    label: str = ""
    maneuver: str = ""


@dataclass(frozen=True)
class CandidateSet:
    scene: Scene
    candidates: tuple[CandidatePath, ...]
    ground_truth_index: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(self.candidates))

    def __len__(self) -> int:
        return len(self.candidates)

    @property
    def labels(self) -> list[str]:
        return [c.label for c in self.candidates]

    @property
    def ground_truth_label(self) -> str | None:
        if self.ground_truth_index is None:
            return None
        return self.candidates[self.ground_truth_index].label

    def labeled(self) -> "CandidateSet":
        """Assign option letters A, B, C, ... in list order."""
        if len(self.candidates) > len(LABELS):
            raise ContractViolation("more candidates than option letters")
        cands = tuple(replace(c, label=LABELS[i]) for i, c in enumerate(self.candidates))
        return replace(self, candidates=cands)

    def with_ground_truth(self, reference: Trajectory) -> "CandidateSet":
        """Append the reference path as an extra option with the next unused letter."""
        base = self.labeled()
        gt = CandidatePath(reference, rationale="", meta_action="Ground-truth trajectory.",
                           label=LABELS[len(base.candidates)], maneuver="ground_truth")
        return replace(base, candidates=base.candidates + (gt,),
                       ground_truth_index=len(base.candidates))


@dataclass(frozen=True)
class GeneratorConfig:
    k: int = 4
    seed: int = 0
    maneuver_jitter: float = 0.3
    backend: str = "synthetic"
    lane_shift: float = 3.5
    accel: float = 1.5
    horizon: int = HORIZON

    def __post_init__(self):
        if self.k < 2:
            raise ContractViolation("k must be at least 2")
        if self.backend not in ("synthetic", "external"):
            raise ContractViolation(f"unknown generator backend {self.backend!r}")


# -- synthetic backend -------------------------------------------------------

def _smoothstep(u):
    return 3 * u**2 - 2 * u**3


def maneuver_trajectory(maneuver: str, speed: float, dt: float = 0.5, horizon: int = HORIZON,
                        lane_shift: float = 3.5, accel: float = 1.5) -> Trajectory:
    """Noise-free waypoints for one maneuver template at the given initial speed."""
    t = dt * np.arange(1, horizon + 1)
    u = t / t[-1]
    x = np.zeros(horizon)
    if maneuver == "decelerate_stop":
        t_stop = dt * (horizon - 1)
        tc = np.minimum(t, t_stop)
        y = speed * tc - 0.5 * (speed / t_stop) * tc**2
    elif maneuver == "accelerate":
        y = speed * t + 0.5 * accel * t**2
    else:
        y = speed * t
        if maneuver == "shift_left":
            x = -lane_shift * _smoothstep(u)
        elif maneuver == "shift_right":
            x = lane_shift * _smoothstep(u)
        elif maneuver != "keep_lane":
            raise ContractViolation(f"unknown maneuver {maneuver!r}")
    return Trajectory(np.column_stack([x, y]))


def _jitter(traj: Trajectory, rng: np.random.Generator, scale: float) -> Trajectory:
    # both offsets follow longitudinal progress, so a path that has stopped stays stopped
    pts = traj.points.copy()
    lat, lon = rng.normal(0.0, scale, size=2)
    final = pts[-1, 1]
    if abs(final) > 1e-9:
        u = np.clip(pts[:, 1] / final, 0.0, 1.0)
        pts[:, 1] += lon * u
    else:
        u = np.arange(1, len(pts) + 1) / len(pts)
    pts[:, 0] += lat * _smoothstep(u)
    return Trajectory(pts)


def _describe_objects(scene: Scene) -> str:
    if not scene.agents:
        return "the empty road ahead"
    kinds: dict[str, int] = {}
    for a in scene.agents:
        kinds[a.kind.value] = kinds.get(a.kind.value, 0) + 1
    return ", ".join(f"{n} {kind}{'s' if n > 1 else ''}" for kind, n in sorted(kinds.items()))


def choose_maneuvers(goal: Goal, k: int, rng: np.random.Generator) -> list[str]:
    primary = PRIMARY_MANEUVER[goal]
    others = [m for m in MANEUVERS if m != primary]
    picked = [primary]
    while len(picked) < k:
        picked.extend(others[i] for i in rng.permutation(len(others)))
    picked = picked[:k]
    return [picked[i] for i in rng.permutation(k)]


def synthetic_candidates(scene: Scene, cfg: GeneratorConfig) -> CandidateSet:
    rng = np.random.default_rng(cfg.seed)
    speed = scene.ego.speed
    objects = _describe_objects(scene)
    cands = []
    for m in choose_maneuvers(scene.goal, cfg.k, rng):
        base = maneuver_trajectory(m, speed, scene.frame_dt, cfg.horizon, cfg.lane_shift, cfg.accel)
        traj = _jitter(base, rng, cfg.maneuver_jitter) if cfg.maneuver_jitter > 0 else base
        cands.append(CandidatePath(traj, rationale=_REASONS[m].format(objects=objects),
                                   meta_action=META_ACTIONS[m], maneuver=m))
    return CandidateSet(scene, cands).labeled()


def generate_candidates(scene: Scene, cfg: GeneratorConfig,
                        backend: Callable[["PromptBundle"], str] | None = None) -> CandidateSet:
    """Produce ``cfg.k`` labeled candidates for ``scene``.

    ``backend`` is required for ``cfg.backend == "external"``: it receives the
    rendered prompt and returns the raw model text. Transport failures surface
    as :class:`BackendError`, unusable text as :class:`ParseError`.
    """
    if cfg.backend == "synthetic":
        return synthetic_candidates(scene, cfg)
    if backend is None:
        raise ContractViolation("external generation needs a backend callable")
    paths = parse_generated_paths(backend(build_generation_prompt(scene, cfg)), cfg.horizon)
    return CandidateSet(scene, paths).labeled()


# -- prompt rendering --------------------------------------------------------

@dataclass(frozen=True)
class PromptBundle:
    system: str
    few_shot: tuple[tuple[str, str], ...] = field(default_factory=tuple)
    user: str = ""

    def messages(self) -> list[dict]:
        msgs = [{"role": "system", "content": self.system}]
        msgs += [{"role": role, "content": text} for role, text in self.few_shot]
        msgs.append({"role": "user", "content": self.user})
        return msgs


def _pt(p) -> str:
    return f"({p[0]:.2f}, {p[1]:.2f})"


def render_scene(scene: Scene) -> str:
    """Scene text in the exemplar field order; numbers to two decimals."""
    lines = ["Perception and Prediction:"]
    if not scene.agents:
        lines.append(" - none")
    for a in scene.agents:
        kind = a.kind.value.capitalize()
        if len(a.predicted) == 0 or np.allclose(a.predicted[-1], a.current):
            lines.append(f" - {kind} at {_pt(a.current)}, stationary.")
        else:
            lines.append(f" - {kind} at {_pt(a.current)}, moving to {_pt(a.predicted[-1])}.")
    ego = scene.ego
    lines += [
        "Ego-States:",
        f" - Velocity (vx, vy): {_pt(ego.velocity)}",
        f" - Heading Angular Velocity (v_yaw): {ego.heading_rate:.2f}",
        f" - Acceleration (ax, ay): {_pt(ego.acceleration)}",
        f" - Heading Speed: {ego.heading_speed:.2f}",
        f" - Steering: {ego.steering:.2f}",
        "Historical Trajectory: [" + ", ".join(_pt(p) for p in scene.history) + "]",
        f"Mission Goal: {scene.goal.value}",
    ]
    return "\n".join(lines)


def build_generation_prompt(scene: Scene, cfg: GeneratorConfig | None = None) -> PromptBundle:
    cfg = cfg or GeneratorConfig()
    system = prompts.GENERATION_SYSTEM.format(
        k=cfg.k, horizon=cfg.horizon, seconds=cfg.horizon * scene.frame_dt)
    few_shot = (("user", prompts.FEW_SHOT_USER), ("assistant", prompts.FEW_SHOT_ASSISTANT))
    return PromptBundle(system, few_shot, render_scene(scene))


# -- output parsing ----------------------------------------------------------

class ParsedPaths(list):
    """Parsed candidates; ``rejected`` maps 1-based path numbers to reasons."""

    def __init__(self, paths=(), rejected=None):
        super().__init__(paths)
        self.rejected: dict[int, str] = dict(rejected or {})


_PATH_HEADER = re.compile(r"^\s*\**\s*Path\s*#?\s*(\d+)\s*\**\s*:", re.IGNORECASE | re.MULTILINE)
_TRAJ_HEADER = re.compile(r"Trajector(?:y|ies)[^:\n]*:", re.IGNORECASE)
_TUPLE = re.compile(r"\(\s*([^,()]+?)\s*,\s*([^,()]+?)\s*\)")


def _field(block: str, name: str) -> str:
    m = re.search(rf"{name}\s*:\s*(.+)", block, re.IGNORECASE)
    return m.group(1).strip() if m else ""


def _parse_block(block: str, horizon: int) -> tuple[Trajectory, str, str]:
    header = _TRAJ_HEADER.search(block)
    if header is None:
        raise ValueError("no trajectory field")
    rest = block[header.end():]
    start = rest.find("[")
    end = rest.find("]", start)
    if start < 0 or end < start:
        raise ValueError("no waypoint list")
    pairs = _TUPLE.findall(rest[start:end + 1])
    pts = []
    for x, y in pairs:
        try:
            pts.append((float(x), float(y)))
        except ValueError:
            raise ValueError(f"non-numeric coordinate in ({x}, {y})") from None
    if len(pts) != horizon:
        raise ValueError(f"expected {horizon} waypoints, found {len(pts)}")
    return Trajectory(pts), _field(block, "Reasoning"), _field(block, "Meta Action")


def parse_generated_paths(text: str, horizon: int = HORIZON) -> ParsedPaths:
    """Extract ``Path N:`` blocks from model output.

    Paths that fail to parse are skipped and listed in ``rejected``; fewer
    than two usable paths raises :class:`ParseError`.
    """
    headers = list(_PATH_HEADER.finditer(text or ""))
    paths, rejected = [], {}
    for i, h in enumerate(headers):
        number = int(h.group(1))
        block = text[h.end(): headers[i + 1].start() if i + 1 < len(headers) else len(text)]
        try:
            traj, reasoning, meta = _parse_block(block, horizon)
        except ValueError as exc:
            rejected[number] = str(exc)
            continue
        paths.append(CandidatePath(traj, rationale=reasoning, meta_action=meta))
    if len(paths) < 2:
        raise ParseError(f"only {len(paths)} parseable path(s); rejected: {rejected}",
                         bad_indices=sorted(rejected))
    return ParsedPaths(paths, rejected)


def _num(v: float) -> str:
    return repr(float(v))


def format_generated_paths(candidates: Sequence[CandidatePath]) -> str:
    """Render candidates in the generator's output schema (exact float round trip)."""
    out = [f"my predicted {len(candidates)} paths are"]
    for i, c in enumerate(candidates, start=1):
        pts = ", ".join(f"({_num(x)}, {_num(y)})" for x, y in c.trajectory.points)
        out += [
            f"Path {i}:",
            f" - Thought Process: {c.meta_action}",
            f" - Reasoning: {c.rationale}",
            f" - Meta Action: {c.meta_action}",
            f" - Trajectory: [{pts}]",
            "",
        ]
    return "\n".join(out)
