"""Experiment drivers behind the command line.

Each ``cmd_*`` is a pure function of an :class:`ExperimentConfig` (plus any
recorded backend transcript): it writes CSV / JSON-lines reports into an
output directory and returns a small summary dict. Reports carry the config
hash and no timestamps; wall-clock lives in ``timing.json`` beside them.

Seed streams keep the pools disjoint: stream 0 calibrates, stream 1 tests,
stream 2 calibrates the no-ground-truth pipeline used by the ablation and the
closed loop, stream 3 holds the ablation scenes.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from safepath.adapter import BackendConfig, LLMAdapter
from safepath.bench import (BenchConfig, BenchItem, DecisionCache, brake_in_lane, build_pool,
                            outcome_is_safe, rescore)
from safepath.conformal import CalibratedThreshold, calibrate, set_from_scores
from safepath.decision import DecisionConfig, Strategy, decide
from safepath.errors import BackendError
from safepath.scoring import NoiseConfig, NonconformityConfig, ScoreKind, option_scores
from safepath.sim import EnvConfig, EnvKind, Pipeline, run_episode

CAL_STREAM, TEST_STREAM, PLAN_CAL_STREAM, ABLATION_STREAM = 0, 1, 2, 3


class MissingArtifactError(RuntimeError):
    pass


class NonMonotoneError(AssertionError):
    pass


# -- configuration -----------------------------------------------------------

@dataclass
class MockSettings:
    noise_scale: float = 1.0
    b_safe: float = 2.0
    b_unsafe: float = 0.0
    reference_bonus: float = 0.0


@dataclass
class BenchSettings:
    maneuver_jitter: float = 0.3
    prediction_error: float = 0.35
    max_agents: int = 4
    safety_margin: float = 0.0


@dataclass
class EnvSettings:
    kinds: list = field(default_factory=lambda: [k.value for k in EnvKind])
    episodes: int = 10
    frames: int = 100
    dt: float = 0.5
    n_agents: int = 8
    replan_every: int = 1
    alpha: float = 0.3
    noise_scale: float = 0.0


@dataclass
class AblationSettings:
    seeds: int = 50
    scenes_per_seed: int = 200
    alpha: float = 0.3
    # 0 disables the similarity gate: every arm must commit to a path
    delta: float = 0.0


@dataclass
class BackendSettings:
    kind: str = "mock"
    endpoint_url: str | None = None
    model_name: str | None = None
    top_logprobs: int = 10
    timeout: float = 30.0
    max_retries: int = 3
    max_in_flight: int = 4


_SECTIONS = {"mock": MockSettings, "bench": BenchSettings, "env": EnvSettings,
             "ablation": AblationSettings, "backend": BackendSettings}
_FORBIDDEN = ("api_key", "apikey", "token", "secret", "password", "authorization")


@dataclass
class ExperimentConfig:
    alpha: list = field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5])
    delta: list = field(default_factory=lambda: [0.85])
    score_kind: list = field(default_factory=lambda: ["LAC", "APS", "RAPS"])
    raps_lambda: float = 0.1
    raps_k_reg: int = 1
    strategy: str = "MinCollision"
    k: int = 4
    seeds: list = field(default_factory=lambda: [0])
    n_cal: int = 500
    n_test: int = 1000
    delta_grid: list = field(default_factory=lambda: [0.5, 0.85, 0.9, 0.95, 0.99])
    sweep_alpha: list = field(default_factory=lambda: [0.05, 0.1, 0.2, 0.3])
    workers: int = 1
    mock: MockSettings = field(default_factory=MockSettings)
    bench: BenchSettings = field(default_factory=BenchSettings)
    env: EnvSettings = field(default_factory=EnvSettings)
    ablation: AblationSettings = field(default_factory=AblationSettings)
    backend: BackendSettings = field(default_factory=BackendSettings)

    def __post_init__(self):
        for name in ("alpha", "delta", "score_kind", "seeds", "delta_grid", "sweep_alpha"):
            v = getattr(self, name)
            if not isinstance(v, (list, tuple)):
                setattr(self, name, [v])
        self.score_kind = [ScoreKind(s).value for s in self.score_kind]
        self.strategy = Strategy(self.strategy).value
        if any(not 0 < a < 1 for a in self.alpha + self.sweep_alpha + [self.env.alpha,
                                                                         self.ablation.alpha]):
            raise ValueError("every alpha must lie in (0, 1)")
        if self.n_cal < 1 or self.n_test < 1:
            raise ValueError("n_cal and n_test must be >= 1")
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        if self.backend.kind not in ("mock", "external"):
            raise ValueError(f"unknown backend {self.backend.kind!r}")

    @classmethod
    def from_dict(cls, doc: dict | None) -> "ExperimentConfig":
        doc = dict(doc or {})
        _reject_credentials(doc)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for name, typ in _SECTIONS.items():
            if name in doc and not isinstance(doc[name], typ):
                sub = dict(doc[name] or {})
                extra = set(sub) - {f.name for f in dataclasses.fields(typ)}
                if extra:
                    raise ValueError(f"unknown keys in {name}: {sorted(extra)}")
                doc[name] = typ(**sub)
        return cls(**doc)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def seed(self) -> int:
        return int(self.seeds[0])

    def nonconformity(self, kind: str) -> NonconformityConfig:
        return NonconformityConfig(kind, self.raps_lambda, self.raps_k_reg)

    def bench_config(self, inject_ground_truth: bool = True) -> BenchConfig:
        m, b = self.mock, self.bench
        return BenchConfig(k=self.k, maneuver_jitter=b.maneuver_jitter,
                           max_agents=b.max_agents, prediction_error=b.prediction_error,
                           noise=NoiseConfig(m.noise_scale, m.b_safe, m.b_unsafe),
                           safety_margin=b.safety_margin,
                           inject_ground_truth=inject_ground_truth,
                           reference_bonus=m.reference_bonus)

    def backend_config(self) -> BackendConfig:
        b = self.backend
        if not b.endpoint_url or not b.model_name:
            raise ValueError("the external backend needs endpoint_url and model_name")
        return BackendConfig(b.endpoint_url, b.model_name, b.top_logprobs, b.timeout,
                             b.max_retries, b.max_in_flight)


def _reject_credentials(doc, path=""):
    # credentials belong in the environment, never in a config file
    if isinstance(doc, dict):
        for key, value in doc.items():
            if any(word in str(key).lower() for word in _FORBIDDEN):
                raise ValueError(f"config key {path}{key!r} looks like a credential; "
                                 "supply credentials through the environment instead")
            _reject_credentials(value, f"{path}{key}.")


# -- report io ---------------------------------------------------------------

def write_csv(path: Path, rows: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        if not rows:
            return
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def read_csv(path: Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, default=_json_default)


def write_jsonl(path: Path, rows) -> None:
    with path.open("w") as fh:
        for row in rows:
            fh.write(dumps(row) + "\n")


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, default=_json_default) + "\n")


def _finite(x):
    return "inf" if isinstance(x, float) and math.isinf(x) else x


class Run:
    """Output directory plus the bookkeeping every command shares."""

    def __init__(self, name: str, cfg: ExperimentConfig, out_dir, transport=None):
        self.name = name
        self.cfg = cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.transport = transport
        self.hash = cfg.config_hash()
        self._t0 = time.perf_counter()

    def path(self, filename: str) -> Path:
        return self.out / filename

    def adapter(self) -> LLMAdapter | None:
        if self.cfg.backend.kind != "external":
            return None
        return LLMAdapter(self.cfg.backend_config(), self.transport)

    def finish(self, outputs: list[str], summary: dict) -> dict:
        write_json(self.path(f"{self.name}_manifest.json"),
                   {"command": self.name, "config_hash": self.hash,
                    "config": self.cfg.to_dict(), "outputs": sorted(outputs),
                    "summary": summary})
        timing_path = self.path("timing.json")
        timing = json.loads(timing_path.read_text()) if timing_path.exists() else {}
        timing[self.name] = round(time.perf_counter() - self._t0, 3)
        write_json(timing_path, timing)
        return summary


def _score_pool(run: Run, items: list[BenchItem]) -> list[BenchItem]:
    adapter = run.adapter()
    if adapter is None:
        return items
    return rescore(items, adapter, workers=max(run.cfg.workers, 1))


# -- calibrate ---------------------------------------------------------------

def calibration_pool(cfg: ExperimentConfig, score: bool = True) -> list[BenchItem]:
    return build_pool(cfg.n_cal, cfg.seed, cfg.bench_config(True), CAL_STREAM, score)


def test_pool(cfg: ExperimentConfig, score: bool = True) -> list[BenchItem]:
    return build_pool(cfg.n_test, cfg.seed, cfg.bench_config(True), TEST_STREAM, score)


def _score_with_progress(run: Run, items: list[BenchItem], progress: Path) -> list[BenchItem]:
    """External scoring that checkpoints every instance, so a failed run resumes."""
    from safepath.scoring import OptionScores

    done = {}
    if progress.exists():
        for line in progress.read_text().splitlines():
            rec = json.loads(line)
            if rec.get("config_hash") == run.hash:
                done[rec["scene_ref"]] = rec["logits"]
    adapter = run.adapter()
    out = []
    with progress.open("a") as fh:
        for it in items:
            ref = it.instance.scene_ref
            if ref in done:
                scores = OptionScores.from_logits(done[ref])
            else:
                scores = adapter(it.instance)
                fh.write(dumps({"config_hash": run.hash, "scene_ref": ref,
                                "logits": scores.logits}) + "\n")
                fh.flush()
            out.append(dataclasses.replace(it, scores=scores))
    return out


def cmd_calibrate(cfg: ExperimentConfig, out_dir, transport=None) -> dict:
    run = Run("calibrate", cfg, out_dir, transport)
    progress = run.path("calibrate.partial.jsonl")
    if cfg.backend.kind == "external":
        try:
            items = _score_with_progress(run, calibration_pool(cfg, score=False), progress)
        except BackendError as exc:
            raise BackendError(f"{exc} (progress kept in {progress}; rerun calibrate to resume)"
                               ) from exc
    else:
        items = calibration_pool(cfg)

    kinds = {k: cfg.nonconformity(k) for k in cfg.score_kind}
    records = []
    for it in items:
        records.append({
            "scene_ref": it.instance.scene_ref,
            "correct_label": it.correct_label,
            "probabilities": it.scores.probabilities,
            "scores": {k: option_scores(it.scores.probabilities, nc)[it.correct_label]
                       for k, nc in kinds.items()},
        })
    thresholds = []
    for kind, nc in kinds.items():
        scores = [r["scores"][kind] for r in records]
        for alpha in cfg.alpha:
            th = calibrate(scores, alpha, nc)
            thresholds.append({**th.to_dict(), "seed": cfg.seed, "stream": CAL_STREAM})
    write_jsonl(run.path("calibration_scores.jsonl"), records)
    write_json(run.path("thresholds.json"), {"config_hash": run.hash, "seed": cfg.seed,
                                             "n_cal": cfg.n_cal, "thresholds": thresholds})
    if progress.exists():
        progress.unlink()
    return run.finish(["thresholds.json", "calibration_scores.jsonl"],
                      {"thresholds": len(thresholds)})


def load_thresholds(out_dir) -> dict[tuple[float, str], CalibratedThreshold]:
    path = Path(out_dir) / "thresholds.json"
    if not path.exists():
        raise MissingArtifactError(
            f"no calibrated thresholds at {path}; run `safepath calibrate` "
            "(cmd_calibrate) with the same config and output directory first")
    doc = json.loads(path.read_text())
    return {(t["alpha"], t["score_kind"]): CalibratedThreshold.from_dict(t)
            for t in doc["thresholds"]}


# -- evaluate ----------------------------------------------------------------

def cmd_evaluate(cfg: ExperimentConfig, out_dir, transport=None) -> dict:
    run = Run("evaluate", cfg, out_dir, transport)
    table = load_thresholds(out_dir)
    missing = [(a, k) for a in cfg.alpha for k in cfg.score_kind if (a, k) not in table]
    if missing:
        raise MissingArtifactError(f"thresholds.json lacks {missing}; rerun `safepath calibrate` "
                                   "(cmd_calibrate) with this config")
    items = _score_pool(run, test_pool(cfg, score=cfg.backend.kind == "mock"))
    cache = DecisionCache(Strategy(cfg.strategy))
    rows, instance_log = [], []
    n = len(items)
    for kind in cfg.score_kind:
        for alpha in cfg.alpha:
            th = table[(alpha, kind)]
            covered, sizes = 0, []
            # hud, effective size, safe (delegate counts), safe among adoptions
            agg = {("safepath", d): [0, 0, 0, 0] for d in cfg.delta}
            agg[("knowno", "")] = [0, 0, 0, 0]
            for it in items:
                pset = set_from_scores(it.instance, it.scores, th)
                hit = it.correct_label in pset.labels
                covered += hit
                sizes.append(len(pset))
                outcomes = {}
                for (policy, d), acc in agg.items():
                    dec = cache.decide(it, pset, d) if policy == "safepath" else cache.knowno(it, pset)
                    acc[0] += dec.is_delegate
                    acc[1] += len(pset) if dec.is_delegate else 1
                    acc[2] += outcome_is_safe(it, dec)
                    acc[3] += not dec.is_delegate and it.oracle.is_safe(dec.trajectory)
                    outcomes[f"{policy}{d}"] = dec.outcome
                instance_log.append({"scene_ref": it.instance.scene_ref, "alpha": alpha,
                                     "score_kind": kind, "correct_label": it.correct_label,
                                     "set": pset.labels, "covered": hit,
                                     "probabilities": it.scores.probabilities,
                                     "outcomes": outcomes})
            coverage = covered / n
            for (policy, d), (hud, eff, safe, safe_adopted) in agg.items():
                rows.append({"config_hash": run.hash, "alpha": alpha, "score_kind": kind,
                             "policy": policy, "delta": d, "n_test": n, "coverage": coverage,
                             "dtc": coverage - (1 - alpha), "avg_set_size": float(np.mean(sizes)),
                             "effective_size": eff / n, "hud_rate": hud / n,
                             "safe_rate": safe / n,
                             "safe_excluding_delegations": safe_adopted / n})
    write_csv(run.path("evaluate.csv"), rows)
    write_jsonl(run.path("evaluate_instances.jsonl"), instance_log)
    return run.finish(["evaluate.csv", "evaluate_instances.jsonl"], {"rows": len(rows)})


# -- sweep-delta -------------------------------------------------------------

def _internal_threshold(cfg: ExperimentConfig, items, alpha: float, kind: str):
    nc = cfg.nonconformity(kind)
    scores = [option_scores(it.scores.probabilities, nc)[it.correct_label] for it in items]
    return calibrate(scores, alpha, nc)


def hud_curve(items, thresholds: dict, deltas, strategy=Strategy.MIN_COLLISION) -> dict:
    """HuD per (alpha, delta) with the sets fixed per alpha."""
    cache = DecisionCache(strategy)
    out = {}
    for alpha, th in thresholds.items():
        psets = [set_from_scores(it.instance, it.scores, th) for it in items]
        for d in deltas:
            out[(alpha, d)] = sum(cache.decide(it, ps, d).is_delegate
                                  for it, ps in zip(items, psets)) / len(items)
    return out


def cmd_sweep_delta(cfg: ExperimentConfig, out_dir, transport=None) -> dict:
    run = Run("sweep_delta", cfg, out_dir, transport)
    kind = cfg.score_kind[0]
    cal = _score_pool(run, calibration_pool(cfg, score=cfg.backend.kind == "mock"))
    items = _score_pool(run, test_pool(cfg, score=cfg.backend.kind == "mock"))
    thresholds = {a: _internal_threshold(cfg, cal, a, kind) for a in cfg.sweep_alpha}
    deltas = sorted(cfg.delta_grid)
    curve = hud_curve(items, thresholds, deltas, Strategy(cfg.strategy))
    rows = [{"config_hash": run.hash, "score_kind": kind, "alpha": a, "q_hat": _finite(th.q_hat),
             "delta": d, "hud_rate": curve[(a, d)], "n_test": len(items)}
            for a, th in thresholds.items() for d in deltas]
    table = [{"delta": d, **{f"alpha={a}": curve[(a, d)] for a in thresholds}} for d in deltas]
    write_csv(run.path("sweep_delta.csv"), rows)
    write_csv(run.path("sweep_delta_table.csv"), table)
    bad = [a for a in thresholds
           if any(curve[(a, d1)] > curve[(a, d2)] for d1, d2 in zip(deltas, deltas[1:]))]
    summary = run.finish(["sweep_delta.csv", "sweep_delta_table.csv"],
                         {"monotone": not bad, "non_monotone_alpha": bad})
    if bad:
        raise NonMonotoneError(f"HuD decreases with delta for alpha {bad}; "
                               "this points at a similarity or gate bug")
    return summary


# -- ablate ------------------------------------------------------------------

ARMS = ("stage1", "stages13", "full")


def planning_threshold(cfg: ExperimentConfig, alpha: float, transport=None,
                       run: Run | None = None) -> CalibratedThreshold:
    """Threshold for pipelines that never see the recorded path.

    Calibrated on a pool without ground-truth injection, where the correct
    label is the truly safe candidate closest to the recorded path.
    """
    score = cfg.backend.kind == "mock"
    pool = build_pool(cfg.n_cal, cfg.seed, cfg.bench_config(False), PLAN_CAL_STREAM, score)
    if run is not None:
        pool = _score_pool(run, pool)
    pool = [it for it in pool if it.correct_label is not None]
    return _internal_threshold(cfg, pool, alpha, cfg.score_kind[0])


def ablation_arms(item: BenchItem, threshold: CalibratedThreshold, dcfg: DecisionConfig):
    """Executed trajectory and decision per arm, all on the same candidate set."""
    first = item.candidates.candidates[0]
    everything = dataclasses.replace(threshold, q_hat=math.inf)
    out = {"stage1": (first.trajectory, "adopt", first.label, len(item.candidates.candidates))}
    for arm, th in (("stages13", everything), ("full", threshold)):
        pset = set_from_scores(item.instance, item.scores, th)
        dec = decide(pset, item.scene, dcfg)
        traj = brake_in_lane(item) if dec.is_delegate else dec.trajectory
        out[arm] = (traj, dec.outcome, dec.chosen_label, len(pset))
    return out


def paired_p(worse, better) -> float:
    """One-sided paired t-test p-value for mean(worse) > mean(better)."""
    diff = np.asarray(worse, float) - np.asarray(better, float)
    if np.all(diff == diff[0]):
        return 0.0 if diff[0] > 0 else 1.0
    return float(stats.ttest_rel(worse, better, alternative="greater").pvalue)


def cmd_ablate(cfg: ExperimentConfig, out_dir, transport=None) -> dict:
    run = Run("ablate", cfg, out_dir, transport)
    ab = cfg.ablation
    th = planning_threshold(cfg, ab.alpha, run=run)
    dcfg = DecisionConfig(ab.delta, Strategy(cfg.strategy))
    bcfg = cfg.bench_config(False)
    rows, log = [], []
    rates = {arm: [] for arm in ARMS}
    for i in range(ab.seeds):
        seed = cfg.seed + i
        items = _score_pool(run, build_pool(ab.scenes_per_seed, seed, bcfg, ABLATION_STREAM,
                                            score=cfg.backend.kind == "mock"))
        hits = {arm: 0 for arm in ARMS}
        delegations = {arm: 0 for arm in ARMS}
        for it in items:
            for arm, (traj, outcome, label, size) in ablation_arms(it, th, dcfg).items():
                collided = not it.oracle.collision_free(traj)
                hits[arm] += collided
                delegations[arm] += outcome == "delegate"
                log.append({"seed": seed, "scene_ref": it.instance.scene_ref, "arm": arm,
                            "outcome": outcome, "chosen_label": label, "set_size": size,
                            "trajectory": traj.as_tuples(), "collided": collided})
        for arm in ARMS:
            rate = hits[arm] / len(items)
            rates[arm].append(rate)
            rows.append({"config_hash": run.hash, "seed": seed, "arm": arm, "n": len(items),
                         "collisions": hits[arm], "collision_rate": rate,
                         "delegations": delegations[arm]})
    p13 = paired_p(rates["stage1"], rates["stages13"])
    pfull = paired_p(rates["stages13"], rates["full"])
    summary_rows = [{"config_hash": run.hash, "arm": arm, "seeds": ab.seeds,
                     "mean_collision_rate": float(np.mean(rates[arm])),
                     "std_collision_rate": float(np.std(rates[arm], ddof=1)) if ab.seeds > 1 else 0.0,
                     "p_vs_previous": {"stage1": "", "stages13": p13, "full": pfull}[arm]}
                    for arm in ARMS]
    write_csv(run.path("ablate.csv"), rows)
    write_csv(run.path("ablate_summary.csv"), summary_rows)
    write_jsonl(run.path("ablate_decisions.jsonl"), log)
    means = {arm: float(np.mean(rates[arm])) for arm in ARMS}
    return run.finish(["ablate.csv", "ablate_summary.csv", "ablate_decisions.jsonl"],
                      {"mean_collision_rate": means, "p_stage1_vs_stages13": p13,
                       "p_stages13_vs_full": pfull, "q_hat": _finite(th.q_hat)})


# -- closed loop -------------------------------------------------------------

def closedloop_pipelines(cfg: ExperimentConfig, threshold, adapter=None) -> dict:
    decision = DecisionConfig(cfg.delta[0], Strategy(cfg.strategy))
    noise = NoiseConfig(cfg.env.noise_scale, cfg.mock.b_safe, cfg.mock.b_unsafe)
    factory = (lambda oracle, seed: adapter) if adapter is not None else None
    return {"safepath": Pipeline(threshold=threshold, decision=decision, noise=noise,
                                 scorer_factory=factory),
            "greedy": Pipeline(policy="greedy")}


def cmd_closedloop(cfg: ExperimentConfig, out_dir, transport=None) -> dict:
    run = Run("closedloop", cfg, out_dir, transport)
    env = cfg.env
    th = planning_threshold(cfg, env.alpha, run=run)
    pipes = closedloop_pipelines(cfg, th, run.adapter())
    jobs = [(arm, EnvConfig(kind=EnvKind(kind), n_agents=env.n_agents, frames=env.frames,
                            dt=env.dt, seed=cfg.seed + i, replan_every=env.replan_every))
            for arm in pipes for kind in env.kinds for i in range(env.episodes)]

    def work(job):
        arm, ecfg = job
        return arm, run_episode(ecfg, pipes[arm])

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(j) for j in jobs]

    rows, episodes = [], []
    for arm, log in results:
        rows.append({"config_hash": run.hash, **log.summary(arm),
                     "decisions": len(log.decisions)})
        episodes.append({"arm": arm, "env": log.env, "seed": log.seed, "success": log.success,
                         "ttc": log.ttc, "first_collision_frame": log.first_collision_frame,
                         "hud_count": log.hud_count, "error": log.error,
                         "decisions": log.decisions})
    summary_rows = []
    for arm in pipes:
        for kind in env.kinds:
            sel = [r for r in rows if r["arm"] == arm and r["env"] == kind]
            n_dec = sum(r["decisions"] for r in sel)
            summary_rows.append({
                "config_hash": run.hash, "arm": arm, "env": kind, "episodes": len(sel),
                "success_rate": float(np.mean([r["success"] for r in sel])),
                "mean_ttc": float(np.mean([r["ttc"] for r in sel])),
                "hud_per_episode": float(np.mean([r["hud_count"] for r in sel])),
                "hud_rate": sum(r["hud_count"] for r in sel) / n_dec if n_dec else 0.0,
                "errors": sum(bool(r["error"]) for r in sel)})
    overall = {arm: {"success_rate": float(np.mean([r["success"] for r in rows if r["arm"] == arm])),
                     "mean_ttc": float(np.mean([r["ttc"] for r in rows if r["arm"] == arm]))}
               for arm in pipes}
    claim = (overall["safepath"]["success_rate"] > overall["greedy"]["success_rate"]
             and overall["safepath"]["mean_ttc"] >= overall["greedy"]["mean_ttc"])
    write_csv(run.path("closedloop.csv"), rows)
    write_csv(run.path("closedloop_summary.csv"), summary_rows)
    write_jsonl(run.path("closedloop_episodes.jsonl"), episodes)
    return run.finish(["closedloop.csv", "closedloop_summary.csv", "closedloop_episodes.jsonl"],
                      {"overall": overall, "safepath_beats_greedy": claim,
                       "q_hat": _finite(th.q_hat)})


# -- report ------------------------------------------------------------------

_REPORT_SOURCES = (
    ("Calibration thresholds", "thresholds.json"),
    ("Prediction-set metrics", "evaluate.csv"),
    ("Delegation rate over the similarity threshold", "sweep_delta_table.csv"),
    ("Stage ablation", "ablate_summary.csv"),
    ("Closed loop", "closedloop_summary.csv"),
)


def _fmt(v) -> str:
    try:
        f = float(v)
    except (TypeError, ValueError):
        return str(v)
    if math.isinf(f):
        return "inf"
    if 0 < abs(f) < 1e-3:
        return f"{f:.2e}"
    return str(v) if float(f).is_integer() and "." not in str(v) else f"{f:.4f}"


def _table(rows: list[dict], drop=("config_hash",)) -> list[str]:
    cols = [c for c in rows[0] if c not in drop]
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    lines += ["| " + " | ".join(_fmt(r[c]) for c in cols) + " |" for r in rows]
    return lines


def cmd_report(cfg: ExperimentConfig, out_dir, transport=None) -> dict:
    """Collects whatever reports exist in ``out_dir`` into ``report.md``."""
    run = Run("report", cfg, out_dir, transport)
    lines = ["# Results", "", f"config hash: {run.hash}", ""]
    found = []
    for title, name in _REPORT_SOURCES:
        path = run.path(name)
        if not path.exists():
            continue
        found.append(name)
        if name.endswith(".json"):
            rows = [{"alpha": t["alpha"], "score_kind": t["score_kind"], "n": t["n"],
                     "q_hat": t["q_hat"]} for t in json.loads(path.read_text())["thresholds"]]
        else:
            rows = read_csv(path)
        hashes = {r.get("config_hash") for r in rows} - {None}
        lines += [f"## {title}", ""]
        if hashes and hashes != {run.hash}:
            lines += [f"(produced under config hash {', '.join(sorted(hashes))})", ""]
        lines += (_table(rows) if rows else ["(empty)"]) + [""]
    if not found:
        raise MissingArtifactError(f"no reports in {run.out}; run an experiment command first")
    text = "\n".join(lines)
    run.path("report.md").write_text(text)
    run.finish(["report.md"], {"sections": found})
    return {"sections": found, "text": text}


COMMANDS = {
    "calibrate": cmd_calibrate,
    "evaluate": cmd_evaluate,
    "sweep-delta": cmd_sweep_delta,
    "ablate": cmd_ablate,
    "closedloop": cmd_closedloop,
    "report": cmd_report,
}
