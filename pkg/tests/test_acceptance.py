"""Acceptance criteria, all against the mock backend with no network."""

import json
import math
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, fixture_instance, make_scene, parked, straight
from safepath.adapter import BackendConfig, ReplayTransport, llm_adapter_score
from safepath.bench import BenchConfig, DecisionCache, build_pool, run_splits
from safepath.conformal import CalibratedThreshold, calibrate, set_from_scores
from safepath.decision import DecisionConfig, Strategy, decide
from safepath.experiments import (ExperimentConfig, cmd_ablate, cmd_calibrate, cmd_closedloop,
                                  cmd_evaluate, cmd_report, cmd_sweep_delta, read_csv)
from safepath.generation import CandidatePath, CandidateSet
from safepath.scene import Trajectory
from safepath.scoring import NonconformityConfig, OptionScores, build_mcqa, nonconformity

pytestmark = pytest.mark.acceptance

ALPHAS = (0.1, 0.2, 0.3)
KINDS = ("LAC", "APS", "RAPS")
DELTAS = (0.85, 0.95)
N_CAL, N_TEST, SPLITS = 500, 1000, 50
TRANSCRIPTS = sorted((Path(__file__).parent / "fixtures" / "transcripts").glob("*.json"))


def verdict(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)
    assert ok, line


# -- shared bench ------------------------------------------------------------

@pytest.fixture(scope="module")
def bench():
    """Coverage and safety over 50 splits of one exchangeable 1500-item pool."""
    t0 = time.perf_counter()
    pool = build_pool(N_CAL + N_TEST, seed=0, cfg=BenchConfig())
    cache = DecisionCache(Strategy.MIN_COLLISION)
    results = {}
    for kind in KINDS:
        for alpha in ALPHAS:
            results[kind, alpha] = run_splits(pool, alpha, NonconformityConfig(kind), N_CAL, N_TEST,
                                              SPLITS, seed=17, deltas=DELTAS, cache=cache)
    return results, time.perf_counter() - t0


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    """Every command at its default configuration, run once into ``a``."""
    root = tmp_path_factory.mktemp("acceptance")
    cfg = ExperimentConfig()
    out = root / "a"
    timings = {}
    results = {}
    for name, cmd in (("calibrate", cmd_calibrate), ("evaluate", cmd_evaluate),
                      ("sweep-delta", cmd_sweep_delta), ("ablate", cmd_ablate),
                      ("closedloop", cmd_closedloop), ("report", cmd_report)):
        t0 = time.perf_counter()
        results[name] = cmd(cfg, out)
        timings[name] = time.perf_counter() - t0
    return root, cfg, results, timings


# -- criteria ----------------------------------------------------------------

def test_criterion_1_coverage(bench):
    results, seconds = bench
    worst = min(((float(np.mean(r.coverage)) - (1 - a)), k, a) for (k, a), r in results.items())
    ok = worst[0] >= -0.02 and seconds < 120
    verdict(1, ok, f"mean coverage - (1 - alpha) >= -0.02 for LAC/APS/RAPS x {ALPHAS} "
                   f"(worst {worst[0]:+.4f} at {worst[1]} alpha={worst[2]}, {seconds:.1f}s)")


def test_criterion_2_end_to_end_safety(bench):
    results, _ = bench
    worst = min((float(np.mean(r.safe_rate[d])) - (1 - a), k, a, d)
                for (k, a), r in results.items() for d in DELTAS)
    verdict(2, worst[0] >= -0.02,
            f"safe-outcome rate - (1 - alpha) >= -0.02 at delta {DELTAS} "
            f"(worst {worst[0]:+.4f} at {worst[1]} alpha={worst[2]} delta={worst[3]})")


def oracle_quantile(scores, alpha):
    """Sort and index, with the rank computed in exact rational arithmetic."""
    n = len(scores)
    rank = math.ceil((n + 1) * (1 - Fraction(str(alpha))))
    return math.inf if rank > n else sorted(scores)[rank - 1]


def test_criterion_3_quantile_exactness():
    rng = np.random.default_rng(3)
    grid = (0.001, 0.01, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.5, 0.7, 0.9, 0.99)
    bad, overflow = 0, 0
    for i in range(1000):
        n = int(rng.integers(1, 501))
        alpha = float(grid[i % len(grid)])
        scores = rng.random(n)
        if i % 3 == 0:
            scores = np.round(scores, 2)  # ties
        want = oracle_quantile(scores.tolist(), alpha)
        got = calibrate(scores, alpha).q_hat
        overflow += want == math.inf
        bad += not (got == want)
    verdict(3, bad == 0 and overflow > 0,
            f"1000 random calibrations equal the sort-and-index oracle "
            f"({bad} mismatches, {overflow} overflow cases)")


def brute_scores(p, labels, y, lam, k_reg):
    """Definitional scores: mass of every option ranked at or above y."""
    py = p[y]
    above = [j for j in labels if p[j] > py or (p[j] == py and j <= y)]
    aps = sum(p[j] for j in above)
    rank = len(above)
    return 1 - py, aps, aps + lam * max(0, rank - k_reg)


def test_criterion_4_score_exactness():
    rng = np.random.default_rng(4)
    worst, raps0_identical = 0.0, True
    for i in range(1000):
        m = int(rng.integers(2, 6))
        labels = "ABCDE"[:m]
        v = rng.dirichlet(np.ones(m) * rng.uniform(0.2, 3))
        if i % 4 == 0:
            v = np.round(v * 4) / max(np.round(v * 4).sum(), 1)  # tied masses
            if v.sum() == 0:
                v = np.full(m, 1 / m)
        p = dict(zip(labels, v.tolist()))
        lam, k_reg = float(rng.uniform(0, 0.5)), int(rng.integers(0, 4))
        for y in labels:
            want = brute_scores(p, labels, y, lam, k_reg)
            got = (nonconformity(p, y, NonconformityConfig("LAC")),
                   nonconformity(p, y, NonconformityConfig("APS")),
                   nonconformity(p, y, NonconformityConfig("RAPS", lam, k_reg)))
            worst = max(worst, max(abs(a - b) for a, b in zip(got, want)))
            raps0 = nonconformity(p, y, NonconformityConfig("RAPS", 0.0, k_reg))
            raps0_identical &= raps0 == got[1]
    verdict(4, worst <= 1e-9 and raps0_identical,
            f"LAC/APS/RAPS match brute force on 1000 vectors (max err {worst:.1e}); "
            f"RAPS(lambda=0) == APS exactly: {raps0_identical}")


def _set(paths, scene, logits=None, q=math.inf):
    cs = CandidateSet(scene, [CandidatePath(p, "r") for p in paths]).labeled()
    inst = build_mcqa(cs)
    logits = logits or dict.fromkeys(inst.labels, 0.0)
    th = CalibratedThreshold(q, 0.1, 100, NonconformityConfig())
    return set_from_scores(inst, OptionScores.from_logits(logits), th)


def _shift(dx):
    return Trajectory(straight().points + np.array([dx, 0.0]))


def test_criterion_5_algorithm_cases():
    scene = make_scene()
    cfg = DecisionConfig(0.85, Strategy.MIN_COLLISION)
    checks = {}
    empty = _set([straight(), _shift(1)], scene, {"A": 0.0, "B": 0.0}, q=0.1)
    checks["|C|=0 delegates"] = len(empty) == 0 and decide(empty, scene, cfg).is_delegate
    single = _set([straight(), _shift(3)], scene, {"A": 5.0, "B": 0.0}, q=0.5)
    d = decide(single, scene, cfg)
    checks["|C|=1 adopts"] = (len(single) == 1 and not d.is_delegate and d.chosen_label == "A")
    # all similar: the strategy chooses, here the member clear of a parked car
    blocked = make_scene([parked("p", (0.0, 3.0), radius=0.5)])
    similar = _set([straight(), _shift(0.1), _shift(0.2)], blocked)
    d = decide(similar, blocked, cfg)
    checks["all-similar adopts via strategy"] = (not d.is_delegate and d.set_size == 3
                                                 and d.min_similarity >= 0.85)
    divergent = _set([straight(), _shift(0.1), _shift(3.0)], scene)
    d = decide(divergent, scene, cfg)
    checks["one divergent pair delegates"] = d.is_delegate and d.set_size == 3
    # equal collision fractions: the earliest label wins on every replay
    tie = _set([_shift(0.1), straight(), _shift(0.05)], scene)
    picks = {decide(tie, scene, cfg).chosen_label for _ in range(20)}
    checks["tie-break replay-stable"] = picks == {"A"}
    failed = [k for k, v in checks.items() if not v]
    verdict(5, not failed, f"{len(checks) - len(failed)}/{len(checks)} decision cases hold"
                           + (f" (failed: {failed})" if failed else ""))


def test_criterion_6_delta_monotone(runs):
    root, cfg, _, _ = runs
    rows = read_csv(root / "a" / "sweep_delta.csv")
    bad = []
    for alpha in cfg.sweep_alpha:
        curve = sorted((float(r["delta"]), float(r["hud_rate"])) for r in rows
                       if float(r["alpha"]) == alpha)
        assert [d for d, _ in curve] == sorted(cfg.delta_grid)
        bad += [alpha for (_, a), (_, b) in zip(curve, curve[1:]) if b < a]
    verdict(6, not bad, f"HuD non-decreasing over delta {cfg.delta_grid} for alpha "
                        f"{cfg.sweep_alpha}" + (f" (violations at {bad})" if bad else ""))


def test_criterion_7_ablation_ordering(runs):
    root, cfg, results, _ = runs
    res = results["ablate"]
    m = res["mean_collision_rate"]
    p1, p2 = res["p_stage1_vs_stages13"], res["p_stages13_vs_full"]
    ok = (m["full"] <= m["stages13"] <= m["stage1"] and p1 < 0.05 and p2 < 0.05
          and cfg.ablation.seeds == 50)
    verdict(7, ok, f"collision rate full {m['full']:.4f} <= stages1+3 {m['stages13']:.4f} "
                   f"<= stage1 {m['stage1']:.4f}; p = {p1:.1e}, {p2:.1e} over 50 seeds")


def test_criterion_8_closed_loop(runs, tmp_path):
    root, cfg, results, _ = runs
    rows = read_csv(root / "a" / "closedloop.csv")
    assert len([r for r in rows if r["arm"] == "safepath"]) == 30
    o = results["closedloop"]["overall"]
    ok = (o["safepath"]["success_rate"] > o["greedy"]["success_rate"]
          and o["safepath"]["mean_ttc"] >= o["greedy"]["mean_ttc"])
    # the relation must survive a noisy scorer too
    noisy = cmd_closedloop(ExperimentConfig.from_dict({"env": {"noise_scale": 1.0}}),
                           tmp_path)["overall"]
    ok_noisy = (noisy["safepath"]["success_rate"] > noisy["greedy"]["success_rate"]
                and noisy["safepath"]["mean_ttc"] >= noisy["greedy"]["mean_ttc"])
    verdict(8, ok and ok_noisy,
            f"30 episodes: success {o['safepath']['success_rate']:.3f} > greedy "
            f"{o['greedy']['success_rate']:.3f}, TTC {o['safepath']['mean_ttc']:.1f} >= "
            f"{o['greedy']['mean_ttc']:.1f}; noisy scorer {noisy['safepath']['success_rate']:.3f} "
            f"> {noisy['greedy']['success_rate']:.3f}")


def test_criterion_9_determinism(runs):
    root, cfg, _, _ = runs
    for cmd in (cmd_calibrate, cmd_evaluate, cmd_sweep_delta, cmd_ablate, cmd_closedloop,
                cmd_report):
        cmd(cfg, root / "b")
    a = {p.name: p.read_bytes() for p in (root / "a").iterdir() if p.name != "timing.json"}
    b = {p.name: p.read_bytes() for p in (root / "b").iterdir() if p.name != "timing.json"}
    differ = sorted(k for k in a if a[k] != b.get(k))
    verdict(9, a.keys() == b.keys() and not differ,
            f"rerunning all six commands reproduces {len(a)} report files byte for byte"
            + (f" (differ: {differ})" if differ else ""))


def test_criterion_10_adapter_transcripts(monkeypatch):
    monkeypatch.setenv("SAFEPATH_API_KEY", "sk-acceptance-placeholder")
    cfg = BackendConfig("http://fixture.invalid/v1/chat/completions", "fixture-model")
    bad, floors = [], 0
    for path in TRANSCRIPTS:
        doc = json.loads(path.read_text())
        inst = fixture_instance(doc["n_options"], doc["seed"])
        got = llm_adapter_score(inst, cfg, ReplayTransport(doc["transcript"])).logits
        want = doc["expected_logits"]
        first = doc["transcript"][0]["response"]["choices"][0]["logprobs"]["content"][0]
        seen = {e["token"].strip() for e in first["top_logprobs"]}
        floors += not set(inst.labels) <= seen
        if list(got) != inst.labels or any(abs(got[k] - want[k]) > 1e-12 for k in want):
            bad.append(path.stem)
    verdict(10, len(TRANSCRIPTS) == 20 and not bad and floors > 0,
            f"{len(TRANSCRIPTS) - len(bad)}/20 recorded transcripts replay to the expected "
            f"logits ({floors} exercise the missing-letter floor)")
