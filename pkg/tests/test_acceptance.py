"""The nine acceptance criteria at desk scale; each prints one PASS/FAIL line."""

import math
import time

import numpy as np
import pytest

from robuststream.adversary import NaiveMeanAMS, gram_attack, gram_probe_budget
from robuststream.cli import (
    ExperimentConfig,
    run_batch,
    space_sweep,
    tri_check_suite,
)
from robuststream.core_types import child_seed
from robuststream.heavy_hitters import THRESHOLD, classify, probe_margins
from robuststream.robust_f2 import TreeState, size_parameters
from robuststream.tri_framework import FAMILIES

EPS = 0.2
SEEDS = list(range(1, 101))
WALL_LIMIT = 600.0


def f2_config(adversary: str) -> ExperimentConfig:
    return ExperimentConfig(task="f2", n=1024, m=20000, eps=EPS, seeds=SEEDS, master_seed=0,
                            mode="reference", adversary=adversary, max_delta=10)


@pytest.fixture(scope="module")
def oblivious_batch(tmp_path_factory):
    out = tmp_path_factory.mktemp("oblivious_a")
    t0 = time.perf_counter()
    records = run_batch(f2_config("oblivious_random"), out)
    return records, out, time.perf_counter() - t0


@pytest.fixture(scope="module")
def alignment_batch(tmp_path_factory):
    out = tmp_path_factory.mktemp("alignment")
    return run_batch(f2_config("alignment_attack"), out)


def within_eps(r) -> bool:
    return r.failure is None and r.max_rel_err is not None and r.max_rel_err <= EPS


def test_criterion_1_oblivious_accuracy(oblivious_batch, acceptance_log):
    records, _, wall = oblivious_batch
    good = sum(within_eps(r) for r in records)
    worst = max(r.max_rel_err for r in records)
    ok = good >= 95 and wall <= WALL_LIMIT and len(records) == 100
    acceptance_log(1, ok, f"{good}/100 runs within eps={EPS} (worst {worst:.4f}), wall {wall:.0f}s "
                          f"(limit {WALL_LIMIT:.0f}s)")
    assert ok


def test_criterion_2_adaptive_robustness(alignment_batch, acceptance_log):
    records = alignment_batch
    good = sum(within_eps(r) for r in records)
    capped = sum(r.failure is None and r.max_update_count <= r.L_max for r in records)
    worst = max(r.max_rel_err for r in records)
    peak = max(r.max_update_count for r in records)
    ok = good >= 95 and capped == 100
    acceptance_log(2, ok, f"{good}/100 runs within eps (worst {worst:.4f}); iterate counts <= L_max "
                          f"in {capped}/100 (peak {peak}, L_max {records[0].L_max})")
    assert ok


def test_criterion_3_baseline_break(acceptance_log):
    n, k, M = 64, 32, 1000
    rounds_cap = n + n * (n - 1) // 2
    ratios, rounds, robust_errs, robust_ok = [], [], [], 0
    for seed in range(1, 11):
        naive = NaiveMeanAMS(n, k, child_seed(0, seed, 1))
        cert, _ = gram_attack(naive, n, k, M=M, eps=EPS)
        ratios.append(cert.ratio if cert.feasible else math.inf)
        rounds.append(cert.probe_rounds)
        params = size_parameters(n, gram_probe_budget(n), EPS)
        robust = TreeState(params, child_seed(0, seed, 1))
        _, tr = gram_attack(robust, n, k, M=M, force=True, eps=EPS)
        robust_errs.append(tr.max_rel_err)
        robust_ok += tr.failure is None and tr.break_time is None
    broken = sum(r <= 1e-2 for r, q in zip(ratios, rounds) if q <= rounds_cap)
    ok = broken == 10 and robust_ok == 10
    acceptance_log(3, ok, f"naive broken {broken}/10 (max ratio {max(ratios):.2e}, probe rounds "
                          f"{max(rounds)} <= {rounds_cap}); robust unbroken {robust_ok}/10 "
                          f"(max rel err {max(robust_errs):.4f})")
    assert ok


def test_criterion_4_progress_lemma(oblivious_batch, alignment_batch, acceptance_log):
    records = oblivious_batch[0] + alignment_batch
    violations = sum(r.violations for r in records)
    checked = sum(sum(r.iterate_updates) for r in records)
    ok = violations == 0 and len(records) == 200
    acceptance_log(4, ok, f"{violations} progress violations over {checked} shadow-checked iterate "
                          f"updates in {len(records)} reference-mode runs")
    assert ok


def test_criterion_5_heavy_hitters(acceptance_log):
    eps_hh = 0.5
    cfg = ExperimentConfig(task="heavy_hitters", n=1024, eps_hh=eps_hh, seeds=SEEDS, master_seed=0,
                           hh_operator="exact")
    records = run_batch(cfg)
    planted_ok = sum(r.extra["contains_planted"] and r.extra["light_excluded"] for r in records)

    # exact-oracle margins: (S_i^2 - X^2) / (eps^2 X^2) = |x_i| / (eps X) + 1/4 with X = ||x||
    rng = np.random.default_rng(2024)
    heavy_min, light_max, split_ok = math.inf, -math.inf, 0
    for _ in range(1000):
        n = int(rng.integers(16, 257))
        x = rng.integers(-20, 21, size=n).astype(np.int64)
        for _ in range(int(rng.integers(0, 4))):
            x[int(rng.integers(n))] = int(rng.integers(-400, 401))
        if not x.any():
            x[0] = 1
        X = math.sqrt(float(x @ x))
        S2, T2 = probe_margins(x, eps_hh)
        margin = (np.maximum(S2, T2) - X * X) / (eps_hh**2 * X * X)
        oracle = np.abs(x) / (eps_hh * X) + 0.25
        assert np.allclose(margin, oracle, rtol=1e-9, atol=1e-9)
        heavy = np.abs(x) >= eps_hh * X
        light = np.abs(x) <= 0.5 * eps_hh * X
        if heavy.any():
            heavy_min = min(heavy_min, float(margin[heavy].min()))
        if light.any():
            light_max = max(light_max, float(margin[light].max()))
        hits = classify(S2, T2, X, eps_hh)
        split_ok += ({int(i) + 1 for i in np.flatnonzero(heavy)} <= hits
                     and hits.isdisjoint({int(i) + 1 for i in np.flatnonzero(light)}))
    gap_ok = heavy_min >= 1.25 * (1 - 1e-12) and light_max <= 0.8525 and light_max < THRESHOLD < heavy_min
    ok = planted_ok == 100 and gap_ok and split_ok == 1000
    acceptance_log(5, ok, f"planted recovered {planted_ok}/100; exact margins heavy >= {heavy_min:.4f}, "
                          f"light <= {light_max:.4f} (units eps^2 X^2, threshold {THRESHOLD}); "
                          f"classification correct on {split_ok}/1000 vectors")
    assert ok


def test_criterion_6_triangle_framework(acceptance_log):
    cfg = ExperimentConfig(task="tri", n=1024, m=10_000, eps=EPS, seeds=SEEDS, master_seed=0,
                           adversary="deletion_heavy", family="lp_p", p=1.0, kappa=4.0, C=2.0,
                           operator="oracle", write_transcripts=False)
    records = run_batch(cfg)
    good = 0
    resets = []
    for r in records:
        resets.append(sum(r.iterate_updates))
        good += (r.failure is None and r.break_time is None and r.violations == 0
                 and r.max_update_count <= r.L_max)
    min_ratio = min(r.extra["min_ratio"] for r in records)
    max_ratio = max(r.extra["max_ratio"] for r in records)
    ok = good == 100
    acceptance_log(6, ok, f"{good}/100 runs inside [F, 4^10 F] with every reset contracting by 2/3 "
                          f"and per-node resets <= {records[0].L_max} (output/F in "
                          f"[{min_ratio:.3f}, {max_ratio:.3f}], resets per run {min(resets)}-{max(resets)})")
    assert ok


def test_criterion_7_loss_catalogue(acceptance_log):
    rows = tri_check_suite(samples=10_000, seed=0)
    families = {label.split("(")[0] for _, label, _, _ in rows}
    derivative = [r for r in rows if r[0] == "bernstein_derivative"]
    failed = [f"{c} {label}" for c, label, ok, _ in rows if not ok]
    ok = not failed and families == set(FAMILIES) and len(derivative) == 5
    acceptance_log(7, ok, f"{len(rows) - len(failed)}/{len(rows)} checks pass over {len(families)} families"
                          + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert ok


def test_criterion_8_space_scaling(acceptance_log):
    cfg = ExperimentConfig(task="f2", n=1024, m=20000, eps=EPS, master_seed=0)
    rows = space_sweep(cfg, [2**10, 2**12, 2**14])
    growth = rows[-1]["peak_words"] / rows[0]["peak_words"]
    ok = growth <= 3.0
    words = ", ".join(f"n={r['n']}: {r['peak_words']}" for r in rows)
    acceptance_log(8, ok, f"peak words {words}; growth {growth:.3f}x (limit 3x)")
    assert ok


def test_criterion_9_determinism(oblivious_batch, tmp_path_factory, acceptance_log):
    _, first, _ = oblivious_batch
    second = tmp_path_factory.mktemp("oblivious_b")
    run_batch(f2_config("oblivious_random"), second)
    names = sorted(p.name for p in first.iterdir())
    same = [n for n in names if (first / n).read_bytes() == (second / n).read_bytes()]
    ok = len(names) == 101 and len(same) == len(names) and \
        sorted(p.name for p in second.iterdir()) == names
    acceptance_log(9, ok, f"{len(same)}/{len(names)} CSV files byte-identical on rerun")
    assert ok
