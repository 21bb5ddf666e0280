import csv
import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from robuststream.adversary import (
    STRATEGIES,
    AlignmentAttack,
    DeletionHeavy,
    GameTranscript,
    GramAttack,
    NaiveMeanAMS,
    ObliviousRandom,
    TranscriptView,
    ZeroStream,
    alignment_attack,
    gram_attack,
    gram_probe_budget,
    integer_kernel_vector,
    run_game,
)
from robuststream.heavy_hitters import ExactF2
from robuststream.robust_f2 import TreeState, size_parameters


def test_naive_baseline_answers_raw_mean():
    nv = NaiveMeanAMS(16, 8, seed=3)
    x = np.zeros(16)
    for a, d in [(1, 3), (5, -2), (16, 7)]:
        r = nv.process(a, d)
        x[a - 1] += d
    assert r * 8 == pytest.approx(float(x @ nv.gram() @ x), abs=1e-9)
    assert r * 8 == round(r * 8)


def test_zero_budget_gives_empty_transcript():
    tr = run_game(ExactF2(8), ObliviousRandom(8, 0), 0)
    assert tr.updates == [] and tr.responses == []
    assert tr.max_rel_err is None and tr.break_time is None and not tr.broken
    tr = alignment_attack(ExactF2(8), 8, 0)
    assert tr.updates == [] and tr.max_rel_err is None


def test_zero_delta_stream_stays_at_zero():
    st_ = TreeState(size_parameters(32, 100, 0.2), 1)
    tr = run_game(st_, ZeroStream(32, 0), 100)
    assert all(u.delta == 0 for u in tr.updates)
    assert max(tr.responses) <= 0.2
    assert tr.max_rel_err <= 0.2


def test_exact_responder_has_no_error():
    tr = run_game(ExactF2(16), ObliviousRandom(16, 2), 300)
    assert tr.max_rel_err == 0.0
    assert tr.truths[-1] == tr.responses[-1]


def test_custom_truth_function():
    tr = run_game(ExactF2(4), ObliviousRandom(4, 5), 20, truth=lambda x: float(np.abs(x).sum()))
    assert tr.truths[-1] == float(np.abs(np.bincount([u.a - 1 for u in tr.updates],
                                                     weights=[u.delta for u in tr.updates],
                                                     minlength=4)).sum())


@given(st.integers(0, 10**6))
def test_oblivious_strategy_respects_bounds(seed):
    s = ObliviousRandom(10, seed, max_delta=3)
    view = TranscriptView(10, [], [])
    for _ in range(50):
        a, d = s.next(view)
        assert 1 <= a <= 10 and abs(d) <= 3


@given(st.integers(0, 10**6))
def test_deletion_heavy_tracks_its_own_vector(seed):
    s = DeletionHeavy(6, seed, max_delta=5)
    view = TranscriptView(6, [], [])
    x = np.zeros(6, dtype=np.int64)
    for _ in range(100):
        a, d = s.next(view)
        assert 1 <= a <= 6 and abs(d) <= 5
        x[a - 1] += d
    assert np.array_equal(x, s.x)


def test_strategies_are_deterministic():
    for name in ("oblivious_random", "deletion_heavy"):
        a = run_game(ExactF2(32), STRATEGIES[name](32, 9), 200)
        b = run_game(ExactF2(32), STRATEGIES[name](32, 9), 200)
        assert a.to_csv() == b.to_csv()


def test_transcript_csv_and_replay_round_trip():
    st_ = TreeState(size_parameters(32, 60, 0.2), 4)
    tr = run_game(st_, ObliviousRandom(32, 4), 60)
    rows = list(csv.reader(io.StringIO(tr.to_csv())))
    assert rows[0] == ["t", "a", "delta", "response", "truth", "flags"]
    assert len(rows) == 61
    assert float(rows[5][3]) == tr.responses[4]
    back = GameTranscript.from_replay(tr.to_replay())
    assert back.updates == tr.updates
    assert back.responses == tr.responses
    assert back.truths == tr.truths
    assert back.flags == tr.flags
    with pytest.raises(ValueError):
        GameTranscript.from_replay(b"NOPE" + tr.to_replay()[4:])


def test_algorithm_abort_is_recorded_as_failure():
    p = size_parameters(8, 5, 0.2)
    tr = run_game(TreeState(p, 0, operator="exact"), ObliviousRandom(8, 0), 10)
    assert tr.failure is not None and "StreamOverrun" in tr.failure
    assert len(tr.updates) == 5 and tr.broken


def test_integer_kernel_vector_exact():
    G = [[2, 1, 3], [1, 1, 2], [3, 2, 5]]
    u = integer_kernel_vector(G)
    assert u is not None and any(u)
    assert all(sum(r[j] * u[j] for j in range(3)) == 0 for r in G)
    assert integer_kernel_vector([[2, 0], [0, 3]]) is None


@given(st.integers(0, 10**6))
def test_integer_kernel_of_low_rank_gram(seed):
    rng = np.random.default_rng(seed)
    A = rng.choice([-1, 1], size=(4, 7))
    G = (A.T @ A).tolist()
    u = integer_kernel_vector(G)
    assert u is not None and any(u)
    assert not (np.array(G, dtype=object) @ np.array(u, dtype=object)).any()


def test_gram_attack_breaks_naive_baseline():
    n, k = 16, 8
    nv = NaiveMeanAMS(n, k, seed=1)
    cert, tr = gram_attack(nv, n, k, M=1000)
    assert cert.feasible
    assert cert.probe_rounds <= n + n * (n - 1) // 2
    assert cert.ratio <= 1e-2
    assert cert.true >= 1000**2 / 2
    assert tr.break_time is not None
    assert len(tr.updates) <= gram_probe_budget(n)


def test_gram_reconstruction_is_exact():
    nv = NaiveMeanAMS(10, 4, seed=2)
    strat = GramAttack(10, 4)
    run_game(nv, strat, gram_probe_budget(10))
    assert np.array_equal(strat.gram, nv.gram().astype(float))


def test_gram_attack_infeasible_when_k_at_least_n():
    cert, _ = gram_attack(NaiveMeanAMS(8, 64, seed=0), 8, 64)
    assert not cert.feasible
    assert cert.ratio is None
    assert cert.diagnostics["rank_deficient"] is False


def test_alignment_attack_breaks_naive_baseline():
    tr = alignment_attack(NaiveMeanAMS(64, 8, seed=0), 64, 3000, seed=1)
    assert tr.break_time is not None


def test_alignment_attack_reads_shadow():
    assert AlignmentAttack.reads_shadow
    st_ = TreeState(size_parameters(64, 600, 0.2, mode="reference"), 2)
    tr = alignment_attack(st_, 64, 600, seed=2)
    assert tr.failure is None
    assert st_.violations == 0
