import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from robuststream.heavy_hitters import (
    THRESHOLD,
    ExactF2,
    ProbeError,
    classify,
    find_heavy,
    find_heavy_lp,
    probe_margins,
    probe_step,
    updates_per_report,
)
from robuststream.robust_f2 import TreeState, size_parameters


def exact_responder(x):
    r = ExactF2(len(x))
    for i, v in enumerate(x, 1):
        if v:
            r.process(i, int(v))
    return r


def test_point_mass_probe_arithmetic():
    x = np.zeros(4, dtype=np.int64)
    x[0] = 10
    S2, T2 = probe_margins(x, 0.5)
    assert S2[0] == 156.25
    assert S2[0] - 100 == 56.25
    assert THRESHOLD * 0.25 * 100 == pytest.approx(28.75)
    assert classify(S2, T2, 10.0, 0.5) == {1}


def test_flat_vector_probe_arithmetic():
    x = np.ones(100)
    S2, T2 = probe_margins(x, 0.5)
    assert np.allclose(S2, 111.25)
    assert np.allclose(S2 - 100, 11.25)
    assert classify(S2, T2, 10.0, 0.5) == set()


def test_find_heavy_on_point_mass_with_exact_responder():
    r = exact_responder([10, 0, 0, 0])
    rep = find_heavy(r, 0.5)
    assert rep.hits == {1}
    # v = round(2.5) rounds half up to 3 on the integer grid
    assert rep.probe_size == 3
    assert rep.S2[0] == 169.0 and rep.T2[0] == 49.0


def test_find_heavy_restores_the_stream_and_counts_queries():
    x = [3, -7, 0, 12, 1]
    r = exact_responder(x)
    t0 = r.t
    rep = find_heavy(r, 0.5)
    assert r.x.tolist() == x
    assert r.t - t0 == updates_per_report(5) == 15
    assert rep.queries == 2 * 5


def test_zero_vector_returns_empty():
    rep = find_heavy(ExactF2(8), 0.5)
    assert rep.hits == set()
    assert rep.queries == 0
    assert find_heavy_lp(ExactF2(8), 0.5, 0.5).hits == set()


def test_probe_errors():
    with pytest.raises(ProbeError):
        probe_step(0.5, 3.0)
    assert probe_step(0.5, 10.0) == 3
    assert probe_step(0.5, 12.0) == 3
    r = exact_responder([2**20, 0])
    with pytest.raises(ProbeError):
        find_heavy(r, 0.5, delta_max=2**10)
    with pytest.raises(ValueError):
        find_heavy(r, 1.5)
    with pytest.raises(ValueError):
        find_heavy_lp(r, 0.5, 3.0)


def test_lp_variant_is_l2_report():
    rng = np.random.default_rng(0)
    x = rng.integers(-1, 2, size=50)
    x[0] = 10
    a = find_heavy(exact_responder(x), 0.5)
    b = find_heavy_lp(exact_responder(x), 0.5, 2.0)
    c = find_heavy_lp(exact_responder(x), 0.5, 1.0)
    assert a.hits == b.hits == c.hits
    assert 1 in c.hits


def test_rows_report_margins():
    rep = find_heavy(exact_responder([10, 1, 0]), 0.5)
    rows = rep.rows()
    assert [r[1] for r in rows] == sorted(rep.hits)
    t, i, s2, t2, margin = rows[0]
    assert margin == max(s2, t2) - rep.X**2


@given(st.lists(st.integers(-1000, 1000), min_size=2, max_size=40),
       st.sampled_from([0.2, 0.3, 0.5, 0.7]))
def test_margin_gap_with_exact_norm(xs, eps_hh):
    # exact rational check of the margin rule with X = ||x||_2 and real-valued probes
    x = np.array(xs, dtype=np.float64)
    if not x.any():
        return
    X = math.sqrt(float(x @ x))
    S2, T2 = probe_margins(x, eps_hh)
    margin = np.maximum(S2, T2) - X * X
    unit = eps_hh * eps_hh * X * X
    heavy = np.abs(x) >= eps_hh * X
    light = np.abs(x) <= 0.5 * eps_hh * X
    assert (margin[heavy] >= 1.25 * unit * (1 - 1e-12)).all()
    assert (margin[light] <= 0.5 * unit * (1 + 1e-12) + 0.25 * unit).all()
    hits = classify(S2, T2, X, eps_hh)
    assert {int(i) + 1 for i in np.flatnonzero(heavy)} <= hits
    assert hits.isdisjoint({int(i) + 1 for i in np.flatnonzero(light)})


def test_sketched_tree_finds_point_mass():
    n = 32
    params = size_parameters(n, n + updates_per_report(n), 0.5**2 / 50, memory_cap=2**40)
    st_ = TreeState(params, 4, operator="exact")
    x = np.ones(n, dtype=np.int64) * 2
    x[6] = 40
    for i in range(n):
        st_.process(i + 1, int(x[i]))
    rep = find_heavy(st_, 0.5)
    assert rep.hits == {7}
