"""L2 heavy hitters by deterministic coordinate probing of a robust F2 estimator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core_types import DELTA_MAX

THRESHOLD = 1.15
FLOOR = 1.0


class ProbeError(ValueError):
    """A probe cannot be placed on the integer grid or exceeds the delta bound."""


@dataclass
class HeavyHitterReport:
    t: int
    eps_hh: float
    hits: set = field(default_factory=set)
    X: float = 0.0
    S2: np.ndarray | None = None
    T2: np.ndarray | None = None
    probe_size: int = 0
    queries: int = 0

    def margins(self) -> np.ndarray | None:
        if self.S2 is None:
            return None
        X2 = self.X * self.X
        return np.maximum(self.S2 - X2, self.T2 - X2)

    def rows(self) -> list[tuple]:
        """(t, i, S_i^2, T_i^2, margin) for every hit, ascending in i."""
        if self.S2 is None:
            return []
        X2 = self.X * self.X
        out = []
        for i in sorted(self.hits):
            s2, t2 = float(self.S2[i - 1]), float(self.T2[i - 1])
            out.append((self.t, i, s2, t2, max(s2, t2) - X2))
        return out


def probe_step(eps_hh: float, X: float) -> int:
    """Integer probe magnitude round((eps_hh/2) X), halves rounded up."""
    if eps_hh * X < 2.0:
        raise ProbeError(f"eps_hh*X = {eps_hh * X:.4g} < 2: probe too coarse for integer updates")
    return int(math.floor(0.5 * eps_hh * X + 0.5))


def probe_margins(x: np.ndarray, eps_hh: float, X: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Exact real-valued probe values S_i^2 and T_i^2 for a known vector.

    With v_i = (eps_hh/2) X e_i, S_i^2 = ||x + v_i||^2 and T_i^2 = ||x - v_i||^2.
    X defaults to ||x||_2.
    """
    x = np.asarray(x, dtype=np.float64)
    f2 = float(np.dot(x, x))
    if X is None:
        X = math.sqrt(f2)
    v = 0.5 * eps_hh * X
    S2 = f2 + 2.0 * v * x + v * v
    T2 = f2 - 2.0 * v * x + v * v
    return S2, T2


def classify(S2: np.ndarray, T2: np.ndarray, X: float, eps_hh: float) -> set:
    X2 = X * X
    cut = THRESHOLD * eps_hh * eps_hh * X2
    idx = np.flatnonzero((S2 - X2 >= cut) | (T2 - X2 >= cut))
    return {int(i) + 1 for i in idx}


def _current_estimate(state) -> float:
    return float(getattr(state, "last_estimate"))


def find_heavy(state, eps_hh: float, delta_max: int | None = None) -> HeavyHitterReport:
    """Probe every coordinate in ascending order and return the L2 heavy hitters.

    Each coordinate costs three stream updates on ``state``: +v, -2v and the
    restoring +v.  Only the first two responses are queries.
    """
    if not 0 < eps_hh < 1:
        raise ValueError(f"eps_hh={eps_hh} outside (0, 1)")
    params = getattr(state, "params", None)
    n = params.n if params is not None else state.n
    if delta_max is None:
        delta_max = params.delta_max if params is not None else DELTA_MAX
    est = _current_estimate(state)
    X = math.sqrt(max(est, 0.0))
    report = HeavyHitterReport(t=int(getattr(state, "t", 0)), eps_hh=eps_hh, X=X)
    if X <= FLOOR:
        return report
    v = probe_step(eps_hh, X)
    if 2 * v > delta_max:
        raise ProbeError(f"probe of size 2*{v} exceeds delta_max={delta_max}")
    S2 = np.empty(n)
    T2 = np.empty(n)
    for i in range(1, n + 1):
        S2[i - 1] = state.process(i, v)
        T2[i - 1] = state.process(i, -2 * v)
        state.process(i, v)
    report.S2 = S2
    report.T2 = T2
    report.probe_size = v
    report.queries = 2 * n
    report.hits = classify(S2, T2, X, eps_hh)
    return report


def find_heavy_lp(state, eps_hh: float, p: float) -> HeavyHitterReport:
    """L_p heavy hitters for p in (0, 2]: the L2 hit set already contains them."""
    if not 0 < p <= 2:
        raise ValueError(f"p={p} outside (0, 2]")
    return find_heavy(state, eps_hh)


def updates_per_report(n: int) -> int:
    return 3 * n


class ExactF2:
    """Exact F2 responder with the estimator interface, for oracle checks."""

    def __init__(self, n: int):
        self.n = n
        self.x = np.zeros(n, dtype=np.int64)
        self.t = 0
        self.last_estimate = 0.0

    def process(self, a: int, delta: int) -> float:
        self.t += 1
        self.x[a - 1] += delta
        self.last_estimate = float(np.dot(self.x, self.x))
        return self.last_estimate
