"""Robust estimation for symmetric functions with an approximate triangle inequality.

The tree mirrors the F2 estimator: a node at level i with prefix w keeps an
iterate u, estimates P = F(w - u), takes Q from its child (or F(u + c)
directly at level 1) and checks P + Q against kappa^(3i) A with
A ~ F(w + c).  A rejection resets u to -c, so F(w - u) becomes F(w + c).
Because every iterate is a negated content snapshot, no coefficient ledger
is needed: each image is a difference of running sketch states.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core_types import DELTA_MAX, IterateCapExceeded, Role, SeedPath, StreamOverrun, derive_seed
from .sketch import CauchyOperator, ExactOperator, l1_rows

# ---------------------------------------------------------------- loss catalogue

FAMILIES = ("lp_p", "pseudo_huber", "cauchy_loss", "charbonnier", "welsch", "geman_mcclure")
BERNSTEIN_FAMILIES = FAMILIES[1:]


@dataclass(frozen=True)
class LossSpec:
    """One loss family with its shape parameter.

    ``tau`` is the scale for the Bernstein-composed families, ``p`` the
    exponent of lp_p and ``power`` the Charbonnier exponent in (0, 1].
    """

    family: str
    tau: float = 1.0
    p: float = 1.0
    power: float = 0.5

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown loss family {self.family!r}")
        if self.family == "lp_p":
            if not self.p >= 0:
                raise ValueError(f"p={self.p} must be >= 0")
        elif not self.tau > 0:
            raise ValueError(f"tau={self.tau} must be > 0")
        if self.family == "charbonnier" and not 0 < self.power <= 1:
            raise ValueError(f"charbonnier power={self.power} outside (0, 1]")

    @property
    def beta(self) -> float:
        if self.family == "lp_p":
            return 1.0 if self.p <= 1 else 2.0 ** (self.p - 1)
        return 2.0

    @property
    def bernstein(self) -> bool:
        return self.family in BERNSTEIN_FAMILIES

    @property
    def label(self) -> str:
        if self.family == "lp_p":
            return f"lp_p(p={self.p:g})"
        if self.family == "charbonnier":
            return f"charbonnier(tau={self.tau:g},power={self.power:g})"
        return f"{self.family}(tau={self.tau:g})"


def eval_loss(spec: LossSpec, x):
    """g(x) elementwise; g(0) = 0 for every family."""
    x = np.asarray(x, dtype=np.float64)
    fam, tau = spec.family, spec.tau
    if fam == "lp_p":
        if spec.p == 0:
            return (x != 0).astype(np.float64)
        return np.abs(x) ** spec.p
    t = x * x
    return bernstein_f(spec, t)


def bernstein_f(spec: LossSpec, t):
    """f with g(x) = f(x^2), for the Bernstein-composed families."""
    t = np.asarray(t, dtype=np.float64)
    fam, tau = spec.family, spec.tau
    if fam == "pseudo_huber":
        # tau*(sqrt(1+t/tau^2)-1), written to avoid cancellation near 0
        s = t / (tau * tau)
        return tau * s / (np.sqrt(1.0 + s) + 1.0)
    if fam == "cauchy_loss":
        return np.log1p(t / tau)
    if fam == "charbonnier":
        return np.expm1(spec.power * np.log1p(t / tau))
    if fam == "welsch":
        return -np.expm1(-t / tau)
    if fam == "geman_mcclure":
        return t / (t + tau)
    if fam == "lp_p":
        return t ** (spec.p / 2.0)
    raise ValueError(f"{fam} is not Bernstein-composed")


@dataclass
class BetaReport:
    label: str
    beta: float
    samples: int
    worst_ratio: float
    worst_pair: tuple
    worst_vector_ratio: float
    symmetric: bool
    passed: bool


def _sample_scalars(rng: np.random.Generator, k: int, scale: float) -> np.ndarray:
    mags = scale * 10.0 ** rng.uniform(-3, 3, size=k)
    return mags * rng.choice([-1.0, 1.0], size=k)


def check_beta_triangle(spec: LossSpec, samples: int = 10_000, seed: int = 0,
                        rtol: float = 1e-12, dim: int = 16) -> BetaReport:
    """Sample pairs and check g(a+b) <= beta (g(a) + g(b)), pointwise and summed.

    A quarter of the scalar pairs use a = b, the tight case for the power
    families.  Vector pairs of length ``dim`` check the summed form.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    scale = spec.tau if spec.family != "lp_p" else 1.0
    a = _sample_scalars(rng, samples, scale)
    b = _sample_scalars(rng, samples, scale)
    tight = rng.random(samples) < 0.25
    b[tight] = a[tight]
    beta = spec.beta
    lhs = eval_loss(spec, a + b)
    rhs = eval_loss(spec, a) + eval_loss(spec, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(rhs > 0, lhs / rhs, 0.0)
    k = int(np.argmax(ratio))
    ok = bool(np.all(lhs <= beta * rhs * (1.0 + rtol)))
    va = _sample_scalars(rng, samples * dim, scale).reshape(samples, dim)
    vb = _sample_scalars(rng, samples * dim, scale).reshape(samples, dim)
    vl = eval_loss(spec, va + vb).sum(axis=1)
    vr = eval_loss(spec, va).sum(axis=1) + eval_loss(spec, vb).sum(axis=1)
    ok &= bool(np.all(vl <= beta * vr * (1.0 + rtol)))
    vratio = float(np.max(vl / vr))
    sym = bool(np.array_equal(eval_loss(spec, a), eval_loss(spec, -a)))
    return BetaReport(spec.label, beta, samples, float(ratio[k]), (float(a[k]), float(b[k])),
                      vratio, sym, ok and sym)


@dataclass
class DerivativeReport:
    label: str
    grid_points: int
    monotone_ok: bool
    concave_ok: bool
    slow_jumping_ok: bool
    predictable_ok: bool
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.monotone_ok and self.concave_ok and self.slow_jumping_ok and self.predictable_ok


def check_bernstein_derivative(spec: LossSpec, grid: np.ndarray | None = None, *,
                               f: Callable | None = None, rel_step: float = 1e-3,
                               tol: float = 1e-6, eps: float = 0.1, pairs: int = 2000,
                               seed: int = 0) -> DerivativeReport:
    """Numerical checks of f' >= 0, f'' <= 0 and the growth conditions of g.

    With central differences d1 = f(t+h) - f(t-h) and d2 = f(t+h) - 2 f(t) + f(t-h),
    monotone means d1 >= -r and concave means d2 <= tol |d1| + r, where
    r = 1e-12 (1 + |f(t)|) absorbs rounding.
    Slow jumping checks g(y) <= (y/x)^2 g(x) for x < y; predictability checks,
    with h = ceil(3/eps) and 0 < y <= x/h, that |g(x+y) - g(x)| <= eps g(x)
    or g(y) >= g(x)/h.
    """
    if f is None:
        if not spec.bernstein and not (spec.family == "lp_p" and spec.p <= 2):
            raise ValueError(f"{spec.label} is not Bernstein-composed")
        f = lambda t: bernstein_f(spec, t)  # noqa: E731
    g = lambda x: f(np.asarray(x, dtype=np.float64) ** 2)  # noqa: E731
    scale = spec.tau if spec.family != "lp_p" else 1.0
    if grid is None:
        grid = np.geomspace(1e-3, 1e3, 100) * scale
    t = np.asarray(grid, dtype=np.float64)
    h = rel_step * t
    f0, fp, fm = f(t), f(t + h), f(t - h)
    noise = 1e-12 * (1.0 + np.abs(f0))
    d1 = fp - fm
    d2 = fp - 2.0 * f0 + fm
    failures = []
    mono = d1 >= -noise
    conc = d2 <= tol * np.abs(d1) + noise
    for i in np.flatnonzero(~mono):
        failures.append(("monotone", float(t[i]), float(d1[i])))
    for i in np.flatnonzero(~conc):
        failures.append(("concave", float(t[i]), float(d2[i])))

    rng = np.random.default_rng(seed)
    lo, hi = math.log10(1e-3 * scale), math.log10(1e3 * scale)
    x = 10.0 ** rng.uniform(lo, hi, size=pairs)
    y = x * 10.0 ** rng.uniform(0.0, 3.0, size=pairs)
    gx, gy = g(x), g(y)
    jump = gy <= (y / x) ** 2 * gx * (1.0 + 1e-12)
    for i in np.flatnonzero(~jump)[:5]:
        failures.append(("slow_jumping", float(x[i]), float(y[i])))

    hx = math.ceil(3.0 / eps)
    yp = x / hx * rng.uniform(1e-6, 1.0, size=pairs)
    gxy = g(x + yp)
    near = np.abs(gxy - gx) <= eps * gx * (1.0 + 1e-12)
    heavy = g(yp) >= gx / hx
    pred = near | heavy
    for i in np.flatnonzero(~pred)[:5]:
        failures.append(("predictable", float(x[i]), float(yp[i])))
    return DerivativeReport(spec.label, int(t.size), bool(mono.all()), bool(conc.all()),
                            bool(jump.all()), bool(pred.all()), failures)


# ---------------------------------------------------------------- functions and sizing


@dataclass
class TriFunction:
    name: str
    beta: float
    loss: LossSpec
    value_floor: float = 0.0
    value_cap: float = math.inf

    def eval(self, v) -> float:
        return float(np.sum(eval_loss(self.loss, v)))


def tri_function(loss: LossSpec | str, n: int, m: int, delta_max: int = DELTA_MAX) -> TriFunction:
    """Wrap a loss as F(x) = sum_i g(x_i) with the default admissible range."""
    if isinstance(loss, str):
        loss = LossSpec(loss)
    floor = 1.0 / (n * m)
    cap = float(n) * m * float(delta_max) ** 2
    return TriFunction(loss.label, loss.beta, loss, floor, cap)


def l1_function(n: int, m: int, delta_max: int = DELTA_MAX) -> TriFunction:
    return tri_function(LossSpec("lp_p", p=1.0), n, m, delta_max)


@dataclass(frozen=True)
class TriParams:
    n: int
    m: int
    C: float
    H: int
    B: int
    kappa: float
    beta: float
    L_max_tri: int
    value_floor: float
    value_cap: float

    @property
    def contraction(self) -> float:
        return (self.beta + 1.0) / (self.kappa - self.beta)

    @property
    def envelope(self) -> float:
        return self.kappa ** (3 * self.H + 1)


def reset_bound(value_floor: float, value_cap: float, kappa: float, beta: float) -> int:
    """ceil(log(cap/floor) / log((kappa-beta)/(beta+1)))."""
    return math.ceil(math.log(value_cap / value_floor) / math.log((kappa - beta) / (beta + 1.0)))


def tri_params(n: int, m: int, beta: float, C: float = 2.0, kappa: float | None = None,
               H: int | None = None, value_floor: float | None = None,
               value_cap: float | None = None, delta_max: int = DELTA_MAX) -> TriParams:
    if C <= 1:
        raise ValueError(f"C={C} must exceed 1")
    kappa = 2.0 * beta + 2.0 if kappa is None else float(kappa)
    if not kappa > 2.0 * beta + 1.0:
        raise ValueError(f"kappa={kappa} must exceed 2*beta+1={2 * beta + 1}")
    B = max(2, math.ceil(n ** (1.0 / C) - 1e-9))
    if H is None:
        H = 1
        while B**H < m:
            H += 1
    elif B**H < m:
        raise ValueError(f"B^H = {B}^{H} < m = {m}")
    floor = 1.0 / (n * m) if value_floor is None else value_floor
    cap = float(n) * m * float(delta_max) ** 2 if value_cap is None else value_cap
    return TriParams(n, m, C, H, B, kappa, beta, reset_bound(floor, cap, kappa, beta), floor, cap)


# ---------------------------------------------------------------- estimator


class _ScaledCauchy:
    """Cauchy operator whose estimate is inflated by (1 + acc), making errors one-sided."""

    def __init__(self, op: CauchyOperator, acc: float):
        self.op = op
        self.factor = 1.0 + acc
        self.dim = op.dim

    def zeros(self):
        return self.op.zeros()

    def add(self, state, a, delta):
        self.op.add(state, a, delta)

    def estimate(self, state) -> float:
        return self.factor * self.op.estimate(state)


@dataclass
class TriResetEvent:
    t: int
    level: int
    ordinal: int
    P: float
    Q: float
    A: float
    f_old: float | None = None
    f_new: float | None = None
    bound: float = 0.0

    @property
    def contraction_ok(self) -> bool | None:
        if self.f_old is None:
            return None
        return self.f_new <= self.bound * self.f_old * (1.0 + 1e-12) + 1e-12


@dataclass
class TriLevelReport:
    level: int
    P: float
    Q: float
    A: float
    accepted: bool
    output: float


class _TriScope:
    def __init__(self, est, cor):
        self.est = est
        self.cor = cor
        self.run_est = est.zeros()
        self.run_cor = cor.zeros()

    def absorb(self, a: int, delta: int) -> None:
        self.est.add(self.run_est, a, delta)
        self.cor.add(self.run_cor, a, delta)


class _TriNode:
    def __init__(self, level: int, ordinal: int):
        self.level = level
        self.ordinal = ordinal
        self.children_completed = 0
        self.resets = 0
        self.w_est = None
        self.base_cor = None
        self.spawn_est = None
        self.u_est = None
        self.u_child_est = None
        self.u_child_cor = None
        self.w_ref = None
        self.u_ref = None
        self.x_spawn = None


class TriEstimator:
    """Robust estimator for a TriFunction.

    operator="oracle" evaluates F exactly on every image; operator="cauchy"
    uses Cauchy sketches and is only valid for F = L1.
    """

    def __init__(self, fn: TriFunction, params: TriParams, seed: int | SeedPath = 0,
                 operator: str = "oracle", reference: bool = True,
                 cauchy_acc: float = 0.1, cauchy_delta: float = 0.01):
        if operator not in ("oracle", "cauchy"):
            raise ValueError(f"unknown operator {operator!r}")
        if operator == "cauchy" and not (fn.loss.family == "lp_p" and fn.loss.p == 1.0):
            raise ValueError("the Cauchy operator only sketches L1")
        self.fn = fn
        self.params = params
        self.seed = seed if isinstance(seed, SeedPath) else SeedPath(int(seed))
        self.operator = operator
        self.reference = reference
        self.cauchy_rows = l1_rows(1.0 + cauchy_acc, cauchy_delta)
        self.cauchy_acc = cauchy_acc
        H = params.H
        self.t = 0
        self.last_estimate = 0.0
        self.last_reports: list[TriLevelReport] = []
        self.events: list[TriResetEvent] = []
        self.resets = [0] * (H + 1)
        self.max_node_resets = [0] * (H + 1)
        self.violations = 0
        self.spawns = [0] * (H + 2)
        self.scopes: list[_TriScope | None] = [None] * (H + 1)
        self.nodes: list[_TriNode | None] = [None] * (H + 1)
        self.x = np.zeros(params.n) if reference else None
        self._build_root()

    def _operator(self, level: int, ordinal: int, role: Role):
        if self.operator == "oracle":
            return ExactOperator(self.params.n, self.fn.eval)
        seed = derive_seed(self.seed, level, ordinal, role)
        return _ScaledCauchy(CauchyOperator(seed, self.params.n, self.cauchy_rows), self.cauchy_acc)

    def _open_scope(self, level: int, host_ordinal: int) -> None:
        self.scopes[level] = _TriScope(self._operator(level, host_ordinal, Role.ESTIMATOR),
                                       self._operator(level, host_ordinal, Role.CORRECTOR))

    def _build_root(self) -> None:
        H = self.params.H
        self._open_scope(H, 0)
        scope = self.scopes[H]
        root = _TriNode(H, 0)
        root.w_est = scope.est.zeros()
        root.base_cor = scope.cor.zeros()
        root.spawn_est = scope.est.zeros()
        root.u_est = scope.est.zeros()
        if self.reference:
            root.w_ref = np.zeros(self.params.n)
            root.u_ref = np.zeros(self.params.n)
            root.x_spawn = np.zeros(self.params.n)
        self.nodes[H] = root
        self.spawns[H] = 1
        self._open_children(root)

    def _open_children(self, node: _TriNode) -> None:
        """Fresh matrices for the level below ``node`` and a fresh child subtree."""
        level = node.level
        if level == 1:
            return
        self._open_scope(level - 1, node.ordinal)
        node.u_child_est = self.scopes[level - 1].est.zeros()
        node.u_child_cor = self.scopes[level - 1].cor.zeros()
        self._spawn(level - 1, node)

    def _spawn(self, level: int, parent: _TriNode) -> None:
        """Start a node at ``level`` whose prefix is the parent's u + c."""
        scope = self.scopes[level]
        node = _TriNode(level, self.spawns[level])
        self.spawns[level] += 1
        node.w_est = parent.u_child_est + scope.run_est
        node.base_cor = parent.u_child_cor.copy()
        node.spawn_est = scope.run_est.copy()
        node.u_est = scope.est.zeros()
        if self.reference:
            node.w_ref = parent.u_ref + (self.x - parent.x_spawn)
            node.u_ref = np.zeros(self.params.n)
            node.x_spawn = self.x.copy()
        self.nodes[level] = node
        self._open_children(node)

    def process(self, a: int, delta: int) -> float:
        p = self.params
        if self.t >= p.m:
            raise StreamOverrun(f"update {self.t + 1} beyond m={p.m}")
        if not 1 <= a <= p.n:
            raise IndexError(f"coordinate {a} outside [1, {p.n}]")
        self.t += 1
        for level in range(1, p.H + 1):
            self.scopes[level].absorb(a, delta)
        if self.reference:
            self.x[a - 1] += delta
        self.last_estimate = self._evaluate()
        self._advance()
        return self.last_estimate

    def _evaluate(self) -> float:
        p = self.params
        out = 0.0
        reports = []
        for level in range(1, p.H + 1):
            node = self.nodes[level]
            scope = self.scopes[level]
            P = scope.est.estimate(node.w_est - node.u_est)
            if level == 1:
                Q = scope.est.estimate(node.u_est + scope.run_est - node.spawn_est)
            else:
                Q = out
            A = scope.cor.estimate(node.base_cor + scope.run_cor)
            accepted = P + Q <= p.kappa ** (3 * level) * A
            out = P + Q if accepted else A
            reports.append(TriLevelReport(level, P, Q, A, accepted, out))
            if not accepted:
                self._reset(node, P, Q, A)
        self.last_reports = reports
        return out

    def _reset(self, node: _TriNode, P: float, Q: float, A: float) -> None:
        """u <- -c in every tracked space; respawn the child subtree."""
        p = self.params
        level = node.level
        scope = self.scopes[level]
        event = TriResetEvent(self.t, level, node.ordinal, P, Q, A, bound=p.contraction)
        if self.reference:
            c_ref = self.x - node.x_spawn
            event.f_old = self.fn.eval(node.w_ref - node.u_ref)
            node.u_ref = -c_ref
            event.f_new = self.fn.eval(node.w_ref - node.u_ref)
            if not event.contraction_ok:
                self.violations += 1
        node.u_est = -(scope.run_est - node.spawn_est)
        node.resets += 1
        self.resets[level] += 1
        self.max_node_resets[level] = max(self.max_node_resets[level], node.resets)
        self.events.append(event)
        if node.resets > p.L_max_tri:
            raise IterateCapExceeded(
                f"tri node ({level}, {node.ordinal}) reset {node.resets} times, cap {p.L_max_tri}")
        if level > 1:
            child_scope = self.scopes[level - 1]
            node.u_child_est = -child_scope.run_est
            node.u_child_cor = -child_scope.run_cor
            self._spawn(level - 1, node)

    def _advance(self) -> None:
        p = self.params
        self.nodes[1].children_completed += 1
        level = 1
        while level < p.H and self.nodes[level].children_completed >= p.B:
            self.nodes[level + 1].children_completed += 1
            level += 1
        if level > 1 and self.t < p.m:
            self._spawn(level - 1, self.nodes[level])

    def flags(self) -> str:
        return "".join("." if r.accepted else "r" for r in self.last_reports)

    def envelope_ok(self, rtol: float = 1e-9) -> bool | None:
        if not self.reference:
            return None
        truth = self.fn.eval(self.x)
        est = self.last_estimate
        return truth * (1.0 - rtol) - 1e-12 <= est <= self.params.envelope * truth * (1.0 + rtol) + 1e-12
