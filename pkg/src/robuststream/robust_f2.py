"""Adversarially robust F2 estimation over a block tree of the stream.

Tree shape
    Level 1 nodes are single updates.  A level-i node (i >= 2) closes after B
    of its children complete, so it spans B^(i-1) updates when nothing is
    forced.  The root sits at level H+1 and never closes; B^H >= m.

Prefixes and iterates
    Every node N at level i >= 2 is handed a prefix w when it spawns: the
    parent's iterate plus everything the parent absorbed before N started.
    N keeps an iterate u that learns w.  With c the content N absorbed so far,

        P_i = est ||M_i (w - u)||^2        (changes only when u changes)
        Q_i = level i-1 estimate of ||u + c||^2
        A_i = est ||C_i (w + c)||^2        (corrector)

    and the leaf computes Q_1 = est ||M_1 (w_1 + c_1)||^2 directly.  A
    rejection at level i moves u <- u + alpha (u + c) and respawns the child.

Matrices
    M_j and C_j are seeded when the level-(j+1) node that hosts level j
    spawns and ingest everything that node absorbs.  The iterate of a level-i
    node is stored as a coefficient ledger over snapshots of its own content,
    imaged under M_i (for P_i) and under M_{i-1}, C_{i-1} (for the prefix it
    hands to its children).
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core_types import (
    DELTA_MAX,
    IterateCapExceeded,
    Mode,
    Params,
    PrecisionOverflow,
    Role,
    SeedPath,
    SizingError,
    StreamError,
    StreamOverrun,
    Update,
    derive_seed,
)
from .sketch import COLUMN_CACHE_BYTES, MEMORY_CAP_WORDS, ExactOperator, F2Operator, f2_shape

DESK_H = 2
DESK_C_ETA = 6.0
DESK_SKETCH_C = 3.0
DESK_SKETCH_DELTA = 1.0 / 3.0
THEORY_C_ETA = 100.0
SMALLEST_DOUBLE = 5e-324


# ---------------------------------------------------------------- sizing


def min_branching(m: int, H: int) -> int:
    """Smallest B >= 2 with B^H >= m."""
    B = max(2, math.ceil(m ** (1.0 / H)) - 1)
    while B**H < m:
        B += 1
    while B > 2 and (B - 1) ** H >= m:
        B -= 1
    return B


def tree_shape(n: int, m: int, eps: float, c_B: float = 1.0, c_eta: float = THEORY_C_ETA,
               max_height: int = 64) -> tuple[int, int, float]:
    """Joint solution of B = max(2, ceil(c_B ln n / eta^2)), eta = eps/(c_eta H), B^H >= m.

    B grows with H, so B(H)^H is increasing and the smallest H meeting the
    cover condition is the fixed point.
    """
    for H in range(1, max_height + 1):
        eta = eps / (c_eta * H)
        B = max(2, math.ceil(c_B * math.log(n) / eta**2))
        if B**H >= m:
            return B, H, eta
    raise SizingError("no tree height up to the limit covers the stream",
                      {"n": n, "m": m, "eps": eps, "max_height": max_height})


def log2_inv_delta_fail(B: int, L_max: int, n: int, m: int, c_delta: float = 1.0) -> float:
    return c_delta * (B + L_max) * math.log2(n * m)


def size_parameters(n: int, m: int, eps: float, *, profile: str = "desk",
                    c_B: float = 1.0, c_L: float = 1.0, c_delta: float = 1.0,
                    c_eta: float | None = None, H: int | None = None,
                    sketch_c: float = DESK_SKETCH_C, sketch_delta: float = DESK_SKETCH_DELTA,
                    memory_cap: int = MEMORY_CAP_WORDS, mode: Mode | str = Mode.STREAMING,
                    delta_max: int = DELTA_MAX) -> Params:
    """Size the tree and sketches.

    profile="theory" follows the union-bound sizing literally: sketches at
    accuracy eta with failure probability delta_fail.  It exceeds any desk
    memory cap and then raises SizingError with the computed shape attached.

    profile="desk" fixes the height (default 2), takes the smallest B with
    B^H >= m, uses eta = eps/(c_eta H) with c_eta = 6, and sizes every
    sketch at accuracy sketch_c * eta with failure probability sketch_delta.
    delta_fail is still reported from the union-bound formula.
    """
    if not 0 < eps < 1:
        raise SizingError(f"eps={eps} outside (0, 1)")
    if n < 2 or m < 1:
        raise SizingError(f"need n >= 2 and m >= 1, got n={n}, m={m}")
    constants = {"c_B": c_B, "c_L": c_L, "c_delta": c_delta}
    if profile == "theory":
        c_eta = THEORY_C_ETA if c_eta is None else c_eta
        B, H, eta = tree_shape(n, m, eps, c_B=c_B, c_eta=c_eta)
        L_max = math.ceil(c_L * math.log(n) / eta**2)
        bits = log2_inv_delta_fail(B, L_max, n, m, c_delta)
        b = math.ceil(8 / eta**2)
        g = math.ceil(8 * bits * math.log(2))
        s_eps, s_delta = eta, 2.0**-bits if bits < 1074 else SMALLEST_DOUBLE
    elif profile == "desk":
        c_eta = DESK_C_ETA if c_eta is None else c_eta
        H = DESK_H if H is None else H
        B = min_branching(m, H)
        eta = eps / (c_eta * H)
        L_max = math.ceil(c_L * math.log(n) / eta**2)
        bits = log2_inv_delta_fail(B, L_max, n, m, c_delta)
        s_eps, s_delta = min(1.0, sketch_c * eta), sketch_delta
        g, b = f2_shape(s_eps, s_delta)
    else:
        raise SizingError(f"unknown sizing profile {profile!r}")
    constants.update(c_eta=c_eta)
    delta_fail = 2.0**-bits if bits < 1074 else SMALLEST_DOUBLE
    diag = {"B": B, "H": H, "eta": eta, "L_max": L_max, "g": g, "b": b,
            "log2_inv_delta_fail": bits, "memory_cap": memory_cap}
    # one estimator and one corrector per level, plus ledger images
    words = g * b * (2 * H + 1)
    if words > memory_cap:
        raise SizingError(f"{profile} sizing needs {words} sketch words, cap is {memory_cap}", diag)
    params = Params(n=n, m=m, eps=eps, B=B, H=H, eta=eta, L_max=L_max, g=g, b=b,
                    delta_fail=delta_fail, mode=Mode(mode), profile=profile,
                    sketch_eps=s_eps, sketch_delta=s_delta, delta_max=delta_max,
                    constants=constants)
    params.validate()
    return params


# ---------------------------------------------------------------- reports


def acceptance_window(eta: float, level: int) -> tuple[float, float]:
    return (1.0 - eta) ** (3 * level), (1.0 + eta) ** (3 * level)


def alpha_step(P: float, Q: float, A: float, eta: float) -> float:
    """Learning rate for an iterate update; 0 when P or Q vanishes."""
    if P <= 0.0 or Q <= 0.0:
        return 0.0
    sigma = 1.0 if A > P + Q else -1.0
    return 0.25 * math.sqrt(P / Q) * sigma * eta


@dataclass
class LevelReport:
    level: int
    P: float
    Q: float
    A: float
    accepted: bool
    iterate_updated: bool = False

    @property
    def flag(self) -> str:
        if self.accepted:
            return "."
        return "U" if self.iterate_updated else "r"


@dataclass
class IterateEvent:
    t: int
    level: int
    ordinal: int
    alpha: float
    P: float
    Q: float
    A: float
    update_count: int
    dist_old: float | None = None
    dist_new: float | None = None
    eta_sq_over_200: float = 0.0

    @property
    def progress_ok(self) -> bool | None:
        if self.dist_old is None:
            return None
        return self.dist_new <= (1.0 - self.eta_sq_over_200) * self.dist_old


class ImageStack:
    """Growable row stack of sketch images, combined with one matrix product."""

    def __init__(self):
        self._buf: np.ndarray | None = None
        self._count = 0

    def append(self, img: np.ndarray) -> None:
        if self._buf is None:
            self._buf = np.empty((4, img.shape[0]), dtype=img.dtype)
        elif self._count == self._buf.shape[0]:
            grown = np.empty((2 * self._count, self._buf.shape[1]), dtype=self._buf.dtype)
            grown[:self._count] = self._buf[:self._count]
            self._buf = grown
        self._buf[self._count] = img
        self._count += 1

    def __len__(self) -> int:
        return self._count

    def __getitem__(self, k: int) -> np.ndarray:
        if not 0 <= k < self._count:
            raise IndexError(k)
        return self._buf[k]

    def __iter__(self):
        for k in range(self._count):
            yield self._buf[k]

    def combine(self, coefficients: list[float], like: np.ndarray) -> np.ndarray:
        if self._count == 0:
            return np.zeros_like(like)
        return np.asarray(coefficients, dtype=np.float64) @ self._buf[:self._count]


class IterateLedger:
    """u = sum_k gamma_k * c(t_k), where c(t_k) is the node's content at update k.

    The coefficients are the exact record of u.  Sketched images of u follow
    the same linear rule, img <- (1 + alpha) img + gamma_new * image(c), so
    they never need the per-segment images.  Reference mode also stacks the
    exact segments, so the shadow is the coefficient combination itself.
    """

    def __init__(self, reference: bool):
        self.coefficients: list[float] = []
        self.own_image: np.ndarray | None = None
        self.shadow: ImageStack | None = ImageStack() if reference else None
        self.update_count = 0

    def __len__(self) -> int:
        return len(self.coefficients)

    def shadow_vector(self, n: int) -> np.ndarray:
        return self.shadow.combine(self.coefficients, np.zeros(n))

    def words(self) -> int:
        own = self.own_image.size if self.own_image is not None else 0
        return len(self.coefficients) + own


class Scope:
    """Matrices of one level, ingesting everything their host node absorbs."""

    def __init__(self, level: int, ordinal: int, est, cor):
        self.level = level
        self.ordinal = ordinal
        self.est = est
        self.cor = cor
        self.run_est = est.zeros() if est is not None else None
        self.run_cor = cor.zeros()

    def absorb(self, a: int, delta: int) -> None:
        if self.est is not None:
            self.est.add(self.run_est, a, delta)
        self.cor.add(self.run_cor, a, delta)

    def words(self) -> int:
        w = self.run_cor.size
        if self.run_est is not None:
            w += self.run_est.size
        return w


class Block:
    """An active node at level >= 2."""

    def __init__(self, level: int, ordinal: int, reference: bool):
        self.level = level
        self.ordinal = ordinal
        self.status = "active"
        self.children_completed = 0
        self.ledger = IterateLedger(reference)
        self.w_est: np.ndarray | None = None
        self.snap_est: np.ndarray | None = None
        self.base_cor: np.ndarray | None = None
        self.u_child_est: np.ndarray | None = None
        self.u_child_cor: np.ndarray | None = None
        self.P = 0.0
        self.w_ref: np.ndarray | None = None
        self.x_start: np.ndarray | None = None
        self.u_ref: np.ndarray | None = None

    def words(self) -> int:
        arrays = (self.w_est, self.snap_est, self.base_cor, self.u_child_est, self.u_child_cor)
        return sum(a.size for a in arrays if a is not None) + 1


# ---------------------------------------------------------------- tree


class TreeState:
    """Robust F2 estimator state: active root-to-leaf path, scopes, ledgers.

    ``operator="ams"`` uses AMS sketches; ``operator="exact"`` swaps every
    sketch for the exact identity operator, which is useful to test the tree
    logic without sketching noise.
    """

    def __init__(self, params: Params, master_seed: int | SeedPath = 0,
                 operator: str = "ams", mode: Mode | str | None = None):
        self.params = params
        self.seed = master_seed if isinstance(master_seed, SeedPath) else SeedPath(int(master_seed))
        if operator not in ("ams", "exact"):
            raise ValueError(f"unknown operator kind {operator!r}")
        self.operator = operator
        self.mode = Mode(mode) if mode is not None else params.mode
        self.reference = self.mode is Mode.REFERENCE
        self.t = 0
        self.last_estimate = 0.0
        self.last_reports: list[LevelReport] = []
        self.events: list[IterateEvent] = []
        self.guard_events = 0
        self.violations = 0
        self.peak_update_count = 0
        top = params.H + 1
        self.top = top
        self.accepts = [0] * (top + 1)
        self.rejects = [0] * (top + 1)
        self.iterate_updates = [0] * (top + 1)
        self.spawns = [0] * (top + 2)
        self.scopes: list[Scope | None] = [None] * (top + 1)
        self.blocks: list[Block | None] = [None] * (top + 1)
        self.x = np.zeros(params.n) if self.reference else None
        self._peak_words = 0
        self._build_root()

    # -- construction

    def _make_operator(self, level: int, ordinal: int, role: Role, lifetime: int):
        if self.operator == "exact":
            return ExactOperator(self.params.n)
        seed = derive_seed(self.seed, level, ordinal, role)
        # Columns are memoized only when the scope outlives a pass over the
        # universe and the int8 table stays small.
        cache = lifetime >= self.params.n and self.params.n * self.params.r <= COLUMN_CACHE_BYTES
        return F2Operator(seed, self.params.n, self.params.g, self.params.b, cache=cache)

    def _new_scope(self, level: int, host_ordinal: int) -> Scope:
        p = self.params
        lifetime = p.m if level + 1 == self.top else p.B**level
        est = None if level == self.top else self._make_operator(level, host_ordinal, Role.ESTIMATOR, lifetime)
        cor = self._make_operator(level, host_ordinal, Role.CORRECTOR, lifetime)
        return Scope(level, host_ordinal, est, cor)

    def _build_root(self) -> None:
        top = self.top
        root = Block(top, 0, self.reference)
        self.spawns[top] = 1
        self.scopes[top] = self._new_scope(top, 0)
        root.w_est = None
        root.base_cor = self.scopes[top].cor.zeros()
        root.P = 0.0
        if self.reference:
            root.w_ref = np.zeros(self.params.n)
            root.x_start = np.zeros(self.params.n)
            root.u_ref = np.zeros(self.params.n)
        self.blocks[top] = root
        self._open_child_scope(root)
        self._track_space()

    def _open_child_scope(self, host: Block) -> None:
        """Seed the matrices of the level below `host` and spawn its first child."""
        level = host.level - 1
        scope = self._new_scope(level, host.ordinal)
        self.scopes[level] = scope
        host.u_child_est = scope.est.zeros()
        host.u_child_cor = scope.cor.zeros()
        if level >= 2:
            self._spawn_block(level, host)

    def _spawn_block(self, level: int, parent: Block) -> None:
        scope = self.scopes[level]
        blk = Block(level, self.spawns[level], self.reference)
        self.spawns[level] += 1
        blk.w_est = parent.u_child_est + scope.run_est
        blk.snap_est = scope.run_est.copy()
        blk.base_cor = parent.u_child_cor.copy()
        blk.P = scope.est.estimate(blk.w_est)
        if self.reference:
            blk.w_ref = parent.u_ref + (self.x - parent.x_start)
            blk.x_start = self.x.copy()
            blk.u_ref = np.zeros(self.params.n)
        self.blocks[level] = blk
        self._open_child_scope(blk)
        self._track_space()

    # -- estimation

    def _reports(self, mutate: bool) -> tuple[float, list[LevelReport]]:
        eta = self.params.eta
        host = self.blocks[2]
        leaf_scope = self.scopes[1]
        Q = leaf_scope.est.estimate_sum(host.u_child_est, leaf_scope.run_est)
        A = leaf_scope.cor.estimate_sum(host.u_child_cor, leaf_scope.run_cor)
        lo, hi = acceptance_window(eta, 1)
        ok = lo * A <= Q <= hi * A
        reports = [LevelReport(1, 0.0, Q, A, ok)]
        out = Q if ok else A
        for i in range(2, self.top + 1):
            blk = self.blocks[i]
            scope = self.scopes[i]
            A = scope.cor.estimate_sum(blk.base_cor, scope.run_cor)
            P = blk.P
            Z = P + out
            lo, hi = acceptance_window(eta, i)
            ok = lo * A <= Z <= hi * A
            rep = LevelReport(i, P, out, A, ok)
            reports.append(rep)
            if ok:
                out = Z
            else:
                out = A
                if mutate:
                    self.maintain_iter(i, rep)
        return out, reports

    def est_level(self, level: int) -> LevelReport:
        """Report for one level at the current time, without side effects."""
        if not 1 <= level <= self.top:
            raise ValueError(f"level {level} outside [1, {self.top}]")
        _, reports = self._reports(mutate=False)
        return reports[level - 1]

    def process(self, a: int, delta: int) -> float:
        return self.process_update(Update(self.t + 1, a, delta))

    def process_update(self, u: Update) -> float:
        p = self.params
        if self.t >= p.m:
            raise StreamOverrun(f"stream already has m={p.m} updates")
        if u.t != self.t + 1:
            raise StreamError(f"expected update time {self.t + 1}, got {u.t}")
        u.check(p.n, p.delta_max)
        self.t = u.t
        for i in range(1, self.top + 1):
            self.scopes[i].absorb(u.a, u.delta)
        if self.reference:
            self.x[u.a - 1] += u.delta
        out, reports = self._reports(mutate=True)
        for rep in reports:
            if rep.accepted:
                self.accepts[rep.level] += 1
            else:
                self.rejects[rep.level] += 1
        self.last_reports = reports
        self.last_estimate = out
        self._advance()
        return out

    def _advance(self) -> None:
        """Close the leaf and cascade natural closures upward."""
        B = self.params.B
        level = 2
        self.blocks[2].children_completed += 1
        while level < self.top and self.blocks[level].children_completed >= B:
            self.blocks[level].status = "closed"
            self.blocks[level + 1].children_completed += 1
            level += 1
        if level > 2:
            parent = self.blocks[level]
            self._spawn_block(level - 1, parent)

    # -- learning

    def maintain_iter(self, level: int, report: LevelReport) -> None:
        if report.accepted:
            raise ValueError("maintain_iter needs a rejected report")
        p = self.params
        blk = self.blocks[level]
        alpha = alpha_step(report.P, report.Q, report.A, p.eta)
        if alpha == 0.0:
            self.guard_events += 1
            return
        scale = p.precision_scale
        ledger = blk.ledger
        scope = self.scopes[level]
        child = self.scopes[level - 1]
        coeffs = [math.trunc((1.0 + alpha) * c / scale) * scale for c in ledger.coefficients]
        coeffs.append(math.trunc(alpha / scale) * scale)
        if any(abs(c) > p.magnitude_cap for c in coeffs):
            raise PrecisionOverflow(f"ledger coefficient beyond {p.magnitude_cap} at level {level}")
        u_old = blk.u_ref
        grow, gamma_new = 1.0 + alpha, coeffs[-1]
        ledger.coefficients = coeffs
        own = ledger.own_image if ledger.own_image is not None else scope.est.zeros()
        ledger.own_image = grow * own + gamma_new * (scope.run_est - blk.snap_est)
        blk.u_child_est = grow * blk.u_child_est + gamma_new * child.run_est
        blk.u_child_cor = grow * blk.u_child_cor + gamma_new * child.run_cor
        if self.reference:
            ledger.shadow.append(self.x - blk.x_start)
        ledger.update_count += 1
        self.peak_update_count = max(self.peak_update_count, ledger.update_count)
        self.iterate_updates[level] += 1
        report.iterate_updated = True
        blk.P = scope.est.estimate(blk.w_est - ledger.own_image)
        event = IterateEvent(self.t, level, blk.ordinal, alpha, report.P, report.Q, report.A,
                             ledger.update_count, eta_sq_over_200=p.eta**2 / 200.0)
        if self.reference:
            blk.u_ref = ledger.shadow_vector(p.n)
            event.dist_old = float(np.sum((blk.w_ref - u_old) ** 2))
            event.dist_new = float(np.sum((blk.w_ref - blk.u_ref) ** 2))
            if not event.progress_ok:
                self.violations += 1
        self.events.append(event)
        if ledger.update_count > p.L_max:
            raise IterateCapExceeded(
                f"block ({level}, {blk.ordinal}) updated its iterate {ledger.update_count} times, cap {p.L_max}")
        if level - 1 >= 2:
            self._spawn_block(level - 1, blk)
        self._track_space()

    # -- accounting

    def _track_space(self) -> None:
        if all(s is not None for s in self.scopes[1:]):
            self._peak_words = max(self._peak_words, self.space_words()["total"])

    def flags(self) -> str:
        return "".join(r.flag for r in self.last_reports)

    def max_update_count(self) -> int:
        """Largest iterate update count any block reached so far, closed blocks included."""
        return self.peak_update_count

    def space_words(self) -> dict:
        sketch = sum(s.words() for s in self.scopes if s is not None)
        blocks = sum(b.words() for b in self.blocks if b is not None)
        ledger = sum(len(b.ledger) + b.ledger.words() for b in self.blocks if b is not None)
        hash_words = 0
        for s in self.scopes:
            if s is None:
                continue
            for op in (s.est, s.cor):
                if isinstance(op, F2Operator):
                    hash_words += op.matrix.coef.size
        counters = 6 * (self.top + 1)
        per_level = {}
        for i in range(1, self.top + 1):
            s, b = self.scopes[i], self.blocks[i]
            per_level[i] = {
                "sketch": s.words() if s else 0,
                "block": b.words() if b else 0,
                "ledger_entries": len(b.ledger) if b else 0,
            }
        total = sketch + blocks + ledger + hash_words + counters
        return {"sketch_state": sketch + blocks, "ledger": ledger, "hash_coefficients": hash_words,
                "counters": counters, "total": total, "per_level": per_level}

    @property
    def peak_words(self) -> int:
        return max(self._peak_words, self.space_words()["total"])

    # -- checkpoints

    def to_checkpoint(self) -> bytes:
        arrays: dict[str, np.ndarray] = {}
        meta = {
            "params": _params_to_json(self.params),
            "seed": self.seed.to_list(),
            "operator": self.operator,
            "mode": self.mode.value,
            "t": self.t,
            "last_estimate": self.last_estimate,
            "accepts": self.accepts, "rejects": self.rejects,
            "iterate_updates": self.iterate_updates, "spawns": self.spawns,
            "guard_events": self.guard_events, "violations": self.violations,
            "peak_update_count": self.peak_update_count,
            "peak_words": self._peak_words,
            "scopes": {}, "blocks": {},
        }
        for i in range(1, self.top + 1):
            s = self.scopes[i]
            meta["scopes"][i] = {"ordinal": s.ordinal}
            if s.run_est is not None:
                arrays[f"s{i}_run_est"] = s.run_est
            arrays[f"s{i}_run_cor"] = s.run_cor
        for i in range(2, self.top + 1):
            b = self.blocks[i]
            meta["blocks"][i] = {
                "ordinal": b.ordinal, "children_completed": b.children_completed,
                "P": b.P, "coefficients": b.ledger.coefficients,
                "update_count": b.ledger.update_count,
            }
            for name in ("w_est", "snap_est", "base_cor", "u_child_est", "u_child_cor",
                         "w_ref", "x_start", "u_ref"):
                value = getattr(b, name)
                if value is not None:
                    arrays[f"b{i}_{name}"] = value
            if b.ledger.own_image is not None:
                arrays[f"b{i}_own_image"] = b.ledger.own_image
            if b.ledger.shadow is not None:
                for k in range(len(b.ledger.shadow)):
                    arrays[f"b{i}_shadow{k}"] = b.ledger.shadow[k]
        if self.x is not None:
            arrays["x"] = self.x
        buf = io.BytesIO()
        np.savez(buf, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
        return buf.getvalue()

    @classmethod
    def from_checkpoint(cls, blob: bytes) -> "TreeState":
        data = np.load(io.BytesIO(blob), allow_pickle=False)
        meta = json.loads(bytes(data["meta"]).decode())
        params = _params_from_json(meta["params"])
        state = cls.__new__(cls)
        state.params = params
        state.seed = SeedPath.from_list(meta["seed"])
        state.operator = meta["operator"]
        state.mode = Mode(meta["mode"])
        state.reference = state.mode is Mode.REFERENCE
        state.t = meta["t"]
        state.last_estimate = meta["last_estimate"]
        state.last_reports = []
        state.events = []
        state.guard_events = meta["guard_events"]
        state.violations = meta["violations"]
        state.peak_update_count = meta["peak_update_count"]
        state.top = params.H + 1
        state.accepts = meta["accepts"]
        state.rejects = meta["rejects"]
        state.iterate_updates = meta["iterate_updates"]
        state.spawns = meta["spawns"]
        state._peak_words = meta["peak_words"]
        state.x = data["x"].copy() if "x" in data else None
        state.scopes = [None] * (state.top + 1)
        state.blocks = [None] * (state.top + 1)
        for key, info in meta["scopes"].items():
            i = int(key)
            s = state._new_scope(i, info["ordinal"])
            if s.run_est is not None:
                s.run_est = data[f"s{i}_run_est"].copy()
            s.run_cor = data[f"s{i}_run_cor"].copy()
            state.scopes[i] = s
        for key, info in meta["blocks"].items():
            i = int(key)
            b = Block(i, info["ordinal"], state.reference)
            b.children_completed = info["children_completed"]
            b.P = info["P"]
            for name in ("w_est", "snap_est", "base_cor", "u_child_est", "u_child_cor",
                         "w_ref", "x_start", "u_ref"):
                k = f"b{i}_{name}"
                if k in data:
                    setattr(b, name, data[k].copy())
            ledger = b.ledger
            ledger.coefficients = list(info["coefficients"])
            ledger.update_count = info["update_count"]
            if f"b{i}_own_image" in data:
                ledger.own_image = data[f"b{i}_own_image"].copy()
            if ledger.shadow is not None:
                for k in range(len(ledger.coefficients)):
                    ledger.shadow.append(data[f"b{i}_shadow{k}"].copy())
            state.blocks[i] = b
        return state


def process_update(state: TreeState, u: Update) -> tuple[TreeState, float]:
    est = state.process_update(u)
    return state, est


def est_level(state: TreeState, level: int) -> LevelReport:
    return state.est_level(level)


def maintain_iter(state: TreeState, level: int, report: LevelReport) -> TreeState:
    state.maintain_iter(level, report)
    return state


def _params_to_json(p: Params) -> dict:
    return {
        "n": p.n, "m": p.m, "eps": p.eps, "B": p.B, "H": p.H, "eta": p.eta,
        "L_max": p.L_max, "g": p.g, "b": p.b, "delta_fail": p.delta_fail,
        "precision_scale": p.precision_scale, "magnitude_cap": p.magnitude_cap,
        "mode": p.mode.value, "profile": p.profile, "sketch_eps": p.sketch_eps,
        "sketch_delta": p.sketch_delta, "delta_max": p.delta_max, "constants": p.constants,
    }


def _params_from_json(d: dict) -> Params:
    d = dict(d)
    d["mode"] = Mode(d["mode"])
    return Params(**d)
