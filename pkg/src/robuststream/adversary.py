"""Stream generators, adaptive attackers and the sequential game driver."""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Generator, Protocol

import numpy as np

from .core_types import (
    DELTA_MAX,
    IterateCapExceeded,
    PrecisionOverflow,
    SeedPath,
    StreamError,
    Update,
)
from .sketch import F2Operator


class StreamAlgorithm(Protocol):
    def process(self, a: int, delta: int) -> float: ...


# ---------------------------------------------------------------- baseline


class NaiveMeanAMS:
    """A single AMS sketch with k rows answering the raw mean (1/k)||Ax||^2.

    No median and no refresh: a deliberately non-robust strawman whose
    responses are exact rationals with denominator k.
    """

    def __init__(self, n: int, k: int, seed: int = 0):
        self.n = n
        self.k = k
        self.op = F2Operator(SeedPath(seed, ((1, 0, 9),)), n, 1, k)
        self.state = self.op.zeros()
        self.t = 0

    def process(self, a: int, delta: int) -> float:
        self.t += 1
        self.op.add(self.state, a, delta)
        return float(np.dot(self.state, self.state)) / self.k

    def gram(self) -> np.ndarray:
        """A^T A, for checking an attack's reconstruction."""
        A = self.op.matrix.dense().astype(np.int64)
        return A.T @ A


# ---------------------------------------------------------------- transcripts


@dataclass
class TranscriptView:
    """What a strategy may read: its own moves and the responses."""

    n: int
    updates: list
    responses: list
    _shadow: np.ndarray | None = None
    _truths: list | None = None

    @property
    def t(self) -> int:
        return len(self.updates)


@dataclass
class GameTranscript:
    updates: list = field(default_factory=list)
    responses: list = field(default_factory=list)
    truths: list | None = None
    flags: list = field(default_factory=list)
    events: list = field(default_factory=list)
    eps: float = 0.2
    max_rel_err: float | None = None
    break_time: int | None = None
    failure: str | None = None
    victory: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def broken(self) -> bool:
        return self.break_time is not None or self.failure is not None

    def finalize(self) -> None:
        if self.truths is None or not self.responses:
            return
        worst = 0.0
        for t, (resp, truth) in enumerate(zip(self.responses, self.truths), 1):
            err = abs(resp - truth) / max(truth, 1.0)
            worst = max(worst, err)
            if err > self.eps and self.break_time is None:
                self.break_time = t
        self.max_rel_err = worst

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "a", "delta", "response", "truth", "flags"])
        truths = self.truths if self.truths is not None else [None] * len(self.updates)
        for u, resp, truth, fl in zip(self.updates, self.responses, truths, self.flags):
            w.writerow([u.t, u.a, u.delta, repr(float(resp)),
                        "" if truth is None else repr(float(truth)), fl])
        return buf.getvalue()

    def to_replay(self) -> bytes:
        """Compact binary replay: header, then one fixed record per step."""
        has_truth = self.truths is not None
        out = [REPLAY_HEADER.pack(REPLAY_MAGIC, REPLAY_VERSION, int(has_truth), len(self.updates))]
        truths = self.truths if has_truth else [0.0] * len(self.updates)
        for u, resp, truth, fl in zip(self.updates, self.responses, truths, self.flags):
            fb = fl.encode("ascii")
            out.append(REPLAY_RECORD.pack(u.t, u.a, u.delta, resp, truth, len(fb)))
            out.append(fb)
        return b"".join(out)

    @classmethod
    def from_replay(cls, blob: bytes) -> "GameTranscript":
        magic, version, has_truth, count = REPLAY_HEADER.unpack_from(blob, 0)
        if magic != REPLAY_MAGIC or version != REPLAY_VERSION:
            raise ValueError("not a transcript replay blob")
        tr = cls(truths=[] if has_truth else None)
        off = REPLAY_HEADER.size
        for _ in range(count):
            t, a, delta, resp, truth, nflag = REPLAY_RECORD.unpack_from(blob, off)
            off += REPLAY_RECORD.size
            tr.updates.append(Update(t, a, delta))
            tr.responses.append(resp)
            if has_truth:
                tr.truths.append(truth)
            tr.flags.append(blob[off:off + nflag].decode("ascii"))
            off += nflag
        return tr


REPLAY_MAGIC = b"RSTR"
REPLAY_VERSION = 1
REPLAY_HEADER = struct.Struct("<4sHBQ")
REPLAY_RECORD = struct.Struct("<QIqddB")


# ---------------------------------------------------------------- strategies


class AdversaryStrategy:
    kind = "base"
    reads_shadow = False

    def __init__(self, n: int, seed: int = 0):
        self.n = n
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def next(self, view: TranscriptView) -> tuple[int, int] | None:
        raise NotImplementedError


class ObliviousRandom(AdversaryStrategy):
    """Uniform coordinates, deltas uniform on +-[1, max_delta]."""

    kind = "oblivious_random"

    def __init__(self, n: int, seed: int = 0, max_delta: int = 10):
        super().__init__(n, seed)
        self.max_delta = max_delta

    def next(self, view):
        a = int(self.rng.integers(1, self.n + 1))
        if self.max_delta == 0:
            return a, 0
        mag = int(self.rng.integers(1, self.max_delta + 1))
        return a, mag if self.rng.random() < 0.5 else -mag


class DeletionHeavy(AdversaryStrategy):
    """Insert bursts, then cancel earlier mass coordinate by coordinate.

    The strategy only tracks its own moves, so it stays oblivious to the
    algorithm while producing long stretches where F2 falls.
    """

    kind = "deletion_heavy"

    def __init__(self, n: int, seed: int = 0, max_delta: int = 10, delete_prob: float = 0.6):
        super().__init__(n, seed)
        self.max_delta = max_delta
        self.delete_prob = delete_prob
        self.x = np.zeros(n, dtype=np.int64)

    def next(self, view):
        nz = np.flatnonzero(self.x)
        if nz.size and self.rng.random() < self.delete_prob:
            i = int(nz[self.rng.integers(nz.size)])
            delta = -int(np.sign(self.x[i])) * min(abs(int(self.x[i])), self.max_delta)
        else:
            i = int(self.rng.integers(self.n))
            mag = int(self.rng.integers(1, self.max_delta + 1))
            delta = mag if self.rng.random() < 0.5 else -mag
        self.x[i] += delta
        return i + 1, delta


class AlignmentAttack(AdversaryStrategy):
    """Greedy stress attacker with shadow access.

    It grows a few heavy coordinates, then cancels old mass along the heaviest
    coordinates of the shadow (queries aligned with the prefix), and repeats
    any move after which the response drifted further from the truth.  Moves
    that did not help are undone, which makes deletions a large share of the
    stream.
    """

    kind = "alignment_attack"
    reads_shadow = True

    def __init__(self, n: int, seed: int = 0, heavy: int = 16, warmup: int = 400,
                 max_delta: int = 64, explore: float = 0.25):
        super().__init__(n, seed)
        self.heavy = self.rng.choice(n, size=min(heavy, n), replace=False)
        self.warmup = warmup
        self.max_delta = max_delta
        self.explore = explore
        self.last_move: tuple[int, int] | None = None
        self.dev_before = 0.0
        self.undo = False
        self.score = np.zeros(n)

    def _dev(self, view) -> float:
        if not view.responses:
            return 0.0
        truth = view._truths[-1]
        return (view.responses[-1] - truth) / max(truth, 1.0)

    def next(self, view):
        x = view._shadow
        dev = self._dev(view)
        if view.t < self.warmup:
            i = int(self.heavy[self.rng.integers(self.heavy.size)])
            if self.rng.random() < 0.3:
                i = int(self.rng.integers(self.n))
            return self._move(i, int(self.rng.integers(1, self.max_delta + 1)), dev)
        if self.last_move is not None:
            i, delta = self.last_move
            gain = abs(dev) - abs(self.dev_before)
            self.score[i] += gain
            if self.undo:
                self.undo = False
            elif gain > 0:
                return self._move(i, delta, dev)
            elif self.rng.random() < 0.5:
                self.undo = True
                return self._move(i, -delta, dev)
        r = self.rng.random()
        if r < 0.45:
            # cancel old mass on the heaviest coordinates
            top = np.argsort(-np.abs(x))[:8]
            i = int(top[self.rng.integers(top.size)])
            if x[i] == 0:
                i = int(self.rng.integers(self.n))
            mag = min(abs(int(x[i])), int(self.rng.integers(1, 4 * self.max_delta + 1))) or 1
            delta = -int(np.sign(x[i]) or 1) * mag
        elif r < 0.45 + self.explore:
            i = int(self.rng.integers(self.n))
            mag = int(self.rng.integers(1, self.max_delta + 1))
            delta = mag if self.rng.random() < 0.5 else -mag
        else:
            # revisit coordinates whose moves moved the response most
            top = np.argsort(-np.abs(self.score))[:8]
            i = int(top[self.rng.integers(top.size)])
            mag = int(self.rng.integers(1, 2 * self.max_delta + 1))
            grow = int(np.sign(x[i]) or 1)
            delta = grow * mag if self.rng.random() < 0.5 else -grow * mag
        return self._move(i, delta, dev)

    def _move(self, i: int, delta: int, dev: float):
        self.last_move = (i, delta)
        self.dev_before = dev
        return i + 1, delta


class ZeroStream(AdversaryStrategy):
    kind = "zero"

    def next(self, view):
        return int(self.rng.integers(1, self.n + 1)), 0


# ---------------------------------------------------------------- game driver


def run_game(algorithm, strategy: AdversaryStrategy, m: int, eps: float = 0.2,
             reference: bool = True, stop_on_break: bool = False,
             truth: Callable[[np.ndarray], float] | None = None) -> GameTranscript:
    """Alternate strategy moves and algorithm responses for up to m rounds.

    With reference=True the driver keeps the exact frequency vector and
    records the true statistic per step: F2 by default, or ``truth(x)``.
    Algorithm aborts end the game and are recorded as failures.
    """
    n = strategy.n
    tr = GameTranscript(truths=[] if reference else None, eps=eps)
    shadow = np.zeros(n, dtype=np.int64) if (reference or strategy.reads_shadow) else None
    view = TranscriptView(n, tr.updates, tr.responses, shadow,
                          tr.truths if reference else None)
    f2 = 0
    for t in range(1, m + 1):
        move = strategy.next(view)
        if move is None:
            tr.victory = True
            break
        a, delta = move
        u = Update(t, int(a), int(delta))
        try:
            resp = algorithm.process(u.a, u.delta)
        except (IterateCapExceeded, PrecisionOverflow, StreamError) as exc:
            tr.failure = f"{type(exc).__name__}: {exc}"
            break
        if shadow is not None:
            old = int(shadow[u.a - 1])
            new = old + u.delta
            shadow[u.a - 1] = new
            f2 += new * new - old * old
        tr.updates.append(u)
        tr.responses.append(float(resp))
        if reference:
            tr.truths.append(float(f2) if truth is None else float(truth(shadow)))
        flags = getattr(algorithm, "flags", None)
        tr.flags.append(flags() if callable(flags) else "")
        if stop_on_break and reference and abs(resp - f2) > eps * max(f2, 1):
            break
    events = getattr(algorithm, "events", None)
    if events is not None:
        tr.events = list(events)
    tr.finalize()
    return tr


def alignment_attack(target, n: int, m: int, seed: int = 0, eps: float = 0.2, **kwargs) -> GameTranscript:
    strategy = AlignmentAttack(n, seed, **kwargs)
    tr = run_game(target, strategy, m, eps=eps, reference=True)
    tr.meta["attack"] = "alignment_attack"
    return tr


# ---------------------------------------------------------------- Gram attack


@dataclass
class GramCertificate:
    feasible: bool
    u: np.ndarray | None
    inserted: np.ndarray | None
    reported: float | None
    true: float | None
    probe_rounds: int
    updates: int
    diagnostics: dict = field(default_factory=dict)

    @property
    def ratio(self) -> float | None:
        if self.reported is None or not self.true:
            return None
        return self.reported / self.true


def integer_kernel_vector(G: list[list[int]]) -> list[int] | None:
    """A nonzero integer vector u with G u = 0, or None if G has full column rank.

    Fraction-free (Bareiss) elimination keeps every intermediate an integer.
    """
    rows = [list(r) for r in G]
    n = len(rows[0]) if rows else 0
    pivots: list[int] = []
    r = 0
    prev = 1
    for c in range(n):
        pivot = next((i for i in range(r, len(rows)) if rows[i][c] != 0), None)
        if pivot is None:
            continue
        rows[r], rows[pivot] = rows[pivot], rows[r]
        pr = rows[r]
        for i in range(len(rows)):
            if i == r or rows[i][c] == 0:
                continue
            ri = rows[i]
            f = ri[c]
            if i > r:
                rows[i] = [(pr[c] * ri[j] - f * pr[j]) // prev for j in range(n)]
            else:
                rows[i] = [pr[c] * ri[j] - f * pr[j] for j in range(n)]
        pivots.append(c)
        prev = pr[c]
        r += 1
        if r == len(rows):
            break
    free = [c for c in range(n) if c not in pivots]
    if not free:
        return None
    f = free[0]
    # back-substitute with rationals on the reduced rows, then clear denominators
    sol = [Fraction(0)] * n
    sol[f] = Fraction(1)
    for k in range(len(pivots) - 1, -1, -1):
        c = pivots[k]
        row = rows[k]
        acc = sum((Fraction(row[j]) * sol[j] for j in range(n) if j != c and row[j] != 0), Fraction(0))
        sol[c] = -acc / Fraction(row[c])
    denom = 1
    for v in sol:
        denom = denom * v.denominator // math.gcd(denom, v.denominator)
    ints = [int(v * denom) for v in sol]
    g = 0
    for v in ints:
        g = math.gcd(g, v)
    return [v // g for v in ints]


class GramAttack(AdversaryStrategy):
    """Reconstruct A^T A from responses, then insert a scaled kernel vector.

    Phase 1 inserts e_i and reads (e_i)^T G e_i / k, then for every j > i
    inserts e_j, reads the pair response and deletes e_j.  Phase 2 extracts a
    kernel vector of the reconstructed Gram matrix.  Phase 3 inserts
    round(M u) with u scaled to max-abs 1.
    """

    kind = "gram_attack"

    def __init__(self, n: int, k: int, M: int = 1000, seed: int = 0, force: bool = False):
        super().__init__(n, seed)
        self.k = k
        self.M = M
        self.force = force
        self.probe_rounds = 0
        self.gram: np.ndarray | None = None
        self.u: np.ndarray | None = None
        self.inserted: np.ndarray | None = None
        self.feasible: bool | None = None
        self.diagnostics: dict = {}
        self._gen = self._moves()
        self._started = False

    def next(self, view):
        try:
            if not self._started:
                self._started = True
                return next(self._gen)
            return self._gen.send(view.responses[-1])
        except StopIteration:
            return None

    def _moves(self) -> Generator[tuple[int, int], float, None]:
        n, k = self.n, self.k
        raw = np.zeros((n, n))
        for i in range(n):
            r = yield (i + 1, 1)
            self.probe_rounds += 1
            raw[i, i] = k * r
            for j in range(i + 1, n):
                r = yield (j + 1, 1)
                self.probe_rounds += 1
                raw[i, j] = raw[j, i] = k * r
                yield (j + 1, -1)
            yield (i + 1, -1)
        diag = np.diag(raw).copy()
        gram = raw.copy()
        for i in range(n):
            for j in range(i + 1, n):
                gram[i, j] = gram[j, i] = (raw[i, j] - diag[i] - diag[j]) / 2.0
        self.gram = gram
        rounded = np.rint(gram)
        integral = bool(np.max(np.abs(gram - rounded)) < 1e-6)
        self.diagnostics["integral"] = integral
        u = None
        if integral:
            vec = integer_kernel_vector(rounded.astype(np.int64).tolist())
            if vec is not None:
                top = max(abs(v) for v in vec)
                u = np.array([float(Fraction(v, top)) for v in vec])
            self.diagnostics["rank_deficient"] = vec is not None
        else:
            w, V = np.linalg.eigh(gram)
            self.diagnostics["min_eig"] = float(w[0])
            self.diagnostics["max_eig"] = float(w[-1])
            tol = max(n, k) * np.finfo(float).eps * max(abs(w[-1]), 1.0)
            self.diagnostics["rank_deficient"] = bool(w[0] <= tol)
            if w[0] <= tol or self.force:
                u = V[:, 0]
        if u is None:
            self.feasible = False
            return
        self.feasible = True
        u = u / np.max(np.abs(u))
        self.u = u
        vec = np.rint(self.M * u).astype(np.int64)
        self.inserted = vec
        for i in np.flatnonzero(vec):
            yield (int(i) + 1, int(vec[i]))


def gram_probe_budget(n: int) -> int:
    """Stream length the Gram attack needs: probes, deletes and the final insert."""
    return n + n * (n - 1) + n + n


def gram_attack(oracle, n: int, k: int, M: int = 1000, force: bool = False,
                eps: float = 0.2) -> tuple[GramCertificate, GameTranscript]:
    strategy = GramAttack(n, k, M=M, force=force)
    tr = run_game(oracle, strategy, gram_probe_budget(n), eps=eps, reference=True)
    tr.meta["attack"] = "gram_attack"
    if not strategy.feasible:
        cert = GramCertificate(False, None, None, None, None, strategy.probe_rounds,
                               len(tr.updates), dict(strategy.diagnostics))
        return cert, tr
    reported = tr.responses[-1]
    true = tr.truths[-1]
    cert = GramCertificate(True, strategy.u, strategy.inserted, reported, true,
                           strategy.probe_rounds, len(tr.updates), dict(strategy.diagnostics))
    return cert, tr


STRATEGIES = {
    "oblivious_random": ObliviousRandom,
    "deletion_heavy": DeletionHeavy,
    "alignment_attack": AlignmentAttack,
    "zero": ZeroStream,
}
