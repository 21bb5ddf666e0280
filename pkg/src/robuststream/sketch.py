"""Non-adaptive linear sketches.

Each sketch is a seeded implicit matrix applied to the frequency vector.
Operators (``F2Operator``, ``CauchyOperator``, ``ExactOperator``) hold the
matrix and the estimator; the value types (``F2Sketch``, ``L1Sketch``,
``OracleSketch``) pair an operator with a state vector.  The robust
estimators work with operators and raw state arrays so images of different
vectors under one matrix can be added and scaled freely.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from . import _kernels as K
from .core_types import IncompatibleSketch, SeedPath, SizingError, Update

C_B = 8
C_G = 8
MEMORY_CAP_WORDS = 1 << 27
COLUMN_CACHE_BYTES = 1 << 26

MAGIC = b"RSSK"
BLOB_VERSION = 1
KIND_F2 = 1
KIND_L1 = 2


def f2_shape(eps_s: float, delta_s: float) -> tuple[int, int]:
    """(g, b) for a median-of-means AMS sketch at accuracy eps_s, failure delta_s."""
    if not 0 < eps_s <= 1 or not 0 < delta_s < 1:
        raise ValueError(f"need eps_s in (0,1] and delta_s in (0,1), got {eps_s}, {delta_s}")
    b = math.ceil(C_B / eps_s**2)
    g = max(1, math.ceil(C_G * math.log(1.0 / delta_s)))
    return g, b


def l1_rows(kappa: float, delta_s: float) -> int:
    """Rows so the median of |Cauchy| lands in [1/kappa, kappa] w.p. 1 - delta_s.

    Hoeffding on the indicator |C| <= kappa, whose mean sits (2/pi)atan(kappa) - 1/2
    above one half; the lower side is symmetric because atan(1/k) = pi/2 - atan(k).
    """
    if kappa <= 1 or not 0 < delta_s < 1:
        raise ValueError(f"need kappa > 1 and delta_s in (0,1), got {kappa}, {delta_s}")
    gap = (2.0 / math.pi) * math.atan(kappa) - 0.5
    return math.ceil(math.log(2.0 / delta_s) / (2.0 * gap * gap))


class SignMatrix:
    """Implicit n x rows matrix of signs from a 4-wise independent hash family.

    Each degree-3 polynomial over GF(2^61 - 1) drawn from the seed serves 32
    rows: row 32*j + k reads bit k of polynomial j's hash of the coordinate.
    Columns are computed on demand and optionally memoized in an int8 table.
    """

    def __init__(self, seed: SeedPath, n: int, rows: int, cache: bool = True):
        self.seed = seed
        self.n = n
        self.rows = rows
        polys = -(-rows // K.BITS_PER_HASH)
        self.coef = seed.rng().integers(0, K.MERSENNE61, size=(4, polys), dtype=np.uint64)
        self.cache = cache
        self._table: np.ndarray | None = None
        self._filled: np.ndarray | None = None
        self._scratch = np.empty(rows, dtype=np.int8)

    def column(self, a: int) -> np.ndarray:
        if not 1 <= a <= self.n:
            raise IndexError(f"coordinate {a} outside [1, {self.n}]")
        if not self.cache:
            K.sign_column(self.coef, a, self._scratch)
            return self._scratch
        if self._table is None:
            # calloc-backed, so untouched rows cost no resident memory
            self._table = np.zeros((self.n, self.rows), dtype=np.int8)
            self._filled = np.zeros(self.n, dtype=bool)
        if not self._filled[a - 1]:
            K.sign_column(self.coef, a, self._table[a - 1])
            self._filled[a - 1] = True
        return self._table[a - 1]

    def add_to(self, state: np.ndarray, a: int, delta: float) -> None:
        if self.cache:
            K.add_signed(state, self.column(a), delta)
        else:
            if not 1 <= a <= self.n:
                raise IndexError(f"coordinate {a} outside [1, {self.n}]")
            K.add_hashed(state, self.coef, a, delta)

    def dense(self) -> np.ndarray:
        out = np.empty((self.rows, self.n), dtype=np.int8)
        col = np.empty(self.rows, dtype=np.int8)
        for a in range(1, self.n + 1):
            K.sign_column(self.coef, a, col)
            out[:, a - 1] = col
        return out


class F2Operator:
    """AMS sign matrix with a median-of-means F2 estimator."""

    kind = "ams"

    def __init__(self, seed: SeedPath, n: int, g: int, b: int, cache: bool = True):
        self.seed = seed
        self.n = n
        self.g = g
        self.b = b
        self.dim = g * b
        self.matrix = SignMatrix(seed, n, self.dim, cache=cache)

    def zeros(self) -> np.ndarray:
        return np.zeros(self.dim)

    def column(self, a: int) -> np.ndarray:
        return self.matrix.column(a)

    def add(self, state: np.ndarray, a: int, delta: float) -> None:
        self.matrix.add_to(state, a, float(delta))

    def estimate(self, state: np.ndarray) -> float:
        return float(K.group_estimate(state, self.g, self.b))

    def estimate_sum(self, base: np.ndarray, state: np.ndarray) -> float:
        return float(K.group_estimate_sum(base, state, self.g, self.b))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.matrix.dense().astype(np.float64) @ np.asarray(x, dtype=np.float64)


class CauchyOperator:
    """Implicit matrix of standard Cauchy variates; estimate is median |state|.

    Entry (row j, coordinate a) is tan(pi*(u - 1/2)) with u derived from the
    seeded hash of a under row j, so every entry is recomputable from the seed.
    """

    kind = "cauchy"

    def __init__(self, seed: SeedPath, n: int, rows: int, cache: bool = True):
        self.seed = seed
        self.n = n
        self.rows = rows
        self.dim = rows
        self.coef = seed.rng().integers(0, K.MERSENNE61, size=(4, rows), dtype=np.uint64)
        self.cache = cache
        self._columns: dict[int, np.ndarray] = {}
        self._hash = np.empty(rows, dtype=np.uint64)

    def column(self, a: int) -> np.ndarray:
        if not 1 <= a <= self.n:
            raise IndexError(f"coordinate {a} outside [1, {self.n}]")
        col = self._columns.get(a)
        if col is None:
            K.hash_column(self.coef, a, self._hash)
            u = ((self._hash >> np.uint64(8)).astype(np.float64) + 0.5) * 2.0**-53
            col = np.tan(np.pi * (u - 0.5))
            if self.cache:
                self._columns[a] = col
        return col

    def zeros(self) -> np.ndarray:
        return np.zeros(self.dim)

    def add(self, state: np.ndarray, a: int, delta: float) -> None:
        state += float(delta) * self.column(a)

    def estimate(self, state: np.ndarray) -> float:
        return float(np.median(np.abs(state)))

    def estimate_sum(self, base: np.ndarray, state: np.ndarray) -> float:
        return self.estimate(base + state)


def f2_value(v: np.ndarray) -> float:
    return float(np.dot(v, v))


class ExactOperator:
    """Identity 'sketch': the state is the vector itself, the estimate exact."""

    kind = "exact"

    def __init__(self, n: int, fn: Callable[[np.ndarray], float] = f2_value):
        self.n = n
        self.dim = n
        self.fn = fn

    def zeros(self) -> np.ndarray:
        return np.zeros(self.n)

    def add(self, state: np.ndarray, a: int, delta: float) -> None:
        state[a - 1] += delta

    def estimate(self, state: np.ndarray) -> float:
        return float(self.fn(state))

    def estimate_sum(self, base: np.ndarray, state: np.ndarray) -> float:
        return float(self.fn(base + state))


@lru_cache(maxsize=16)
def _shared_sign_matrix(seed: SeedPath, n: int, rows: int) -> SignMatrix:
    return SignMatrix(seed, n, rows)


@lru_cache(maxsize=16)
def _shared_cauchy(seed: SeedPath, n: int, rows: int) -> CauchyOperator:
    return CauchyOperator(seed, n, rows)


# ---------------------------------------------------------------- F2 sketch


@dataclass
class F2Sketch:
    seed: SeedPath
    n: int
    g: int
    b: int
    state: np.ndarray

    @property
    def rows(self) -> int:
        return self.g * self.b

    def _matrix(self) -> SignMatrix:
        return _shared_sign_matrix(self.seed, self.n, self.rows)

    def update(self, a: int, delta: int) -> None:
        """In-place update; the functional form is f2_update."""
        K.add_signed(self.state, self._matrix().column(a), float(delta))

    def estimate(self) -> float:
        return float(K.group_estimate(self.state, self.g, self.b))

    def copy(self) -> "F2Sketch":
        return F2Sketch(self.seed, self.n, self.g, self.b, self.state.copy())

    def compatible(self, other: "F2Sketch") -> bool:
        return (self.seed, self.n, self.g, self.b) == (other.seed, other.n, other.g, other.b)

    def to_bytes(self) -> bytes:
        return _pack(KIND_F2, self.seed, self.n, (self.g, self.b), self.state)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "F2Sketch":
        kind, seed, n, shape, state = _unpack(blob)
        if kind != KIND_F2:
            raise ValueError("blob does not hold an F2 sketch")
        g, b = shape
        return cls(seed, n, g, b, state)


def f2_new(seed: SeedPath, n: int, eps_s: float, delta_s: float,
           memory_cap: int = MEMORY_CAP_WORDS) -> F2Sketch:
    g, b = f2_shape(eps_s, delta_s)
    if g * b > memory_cap:
        raise SizingError(
            f"sketch needs {g * b} words, cap is {memory_cap}",
            {"g": g, "b": b, "eps_s": eps_s, "delta_s": delta_s},
        )
    return F2Sketch(seed, n, g, b, np.zeros(g * b))


def f2_update(s: F2Sketch, u: Update) -> F2Sketch:
    if not 1 <= u.a <= s.n:
        raise IndexError(f"coordinate {u.a} outside [1, {s.n}]")
    out = s.copy()
    out.update(u.a, u.delta)
    return out


def combine(s1, s2, alpha: float, beta: float):
    """alpha * s1 + beta * s2 for two sketches under the same matrix."""
    if type(s1) is not type(s2) or not s1.compatible(s2):
        raise IncompatibleSketch("sketches were built from different matrices")
    out = s1.copy()
    out.state = alpha * s1.state + beta * s2.state
    return out


def f2_estimate(s: F2Sketch) -> float:
    return s.estimate()


# ---------------------------------------------------------------- L1 sketch


@dataclass
class L1Sketch:
    seed: SeedPath
    n: int
    rows: int
    state: np.ndarray

    def _operator(self) -> CauchyOperator:
        return _shared_cauchy(self.seed, self.n, self.rows)

    def update(self, a: int, delta: int) -> None:
        self._operator().add(self.state, a, delta)

    def estimate(self) -> float:
        return float(np.median(np.abs(self.state)))

    def copy(self) -> "L1Sketch":
        return L1Sketch(self.seed, self.n, self.rows, self.state.copy())

    def compatible(self, other: "L1Sketch") -> bool:
        return (self.seed, self.n, self.rows) == (other.seed, other.n, other.rows)

    def to_bytes(self) -> bytes:
        return _pack(KIND_L1, self.seed, self.n, (self.rows,), self.state)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "L1Sketch":
        kind, seed, n, shape, state = _unpack(blob)
        if kind != KIND_L1:
            raise ValueError("blob does not hold an L1 sketch")
        return cls(seed, n, shape[0], state)


def l1_new(seed: SeedPath, n: int, kappa: float = 1.1, delta_s: float = 0.05) -> L1Sketch:
    rows = l1_rows(kappa, delta_s)
    return L1Sketch(seed, n, rows, np.zeros(rows))


def l1_update(s: L1Sketch, u: Update) -> L1Sketch:
    if not 1 <= u.a <= s.n:
        raise IndexError(f"coordinate {u.a} outside [1, {s.n}]")
    out = s.copy()
    out.update(u.a, u.delta)
    return out


def l1_estimate(s: L1Sketch) -> float:
    return s.estimate()


# ---------------------------------------------------------------- oracle


class OracleSketch:
    """Keeps the full vector; the estimate is the exact function value."""

    def __init__(self, n: int, fn: Callable[[np.ndarray], float] = f2_value):
        self.n = n
        self.fn = fn
        self.state = np.zeros(n)

    def update(self, a: int, delta: int) -> None:
        if not 1 <= a <= self.n:
            raise IndexError(f"coordinate {a} outside [1, {self.n}]")
        self.state[a - 1] += delta

    def estimate(self) -> float:
        return float(self.fn(self.state))

    def copy(self) -> "OracleSketch":
        out = OracleSketch(self.n, self.fn)
        out.state = self.state.copy()
        return out

    def compatible(self, other: "OracleSketch") -> bool:
        return self.n == other.n and self.fn is other.fn


# ---------------------------------------------------------------- blobs

_HEADER = struct.Struct("<4sHBIqH")


def _pack(kind: int, seed: SeedPath, n: int, shape: tuple[int, ...], state: np.ndarray) -> bytes:
    parts = [_HEADER.pack(MAGIC, BLOB_VERSION, kind, n, seed.master_seed, len(seed.path))]
    for triple in seed.path:
        parts.append(struct.pack("<qqq", *triple))
    parts.append(struct.pack("<B", len(shape)))
    parts.append(struct.pack(f"<{len(shape)}I", *shape))
    data = np.ascontiguousarray(state, dtype="<f8")
    parts.append(struct.pack("<Q", data.size))
    parts.append(data.tobytes())
    return b"".join(parts)


def _unpack(blob: bytes):
    magic, version, kind, n, master, depth = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise ValueError("not a sketch blob")
    if version != BLOB_VERSION:
        raise ValueError(f"unsupported sketch blob version {version}")
    off = _HEADER.size
    path = []
    for _ in range(depth):
        path.append(struct.unpack_from("<qqq", blob, off))
        off += 24
    (nshape,) = struct.unpack_from("<B", blob, off)
    off += 1
    shape = struct.unpack_from(f"<{nshape}I", blob, off)
    off += 4 * nshape
    (size,) = struct.unpack_from("<Q", blob, off)
    off += 8
    state = np.frombuffer(blob, dtype="<f8", count=size, offset=off).astype(np.float64)
    return kind, SeedPath(master, tuple(path)), n, tuple(shape), state
