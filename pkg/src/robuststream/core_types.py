"""Shared vocabulary: stream updates, dense reference vectors, parameters, seeds."""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

DELTA_MAX = 2**30
ENTRY_CAP = 2**62


class StreamError(ValueError):
    """An update violates the stream contract (range, ordering, magnitude)."""


class StreamOverrun(StreamError):
    """More updates than the sized stream length m."""


class SizingError(ValueError):
    """No parameter setting fits the configured limits."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class PrecisionOverflow(ArithmeticError):
    """A ledger coefficient left the admissible magnitude range."""


class IterateCapExceeded(RuntimeError):
    """A block updated its iterate more often than the sized cap allows."""


class IncompatibleSketch(ValueError):
    """Two sketches built from different matrices were combined."""


class Mode(str, enum.Enum):
    REFERENCE = "reference"
    STREAMING = "streaming"


class Role(enum.IntEnum):
    ESTIMATOR = 1
    CORRECTOR = 2
    AUXILIARY = 3


@dataclass(frozen=True, slots=True)
class Update:
    t: int
    a: int
    delta: int

    def check(self, n: int, delta_max: int = DELTA_MAX) -> None:
        if not 1 <= self.a <= n:
            raise IndexError(f"coordinate {self.a} outside [1, {n}]")
        if abs(self.delta) > delta_max:
            raise StreamError(f"|delta|={abs(self.delta)} exceeds delta_max={delta_max}")


class FrequencyVector:
    """Dense integer frequency vector; reference and test use only.

    Coordinates are 1-based at the API boundary, like updates.
    """

    __slots__ = ("entries",)

    def __init__(self, n: int | None = None, entries: np.ndarray | None = None):
        if entries is None:
            if n is None:
                raise ValueError("need n or entries")
            entries = np.zeros(n, dtype=np.int64)
        self.entries = np.asarray(entries, dtype=np.int64)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    def copy(self) -> "FrequencyVector":
        return FrequencyVector(entries=self.entries.copy())

    def add_inplace(self, a: int, delta: int) -> None:
        if not 1 <= a <= self.n:
            raise IndexError(f"coordinate {a} outside [1, {self.n}]")
        value = int(self.entries[a - 1]) + int(delta)
        if abs(value) > ENTRY_CAP:
            raise StreamError(f"entry {a} would reach {value}, beyond 2^62")
        self.entries[a - 1] = value

    def f2(self) -> int:
        # Python ints so the square of a large entry stays exact.
        return sum(int(v) * int(v) for v in self.entries if v)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FrequencyVector):
            return NotImplemented
        return bool(np.array_equal(self.entries, other.entries))

    def __repr__(self) -> str:
        nz = np.flatnonzero(self.entries)
        body = ", ".join(f"{i + 1}:{self.entries[i]}" for i in nz[:8])
        more = "" if nz.size <= 8 else f", ... ({nz.size} nonzero)"
        return f"FrequencyVector(n={self.n}, {{{body}{more}}})"


def apply_update(v: FrequencyVector, u: Update) -> FrequencyVector:
    out = v.copy()
    out.add_inplace(u.a, u.delta)
    return out


@dataclass(frozen=True)
class Params:
    n: int
    m: int
    eps: float
    B: int
    H: int
    eta: float
    L_max: int
    g: int
    b: int
    delta_fail: float
    precision_scale: float = 2.0**-20
    magnitude_cap: float = 2.0**40
    mode: Mode = Mode.STREAMING
    profile: str = "desk"
    sketch_eps: float = 0.0
    sketch_delta: float = 0.0
    delta_max: int = DELTA_MAX
    constants: dict = field(default_factory=dict)

    @property
    def r(self) -> int:
        return self.g * self.b

    def with_mode(self, mode: Mode | str) -> "Params":
        return replace(self, mode=Mode(mode))

    def validate(self) -> None:
        if self.B**self.H < self.m:
            raise SizingError(f"B^H = {self.B}^{self.H} < m = {self.m}")
        if self.L_max < 1:
            raise SizingError("L_max must be at least 1")
        if not 0 < self.delta_fail < 1:
            raise SizingError(f"delta_fail={self.delta_fail} outside (0, 1)")
        if not 0 < self.eps < 1:
            raise SizingError(f"eps={self.eps} outside (0, 1)")


_PATH_RECORD = struct.Struct("<qqq")


@dataclass(frozen=True, slots=True)
class SeedPath:
    master_seed: int
    path: tuple[tuple[int, int, int], ...] = ()

    def digest(self) -> int:
        """64-bit key for this path, keyed by the master seed."""
        key = (self.master_seed & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little")
        h = hashlib.blake2b(key=key, digest_size=8)
        for level, ordinal, role in self.path:
            h.update(_PATH_RECORD.pack(level, ordinal, role))
        return int.from_bytes(h.digest(), "little")

    def rng(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.digest()))

    def to_list(self) -> list:
        return [self.master_seed, [list(p) for p in self.path]]

    @classmethod
    def from_list(cls, data) -> "SeedPath":
        master, path = data
        return cls(int(master), tuple(tuple(int(x) for x in p) for p in path))


def derive_seed(master: SeedPath, level: int, ordinal: int, role: Role | int) -> SeedPath:
    if level < 1:
        raise ValueError(f"level must be >= 1, got {level}")
    if ordinal < 0:
        raise ValueError(f"ordinal must be >= 0, got {ordinal}")
    return SeedPath(master.master_seed, master.path + ((int(level), int(ordinal), int(role)),))


def child_seed(master_seed: int, *labels: int) -> int:
    """Derive an independent 63-bit integer seed from a master seed and labels."""
    key = (master_seed & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little")
    h = hashlib.blake2b(key=key, digest_size=8, person=b"childsd")
    for label in labels:
        h.update(struct.pack("<q", int(label)))
    return int.from_bytes(h.digest(), "little") >> 1


def read_stream(path: str | Path) -> Iterator[Update]:
    """Read `t a delta` lines; blank lines and `#` comments are skipped."""
    last_t = 0
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split(" ")
            if len(parts) != 3:
                raise StreamError(f"{path}:{lineno}: expected 't a delta', got {text!r}")
            try:
                t, a, delta = (int(p) for p in parts)
            except ValueError as exc:
                raise StreamError(f"{path}:{lineno}: {exc}") from None
            if t <= last_t:
                raise StreamError(f"{path}:{lineno}: time {t} not after {last_t}")
            last_t = t
            yield Update(t, a, delta)


def write_stream(path: str | Path, updates: Iterable[Update]) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for u in updates:
            fh.write(f"{u.t} {u.a} {u.delta}\n")
