"""Compiled inner loops: Mersenne-prime hashing, column accumulation, group estimates."""

import numba as nb
import numpy as np

MERSENNE61 = (1 << 61) - 1


@nb.njit(cache=True, inline="always")
def _mulmod61(a, b):
    m32 = np.uint64(0xFFFFFFFF)
    m29 = np.uint64((1 << 29) - 1)
    p = np.uint64(MERSENNE61)
    a_hi = a >> np.uint64(32)
    a_lo = a & m32
    b_hi = b >> np.uint64(32)
    b_lo = b & m32
    lo = a_lo * b_lo
    mid = a_hi * b_lo + a_lo * b_hi
    hi = a_hi * b_hi
    # 2^64 = 8 and 2^61 = 1 modulo p.
    r = ((hi << np.uint64(3)) + (mid >> np.uint64(29)) + ((mid & m29) << np.uint64(32))
         + (lo >> np.uint64(61)) + (lo & p))
    r = (r & p) + (r >> np.uint64(61))
    if r >= p:
        r -= p
    return r


@nb.njit(cache=True, inline="always")
def _poly_hash(coef, j, x):
    p = np.uint64(MERSENNE61)
    acc = coef[3, j]
    for k in range(2, -1, -1):
        acc = _mulmod61(acc, x) + coef[k, j]
        if acc >= p:
            acc -= p
    return acc


BITS_PER_HASH = 32


@nb.njit(cache=True, nogil=True)
def sign_column(coef, x, out):
    """Signs of coordinate x for every row.

    Row 32*j + k takes bit k of the hash of x under polynomial j, so each row
    is a 4-wise independent sign function of the coordinate.
    """
    xx = np.uint64(x)
    rows = out.shape[0]
    one = np.uint64(1)
    for j in range(coef.shape[1]):
        h = _poly_hash(coef, j, xx)
        base = j * 32
        top = min(32, rows - base)
        for k in range(top):
            out[base + k] = np.int8(1) - np.int8(2) * np.int8((h >> np.uint64(k)) & one)


@nb.njit(cache=True, nogil=True)
def add_hashed(state, coef, x, delta):
    """state += delta * column(x), generating the column on the fly."""
    xx = np.uint64(x)
    rows = state.shape[0]
    one = np.uint64(1)
    for j in range(coef.shape[1]):
        h = _poly_hash(coef, j, xx)
        base = j * 32
        top = min(32, rows - base)
        for k in range(top):
            bit = np.float64((h >> np.uint64(k)) & one)
            state[base + k] += delta - 2.0 * delta * bit


@nb.njit(cache=True, nogil=True)
def hash_column(coef, x, out):
    xx = np.uint64(x)
    for j in range(coef.shape[1]):
        out[j] = _poly_hash(coef, j, xx)


@nb.njit(cache=True, nogil=True)
def add_signed(state, column, delta):
    for j in range(state.shape[0]):
        state[j] += delta * column[j]


@nb.njit(cache=True, nogil=True)
def add_signed_many(states, columns, delta):
    for k in range(states.shape[0]):
        s = states[k]
        c = columns[k]
        for j in range(s.shape[0]):
            s[j] += delta * c[j]


@nb.njit(cache=True, nogil=True)
def _median_inplace(vals):
    vals.sort()
    g = vals.shape[0]
    if g % 2 == 1:
        return vals[g // 2]
    return 0.5 * (vals[g // 2 - 1] + vals[g // 2])


@nb.njit(cache=True, nogil=True, fastmath=True)
def group_estimate(state, g, b):
    vals = np.empty(g)
    for k in range(g):
        seg = state[k * b:(k + 1) * b]
        s = 0.0
        for j in range(b):
            s += seg[j] * seg[j]
        vals[k] = s / b
    return _median_inplace(vals)


@nb.njit(cache=True, nogil=True, fastmath=True)
def group_estimate_sum(base, state, g, b):
    """Median-of-means estimate of the vector whose image is base + state."""
    vals = np.empty(g)
    for k in range(g):
        bseg = base[k * b:(k + 1) * b]
        sseg = state[k * b:(k + 1) * b]
        s = 0.0
        for j in range(b):
            v = bseg[j] + sseg[j]
            s += v * v
        vals[k] = s / b
    return _median_inplace(vals)
