"""Tight loops for code scoring and probability-mass accumulation.

Compiled with numba when available; the numpy fallbacks are
semantically identical (same float64 accumulation order per token).
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional extra
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


@njit(cache=True)
def _score_codes_jit(lut, codes, out):
    n, M = codes.shape
    for t in range(n):
        s = 0.0
        for i in range(M):
            s += lut[i, codes[t, i]]
        out[t] = s


@njit(cache=True)
def _accumulate_mass_jit(codes, p, h):
    n, M = codes.shape
    for t in range(n):
        pt = p[t]
        for i in range(M):
            h[i, codes[t, i]] += pt


def score_codes(lut: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """scores[t] = sum_i lut[i, codes[t, i]], float64."""
    out = np.empty(codes.shape[0], dtype=np.float64)
    if HAVE_NUMBA:
        _score_codes_jit(lut, codes, out)
    else:
        np.sum(lut[np.arange(codes.shape[1])[None, :], codes], axis=1, out=out)
    return out


def accumulate_mass(codes: np.ndarray, p: np.ndarray, ksub: int) -> np.ndarray:
    """h[i, c] = sum of p[t] over tokens with codes[t, i] == c."""
    M = codes.shape[1]
    h = np.zeros((M, ksub), dtype=np.float64)
    if HAVE_NUMBA:
        _accumulate_mass_jit(codes, p, h)
    else:
        for i in range(M):
            h[i] = np.bincount(codes[:, i], weights=p, minlength=ksub)
    return h
