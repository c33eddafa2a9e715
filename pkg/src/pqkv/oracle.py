"""Brute-force reference implementations for tests.

Everything here is intentionally naive: explicit loops, no lookup
tables, no blocking, float64 throughout. The optimized paths are tested
against these, so they must share no code with them.
"""

from __future__ import annotations

import numpy as np

from .pq_core import Codebook, CodesMatrix

__all__ = ["naive_attention", "naive_quantized_attention", "exhaustive_assign"]


def naive_attention(q: np.ndarray, K: np.ndarray, V: np.ndarray,
                    scale: float | None = None) -> np.ndarray:
    """softmax(scale * q K^T) V with a single max-subtraction."""
    q = np.asarray(q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if K.shape[0] == 0:
        raise ValueError("attention over zero tokens is undefined")
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[-1])

    scores = np.array([scale * float(np.dot(q, K[t])) for t in range(K.shape[0])])
    m = scores.max()
    w = np.exp(scores - m)
    return (w[:, None] * V).sum(axis=0) / w.sum()


def naive_reconstruct(codes: CodesMatrix, cb: Codebook) -> np.ndarray:
    """Row-by-row codebook lookup, no vectorized gather."""
    cfg = cb.config
    out = np.empty((codes.n_tokens, cfg.d), dtype=np.float64)
    for t in range(codes.n_tokens):
        parts = [cb.centroids[i][codes.codes[t, i]] for i in range(cfg.M)]
        out[t] = np.concatenate(parts)
    return out


def naive_quantized_attention(
    q: np.ndarray,
    codes_K: CodesMatrix,
    codes_V: CodesMatrix,
    cb_K: Codebook,
    cb_V: Codebook,
    recent_K: np.ndarray,
    recent_V: np.ndarray,
    k_n: np.ndarray,
    v_n: np.ndarray,
    scale: float | None = None,
) -> np.ndarray:
    """Fully dequantize the coded span, append dense rows, run naive
    attention over the lot."""
    K_hat = naive_reconstruct(codes_K, cb_K)
    V_hat = naive_reconstruct(codes_V, cb_V)
    recent_K = np.asarray(recent_K, dtype=np.float64).reshape(-1, cb_K.config.d)
    recent_V = np.asarray(recent_V, dtype=np.float64).reshape(-1, cb_V.config.d)
    K_all = np.vstack([K_hat, recent_K, np.asarray(k_n, dtype=np.float64)[None, :]])
    V_all = np.vstack([V_hat, recent_V, np.asarray(v_n, dtype=np.float64)[None, :]])
    return naive_attention(q, K_all, V_all, scale)


def exhaustive_assign(X: np.ndarray, cb: Codebook) -> CodesMatrix:
    """Literal double-loop nearest-centroid search (lowest index wins ties)."""
    X = np.asarray(X, dtype=np.float64)
    cfg = cb.config
    dsub = cfg.dsub
    codes = np.zeros((X.shape[0], cfg.M), dtype=cfg.code_dtype)
    for t in range(X.shape[0]):
        for i in range(cfg.M):
            sub = X[t, i * dsub : (i + 1) * dsub]
            best, best_d = 0, np.inf
            for c in range(cfg.ksub):
                diff = sub - cb.centroids[i][c]
                d = float(np.dot(diff, diff))
                if d < best_d:
                    best, best_d = c, d
            codes[t, i] = best
    return CodesMatrix(codes=codes, nbits=cfg.nbits)
