"""Product-quantization codec for KV vectors.

Splits d-dimensional vectors into M subspaces, trains a 2^nbits-entry
centroid codebook per subspace with k-means, and encodes each subvector
as the index of its nearest centroid. Also provides the uniform integer
quantization baseline used by the comparison studies.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "PQConfig",
    "Codebook",
    "CodesMatrix",
    "IntQuantParams",
    "kmeans_train",
    "train_codebooks",
    "assign_codes",
    "reconstruct",
    "integer_quantize",
    "integer_dequantize",
    "bits_per_value",
]


@dataclass(frozen=True)
class PQConfig:
    """Subspace geometry and training knobs for one codec.

    Args:
        d: Head dimension (scalars per vector).
        M: Number of subspaces; must divide d.
        nbits: Bits per subspace code, 1..16 (codebook size 2^nbits).
        kmeans_iters: Max Lloyd iterations per subspace.
        kmeans_tol: Relative distortion-improvement stop threshold.
        seed: PRNG seed for k-means++ initialization.
    """

    d: int
    M: int
    nbits: int
    kmeans_iters: int = 25
    kmeans_tol: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.M <= 0 or self.d <= 0:
            raise ValueError(f"d={self.d} and M={self.M} must be positive")
        if self.d % self.M != 0:
            raise ValueError(f"M={self.M} must divide d={self.d}")
        if not 1 <= self.nbits <= 16:
            raise ValueError(f"nbits={self.nbits} out of range [1, 16]")

    @property
    def dsub(self) -> int:
        return self.d // self.M

    @property
    def ksub(self) -> int:
        """Centroids per subspace."""
        return 1 << self.nbits

    @property
    def cell_width(self) -> int:
        """Bytes per stored code: 1 for nbits <= 8, else 2."""
        return 1 if self.nbits <= 8 else 2

    @property
    def code_dtype(self) -> np.dtype:
        return np.dtype(np.uint8 if self.nbits <= 8 else np.uint16)


# Named presets: (M, nbits) pairs, keyed by geometry rather than an
# effective-bit label (see bits_per_value for the actual rate).
PRESETS: dict[str, tuple[int, int]] = {
    "m64b8": (64, 8),
    "m32b12": (32, 12),
}


@dataclass
class Codebook:
    """Trained centroids for one codec (keys or values of one layer).

    centroids has shape (M, 2^nbits, dsub), float32. Immutable after
    training; safe to share across threads.
    """

    config: PQConfig
    centroids: np.ndarray
    kind: str = "key"  # "key" or "value"
    scope: str = "layer"

    def __post_init__(self):
        expect = (self.config.M, self.config.ksub, self.config.dsub)
        if self.centroids.shape != expect:
            raise ValueError(
                f"centroids shape {self.centroids.shape} != expected {expect}"
            )
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("codebook contains non-finite centroids")
        if self.kind not in ("key", "value"):
            raise ValueError(f"kind must be 'key' or 'value', got {self.kind!r}")

    def nbytes(self) -> int:
        return self.centroids.nbytes


@dataclass
class CodesMatrix:
    """Packed centroid indices, one row of M codes per token.

    codes has shape (n_tokens, M), dtype uint8 (nbits <= 8) or uint16.
    """

    codes: np.ndarray
    nbits: int

    def __post_init__(self):
        if self.codes.ndim != 2:
            raise ValueError("codes must be 2-D (n_tokens, M)")
        # cells as wide as nbits can't hold an out-of-range value
        if (self.codes.size and self.nbits < 8 * self.codes.dtype.itemsize
                and int(self.codes.max()) >= (1 << self.nbits)):
            raise ValueError("code value out of range for nbits")

    @property
    def n_tokens(self) -> int:
        return self.codes.shape[0]

    @property
    def M(self) -> int:
        return self.codes.shape[1]

    @property
    def cell_width(self) -> int:
        return self.codes.dtype.itemsize

    def nbytes(self) -> int:
        return self.codes.nbytes


@dataclass(frozen=True)
class IntQuantParams:
    """Scale/zero-point pair for uniform integer quantization."""

    nbits: int
    s: float
    z: int
    mode: str  # "symmetric" or "asymmetric"


def _squared_distances(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, (n, k), in float64."""
    X = np.asarray(X, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    d2 = (
        np.sum(X * X, axis=1)[:, None]
        - 2.0 * (X @ C.T)
        + np.sum(C * C, axis=1)[None, :]
    )
    np.maximum(d2, 0.0, out=d2)
    return d2


def _kmeans_plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding. Duplicates existing picks once all remaining
    points are at distance zero (fewer distinct points than k)."""
    n = X.shape[0]
    centroids = np.empty((k, X.shape[1]), dtype=np.float64)
    centroids[0] = X[rng.integers(n)]
    dist_sq = _squared_distances(X, centroids[:1]).ravel()
    for i in range(1, k):
        total = dist_sq.sum()
        if total <= 0.0:
            # exhausted distinct points; pad by cycling earlier picks
            for j in range(i, k):
                centroids[j] = centroids[j % i]
            break
        probs = dist_sq / total
        centroids[i] = X[rng.choice(n, p=probs)]
        dist_sq = np.minimum(dist_sq, _squared_distances(X, centroids[i : i + 1]).ravel())
    return centroids


def kmeans_train(
    samples: np.ndarray,
    k: int,
    iters: int = 25,
    tol: float = 1e-4,
    seed: int = 0,
) -> tuple[np.ndarray, list[float]]:
    """Lloyd k-means with k-means++ seeding.

    Returns the final centroids (k, dsub) and the distortion history
    (total within-cluster SSE after each assignment step), which is
    non-increasing by construction. Empty clusters are re-seeded to the
    point with the largest current assignment error.
    """
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] == 0:
        raise ValueError("k-means requires at least one sample")
    if k < 1:
        raise ValueError("k must be >= 1")
    if not np.all(np.isfinite(X)):
        raise ValueError("k-means samples must be finite")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_plusplus(X, k, rng)

    history: list[float] = []
    for _ in range(max(1, iters)):
        d2 = _squared_distances(X, centroids)
        labels = d2.argmin(axis=1)
        errs = d2[np.arange(X.shape[0]), labels]
        distortion = float(errs.sum())
        history.append(distortion)

        if len(history) >= 2:
            prev = history[-2]
            if prev <= 0.0 or (prev - distortion) <= tol * prev:
                break

        # mean update; reseed empties to the worst-covered point
        for j in range(k):
            mask = labels == j
            if mask.any():
                centroids[j] = X[mask].mean(axis=0)
        counts = np.bincount(labels, minlength=k)
        for j in np.flatnonzero(counts == 0):
            worst = int(errs.argmax())
            centroids[j] = X[worst]
            errs[worst] = 0.0

    return centroids.astype(np.float32), history


def train_codebooks(samples: np.ndarray, config: PQConfig, kind: str = "key",
                    scope: str = "layer") -> Codebook:
    """Train one codebook per subspace on (n, d) samples."""
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != config.d:
        raise ValueError(f"samples must be (n, {config.d}), got {X.shape}")
    if X.shape[0] < config.ksub:
        warnings.warn(
            f"training with {X.shape[0]} samples < {config.ksub} centroids; "
            "surplus centroid rows will be duplicates",
            stacklevel=2,
        )

    dsub = config.dsub
    centroids = np.empty((config.M, config.ksub, dsub), dtype=np.float32)
    for i in range(config.M):
        sub = X[:, i * dsub : (i + 1) * dsub]
        centroids[i], _ = kmeans_train(
            sub, config.ksub, config.kmeans_iters, config.kmeans_tol,
            seed=config.seed + i,
        )
    return Codebook(config=config, centroids=centroids, kind=kind, scope=scope)


def assign_codes(X: np.ndarray, cb: Codebook) -> CodesMatrix:
    """Encode (n, d) vectors to nearest-centroid indices per subspace.

    Ties break to the lowest centroid index.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != cb.config.d:
        raise ValueError(f"X must be (n, {cb.config.d}), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("X must be finite")

    cfg = cb.config
    dsub = cfg.dsub
    codes = np.empty((X.shape[0], cfg.M), dtype=cfg.code_dtype)
    for i in range(cfg.M):
        sub = X[:, i * dsub : (i + 1) * dsub]
        d2 = _squared_distances(sub, cb.centroids[i])
        codes[:, i] = d2.argmin(axis=1)
    return CodesMatrix(codes=codes, nbits=cfg.nbits)


def reconstruct(codes: CodesMatrix, cb: Codebook) -> np.ndarray:
    """Decode (n, M) codes back to (n, d) float32 vectors."""
    cfg = cb.config
    if codes.M != cfg.M:
        raise ValueError(f"codes have M={codes.M}, codebook expects {cfg.M}")
    if (codes.codes.size and cfg.ksub <= np.iinfo(codes.codes.dtype).max
            and int(codes.codes.max()) >= cfg.ksub):
        raise ValueError("corrupted cache: code value out of codebook range")

    n = codes.n_tokens
    out = np.empty((n, cfg.d), dtype=np.float32)
    dsub = cfg.dsub
    for i in range(cfg.M):
        out[:, i * dsub : (i + 1) * dsub] = cb.centroids[i][codes.codes[:, i]]
    return out


def bits_per_value(config: PQConfig) -> float:
    """Effective storage bits per scalar: M * nbits / d."""
    return config.M * config.nbits / config.d


def integer_quantize(X: np.ndarray, nbits: int, mode: str = "asymmetric",
                     ) -> tuple[np.ndarray, IntQuantParams]:
    """Uniform integer quantization with round-half-to-even.

    Asymmetric mode uses the full 2^n - 1 level range; symmetric mode
    centers at zero with 2^n - 2 levels (one bit reserved for sign) and
    zero point fixed at 0. A constant tensor degenerates to s=1 with all
    codes equal to the zero point.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    if not np.all(np.isfinite(X)):
        raise ValueError("cannot quantize non-finite values")
    if mode not in ("symmetric", "asymmetric"):
        raise ValueError(f"unknown mode {mode!r}")

    if mode == "symmetric":
        half = 1 << (nbits - 1)
        q_min, q_max = -(half - 1), half - 1
        amax = float(np.abs(X).max())
        if amax == 0.0:
            params = IntQuantParams(nbits=nbits, s=1.0, z=0, mode=mode)
            return np.zeros(X.shape, dtype=np.int32), params
        s = 2.0 * amax / (q_max - q_min)
        z = 0
    else:
        q_min, q_max = 0, (1 << nbits) - 1
        x_min, x_max = float(X.min()), float(X.max())
        if x_max == x_min:
            z = int(np.round(q_min))
            params = IntQuantParams(nbits=nbits, s=1.0, z=z, mode=mode)
            return np.full(X.shape, z, dtype=np.int32), params
        s = (x_max - x_min) / (q_max - q_min)
        z = int(np.round(q_min - x_min / s))

    Q = np.clip(np.round(X / s + z), q_min, q_max).astype(np.int32)
    return Q, IntQuantParams(nbits=nbits, s=s, z=z, mode=mode)


def integer_dequantize(Q_X: np.ndarray, params: IntQuantParams) -> np.ndarray:
    """Invert integer_quantize: X_hat = (Q_X - z) * s."""
    return (np.asarray(Q_X, dtype=np.float64) - params.z) * params.s
