"""Distribution studies: channel statistics, outlier isolation, and the
outlier-sensitivity comparison between product quantization and uniform
integer quantization.

Sensitivity here is reconstruction-MSE based: how much of a quantizer's
error disappears when the largest-magnitude elements are stored at full
precision instead. A scheme that is robust to outliers shows near-zero
sensitivity.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import pq_core
from .pq_core import PQConfig

__all__ = [
    "ChannelStats",
    "SensitivityReport",
    "channel_stats",
    "isolate_outliers",
    "sensitivity_study",
    "compare_quantizers",
]


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray
    absmax: np.ndarray
    global_absmax: float
    outlier_channels: list[int]
    outlier_threshold: float

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("mean", "std", "absmax"):
            d[k] = d[k].tolist()
        return d


@dataclass
class SensitivityReport:
    err_full: float
    err_filtered: float
    sensitivity: float
    quantizer: str = "pq"
    fraction: float = 0.01
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def channel_stats(X: np.ndarray, outlier_k: float = 5.0) -> ChannelStats:
    """Per-channel mean/std/absmax; channels whose std exceeds
    outlier_k times the median std are flagged."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("channel_stats requires an (n >= 2, d) tensor")
    mean = X.mean(axis=0)
    std = X.std(axis=0, ddof=1)
    absmax = np.abs(X).max(axis=0)
    threshold = outlier_k * float(np.median(std))
    outliers = sorted(int(c) for c in np.flatnonzero(std > threshold))
    return ChannelStats(
        mean=mean,
        std=std,
        absmax=absmax,
        global_absmax=float(np.abs(X).max()),
        outlier_channels=outliers,
        outlier_threshold=threshold,
    )


def isolate_outliers(X: np.ndarray, fraction: float,
                     ) -> tuple[list[tuple[int, int, float]], np.ndarray]:
    """Extract the ceil(fraction*n*d) largest-|value| elements.

    Returns the sparse entries (row, col, value) and a filtered copy of
    X with those positions replaced by their channel mean, so codebook
    training sees a de-spiked distribution. Scattering the sparse values
    back reconstructs X exactly.
    """
    X = np.asarray(X, dtype=np.float64)
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must be in [0, 1)")
    X_filtered = X.copy()
    if fraction == 0.0 or X.size == 0:
        return [], X_filtered

    n_out = int(np.ceil(fraction * X.size))
    flat = np.abs(X).ravel()
    idx = np.argpartition(flat, -n_out)[-n_out:]
    rows, cols = np.unravel_index(idx, X.shape)
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]

    channel_mean = X.mean(axis=0)
    entries = [(int(r), int(c), float(X[r, c])) for r, c in zip(rows, cols)]
    X_filtered[rows, cols] = channel_mean[cols]
    return entries, X_filtered


def _pq_mse(X: np.ndarray, config: PQConfig) -> float:
    cb = pq_core.train_codebooks(X, config)
    X_hat = pq_core.reconstruct(pq_core.assign_codes(X, cb), cb)
    return float(np.mean((X - X_hat) ** 2))


def _int_mse(X: np.ndarray, nbits: int, mode: str = "asymmetric",
             per_channel: bool = False) -> float:
    X = np.asarray(X, dtype=np.float64)
    if per_channel:
        err = 0.0
        for c in range(X.shape[1]):
            q, params = pq_core.integer_quantize(X[:, c], nbits, mode)
            err += float(np.sum((X[:, c] - pq_core.integer_dequantize(q, params)) ** 2))
        return err / X.size
    q, params = pq_core.integer_quantize(X, nbits, mode)
    return float(np.mean((X - pq_core.integer_dequantize(q, params)) ** 2))


def _filtered_mse(X: np.ndarray, fraction: float, reconstruct_fn) -> float:
    """MSE when the top-|value| fraction is stored full precision: the
    quantizer sees the de-spiked tensor and the sparse entries are
    scattered back exactly before comparing against X."""
    entries, X_filtered = isolate_outliers(X, fraction)
    X_hat = reconstruct_fn(X_filtered)
    for r, c, v in entries:
        X_hat[r, c] = v
    return float(np.mean((X - X_hat) ** 2))


def sensitivity_study(X: np.ndarray, pq_config: PQConfig,
                      fraction: float = 0.01,
                      quantizer: str = "pq",
                      int_nbits: int | None = None) -> SensitivityReport:
    """How much of the quantization error is attributable to the top
    `fraction` of outliers: (err_full - err_filtered) / err_full."""
    X = np.asarray(X, dtype=np.float64)

    if quantizer == "pq":
        def reconstruct_fn(Y):
            cb = pq_core.train_codebooks(Y, pq_config)
            return pq_core.reconstruct(pq_core.assign_codes(Y, cb), cb).astype(
                np.float64
            )

        err_full = _pq_mse(X, pq_config)
    elif quantizer == "int":
        nbits = int_nbits or max(1, round(pq_core.bits_per_value(pq_config)))

        def reconstruct_fn(Y):
            q, params = pq_core.integer_quantize(Y, nbits)
            return pq_core.integer_dequantize(q, params)

        err_full = _int_mse(X, nbits)
    else:
        raise ValueError(f"unknown quantizer {quantizer!r}")

    if fraction == 0.0:
        err_filtered = err_full
    else:
        err_filtered = _filtered_mse(X, fraction, reconstruct_fn)

    sensitivity = 0.0 if err_full == 0.0 else (err_full - err_filtered) / err_full
    return SensitivityReport(
        err_full=err_full,
        err_filtered=err_filtered,
        sensitivity=sensitivity,
        quantizer=quantizer,
        fraction=fraction,
    )


def compare_quantizers(X: np.ndarray, pq_config: PQConfig,
                       int_nbits: int) -> dict[str, float]:
    """Reconstruction MSE of PQ vs per-tensor and per-channel integer
    quantization on identical data."""
    X = np.asarray(X, dtype=np.float64)
    return {
        "mse_pq": _pq_mse(X, pq_config),
        "mse_int_per_tensor": _int_mse(X, int_nbits),
        "mse_int_per_channel": _int_mse(X, int_nbits, per_channel=True),
        "bits_per_value_pq": pq_core.bits_per_value(pq_config),
        "bits_per_value_int": float(int_nbits),
    }
