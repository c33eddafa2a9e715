"""Synthetic data generation, correctness replay, and the decode-loop
benchmark (time-per-output-token and latency breakdown).

Benchmark numbers are machine-relative: they compare the quantized
attention path against a full-precision baseline on the same host, and
only cover the attention + cache-management portion of a decode step
(no FFN or projection work).
"""

from __future__ import annotations

import statistics
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import oracle, pq_core
from .attention import Counters, decode_step
from .kv_cache import LayerKVCache
from .pq_core import Codebook, PQConfig

__all__ = [
    "SynthSpec",
    "BenchConfig",
    "generate_stream",
    "synth_kv",
    "train_pair",
    "relative_error",
    "verify_stream",
    "bench_decode",
    "latency_breakdown",
]


@dataclass
class SynthSpec:
    """Synthetic KV stream shaped like observed cache distributions:
    Gaussian base, a few high-variance channels, and rare large spikes."""

    n_tokens: int
    d: int = 128
    seed: int = 0
    sigma: float = 1.0
    outlier_channels: list[int] = field(default_factory=list)
    outlier_scale: float = 20.0
    outlier_rate: float = 0.0
    outlier_magnitude: float = 50.0

    def __post_init__(self):
        if any(not 0 <= c < self.d for c in self.outlier_channels):
            raise ValueError("outlier_channels must lie in [0, d)")
        if self.sigma <= 0 or self.outlier_scale <= 0:
            raise ValueError("scales must be positive")
        if not 0.0 <= self.outlier_rate < 1.0:
            raise ValueError("outlier_rate must be in [0, 1)")


def generate_stream(spec: SynthSpec, rng: np.random.Generator | None = None,
                    ) -> np.ndarray:
    """One (n_tokens, d) float32 tensor matching `spec`. Deterministic per seed."""
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    X = rng.normal(0.0, spec.sigma, size=(spec.n_tokens, spec.d))
    if spec.outlier_channels and spec.n_tokens:
        X[:, spec.outlier_channels] *= spec.outlier_scale
    if spec.outlier_rate > 0.0 and spec.n_tokens:
        spikes = rng.random(X.shape) < spec.outlier_rate
        X[spikes] += rng.choice([-1.0, 1.0], size=int(spikes.sum())) * \
            spec.outlier_magnitude
    return X.astype(np.float32)


def synth_kv(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    """Key and value streams. Keys carry the channel outliers; values
    are isotropic apart from element spikes."""
    rng = np.random.default_rng(spec.seed)
    K = generate_stream(spec, rng)
    v_spec = SynthSpec(
        n_tokens=spec.n_tokens, d=spec.d, sigma=spec.sigma,
        outlier_rate=spec.outlier_rate,
        outlier_magnitude=spec.outlier_magnitude,
    )
    V = generate_stream(v_spec, rng)
    return K, V


def train_pair(K_samples: np.ndarray, V_samples: np.ndarray,
               config: PQConfig) -> tuple[Codebook, Codebook]:
    cb_K = pq_core.train_codebooks(K_samples, config, kind="key")
    cb_V = pq_core.train_codebooks(V_samples, config, kind="value")
    return cb_K, cb_V


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(b)), 1e-30)
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b))) / denom


def verify_stream(
    K: np.ndarray,
    V: np.ndarray,
    cb_K: Codebook,
    cb_V: Codebook,
    recent_capacity: int = 0,
    flush_threshold: int = 1,
    n_prefill: int | None = None,
    seed: int = 0,
    strategy: str = "auto",
) -> dict:
    """Replay a decode loop, checking every step against the
    dequantize-then-naive oracle. Returns the max relative error."""
    d = cb_K.config.d
    n = K.shape[0]
    if n_prefill is None:
        n_prefill = n // 2
    rng = np.random.default_rng(seed)

    cache = LayerKVCache(cb_K, cb_V, recent_capacity=recent_capacity,
                         flush_threshold=flush_threshold, worker="sync")
    if n_prefill > 0:
        cache.prefill_ingest(K[:n_prefill], V[:n_prefill])

    max_err = 0.0
    steps = 0
    for t in range(n_prefill, n):
        q = rng.standard_normal(d)
        snap = cache.snapshot()
        expected = oracle.naive_quantized_attention(
            q, snap.codes_K, snap.codes_V, cb_K, cb_V,
            snap.recent_K, snap.recent_V, K[t], V[t],
        )
        got = decode_step(q, K[t], V[t], cache, cb_K, cb_V, strategy=strategy)
        max_err = max(max_err, relative_error(got, expected))
        steps += 1

    return {"max_rel_error": max_err, "steps": steps,
            "n_q": cache.n_q, "recent_len": cache.recent_len()}



def _default_channels(d: int) -> list[int]:
    """A couple of inflated-std channels, scaled to the head dimension."""
    return sorted({c for c in (7, 63) if c < d} or {0})

@dataclass
class BenchConfig:
    context_lengths: list[int] = field(
        default_factory=lambda: [1024, 4096, 16384, 32768]
    )
    gen_tokens: int = 100
    heads: int = 8
    d: int = 128
    M: int = 64
    nbits: int = 8
    recent_capacity: int = 32
    flush_threshold: int = 32
    repetitions: int = 5
    warmup: int = 2
    block_size: int = 8192
    train_samples: int = 4096
    seed: int = 0

    def __post_init__(self):
        if sorted(self.context_lengths) != list(self.context_lengths):
            raise ValueError("context_lengths must be ascending")
        if self.repetitions < 3:
            warnings.warn(
                f"repetitions={self.repetitions} < 3; medians will be noisy",
                stacklevel=2,
            )

    def pq_config(self) -> PQConfig:
        return PQConfig(d=self.d, M=self.M, nbits=self.nbits, seed=self.seed)


def _fp_decode_loop(q_steps, K_buf, V_buf, n_ctx, k_steps, v_steps,
                    scale) -> float:
    """Full-precision baseline: one vectorized attention per step over a
    preallocated float32 KV buffer. Returns elapsed seconds."""
    n = n_ctx
    t0 = time.perf_counter()
    for q, k, v in zip(q_steps, k_steps, v_steps):
        K_buf[n] = k
        V_buf[n] = v
        n += 1
        scores = scale * (K_buf[:n] @ q)
        scores -= scores.max()
        p = np.exp(scores)
        _ = (p @ V_buf[:n]) / p.sum()
    return time.perf_counter() - t0


def _pq_decode_loop(q_steps, k_steps, v_steps, cache, cb_K, cb_V,
                    block_size, counters) -> float:
    t0 = time.perf_counter()
    for q, k, v in zip(q_steps, k_steps, v_steps):
        decode_step(q, k, v, cache, cb_K, cb_V, block_size=block_size,
                    counters=counters)
    return time.perf_counter() - t0


def bench_decode(config: BenchConfig, progress=None) -> list[dict]:
    """TPOT comparison of the quantized path vs the full-precision
    baseline at each context length. One row per context length."""
    pq_cfg = config.pq_config()
    rng = np.random.default_rng(config.seed)
    spec = SynthSpec(n_tokens=config.train_samples, d=config.d,
                     seed=config.seed, outlier_channels=_default_channels(config.d))
    K_train, V_train = synth_kv(spec)
    cb_K, cb_V = train_pair(K_train, V_train, pq_cfg)

    rows = []
    for ctx in config.context_lengths:
        n_total = ctx + config.gen_tokens
        stream = SynthSpec(n_tokens=n_total, d=config.d,
                           seed=config.seed + ctx, outlier_channels=_default_channels(config.d))
        K, V = synth_kv(stream)
        q_steps = rng.standard_normal((config.gen_tokens, config.d))
        k_steps = K[ctx:]
        v_steps = V[ctx:]
        scale = 1.0 / np.sqrt(config.d)

        # encode the prefix once; each repetition restores this state
        seed_cache = LayerKVCache(cb_K, cb_V,
                                  recent_capacity=config.recent_capacity,
                                  flush_threshold=config.flush_threshold,
                                  worker="sync")
        seed_cache.prefill_ingest(K[:ctx], V[:ctx])
        prefill_snap = seed_cache.snapshot()

        fp_times, pq_times = [], []
        counters = Counters()
        bytes_pq_run = 0
        for rep in range(config.warmup + config.repetitions):
            # full-precision baseline
            K_buf = np.zeros((n_total, config.d), dtype=np.float32)
            V_buf = np.zeros_like(K_buf)
            K_buf[:ctx] = K[:ctx]
            V_buf[:ctx] = V[:ctx]
            fp_t = _fp_decode_loop(q_steps, K_buf, V_buf, ctx,
                                   k_steps, v_steps, scale)

            # quantized path
            cache = LayerKVCache(cb_K, cb_V,
                                 recent_capacity=config.recent_capacity,
                                 flush_threshold=config.flush_threshold,
                                 worker="thread")
            cache.load_snapshot(prefill_snap)
            rep_counters = Counters()
            pq_t = _pq_decode_loop(q_steps, k_steps, v_steps, cache,
                                   cb_K, cb_V, config.block_size,
                                   rep_counters)
            cache.close()

            if rep >= config.warmup:
                fp_times.append(fp_t)
                pq_times.append(pq_t)
                counters = rep_counters

        # bytes touched per run, fp16-equivalent accounting for dense rows
        bytes_fp = sum(
            2 * (ctx + i + 1) * config.d * 2 for i in range(config.gen_tokens)
        )
        dense_rows = sum(
            min(ctx + i, config.recent_capacity) + 1
            for i in range(config.gen_tokens)
        )
        bytes_pq_run = counters.code_bytes_read + 2 * dense_rows * config.d * 2

        tpot_fp = statistics.median(fp_times) / config.gen_tokens * 1e3
        tpot_pq = statistics.median(pq_times) / config.gen_tokens * 1e3
        row = {
            "context_len": ctx,
            "tpot_ms_fp": tpot_fp,
            "tpot_ms_pq": tpot_pq,
            "bytes_fp": bytes_fp,
            "bytes_pq": bytes_pq_run,
            "bytes_ratio": bytes_pq_run / bytes_fp,
            "speedup": tpot_fp / tpot_pq,
        }
        rows.append(row)
        if progress is not None:
            progress(row)
    return rows


PHASES = ["lut_build", "score", "value_agg", "merge", "dense",
          "flush_wait", "append"]


def latency_breakdown(config: BenchConfig, context_len: int | None = None,
                      worker: str = "thread") -> dict:
    """Per-phase timing of one instrumented decode loop."""
    pq_cfg = config.pq_config()
    ctx = context_len if context_len is not None else config.context_lengths[-1]
    rng = np.random.default_rng(config.seed)

    spec = SynthSpec(n_tokens=config.train_samples, d=config.d,
                     seed=config.seed, outlier_channels=_default_channels(config.d))
    cb_K, cb_V = train_pair(*synth_kv(spec), pq_cfg)

    stream = SynthSpec(n_tokens=ctx + config.gen_tokens, d=config.d,
                       seed=config.seed + ctx, outlier_channels=_default_channels(config.d))
    K, V = synth_kv(stream)
    cache = LayerKVCache(cb_K, cb_V, recent_capacity=config.recent_capacity,
                         flush_threshold=config.flush_threshold, worker=worker)
    cache.prefill_ingest(K[:ctx], V[:ctx])
    cache.drain()

    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    for i in range(config.gen_tokens):
        q = rng.standard_normal(config.d)
        decode_step(q, K[ctx + i], V[ctx + i], cache, cb_K, cb_V,
                    block_size=config.block_size, timings=timings)
    total = time.perf_counter() - t0
    if worker == "thread":
        cache.close()

    out = {phase: timings.get(phase, 0.0) for phase in PHASES}
    out["total"] = total
    out["context_len"] = ctx
    out["worker"] = worker
    return out
