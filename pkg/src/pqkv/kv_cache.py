"""Per-layer quantized code store plus full-precision recent buffer.

Tokens enter through the recent buffer and are later batch-encoded
("flushed") into the code store. The flush may run inline, on a
background thread, or be driven manually by tests; in every mode the
externally visible states are identical after a drain barrier, and
snapshots always cover each token exactly once. The single publication
point is the atomic bump of the published code count after a batch's
rows are fully written.
"""

from __future__ import annotations

import threading
import time
from collections import deque
from dataclasses import dataclass

import numpy as np

from .pq_core import Codebook, CodesMatrix, assign_codes

__all__ = ["LayerKVCache", "CacheSnapshot"]


@dataclass(frozen=True)
class CacheSnapshot:
    """Immutable view of the cache: published codes + recent rows.

    Covers tokens [0, n_total) exactly once; the quantized span is
    [0, n_q) and the recent rows are [n_q, n_total).
    """

    codes_K: CodesMatrix
    codes_V: CodesMatrix
    recent_K: np.ndarray
    recent_V: np.ndarray
    n_q: int
    n_total: int


class LayerKVCache:
    """KV store for one layer/head with deferred batch quantization.

    Args:
        cb_K, cb_V: Trained key/value codebooks (same geometry).
        recent_capacity: Target full-precision window R; R=0 keeps every
            non-current token quantized (stress configuration).
        flush_threshold: Batch size R_f for scheduled flushes.
        worker: "sync" flushes inline on append, "thread" runs a
            background flusher, "manual" leaves flushing to the caller
            (flush_step / drain).
    """

    def __init__(self, cb_K: Codebook, cb_V: Codebook,
                 recent_capacity: int = 32, flush_threshold: int = 32,
                 worker: str = "sync"):
        if cb_K.config != cb_V.config:
            raise ValueError("key/value codebooks must share one PQConfig")
        if cb_K.kind != "key" or cb_V.kind != "value":
            raise ValueError("expected a (key, value) codebook pair")
        if recent_capacity < 0 or flush_threshold < 1:
            raise ValueError("recent_capacity >= 0 and flush_threshold >= 1 required")
        if worker not in ("sync", "thread", "manual"):
            raise ValueError(f"unknown worker mode {worker!r}")

        self.cb_K = cb_K
        self.cb_V = cb_V
        self.config = cb_K.config
        self.recent_capacity = recent_capacity
        self.flush_threshold = flush_threshold
        self.worker = worker

        cap = 1024
        self._store_k = np.zeros((cap, self.config.M), dtype=self.config.code_dtype)
        self._store_v = np.zeros((cap, self.config.M), dtype=self.config.code_dtype)
        self._n_q = 0
        self._recent: deque[tuple[np.ndarray, np.ndarray]] = deque()
        self._n_total = 0

        self._lock = threading.Lock()        # guards published state
        self._flush_lock = threading.Lock()  # serializes flushers
        self.inline_flush_seconds = 0.0

        self._stop = False
        self._wake = threading.Condition(self._lock)
        self._flusher_idle = threading.Condition(self._lock)
        self._busy = False
        self._thread: threading.Thread | None = None
        if worker == "thread":
            self._thread = threading.Thread(target=self._flusher_loop, daemon=True)
            self._thread.start()

    # -- state queries ---------------------------------------------------

    @property
    def n_total(self) -> int:
        return self._n_total

    @property
    def n_q(self) -> int:
        return self._n_q

    def recent_len(self) -> int:
        with self._lock:
            return len(self._recent)

    def _flush_needed_locked(self) -> bool:
        # whole batches only: any flush schedule drains to the same state
        return len(self._recent) >= self.flush_threshold

    # -- writes ----------------------------------------------------------

    def _check_row(self, x: np.ndarray, name: str) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32).ravel()
        if x.shape[0] != self.config.d:
            raise ValueError(f"{name} width {x.shape[0]} != d {self.config.d}")
        return x

    def prefill_ingest(self, K: np.ndarray, V: np.ndarray) -> None:
        """Encode prompt tokens, keeping the trailing min(R, n) rows
        full-precision in the recent buffer."""
        K = np.asarray(K, dtype=np.float32)
        V = np.asarray(V, dtype=np.float32)
        if K.shape != V.shape or K.ndim != 2 or K.shape[1] != self.config.d:
            raise ValueError(f"bad prefill shapes K{K.shape} V{V.shape}")
        if self._n_total != len(self._recent) + self._n_q:
            raise RuntimeError("cache in inconsistent state")

        n = K.shape[0]
        keep = min(self.recent_capacity, n)
        n_enc = n - keep
        if n_enc > 0:
            ck = assign_codes(K[:n_enc], self.cb_K)
            cv = assign_codes(V[:n_enc], self.cb_V)
        with self._lock:
            if n_enc > 0:
                self._write_codes_locked(ck.codes, cv.codes)
            for t in range(n_enc, n):
                self._recent.append((K[t].copy(), V[t].copy()))
            self._n_total += n

    def append_decode(self, k_n: np.ndarray, v_n: np.ndarray) -> None:
        """Append the current token's full-precision KV pair; schedule a
        flush when the recent buffer crosses its threshold."""
        k = self._check_row(k_n, "k_n")
        v = self._check_row(v_n, "v_n")
        with self._lock:
            self._recent.append((k, v))
            self._n_total += 1
            needed = self._flush_needed_locked()
            if needed and self.worker == "thread":
                self._wake.notify()
        if needed and self.worker == "sync":
            t0 = time.perf_counter()
            while True:
                with self._lock:
                    if not self._flush_needed_locked():
                        break
                    batch = self.flush_threshold
                self._flush_batch(batch, scheduled=True)
            self.inline_flush_seconds += time.perf_counter() - t0

    def flush_recent(self, batch: int) -> None:
        """Explicitly encode and publish the oldest `batch` recent entries."""
        if batch < 0:
            raise ValueError("batch must be >= 0")
        with self._lock:
            if batch > len(self._recent):
                raise ValueError(
                    f"batch {batch} exceeds recent length {len(self._recent)}"
                )
        if batch > 0:
            self._flush_batch(batch)

    def flush_step(self) -> bool:
        """Run one scheduled flush if the trigger condition holds.
        Returns True if anything was flushed (manual worker mode)."""
        with self._lock:
            if not self._flush_needed_locked():
                return False
            batch = self.flush_threshold
        self._flush_batch(batch, scheduled=True)
        return True

    def drain(self) -> None:
        """Barrier: run/await flushes until no flush is pending."""
        while self.flush_step():
            pass
        if self.worker == "thread":
            with self._lock:
                while self._busy:
                    self._flusher_idle.wait()

    # -- flush machinery ---------------------------------------------------

    def _flush_batch(self, batch: int, scheduled: bool = False) -> None:
        with self._flush_lock:
            with self._lock:
                # a concurrent flusher may have emptied the buffer since
                # this flush was scheduled; whole batches only
                if scheduled and not self._flush_needed_locked():
                    return
                batch = min(batch, len(self._recent))
                if batch == 0:
                    return
                rows_k = np.stack([self._recent[i][0] for i in range(batch)])
                rows_v = np.stack([self._recent[i][1] for i in range(batch)])
            # encoding happens outside the state lock
            ck = assign_codes(rows_k, self.cb_K)
            cv = assign_codes(rows_v, self.cb_V)
            with self._lock:
                self._write_codes_locked(ck.codes, cv.codes)
                for _ in range(batch):
                    self._recent.popleft()

    def _write_codes_locked(self, ck: np.ndarray, cv: np.ndarray) -> None:
        n_new = self._n_q + ck.shape[0]
        if n_new > self._store_k.shape[0]:
            cap = max(n_new, 2 * self._store_k.shape[0])
            grown_k = np.zeros((cap, self.config.M), dtype=self.config.code_dtype)
            grown_v = np.zeros_like(grown_k)
            grown_k[: self._n_q] = self._store_k[: self._n_q]
            grown_v[: self._n_q] = self._store_v[: self._n_q]
            self._store_k, self._store_v = grown_k, grown_v
        self._store_k[self._n_q : n_new] = ck
        self._store_v[self._n_q : n_new] = cv
        self._n_q = n_new  # single publication point

    def _flusher_loop(self) -> None:
        while True:
            with self._lock:
                while not self._stop and not self._flush_needed_locked():
                    self._busy = False
                    self._flusher_idle.notify_all()
                    self._wake.wait()
                if self._stop:
                    self._busy = False
                    self._flusher_idle.notify_all()
                    return
                self._busy = True
                batch = self.flush_threshold
            self._flush_batch(batch, scheduled=True)

    def close(self) -> None:
        if self._thread is not None:
            with self._lock:
                self._stop = True
                self._wake.notify_all()
            self._thread.join()
            self._thread = None

    def load_snapshot(self, snap: CacheSnapshot) -> None:
        """Restore a previously captured state into an empty cache."""
        if self._n_total != 0:
            raise RuntimeError("load_snapshot requires an empty cache")
        if snap.codes_K.M != self.config.M or snap.codes_K.nbits != self.config.nbits:
            raise ValueError("snapshot geometry does not match codebooks")
        with self._lock:
            self._write_codes_locked(snap.codes_K.codes, snap.codes_V.codes)
            for t in range(snap.recent_K.shape[0]):
                self._recent.append(
                    (snap.recent_K[t].copy(), snap.recent_V[t].copy())
                )
            self._n_total = snap.n_total

    # -- reads -------------------------------------------------------------

    def snapshot(self) -> CacheSnapshot:
        """Consistent view covering every stored token exactly once."""
        with self._lock:
            n_q = self._n_q
            store_k = self._store_k
            store_v = self._store_v
            if self._recent:
                recent_k = np.stack([kv[0] for kv in self._recent])
                recent_v = np.stack([kv[1] for kv in self._recent])
            else:
                recent_k = np.empty((0, self.config.d), dtype=np.float32)
                recent_v = np.empty((0, self.config.d), dtype=np.float32)
            n_total = self._n_total
        # published rows are never rewritten, so these views are stable
        return CacheSnapshot(
            codes_K=CodesMatrix(codes=store_k[:n_q], nbits=self.config.nbits),
            codes_V=CodesMatrix(codes=store_v[:n_q], nbits=self.config.nbits),
            recent_K=recent_k,
            recent_V=recent_v,
            n_q=n_q,
            n_total=n_total,
        )

    def memory_usage(self) -> dict[str, int]:
        """Exact byte accounting of current storage."""
        with self._lock:
            cell = self.config.cell_width
            codes_bytes = 2 * self._n_q * self.config.M * cell
            recent_bytes = 2 * len(self._recent) * self.config.d * 4
        return {
            "codes_bytes": codes_bytes,
            "recent_bytes": recent_bytes,
            "codebook_bytes": self.cb_K.nbytes() + self.cb_V.nbytes(),
        }
