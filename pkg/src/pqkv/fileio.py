"""Binary file formats (all little-endian).

Tensor file:   raw float32 values + a JSON sidecar {rows, cols, description}.
Codebook file: magic "PQKV", version u32, kind u8, d u32, M u32, nbits u32,
               then M * 2^nbits * dsub float32 centroids, subspace-major.
Cache dump:    magic "PQKC", version u32, d u32, M u32, nbits u32, n_q u64,
               recent_len u32, then packed K codes, packed V codes, raw
               float32 recent K rows, raw float32 recent V rows.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .kv_cache import CacheSnapshot, LayerKVCache
from .pq_core import Codebook, CodesMatrix, PQConfig

__all__ = [
    "write_tensor",
    "read_tensor",
    "write_codebook",
    "read_codebook",
    "write_cache_dump",
    "read_cache_dump",
]

CODEBOOK_MAGIC = b"PQKV"
CACHE_MAGIC = b"PQKC"
FORMAT_VERSION = 1

_KINDS = {"key": 0, "value": 1}
_KINDS_REV = {v: k for k, v in _KINDS.items()}


class FormatError(ValueError):
    """Raised on malformed or mismatched binary files."""


def write_tensor(path: str | Path, X: np.ndarray, description: str = "") -> None:
    path = Path(path)
    X = np.ascontiguousarray(np.asarray(X, dtype="<f4"))
    if X.ndim != 2:
        raise ValueError("tensor files hold 2-D arrays")
    path.write_bytes(X.tobytes())
    sidecar = {"rows": int(X.shape[0]), "cols": int(X.shape[1]),
               "description": description}
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, indent=2) + "\n"
    )


def read_tensor(path: str | Path) -> np.ndarray:
    path = Path(path)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    if not sidecar_path.exists():
        raise FormatError(f"missing sidecar {sidecar_path}")
    meta = json.loads(sidecar_path.read_text())
    rows, cols = int(meta["rows"]), int(meta["cols"])
    raw = path.read_bytes()
    if len(raw) != rows * cols * 4:
        raise FormatError(
            f"{path}: expected {rows * cols * 4} bytes, found {len(raw)}"
        )
    return np.frombuffer(raw, dtype="<f4").reshape(rows, cols).copy()


def write_codebook(path: str | Path, cb: Codebook) -> None:
    cfg = cb.config
    header = CODEBOOK_MAGIC + struct.pack(
        "<IBIII", FORMAT_VERSION, _KINDS[cb.kind], cfg.d, cfg.M, cfg.nbits
    )
    body = np.ascontiguousarray(cb.centroids, dtype="<f4").tobytes()
    Path(path).write_bytes(header + body)


def read_codebook(path: str | Path, **config_overrides) -> Codebook:
    raw = Path(path).read_bytes()
    if raw[:4] != CODEBOOK_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, kind_id, d, M, nbits = struct.unpack_from("<IBIII", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if kind_id not in _KINDS_REV:
        raise FormatError(f"{path}: unknown kind tag {kind_id}")
    cfg = PQConfig(d=d, M=M, nbits=nbits, **config_overrides)
    offset = 4 + struct.calcsize("<IBIII")
    expect = cfg.M * cfg.ksub * cfg.dsub
    body = np.frombuffer(raw, dtype="<f4", offset=offset)
    if body.size != expect:
        raise FormatError(f"{path}: expected {expect} floats, found {body.size}")
    centroids = body.reshape(cfg.M, cfg.ksub, cfg.dsub).copy()
    return Codebook(config=cfg, centroids=centroids, kind=_KINDS_REV[kind_id])


def write_cache_dump(path: str | Path, snap: CacheSnapshot,
                     config: PQConfig) -> None:
    recent_len = snap.recent_K.shape[0]
    header = CACHE_MAGIC + struct.pack(
        "<IIIIQI", FORMAT_VERSION, config.d, config.M, config.nbits,
        snap.n_q, recent_len,
    )
    parts = [
        header,
        np.ascontiguousarray(snap.codes_K.codes).tobytes(),
        np.ascontiguousarray(snap.codes_V.codes).tobytes(),
        np.ascontiguousarray(snap.recent_K, dtype="<f4").tobytes(),
        np.ascontiguousarray(snap.recent_V, dtype="<f4").tobytes(),
    ]
    Path(path).write_bytes(b"".join(parts))


def read_cache_dump(path: str | Path) -> tuple[CacheSnapshot, PQConfig]:
    raw = Path(path).read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, d, M, nbits, n_q, recent_len = struct.unpack_from("<IIIIQI", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    cfg = PQConfig(d=d, M=M, nbits=nbits)
    offset = 4 + struct.calcsize("<IIIIQI")

    code_dtype = np.dtype("<u1" if nbits <= 8 else "<u2")
    codes_bytes = n_q * M * code_dtype.itemsize
    recent_bytes = recent_len * d * 4
    expect = offset + 2 * codes_bytes + 2 * recent_bytes
    if len(raw) != expect:
        raise FormatError(f"{path}: expected {expect} bytes, found {len(raw)}")

    def take(nbytes, dtype, shape):
        nonlocal offset
        arr = np.frombuffer(raw, dtype=dtype, count=int(np.prod(shape)),
                            offset=offset).reshape(shape).copy()
        offset += nbytes
        return arr

    codes_k = take(codes_bytes, code_dtype, (n_q, M))
    codes_v = take(codes_bytes, code_dtype, (n_q, M))
    recent_k = take(recent_bytes, "<f4", (recent_len, d))
    recent_v = take(recent_bytes, "<f4", (recent_len, d))

    if codes_k.size and int(max(codes_k.max(), codes_v.max())) >= cfg.ksub:
        raise FormatError(f"{path}: corrupted dump, code value >= 2^nbits")

    snap = CacheSnapshot(
        codes_K=CodesMatrix(codes=codes_k, nbits=nbits),
        codes_V=CodesMatrix(codes=codes_v, nbits=nbits),
        recent_K=recent_k,
        recent_V=recent_v,
        n_q=int(n_q),
        n_total=int(n_q) + recent_len,
    )
    return snap, cfg


def dump_cache(path: str | Path, cache: LayerKVCache) -> None:
    write_cache_dump(path, cache.snapshot(), cache.config)
