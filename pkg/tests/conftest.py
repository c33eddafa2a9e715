import numpy as np
import pytest

from pqkv.pq_core import Codebook, PQConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_codebook_pair(cfg: PQConfig, rng: np.random.Generator,
                       spread: float = 1.0) -> tuple[Codebook, Codebook]:
    """Random (untrained) codebooks with the right geometry."""
    shape = (cfg.M, cfg.ksub, cfg.dsub)
    cb_K = Codebook(config=cfg,
                    centroids=(spread * rng.standard_normal(shape)).astype(np.float32),
                    kind="key")
    cb_V = Codebook(config=cfg,
                    centroids=(spread * rng.standard_normal(shape)).astype(np.float32),
                    kind="value")
    return cb_K, cb_V


def centroid_stream(cb: Codebook, codes: np.ndarray) -> np.ndarray:
    """Rows built exactly from centroids, so encoding is lossless."""
    cfg = cb.config
    out = np.empty((codes.shape[0], cfg.d), dtype=np.float32)
    for i in range(cfg.M):
        out[:, i * cfg.dsub : (i + 1) * cfg.dsub] = cb.centroids[i][codes[:, i]]
    return out
