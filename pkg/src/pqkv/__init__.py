"""Product-quantized KV cache with lookup-table attention decoding."""

from .pq_core import (
    PQConfig,
    Codebook,
    CodesMatrix,
    IntQuantParams,
    PRESETS,
    kmeans_train,
    train_codebooks,
    assign_codes,
    reconstruct,
    integer_quantize,
    integer_dequantize,
    bits_per_value,
)
from .kv_cache import LayerKVCache, CacheSnapshot
from .attention import (
    Lut,
    SoftmaxPartial,
    Counters,
    build_key_lut,
    score_tokens,
    quantized_partial,
    dense_partial,
    merge_partials,
    finalize,
    decode_step,
    prefill_attention,
)
from .analysis import (
    ChannelStats,
    SensitivityReport,
    channel_stats,
    isolate_outliers,
    sensitivity_study,
    compare_quantizers,
)

__version__ = "0.1.0"
