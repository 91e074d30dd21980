"""
Temporally sparse attention through thresholded key deltas.

Adjacent keys of a sequence are often similar, so a key sequence is
stored as a dense first key plus sparse, thresholded differences.
Attention scores are then built recursively from the differences,
except in a window near the diagonal (prefill) or around the newest
token (decode), where they are computed exactly.

Example
-------
    >>> import numpy as np
    >>> import deltasparse
    >>> rng = deltasparse.make_generator(0)
    >>> q, k, v = (rng.standard_normal((64, 16)).astype(np.float32)
    ...            for _ in range(3))
    >>> cfg = deltasparse.HybridConfig(theta=0.1, gamma=0.1)
    >>> result = deltasparse.prefill_attention(q, k, v, cfg)
    >>> result.report.window
    6
"""

__version__ = '1.0.0'  # The package version
__author__ = 'deltasparse developers'

__all__ = [
    'DenseMatrix',
    'CausalMask',
    'matmul',
    'row_softmax',
    'dense_attention',
    'ConstructionStrategy',
    'DeltaEncoding',
    'build_delta_encoding',
    'delta_encode_step',
    'reconstruct',
    'element_sparsity',
    'delta_score_columns',
    'delta_score_single_query',
    'MacCounter',
    'ScoreMatrix',
    'Exactness',
    'HybridConfig',
    'prefill_window',
    'jigsaw_membership',
    'prefill_attention',
    'prefill_attention_ablation',
    'decode_step',
    'computational_sparsity',
    'DeltaKVCache',
    'cache_init',
    'cache_append',
    'cache_memory_report',
    'save_cache',
    'load_cache',
    'AttentionReport',
    'compare_to_oracle',
    'merge_reports',
    'DeltaAttentionHead',
    'run_head',
    'ExperimentConfig',
    'gen_synthetic',
    'make_generator',
    'run_experiment',
    'sweep',
    'dump_heatmap',
    'load_heatmap',
    'save_tensor',
    'load_tensor',
    'tensor_io',
]

from deltasparse.tensor import DenseMatrix, CausalMask, matmul, \
    row_softmax, dense_attention  # noqa: F401
from deltasparse.encoding import ConstructionStrategy, DeltaEncoding, \
    build_delta_encoding, delta_encode_step, reconstruct, \
    element_sparsity  # noqa: F401
from deltasparse.matmul import delta_score_columns, \
    delta_score_single_query, MacCounter, ScoreMatrix, \
    Exactness  # noqa: F401
from deltasparse.hybrid import HybridConfig, prefill_window, \
    jigsaw_membership, prefill_attention, prefill_attention_ablation, \
    decode_step, computational_sparsity  # noqa: F401
from deltasparse.cache import DeltaKVCache, cache_init, cache_append, \
    cache_memory_report, save_cache, load_cache  # noqa: F401
from deltasparse.report import AttentionReport, compare_to_oracle, \
    merge_reports  # noqa: F401
from deltasparse.engine import DeltaAttentionHead, run_head  # noqa: F401
from deltasparse.config import ExperimentConfig  # noqa: F401
from deltasparse.synthetic import gen_synthetic, \
    make_generator  # noqa: F401
from deltasparse.harness import run_experiment, sweep  # noqa: F401
from deltasparse.heatmap import dump_heatmap, load_heatmap  # noqa: F401
from deltasparse.tensorfile import save_tensor, load_tensor, \
    tensor_io  # noqa: F401
