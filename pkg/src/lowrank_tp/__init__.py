"""Low-rank tensor-parallel inference: decomposition, sharded pipelines, paged cache, cost model."""

from ._backend import BACKEND
from .costmodel import Convention, CostInputs, block_cost, compare_with_measured
from .decomposition import (
    DecompositionPlan,
    FactorPair,
    absorb_factor_chain,
    decompose_matrix,
    decompose_model,
    rank_from_ratio,
)
from .errors import LowRankTPError
from .kvcache import PagedDecodeSession
from .linalg import svd_jacobi, truncated_svd
from .parallel import TrafficLedger, WorkerGroup, all_gather, partition, reduce_sum
from .pipelines import ModelConfig, TPModel

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "Convention", "CostInputs", "DecompositionPlan", "FactorPair", "LowRankTPError",
    "ModelConfig", "PagedDecodeSession", "TPModel", "TrafficLedger", "WorkerGroup",
    "absorb_factor_chain", "all_gather", "block_cost", "compare_with_measured", "decompose_matrix",
    "decompose_model", "partition", "rank_from_ratio", "reduce_sum", "svd_jacobi", "truncated_svd",
]
