"""Replace dense layer weights with down/up factor pairs.

Weights act on row vectors (``y = x @ W``), so a factor pair for a
``d_in x d_out`` matrix is ``down`` (``d_in x l``) followed by ``up``
(``l x d_out``).
"""

from dataclasses import dataclass, field
from functools import reduce

import numpy as np

from .errors import ParameterError, PlanError, RankError, ShapeError
from .linalg import as_matrix, truncated_svd

ATTENTION_MATRICES = ("q", "k", "v", "o")
MLP_MATRICES = ("up", "gate", "down")
MATRIX_NAMES = ATTENTION_MATRICES + MLP_MATRICES


@dataclass(frozen=True)
class FactorPair:
    down: np.ndarray
    up: np.ndarray

    def __post_init__(self):
        if self.down.ndim != 2 or self.up.ndim != 2 or self.down.shape[1] != self.up.shape[0]:
            raise ShapeError(f"factor shapes {self.down.shape} and {self.up.shape} do not share a rank")
        if self.rank > min(self.d_in, self.d_out):
            raise RankError(f"rank {self.rank} exceeds min({self.d_in}, {self.d_out})")

    @property
    def rank(self):
        return self.down.shape[1]

    @property
    def d_in(self):
        return self.down.shape[0]

    @property
    def d_out(self):
        return self.up.shape[1]

    @property
    def param_count(self):
        return self.down.size + self.up.size

    def product(self):
        return self.down @ self.up


def decompose_matrix(w, rank):
    res = truncated_svd(w, rank)
    return FactorPair(res.left_factor, res.right_factor)


def rank_from_ratio(compression_ratio, d_in, d_out):
    """Rank retained for a matrix at ``compression_ratio`` (fraction removed).

    Rounds half away from zero on ``(1 - ratio) * min(d_in, d_out)``: a 40%
    ratio on 1024 gives 614, on 8192 gives 4915.
    """
    if not 0 <= compression_ratio < 1:
        raise ParameterError(f"compression ratio must lie in [0, 1), got {compression_ratio}")
    kept = (1 - compression_ratio) * min(d_in, d_out)
    return max(1, int(np.floor(kept + 0.5)))


@dataclass
class DecompositionPlan:
    """Per-layer, per-matrix ranks. ``layers[i]`` maps a matrix name to its rank."""

    layers: list = field(default_factory=list)

    @classmethod
    def uniform(cls, ranks, num_layers):
        return cls([dict(ranks) for _ in range(num_layers)])

    @classmethod
    def from_ratio(cls, ratio, weights):
        layers = []
        for layer in weights:
            layers.append({name: rank_from_ratio(ratio, *w.shape) for name, w in layer.items()})
        return cls(layers)

    def rank(self, layer, name):
        try:
            return self.layers[layer][name]
        except (IndexError, KeyError):
            raise PlanError(f"plan has no rank for layer {layer} matrix {name!r}") from None

    def validate(self, weights):
        for i, layer in enumerate(weights):
            for name, w in layer.items():
                r = self.rank(i, name)
                bound = min(np.shape(w))
                if not 1 <= r <= bound:
                    raise PlanError(f"layer {i} matrix {name!r}: rank {r} outside [1, {bound}]")


@dataclass
class DecomposedModel:
    factors: list
    dense: list
    plan: DecompositionPlan

    def layer(self, i):
        return self.factors[i]


def decompose_model(weights, plan):
    """Decompose every matrix of every layer; dense originals are kept for comparison."""
    plan.validate(weights)
    factors = []
    for i, layer in enumerate(weights):
        factors.append({name: decompose_matrix(w, plan.rank(i, name)) for name, w in layer.items()})
    return DecomposedModel(factors=factors, dense=[dict(layer) for layer in weights], plan=plan)


def _product(mats):
    return reduce(np.matmul, mats)


def absorb_factor_chain(chain):
    """Fold a chain of linear factors into one down/up pair.

    The cut goes at the smallest inner dimension (leftmost on ties), which
    keeps the stored parameter count minimal.
    """
    chain = [as_matrix(m, f"chain[{i}]") for i, m in enumerate(chain)]
    if len(chain) < 2:
        raise ShapeError("a factor chain needs at least two matrices")
    for i in range(len(chain) - 1):
        if chain[i].shape[1] != chain[i + 1].shape[0]:
            raise ShapeError(f"chain[{i}] {chain[i].shape} does not conform to chain[{i + 1}] {chain[i + 1].shape}")
    inner = [m.shape[1] for m in chain[:-1]]
    cut = int(np.argmin(inner))
    down = _product(chain[: cut + 1])
    up = _product(chain[cut + 1:])
    # the minimal inner dimension may exceed min(d_in, d_out) for odd chains
    if down.shape[1] > min(down.shape[0], up.shape[1]):
        raise ShapeError(f"chain inner dimension {down.shape[1]} exceeds the smaller outer dimension")
    return FactorPair(np.ascontiguousarray(down), np.ascontiguousarray(up))
