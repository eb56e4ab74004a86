"""JSON run configuration shared by the CLI commands.

Example::

    {
      "model": {"num_heads": 4, "num_kv_heads": 2, "head_dim": 8,
                "intermediate_dim": 64, "mlp_variant": "GLU", "use_rope": true,
                "num_layers": 1},
      "ranks": {"q": 16, "k": 8, "v": 8, "o": 16, "up": 16, "gate": 16, "down": 16},
      "tp": [1, 2, 4],
      "seed": 0,
      "cache": {"block_size": 4, "num_blocks": 64, "max_tokens": 128},
      "convention": "both"
    }

``ranks`` may be replaced by ``"compression_ratio": 0.4``; explicit ranks
win when both are present.
"""

import json
from dataclasses import dataclass, field

from .costmodel import Convention, CostInputs
from .decomposition import DecompositionPlan, rank_from_ratio
from .errors import ConfigError
from .pipelines.config import ModelConfig

CONVENTIONS = {"paper": (Convention.PAPER_TABLE,), "measured": (Convention.PIPELINE_MEASURED,),
               "both": (Convention.PAPER_TABLE, Convention.PIPELINE_MEASURED)}


@dataclass
class CacheSettings:
    block_size: int = 4
    num_blocks: int = 64
    max_tokens: int = 128


@dataclass
class RunConfig:
    model: ModelConfig
    explicit_ranks: dict = None
    compression_ratio: float = None
    tp: list = field(default_factory=lambda: [1, 2])
    seed: int = 0
    cache: CacheSettings = field(default_factory=CacheSettings)
    convention: str = "both"
    vocab_size: int = 32

    def __post_init__(self):
        if self.convention not in CONVENTIONS:
            raise ConfigError(f"convention must be one of {sorted(CONVENTIONS)}")
        if not self.tp or any(int(p) < 1 for p in self.tp):
            raise ConfigError("tp must list positive worker counts")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        shapes = self.model.matrix_shapes()
        ranks = self.ranks()
        for name, shape in shapes.items():
            if name not in ranks:
                raise ConfigError(f"no rank for matrix {name!r}")
            if not 1 <= ranks[name] <= min(shape):
                raise ConfigError(f"rank {ranks[name]} for {name!r} outside [1, {min(shape)}]")

    def ranks(self):
        shapes = self.model.matrix_shapes()
        if self.explicit_ranks:
            return {n: int(self.explicit_ranks[n]) for n in shapes if n in self.explicit_ranks}
        if self.compression_ratio is None:
            raise ConfigError("config needs explicit ranks or a compression_ratio")
        return {n: rank_from_ratio(self.compression_ratio, *s) for n, s in shapes.items()}

    def plan(self):
        return DecompositionPlan.uniform(self.ranks(), self.model.num_layers)

    def cost_inputs(self):
        return CostInputs.from_config(self.model, self.ranks())

    def conventions(self):
        return CONVENTIONS[self.convention]

    def to_dict(self):
        return {
            "model": self.model.to_dict(),
            "ranks": self.ranks(),
            "tp": list(self.tp),
            "seed": self.seed,
            "cache": vars(self.cache),
            "convention": self.convention,
            "vocab_size": self.vocab_size,
        }


def from_dict(d, ranks_override=None, tp_override=None, seed_override=None, convention_override=None):
    try:
        model = ModelConfig(**d["model"])
    except KeyError:
        raise ConfigError("config has no 'model' section") from None
    except TypeError as exc:
        raise ConfigError(f"bad model section: {exc}") from None
    ranks = ranks_override or d.get("ranks")
    try:
        cache = CacheSettings(**d.get("cache", {}))
    except TypeError as exc:
        raise ConfigError(f"bad cache section: {exc}") from None
    return RunConfig(
        model=model,
        explicit_ranks=ranks,
        compression_ratio=d.get("compression_ratio"),
        tp=[int(p) for p in (tp_override or d.get("tp", [1, 2]))],
        seed=int(seed_override if seed_override is not None else d.get("seed", 0)),
        cache=cache,
        convention=convention_override or d.get("convention", "both"),
        vocab_size=int(d.get("vocab_size", 32)),
    )


def load(path, **overrides):
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return from_dict(d, **overrides)
