from dataclasses import asdict, dataclass
from enum import Enum

from ..errors import ConfigError


class MLPVariant(str, Enum):
    GLU = "GLU"
    NON_GLU = "NonGLU"


class AttentionVariant(str, Enum):
    MHA = "MHA"
    MQA = "MQA"
    GQA = "GQA"


def infer_attention_variant(num_heads, num_kv_heads):
    if num_kv_heads == num_heads:
        return AttentionVariant.MHA
    if num_kv_heads == 1:
        return AttentionVariant.MQA
    return AttentionVariant.GQA


@dataclass(frozen=True)
class ModelConfig:
    num_heads: int
    num_kv_heads: int
    head_dim: int
    intermediate_dim: int
    mlp_variant: MLPVariant = MLPVariant.GLU
    attention_variant: AttentionVariant = None
    use_rope: bool = True
    rope_base: float = 10000.0
    num_layers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "mlp_variant", MLPVariant(self.mlp_variant))
        if self.attention_variant is None:
            object.__setattr__(self, "attention_variant", infer_attention_variant(self.num_heads, self.num_kv_heads))
        else:
            object.__setattr__(self, "attention_variant", AttentionVariant(self.attention_variant))
        self.validate()

    @property
    def hidden_dim(self):
        return self.num_heads * self.head_dim

    @property
    def kv_dim(self):
        return self.num_kv_heads * self.head_dim

    @property
    def glu(self):
        return self.mlp_variant is MLPVariant.GLU

    def validate(self):
        for name in ("num_heads", "num_kv_heads", "head_dim", "intermediate_dim", "num_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.num_heads % self.num_kv_heads:
            raise ConfigError(f"num_heads {self.num_heads} not divisible by num_kv_heads {self.num_kv_heads}")
        v = self.attention_variant
        if v is AttentionVariant.MHA and self.num_kv_heads != self.num_heads:
            raise ConfigError("MHA requires num_kv_heads == num_heads")
        if v is AttentionVariant.MQA and self.num_kv_heads != 1:
            raise ConfigError("MQA requires a single kv head")
        if v is AttentionVariant.GQA and self.num_kv_heads in (1, self.num_heads) and self.num_heads > 1:
            raise ConfigError("GQA requires 1 < num_kv_heads < num_heads")
        if self.use_rope and self.head_dim % 2:
            raise ConfigError(f"RoPE needs an even head_dim, got {self.head_dim}")
        if self.rope_base <= 0:
            raise ConfigError("rope_base must be positive")

    def matrix_shapes(self):
        h, hkv, m = self.hidden_dim, self.kv_dim, self.intermediate_dim
        shapes = {"q": (h, h), "k": (h, hkv), "v": (h, hkv), "o": (h, h), "up": (h, m)}
        if self.glu:
            shapes["gate"] = (h, m)
        shapes["down"] = (m, h)
        return shapes

    def to_dict(self):
        d = asdict(self)
        d["mlp_variant"] = self.mlp_variant.value
        d["attention_variant"] = self.attention_variant.value
        return d
