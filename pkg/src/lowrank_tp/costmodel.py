"""Per-token communication volume of one transformer block, in elements.

All-gather of an ``n``-wide result costs ``n``; reduce-sum of ``n`` elements
costs ``2n``. Two conventions price the low-rank-communication block:

``PAPER_TABLE``
    second sub-layers reduce-sum the full hidden width (``2h`` each) and the
    MLP all-gather counts ``l_up + l_gate + l_down``.
``PIPELINE_MEASURED``
    what :mod:`lowrank_tp.pipelines` actually does: the reduce-sum happens in
    low-rank space (``2 l_o`` and ``2 l_down``) and the MLP all-gather covers
    only ``l_up + l_gate``.

:func:`block_cost` additionally emits a ``compat_aggregate`` row, a coarser
count that charges a single ``2h`` reduce-sum per block.
"""

from dataclasses import asdict, dataclass, field
from enum import Enum
from fractions import Fraction

from .errors import ParameterError, ReconciliationError
from .parallel import ALL_GATHER, REDUCE_SUM


class Convention(str, Enum):
    PAPER_TABLE = "paper"
    PIPELINE_MEASURED = "measured"


class Status(str, Enum):
    UNOPTIMIZED = "Unoptimized"
    DEINFER = "DeInfer"


@dataclass(frozen=True)
class CostInputs:
    h: int
    h_kv: int
    m: int
    l_q: int
    l_k: int
    l_v: int
    l_o: int
    l_up: int
    l_gate: int
    l_down: int
    num_layers: int = 1
    glu: bool = True

    def __post_init__(self):
        for name in ("h", "h_kv", "m", "l_q", "l_k", "l_v", "l_o", "l_up", "l_down", "num_layers"):
            if int(getattr(self, name)) < 1:
                raise ParameterError(f"{name} must be a positive integer")
        if self.glu and self.l_gate < 1:
            raise ParameterError("l_gate must be positive for a GLU MLP")
        bounds = {
            "l_q": self.h, "l_k": min(self.h, self.h_kv), "l_v": min(self.h, self.h_kv),
            "l_o": self.h, "l_up": min(self.h, self.m), "l_gate": min(self.h, self.m), "l_down": min(self.m, self.h),
        }
        for name, bound in bounds.items():
            if name == "l_gate" and not self.glu:
                continue
            if getattr(self, name) > bound:
                raise ParameterError(f"{name}={getattr(self, name)} exceeds its matrix bound {bound}")

    @classmethod
    def from_config(cls, config, ranks):
        """Build from a ``ModelConfig`` and a ``{"q": .., ...}`` rank map."""
        return cls(h=config.hidden_dim, h_kv=config.kv_dim, m=config.intermediate_dim,
                   l_q=ranks["q"], l_k=ranks["k"], l_v=ranks["v"], l_o=ranks["o"],
                   l_up=ranks["up"], l_gate=ranks.get("gate", 0) if config.glu else 0,
                   l_down=ranks["down"], num_layers=config.num_layers, glu=config.glu)


@dataclass(frozen=True)
class CostRow:
    layer: str
    status: str
    all_gather: int
    reduce_sum: int
    convention: str = ""

    @property
    def total(self):
        return self.all_gather + self.reduce_sum

    def to_dict(self):
        d = asdict(self)
        d["total"] = self.total
        return d


def attention_cost(inputs, status, convention=Convention.PAPER_TABLE):
    status, convention = Status(status), Convention(convention)
    if status is Status.UNOPTIMIZED:
        return CostRow("attention", status.value, 0, 2 * (2 * inputs.h + 2 * inputs.h_kv))
    gather = inputs.l_q + inputs.l_k + inputs.l_v
    reduce = 2 * inputs.h if convention is Convention.PAPER_TABLE else 2 * inputs.l_o
    return CostRow("attention", status.value, gather, reduce, convention.value)


def mlp_cost(inputs, status, convention=Convention.PAPER_TABLE):
    status, convention = Status(status), Convention(convention)
    gate = inputs.l_gate if inputs.glu else 0
    if status is Status.UNOPTIMIZED:
        widths = (2 * inputs.m + inputs.h) if inputs.glu else (inputs.m + inputs.h)
        return CostRow("mlp", status.value, 0, 2 * widths)
    if convention is Convention.PAPER_TABLE:
        return CostRow("mlp", status.value, inputs.l_up + gate + inputs.l_down, 2 * inputs.h, convention.value)
    return CostRow("mlp", status.value, inputs.l_up + gate, 2 * inputs.l_down, convention.value)


def _saved(opt, unopt):
    return 1 - Fraction(opt, unopt)


@dataclass
class CostReport:
    inputs: CostInputs
    rows: list = field(default_factory=list)
    totals: dict = field(default_factory=dict)
    saved: dict = field(default_factory=dict)

    def saved_percent(self):
        return {k: round(float(v) * 100, 2) for k, v in self.saved.items()}

    def to_dict(self):
        return {
            "inputs": asdict(self.inputs),
            "rows": [r.to_dict() for r in self.rows],
            "totals": self.totals,
            "saved_percent": self.saved_percent(),
            "saved_fraction": {k: f"{v.numerator}/{v.denominator}" for k, v in self.saved.items()},
        }


def block_cost(inputs, conventions=(Convention.PAPER_TABLE, Convention.PIPELINE_MEASURED)):
    """Rows and totals for one block; ``totals`` also carries model-wide values (``x num_layers``)."""
    report = CostReport(inputs)
    un_attn = attention_cost(inputs, Status.UNOPTIMIZED)
    un_mlp = mlp_cost(inputs, Status.UNOPTIMIZED)
    report.rows += [un_attn, un_mlp]
    unopt = un_attn.total + un_mlp.total
    report.totals["unoptimized"] = {"all_gather": 0, "reduce_sum": unopt, "total": unopt}
    for conv in conventions:
        conv = Convention(conv)
        a = attention_cost(inputs, Status.DEINFER, conv)
        m = mlp_cost(inputs, Status.DEINFER, conv)
        report.rows += [a, m]
        gather, reduce = a.all_gather + m.all_gather, a.reduce_sum + m.reduce_sum
        report.totals[conv.value] = {"all_gather": gather, "reduce_sum": reduce, "total": gather + reduce}
        report.saved[conv.value] = _saved(gather + reduce, unopt)
    # one 2h reduce-sum for the whole block over the printed all-gather sum
    compat_gather = (inputs.l_q + inputs.l_k + inputs.l_v + inputs.l_up
                     + (inputs.l_gate if inputs.glu else 0) + inputs.l_down)
    compat = compat_gather + 2 * inputs.h
    report.totals["compat_aggregate"] = {"all_gather": compat_gather, "reduce_sum": 2 * inputs.h, "total": compat}
    report.saved["compat_aggregate"] = _saved(compat, unopt)
    report.totals["model"] = {k: v["total"] * inputs.num_layers for k, v in report.totals.items()}
    return report


model_cost_report = block_cost


def expected_volumes(inputs, mode):
    """Per-token ledger volume expected for each sub-layer tag of one block in ``mode``.

    Keys match the tags the pipelines record (without the layer prefix).
    """
    h, hkv, m = inputs.h, inputs.h_kv, inputs.m
    if mode == "dense":
        return {"attn.o_reduce": 2 * h, "mlp.down_reduce": 2 * h}
    if mode == "base":
        out = {"attn.q_reduce": 2 * h, "attn.k_reduce": 2 * hkv, "attn.v_reduce": 2 * hkv,
               "attn.o_reduce": 2 * h, "mlp.up_reduce": 2 * m, "mlp.down_reduce": 2 * h}
        if inputs.glu:
            out["mlp.gate_reduce"] = 2 * m
        return out
    if mode == "deinfer":
        a = attention_cost(inputs, Status.DEINFER, Convention.PIPELINE_MEASURED)
        mm = mlp_cost(inputs, Status.DEINFER, Convention.PIPELINE_MEASURED)
        return {"attn.qkv_gather": a.all_gather, "attn.o_reduce": a.reduce_sum,
                "mlp.up_gate_gather": mm.all_gather, "mlp.down_reduce": mm.reduce_sum}
    raise ParameterError(f"unknown mode {mode!r}")


def compare_with_measured(inputs, ledger, mode="deinfer", tokens=None):
    """Check a simulated forward's ledger against the analytic per-token volumes.

    Every ledger entry must belong to a ``layerN.<sub-layer>`` tag whose
    per-token volume equals :func:`expected_volumes`; when ``tokens`` is given
    each entry must also cover exactly that many tokens. Returns the
    per-sub-layer table on success, raises :class:`ReconciliationError`
    listing every delta otherwise.
    """
    expected = expected_volumes(inputs, mode)
    measured = {}
    kinds = {}
    deltas = {}
    for e in ledger.entries:
        layer, _, sub = e.tag.partition(".")
        key = (layer, sub)
        measured[key] = measured.get(key, 0) + e.volume_per_token
        kinds[key] = e.kind
        if tokens is not None and e.tokens != tokens:
            deltas[f"{e.tag}.tokens"] = (tokens, e.tokens)
    layers = sorted({k[0] for k in measured}) or [f"layer{i}" for i in range(inputs.num_layers)]
    table = {}
    for layer in layers:
        for sub, vol in expected.items():
            got = measured.pop((layer, sub), 0)
            table[f"{layer}.{sub}"] = got
            if got != vol:
                deltas[f"{layer}.{sub}"] = (vol, got)
    for (layer, sub), got in measured.items():
        deltas[f"{layer}.{sub}"] = (0, got)
    for key, kind in kinds.items():
        want = ALL_GATHER if key[1].endswith("gather") else REDUCE_SUM
        if kind != want:
            deltas[f"{key[0]}.{key[1]}"] = (want, kind)
    if deltas:
        raise ReconciliationError(deltas)
    return table
