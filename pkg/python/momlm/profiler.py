"""Analytical parameter, FLOP and memory model of a chunk plan.

A multiply-accumulate counts as two FLOPs. Costs are per sequence of
``seq_len`` tokens and cover the forward pass only.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
import csv
from enum import Enum
import io

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ConfigurationError, ParseError
from .model import REFERENCE_PLANS, BlockSpec, ChunkPlan, ChunkSpec, MomConfig
from .modules import ModuleKind
from .routing import RouterKind

DEFAULT_SEQ_LEN = 256
BYTES_PER_SCALAR = {"float32": 4, "float64": 8}


class ModelDims(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    d_model: int = Field(ge=1)
    n_heads: int = Field(ge=1)
    d_ff: int = Field(ge=1)
    vocab_size: int = Field(ge=1)
    max_len: int = Field(ge=1)
    layers: int = Field(ge=0)


DIMS_PRESETS = {
    "gpt2-small": ModelDims(
        d_model=768, n_heads=12, d_ff=3072, vocab_size=50257, max_len=1024, layers=12
    ),
    "gpt2-medium": ModelDims(
        d_model=1024, n_heads=16, d_ff=4096, vocab_size=50257, max_len=1024, layers=24
    ),
    "gpt2-large": ModelDims(
        d_model=1280, n_heads=20, d_ff=5120, vocab_size=50257, max_len=1024, layers=36
    ),
    "desk": ModelDims(
        d_model=128, n_heads=4, d_ff=512, vocab_size=256, max_len=256, layers=8
    ),
}

PRESET_PLANS = {
    "gpt2-small": REFERENCE_PLANS["small"],
    "gpt2-medium": REFERENCE_PLANS["medium"],
    "gpt2-large": REFERENCE_PLANS["large"],
    "desk": REFERENCE_PLANS["desk"],
}


def parse_dims(text: str) -> ModelDims:
    """A preset name or ``d_model=..,n_heads=..,d_ff=..,vocab_size=..,max_len=..,layers=..``."""
    text = text.strip()
    if text in DIMS_PRESETS:
        return DIMS_PRESETS[text]
    values: dict[str, int] = {}
    pos = 0
    for item in text.split(","):
        key, sep, value = item.partition("=")
        if not sep:
            raise ParseError(f"expected 'key=value' or a preset {sorted(DIMS_PRESETS)}", text, pos)
        if key.strip() not in ModelDims.model_fields:
            raise ParseError(f"unknown dimension {key.strip()!r}", text, pos)
        if not value.strip().isdigit():
            raise ParseError("expected a non-negative integer", text, pos + len(key) + 1)
        values[key.strip()] = int(value)
        pos += len(item) + 1
    try:
        return ModelDims.model_validate(values)
    except ValidationError as exc:
        raise ConfigurationError(f"invalid dimensions {text!r}: {exc}") from exc


class AssumptionKind(str, Enum):
    NO_SKIP = "no_skip"
    ALL_SKIP = "all_skip"
    EXPECTED = "expected"


class Assumption(BaseModel):
    """How many selected modules actually run when SKIP is available."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: AssumptionKind = AssumptionKind.NO_SKIP
    p_skip: float = Field(default=0.0, ge=0, le=1)

    @classmethod
    def no_skip(cls) -> Assumption:
        return cls()

    @classmethod
    def all_skip(cls) -> Assumption:
        return cls(kind=AssumptionKind.ALL_SKIP, p_skip=1.0)

    @classmethod
    def expected(cls, p_skip: float) -> Assumption:
        return cls(kind=AssumptionKind.EXPECTED, p_skip=p_skip)

    @classmethod
    def from_skip_rates(cls, rates: Iterable[float]) -> Assumption:
        """Expected cost at the mean of observed skip rates, e.g. from load stats."""
        rates = list(rates)
        if not rates:
            raise ConfigurationError("no skip rates to derive an assumption from")
        return cls.expected(sum(rates) / len(rates))

    @classmethod
    def parse(cls, text: str) -> Assumption:
        name, _, value = text.partition(":")
        if name == AssumptionKind.NO_SKIP.value and not value:
            return cls.no_skip()
        if name == AssumptionKind.ALL_SKIP.value and not value:
            return cls.all_skip()
        if name == AssumptionKind.EXPECTED.value:
            try:
                return cls.expected(float(value))
            except (ValueError, ValidationError) as exc:
                raise ParseError("expected a probability", text, len(name) + 1) from exc
        raise ParseError("expected no_skip, all_skip or expected:<p>", text, 0)

    def executed(self, k: int, include_skip: bool) -> float:
        if not include_skip:
            return float(k)
        return k * (1.0 - self.p_skip)

    def render(self) -> str:
        if self.kind is AssumptionKind.EXPECTED:
            return f"expected:{self.p_skip:g}"
        return self.kind.value


class BlockCost(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    params: int
    flops: int
    router_flops: int = 0


class CostReport(BaseModel):
    """Cost of one configuration; block entries add up to the totals."""

    model_config = ConfigDict(frozen=True)

    label: str
    param_count: int
    forward_flops: int
    router_flops: int
    weight_bytes: int
    activation_bytes_peak: int
    blocks: list[BlockCost]

    @property
    def total_flops(self) -> int:
        """Module and router FLOPs together."""
        return self.forward_flops + self.router_flops


def _check(dims: ModelDims, plan: ChunkPlan, mom: MomConfig | None) -> None:
    if plan.layer_count != dims.layers:
        raise ConfigurationError(
            f"plan {plan} covers {plan.layer_count} layers, dims have {dims.layers}"
        )
    if not plan.is_vanilla and mom is None:
        raise ConfigurationError(f"plan {plan} has chunks but no MoM config")
    if dims.d_model % dims.n_heads:
        raise ConfigurationError(
            f"d_model={dims.d_model} is not divisible by n_heads={dims.n_heads}"
        )


def attention_params(d: int) -> int:
    return 4 * d * d + 4 * d


def ffn_params(d: int, d_ff: int) -> int:
    return 2 * d * d_ff + d_ff + d


def router_params(d: int, n_modules: int, router: RouterKind | str = RouterKind.GRU) -> int:
    choices = n_modules + 1
    if RouterKind(router) is RouterKind.GRU:
        return 6 * d * d + 3 * d + choices * d
    return d * d + d + choices * d + choices


def _block_params(dims: ModelDims, spec: BlockSpec, router: RouterKind | str) -> int:
    d, norms = dims.d_model, 4 * dims.d_model
    layer = attention_params(d) + ffn_params(d, dims.d_ff)
    if isinstance(spec, ChunkSpec):
        n = spec.n_modules
        return n * layer + norms + 2 * router_params(d, n, router)
    return layer + norms


def estimate_params(
    dims: ModelDims, plan: ChunkPlan, router: RouterKind | str = RouterKind.GRU
) -> int:
    """Trainable parameters including routers; the LM head is tied."""
    return sum(b.params for b in _blocks(dims, plan, None, DEFAULT_SEQ_LEN, Assumption(), router))


def vanilla_layer_flops(dims: ModelDims, seq_len: int) -> int:
    d, length = dims.d_model, seq_len
    return 8 * length * d * d + 4 * length * length * d + 4 * length * d * dims.d_ff


def mom_step_flops(
    dims: ModelDims, seq_len: int, executed_attention: float, executed_ffn: float
) -> float:
    """One assembly step with ``executed_*`` non-SKIP modules per sub-round.

    Queries, keys and values come from one matmul against the summed
    projection weights; each executed module adds its gated output
    projection and, on the FFN side, its full FFN.
    """
    d, length = dims.d_model, seq_len
    flops = executed_ffn * 4 * length * d * dims.d_ff
    if executed_attention > 0:
        flops += 6 * length * d * d + 4 * length * length * d
        flops += executed_attention * 2 * length * d * d
    return flops


def router_flops(
    dims: ModelDims, seq_len: int, n_modules: int, router: RouterKind | str = RouterKind.GRU
) -> int:
    """One routing sub-round over ``seq_len`` tokens."""
    d, length = dims.d_model, seq_len
    head = 2 * length * (n_modules + 1) * d
    if RouterKind(router) is RouterKind.GRU:
        return 12 * length * d * d + head
    return 2 * length * d * d + head


def _blocks(
    dims: ModelDims,
    plan: ChunkPlan,
    mom: MomConfig | None,
    seq_len: int,
    assume: Assumption,
    router: RouterKind | str,
) -> list[BlockCost]:
    d = dims.d_model
    blocks = [
        BlockCost(name="embed", params=dims.vocab_size * d + dims.max_len * d, flops=0)
    ]
    for i, spec in enumerate(plan.blocks):
        params = _block_params(dims, spec, router)
        if not isinstance(spec, ChunkSpec):
            blocks.append(
                BlockCost(name=f"{i}:V", params=params, flops=vanilla_layer_flops(dims, seq_len))
            )
            continue
        flops = routing = 0
        if mom is not None:
            executed = assume.executed(mom.k, mom.skip)
            step = mom_step_flops(dims, seq_len, executed, executed)
            flops = round(mom.steps * step)
            routing = mom.steps * 2 * router_flops(dims, seq_len, spec.n_modules, router)
        blocks.append(
            BlockCost(
                name=f"{i}:C{spec.n_modules}",
                params=params,
                flops=flops,
                router_flops=routing,
            )
        )
    blocks.append(
        BlockCost(name="head", params=2 * d, flops=2 * seq_len * d * dims.vocab_size)
    )
    return blocks


def estimate_flops(
    dims: ModelDims,
    plan: ChunkPlan,
    mom: MomConfig | None = None,
    seq_len: int = DEFAULT_SEQ_LEN,
    assume: Assumption | None = None,
    *,
    router: RouterKind | str = RouterKind.GRU,
    dtype: str = "float32",
    label: str | None = None,
) -> CostReport:
    """Full cost report of one configuration."""
    if seq_len < 1:
        raise ConfigurationError(f"seq_len must be positive, got {seq_len}")
    _check(dims, plan, mom)
    assume = assume or Assumption.no_skip()
    blocks = _blocks(dims, plan, mom, seq_len, assume, router)
    params = sum(b.params for b in blocks)
    weight_bytes, activation_bytes = estimate_memory(
        dims, plan, mom, seq_len, router=router, dtype=dtype
    )
    return CostReport(
        label=label or (str(mom) if mom is not None else "vanilla"),
        param_count=params,
        forward_flops=sum(b.flops for b in blocks),
        router_flops=sum(b.router_flops for b in blocks),
        weight_bytes=weight_bytes,
        activation_bytes_peak=activation_bytes,
        blocks=blocks,
    )


def activation_scalars(
    dims: ModelDims, plan: ChunkPlan, mom: MomConfig | None, seq_len: int
) -> int:
    """Peak live activations under step-by-step execution.

    Each executed layer or step keeps its residual output; routed steps
    also keep both router states and their selections. On top sits the
    largest single sub-round transient and the logits.
    """
    d, length = dims.d_model, seq_len
    retained = length * d
    for spec in plan.blocks:
        if not isinstance(spec, ChunkSpec):
            retained += length * d
            continue
        assert mom is not None
        per_step = length * d + 2 * length * d + 2 * length * (mom.k + mom.k)
        retained += mom.steps * per_step
    attention = 5 * length * d + dims.n_heads * length * length
    ffn = length * dims.d_ff + length * d
    return retained + max(attention, ffn) + length * dims.vocab_size


def estimate_memory(
    dims: ModelDims,
    plan: ChunkPlan,
    mom: MomConfig | None = None,
    seq_len: int = DEFAULT_SEQ_LEN,
    *,
    router: RouterKind | str = RouterKind.GRU,
    dtype: str = "float32",
) -> tuple[int, int]:
    """Weight bytes and peak activation bytes."""
    _check(dims, plan, mom)
    if dtype not in BYTES_PER_SCALAR:
        raise ConfigurationError(f"unsupported dtype {dtype!r}")
    size = BYTES_PER_SCALAR[dtype]
    return (
        size * estimate_params(dims, plan, router),
        size * activation_scalars(dims, plan, mom, seq_len),
    )


def param_breakdown(
    dims: ModelDims, plan: ChunkPlan, router: RouterKind | str = RouterKind.GRU
) -> dict[str, int]:
    """Parameters by component family, keyed like the live model's names."""
    d = dims.d_model
    counts = {
        "embeddings": dims.vocab_size * d + dims.max_len * d,
        ModuleKind.ATTENTION.value: 0,
        ModuleKind.FFN.value: 0,
        "norms": 2 * d,
        "routers": 0,
    }
    for spec in plan.blocks:
        n = spec.n_modules if isinstance(spec, ChunkSpec) else 1
        counts[ModuleKind.ATTENTION.value] += n * attention_params(d)
        counts[ModuleKind.FFN.value] += n * ffn_params(d, dims.d_ff)
        counts["norms"] += 4 * d
        if isinstance(spec, ChunkSpec):
            counts["routers"] += 2 * router_params(d, n, router)
    return counts


def profile(
    dims: ModelDims,
    plan: ChunkPlan,
    configs: Sequence[MomConfig | None],
    seq_len: int = DEFAULT_SEQ_LEN,
    assume: Assumption | None = None,
    *,
    router: RouterKind | str = RouterKind.GRU,
) -> list[CostReport]:
    return [
        estimate_flops(dims, plan, mom, seq_len, assume, router=router)
        for mom in configs
    ]


def delta(value: float, baseline: float) -> str:
    """Relative change formatted like ``-16.1%`` or ``+0.0%``."""
    change = 0.0 if baseline == 0 else 100.0 * (value - baseline) / baseline
    return f"{change:+.1f}%"


def _human(value: float, unit: str = "") -> str:
    for scale, suffix in ((1e12, "T"), (1e9, "G"), (1e6, "M"), (1e3, "K")):
        if abs(value) >= scale:
            return f"{value / scale:.2f}{suffix}{unit}"
    return f"{value:.0f}{unit}"


TABLE_COLUMNS = (
    "config",
    "params",
    "flops",
    "router_flops",
    "total_flops",
    "weight_bytes",
    "act_bytes",
)


def format_table(reports: Sequence[CostReport], baseline: CostReport | None = None) -> str:
    """Aligned text table; with a baseline each cost carries its delta."""

    def cell(value: int, base: int | None, unit: str = "") -> str:
        text = _human(value, unit)
        return text if base is None else f"{text} ({delta(value, base)})"

    rows = [list(TABLE_COLUMNS)]
    for report in reports:
        base: Mapping[str, int | None] = {
            "params": baseline.param_count if baseline else None,
            "flops": baseline.forward_flops if baseline else None,
            "total": baseline.total_flops if baseline else None,
            "weight": baseline.weight_bytes if baseline else None,
            "act": baseline.activation_bytes_peak if baseline else None,
        }
        rows.append(
            [
                report.label,
                cell(report.param_count, base["params"]),
                cell(report.forward_flops, base["flops"], "FLOP"),
                _human(report.router_flops, "FLOP"),
                cell(report.total_flops, base["total"], "FLOP"),
                cell(report.weight_bytes, base["weight"], "B"),
                cell(report.activation_bytes_peak, base["act"], "B"),
            ]
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(TABLE_COLUMNS))]
    return "\n".join(
        "  ".join(text.ljust(width) for text, width in zip(row, widths, strict=True)).rstrip()
        for row in rows
    )


def format_csv(reports: Iterable[CostReport]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["config", "params", "flops", "weight_bytes", "act_bytes"])
    for report in reports:
        writer.writerow(
            [
                report.label,
                report.param_count,
                report.forward_flops,
                report.weight_bytes,
                report.activation_bytes_peak,
            ]
        )
    return buffer.getvalue()
