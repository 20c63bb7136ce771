"""End-to-end language model over a chunk plan of vanilla blocks and MoM chunks."""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass
import logging
import math

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .analysis import AssemblyTrace
from .assembly import AssemblyPolicy, MomChunk, run_chunk
from .errors import ConfigurationError, ContractError, ParseError
from .modules import (
    INIT_STD,
    Component,
    FfnModule,
    LayerNorm,
    MhaModule,
    ModelConfig,
    ModulePool,
    causal_mask,
    ffn_forward,
    mha_forward,
)
from .routing import RouterKind
from .tensor import Rng, Tensor, cross_entropy, embedding, parameter

logger = logging.getLogger("momlm")

# named configurations: most performant, most efficient, in between
MOM_PRESETS = {"MoM_P": "K2H6S", "MoM_I": "K3H2S", "MoM_E": "K3H1S"}

REFERENCE_PLANS = {
    "small": "[1-1-4-1-4-1]",
    "medium": "[1-1-1-4-1-4-1-4-1-4-1-1]",
    "large": "[1-4-1-4-1-4-1-4-1-4-1-4-1-4-1]",
    "desk": "[1-1-4-1-1]",
}

# chunk layouts compared on an 8-layer model
ABLATION_PLANS = ("[1-1-4-1-1]", "[1-6-1]", "[8]", "[4-4]")


class MomConfig(BaseModel):
    """K selected modules, H assembly steps, SKIP availability."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    k: int = Field(ge=1)
    steps: int = Field(ge=1)
    skip: bool = False

    def render(self) -> str:
        return f"K{self.k}H{self.steps}" + ("S" if self.skip else "")

    def __str__(self) -> str:
        return self.render()

    def policy(self) -> AssemblyPolicy:
        return AssemblyPolicy.mom(self.k, self.steps, self.skip)


def _read_count(text: str, pos: int, label: str) -> tuple[int, int]:
    end = pos
    while end < len(text) and text[end].isdigit():
        end += 1
    if end == pos:
        raise ParseError(f"expected digits after {label}", text, pos)
    value = int(text[pos:end])
    if value == 0:
        raise ParseError(f"{label} must be at least 1", text, pos)
    return value, end


def parse_mom_config(text: str) -> MomConfig:
    """Parse ``K<digits>H<digits>[S]`` or one of the named presets."""
    text = MOM_PRESETS.get(text.strip(), text.strip())
    if not text.startswith("K"):
        raise ParseError("expected 'K'", text, 0)
    k, pos = _read_count(text, 1, "K")
    if pos >= len(text) or text[pos] != "H":
        raise ParseError("expected 'H'", text, pos)
    steps, pos = _read_count(text, pos + 1, "H")
    skip = text[pos:] == "S"
    if text[pos:] not in ("", "S"):
        raise ParseError("unexpected trailing characters", text, pos)
    return MomConfig(k=k, steps=steps, skip=skip)


@dataclass(frozen=True)
class VanillaSpec:
    layers: int = 1


@dataclass(frozen=True)
class ChunkSpec:
    n_modules: int

    @property
    def layers(self) -> int:
        return self.n_modules


BlockSpec = VanillaSpec | ChunkSpec


@dataclass(frozen=True)
class ChunkPlan:
    blocks: tuple[BlockSpec, ...]

    @classmethod
    def vanilla(cls, layers: int) -> ChunkPlan:
        return cls(tuple(VanillaSpec() for _ in range(layers)))

    @property
    def layer_count(self) -> int:
        return sum(block.layers for block in self.blocks)

    @property
    def chunk_count(self) -> int:
        return sum(isinstance(block, ChunkSpec) for block in self.blocks)

    @property
    def is_vanilla(self) -> bool:
        return self.chunk_count == 0

    def render(self) -> str:
        return "[" + "-".join(str(block.layers) for block in self.blocks) + "]"

    def describe(self) -> str:
        return " ".join(
            "V" if isinstance(block, VanillaSpec) else f"C{block.n_modules}"
            for block in self.blocks
        )

    def __str__(self) -> str:
        return self.render()


def parse_chunk_plan(text: str) -> ChunkPlan:
    """Parse a plan such as ``[1-1-4-1-1]``: 1 is a vanilla block, N > 1 a chunk."""
    text = text.strip()
    if not text.startswith("["):
        raise ParseError("expected '['", text, 0)
    if not text.endswith("]") or len(text) < 2:
        raise ParseError("expected ']'", text, len(text))
    body = text[1:-1]
    if not body:
        raise ParseError("empty plan", text, 1)
    blocks: list[BlockSpec] = []
    pos = 1
    for token in body.split("-"):
        if not token.isdigit():
            raise ParseError(f"invalid token {token!r}", text, pos)
        value = int(token)
        if value == 0:
            raise ParseError("zero-sized block", text, pos)
        blocks.append(VanillaSpec() if value == 1 else ChunkSpec(value))
        pos += len(token) + 1
    return ChunkPlan(tuple(blocks))


@dataclass(eq=False)
class VanillaBlock(Component):
    """A fixed pre-norm transformer layer."""

    attention_norm: LayerNorm
    attention: MhaModule
    ffn_norm: LayerNorm
    ffn: FfnModule

    @classmethod
    def init(
        cls, config: ModelConfig, rng: Rng, out_std: float = INIT_STD
    ) -> VanillaBlock:
        return cls(
            attention_norm=LayerNorm.init(config.d_model, config.eps),
            attention=MhaModule.init(config, 0, rng, out_std),
            ffn_norm=LayerNorm.init(config.d_model, config.eps),
            ffn=FfnModule.init(config, 0, rng, out_std),
        )

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        u = mha_forward(self.attention, self.attention_norm(x), mask) + x
        return ffn_forward(self.ffn, self.ffn_norm(u)) + u


PolicyFactory = Callable[[int], AssemblyPolicy]


@dataclass(eq=False)
class MomModel(Component):
    """Embeddings, blocks in plan order, final norm and a tied LM head."""

    config: ModelConfig
    plan: ChunkPlan
    mom: MomConfig | None
    router_kind: RouterKind
    token_embedding: Tensor
    position_embedding: Tensor
    blocks: list[VanillaBlock | MomChunk]
    final_norm: LayerNorm

    @classmethod
    def build(
        cls,
        config: ModelConfig,
        plan: ChunkPlan,
        mom: MomConfig | None = None,
        *,
        seed: int = 0,
        router_kind: RouterKind | str = RouterKind.GRU,
        policy_for: PolicyFactory | None = None,
    ) -> MomModel:
        """Initialise a model with GPT-2 style weights.

        Chunks take their policy from ``policy_for(n_modules)`` when given,
        otherwise from ``mom``.
        """
        if not plan.is_vanilla and mom is None and policy_for is None:
            raise ConfigurationError(f"plan {plan} has chunks but no MoM config")
        rng = Rng(seed)
        out_std = INIT_STD / math.sqrt(2 * max(plan.layer_count, 1))
        token_embedding = parameter(rng.normal((config.vocab_size, config.d_model), INIT_STD))
        position_embedding = parameter(rng.normal((config.max_len, config.d_model), INIT_STD))
        blocks: list[VanillaBlock | MomChunk] = []
        for spec in plan.blocks:
            if isinstance(spec, VanillaSpec):
                blocks.append(VanillaBlock.init(config, rng, out_std))
                continue
            policy = policy_for(spec.n_modules) if policy_for else mom.policy()  # type: ignore[union-attr]
            pool = ModulePool.init(
                config,
                spec.n_modules,
                spec.n_modules,
                rng,
                include_skip=policy.include_skip,
                out_std=out_std,
            )
            blocks.append(MomChunk.init(config, pool, policy, rng, router_kind))
        return cls(
            config=config,
            plan=plan,
            mom=mom,
            router_kind=RouterKind(router_kind),
            token_embedding=token_embedding,
            position_embedding=position_embedding,
            blocks=blocks,
            final_norm=LayerNorm.init(config.d_model, config.eps),
        )

    @property
    def chunks(self) -> list[MomChunk]:
        return [block for block in self.blocks if isinstance(block, MomChunk)]

    def count_parameters(self) -> int:
        return self.num_parameters()


def lm_forward(
    model: MomModel,
    token_ids: Sequence[int] | np.ndarray,
    *,
    forced: AssemblyTrace | None = None,
    seq_id: int = 0,
) -> tuple[Tensor, AssemblyTrace]:
    """Logits [L, V] and the routing trace of one sequence.

    With ``forced`` the chunks replay the decisions recorded for
    ``seq_id`` instead of consulting their routers.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1 or len(ids) == 0:
        raise ContractError(f"expected a non-empty id sequence, got shape {ids.shape}")
    if len(ids) > model.config.max_len:
        raise ContractError(
            f"sequence length {len(ids)} exceeds max_len {model.config.max_len}"
        )
    length = len(ids)
    x = embedding(model.token_embedding, ids) + model.position_embedding[:length]
    mask = causal_mask(length, x.dtype)
    trace = AssemblyTrace()
    chunk_id = 0
    for block in model.blocks:
        if isinstance(block, VanillaBlock):
            x = block(x, mask)
            continue
        decisions = (
            forced.forced_decisions(seq_id, chunk_id, x.dtype) if forced else None
        )
        run = run_chunk(block, x, forced=decisions, seq_id=seq_id, chunk_id=chunk_id)
        x = run.x_out
        trace.extend(run.trace)
        chunk_id += 1
    logits = model.final_norm(x) @ model.token_embedding.transpose()
    return logits, trace


def lm_loss(logits: Tensor, targets: Sequence[int] | np.ndarray) -> Tensor:
    """Mean next-token cross-entropy in nats."""
    return cross_entropy(logits, np.asarray(targets, dtype=np.int64))


def perplexity(loss: float) -> float:
    return math.exp(loss)
