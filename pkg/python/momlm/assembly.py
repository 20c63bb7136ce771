"""Assembly of routed modules into per-step operators.

A chunk executes ``H`` assembly steps. Each step has an attention sub-round
and an FFN sub-round; the policy decides which pool modules each token
uses in each sub-round.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field
from enum import Enum
import logging

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .analysis import AssemblyTrace
from .errors import ConfigurationError, ContractError, DimensionError
from .modules import (
    Component,
    LayerNorm,
    ModelConfig,
    ModuleKind,
    ModulePool,
    attend,
    causal_mask,
    check_sequence,
    ffn_forward,
)
from .routing import DecisionBatch, Router, RouterKind, build_router, route_batch
from .tensor import Rng, Tensor

logger = logging.getLogger("momlm")

ForcedDecisions = Mapping[tuple[int, ModuleKind], DecisionBatch]


class PolicyKind(str, Enum):
    VANILLA = "vanilla"
    LAYER_SKIP = "layer_skip"
    PARAMETER_SHARING = "parameter_sharing"
    MOE = "moe"
    MOE_SHARED = "moe_shared"
    MOM = "mom"


class AssemblyPolicy(BaseModel):
    """How a chunk turns its pool into the operator of each step.

    ``skip_criterion[h]`` is 1 to run module ``h`` and 0 to skip it; a
    layer-skip policy without a criterion learns it through the routers.
    ``share_map[h]`` names the module reused at step ``h``.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: PolicyKind
    steps: int = Field(ge=0)
    k_attention: int = Field(default=1, ge=1)
    k_ffn: int = Field(default=1, ge=1)
    include_skip: bool = False
    skip_criterion: tuple[int, ...] | None = None
    share_map: tuple[int, ...] | None = None
    experts_per_layer: int | None = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _check_variant(self) -> AssemblyPolicy:
        single = self.k_attention == 1 and self.k_ffn == 1
        if self.kind is PolicyKind.VANILLA and not single:
            raise ValueError("vanilla policy selects exactly one module per sub-round")
        if self.kind is PolicyKind.LAYER_SKIP:
            if not single:
                raise ValueError("layer-skip chooses between one module and SKIP")
            if self.skip_criterion is not None:
                if len(self.skip_criterion) != self.steps:
                    raise ValueError("skip_criterion needs one entry per step")
                if any(c not in (0, 1) for c in self.skip_criterion):
                    raise ValueError("skip_criterion entries must be 0 or 1")
        if self.kind is PolicyKind.PARAMETER_SHARING:
            if not single:
                raise ValueError("parameter sharing selects one module per sub-round")
            if self.share_map is None or len(self.share_map) != self.steps:
                raise ValueError("share_map needs one entry per step")
            if any(not 0 <= c <= h for h, c in enumerate(self.share_map)):
                raise ValueError("share_map[h] must lie in [0, h]")
        if self.kind is PolicyKind.MOE:
            if self.experts_per_layer is None:
                raise ValueError("moe policy needs experts_per_layer")
            if self.k_attention != 1 or self.k_ffn > self.experts_per_layer:
                raise ValueError("moe routes k_ffn <= experts_per_layer experts")
        if self.kind is PolicyKind.MOE_SHARED and self.k_attention != 1:
            raise ValueError("moe_shared keeps one attention module per step")
        return self

    @classmethod
    def vanilla(cls, steps: int) -> AssemblyPolicy:
        return cls(kind=PolicyKind.VANILLA, steps=steps)

    @classmethod
    def layer_skip(
        cls, criterion: list[int] | tuple[int, ...] | None = None, steps: int | None = None
    ) -> AssemblyPolicy:
        if criterion is None and steps is None:
            raise ConfigurationError("layer_skip needs a criterion or a step count")
        return cls(
            kind=PolicyKind.LAYER_SKIP,
            steps=len(criterion) if criterion is not None else steps,
            skip_criterion=None if criterion is None else tuple(criterion),
            include_skip=True,
        )

    @classmethod
    def early_exit(cls, steps: int, exit_step: int) -> AssemblyPolicy:
        """Layer skip that stops computing from ``exit_step`` onwards."""
        return cls.layer_skip([1 if h < exit_step else 0 for h in range(steps)])

    @classmethod
    def parameter_sharing(cls, share_map: list[int] | tuple[int, ...]) -> AssemblyPolicy:
        return cls(
            kind=PolicyKind.PARAMETER_SHARING,
            steps=len(share_map),
            share_map=tuple(share_map),
        )

    @classmethod
    def moe(cls, steps: int, experts_per_layer: int, k: int = 2) -> AssemblyPolicy:
        return cls(
            kind=PolicyKind.MOE,
            steps=steps,
            k_ffn=k,
            experts_per_layer=experts_per_layer,
        )

    @classmethod
    def moe_shared(cls, steps: int, k: int = 2) -> AssemblyPolicy:
        return cls(kind=PolicyKind.MOE_SHARED, steps=steps, k_ffn=k)

    @classmethod
    def mom(cls, k: int, steps: int, include_skip: bool) -> AssemblyPolicy:
        return cls(
            kind=PolicyKind.MOM,
            steps=steps,
            k_attention=k,
            k_ffn=k,
            include_skip=include_skip,
        )

    @property
    def is_deterministic(self) -> bool:
        return self.kind in (
            PolicyKind.VANILLA,
            PolicyKind.PARAMETER_SHARING,
        ) or (self.kind is PolicyKind.LAYER_SKIP and self.skip_criterion is not None)

    def routes(self, kind: ModuleKind) -> bool:
        if self.is_deterministic:
            return False
        if self.kind in (PolicyKind.MOE, PolicyKind.MOE_SHARED):
            return kind is ModuleKind.FFN
        return True

    def check_pool(self, pool: ModulePool) -> None:
        n_a, n_f = len(pool.attention), len(pool.ffn)
        if self.kind in (PolicyKind.VANILLA, PolicyKind.LAYER_SKIP):
            needed = (self.steps, self.steps)
        elif self.kind is PolicyKind.PARAMETER_SHARING:
            top = max(self.share_map or (-1,)) + 1
            needed = (top, top)
        elif self.kind is PolicyKind.MOE:
            needed = (self.steps, self.steps * (self.experts_per_layer or 0))
        elif self.kind is PolicyKind.MOE_SHARED:
            needed = (self.steps, self.k_ffn)
        else:
            needed = (1, 1)
            for kind, k in (
                (ModuleKind.ATTENTION, self.k_attention),
                (ModuleKind.FFN, self.k_ffn),
            ):
                choices = pool.size(kind) + int(self.include_skip)
                if k > choices:
                    raise ConfigurationError(
                        f"K={k} exceeds the {choices} choices of the {kind.value} pool"
                    )
        if n_a < needed[0] or n_f < needed[1]:
            raise ConfigurationError(
                f"{self.kind.value} policy needs at least {needed[0]} attention and "
                f"{needed[1]} ffn modules, pool has {n_a} and {n_f}"
            )


@dataclass(eq=False)
class MomChunk(Component):
    """A pool of modules, its routers and the pre-norms of both sub-rounds."""

    pool: ModulePool
    attention_norm: LayerNorm
    ffn_norm: LayerNorm
    policy: AssemblyPolicy
    attention_router: Router | None = None
    ffn_router: Router | None = None

    def __post_init__(self) -> None:
        self.policy.check_pool(self.pool)
        for kind in ModuleKind:
            if self.policy.routes(kind) and self.router(kind) is None:
                raise ConfigurationError(
                    f"{self.policy.kind.value} policy needs a {kind.value} router"
                )

    @classmethod
    def init(
        cls,
        config: ModelConfig,
        pool: ModulePool,
        policy: AssemblyPolicy,
        rng: Rng,
        router_kind: RouterKind | str = RouterKind.GRU,
    ) -> MomChunk:
        d = config.d_model
        return cls(
            pool=pool,
            attention_norm=LayerNorm.init(d, config.eps),
            ffn_norm=LayerNorm.init(d, config.eps),
            policy=policy,
            attention_router=build_router(
                router_kind, ModuleKind.ATTENTION, d, len(pool.attention), rng
            ),
            ffn_router=build_router(router_kind, ModuleKind.FFN, d, len(pool.ffn), rng),
        )

    def router(self, kind: ModuleKind) -> Router | None:
        return self.attention_router if kind is ModuleKind.ATTENTION else self.ffn_router


@dataclass
class RouterStates:
    attention: Tensor | None = None
    ffn: Tensor | None = None


@dataclass(eq=False)
class StepOutput:
    u: Tensor
    x_next: Tensor
    attention: DecisionBatch
    ffn: DecisionBatch


def _check_decision(decision: DecisionBatch, n_modules: int, length: int) -> None:
    if len(decision) != length:
        raise DimensionError(
            f"decision covers {len(decision)} tokens, input has {length}"
        )
    if decision.indices.size and (
        decision.indices.min() < 0 or decision.indices.max() > n_modules
    ):
        raise ContractError(
            f"selected index out of range [0, {n_modules}] "
            f"(index {n_modules} is SKIP)"
        )


def _module_gate(decision: DecisionBatch, k: int) -> Tensor:
    """Per-token gate of module ``k`` as [L, 1]; zero where not selected."""
    onehot = (decision.indices == k).astype(decision.gates.dtype)
    return (decision.gates * onehot).sum(axis=1, keepdims=True)


def _selected(decision: DecisionBatch, n_modules: int) -> list[int]:
    return [k for k in range(n_modules) if (decision.indices == k).any()]


def _attention_delta(
    pool: ModulePool, decision: DecisionBatch, x_norm: Tensor, mask: np.ndarray | None
) -> Tensor | None:
    modules = pool.attention
    first = modules[0]
    check_sequence(x_norm, first.width, first.max_len)
    _check_decision(decision, len(modules), x_norm.shape[0])
    selected = _selected(decision, len(modules))
    if not selected:
        return None
    if mask is None:
        mask = causal_mask(x_norm.shape[0], x_norm.dtype)

    # each token projects with the sum over its own selected set
    q = k_ = v = None
    for k in selected:
        module = modules[k]
        member = (decision.indices == k).any(axis=1, keepdims=True).astype(x_norm.dtype)
        terms = [
            (x_norm @ module.w_q + module.b_q) * member,
            (x_norm @ module.w_k + module.b_k) * member,
            (x_norm @ module.w_v + module.b_v) * member,
        ]
        if q is None:
            q, k_, v = terms
        else:
            q, k_, v = q + terms[0], k_ + terms[1], v + terms[2]
    mixed = attend(q, k_, v, first.n_heads, mask)

    out = None
    for k in selected:
        module = modules[k]
        term = (mixed @ module.w_o + module.b_o) * _module_gate(decision, k)
        out = term if out is None else out + term
    return out


def _ffn_delta(pool: ModulePool, decision: DecisionBatch, u_norm: Tensor) -> Tensor | None:
    modules = pool.ffn
    _check_decision(decision, len(modules), u_norm.shape[0])
    out = None
    for k in _selected(decision, len(modules)):
        term = ffn_forward(modules[k], u_norm) * _module_gate(decision, k)
        out = term if out is None else out + term
    return out


def assemble_attention(
    pool: ModulePool,
    decision: DecisionBatch,
    x_norm: Tensor,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Attention assembled from each token's selected modules.

    Query, key and value projections are summed over the selected
    non-SKIP modules without gating; the output projections are summed
    with the gate weights. SKIP contributes nothing.
    """
    out = _attention_delta(pool, decision, x_norm, mask)
    return Tensor(np.zeros_like(x_norm.data)) if out is None else out


def assemble_ffn(pool: ModulePool, decision: DecisionBatch, u_norm: Tensor) -> Tensor:
    """Gate-weighted sum of the selected FFN modules."""
    out = _ffn_delta(pool, decision, u_norm)
    return Tensor(np.zeros_like(u_norm.data)) if out is None else out


def _fixed(step: int, kind: ModuleKind, index: int, x: Tensor) -> DecisionBatch:
    return DecisionBatch.fixed(step, kind, [index], length=x.shape[0], dtype=x.dtype)


def decide(
    chunk: MomChunk,
    kind: ModuleKind,
    step: int,
    x: Tensor,
    state: Tensor | None,
) -> tuple[DecisionBatch, Tensor | None]:
    """Selections for one sub-round under the chunk's policy."""
    policy = chunk.policy
    n_modules = chunk.pool.size(kind)
    skip = n_modules

    if policy.kind is PolicyKind.VANILLA:
        return _fixed(step, kind, step, x), state
    if policy.kind is PolicyKind.PARAMETER_SHARING:
        assert policy.share_map is not None
        return _fixed(step, kind, policy.share_map[step], x), state
    if policy.kind is PolicyKind.LAYER_SKIP and policy.skip_criterion is not None:
        index = step if policy.skip_criterion[step] else skip
        return _fixed(step, kind, index, x), state
    if not policy.routes(kind):
        return _fixed(step, kind, step, x), state

    router = chunk.router(kind)
    assert router is not None
    allowed = None
    k = policy.k_attention if kind is ModuleKind.ATTENTION else policy.k_ffn
    include_skip = policy.include_skip
    if policy.kind is PolicyKind.LAYER_SKIP:
        allowed = np.zeros(router.choices, dtype=bool)
        allowed[[step, skip]] = True
        include_skip = True
    elif policy.kind is PolicyKind.MOE:
        experts = policy.experts_per_layer or 0
        allowed = np.zeros(router.choices, dtype=bool)
        allowed[step * experts : (step + 1) * experts] = True
        include_skip = False
    elif policy.kind is PolicyKind.MOE_SHARED:
        include_skip = False
    return route_batch(
        router,
        x,
        state,
        k,
        include_skip=include_skip,
        step=step,
        allowed=allowed,
    )


def forward_step(
    chunk: MomChunk,
    step: int,
    x: Tensor,
    states: RouterStates | None = None,
    forced: ForcedDecisions | None = None,
    mask: np.ndarray | None = None,
) -> tuple[StepOutput, RouterStates]:
    """One assembly step: pre-normed attention, then pre-normed FFN.

    Routers read the raw hidden state of their sub-round. With ``forced``
    decisions the routers are not consulted.
    """
    if not 0 <= step < chunk.policy.steps:
        raise ContractError(f"step {step} outside [0, {chunk.policy.steps})")
    states = states or RouterStates()
    if mask is None:
        mask = causal_mask(x.shape[0], x.dtype)

    if forced is not None:
        attention = forced[(step, ModuleKind.ATTENTION)]
        s_a = states.attention
    else:
        attention, s_a = decide(chunk, ModuleKind.ATTENTION, step, x, states.attention)
    delta = _attention_delta(chunk.pool, attention, chunk.attention_norm(x), mask)
    u = x if delta is None else delta + x

    if forced is not None:
        ffn = forced[(step, ModuleKind.FFN)]
        s_f = states.ffn
    else:
        ffn, s_f = decide(chunk, ModuleKind.FFN, step, u, states.ffn)
    delta = _ffn_delta(chunk.pool, ffn, chunk.ffn_norm(u))
    x_next = u if delta is None else delta + u

    return StepOutput(u=u, x_next=x_next, attention=attention, ffn=ffn), RouterStates(
        attention=s_a, ffn=s_f
    )


@dataclass(eq=False)
class ChunkRun:
    x_out: Tensor
    trace: AssemblyTrace
    steps: list[StepOutput] = field(default_factory=list)


def run_chunk(
    chunk: MomChunk,
    x_in: Tensor,
    *,
    forced: ForcedDecisions | None = None,
    seq_id: int = 0,
    chunk_id: int = 0,
) -> ChunkRun:
    """Run every assembly step of ``chunk`` and record its decisions."""
    trace = AssemblyTrace()
    mask = causal_mask(x_in.shape[0], x_in.dtype)
    states = RouterStates()
    x = x_in
    outputs = []
    for step in range(chunk.policy.steps):
        output, states = forward_step(chunk, step, x, states, forced, mask)
        for decision in (output.attention, output.ffn):
            trace.add(seq_id, chunk_id, chunk.pool.size(decision.kind), decision)
        outputs.append(output)
        x = output.x_next
    return ChunkRun(x_out=x, trace=trace, steps=outputs)
