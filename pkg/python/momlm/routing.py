"""Routers: recurrent or MLP gate logits and top-K module selection."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
import math

import numpy as np

from .errors import ConfigurationError, DimensionError
from .modules import Component, ModuleKind
from .tensor import (
    Rng,
    Tensor,
    get_default_dtype,
    parameter,
    sigmoid,
    softmax_lastdim,
    take_along_lastdim,
    tanh,
)


class RouterKind(str, Enum):
    GRU = "gru"
    MLP = "mlp"


@dataclass(eq=False)
class GruRouter(Component):
    """GRU cell carrying decision history across assembly steps.

    Gate blocks are packed column-wise as update | reset | candidate.
    ``projection`` is [d, N+1]; the last column scores SKIP.
    """

    kind: ModuleKind
    w_input: Tensor
    w_state: Tensor
    bias: Tensor
    projection: Tensor

    @classmethod
    def init(cls, kind: ModuleKind, width: int, n_modules: int, rng: Rng) -> GruRouter:
        bound = 1.0 / math.sqrt(width)
        return cls(
            kind=kind,
            w_input=parameter(rng.uniform((width, 3 * width), bound)),
            w_state=parameter(rng.uniform((width, 3 * width), bound)),
            bias=parameter(rng.uniform((3 * width,), bound)),
            projection=parameter(rng.uniform((width, n_modules + 1), bound)),
        )

    @property
    def width(self) -> int:
        return self.w_input.shape[0]

    @property
    def choices(self) -> int:
        return self.projection.shape[1]


@dataclass(eq=False)
class MlpRouter(Component):
    """Stateless two-layer router."""

    kind: ModuleKind
    w_hidden: Tensor
    b_hidden: Tensor
    w_out: Tensor
    b_out: Tensor

    @classmethod
    def init(cls, kind: ModuleKind, width: int, n_modules: int, rng: Rng) -> MlpRouter:
        bound = 1.0 / math.sqrt(width)
        return cls(
            kind=kind,
            w_hidden=parameter(rng.uniform((width, width), bound)),
            b_hidden=parameter(rng.uniform((width,), bound)),
            w_out=parameter(rng.uniform((width, n_modules + 1), bound)),
            b_out=parameter(rng.uniform((n_modules + 1,), bound)),
        )

    @property
    def width(self) -> int:
        return self.w_hidden.shape[0]

    @property
    def choices(self) -> int:
        return self.w_out.shape[1]


Router = GruRouter | MlpRouter


def build_router(
    router_kind: RouterKind | str,
    kind: ModuleKind,
    width: int,
    n_modules: int,
    rng: Rng,
) -> Router:
    if RouterKind(router_kind) is RouterKind.GRU:
        return GruRouter.init(kind, width, n_modules, rng)
    return MlpRouter.init(kind, width, n_modules, rng)


@dataclass(frozen=True)
class RoutingDecision:
    """One token's selection at one step. Index N denotes SKIP."""

    step: int
    kind: ModuleKind
    selected_indices: tuple[int, ...]
    gate_weights: tuple[float, ...]
    full_logits: tuple[float, ...] | None = None


@dataclass(eq=False)
class DecisionBatch:
    """Selections of every token of a sequence at one step.

    ``indices`` is [L, K]; ``gates`` is the matching [L, K] tensor and sits
    on the differentiable path back to the router.
    """

    step: int
    kind: ModuleKind
    indices: np.ndarray
    gates: Tensor
    logits: Tensor | None = None

    def __post_init__(self) -> None:
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 2 or self.gates.shape != self.indices.shape:
            raise DimensionError(
                f"decision indices {self.indices.shape} and gates "
                f"{self.gates.shape} must both be [L, K]"
            )

    @classmethod
    def fixed(
        cls,
        step: int,
        kind: ModuleKind,
        indices: np.ndarray | list[int] | list[list[int]],
        length: int | None = None,
        gates: np.ndarray | None = None,
        dtype: np.dtype | None = None,
    ) -> DecisionBatch:
        """A decision that bypasses the router.

        A flat index list is repeated for ``length`` tokens. Gates default
        to a uniform split over the selected modules.
        """
        rows = np.asarray(indices, dtype=np.int64)
        if rows.ndim == 1:
            if length is None:
                raise DimensionError("length is required for a flat index list")
            rows = np.tile(rows, (length, 1))
        if gates is None:
            gates = np.full(rows.shape, 1.0 / rows.shape[1])
        return cls(
            step=step,
            kind=kind,
            indices=rows,
            gates=Tensor(gates, dtype=dtype or get_default_dtype()),
        )

    def __len__(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def decisions(self) -> list[RoutingDecision]:
        logits = None if self.logits is None else self.logits.data
        return [
            RoutingDecision(
                step=self.step,
                kind=self.kind,
                selected_indices=tuple(int(i) for i in self.indices[row]),
                gate_weights=tuple(float(g) for g in self.gates.data[row]),
                full_logits=None
                if logits is None
                else tuple(float(v) for v in logits[row]),
            )
            for row in range(len(self))
        ]


def top_k(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries per row, ties to the lower index."""
    return np.argsort(-logits, axis=-1, kind="stable")[..., :k]


def choice_mask(
    choices: int, include_skip: bool, allowed: np.ndarray | None = None
) -> np.ndarray:
    """Boolean mask of selectable router outputs; the last one is SKIP."""
    mask = np.ones(choices, dtype=bool) if allowed is None else np.array(allowed, dtype=bool)
    if mask.shape != (choices,):
        raise DimensionError(f"candidate mask {mask.shape} does not match {choices} choices")
    if not include_skip:
        mask[-1] = False
    return mask


def select(
    logits: Tensor, k: int, mask: np.ndarray | None = None
) -> tuple[np.ndarray, Tensor]:
    """Top-K over the unmasked logits; gates are the softmax of the winners."""
    available = logits.shape[-1] if mask is None else int(mask.sum())
    if not 1 <= k <= available:
        raise ConfigurationError(
            f"K={k} is not within the {available} available choices"
        )
    scores = logits.data if mask is None else np.where(mask, logits.data, -np.inf)
    indices = top_k(scores, k)
    return indices, softmax_lastdim(take_along_lastdim(logits, indices))


def gru_step(router: GruRouter, x: Tensor, s_prev: Tensor) -> Tensor:
    """One GRU update; accepts a single vector or one row per token."""
    d = router.width
    if x.shape[-1] != d or s_prev.shape != x.shape:
        raise DimensionError(
            f"gru_step expects input and state of width {d}, got {x.shape} and {s_prev.shape}"
        )
    if x.ndim == 1:
        return gru_step(router, x.reshape(1, d), s_prev.reshape(1, d)).reshape(d)
    gx = x @ router.w_input + router.bias
    gs = s_prev @ router.w_state[:, : 2 * d]
    update = sigmoid(gx[:, :d] + gs[:, :d])
    reset = sigmoid(gx[:, d : 2 * d] + gs[:, d:])
    candidate = tanh(gx[:, 2 * d :] + (reset * s_prev) @ router.w_state[:, 2 * d :])
    return (1 - update) * s_prev + update * candidate


def router_logits(router: Router, x: Tensor, s_prev: Tensor | None) -> tuple[Tensor, Tensor | None]:
    if isinstance(router, GruRouter):
        if s_prev is None:
            s_prev = Tensor(np.zeros(x.shape, dtype=x.dtype))
        s_next = gru_step(router, x, s_prev)
        return s_next @ router.projection, s_next
    if x.shape[-1] != router.width:
        raise DimensionError(f"router width {router.width} does not match input {x.shape}")
    hidden = tanh(x @ router.w_hidden + router.b_hidden)
    return hidden @ router.w_out + router.b_out, s_prev


def route_batch(
    router: Router,
    x: Tensor,
    s_prev: Tensor | None,
    k: int = 1,
    *,
    include_skip: bool = False,
    step: int = 0,
    allowed: np.ndarray | None = None,
) -> tuple[DecisionBatch, Tensor | None]:
    """Route every row of ``x`` independently.

    Returns the decisions and the next router state (unchanged for MLP
    routers).
    """
    if x.ndim != 2:
        raise DimensionError(f"route_batch expects [L, d] input, got {x.shape}")
    if s_prev is not None and s_prev.shape[0] != x.shape[0]:
        raise DimensionError(
            f"{s_prev.shape[0]} state rows for {x.shape[0]} input rows"
        )
    logits, s_next = router_logits(router, x, s_prev)
    mask = choice_mask(router.choices, include_skip, allowed)
    indices, gates = select(logits, k, mask)
    return DecisionBatch(step, router.kind, indices, gates, logits), s_next


def route(
    router: Router,
    x: Tensor,
    s_prev: Tensor | None,
    k: int = 1,
    *,
    include_skip: bool = False,
    step: int = 0,
) -> tuple[RoutingDecision, Tensor | None]:
    """Route a single hidden vector."""
    d = x.shape[-1]
    batch, s_next = route_batch(
        router,
        x.reshape(1, d),
        None if s_prev is None else s_prev.reshape(1, d),
        k,
        include_skip=include_skip,
        step=step,
    )
    return batch.decisions()[0], None if s_next is None else s_next.reshape(d)
