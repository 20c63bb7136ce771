"""The module set: multi-head attention, feed-forward and SKIP."""

from __future__ import annotations

from collections.abc import Iterator
from dataclasses import dataclass, fields
from enum import Enum
import math
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ConfigurationError, ContractError, DimensionError
from .tensor import Rng, Tensor, gelu, layernorm, parameter, softmax_lastdim

INIT_STD = 0.02


class ModuleKind(str, Enum):
    ATTENTION = "A"
    FFN = "F"


class ModelConfig(BaseModel):
    """Dimensions shared by every module of a model."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    d_model: int = Field(default=128, ge=1)
    n_heads: int = Field(default=4, ge=1)
    d_ff: int = Field(default=512, ge=1)
    max_len: int = Field(default=256, ge=1)
    vocab_size: int = Field(default=256, ge=1)
    eps: float = Field(default=1e-5, gt=0)

    @model_validator(mode="after")
    def _heads_divide_width(self) -> ModelConfig:
        if self.d_model % self.n_heads:
            raise ValueError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        return self

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


class Component:
    """Mixin for dataclasses that own parameter tensors.

    Parameters are discovered by walking dataclass fields: tensors, nested
    components and lists of either. A tensor reachable twice is reported
    once, under its first name.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        seen: set[int] = set()
        for name, tensor in self._walk(prefix):
            if id(tensor) not in seen:
                seen.add(id(tensor))
                yield name, tensor

    def _walk(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for f in fields(self):  # type: ignore[arg-type]
            yield from _walk_value(getattr(self, f.name), prefix + f.name)

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for tensor in self.parameters():
            tensor.grad = None

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())


def _walk_value(value: Any, name: str) -> Iterator[tuple[str, Tensor]]:
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Component):
        yield from value._walk(name + ".")
    elif isinstance(value, list | tuple):
        for i, item in enumerate(value):
            yield from _walk_value(item, f"{name}.{i}")


@dataclass(eq=False)
class LayerNorm(Component):
    gain: Tensor
    bias: Tensor
    eps: float = 1e-5

    @classmethod
    def init(cls, width: int, eps: float) -> LayerNorm:
        return cls(
            gain=parameter(np.ones(width)), bias=parameter(np.zeros(width)), eps=eps
        )

    def __call__(self, x: Tensor) -> Tensor:
        return layernorm(x, self.gain, self.bias, self.eps)


@dataclass(eq=False)
class MhaModule(Component):
    """Multi-head attention with full-width projections.

    Head ``z`` reads columns ``z*d_head:(z+1)*d_head`` of the query, key
    and value projections and the matching rows of ``w_o``.
    """

    index: int
    n_heads: int
    max_len: int
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor

    @classmethod
    def init(
        cls, config: ModelConfig, index: int, rng: Rng, out_std: float = INIT_STD
    ) -> MhaModule:
        d = config.d_model

        def weight(std: float) -> Tensor:
            return parameter(rng.normal((d, d), std))

        return cls(
            index=index,
            n_heads=config.n_heads,
            max_len=config.max_len,
            w_q=weight(INIT_STD),
            b_q=parameter(np.zeros(d)),
            w_k=weight(INIT_STD),
            b_k=parameter(np.zeros(d)),
            w_v=weight(INIT_STD),
            b_v=parameter(np.zeros(d)),
            w_o=weight(out_std),
            b_o=parameter(np.zeros(d)),
        )

    @property
    def width(self) -> int:
        return self.w_q.shape[0]

    def head_weights(self, z: int) -> dict[str, np.ndarray]:
        """Per-head views: query/key/value [d, d_head] and output [d_head, d]."""
        if not 0 <= z < self.n_heads:
            raise ContractError(f"head {z} out of range for {self.n_heads} heads")
        d_head = self.width // self.n_heads
        cols = slice(z * d_head, (z + 1) * d_head)
        return {
            "q": self.w_q.data[:, cols],
            "k": self.w_k.data[:, cols],
            "v": self.w_v.data[:, cols],
            "o": self.w_o.data[cols, :],
        }


@dataclass(eq=False)
class FfnModule(Component):
    index: int
    w_up: Tensor
    b_up: Tensor
    w_down: Tensor
    b_down: Tensor

    @classmethod
    def init(
        cls, config: ModelConfig, index: int, rng: Rng, out_std: float = INIT_STD
    ) -> FfnModule:
        return cls(
            index=index,
            w_up=parameter(rng.normal((config.d_model, config.d_ff), INIT_STD)),
            b_up=parameter(np.zeros(config.d_ff)),
            w_down=parameter(rng.normal((config.d_ff, config.d_model), out_std)),
            b_down=parameter(np.zeros(config.d_model)),
        )

    @property
    def width(self) -> int:
        return self.w_up.shape[0]


@dataclass(eq=False)
class ModulePool(Component):
    """Attention and FFN modules available to one chunk.

    SKIP is not stored; when ``include_skip`` is set it is addressed by
    index ``N`` of the respective kind.
    """

    attention: list[MhaModule]
    ffn: list[FfnModule]
    include_skip: bool = False

    def __post_init__(self) -> None:
        if not self.attention or not self.ffn:
            raise ConfigurationError(
                f"module pool needs at least one module of each kind, got "
                f"{len(self.attention)} attention / {len(self.ffn)} ffn"
            )

    @classmethod
    def init(
        cls,
        config: ModelConfig,
        n_attention: int,
        n_ffn: int,
        rng: Rng,
        include_skip: bool = False,
        out_std: float = INIT_STD,
    ) -> ModulePool:
        return cls(
            attention=[
                MhaModule.init(config, k, rng, out_std) for k in range(n_attention)
            ],
            ffn=[FfnModule.init(config, k, rng, out_std) for k in range(n_ffn)],
            include_skip=include_skip,
        )

    def size(self, kind: ModuleKind) -> int:
        return len(self.attention) if kind is ModuleKind.ATTENTION else len(self.ffn)

    def skip_index(self, kind: ModuleKind) -> int:
        return self.size(kind)

    def choice_count(self, kind: ModuleKind) -> int:
        return self.size(kind) + int(self.include_skip)


def causal_mask(length: int, dtype: Any = np.float32) -> np.ndarray:
    """Additive mask: 0 where position i may attend to j <= i, -inf above."""
    mask = np.zeros((length, length), dtype=dtype)
    mask[np.triu_indices(length, k=1)] = -np.inf
    return mask


def attend(
    q: Tensor, k: Tensor, v: Tensor, n_heads: int, mask: np.ndarray | None
) -> Tensor:
    """Scaled dot-product attention per head; heads concatenated."""
    length, width = q.shape
    d_head = width // n_heads

    def split(t: Tensor) -> Tensor:
        return t.reshape(length, n_heads, d_head).transpose(1, 0, 2)

    scores = (split(q) @ split(k).transpose(0, 2, 1)) * (1.0 / math.sqrt(d_head))
    weights = softmax_lastdim(scores, mask)
    return (weights @ split(v)).transpose(1, 0, 2).reshape(length, width)


def check_sequence(x: Tensor, width: int, max_len: int) -> None:
    if x.ndim != 2 or x.shape[1] != width:
        raise DimensionError(f"expected input [L, {width}], got {x.shape}")
    if x.shape[0] > max_len:
        raise ContractError(
            f"sequence length {x.shape[0]} exceeds max_len {max_len}"
        )


def mha_forward(
    module: MhaModule, x_norm: Tensor, mask: np.ndarray | None = None
) -> Tensor:
    check_sequence(x_norm, module.width, module.max_len)
    if mask is None:
        mask = causal_mask(x_norm.shape[0], x_norm.dtype)
    q = x_norm @ module.w_q + module.b_q
    k = x_norm @ module.w_k + module.b_k
    v = x_norm @ module.w_v + module.b_v
    return attend(q, k, v, module.n_heads, mask) @ module.w_o + module.b_o


def ffn_forward(module: FfnModule, u_norm: Tensor) -> Tensor:
    if u_norm.ndim != 2 or u_norm.shape[1] != module.width:
        raise DimensionError(
            f"ffn width {module.width} does not match input {u_norm.shape}"
        )
    return gelu(u_norm @ module.w_up + module.b_up) @ module.w_down + module.b_down


def skip_forward(x: Tensor) -> Tensor:
    return x
