"""Two-phase training: vanilla pretraining, decomposition, continued MoM training."""

from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
import logging
import math
from pathlib import Path
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .assembly import MomChunk
from .checkpoint import save_model
from .corpus import Batch, SequenceSampler
from .errors import ConfigurationError, ContractError, TrainingError
from .model import ChunkPlan, MomConfig, MomModel, VanillaBlock, lm_forward, lm_loss
from .modules import Component, LayerNorm
from .routing import RouterKind
from .tensor import Tensor, default_dtype, no_grad

logger = logging.getLogger("momlm")


class TrainConfig(BaseModel):
    """Optimiser, schedule and cadence of one training phase."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    peak_lr: float = Field(default=1e-3, ge=0)
    warmup_ratio: float = Field(default=0.1, ge=0, le=1)
    min_lr_ratio: float = Field(default=0.1, ge=0, le=1)
    total_steps: int = Field(default=2000, ge=0)
    batch_size: int = Field(default=8, ge=1)
    seq_len: int = Field(default=256, ge=1)
    seed: int = Field(default=0, ge=0)
    dtype: Literal["float32", "float64"] = "float32"
    grad_clip: float | None = Field(default=1.0, gt=0)
    weight_decay: float = Field(default=0.1, ge=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.95, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    eval_interval: int = Field(default=100, ge=0)
    eval_batches: int = Field(default=4, ge=1)
    checkpoint_interval: int = Field(default=0, ge=0)

    @property
    def warmup_steps(self) -> int:
        return round(self.warmup_ratio * self.total_steps)


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to the peak, then cosine decay to ``min_lr_ratio`` of it."""
    if not 0 <= step <= config.total_steps:
        raise ContractError(f"step {step} outside [0, {config.total_steps}]")
    warmup = config.warmup_steps
    if step < warmup:
        return config.peak_lr * step / warmup
    decay = config.total_steps - warmup
    if decay == 0:
        return config.peak_lr
    floor = config.min_lr_ratio * config.peak_lr
    progress = (step - warmup) / decay
    return floor + (config.peak_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass(eq=False)
class OptimizerState:
    """AdamW hyperparameters plus one moment pair per parameter name."""

    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(
        cls, params: Mapping[str, Tensor], config: TrainConfig | None = None
    ) -> OptimizerState:
        config = config or TrainConfig()
        return cls(
            beta1=config.beta1,
            beta2=config.beta2,
            eps=config.eps,
            weight_decay=config.weight_decay,
            m={name: np.zeros_like(t.data) for name, t in params.items()},
            v={name: np.zeros_like(t.data) for name, t in params.items()},
        )


def optimizer_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray | None],
    state: OptimizerState,
    lr: float,
) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Weight decay only applies to matrices. Parameters without a gradient
    or with ``requires_grad`` unset are left untouched. A non-finite
    gradient aborts before anything is written.
    """
    bad = sorted(
        name
        for name, grad in grads.items()
        if grad is not None and not np.isfinite(grad).all()
    )
    if bad:
        raise TrainingError(f"non-finite gradient in {', '.join(bad)}")
    missing = sorted(set(params) - set(state.m))
    if missing:
        raise ContractError(f"no optimizer moments for {', '.join(missing)}")

    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None or not param.requires_grad:
            continue
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        update = (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        if param.ndim >= 2 and state.weight_decay:
            update = update + state.weight_decay * param.data
        param.data = (param.data - lr * update).astype(param.dtype, copy=False)


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale gradients to a global L2 norm of at most ``max_norm``.

    Returns the norm before clipping.
    """
    params = [p for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params))  # type: ignore[arg-type]
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)  # type: ignore[operator]
    return total


@dataclass(eq=False)
class PhaseState:
    """Where a phase stands: step counter, optimizer moments, sampler RNG."""

    phase: int
    step: int
    optimizer: OptimizerState
    rng_state: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class StepMetrics:
    step: int
    phase: int
    loss: float
    lr: float
    val_loss: float | None = None

    def to_line(self) -> str:
        line = f"step={self.step} phase={self.phase} loss={self.loss:.6f} lr={self.lr:.6e}"
        if self.val_loss is not None:
            line += f" val_loss={self.val_loss:.6f}"
        return line


def _copy_parameters(target: Component, source: Component) -> None:
    pairs = list(
        zip(target.named_parameters(), source.named_parameters(), strict=True)
    )
    for (name, dst), (_, src) in pairs:
        if dst.shape != src.shape:
            raise ConfigurationError(
                f"{name}: cannot copy {src.shape} into {dst.shape}"
            )
        dst.data = src.data.copy()


def _mean_norm(target: LayerNorm, donors: Sequence[LayerNorm]) -> None:
    target.gain.data = np.mean([n.gain.data for n in donors], axis=0).astype(
        target.gain.dtype
    )
    target.bias.data = np.mean([n.bias.data for n in donors], axis=0).astype(
        target.bias.dtype
    )


def decompose_vanilla(
    vanilla: MomModel,
    plan: ChunkPlan,
    mom: MomConfig | None,
    *,
    seed: int = 0,
    router_kind: RouterKind | str = RouterKind.GRU,
) -> MomModel:
    """Turn a trained vanilla stack into a model laid out by ``plan``.

    Layers covered by a chunk donate their attention and FFN weights to
    the chunk's pool in depth order; other layers and the embeddings are
    copied as they are. Routers are freshly initialised from ``seed`` and
    each chunk's pre-norms start from the mean of its donors' norms.
    """
    if not vanilla.plan.is_vanilla:
        raise ConfigurationError(
            f"decomposition needs a vanilla model, got plan {vanilla.plan}"
        )
    if plan.layer_count != vanilla.plan.layer_count:
        raise ConfigurationError(
            f"plan {plan} covers {plan.layer_count} layers, the vanilla model "
            f"has {vanilla.plan.layer_count}"
        )
    with default_dtype(vanilla.token_embedding.dtype.name):
        model = MomModel.build(
            vanilla.config, plan, mom, seed=seed, router_kind=router_kind
        )
    model.token_embedding.data = vanilla.token_embedding.data.copy()
    model.position_embedding.data = vanilla.position_embedding.data.copy()
    _copy_parameters(model.final_norm, vanilla.final_norm)

    donors: list[VanillaBlock] = vanilla.blocks  # type: ignore[assignment]
    layer = 0
    for block in model.blocks:
        if isinstance(block, VanillaBlock):
            _copy_parameters(block, donors[layer])
            layer += 1
            continue
        group = donors[layer : layer + len(block.pool.attention)]
        for module, donor in zip(block.pool.attention, group, strict=True):
            _copy_parameters(module, donor.attention)
        for module, donor in zip(block.pool.ffn, group, strict=True):
            _copy_parameters(module, donor.ffn)
        _mean_norm(block.attention_norm, [d.attention_norm for d in group])
        _mean_norm(block.ffn_norm, [d.ffn_norm for d in group])
        logger.info(
            f"vanilla layers {layer}-{layer + len(group) - 1} -> pool of "
            f"{len(group)} modules"
        )
        layer += len(group)
    return model


def tie_pool_modules(model: MomModel) -> None:
    """Set every pool module to its pool's mean, per parameter."""
    for chunk in model.chunks:
        for modules in (chunk.pool.attention, chunk.pool.ffn):
            named = [dict(m.named_parameters()) for m in modules]
            for name, first in named[0].items():
                mean = np.mean([p[name].data for p in named], axis=0).astype(first.dtype)
                for p in named:
                    p[name].data = mean.copy()


def batch_loss(model: MomModel, batch: Batch) -> Tensor:
    """Mean next-token loss over the sequences of a batch."""
    total: Tensor | None = None
    for seq_id, (inputs, targets) in enumerate(
        zip(batch.inputs, batch.targets, strict=True)
    ):
        logits, _ = lm_forward(model, inputs, seq_id=seq_id)
        loss = lm_loss(logits, targets)
        total = loss if total is None else total + loss
    if total is None:
        raise ContractError("cannot compute the loss of an empty batch")
    return total * (1.0 / len(batch))


def evaluate(model: MomModel, batches: Sequence[Batch]) -> float:
    with no_grad():
        return float(np.mean([batch_loss(model, b).item() for b in batches]))


def _routed(model: MomModel) -> bool:
    return any(isinstance(b, MomChunk) for b in model.blocks)


def train_phase(
    model: MomModel,
    data: SequenceSampler,
    config: TrainConfig,
    phase: int,
    *,
    val_batches: Sequence[Batch] = (),
    metrics_path: Path | None = None,
    checkpoint_dir: Path | None = None,
    tie_modules: bool = False,
) -> list[StepMetrics]:
    """Train ``model`` in place for ``config.total_steps`` steps.

    Each step appends one line to ``metrics_path``. Validation runs every
    ``eval_interval`` steps and at the last step; checkpoints are written
    every ``checkpoint_interval`` steps and once at the end.
    """
    if phase not in (1, 2):
        raise ConfigurationError(f"phase must be 1 or 2, got {phase}")
    if config.total_steps == 0:
        return []
    params = dict(model.named_parameters())
    state = PhaseState(
        phase=phase, step=0, optimizer=OptimizerState.create(params, config)
    )
    if tie_modules:
        tie_pool_modules(model)
    logger.info(
        f"phase {phase}: {config.total_steps} steps, {model.count_parameters()} "
        f"parameters, plan {model.plan}"
        + (f" {model.mom}" if _routed(model) else "")
    )

    metrics: list[StepMetrics] = []
    handle = open(metrics_path, "a", encoding="utf8") if metrics_path else None
    try:
        for step in range(1, config.total_steps + 1):
            model.zero_grad()
            loss = batch_loss(model, data.next_batch())
            if not math.isfinite(loss.item()):
                raise TrainingError(f"loss is {loss.item()} at phase {phase} step {step}")
            loss.backward()
            if config.grad_clip is not None:
                clip_grad_norm(params.values(), config.grad_clip)
            lr = lr_at(step, config)
            optimizer_step(params, {n: t.grad for n, t in params.items()}, state.optimizer, lr)
            if tie_modules:
                tie_pool_modules(model)
            state.step = step

            val_loss = None
            evaluating = config.eval_interval and step % config.eval_interval == 0
            if val_batches and (evaluating or step == config.total_steps):
                val_loss = evaluate(model, val_batches[: config.eval_batches])
                logger.info(f"phase {phase} step {step}: val_loss {val_loss:.4f}")
            record = StepMetrics(step, phase, loss.item(), lr, val_loss)
            metrics.append(record)
            if handle:
                handle.write(record.to_line() + "\n")

            if checkpoint_dir and config.checkpoint_interval and (
                step % config.checkpoint_interval == 0
            ):
                _save(model, checkpoint_dir / f"phase{phase}_step{step}.ckpt", state)
    finally:
        if handle:
            handle.close()
    state.rng_state = data.rng_state
    if checkpoint_dir:
        _save(model, checkpoint_dir / f"phase{phase}_final.ckpt", state)
    return metrics


def _save(model: MomModel, path: Path, state: PhaseState) -> None:
    save_model(model, path, {"phase": str(state.phase), "step": str(state.step)})
    logger.info(f"wrote checkpoint {path}")
