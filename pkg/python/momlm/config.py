"""Run configuration files: one ``key = value`` per line."""

from __future__ import annotations

from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigurationError, ParseError
from .model import ChunkPlan, MomConfig, parse_chunk_plan, parse_mom_config
from .modules import ModelConfig
from .routing import RouterKind
from .training import TrainConfig


class RunConfig(BaseModel):
    """Everything one ``momlm train`` invocation needs.

    ``steps`` is the phase 1 budget and ``phase2_steps`` the phase 2 one.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    # model
    d_model: int = Field(default=128, ge=1)
    n_heads: int = Field(default=4, ge=1)
    d_ff: int = Field(default=512, ge=1)
    max_len: int = Field(default=256, ge=1)
    vocab_size: int = Field(default=256, ge=1)
    eps: float = Field(default=1e-5, gt=0)
    layers: int = Field(default=8, ge=1)
    # assembly
    plan: str = "[1-1-4-1-1]"
    mom: str = "K2H2S"
    router: RouterKind = RouterKind.GRU
    # training
    peak_lr: float = Field(default=1e-3, ge=0)
    warmup_ratio: float = Field(default=0.1, ge=0, le=1)
    min_lr_ratio: float = Field(default=0.1, ge=0, le=1)
    steps: int = Field(default=2000, ge=0)
    phase2_steps: int = Field(default=1000, ge=0)
    batch_size: int = Field(default=8, ge=1)
    seq_len: int = Field(default=256, ge=1)
    seed: int = Field(default=0, ge=0)
    dtype: Literal["float32", "float64"] = "float32"
    grad_clip: float = Field(default=1.0, ge=0)
    weight_decay: float = Field(default=0.1, ge=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.95, ge=0, lt=1)
    tie_modules: bool = False
    # evaluation and checkpoints
    eval_interval: int = Field(default=100, ge=0)
    eval_batches: int = Field(default=4, ge=1)
    checkpoint_interval: int = Field(default=0, ge=0)
    # data and output
    corpus: Path = Path("data/desk_corpus.txt")
    val_fraction: float = Field(default=0.01, gt=0, lt=1)
    out_dir: Path = Path("runs/desk")

    @model_validator(mode="after")
    def _check_layout(self) -> RunConfig:
        try:
            plan = parse_chunk_plan(self.plan)
            parse_mom_config(self.mom)
        except ParseError as exc:
            raise ConfigurationError(f"plan or mom: {exc}") from exc
        if plan.layer_count != self.layers:
            raise ConfigurationError(
                f"plan {self.plan} covers {plan.layer_count} layers, "
                f"layers = {self.layers}"
            )
        if self.seq_len > self.max_len:
            raise ConfigurationError(
                f"seq_len {self.seq_len} exceeds max_len {self.max_len}"
            )
        return self

    def model_dims(self) -> ModelConfig:
        return ModelConfig(
            d_model=self.d_model,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
            max_len=self.max_len,
            vocab_size=self.vocab_size,
            eps=self.eps,
        )

    def chunk_plan(self) -> ChunkPlan:
        return parse_chunk_plan(self.plan)

    def mom_config(self) -> MomConfig:
        return parse_mom_config(self.mom)

    def train_config(self, phase: int) -> TrainConfig:
        return TrainConfig(
            peak_lr=self.peak_lr,
            warmup_ratio=self.warmup_ratio,
            min_lr_ratio=self.min_lr_ratio,
            total_steps=self.steps if phase == 1 else self.phase2_steps,
            batch_size=self.batch_size,
            seq_len=self.seq_len,
            seed=self.seed,
            dtype=self.dtype,
            grad_clip=self.grad_clip or None,
            weight_decay=self.weight_decay,
            beta1=self.beta1,
            beta2=self.beta2,
            eval_interval=self.eval_interval,
            eval_batches=self.eval_batches,
            checkpoint_interval=self.checkpoint_interval,
        )


PATH_KEYS = ("corpus", "out_dir")


def parse_run_config(text: str, source: str = "<config>") -> dict[str, str]:
    """Split config text into raw key/value strings.

    ``#`` starts a comment. Duplicate and unknown keys are errors that
    name the line.
    """
    values: dict[str, str] = {}
    lines: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value'")
        if key not in RunConfig.model_fields:
            raise ConfigurationError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigurationError(
                f"{source}:{lineno}: duplicate key {key!r} (first set on line {lines[key]})"
            )
        values[key] = value
        lines[key] = lineno
    return values


def build_run_config(values: dict[str, str], base: Path | None = None) -> RunConfig:
    """Validate raw values; relative paths resolve against ``base``."""
    if base is not None:
        for key in PATH_KEYS:
            if key in values and not Path(values[key]).is_absolute():
                values = {**values, key: str(base / values[key])}
    try:
        config = RunConfig.model_validate(values)
    except ValidationError as exc:
        errors = "; ".join(
            f"{'.'.join(str(p) for p in e['loc']) or 'config'}: {e['msg']}"
            for e in exc.errors()
        )
        raise ConfigurationError(f"invalid configuration: {errors}") from exc
    if base is not None and "corpus" not in values:
        config = config.model_copy(update={"corpus": base / config.corpus})
    if base is not None and "out_dir" not in values:
        config = config.model_copy(update={"out_dir": base / config.out_dir})
    return config


def load_run_config(path: Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    config = build_run_config(parse_run_config(text, str(path)), path.parent)
    if not config.corpus.is_file():
        raise ConfigurationError(f"{path}: corpus {config.corpus} does not exist")
    return config
