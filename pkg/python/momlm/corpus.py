"""Byte-level corpus ingestion, train/validation split and batch sampling."""

from __future__ import annotations

from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
import logging
import math
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ContractError, CorpusError
from .tensor import Rng

logger = logging.getLogger("momlm")


def read_corpus(path: Path) -> np.ndarray:
    """Token ids of a file: one id per byte, so 0 <= id < 256."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CorpusError(f"cannot read corpus {path}: {exc}") from exc
    if not raw:
        raise CorpusError(f"corpus {path} is empty")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


@dataclass(eq=False)
class Corpus:
    """All ids plus disjoint train segments and one validation block.

    ``val_start`` is a multiple of the sequence length; the training data
    is what lies before and after the validation block.
    """

    ids: np.ndarray
    seq_len: int
    val_start: int
    val_stop: int

    @property
    def val(self) -> np.ndarray:
        return self.ids[self.val_start : self.val_stop]

    @property
    def train(self) -> list[np.ndarray]:
        segments = [self.ids[: self.val_start], self.ids[self.val_stop :]]
        return [s for s in segments if len(s) > self.seq_len]

    def __len__(self) -> int:
        return len(self.ids)

    def train_sampler(self, batch_size: int, seed: int) -> SequenceSampler:
        return SequenceSampler(self.train, self.seq_len, batch_size, seed)

    def validation_batches(self, batch_size: int, count: int) -> list[Batch]:
        """The first ``count`` batches of the validation block, in order."""
        sampler = SequenceSampler(
            [self.val], self.seq_len, batch_size, seed=0, shuffle=False
        )
        return [sampler.next_batch() for _ in range(min(count, sampler.batches_per_epoch))]


def corpus_load(
    path: Path, seq_len: int, val_fraction: float = 0.01, seed: int = 0
) -> Corpus:
    """Read a byte corpus and carve out a validation block.

    The block holds at least one window of ``seq_len + 1`` ids and starts
    at a seed-chosen multiple of ``seq_len``.
    """
    if seq_len < 1:
        raise ContractError(f"seq_len must be positive, got {seq_len}")
    if not 0.0 < val_fraction < 1.0:
        raise ContractError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    ids = read_corpus(path)
    windows = max(1, math.ceil(len(ids) * val_fraction / seq_len))
    val_len = windows * seq_len + 1
    slots = (len(ids) - val_len) // seq_len + 1
    if len(ids) < val_len + seq_len + 1 or slots < 1:
        raise CorpusError(
            f"corpus {path} has {len(ids)} bytes, too few for a validation "
            f"block of {val_len} and one training window of {seq_len + 1}"
        )
    start = int(Rng(seed).integers(slots)) * seq_len
    corpus = Corpus(ids=ids, seq_len=seq_len, val_start=start, val_stop=start + val_len)
    if not corpus.train:
        raise CorpusError(f"corpus {path} leaves no training window after the split")
    logger.info(
        f"corpus {path}: {len(ids)} bytes, validation [{start}, {start + val_len})"
    )
    return corpus


def unigram_entropy(ids: Sequence[int] | np.ndarray) -> float:
    """Entropy of the byte distribution in nats; the no-context baseline loss."""
    counts = np.bincount(np.asarray(ids, dtype=np.int64), minlength=256)
    total = counts.sum()
    if total == 0:
        raise ContractError("entropy of an empty id sequence is undefined")
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


@dataclass(eq=False)
class Batch:
    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.inputs)


@dataclass(eq=False)
class SequenceSampler:
    """Batches of next-token windows drawn from one or more segments.

    Windows hold ``seq_len + 1`` ids and start every ``seq_len`` ids. Every
    epoch visits each window once, in a fresh seeded order when shuffling;
    the sampler never runs dry.
    """

    segments: list[np.ndarray]
    seq_len: int
    batch_size: int
    seed: int = 0
    shuffle: bool = True
    epoch: int = field(default=0, init=False)
    _windows: list[tuple[int, int]] = field(default_factory=list, init=False)
    _order: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64), init=False)
    _cursor: int = field(default=0, init=False)
    _rng: Rng = field(init=False)

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be positive, got {self.batch_size}")
        self._windows = [
            (i, start)
            for i, segment in enumerate(self.segments)
            for start in range(0, len(segment) - self.seq_len, self.seq_len)
        ]
        if not self._windows:
            raise CorpusError(f"no window of {self.seq_len + 1} ids in the data")
        self._rng = Rng(self.seed)
        self._new_epoch()
        self.epoch = 0

    @property
    def rng_state(self) -> dict[str, Any]:
        return self._rng.state

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(len(self._windows) / self.batch_size)

    def _new_epoch(self) -> None:
        count = len(self._windows)
        self._order = self._rng.permutation(count) if self.shuffle else np.arange(count)
        self._cursor = 0
        self.epoch += 1

    def next_batch(self) -> Batch:
        rows = []
        for _ in range(self.batch_size):
            if self._cursor == len(self._order):
                self._new_epoch()
            segment, start = self._windows[int(self._order[self._cursor])]
            self._cursor += 1
            rows.append(self.segments[segment][start : start + self.seq_len + 1])
        window = np.stack(rows)
        return Batch(inputs=window[:, :-1], targets=window[:, 1:])

    def __iter__(self) -> Iterator[Batch]:
        while True:
            yield self.next_batch()
