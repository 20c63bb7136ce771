"""Routing-trace analytics: transitions, module loads and CSV export."""

from __future__ import annotations

from collections import defaultdict
from collections.abc import Iterable, Iterator
import csv
from dataclasses import dataclass
import logging
from pathlib import Path

import numpy as np

from .errors import ContractError
from .modules import ModuleKind
from .routing import DecisionBatch
from .tensor import Tensor

logger = logging.getLogger("momlm")

TRACE_FIELDS = ("seq", "chunk", "pos", "step", "kind", "pool", "indices", "gates")


@dataclass(frozen=True)
class TraceRecord:
    """One token's selection at one step; index ``pool`` is SKIP."""

    seq: int
    chunk: int
    pos: int
    step: int
    kind: ModuleKind
    pool: int
    indices: tuple[int, ...]
    gates: tuple[float, ...]

    def __post_init__(self) -> None:
        if not isinstance(self.kind, ModuleKind):
            object.__setattr__(self, "kind", ModuleKind(self.kind))

    def to_row(self) -> dict[str, str]:
        return {
            "seq": str(self.seq),
            "chunk": str(self.chunk),
            "pos": str(self.pos),
            "step": str(self.step),
            "kind": self.kind.value,
            "pool": str(self.pool),
            "indices": ";".join(str(i) for i in self.indices),
            "gates": ";".join(repr(g) for g in self.gates),
        }

    @classmethod
    def from_row(cls, row: dict[str, str]) -> TraceRecord:
        return cls(
            seq=int(row["seq"]),
            chunk=int(row["chunk"]),
            pos=int(row["pos"]),
            step=int(row["step"]),
            kind=ModuleKind(row["kind"]),
            pool=int(row["pool"]),
            indices=tuple(int(i) for i in row["indices"].split(";")),
            gates=tuple(float(g) for g in row["gates"].split(";")),
        )


@dataclass(eq=False)
class TraceBatch:
    """Selections of a whole sequence at one step of one chunk."""

    seq: int
    chunk: int
    step: int
    kind: ModuleKind
    pool: int
    indices: np.ndarray
    gates: np.ndarray

    @property
    def k(self) -> int:
        return self.indices.shape[1]


class AssemblyTrace:
    """Every routing decision of one or more forward passes."""

    def __init__(self, batches: Iterable[TraceBatch] = ()) -> None:
        self.batches: list[TraceBatch] = list(batches)

    def add(self, seq: int, chunk: int, pool: int, decision: DecisionBatch) -> None:
        self.batches.append(
            TraceBatch(
                seq=seq,
                chunk=chunk,
                step=decision.step,
                kind=decision.kind,
                pool=pool,
                indices=decision.indices.copy(),
                gates=decision.gates.data.copy(),
            )
        )

    def extend(self, other: AssemblyTrace) -> None:
        self.batches.extend(other.batches)

    def __len__(self) -> int:
        return sum(len(b.indices) for b in self.batches)

    def __bool__(self) -> bool:
        return bool(self.batches)

    def records(self) -> Iterator[TraceRecord]:
        for batch in self.batches:
            for pos in range(len(batch.indices)):
                yield TraceRecord(
                    seq=batch.seq,
                    chunk=batch.chunk,
                    pos=pos,
                    step=batch.step,
                    kind=batch.kind,
                    pool=batch.pool,
                    indices=tuple(int(i) for i in batch.indices[pos]),
                    gates=tuple(float(g) for g in batch.gates[pos]),
                )

    @classmethod
    def from_records(
        cls, records: Iterable[TraceRecord], dtype: np.dtype | None = None
    ) -> AssemblyTrace:
        grouped: dict[tuple[int, int, int, ModuleKind, int], list[TraceRecord]] = (
            defaultdict(list)
        )
        for record in records:
            grouped[
                (record.seq, record.chunk, record.step, record.kind, record.pool)
            ].append(record)
        batches = []
        for (seq, chunk, step, kind, pool), group in grouped.items():
            group.sort(key=lambda r: r.pos)
            if [r.pos for r in group] != list(range(len(group))):
                raise ContractError(
                    f"trace of seq {seq} chunk {chunk} step {step} kind "
                    f"{kind.value} does not cover positions 0..{len(group) - 1} once"
                )
            batches.append(
                TraceBatch(
                    seq=seq,
                    chunk=chunk,
                    step=step,
                    kind=kind,
                    pool=pool,
                    indices=np.array([r.indices for r in group], dtype=np.int64),
                    gates=np.array([r.gates for r in group], dtype=dtype or np.float64),
                )
            )
        return cls(batches)

    def select(self, kind: ModuleKind | None = None, chunk: int | None = None) -> list[TraceBatch]:
        return [
            b
            for b in self.batches
            if (kind is None or b.kind is kind) and (chunk is None or b.chunk == chunk)
        ]

    def forced_decisions(
        self, seq: int, chunk: int, dtype: np.dtype | None = None
    ) -> dict[tuple[int, ModuleKind], DecisionBatch]:
        """Decisions of one sequence through one chunk, ready for replay.

        Gates are cast to ``dtype`` so a replay keeps the model's precision.
        """
        decisions = {}
        for b in self.batches:
            if b.seq != seq or b.chunk != chunk:
                continue
            gates = b.gates if dtype is None else b.gates.astype(dtype, copy=False)
            decisions[(b.step, b.kind)] = DecisionBatch(
                step=b.step, kind=b.kind, indices=b.indices, gates=Tensor(gates)
            )
        return decisions

    def paths(self, kind: ModuleKind, seq: int = 0, chunk: int = 0) -> list[str]:
        """Per-token routing path such as ``(2,2,1,3,4,2)``; SKIP shows as S."""
        batches = sorted(
            (b for b in self.select(kind, chunk) if b.seq == seq), key=lambda b: b.step
        )
        if not batches:
            return []

        def label(batch: TraceBatch, pos: int) -> str:
            return "+".join(
                "S" if i == batch.pool else str(int(i)) for i in batch.indices[pos]
            )

        return [
            "(" + ",".join(label(b, pos) for b in batches) + ")"
            for pos in range(len(batches[0].indices))
        ]

    def to_csv(self, path: Path) -> None:
        with open(path, "w", newline="", encoding="utf8") as handle:
            writer = csv.DictWriter(handle, fieldnames=TRACE_FIELDS)
            writer.writeheader()
            for record in self.records():
                writer.writerow(record.to_row())

    @classmethod
    def from_csv(cls, path: Path, dtype: np.dtype | None = None) -> AssemblyTrace:
        with open(path, newline="", encoding="utf8") as handle:
            rows = list(csv.DictReader(handle))
        try:
            records = [TraceRecord.from_row(row) for row in rows]
        except (KeyError, TypeError, ValueError) as exc:
            raise ContractError(f"malformed trace {path}: {exc}") from exc
        return cls.from_records(records, dtype)


def _choice_count(batches: list[TraceBatch]) -> int:
    return max(b.pool for b in batches) + 1


def _onehot(batch: TraceBatch, size: int) -> np.ndarray:
    """Selections as [L, size] with weight 1/K each; SKIP mapped to size-1."""
    indices = np.where(batch.indices == batch.pool, size - 1, batch.indices)
    counts = np.zeros((len(indices), size))
    np.add.at(counts, (np.arange(len(indices))[:, None], indices), 1.0 / batch.k)
    return counts


def _require(batches: list[TraceBatch], kind: ModuleKind) -> None:
    if not batches:
        raise ContractError(f"trace has no records for kind {kind.value}")


@dataclass(eq=False)
class TransitionMatrix:
    """``probabilities[i, j]`` = P(step h+1 selects j | step h selected i).

    The last index is SKIP. Rows without support stay zero and are flagged
    in ``supported``.
    """

    kind: ModuleKind
    counts: np.ndarray
    probabilities: np.ndarray
    supported: np.ndarray

    @property
    def size(self) -> int:
        return self.probabilities.shape[0]

    def rows(self) -> Iterator[tuple[str, int, int, float]]:
        for i in np.flatnonzero(self.supported):
            for j in range(self.size):
                yield self.kind.value, int(i), j, float(self.probabilities[i, j])


def transition_matrix(
    trace: AssemblyTrace, kind: ModuleKind, chunk: int | None = None
) -> TransitionMatrix:
    """Empirical step-to-step transitions, pooled over tokens and steps.

    With K selections per step, every pair of consecutive selections is
    counted with weight 1/(K_h * K_h+1).
    """
    batches = trace.select(kind, chunk)
    _require(batches, kind)
    size = _choice_count(batches)
    by_path: dict[tuple[int, int], dict[int, TraceBatch]] = defaultdict(dict)
    for batch in batches:
        by_path[(batch.seq, batch.chunk)][batch.step] = batch

    counts = np.zeros((size, size))
    for steps in by_path.values():
        for step, batch in steps.items():
            following = steps.get(step + 1)
            if following is not None:
                counts += _onehot(batch, size).T @ _onehot(following, size)

    totals = counts.sum(axis=1)
    supported = totals > 0
    probabilities = np.zeros_like(counts)
    probabilities[supported] = counts[supported] / totals[supported, None]
    return TransitionMatrix(kind, counts, probabilities, supported)


@dataclass(eq=False)
class KindLoad:
    """Selection frequencies of one module kind; the last index is SKIP."""

    kind: ModuleKind
    steps: list[int]
    per_step: np.ndarray
    overall: np.ndarray

    @property
    def skip_rate(self) -> float:
        return float(self.overall[-1])

    def rows(self) -> Iterator[tuple[str, str, float]]:
        last = len(self.overall) - 1
        for module, freq in enumerate(self.overall):
            yield self.kind.value, "S" if module == last else str(module), float(freq)


def load_stats(
    trace: AssemblyTrace, chunk: int | None = None
) -> dict[ModuleKind, KindLoad]:
    """Per-step and overall selection frequencies for each recorded kind."""
    if not trace:
        raise ContractError("cannot compute load statistics of an empty trace")
    loads = {}
    for kind in ModuleKind:
        batches = trace.select(kind, chunk)
        if not batches:
            continue
        size = _choice_count(batches)
        per_step: dict[int, np.ndarray] = defaultdict(lambda: np.zeros(size))
        for batch in batches:
            per_step[batch.step] += _onehot(batch, size).sum(axis=0)
        steps = sorted(per_step)
        table = np.array([per_step[h] for h in steps])
        overall = table.sum(axis=0) / table.sum()
        table = table / table.sum(axis=1, keepdims=True)
        loads[kind] = KindLoad(kind=kind, steps=steps, per_step=table, overall=overall)
    return loads


def write_transitions_csv(matrices: Iterable[TransitionMatrix], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["kind", "from", "to", "prob"])
        for matrix in matrices:
            writer.writerows(
                (kind, i, j, f"{p:.6f}") for kind, i, j, p in matrix.rows()
            )


def write_loads_csv(loads: Iterable[KindLoad], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["kind", "module", "freq"])
        for load in loads:
            writer.writerows((kind, m, f"{f:.6f}") for kind, m, f in load.rows())
