"""Classical test theory difficulty: tables, quantization, hard negatives.

Difficulty here follows the correctness-rate convention: the stored value is
the fraction of correct responses, so HIGHER means EASIER. Values live in
[0, 1] as the source of truth and are quantized to integer bins 0..100 only
for embedding lookup, which keeps the hard-negative reflection d -> 1 - d
exact. Tables are immutable after construction and safe for concurrent reads.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Mapping

import numpy as np

if TYPE_CHECKING:
    from .data import Dataset, Vocab

N_BINS = 101  # integer difficulty levels 0..100

# item index -> predicted difficulty, or None when the predictor cannot help
Predictor = Callable[[int], "float | None"]


class DifficultySource(str, enum.Enum):
    CTT = "ctt"
    TEXT_MODEL = "text_model"
    CONSTANT = "constant"


def _check_unit(value: float, what: str) -> float:
    value = float(value)
    if math.isnan(value) or not 0.0 <= value <= 1.0:
        raise ValueError(f"{what} must lie in [0, 1], got {value}")
    return value


@dataclass(frozen=True)
class DifficultyTable:
    """Per-item difficulties with a fallback policy for unseen items.

    ``question_diff``/``concept_diff`` are keyed by vocabulary index and hold
    values for items observed in the training split (plus any text-model
    fills). Unseen items resolve to ``fallback_positive`` in the positive view
    and ``fallback_negative`` in the negative view, unless a predictor is
    attached, in which case its estimate is used instead of the constant.
    """

    question_diff: Mapping[int, float]
    concept_diff: Mapping[int, float]
    fallback_positive: float = 0.75
    fallback_negative: float = 0.25
    source: DifficultySource = DifficultySource.CTT
    question_predictor: Predictor | None = None
    concept_predictor: Predictor | None = None

    def __post_init__(self) -> None:
        _check_unit(self.fallback_positive, "fallback_positive")
        _check_unit(self.fallback_negative, "fallback_negative")
        for kind, table in (("question", self.question_diff), ("concept", self.concept_diff)):
            for idx, value in table.items():
                _check_unit(value, f"{kind} difficulty for index {idx}")
        object.__setattr__(self, "_bin_cache", {})

    @property
    def symmetric(self) -> bool:
        """True when the unseen-item fallbacks obey the hard-negative relation."""
        return abs(self.fallback_positive + self.fallback_negative - 1.0) <= 1e-9

    def _entries(self, kind: str) -> Mapping[int, float]:
        if kind == "question":
            return self.question_diff
        if kind == "concept":
            return self.concept_diff
        raise ValueError(f"kind must be 'question' or 'concept', got {kind!r}")

    def _predictor(self, kind: str) -> Predictor | None:
        return self.question_predictor if kind == "question" else self.concept_predictor

    def lookup(self, item: int, kind: str = "question", view: str = "positive") -> float:
        """Resolve an item's difficulty for the requested embedding view."""
        if view not in ("positive", "negative"):
            raise ValueError(f"view must be 'positive' or 'negative', got {view!r}")
        entries = self._entries(kind)
        if item in entries:
            value = entries[item]
            return value if view == "positive" else hard_negative(value)
        predictor = self._predictor(kind)
        if predictor is not None:
            predicted = predictor(item)
            if predicted is not None:
                predicted = _check_unit(predicted, "predicted difficulty")
                return predicted if view == "positive" else hard_negative(predicted)
        return self.fallback_positive if view == "positive" else self.fallback_negative

    def with_fallbacks(self, positive: float, negative: float) -> "DifficultyTable":
        return replace(self, fallback_positive=positive, fallback_negative=negative)

    def with_predictors(
        self,
        question_predictor: Predictor | None = None,
        concept_predictor: Predictor | None = None,
    ) -> "DifficultyTable":
        return replace(
            self,
            question_predictor=question_predictor,
            concept_predictor=concept_predictor,
        )


def lookup(table: DifficultyTable, item: int, kind: str = "question", view: str = "positive") -> float:
    return table.lookup(item, kind, view)


def compute_ctt(train: "Dataset", laplace_alpha: float = 0.0) -> DifficultyTable:
    """Correct-over-total difficulty per question and concept index.

    Computed from the training split only; items never attempted there are
    simply absent from the table. ``laplace_alpha`` optionally smooths the
    ratio to (correct + a) / (total + 2a); the default keeps the plain ratio,
    so a single-attempt item scores exactly 0 or 1.
    """
    if train.n_interactions == 0:
        raise ValueError("cannot compute difficulties from an empty training split")
    if laplace_alpha < 0:
        raise ValueError("laplace_alpha must be non-negative")
    q_correct: dict[int, int] = {}
    q_total: dict[int, int] = {}
    c_correct: dict[int, int] = {}
    c_total: dict[int, int] = {}
    for events in train.students.values():
        for e in events:
            qi = train.question_vocab.index(e.question_id)
            ci = train.concept_vocab.index(e.concept_id)
            q_total[qi] = q_total.get(qi, 0) + 1
            c_total[ci] = c_total.get(ci, 0) + 1
            q_correct[qi] = q_correct.get(qi, 0) + e.response
            c_correct[ci] = c_correct.get(ci, 0) + e.response

    def ratio(correct: int, total: int) -> float:
        return (correct + laplace_alpha) / (total + 2 * laplace_alpha)

    return DifficultyTable(
        question_diff={qi: ratio(q_correct[qi], q_total[qi]) for qi in q_total},
        concept_diff={ci: ratio(c_correct[ci], c_total[ci]) for ci in c_total},
        source=DifficultySource.CTT,
    )


def quantize(d: float) -> int:
    """Map a [0, 1] difficulty to its integer bin 0..100, rounding half up.

    Uses exact rational arithmetic on the float's value so half-way points
    never drift across the boundary.
    """
    d = _check_unit(d, "difficulty")
    return int(Fraction(d) * 100 + Fraction(1, 2))


def dequantize(bin_value: int) -> float:
    if not 0 <= int(bin_value) <= 100:
        raise ValueError(f"difficulty bin must lie in 0..100, got {bin_value}")
    return int(bin_value) / 100.0


def hard_negative(d: float) -> float:
    """Reflect a difficulty (or response) across 1/2: d -> 1 - d."""
    return 1.0 - _check_unit(d, "difficulty")


def negative_bin(bin_value: int) -> int:
    """Quantized counterpart of the hard-negative reflection."""
    if not 0 <= int(bin_value) <= 100:
        raise ValueError(f"difficulty bin must lie in 0..100, got {bin_value}")
    return 100 - int(bin_value)


def bin_array(table: DifficultyTable, kind: str, size: int, view: str = "positive") -> np.ndarray:
    """Quantized difficulty for every vocabulary index 0..size-1.

    Index 0 is the pad row and gets bin 0 (its embedding row is masked
    downstream); reserved unknown/mask rows resolve through the fallback
    policy like any unseen item. Results are memoized on the (immutable)
    table, so batch building stays cheap.
    """
    cache: dict = table.__dict__["_bin_cache"]
    key = (kind, size, view)
    if key not in cache:
        bins = np.zeros(size, dtype=np.int64)
        for idx in range(1, size):
            bins[idx] = quantize(table.lookup(idx, kind, view))
        bins.setflags(write=False)
        cache[key] = bins
    return cache[key]


def export_table_csv(
    table: DifficultyTable,
    path: str | Path,
    question_vocab: "Vocab | None" = None,
    concept_vocab: "Vocab | None" = None,
) -> None:
    """Write (item_id, kind, value) rows; indices are used when no vocab maps back."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["item_id", "kind", "value"])
        for kind, entries, vocab in (
            ("question", table.question_diff, question_vocab),
            ("concept", table.concept_diff, concept_vocab),
        ):
            for idx in sorted(entries):
                item = vocab.id_of(idx) if vocab is not None else None
                writer.writerow([item if item is not None else idx, kind, repr(entries[idx])])


def import_table_csv(
    path: str | Path,
    question_vocab: "Vocab | None" = None,
    concept_vocab: "Vocab | None" = None,
    fallback_positive: float = 0.75,
    fallback_negative: float = 0.25,
    source: DifficultySource = DifficultySource.CTT,
) -> DifficultyTable:
    question_diff: dict[int, float] = {}
    concept_diff: dict[int, float] = {}
    with open(path, newline="", encoding="utf-8") as handle:
        for row in csv.DictReader(handle):
            kind = row["kind"]
            value = float(row["value"])
            if kind == "question":
                idx = question_vocab.index(row["item_id"]) if question_vocab else int(row["item_id"])
                question_diff[idx] = value
            elif kind == "concept":
                idx = concept_vocab.index(row["item_id"]) if concept_vocab else int(row["item_id"])
                concept_diff[idx] = value
            else:
                raise ValueError(f"unknown difficulty kind {kind!r}")
    return DifficultyTable(
        question_diff=question_diff,
        concept_diff=concept_diff,
        fallback_positive=fallback_positive,
        fallback_negative=fallback_negative,
        source=source,
    )
