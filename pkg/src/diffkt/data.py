"""Interaction-log ingestion, student-level splitting, and sequence windowing.

Index conventions used throughout the package:

* vocabulary index 0 is reserved for padding;
* real item ids occupy indices 1..n;
* index n+1 is a shared reserved row used both for unknown ids at inference
  time and as the mask token for augmentation.

Datasets are immutable after construction and safe to share across threads;
split subsets keep the parent's vocabularies so index spaces stay consistent.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Iterator, Mapping, Sequence

import numpy as np
import pandas as pd

if TYPE_CHECKING:
    from .difficulty import DifficultyTable

PAD_INDEX = 0


class SchemaError(ValueError):
    """Input file lacks required columns."""

    def __init__(self, missing: Sequence[str], available: Sequence[str]):
        self.missing = list(missing)
        self.available = list(available)
        super().__init__(
            f"missing required columns {self.missing}; file provides {self.available}"
        )


class EmptyDatasetError(ValueError):
    """No valid interaction rows survived loading."""


@dataclass(frozen=True)
class Interaction:
    """One student response event."""

    student_id: str
    question_id: str
    concept_id: str
    response: int
    timestamp: int | None = None

    def __post_init__(self) -> None:
        if self.response not in (0, 1):
            raise ValueError(f"response must be 0 or 1, got {self.response!r}")
        if not self.question_id or not self.concept_id:
            raise ValueError("question_id and concept_id must be non-empty")


class Vocab:
    """Id-to-index map with reserved padding and unknown/mask rows.

    Index 0 pads, ids map to 1..n in first-seen order, and index n+1 is the
    shared unknown/mask row (embedding tables size their extra rows to match).
    """

    pad_index = PAD_INDEX

    def __init__(self, ids: Iterable[str]):
        self._index: dict[str, int] = {}
        for item in ids:
            if item not in self._index:
                self._index[item] = len(self._index) + 1
        self._id_list = list(self._index)

    @property
    def unk_index(self) -> int:
        return len(self._index) + 1

    @property
    def mask_index(self) -> int:
        return self.unk_index

    @property
    def size(self) -> int:
        """Number of embedding rows needed: pad + ids + unk/mask."""
        return len(self._index) + 2

    def __len__(self) -> int:
        return len(self._index)

    def __contains__(self, item: str) -> bool:
        return item in self._index

    def index(self, item: str) -> int:
        return self._index.get(item, self.unk_index)

    def id_of(self, index: int) -> str | None:
        """Original id for a real index; None for reserved rows."""
        if index <= 0 or index > len(self._index):
            return None
        return self._id_list[index - 1]

    def items(self) -> Iterator[tuple[str, int]]:
        return iter(self._index.items())


def _sorted_by_time(events: list[Interaction]) -> list[Interaction]:
    # stable: ties and missing timestamps keep input order
    return sorted(events, key=lambda e: e.timestamp if e.timestamp is not None else 0)


@dataclass(frozen=True)
class Dataset:
    """Per-student interaction lists plus shared vocabularies and optional texts."""

    students: Mapping[str, list[Interaction]]
    question_vocab: Vocab
    concept_vocab: Vocab
    question_texts: Mapping[str, str] | None = None
    concept_texts: Mapping[str, str] | None = None
    dropped_rows: int = 0

    @classmethod
    def from_interactions(
        cls,
        interactions: Iterable[Interaction],
        question_texts: Mapping[str, str] | None = None,
        concept_texts: Mapping[str, str] | None = None,
        dropped_rows: int = 0,
    ) -> "Dataset":
        students: dict[str, list[Interaction]] = {}
        for event in interactions:
            students.setdefault(event.student_id, []).append(event)
        students = {sid: _sorted_by_time(evts) for sid, evts in students.items()}
        question_vocab = Vocab(e.question_id for evts in students.values() for e in evts)
        concept_vocab = Vocab(e.concept_id for evts in students.values() for e in evts)
        return cls(
            students=students,
            question_vocab=question_vocab,
            concept_vocab=concept_vocab,
            question_texts=question_texts,
            concept_texts=concept_texts,
            dropped_rows=dropped_rows,
        )

    @property
    def student_ids(self) -> list[str]:
        return list(self.students)

    @property
    def n_interactions(self) -> int:
        return sum(len(evts) for evts in self.students.values())

    def subset(self, student_ids: Iterable[str]) -> "Dataset":
        """Same vocabularies and texts, restricted to the given students."""
        keep = set(student_ids)
        return replace(
            self,
            students={sid: evts for sid, evts in self.students.items() if sid in keep},
            dropped_rows=0,
        )

    def question_concepts(self) -> dict[int, int]:
        """First-seen concept index for each question index."""
        mapping: dict[int, int] = {}
        for evts in self.students.values():
            for e in evts:
                qi = self.question_vocab.index(e.question_id)
                mapping.setdefault(qi, self.concept_vocab.index(e.concept_id))
        return mapping

    def validate(self) -> None:
        for evts in self.students.values():
            times = [e.timestamp for e in evts if e.timestamp is not None]
            if times != sorted(times):
                raise ValueError("per-student interactions must be time-ordered")
            for e in evts:
                if e.question_id not in self.question_vocab:
                    raise ValueError(f"question {e.question_id!r} missing from vocab")
                if e.concept_id not in self.concept_vocab:
                    raise ValueError(f"concept {e.concept_id!r} missing from vocab")


@dataclass(frozen=True)
class DataSplit:
    train: Dataset
    valid: Dataset
    test: Dataset
    ratio: tuple[float, float, float]


@dataclass(frozen=True)
class ColumnMap:
    """Column names for interaction CSV/TSV files."""

    user: str = "user_id"
    question: str = "question_id"
    concept: str = "concept_id"
    response: str = "response"
    timestamp: str = "timestamp"


def load_interactions(
    path: str | Path,
    columns: ColumnMap = ColumnMap(),
    delimiter: str | None = None,
    question_texts: Mapping[str, str] | None = None,
    concept_texts: Mapping[str, str] | None = None,
) -> Dataset:
    """Read an interaction log into a Dataset.

    Rows missing a required field, or with a non-binary response, are dropped
    and counted in ``Dataset.dropped_rows``. The timestamp column is optional
    and used only for per-student ordering.
    """
    path = Path(path)
    if delimiter is None:
        delimiter = "\t" if path.suffix.lower() == ".tsv" else ","
    frame = pd.read_csv(path, sep=delimiter, dtype=str, keep_default_na=False)
    required = [columns.user, columns.question, columns.concept, columns.response]
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise SchemaError(missing, list(frame.columns))
    has_time = columns.timestamp in frame.columns

    interactions: list[Interaction] = []
    dropped = 0
    for row in frame.itertuples(index=False):
        record = dict(zip(frame.columns, row))
        response = _parse_response(record[columns.response])
        sid = record[columns.user].strip()
        qid = record[columns.question].strip()
        cid = record[columns.concept].strip()
        if response is None or not sid or not qid or not cid:
            dropped += 1
            continue
        timestamp = _parse_timestamp(record[columns.timestamp]) if has_time else None
        interactions.append(Interaction(sid, qid, cid, response, timestamp))
    if not interactions:
        raise EmptyDatasetError(f"no valid interaction rows in {path}")
    return Dataset.from_interactions(
        interactions,
        question_texts=question_texts,
        concept_texts=concept_texts,
        dropped_rows=dropped,
    )


def _parse_response(raw: str) -> int | None:
    try:
        value = float(raw)
    except (TypeError, ValueError):
        return None
    if value in (0.0, 1.0):
        return int(value)
    return None


def _parse_timestamp(raw: str) -> int | None:
    try:
        return int(float(raw))
    except (TypeError, ValueError):
        return None


def load_texts(path: str | Path, id_col: str = "id", text_col: str = "text") -> dict[str, str]:
    """Read an (id, text) side file used by the text-difficulty module."""
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [c for c in (id_col, text_col) if c not in frame.columns]
    if missing:
        raise SchemaError(missing, list(frame.columns))
    return {str(i).strip(): str(t) for i, t in zip(frame[id_col], frame[text_col])}


def split_dataset(
    dataset: Dataset,
    ratio: tuple[float, float, float] = (0.8, 0.1, 0.2),
    seed: int = 0,
) -> DataSplit:
    """Student-level partition into train/valid/test.

    ``ratio`` is (train fraction, valid fraction of the train pool, test
    fraction); train and test fractions must cover the whole dataset. The
    partition is deterministic for a fixed seed and no student's sequence
    spans splits.
    """
    train_frac, valid_frac, test_frac = ratio
    for frac in ratio:
        if not 0.0 <= frac <= 1.0:
            raise ValueError(f"split fractions must lie in [0, 1], got {ratio}")
    if abs(train_frac + test_frac - 1.0) > 1e-9:
        raise ValueError("train and test fractions must sum to 1")

    students = dataset.student_ids
    wanted_splits = 1 + (valid_frac > 0) + (test_frac > 0)
    if len(students) < wanted_splits:
        raise ValueError(
            f"{len(students)} students cannot populate {wanted_splits} splits"
        )

    rng = np.random.default_rng(seed)
    order = [students[i] for i in rng.permutation(len(students))]
    n_test = round(len(students) * test_frac)
    if test_frac > 0:
        n_test = min(max(n_test, 1), len(students) - 1)
    test_ids = set(order[:n_test])
    pool = order[n_test:]
    n_valid = round(len(pool) * valid_frac)
    if valid_frac > 0:
        n_valid = min(max(n_valid, 1), len(pool) - 1)
    valid_ids = set(pool[:n_valid])
    train_ids = set(pool[n_valid:])

    return DataSplit(
        train=dataset.subset(train_ids),
        valid=dataset.subset(valid_ids),
        test=dataset.subset(test_ids),
        ratio=ratio,
    )


@dataclass(frozen=True)
class Seq:
    """One windowed (question, concept, response) index sequence."""

    questions: np.ndarray
    concepts: np.ndarray
    responses: np.ndarray

    def __post_init__(self) -> None:
        if not (len(self.questions) == len(self.concepts) == len(self.responses)):
            raise ValueError("sequence channels must share one length")
        if len(self.questions) == 0:
            raise ValueError("sequences must contain at least one interaction")

    def __len__(self) -> int:
        return len(self.questions)


@dataclass(frozen=True)
class Window:
    student_id: str
    start: int
    seq: Seq


def make_windows(dataset: Dataset, max_len: int = 100) -> list[Window]:
    """Chunk each student's sequence into consecutive non-overlapping windows.

    Windows keep chronological order, so the most recent interactions sit in
    the final (possibly short) window.
    """
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    windows: list[Window] = []
    for sid, events in dataset.students.items():
        q = np.asarray([dataset.question_vocab.index(e.question_id) for e in events])
        c = np.asarray([dataset.concept_vocab.index(e.concept_id) for e in events])
        r = np.asarray([e.response for e in events])
        for start in range(0, len(events), max_len):
            stop = start + max_len
            windows.append(
                Window(sid, start, Seq(q[start:stop], c[start:stop], r[start:stop]))
            )
    return windows


@dataclass(frozen=True)
class SequenceBatch:
    """Fixed-length index matrices for a batch of windows.

    All matrices share the shape [batch, max_len]; positions with
    ``valid_mask == 0`` hold the reserved padding index. Difficulty bins are
    integers 0..100 from the positive-view lookup. ``q_neg_bins``/``c_neg_bins``
    are populated only when the difficulty table's fallbacks are asymmetric,
    in which case the encoder must not derive negative bins as 100 - bin.
    """

    questions: np.ndarray
    concepts: np.ndarray
    responses: np.ndarray
    q_difficulty_bins: np.ndarray
    c_difficulty_bins: np.ndarray
    valid_mask: np.ndarray
    q_neg_bins: np.ndarray | None = None
    c_neg_bins: np.ndarray | None = None

    def __post_init__(self) -> None:
        shape = self.questions.shape
        for name in ("concepts", "responses", "q_difficulty_bins", "c_difficulty_bins", "valid_mask"):
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} shape {getattr(self, name).shape} != {shape}")

    def __len__(self) -> int:
        return int(self.questions.shape[0])

    @property
    def max_len(self) -> int:
        return int(self.questions.shape[1])


def sequences_to_batch(
    seqs: Sequence[Seq],
    table: "DifficultyTable",
    max_len: int,
    question_vocab: Vocab,
    concept_vocab: Vocab,
) -> SequenceBatch:
    """Right-pad sequences to ``max_len`` and attach difficulty bins."""
    from .difficulty import bin_array

    if any(len(s) > max_len for s in seqs):
        raise ValueError("sequence longer than max_len; window it first")
    batch = len(seqs)
    questions = np.zeros((batch, max_len), dtype=np.int64)
    concepts = np.zeros((batch, max_len), dtype=np.int64)
    responses = np.zeros((batch, max_len), dtype=np.int64)
    mask = np.zeros((batch, max_len), dtype=np.int64)
    for i, seq in enumerate(seqs):
        n = len(seq)
        questions[i, :n] = seq.questions
        concepts[i, :n] = seq.concepts
        responses[i, :n] = seq.responses
        mask[i, :n] = 1

    q_bins_by_index = bin_array(table, "question", question_vocab.size)
    c_bins_by_index = bin_array(table, "concept", concept_vocab.size)
    q_bins = q_bins_by_index[questions] * mask
    c_bins = c_bins_by_index[concepts] * mask

    q_neg = c_neg = None
    if not table.symmetric:
        q_neg = bin_array(table, "question", question_vocab.size, view="negative")[questions] * mask
        c_neg = bin_array(table, "concept", concept_vocab.size, view="negative")[concepts] * mask

    return SequenceBatch(
        questions=questions,
        concepts=concepts,
        responses=responses,
        q_difficulty_bins=q_bins,
        c_difficulty_bins=c_bins,
        valid_mask=mask,
        q_neg_bins=q_neg,
        c_neg_bins=c_neg,
    )


def make_batches(
    dataset: Dataset,
    table: "DifficultyTable",
    max_len: int = 100,
    batch_size: int = 512,
    order: Sequence[int] | None = None,
) -> Iterator[SequenceBatch]:
    """Stream SequenceBatches over the dataset's windows.

    ``order`` optionally permutes window indices (the trainer shuffles this
    way); the default is deterministic dataset order. An empty dataset yields
    an empty stream.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    windows = make_windows(dataset, max_len)
    indices = range(len(windows)) if order is None else list(order)
    chunk: list[Seq] = []
    for idx in indices:
        chunk.append(windows[idx].seq)
        if len(chunk) == batch_size:
            yield sequences_to_batch(chunk, table, max_len, dataset.question_vocab, dataset.concept_vocab)
            chunk = []
    if chunk:
        yield sequences_to_batch(chunk, table, max_len, dataset.question_vocab, dataset.concept_vocab)
