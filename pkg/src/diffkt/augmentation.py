"""Sequence augmentation strategies and the two-view training pipeline.

Each strategy is a pure function of (sequence, rng); the pipeline derives one
rng stream per (seed, view, sequence index), so augmenting a batch can be
parallelized across sequences without changing results. Strategies that could
empty a sequence instead retain one surviving element chosen uniformly.
Augmentation applies during training only; with training off the pipeline is
the identity.
"""

from __future__ import annotations

import math
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, fields
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

from .data import Dataset, Seq

if TYPE_CHECKING:
    from .difficulty import DifficultyTable

# fixed application order of the strategies within one pipeline pass
STRATEGY_ORDER = (
    "cutoff",
    "span_cutoff",
    "mask",
    "crop",
    "summarize",
    "reverse",
    "permute",
    "segment_permute",
    "replace_higher_diff",
    "replace_lower_diff",
    "concat_seq",
)


@dataclass(frozen=True)
class AugmentationConfig:
    """Per-strategy application probabilities plus strategy-level rates.

    ``*_prob`` is the chance a strategy fires on a given sequence; the rates
    control what the strategy does once it fires. Token cutoff and span cutoff
    are mutually exclusive within one run.
    """

    mask_prob: float = 0.0
    crop_prob: float = 0.0
    summarize_prob: float = 0.0
    reverse_prob: float = 0.0
    permute_prob: float = 0.0
    segment_permute_prob: float = 0.0
    replace_higher_diff_prob: float = 0.0
    replace_lower_diff_prob: float = 0.0
    concat_seq_prob: float = 0.0
    cutoff_prob: float = 0.0
    span_cutoff_prob: float = 0.0
    rng_seed: int = 0
    mask_rate: float = 0.15
    cutoff_rate: float = 0.1
    crop_keep_rate: float = 0.7
    summarize_keep_rate: float = 0.7
    segment_len: int = 10
    replace_rate: float = 0.3

    def __post_init__(self) -> None:
        for f in fields(self):
            if f.name.endswith("_prob") or f.name.endswith("_rate"):
                value = getattr(self, f.name)
                if not 0.0 <= value <= 1.0:
                    raise ValueError(f"{f.name} must lie in [0, 1], got {value}")
        if self.cutoff_prob > 0 and self.span_cutoff_prob > 0:
            raise ValueError("cutoff and span_cutoff are mutually exclusive per run")
        if self.segment_len < 1:
            raise ValueError("segment_len must be at least 1")

    def prob(self, strategy: str) -> float:
        if strategy == "cutoff":
            return self.cutoff_prob
        if strategy == "span_cutoff":
            return self.span_cutoff_prob
        return getattr(self, f"{strategy}_prob")

    @classmethod
    def mixed(cls, rng_seed: int = 0) -> "AugmentationConfig":
        """The mixed setting that outperformed every single strategy."""
        return cls(
            mask_prob=0.2,
            crop_prob=0.2,
            summarize_prob=0.2,
            reverse_prob=0.2,
            permute_prob=0.3,
            segment_permute_prob=0.2,
            replace_higher_diff_prob=0.3,
            replace_lower_diff_prob=0.2,
            concat_seq_prob=0.2,
            cutoff_prob=0.03,
            span_cutoff_prob=0.0,
            rng_seed=rng_seed,
        )


def _protect_empty(seq: Seq, survivors: np.ndarray, rng: np.random.Generator) -> Seq:
    """Keep at least one element: fall back to a uniform single survivor."""
    if survivors.size == 0:
        survivors = np.asarray([int(rng.integers(len(seq)))])
    return Seq(
        questions=seq.questions[survivors].copy(),
        concepts=seq.concepts[survivors].copy(),
        responses=seq.responses[survivors].copy(),
    )


def cutoff(seq: Seq, mode: str, rate: float, rng: np.random.Generator) -> Seq:
    """Drop positions: independently sampled in token mode, one contiguous
    segment of length round(rate * len) in span mode. Survivor order is kept."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"cutoff rate must lie in [0, 1], got {rate}")
    n = len(seq)
    if mode == "token":
        keep = rng.random(n) >= rate
        survivors = np.flatnonzero(keep)
    elif mode == "span":
        gap = int(round(rate * n))
        start = int(rng.integers(0, n - gap + 1)) if gap < n else 0
        keep = np.ones(n, dtype=bool)
        keep[start : start + gap] = False
        survivors = np.flatnonzero(keep)
    else:
        raise ValueError(f"cutoff mode must be 'token' or 'span', got {mode!r}")
    return _protect_empty(seq, survivors, rng)


def mask_items(seq: Seq, target: str, mask_rate: float, mask_index: int, rng: np.random.Generator) -> Seq:
    """Replace sampled target ids with the reserved mask index; responses are
    untouched (the encoder already hides the current answer itself)."""
    if target not in ("concept", "question"):
        raise ValueError(f"target must be 'concept' or 'question', got {target!r}")
    hit = rng.random(len(seq)) < mask_rate
    questions = seq.questions.copy()
    concepts = seq.concepts.copy()
    if target == "question":
        questions[hit] = mask_index
    else:
        concepts[hit] = mask_index
    return Seq(questions, concepts, seq.responses.copy())


def crop(seq: Seq, keep_rate: float, rng: np.random.Generator) -> Seq:
    """Retain one contiguous window of ceil(keep_rate * len) at a random offset."""
    n = len(seq)
    width = min(n, max(1, math.ceil(keep_rate * n)))
    start = int(rng.integers(0, n - width + 1))
    return _protect_empty(seq, np.arange(start, start + width), rng)


def summarize(seq: Seq, keep_rate: float, rng: np.random.Generator) -> Seq:
    """Sample ceil(keep_rate * len) positions without replacement, keeping order."""
    n = len(seq)
    count = min(n, max(1, math.ceil(keep_rate * n)))
    survivors = np.sort(rng.choice(n, size=count, replace=False))
    return _protect_empty(seq, survivors, rng)


def reverse(seq: Seq) -> Seq:
    return Seq(seq.questions[::-1].copy(), seq.concepts[::-1].copy(), seq.responses[::-1].copy())


def permute(seq: Seq, granularity: str, segment_len: int, rng: np.random.Generator) -> Seq:
    """Uniform random permutation of elements, or of consecutive fixed-size
    segments with intra-segment order preserved."""
    n = len(seq)
    if granularity == "element":
        order = rng.permutation(n)
    elif granularity == "segment":
        starts = list(range(0, n, segment_len))
        block_order = rng.permutation(len(starts))
        order = np.concatenate(
            [np.arange(starts[b], min(starts[b] + segment_len, n)) for b in block_order]
        )
    else:
        raise ValueError(f"granularity must be 'element' or 'segment', got {granularity!r}")
    return Seq(seq.questions[order].copy(), seq.concepts[order].copy(), seq.responses[order].copy())


class ReplacementPool:
    """Questions sorted by difficulty, for strictly-higher/lower replacement."""

    def __init__(self, table: "DifficultyTable", question_concepts: Mapping[int, int]):
        self.table = table
        self.question_concepts = dict(question_concepts)
        known = sorted(
            (value, idx) for idx, value in table.question_diff.items() if idx in self.question_concepts
        )
        self._values = [value for value, _ in known]
        self._questions = np.asarray([idx for _, idx in known], dtype=np.int64)

    def candidates(self, current_value: float, direction: str) -> np.ndarray:
        if direction == "higher":
            lo = bisect_right(self._values, current_value)
            return self._questions[lo:]
        if direction == "lower":
            hi = bisect_left(self._values, current_value)
            return self._questions[:hi]
        raise ValueError(f"direction must be 'higher' or 'lower', got {direction!r}")


def replace_by_difficulty(
    seq: Seq,
    direction: str,
    rate: float,
    pool: ReplacementPool,
    rng: np.random.Generator,
) -> Seq:
    """Swap sampled questions for uniformly chosen strictly harder/easier ones.

    The replacement question brings its own concept along; positions with no
    strictly higher (lower) candidate are left unchanged. Note the correctness
    convention: higher difficulty value means easier.
    """
    hit = rng.random(len(seq)) < rate
    questions = seq.questions.copy()
    concepts = seq.concepts.copy()
    for pos in np.flatnonzero(hit):
        current = pool.table.lookup(int(questions[pos]), "question", "positive")
        options = pool.candidates(current, direction)
        if options.size == 0:
            continue
        new_q = int(options[rng.integers(options.size)])
        questions[pos] = new_q
        concepts[pos] = pool.question_concepts[new_q]
    return Seq(questions, concepts, seq.responses.copy())


def concat_sequences(a: Seq, b: Seq, max_len: int) -> Seq:
    """a followed by b, truncated from the front so the most recent
    ``max_len`` interactions survive."""
    questions = np.concatenate([a.questions, b.questions])[-max_len:]
    concepts = np.concatenate([a.concepts, b.concepts])[-max_len:]
    responses = np.concatenate([a.responses, b.responses])[-max_len:]
    return Seq(questions.copy(), concepts.copy(), responses.copy())


@dataclass(frozen=True)
class AugmentationContext:
    """Everything the pipeline needs beyond the sequences themselves."""

    pool: ReplacementPool
    question_mask_index: int
    concept_mask_index: int
    max_len: int = 100

    @classmethod
    def from_dataset(cls, dataset: Dataset, table: "DifficultyTable", max_len: int = 100) -> "AugmentationContext":
        return cls(
            pool=ReplacementPool(table, dataset.question_concepts()),
            question_mask_index=dataset.question_vocab.mask_index,
            concept_mask_index=dataset.concept_vocab.mask_index,
            max_len=max_len,
        )


def _apply_strategy(
    name: str,
    seq: Seq,
    originals: Sequence[Seq],
    index: int,
    cfg: AugmentationConfig,
    ctx: AugmentationContext,
    rng: np.random.Generator,
) -> Seq:
    if name == "cutoff":
        return cutoff(seq, "token", cfg.cutoff_rate, rng)
    if name == "span_cutoff":
        return cutoff(seq, "span", cfg.cutoff_rate, rng)
    if name == "mask":
        target = "concept" if rng.random() < 0.5 else "question"
        mask_index = ctx.concept_mask_index if target == "concept" else ctx.question_mask_index
        return mask_items(seq, target, cfg.mask_rate, mask_index, rng)
    if name == "crop":
        return crop(seq, cfg.crop_keep_rate, rng)
    if name == "summarize":
        return summarize(seq, cfg.summarize_keep_rate, rng)
    if name == "reverse":
        return reverse(seq)
    if name == "permute":
        return permute(seq, "element", cfg.segment_len, rng)
    if name == "segment_permute":
        return permute(seq, "segment", cfg.segment_len, rng)
    if name == "replace_higher_diff":
        return replace_by_difficulty(seq, "higher", cfg.replace_rate, ctx.pool, rng)
    if name == "replace_lower_diff":
        return replace_by_difficulty(seq, "lower", cfg.replace_rate, ctx.pool, rng)
    if name == "concat_seq":
        if len(originals) < 2:
            return seq
        partner = int(rng.integers(len(originals) - 1))
        if partner >= index:
            partner += 1
        return concat_sequences(seq, originals[partner], ctx.max_len)
    raise ValueError(f"unknown strategy {name!r}")


def apply_pipeline(
    seqs: Sequence[Seq],
    cfg: AugmentationConfig,
    ctx: AugmentationContext,
    seed: Sequence[int] | int,
    training: bool = True,
    fire_counts: dict[str, int] | None = None,
) -> list[Seq]:
    """Run every strategy over the batch, each firing independently per
    sequence with its configured probability.

    One rng stream is derived per (seed, sequence index) and the Bernoulli
    gate is drawn for every strategy regardless of its probability, so results
    are bitwise reproducible for a fixed seed. With ``training=False`` the
    input is returned unchanged. ``fire_counts`` optionally accumulates how
    often each strategy fired.
    """
    if not training:
        return list(seqs)
    base = [int(seed)] if isinstance(seed, (int, np.integer)) else [int(s) for s in seed]
    out: list[Seq] = []
    for i, seq in enumerate(seqs):
        rng = np.random.default_rng(base + [i])
        for name in STRATEGY_ORDER:
            fires = rng.random() < cfg.prob(name)
            if fires:
                if fire_counts is not None:
                    fire_counts[name] = fire_counts.get(name, 0) + 1
                seq = _apply_strategy(name, seq, seqs, i, cfg, ctx, rng)
        out.append(seq)
    return out


def make_views(
    seqs: Sequence[Seq],
    cfg: AugmentationConfig,
    ctx: AugmentationContext,
    seed: Sequence[int] | int,
    training: bool = True,
) -> tuple[list[Seq], list[Seq]]:
    """Two independent pipeline draws: the positive view pair."""
    base = [int(seed)] if isinstance(seed, (int, np.integer)) else [int(s) for s in seed]
    view1 = apply_pipeline(seqs, cfg, ctx, base + [1], training=training)
    view2 = apply_pipeline(seqs, cfg, ctx, base + [2], training=training)
    return view1, view2
