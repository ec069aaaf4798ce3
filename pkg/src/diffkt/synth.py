"""Synthetic interaction generator with known logistic ground truth.

Students carry a latent ability, items a latent difficulty (a concept effect
plus per-question noise), and responses are Bernoulli(sigmoid(ability -
difficulty + bias)). The positive bias keeps mean correctness around the
typical education-data range rather than 0.5. Question texts are generated so
character length grows with latent difficulty, giving the text-difficulty
module a learnable signal, and a configurable fraction of "fresh" questions
is answered by a single student each, so student-level splits naturally leave
items unseen in training. Everything is deterministic for a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .data import Dataset, Interaction

_LETTERS = "abcdefghijklmnopqrstuvwxyz"


@dataclass(frozen=True)
class SynthConfig:
    n_students: int = 200
    n_questions: int = 50
    n_concepts: int = 10
    min_seq_len: int = 30
    max_seq_len: int = 80
    ability_sd: float = 1.2
    concept_sd: float = 0.6
    question_sd: float = 1.0
    response_bias: float = 1.0
    fresh_item_fraction: float = 0.0
    text_length_span: tuple[int, int] = (10, 110)
    text_noise: float = 0.05
    concept_text_span: tuple[int, int] = (6, 40)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_students < 1 or self.n_questions < 1 or self.n_concepts < 1:
            raise ValueError("counts must be positive")
        if not 0 < self.min_seq_len <= self.max_seq_len:
            raise ValueError("sequence length bounds must satisfy 0 < min <= max")
        if not 0.0 <= self.fresh_item_fraction <= 0.9:
            raise ValueError("fresh_item_fraction must lie in [0, 0.9]")


@dataclass(frozen=True)
class SynthTruth:
    """Latent ground truth behind a generated dataset."""

    abilities: dict[str, float]
    question_difficulty: dict[str, float]  # latent scale: higher = harder
    question_concept: dict[str, str]
    expected_correct: dict[str, float]  # marginal correct rate over abilities
    text_length: dict[str, int]
    fresh_questions: list[str]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _marginal_correct(latent: float, bias: float, ability_sd: float) -> float:
    # Gauss-Hermite over the ability distribution
    nodes, weights = np.polynomial.hermite.hermgauss(64)
    theta = np.sqrt(2.0) * ability_sd * nodes
    return float(np.sum(weights * _sigmoid(theta - latent + bias)) / np.sqrt(np.pi))


def _make_text(rng: np.random.Generator, length: int) -> str:
    chars: list[str] = []
    while len(chars) < length:
        for _ in range(int(rng.integers(2, 9))):
            if len(chars) >= length:
                break
            chars.append(_LETTERS[int(rng.integers(len(_LETTERS)))])
        if len(chars) < length:
            chars.append(" ")
    return "".join(chars)


def _length_for_rank(rank: float, span: tuple[int, int], noise: float, rng: np.random.Generator) -> int:
    lo, hi = span
    length = lo + rank * (hi - lo) + rng.normal(0.0, noise * (hi - lo))
    return int(np.clip(round(length), 3, hi))


def generate_dataset(cfg: SynthConfig = SynthConfig()) -> tuple[Dataset, SynthTruth]:
    """Build a Dataset (with texts) plus the latent truth that produced it."""
    rng = np.random.default_rng(cfg.seed)

    student_ids = [f"s{i + 1:04d}" for i in range(cfg.n_students)]
    question_ids = [f"q{i + 1:04d}" for i in range(cfg.n_questions)]
    concept_ids = [f"c{i + 1:02d}" for i in range(cfg.n_concepts)]

    abilities = {sid: float(rng.normal(0.0, cfg.ability_sd)) for sid in student_ids}
    concept_effect = {cid: float(rng.normal(0.0, cfg.concept_sd)) for cid in concept_ids}
    question_concept = {
        qid: concept_ids[i % cfg.n_concepts] for i, qid in enumerate(question_ids)
    }
    question_difficulty = {
        qid: concept_effect[question_concept[qid]] + float(rng.normal(0.0, cfg.question_sd))
        for qid in question_ids
    }

    # harder questions get longer texts
    ordered = sorted(question_ids, key=lambda q: question_difficulty[q])
    rank = {qid: i / max(1, len(ordered) - 1) for i, qid in enumerate(ordered)}
    question_texts = {}
    text_length = {}
    for qid in question_ids:
        length = _length_for_rank(rank[qid], cfg.text_length_span, cfg.text_noise, rng)
        question_texts[qid] = _make_text(rng, length)
        text_length[qid] = length

    concept_order = sorted(concept_ids, key=lambda c: concept_effect[c])
    concept_rank = {cid: i / max(1, len(concept_order) - 1) for i, cid in enumerate(concept_order)}
    concept_texts = {
        cid: _make_text(
            rng, _length_for_rank(concept_rank[cid], cfg.concept_text_span, cfg.text_noise, rng)
        )
        for cid in concept_ids
    }

    n_fresh = int(round(cfg.fresh_item_fraction * cfg.n_questions))
    fresh = question_ids[cfg.n_questions - n_fresh :]
    popular = question_ids[: cfg.n_questions - n_fresh]

    def answer(sid: str, qid: str) -> int:
        p = _sigmoid(
            np.asarray(abilities[sid] - question_difficulty[qid] + cfg.response_bias)
        )
        return int(rng.random() < p)

    per_student: dict[str, list[tuple[str, str]]] = {sid: [] for sid in student_ids}
    for sid in student_ids:
        n = int(rng.integers(cfg.min_seq_len, cfg.max_seq_len + 1))
        for qid in (popular[i] for i in rng.integers(0, len(popular), size=n)):
            per_student[sid].append((qid, question_concept[qid]))
    # each fresh question goes to exactly one student
    owners = rng.choice(cfg.n_students, size=len(fresh), replace=len(fresh) > cfg.n_students)
    for qid, owner in zip(fresh, np.atleast_1d(owners)):
        sid = student_ids[int(owner)]
        per_student[sid].append((qid, question_concept[qid]))

    interactions = []
    for sid in student_ids:
        for t, (qid, cid) in enumerate(per_student[sid]):
            interactions.append(Interaction(sid, qid, cid, answer(sid, qid), timestamp=t))

    dataset = Dataset.from_interactions(
        interactions, question_texts=question_texts, concept_texts=concept_texts
    )
    truth = SynthTruth(
        abilities=abilities,
        question_difficulty=question_difficulty,
        question_concept=question_concept,
        expected_correct={
            qid: _marginal_correct(question_difficulty[qid], cfg.response_bias, cfg.ability_sd)
            for qid in question_ids
        },
        text_length=text_length,
        fresh_questions=list(fresh),
    )
    return dataset, truth


def write_synth_csvs(cfg: SynthConfig, out_dir: str | Path) -> dict[str, Path]:
    """Generate a dataset and write the CSV files the CLI consumes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset, truth = generate_dataset(cfg)

    rows = [
        {
            "user_id": sid,
            "question_id": e.question_id,
            "concept_id": e.concept_id,
            "response": e.response,
            "timestamp": e.timestamp,
        }
        for sid, events in dataset.students.items()
        for e in events
    ]
    paths = {
        "interactions": out / "interactions.csv",
        "question_texts": out / "question_texts.csv",
        "concept_texts": out / "concept_texts.csv",
        "ground_truth": out / "ground_truth.csv",
    }
    pd.DataFrame(rows).to_csv(paths["interactions"], index=False)
    pd.DataFrame(
        [{"id": qid, "text": text} for qid, text in (dataset.question_texts or {}).items()]
    ).to_csv(paths["question_texts"], index=False)
    pd.DataFrame(
        [{"id": cid, "text": text} for cid, text in (dataset.concept_texts or {}).items()]
    ).to_csv(paths["concept_texts"], index=False)
    pd.DataFrame(
        [
            {
                "question_id": qid,
                "concept_id": truth.question_concept[qid],
                "latent_difficulty": truth.question_difficulty[qid],
                "expected_correct": truth.expected_correct[qid],
                "text_length": truth.text_length[qid],
                "fresh": qid in set(truth.fresh_questions),
            }
            for qid in truth.question_difficulty
        ]
    ).to_csv(paths["ground_truth"], index=False)
    return paths
