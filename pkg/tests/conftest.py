from __future__ import annotations

import numpy as np
import pytest

from diffkt.data import Dataset, Interaction


def build_dataset(rows, question_texts=None, concept_texts=None) -> Dataset:
    """rows: iterable of (student, question, concept, response[, timestamp])."""
    interactions = []
    for row in rows:
        ts = row[4] if len(row) > 4 else None
        interactions.append(Interaction(row[0], row[1], row[2], row[3], ts))
    return Dataset.from_interactions(
        interactions, question_texts=question_texts, concept_texts=concept_texts
    )


def random_dataset(rng: np.random.Generator, n_students=8, n_questions=12, n_concepts=4, max_events=30) -> Dataset:
    rows = []
    for s in range(n_students):
        for t in range(int(rng.integers(1, max_events + 1))):
            q = int(rng.integers(n_questions))
            rows.append((f"s{s}", f"q{q}", f"c{q % n_concepts}", int(rng.integers(2)), t))
    return build_dataset(rows)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
