from __future__ import annotations

import decimal

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import build_dataset, random_dataset
from diffkt.data import Dataset, Interaction
from diffkt.difficulty import (
    DifficultySource,
    DifficultyTable,
    bin_array,
    compute_ctt,
    dequantize,
    export_table_csv,
    hard_negative,
    import_table_csv,
    lookup,
    negative_bin,
    quantize,
)

unit_floats = st.floats(min_value=0.0, max_value=1.0, allow_nan=False)


def brute_force_ctt(dataset: Dataset) -> tuple[dict[int, float], dict[int, float]]:
    """Independent counting oracle over raw interactions."""
    q: dict[int, list[int]] = {}
    c: dict[int, list[int]] = {}
    for events in dataset.students.values():
        for e in events:
            q.setdefault(dataset.question_vocab.index(e.question_id), []).append(e.response)
            c.setdefault(dataset.concept_vocab.index(e.concept_id), []).append(e.response)
    return (
        {k: sum(v) / len(v) for k, v in q.items()},
        {k: sum(v) / len(v) for k, v in c.items()},
    )


def test_three_of_four_correct():
    ds = build_dataset(
        [("s1", "q1", "c1", 1), ("s2", "q1", "c1", 1), ("s3", "q1", "c1", 1), ("s4", "q1", "c1", 0)]
    )
    table = compute_ctt(ds)
    assert table.question_diff[ds.question_vocab.index("q1")] == 0.75


def test_all_correct_concept_hits_boundary():
    ds = build_dataset([("s1", "q1", "c9", 1), ("s2", "q2", "c9", 1)])
    table = compute_ctt(ds)
    assert table.concept_diff[ds.concept_vocab.index("c9")] == 1.0


def test_unseen_item_absent_and_falls_back():
    ds = build_dataset([("s1", "q1", "c1", 1)])
    table = compute_ctt(ds)
    unseen = 999
    assert unseen not in table.question_diff
    assert table.lookup(unseen, "question", "positive") == 0.75
    assert table.lookup(unseen, "question", "negative") == 0.25


def test_ctt_matches_brute_force_oracle(rng):
    for _ in range(20):
        ds = random_dataset(rng)
        table = compute_ctt(ds)
        q_oracle, c_oracle = brute_force_ctt(ds)
        assert table.question_diff == q_oracle
        assert table.concept_diff == c_oracle


def test_ctt_ignores_non_train_interactions(rng):
    ds = random_dataset(rng)
    table = compute_ctt(ds)
    extra = [Interaction("zz_new", "q0", "c0", 0, 0), Interaction("zz_new", "q1", "c1", 1, 1)]
    bigger = Dataset.from_interactions(
        [e for evts in ds.students.values() for e in evts] + extra
    )
    # recomputing on train-only data is unaffected by what exists elsewhere
    again = compute_ctt(ds)
    assert again.question_diff == table.question_diff
    assert bigger.n_interactions == ds.n_interactions + 2


def test_laplace_smoothing_optional():
    ds = build_dataset([("s1", "q1", "c1", 1)])
    assert compute_ctt(ds).question_diff[1] == 1.0
    smoothed = compute_ctt(ds, laplace_alpha=1.0)
    assert smoothed.question_diff[1] == pytest.approx(2.0 / 3.0)


def test_quantize_known_values():
    assert quantize(0.75) == 75
    assert quantize(0.0) == 0
    assert quantize(1.0) == 100
    assert quantize(0.005) == 1  # round half up


def test_quantize_rejects_out_of_range():
    with pytest.raises(ValueError):
        quantize(1.0001)
    with pytest.raises(ValueError):
        quantize(-0.2)


def test_quantize_half_step_table_matches_decimal_oracle():
    # independent oracle: exact decimal expansion of the float, ROUND_HALF_UP
    for k in range(201):
        d = k * 0.005
        if d > 1.0:
            d = 1.0
        expected = int(
            (decimal.Decimal(d) * 100).quantize(0, rounding=decimal.ROUND_HALF_UP)
        )
        assert quantize(d) == expected, f"d={d!r}"


@given(unit_floats)
def test_quantize_dequantize_error_bounded(d):
    assert abs(dequantize(quantize(d)) - d) <= 0.005


def test_hard_negative_values():
    assert hard_negative(0.75) == 0.25
    assert hard_negative(0.5) == 0.5
    assert hard_negative(1.0) == 0.0  # response 1 -> 0


@given(unit_floats)
def test_hard_negative_involution(d):
    assert abs(hard_negative(hard_negative(d)) - d) <= 1e-12


def test_negative_bin_roundtrip_exact():
    for b in range(101):
        assert negative_bin(negative_bin(b)) == b


def test_lookup_seen_negative_is_complement():
    table = DifficultyTable(question_diff={3: 0.6}, concept_diff={})
    assert lookup(table, 3, "question", "negative") == pytest.approx(0.4, abs=1e-12)


def test_lookup_prefers_text_predictor_for_unseen():
    table = DifficultyTable(question_diff={1: 0.9}, concept_diff={}).with_predictors(
        question_predictor=lambda idx: 0.62
    )
    assert table.lookup(7, "question", "positive") == 0.62
    assert table.lookup(7, "question", "negative") == pytest.approx(0.38, abs=1e-12)
    # seen items ignore the predictor
    assert table.lookup(1, "question", "positive") == 0.9


def test_lookup_predictor_none_falls_back():
    table = DifficultyTable(question_diff={}, concept_diff={}).with_predictors(
        question_predictor=lambda idx: None
    )
    assert table.lookup(5, "question", "positive") == 0.75


def test_asymmetric_fallbacks():
    table = DifficultyTable(question_diff={}, concept_diff={}, fallback_negative=0.75)
    assert not table.symmetric
    assert table.lookup(5, "question", "negative") == 0.75


def test_table_rejects_out_of_range_values():
    with pytest.raises(ValueError):
        DifficultyTable(question_diff={1: 1.5}, concept_diff={})


def test_bin_array_covers_reserved_rows():
    table = DifficultyTable(question_diff={1: 0.6}, concept_diff={})
    bins = bin_array(table, "question", 4)
    assert bins[0] == 0  # pad row, masked downstream
    assert bins[1] == 60
    assert bins[2] == 75  # unseen -> fallback
    assert bins[3] == 75  # unk/mask row -> fallback


def test_export_import_roundtrip(tmp_path, rng):
    ds = random_dataset(rng)
    table = compute_ctt(ds)
    path = tmp_path / "difficulty.csv"
    export_table_csv(table, path, ds.question_vocab, ds.concept_vocab)
    loaded = import_table_csv(path, ds.question_vocab, ds.concept_vocab)
    assert loaded.question_diff == dict(table.question_diff)
    assert loaded.concept_diff == dict(table.concept_diff)
    assert loaded.source == DifficultySource.CTT
