from __future__ import annotations

import numpy as np
import pytest

from conftest import build_dataset
from diffkt.data import split_dataset
from diffkt.difficulty import DifficultySource, DifficultyTable, compute_ctt
from diffkt.textdiff import (
    TextModelConfig,
    TextPair,
    char_length_analysis,
    compose_text_inputs,
    difficulty_text_pairs,
    evaluate_difficulty_prediction,
    fill_unseen,
    fit_text_model,
    predict_difficulty,
)

FAST = TextModelConfig(embed_dim=16, num_heads=2, num_layers=1, epochs=150, seed=0)


def length_corpus(n=40, seed=0, noise=0.01):
    """Difficulty is a decreasing function of text length."""
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        length = int(rng.integers(5, 90))
        text = "".join(rng.choice(list("abcdefg ")) for _ in range(length))
        value = float(np.clip(0.92 - 0.006 * length + rng.normal(0, noise), 0.05, 0.95))
        pairs.append(TextPair(text, value))
    return pairs


def test_single_pair_memorization():
    model = fit_text_model([TextPair("an easy one", 0.8)], FAST)
    assert model.train_rmse is not None and model.train_rmse < 1.0
    assert model.holdout_rmse is None


def test_constant_corpus_converges_to_constant():
    pairs = [TextPair(f"question number {i}", 0.6) for i in range(20)]
    model = fit_text_model(pairs, FAST)
    for pair in pairs[:5]:
        assert model.predict(pair.text) == pytest.approx(0.6, abs=0.02)


def test_length_signal_beats_constant_baseline():
    pairs = length_corpus()
    model = fit_text_model(pairs, TextModelConfig(embed_dim=16, num_heads=2, num_layers=1, epochs=250, seed=1))
    assert model.holdout_rmse is not None
    # evaluate on a fresh sample from the same generator
    fresh = length_corpus(n=20, seed=99)
    report = evaluate_difficulty_prediction(model, fresh)
    assert report["model"] < report["constant_0.75"]
    assert report["constant_0.25"] > report["constant_0.75"]


def test_empty_pairs_rejected():
    with pytest.raises(ValueError):
        fit_text_model([], FAST)


def test_non_train_provenance_rejected():
    with pytest.raises(ValueError):
        fit_text_model([TextPair("x", 0.5, origin="test")], FAST)


def test_prediction_determinism_and_range():
    model = fit_text_model([TextPair("alpha", 0.3), TextPair("beta", 0.7)], FAST)
    text = "alpha beta gamma"
    assert model.predict(text) == model.predict(text)
    assert predict_difficulty(model, text) == model.predict(text)
    for weird in ["", "\x00\xff\x01", "日本語のテキスト", "a" * 500]:
        value = model.predict(weird)
        assert 0.0 <= value <= 1.0


def test_unknown_characters_map_to_unk():
    model = fit_text_model([TextPair("aaaa", 0.2), TextPair("bbbb", 0.9)], FAST)
    # all-unknown text is a valid input and must produce a bounded value
    assert 0.0 <= model.predict("zzzz") <= 1.0


def split_with_unseen():
    rows = []
    for s in range(6):
        rows.append((f"s{s}", "q_common", "c1", 1, 0))
        rows.append((f"s{s}", f"q_only_{s}", "c1", s % 2, 1))
    ds = build_dataset(
        rows,
        question_texts={"q_common": "shared question", **{f"q_only_{s}": f"solo {s}" for s in range(6)}},
        concept_texts={"c1": "the concept"},
    )
    return split_dataset(ds, (0.8, 0.2, 0.2), seed=0)


def test_fill_unseen_behaviour():
    split = split_with_unseen()
    table = compute_ctt(split.train)
    model = fit_text_model([TextPair("solo", 0.4), TextPair("shared question", 0.9)], FAST)
    texts = compose_text_inputs(split.train, "question", joint=False)
    filled = fill_unseen(table, model, texts, split, kind="question")

    vocab = split.train.question_vocab
    common = vocab.index("q_common")
    assert filled.question_diff[common] == table.question_diff[common]  # train item kept
    assert filled.source == DifficultySource.TEXT_MODEL

    unseen = [
        vocab.index(f"q_only_{s}")
        for s in range(6)
        if f"s{s}" not in split.train.students
    ]
    assert unseen
    for idx in unseen:
        assert idx in filled.question_diff
        assert 0.0 <= filled.question_diff[idx] <= 1.0

    again = fill_unseen(filled, model, texts, split, kind="question")
    assert again.question_diff == filled.question_diff  # idempotent


def test_fill_unseen_without_text_keeps_fallback():
    split = split_with_unseen()
    table = compute_ctt(split.train)
    model = fit_text_model([TextPair("solo", 0.4)], FAST)
    filled = fill_unseen(table, model, {}, split, kind="question")
    vocab = split.train.question_vocab
    for s in range(6):
        if f"s{s}" not in split.train.students:
            idx = vocab.index(f"q_only_{s}")
            assert idx not in filled.question_diff
            assert filled.lookup(idx, "question", "positive") == 0.75


def test_difficulty_text_pairs_train_only_provenance():
    split = split_with_unseen()
    table = compute_ctt(split.train)
    pairs = difficulty_text_pairs(split.train, table, "question", joint=True)
    assert pairs and all(p.origin == "train" for p in pairs)
    # joint input appends the concept text
    assert any("the concept" in p.text for p in pairs)


def test_evaluate_difficulty_prediction_exact_cases():
    model = fit_text_model([TextPair("aaa", 0.75), TextPair("bbb", 0.75)], FAST)
    heldout = [TextPair("aaa", 0.75), TextPair("bbb", 0.75)]
    report = evaluate_difficulty_prediction(model, heldout)
    assert report["constant_0.75"] == 0.0
    labels = [TextPair("x", 0.7), TextPair("y", 0.7)]
    report2 = evaluate_difficulty_prediction(model, labels)
    assert report2["constant_0.25"] == pytest.approx(45.0, abs=1e-9)


def test_char_length_analysis_flat_and_correlated():
    texts = {f"q{i}": "x" * (5 + i) for i in range(30)}
    rows = [("s", f"q{i}", "c1", 1, i) for i in range(30)]
    ds = build_dataset(rows, question_texts=texts)
    uniform = DifficultyTable(
        question_diff={ds.question_vocab.index(f"q{i}"): 0.6 for i in range(30)},
        concept_diff={},
    )
    frame = char_length_analysis(ds, uniform)
    assert set(frame["mean_correct"]) == {0.6}

    sloped = DifficultyTable(
        question_diff={ds.question_vocab.index(f"q{i}"): 0.9 - 0.02 * i for i in range(30)},
        concept_diff={},
    )
    frame = char_length_analysis(ds, sloped)
    corr = np.corrcoef(frame["length"], frame["mean_correct"])[0, 1]
    assert corr < -0.9


def test_char_length_analysis_cap_excludes_long_texts():
    texts = {"short": "x" * 10, "long": "y" * 300}
    ds = build_dataset(
        [("s", "short", "c1", 1, 0), ("s", "long", "c1", 0, 1)], question_texts=texts
    )
    table = compute_ctt(ds)
    frame = char_length_analysis(ds, table, cap=120)
    assert frame["length"].max() < 120
    assert len(frame) == 1
