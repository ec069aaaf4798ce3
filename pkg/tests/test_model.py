from __future__ import annotations

import numpy as np
import pytest
import torch

from diffkt.data import SequenceBatch
from diffkt.model import (
    EmbeddingTables,
    KTModel,
    ModelConfig,
    NumericalError,
    SpanDynamicConv,
    embed_negative,
    embed_positive,
    load_checkpoint,
    monotonic_attention,
    negative_bin_transform,
    save_checkpoint,
    shift_response_rows,
    view_rows,
)
from oracles import finite_difference_grad, reference_causal_attention, relative_error

SMALL = ModelConfig(
    embed_dim=16,
    num_heads=2,
    layers_per_encoder=2,
    num_encoders=2,
    max_len=8,
    conv_kernel_size=3,
    dropout=0.0,
    monotonic_decay=0.1,
)


def toy_batch(
    batch=2,
    max_len=8,
    n_questions=5,
    n_concepts=3,
    seed=0,
    lengths=None,
) -> SequenceBatch:
    rng = np.random.default_rng(seed)
    lengths = lengths or [max_len] * batch
    questions = np.zeros((batch, max_len), dtype=np.int64)
    concepts = np.zeros((batch, max_len), dtype=np.int64)
    responses = np.zeros((batch, max_len), dtype=np.int64)
    q_bins = np.zeros((batch, max_len), dtype=np.int64)
    c_bins = np.zeros((batch, max_len), dtype=np.int64)
    mask = np.zeros((batch, max_len), dtype=np.int64)
    for i, n in enumerate(lengths):
        questions[i, :n] = rng.integers(1, n_questions + 1, size=n)
        concepts[i, :n] = rng.integers(1, n_concepts + 1, size=n)
        responses[i, :n] = rng.integers(0, 2, size=n)
        q_bins[i, :n] = rng.integers(0, 101, size=n)
        c_bins[i, :n] = rng.integers(0, 101, size=n)
        mask[i, :n] = 1
    return SequenceBatch(questions, concepts, responses, q_bins, c_bins, mask)


# --- embeddings --------------------------------------------------------------


def test_zero_tables_give_zero_embedding():
    tables = EmbeddingTables(5, 3, SMALL)
    with torch.no_grad():
        for table in tables.modules():
            if isinstance(table, torch.nn.Embedding):
                table.weight.zero_()
    out = embed_positive(toy_batch(), tables)
    assert torch.all(out == 0)


def test_single_position_manual_sum_oracle():
    tables = EmbeddingTables(5, 3, SMALL)
    batch = toy_batch(batch=1, lengths=[3])
    rows = view_rows(batch, "positive")
    out = embed_positive(batch, tables)
    t = 1
    manual = (
        tables.question.weight[rows.questions[0, t]]
        + tables.concept.weight[rows.concepts[0, t]]
        + tables.q_difficulty.weight[rows.q_difficulty[0, t]]
        + tables.c_difficulty.weight[rows.c_difficulty[0, t]]
        + tables.response.weight[rows.responses[0, t]]
        + tables.position.weight[t]
    )
    assert torch.allclose(out[0, t], manual)


def test_padding_positions_reduce_to_position_embedding():
    tables = EmbeddingTables(5, 3, SMALL)
    batch = toy_batch(batch=1, lengths=[2])
    out = embed_positive(batch, tables)
    # all non-position rows at a padded slot are the frozen zero pad rows
    assert torch.allclose(out[0, 5], tables.position.weight[5])


def test_negative_view_transforms_bins_and_responses():
    batch = toy_batch(batch=1, lengths=[4], seed=3)
    batch.q_difficulty_bins[0, :4] = [75, 50, 0, 100]
    batch.responses[0, :4] = [1, 0, 1, 1]
    pos = view_rows(batch, "positive")
    neg = view_rows(batch, "negative")
    assert neg.q_difficulty[0, :4].tolist() == [25 + 1, 50 + 1, 100 + 1, 0 + 1]
    # shifted: slot 0 is the pad/mask row, slot t carries response t-1 flipped
    assert pos.responses[0, :4].tolist() == [0, 2, 1, 2]
    assert neg.responses[0, :4].tolist() == [0, 1, 2, 1]


def test_negative_transform_is_involution():
    bins = torch.arange(0, 101)
    assert torch.equal(negative_bin_transform(negative_bin_transform(bins)), bins)


def test_negative_rows_use_explicit_bins_when_present():
    batch = toy_batch(batch=1, lengths=[2], seed=3)
    object.__setattr__(batch, "q_neg_bins", np.full_like(batch.q_difficulty_bins, 75))
    object.__setattr__(batch, "c_neg_bins", np.full_like(batch.c_difficulty_bins, 75))
    neg = view_rows(batch, "negative")
    assert neg.q_difficulty[0, :2].tolist() == [76, 76]


def test_shift_response_rows():
    rows = torch.tensor([[2, 1, 2, 0]])
    assert shift_response_rows(rows).tolist() == [[0, 2, 1, 2]]


def test_embed_negative_with_separate_tables_uses_untransformed_rows():
    cfg = ModelConfig(**{**SMALL.__dict__, "separate_negative_tables": True})
    tables = EmbeddingTables(5, 3, cfg)
    batch = toy_batch(batch=1, lengths=[2])
    out = embed_negative(batch, tables)
    rows = view_rows(batch, "positive")
    manual = (
        tables.question.weight[rows.questions[0, 0]]
        + tables.concept.weight[rows.concepts[0, 0]]
        + tables.q_difficulty_neg.weight[rows.q_difficulty[0, 0]]
        + tables.c_difficulty_neg.weight[rows.c_difficulty[0, 0]]
        + tables.response_neg.weight[rows.responses[0, 0]]
        + tables.position.weight[0]
    )
    assert torch.allclose(out[0, 0], manual)


def test_out_of_range_index_errors():
    tables = EmbeddingTables(5, 3, SMALL)
    batch = toy_batch()
    batch.questions[0, 0] = 99
    with pytest.raises(IndexError):
        embed_positive(batch, tables)


# --- monotonic attention ------------------------------------------------------


def rand_qkv(seed=0, b=2, h=2, t=6, d=4, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    shape = (b, h, t, d)
    return (
        torch.randn(shape, generator=g, dtype=dtype),
        torch.randn(shape, generator=g, dtype=dtype),
        torch.randn(shape, generator=g, dtype=dtype),
    )


def test_zero_decay_matches_reference_causal_attention():
    q, k, v = rand_qkv()
    mask = torch.ones(2, 6)
    mask[1, 4:] = 0
    out = monotonic_attention(q, k, v, mask, decay=0.0)
    ref = reference_causal_attention(q, k, v, mask, decay=0.0)
    assert (out - ref).abs().max().item() < 1e-6


def test_positive_decay_matches_reference():
    q, k, v = rand_qkv(seed=5)
    mask = torch.ones(2, 6)
    out = monotonic_attention(q, k, v, mask, decay=0.7)
    ref = reference_causal_attention(q, k, v, mask, decay=0.7)
    assert (out - ref).abs().max().item() < 1e-9


def test_large_decay_collapses_to_current_position():
    q, k, v = rand_qkv(seed=9)
    mask = torch.ones(2, 6)
    _, weights = monotonic_attention(q, k, v, mask, decay=50.0, return_weights=True)
    diagonal = weights[:, :, torch.arange(6), torch.arange(6)]
    assert (1.0 - diagonal).abs().max().item() < 1e-3


def test_attention_rows_sum_to_one_over_allowed_positions():
    q, k, v = rand_qkv(seed=2)
    mask = torch.ones(2, 6)
    mask[0, 3:] = 0
    _, weights = monotonic_attention(q, k, v, mask, decay=0.3, return_weights=True)
    sums = weights.sum(dim=-1)
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-9)
    # causal: no weight above the diagonal
    upper = torch.triu(weights, diagonal=1)
    assert upper.abs().max().item() == 0.0


def test_attention_gradients_match_finite_differences():
    for seed in range(3):
        q, k, v = rand_qkv(seed=seed, b=3, h=2, t=8, d=8)
        mask = torch.ones(3, 8)
        decay = torch.tensor([0.2, 0.05], dtype=torch.float64)
        probe = torch.randn(3, 2, 8, 8, generator=torch.Generator().manual_seed(77), dtype=torch.float64)
        leaves = {"q": q, "k": k, "v": v, "decay": decay}
        for leaf in leaves.values():
            leaf.requires_grad_(True)

        def objective():
            return (monotonic_attention(leaves["q"], leaves["k"], leaves["v"], mask, leaves["decay"]) * probe).sum()

        loss = objective()
        grads = torch.autograd.grad(loss, list(leaves.values()))
        for (name, leaf), grad in zip(leaves.items(), grads):
            fd = finite_difference_grad(objective, leaf.detach())
            assert relative_error(grad, fd) < 1e-4, name


# --- span dynamic convolution ---------------------------------------------------


def test_sdc_shape_contract():
    conv = SpanDynamicConv(512, 9)
    x = torch.randn(2, 100, 512)
    assert conv(x).shape == (2, 100, 512)


def test_sdc_kernel_size_one_with_identity_value_is_identity():
    conv = SpanDynamicConv(6, 1)
    with torch.no_grad():
        conv.value.weight.copy_(torch.eye(6))
        conv.value.bias.zero_()
    x = torch.randn(2, 5, 6)
    assert torch.allclose(conv(x), x, atol=1e-6)


def test_sdc_causality_perturbation_oracle():
    conv = SpanDynamicConv(8, 3).double()
    g = torch.Generator().manual_seed(3)
    x = torch.randn(1, 7, 8, generator=g, dtype=torch.float64)
    base = conv(x)
    for t in range(6):
        perturbed = x.clone()
        perturbed[0, t + 1 :] += torch.randn(6 - t, 8, generator=g, dtype=torch.float64)
        out = conv(perturbed)
        assert torch.allclose(out[0, : t + 1], base[0, : t + 1], atol=1e-12), t


def test_sdc_gradients_match_finite_differences():
    for seed in range(3):
        conv = SpanDynamicConv(16, 3).double()
        g = torch.Generator().manual_seed(seed)
        x = torch.randn(3, 8, 16, generator=g, dtype=torch.float64, requires_grad=True)
        probe = torch.randn(3, 8, 16, generator=g, dtype=torch.float64)

        def objective():
            return (conv(x) * probe).sum()

        (grad,) = torch.autograd.grad(objective(), x)
        fd = finite_difference_grad(objective, x.detach())
        assert relative_error(grad, fd) < 1e-4


# --- encoder stack and full model ------------------------------------------------


def test_untrained_model_output_contract():
    model = KTModel(5, 3, SMALL)
    out = model(toy_batch(lengths=[8, 3]))
    assert out.probs.shape == (2, 8)
    assert ((out.probs > 0) & (out.probs < 1)).all()
    assert torch.isfinite(out.hidden).all()


def test_batch_duplication_gives_duplicate_outputs():
    model = KTModel(5, 3, SMALL)
    model.eval()
    batch = toy_batch(batch=1, lengths=[6], seed=4)
    doubled = SequenceBatch(
        *[np.concatenate([getattr(batch, f)] * 2) for f in (
            "questions", "concepts", "responses", "q_difficulty_bins", "c_difficulty_bins", "valid_mask"
        )]
    )
    out = model(doubled)
    assert torch.allclose(out.probs[0], out.probs[1], atol=1e-6)
    assert torch.allclose(out.hidden[0], out.hidden[1], atol=1e-6)


def test_fully_padded_row_stays_finite():
    model = KTModel(5, 3, SMALL)
    model.eval()
    batch = toy_batch(batch=2, lengths=[5, 8], seed=1)
    batch.valid_mask[0, :] = 0
    batch.questions[0, :] = 0
    batch.concepts[0, :] = 0
    batch.responses[0, :] = 0
    batch.q_difficulty_bins[0, :] = 0
    batch.c_difficulty_bins[0, :] = 0
    out = model(batch)
    assert torch.isfinite(out.probs).all()
    assert torch.isfinite(out.hidden).all()


def test_non_finite_activations_raise_with_layer_index():
    model = KTModel(5, 3, SMALL)
    with torch.no_grad():
        model.encoders[0].layers[1].out.weight.fill_(float("nan"))
    with pytest.raises(NumericalError) as info:
        model(toy_batch())
    assert info.value.layer == 1


def test_full_stack_causality_perturbation():
    model = KTModel(5, 3, SMALL)
    model.eval()
    rng = np.random.default_rng(11)
    for trial in range(5):
        batch = toy_batch(batch=1, lengths=[8], seed=trial)
        base = model(batch).probs.detach()
        t = int(rng.integers(0, 7))
        perturbed = toy_batch(batch=1, lengths=[8], seed=trial)
        perturbed.questions[0, t + 1 :] = rng.integers(1, 6, size=7 - t)
        perturbed.responses[0, t + 1 :] = rng.integers(0, 2, size=7 - t)
        perturbed.q_difficulty_bins[0, t + 1 :] = rng.integers(0, 101, size=7 - t)
        out = model(perturbed).probs.detach()
        assert torch.allclose(out[0, : t + 1], base[0, : t + 1], atol=1e-6)


def test_own_response_never_leaks_into_own_prediction():
    model = KTModel(5, 3, SMALL)
    model.eval()
    batch = toy_batch(batch=1, lengths=[8], seed=6)
    base = model(batch).probs.detach()
    flipped = toy_batch(batch=1, lengths=[8], seed=6)
    t = 4
    flipped.responses[0, t] = 1 - flipped.responses[0, t]
    out = model(flipped).probs.detach()
    assert torch.allclose(out[0, : t + 1], base[0, : t + 1], atol=1e-9)
    assert not torch.allclose(out[0, t + 1 :], base[0, t + 1 :], atol=1e-9)


def test_untied_encoders_use_distinct_weights():
    cfg = ModelConfig(**{**SMALL.__dict__, "untied_encoders": True, "num_encoders": 4})
    model = KTModel(5, 3, cfg)
    assert len(model.encoders) == 4
    assert model._encoder("bce") is not model._encoder("view1")
    shared = KTModel(5, 3, SMALL)
    assert shared._encoder("bce") is shared._encoder("negative")


def test_checkpoint_roundtrip(tmp_path):
    model = KTModel(5, 3, SMALL)
    model.eval()
    batch = toy_batch(seed=8)
    before = model(batch).probs.detach()
    path = tmp_path / "model.pt"
    save_checkpoint(model, path, extra={"note": "unit"})
    loaded, extra = load_checkpoint(path)
    assert extra["note"] == "unit"
    assert loaded.cfg == model.cfg
    after = loaded(batch).probs.detach()
    assert torch.equal(before, after)
