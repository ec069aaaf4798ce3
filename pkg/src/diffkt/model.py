"""Embedding views and the convolution-attention encoder stack.

The encoder input at position t sums six lookups: question, concept, question
difficulty, concept difficulty, previous response, and position. The response
channel is shifted right one step (the first slot gets the zero pad/mask row)
so a position's own answer never feeds its own prediction; attention is causal
throughout for the same reason.

The negative view reuses the positive tables at transformed indices, bin ->
100 - bin and response -> 1 - response, which makes the hard-negative relation
an exact involution. ``separate_negative_tables`` restores the literal reading
with dedicated negative difficulty/response tables instead. A single encoder
stack is shared across the four training invocations by default;
``untied_encoders`` gives each invocation its own weights.

Forward passes mutate nothing, so the four invocations may run sequentially or
batched together with identical results.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import SequenceBatch
from .difficulty import N_BINS

PROB_EPS = 1e-7

ROLES = ("bce", "view1", "view2", "negative")


class NumericalError(RuntimeError):
    """Non-finite activations inside the encoder stack."""

    def __init__(self, layer: int):
        self.layer = layer
        super().__init__(f"non-finite activations after encoder layer {layer}")


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 512
    num_heads: int = 8
    layers_per_encoder: int = 4
    num_encoders: int = 4
    max_len: int = 100
    conv_kernel_size: int = 9
    dropout: float = 0.1
    monotonic_decay: float = 0.1
    untied_encoders: bool = False
    separate_negative_tables: bool = False

    def __post_init__(self) -> None:
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.max_len < 1:
            raise ValueError("max_len must be at least 1")
        if self.conv_kernel_size < 1 or self.conv_kernel_size % 2 == 0:
            raise ValueError("conv_kernel_size must be odd and positive")
        if self.num_encoders < 1 or self.layers_per_encoder < 1:
            raise ValueError("encoder counts must be at least 1")
        if not self.monotonic_decay > 0:
            raise ValueError("monotonic_decay must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


def _init_table(table: nn.Embedding) -> None:
    nn.init.trunc_normal_(table.weight, std=0.02)
    if table.padding_idx is not None:
        with torch.no_grad():
            table.weight[table.padding_idx].zero_()


class EmbeddingTables(nn.Module):
    """The six lookup tables behind both embedding views.

    Rows follow the package index conventions: row 0 pads (frozen at zero),
    item rows 1..n, and one trailing unknown/mask row for questions and
    concepts. Difficulty tables hold 101 live bins plus the pad row; the
    response table holds pad plus rows for 0 and 1. The position table is
    shared by both views.
    """

    def __init__(self, n_questions: int, n_concepts: int, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.question = nn.Embedding(n_questions + 2, d, padding_idx=0)
        self.concept = nn.Embedding(n_concepts + 2, d, padding_idx=0)
        self.q_difficulty = nn.Embedding(N_BINS + 1, d, padding_idx=0)
        self.c_difficulty = nn.Embedding(N_BINS + 1, d, padding_idx=0)
        self.response = nn.Embedding(2 + 1, d, padding_idx=0)
        self.position = nn.Embedding(cfg.max_len, d)
        self.separate_negative = cfg.separate_negative_tables
        if self.separate_negative:
            self.q_difficulty_neg = nn.Embedding(N_BINS + 1, d, padding_idx=0)
            self.c_difficulty_neg = nn.Embedding(N_BINS + 1, d, padding_idx=0)
            self.response_neg = nn.Embedding(2 + 1, d, padding_idx=0)
        for module in self.modules():
            if isinstance(module, nn.Embedding):
                _init_table(module)

    def sum_rows(self, rows: "Rows", negative_tables: bool = False) -> torch.Tensor:
        if negative_tables and not self.separate_negative:
            raise ValueError("model was built without separate negative tables")
        qd = self.q_difficulty_neg if negative_tables else self.q_difficulty
        cd = self.c_difficulty_neg if negative_tables else self.c_difficulty
        r = self.response_neg if negative_tables else self.response
        return (
            self.question(rows.questions)
            + self.concept(rows.concepts)
            + qd(rows.q_difficulty)
            + cd(rows.c_difficulty)
            + r(rows.responses)
            + self.position(rows.positions)
        )


@dataclass(frozen=True)
class Rows:
    """Embedding-row indices for one batch and view, ready for lookup."""

    questions: torch.Tensor
    concepts: torch.Tensor
    q_difficulty: torch.Tensor
    c_difficulty: torch.Tensor
    responses: torch.Tensor
    positions: torch.Tensor


def negative_bin_transform(bins: torch.Tensor) -> torch.Tensor:
    """bin -> 100 - bin; applying it twice gives the identity."""
    return (N_BINS - 1) - bins


def shift_response_rows(rows: torch.Tensor) -> torch.Tensor:
    """Move response rows one step right; the first slot gets the pad/mask row."""
    shifted = torch.zeros_like(rows)
    shifted[:, 1:] = rows[:, :-1]
    return shifted


def view_rows(batch: SequenceBatch, view: str = "positive", shift_responses: bool = True) -> Rows:
    """Translate a SequenceBatch into embedding-row indices for one view.

    Positive view: difficulty rows are bin + 1 (pad row 0), response rows are
    r + 1. Negative view maps bin -> 100 - bin and r -> 1 - r first, unless
    the batch carries explicit negative bins (asymmetric fallback tables).
    """
    if view not in ("positive", "negative"):
        raise ValueError(f"view must be 'positive' or 'negative', got {view!r}")
    mask = torch.from_numpy(np.ascontiguousarray(batch.valid_mask)).long()
    questions = torch.from_numpy(np.ascontiguousarray(batch.questions)).long()
    concepts = torch.from_numpy(np.ascontiguousarray(batch.concepts)).long()
    q_bins = torch.from_numpy(np.ascontiguousarray(batch.q_difficulty_bins)).long()
    c_bins = torch.from_numpy(np.ascontiguousarray(batch.c_difficulty_bins)).long()
    responses = torch.from_numpy(np.ascontiguousarray(batch.responses)).long()

    if view == "negative":
        if batch.q_neg_bins is not None:
            q_bins = torch.from_numpy(np.ascontiguousarray(batch.q_neg_bins)).long()
            c_bins = torch.from_numpy(np.ascontiguousarray(batch.c_neg_bins)).long()
        else:
            q_bins = negative_bin_transform(q_bins)
            c_bins = negative_bin_transform(c_bins)
        responses = 1 - responses

    response_rows = (responses + 1) * mask
    if shift_responses:
        response_rows = shift_response_rows(response_rows)
    batch_size, max_len = batch.questions.shape
    positions = torch.arange(max_len).expand(batch_size, max_len)
    return Rows(
        questions=questions * mask,
        concepts=concepts * mask,
        q_difficulty=(q_bins + 1) * mask,
        c_difficulty=(c_bins + 1) * mask,
        responses=response_rows,
        positions=positions,
    )


def embed_positive(batch: SequenceBatch, tables: EmbeddingTables, shift_responses: bool = True) -> torch.Tensor:
    """Element-wise sum of the six positive-view lookups at each position."""
    return tables.sum_rows(view_rows(batch, "positive", shift_responses))


def embed_negative(batch: SequenceBatch, tables: EmbeddingTables, shift_responses: bool = True) -> torch.Tensor:
    """Positive embedding with difficulty bins and responses hard-negated.

    With separate negative tables the indices stay untransformed and the
    negation lives in the dedicated tables instead.
    """
    if tables.separate_negative:
        return tables.sum_rows(view_rows(batch, "positive", shift_responses), negative_tables=True)
    return tables.sum_rows(view_rows(batch, "negative", shift_responses))


def monotonic_attention(
    queries: torch.Tensor,
    keys: torch.Tensor,
    values: torch.Tensor,
    valid_mask: torch.Tensor,
    decay: torch.Tensor | float,
    return_weights: bool = False,
):
    """Causal scaled dot-product attention with a linear distance penalty.

    The pre-softmax score of query t against key s <= t is q.k/sqrt(d) -
    decay * (t - s), i.e. an exponential recency decay after the softmax,
    standing in for how students forget. ``queries``/``keys``/``values`` are
    [batch, heads, len, head_dim]; ``valid_mask`` is [batch, len]; ``decay``
    is a scalar or per-head tensor (zero recovers plain causal attention).

    Padded query positions attend to themselves so every row stays finite;
    their output is discarded by downstream masking.
    """
    b, h, t, head_dim = queries.shape
    scores = queries @ keys.transpose(-2, -1) / math.sqrt(head_dim)
    positions = torch.arange(t, device=scores.device)
    distance = (positions.view(-1, 1) - positions.view(1, -1)).clamp(min=0).to(scores.dtype)
    if not torch.is_tensor(decay):
        decay = torch.as_tensor(decay, dtype=scores.dtype, device=scores.device)
    scores = scores - decay.reshape(1, -1, 1, 1) * distance

    causal = positions.view(-1, 1) >= positions.view(1, -1)
    allowed = causal.view(1, 1, t, t) & (valid_mask.bool().view(b, 1, 1, t))
    allowed = allowed | torch.eye(t, dtype=torch.bool, device=scores.device).view(1, 1, t, t)
    scores = scores.masked_fill(~allowed, float("-inf"))
    weights = scores.softmax(dim=-1)
    attended = weights @ values
    if return_weights:
        return attended, weights
    return attended


class SpanDynamicConv(nn.Module):
    """Depthwise causal convolution with kernels generated from a local span.

    A causal depthwise convolution summarizes the last ``kernel_size`` inputs
    at each position; a pointwise projection of that summary yields softmax
    weights over the same causal taps, which then mix the value projection of
    the input. Position t therefore depends only on positions <= t.
    """

    def __init__(self, dim: int, kernel_size: int):
        super().__init__()
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd and positive")
        self.kernel_size = kernel_size
        self.value = nn.Linear(dim, dim)
        self.span_conv = nn.Conv1d(dim, dim, kernel_size, groups=dim)
        self.kernel_proj = nn.Linear(dim, kernel_size)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        k = self.kernel_size
        values = self.value(x)
        span_in = F.pad(x.transpose(1, 2), (k - 1, 0))
        span = self.span_conv(span_in).transpose(1, 2)
        weights = self.kernel_proj(span).softmax(dim=-1)
        taps = F.pad(values, (0, 0, k - 1, 0)).unfold(1, k, 1)  # [b, t, dim, k]
        return torch.einsum("btdk,btk->btd", taps, weights)


class ConvAttentionLayer(nn.Module):
    """One encoder layer: monotonic-attention heads and span-convolution heads
    side by side, then a position-wise feed-forward block. Heads split evenly
    between the two mechanisms (attention takes the odd head when uneven)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        head_dim = d // cfg.num_heads
        self.n_attn = (cfg.num_heads + 1) // 2
        self.n_conv = cfg.num_heads // 2
        self.head_dim = head_dim
        attn_dim = self.n_attn * head_dim
        conv_dim = self.n_conv * head_dim
        self.qkv = nn.Linear(d, 3 * attn_dim)
        self.decay = nn.Parameter(torch.full((self.n_attn,), float(cfg.monotonic_decay)))
        if self.n_conv:
            self.conv_in = nn.Linear(d, conv_dim)
            self.conv = SpanDynamicConv(conv_dim, cfg.conv_kernel_size)
        self.out = nn.Linear(d, d)
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.ff = nn.Sequential(
            nn.Linear(d, 4 * d),
            nn.GELU(),
            nn.Dropout(cfg.dropout),
            nn.Linear(4 * d, d),
        )
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor, valid_mask: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.n_attn, self.head_dim).permute(2, 0, 3, 1, 4)
        attended = monotonic_attention(qkv[0], qkv[1], qkv[2], valid_mask, self.decay)
        parts = [attended.transpose(1, 2).reshape(b, t, -1)]
        if self.n_conv:
            parts.append(self.conv(self.conv_in(x)))
        mixed = self.out(torch.cat(parts, dim=-1))
        x = self.norm1(x + self.dropout(mixed))
        x = self.norm2(x + self.dropout(self.ff(x)))
        return x


class EncoderStack(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.layers = nn.ModuleList(ConvAttentionLayer(cfg) for _ in range(cfg.layers_per_encoder))

    def forward(self, x: torch.Tensor, valid_mask: torch.Tensor) -> torch.Tensor:
        for index, layer in enumerate(self.layers):
            x = layer(x, valid_mask)
            if not torch.isfinite(x).all():
                raise NumericalError(index)
        return x


@dataclass(frozen=True)
class EncoderOutput:
    hidden: torch.Tensor
    probs: torch.Tensor


class KTModel(nn.Module):
    """Knowledge-tracing encoder with positive and hard-negative views."""

    def __init__(self, n_questions: int, n_concepts: int, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        self.n_questions = n_questions
        self.n_concepts = n_concepts
        self.tables = EmbeddingTables(n_questions, n_concepts, cfg)
        n_stacks = cfg.num_encoders if cfg.untied_encoders else 1
        self.encoders = nn.ModuleList(EncoderStack(cfg) for _ in range(n_stacks))
        self.embed_dropout = nn.Dropout(cfg.dropout)
        self.head = nn.Linear(cfg.embed_dim, 1)
        self.project_concept = nn.Linear(cfg.embed_dim, cfg.embed_dim)
        self.project_question = nn.Linear(cfg.embed_dim, cfg.embed_dim)

    def _encoder(self, role: str) -> EncoderStack:
        if role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {role!r}")
        return self.encoders[ROLES.index(role) % len(self.encoders)]

    def forward(self, batch: SequenceBatch, view: str = "positive", role: str | None = None) -> EncoderOutput:
        if role is None:
            role = "bce" if view == "positive" else "negative"
        use_negative_tables = view == "negative" and self.cfg.separate_negative_tables
        rows = view_rows(batch, "positive" if use_negative_tables else view)
        embedded = self.tables.sum_rows(rows, negative_tables=use_negative_tables)
        mask = torch.from_numpy(np.ascontiguousarray(batch.valid_mask)).long()
        hidden = self._encoder(role)(self.embed_dropout(embedded), mask)
        probs = torch.sigmoid(self.head(hidden)).squeeze(-1).clamp(PROB_EPS, 1.0 - PROB_EPS)
        return EncoderOutput(hidden=hidden, probs=probs)

    def contrastive_latents(self, hidden: torch.Tensor, valid_mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Masked-mean pooling projected into concept and question latent spaces."""
        pooled = masked_mean(hidden, valid_mask)
        return self.project_concept(pooled), self.project_question(pooled)


def masked_mean(hidden: torch.Tensor, valid_mask: torch.Tensor) -> torch.Tensor:
    mask = valid_mask.to(hidden.dtype).unsqueeze(-1)
    totals = (hidden * mask).sum(dim=1)
    counts = mask.sum(dim=1).clamp(min=1.0)
    return totals / counts


CHECKPOINT_FORMAT = "diffkt-checkpoint/1"


def save_checkpoint(model: KTModel, path: str | Path, extra: Mapping[str, object] | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model_config": asdict(model.cfg),
        "n_questions": model.n_questions,
        "n_concepts": model.n_concepts,
        "state_dict": model.state_dict(),
        "extra": dict(extra or {}),
    }
    torch.save(payload, str(path))


def load_checkpoint(path: str | Path) -> tuple[KTModel, dict]:
    payload = torch.load(str(path), map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {payload.get('format')!r}")
    cfg = ModelConfig(**payload["model_config"])
    model = KTModel(payload["n_questions"], payload["n_concepts"], cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload.get("extra", {})
