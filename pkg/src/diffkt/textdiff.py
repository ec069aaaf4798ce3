"""Text-to-difficulty regression for items unseen in the training split.

A small character-level encoder (embeddings, a couple of self-attention
layers, masked-mean pooling, sigmoid head) is trained from scratch to regress
the correct-rate difficulty of an item from its text. It stands in for a
fine-tuned pretrained language model behind the identical contract: fit on
training-split pairs only, then predict difficulties for items that appear
only in validation/test. RMSE is reported on the 0-100 scale alongside the
constant baselines it must beat to be useful.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
import torch
from torch import nn

from .data import DataSplit, Dataset
from .difficulty import DifficultySource, DifficultyTable

TEXT_SEPARATOR = " || "


@dataclass(frozen=True)
class TextModelConfig:
    embed_dim: int = 32
    num_heads: int = 2
    num_layers: int = 2
    max_text_len: int = 120
    epochs: int = 300
    learning_rate: float = 0.01
    batch_size: int = 0  # 0 means full batch
    holdout_frac: float = 0.2
    seed: int = 0
    joint_question_input: bool = True

    def __post_init__(self) -> None:
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")
        if not 0.0 <= self.holdout_frac < 1.0:
            raise ValueError("holdout_frac must lie in [0, 1)")


@dataclass(frozen=True)
class TextPair:
    """A (text, difficulty) training example with split provenance."""

    text: str
    value: float
    origin: str = "train"


class CharTokenizer:
    """Character vocabulary frozen at fit time; unknown characters map to UNK."""

    PAD = 0
    UNK = 1

    def __init__(self, corpus: Iterable[str]):
        chars = sorted({ch for text in corpus for ch in text})
        self._index = {ch: i + 2 for i, ch in enumerate(chars)}

    @property
    def size(self) -> int:
        return len(self._index) + 2

    def encode(self, text: str, max_len: int) -> list[int]:
        return [self._index.get(ch, self.UNK) for ch in text[:max_len]]


class _TextEncoderNet(nn.Module):
    def __init__(self, vocab_size: int, cfg: TextModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.char = nn.Embedding(vocab_size, d, padding_idx=CharTokenizer.PAD)
        self.position = nn.Embedding(cfg.max_text_len, d)
        layer = nn.TransformerEncoderLayer(
            d_model=d,
            nhead=cfg.num_heads,
            dim_feedforward=4 * d,
            dropout=0.0,
            batch_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers=cfg.num_layers, enable_nested_tensor=False)
        self.head = nn.Linear(d, 1)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        # tokens: [batch, len] with PAD = 0
        mask = tokens != CharTokenizer.PAD
        positions = torch.arange(tokens.shape[1], device=tokens.device)
        x = self.char(tokens) + self.position(positions).unsqueeze(0)
        # fully padded rows (empty text) attend everywhere to stay finite
        key_padding = ~mask
        key_padding = key_padding & mask.any(dim=1, keepdim=True)
        x = self.encoder(x, src_key_padding_mask=key_padding)
        weights = mask.to(x.dtype).unsqueeze(-1)
        pooled = (x * weights).sum(1) / weights.sum(1).clamp(min=1.0)
        return torch.sigmoid(self.head(pooled)).squeeze(-1)


class TextDiffModel:
    """Trained text-to-difficulty regressor; predictions always lie in [0, 1]."""

    def __init__(self, tokenizer: CharTokenizer, net: _TextEncoderNet, cfg: TextModelConfig):
        self.tokenizer = tokenizer
        self.net = net
        self.cfg = cfg
        self.train_rmse: float | None = None  # 0-100 scale
        self.holdout_rmse: float | None = None
        self.holdout_pairs: list[TextPair] = []

    def _tokens(self, texts: Sequence[str]) -> torch.Tensor:
        encoded = [self.tokenizer.encode(t, self.cfg.max_text_len) for t in texts]
        width = max(1, max((len(e) for e in encoded), default=1))
        out = torch.zeros((len(texts), width), dtype=torch.long)
        for i, row in enumerate(encoded):
            out[i, : len(row)] = torch.as_tensor(row, dtype=torch.long)
        return out

    def predict(self, text: str) -> float:
        return float(self.predict_many([text])[0])

    def predict_many(self, texts: Sequence[str]) -> np.ndarray:
        self.net.eval()
        with torch.no_grad():
            return self.net(self._tokens(texts)).numpy()


def predict_difficulty(model: TextDiffModel, text: str) -> float:
    """Deterministic difficulty estimate in [0, 1] for arbitrary text."""
    return model.predict(text)


def fit_text_model(pairs: Sequence[TextPair], cfg: TextModelConfig = TextModelConfig()) -> TextDiffModel:
    """Fit the regressor on training-split (text, difficulty) pairs.

    A seeded holdout slice is carved from the pairs for honest RMSE reporting;
    the tokenizer is built from the fit slice only and frozen. Raises if the
    pair list is empty or carries non-train provenance.
    """
    if not pairs:
        raise ValueError("cannot fit a text model on zero pairs")
    bad = [p for p in pairs if p.origin != "train"]
    if bad:
        raise ValueError("text-difficulty pairs must come from the training split only")
    for p in pairs:
        if not 0.0 <= p.value <= 1.0:
            raise ValueError(f"difficulty {p.value} outside [0, 1]")

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(pairs))
    n_holdout = int(round(cfg.holdout_frac * len(pairs)))
    n_holdout = min(n_holdout, len(pairs) - 1)
    holdout = [pairs[i] for i in order[:n_holdout]]
    fit_pairs = [pairs[i] for i in order[n_holdout:]]

    tokenizer = CharTokenizer(p.text for p in fit_pairs)
    torch.manual_seed(cfg.seed)
    net = _TextEncoderNet(tokenizer.size, cfg)
    model = TextDiffModel(tokenizer, net, cfg)

    tokens = model._tokens([p.text for p in fit_pairs])
    targets = torch.as_tensor([p.value for p in fit_pairs], dtype=torch.float32)
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    loss_fn = nn.MSELoss()
    batch = len(fit_pairs) if cfg.batch_size == 0 else cfg.batch_size

    net.train()
    for epoch in range(cfg.epochs):
        order = torch.randperm(len(fit_pairs))
        for start in range(0, len(fit_pairs), batch):
            idx = order[start : start + batch]
            optimizer.zero_grad()
            loss = loss_fn(net(tokens[idx]), targets[idx])
            loss.backward()
            optimizer.step()

    model.train_rmse = _rmse_100(model, fit_pairs)
    model.holdout_rmse = _rmse_100(model, holdout) if holdout else None
    model.holdout_pairs = holdout
    return model


def _rmse_100(model: TextDiffModel, pairs: Sequence[TextPair]) -> float:
    predicted = model.predict_many([p.text for p in pairs])
    actual = np.asarray([p.value for p in pairs])
    return float(np.sqrt(np.mean((predicted - actual) ** 2)) * 100.0)


def compose_text_inputs(dataset: Dataset, kind: str, joint: bool = True) -> dict[str, str]:
    """Model input text per item id.

    Questions optionally concatenate their concept's text after a separator
    (the joint reading of item difficulty); concepts use their own text.
    Items without text are omitted.
    """
    if kind == "concept":
        return dict(dataset.concept_texts or {})
    if kind != "question":
        raise ValueError(f"kind must be 'question' or 'concept', got {kind!r}")
    question_texts = dataset.question_texts or {}
    if not joint:
        return dict(question_texts)
    concept_texts = dataset.concept_texts or {}
    concept_of = dataset.question_concepts()
    out: dict[str, str] = {}
    for qid, text in question_texts.items():
        ci = concept_of.get(dataset.question_vocab.index(qid))
        cid = dataset.concept_vocab.id_of(ci) if ci is not None else None
        concept_text = concept_texts.get(cid, "") if cid is not None else ""
        out[qid] = text + TEXT_SEPARATOR + concept_text if concept_text else text
    return out


def difficulty_text_pairs(
    train: Dataset,
    table: DifficultyTable,
    kind: str = "question",
    joint: bool = True,
) -> list[TextPair]:
    """(text, CTT difficulty) pairs for every trained item that has text."""
    texts = compose_text_inputs(train, kind, joint)
    vocab = train.question_vocab if kind == "question" else train.concept_vocab
    entries = table.question_diff if kind == "question" else table.concept_diff
    pairs: list[TextPair] = []
    for idx in sorted(entries):
        item = vocab.id_of(idx)
        if item is None or item not in texts:
            continue
        pairs.append(TextPair(text=texts[item], value=entries[idx], origin="train"))
    return pairs


def fill_unseen(
    table: DifficultyTable,
    model: TextDiffModel,
    texts: Mapping[str, str],
    split: DataSplit,
    kind: str = "question",
) -> DifficultyTable:
    """Predict difficulties for items in valid/test that are absent from train.

    Train items keep their CTT values; unseen items without text keep the
    constant fallback. Idempotent: already-filled items are not touched. The
    returned table is marked as text-model sourced.
    """
    vocab = split.train.question_vocab if kind == "question" else split.train.concept_vocab
    entries = dict(table.question_diff if kind == "question" else table.concept_diff)

    def item_indices(dataset: Dataset) -> set[int]:
        out: set[int] = set()
        for events in dataset.students.values():
            for e in events:
                item = e.question_id if kind == "question" else e.concept_id
                out.add(vocab.index(item))
        return out

    train_items = item_indices(split.train)
    candidates = (item_indices(split.valid) | item_indices(split.test)) - train_items
    for idx in sorted(candidates):
        if idx in entries:
            continue
        item = vocab.id_of(idx)
        if item is None or item not in texts:
            continue
        entries[idx] = model.predict(texts[item])

    kwargs = {"question_diff": entries} if kind == "question" else {"concept_diff": entries}
    return replace(table, source=DifficultySource.TEXT_MODEL, **kwargs)


def evaluate_difficulty_prediction(
    model: TextDiffModel,
    heldout: Sequence[TextPair],
    baselines: Sequence[float] = (0.75, 0.25),
) -> dict[str, float]:
    """RMSE (0-100 scale) of the model and of each constant baseline."""
    if not heldout:
        raise ValueError("need at least one heldout pair")
    actual = np.asarray([p.value for p in heldout])
    predicted = model.predict_many([p.text for p in heldout])
    out = {"model": float(np.sqrt(np.mean((predicted - actual) ** 2)) * 100.0)}
    for b in baselines:
        out[f"constant_{b:g}"] = float(np.sqrt(np.mean((b - actual) ** 2)) * 100.0)
    return out


def char_length_analysis(
    dataset: Dataset,
    table: DifficultyTable,
    cap: int = 120,
    bucket_width: int = 1,
) -> pd.DataFrame:
    """Question counts and mean/median correctness per text-length bucket.

    Questions at or beyond ``cap`` characters are excluded from the trend, as
    are questions without text or without a difficulty value. Returns columns
    (length, count, mean_correct, median_correct) sorted by length.
    """
    if bucket_width < 1:
        raise ValueError("bucket_width must be at least 1")
    texts = dataset.question_texts or {}
    rows: dict[int, list[float]] = {}
    for qid, text in texts.items():
        idx = dataset.question_vocab.index(qid)
        if idx not in table.question_diff:
            continue
        length = len(text)
        if length >= cap:
            continue
        bucket = (length // bucket_width) * bucket_width
        rows.setdefault(bucket, []).append(table.question_diff[idx])
    records = [
        {
            "length": bucket,
            "count": len(values),
            "mean_correct": float(np.mean(values)),
            "median_correct": float(np.median(values)),
        }
        for bucket, values in sorted(rows.items())
    ]
    return pd.DataFrame.from_records(records, columns=["length", "count", "mean_correct", "median_correct"])
