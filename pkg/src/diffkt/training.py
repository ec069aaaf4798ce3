"""The combined loss, the contrastive training loop, and k-fold CV.

The total objective mixes a masked binary cross-entropy term with an InfoNCE
contrastive term, weighted (1 - lambda_c) : lambda_c. Each training batch is
seen four ways: once plainly for BCE, twice through independent augmentation
draws (the positive pair), and once through the hard-negative embedding view.
Validation and test evaluation never touch the augmentation pipeline.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .augmentation import AugmentationConfig, AugmentationContext, make_views
from .data import DataSplit, Dataset, Seq, make_windows, sequences_to_batch
from .difficulty import DifficultyTable, compute_ctt
from .metrics import UndefinedMetricError, auc_from_arrays, rmse_from_arrays
from .model import KTModel

BCE_EPS = 1e-7


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss; carries the history so far."""

    def __init__(self, epoch: int, history: list["EpochStats"]):
        self.epoch = epoch
        self.history = history
        super().__init__(f"non-finite loss at epoch {epoch}")


@dataclass(frozen=True)
class TrainingConfig:
    lambda_c: float = 0.1
    learning_rate: float = 0.001
    batch_size: int = 512
    early_stop_patience: int = 10
    max_epochs: int = 100
    grad_accum_steps: int = 1
    temperature: float = 0.1
    in_batch_negatives: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.lambda_c <= 1.0:
            raise ValueError("lambda_c must lie in [0, 1]")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be at least 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.batch_size < 1 or self.grad_accum_steps < 1 or self.max_epochs < 1:
            raise ValueError("batch_size, grad_accum_steps and max_epochs must be positive")


def bce_loss(probs: torch.Tensor, responses: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Masked mean of -(r log p + (1 - r) log(1 - p)).

    Probabilities are clamped away from {0, 1} by 1e-7 so exact predictions
    stay finite.
    """
    probs = probs.clamp(BCE_EPS, 1.0 - BCE_EPS)
    r = responses.to(probs.dtype)
    m = mask.to(probs.dtype)
    per_position = -(r * probs.log() + (1.0 - r) * (1.0 - probs).log())
    total = (per_position * m).sum()
    count = m.sum()
    if count.item() == 0:
        raise ValueError("bce_loss needs at least one valid position")
    return total / count


def _normalized(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise ValueError(f"zero-norm vector in {what}")
    return x / norms


def info_nce_similarity(
    anchor: torch.Tensor,
    positive: torch.Tensor,
    negatives: torch.Tensor,
    temperature: float,
) -> torch.Tensor:
    """-log exp(sim(a, p)) / (exp(sim(a, p)) + sum exp(sim(a, n))).

    ``sim`` is cosine similarity divided by ``temperature``. Accepts a single
    anchor ([d] with negatives [k, d]) or a batch ([b, d] with [b, k, d]); the
    batched form returns one loss per anchor.
    """
    single = anchor.dim() == 1
    if single:
        anchor = anchor.unsqueeze(0)
        positive = positive.unsqueeze(0)
        negatives = negatives.unsqueeze(0)
    a = _normalized(anchor, "anchor")
    p = _normalized(positive, "positive")
    n = _normalized(negatives, "negatives")
    pos_logit = (a * p).sum(-1, keepdim=True) / temperature
    neg_logits = torch.einsum("bd,bkd->bk", a, n) / temperature
    logits = torch.cat([pos_logit, neg_logits], dim=1)
    losses = -torch.log_softmax(logits, dim=1)[:, 0]
    return losses[0] if single else losses


@dataclass(frozen=True)
class ContrastiveViews:
    """Encoder latents for the two positive views and the hard-negative view,
    with per-sequence pooled vectors in the concept and question spaces."""

    view1_hidden: torch.Tensor
    view2_hidden: torch.Tensor
    negative_hidden: torch.Tensor
    cz1: torch.Tensor
    cz2: torch.Tensor
    czn: torch.Tensor
    qz1: torch.Tensor
    qz2: torch.Tensor
    qzn: torch.Tensor

    def __post_init__(self) -> None:
        b = self.view1_hidden.shape[0]
        for name in ("view2_hidden", "negative_hidden", "cz1", "cz2", "czn", "qz1", "qz2", "qzn"):
            if getattr(self, name).shape[0] != b:
                raise ValueError("all contrastive views must share the batch dimension")

    @classmethod
    def from_hidden(
        cls,
        model: KTModel,
        view1_hidden: torch.Tensor,
        view1_mask: torch.Tensor,
        view2_hidden: torch.Tensor,
        view2_mask: torch.Tensor,
        negative_hidden: torch.Tensor,
        negative_mask: torch.Tensor,
    ) -> "ContrastiveViews":
        cz1, qz1 = model.contrastive_latents(view1_hidden, view1_mask)
        cz2, qz2 = model.contrastive_latents(view2_hidden, view2_mask)
        czn, qzn = model.contrastive_latents(negative_hidden, negative_mask)
        return cls(view1_hidden, view2_hidden, negative_hidden, cz1, cz2, czn, qz1, qz2, qzn)


def _info_nce_in_batch(
    anchors: torch.Tensor,
    positives: torch.Tensor,
    hard_negatives: torch.Tensor,
    temperature: float,
    in_batch_negatives: bool,
) -> torch.Tensor:
    """Per-anchor InfoNCE where the negative set is the hard-negative vector
    plus, optionally, every other in-batch positive-(view-2) vector."""
    a = _normalized(anchors, "anchor")
    p = _normalized(positives, "positive")
    h = _normalized(hard_negatives, "negatives")
    b = a.shape[0]
    pos = (a * p).sum(-1, keepdim=True) / temperature
    hard = (a * h).sum(-1, keepdim=True) / temperature
    columns = [pos, hard]
    if in_batch_negatives and b > 1:
        sims = (a @ p.T) / temperature
        off_diagonal = sims[~torch.eye(b, dtype=torch.bool)].reshape(b, b - 1)
        columns.append(off_diagonal)
    logits = torch.cat(columns, dim=1)
    return -torch.log_softmax(logits, dim=1)[:, 0]


def contrastive_loss(
    views: ContrastiveViews,
    temperature: float,
    in_batch_negatives: bool = True,
) -> torch.Tensor:
    """Mean over the concatenated concept-similarity and question-similarity
    InfoNCE losses across the batch."""
    sim_c = _info_nce_in_batch(views.cz1, views.cz2, views.czn, temperature, in_batch_negatives)
    sim_q = _info_nce_in_batch(views.qz1, views.qz2, views.qzn, temperature, in_batch_negatives)
    return torch.cat([sim_c, sim_q]).mean()


def total_loss(l_bce, l_cl, lambda_c: float):
    """(1 - lambda_c) * BCE + lambda_c * contrastive."""
    return (1.0 - lambda_c) * l_bce + lambda_c * l_cl


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    bce: float
    cl: float
    valid_auc: float | None
    valid_rmse: float | None


HISTORY_COLUMNS = ("epoch", "train_loss", "bce", "cl", "valid_auc", "valid_rmse")


def history_to_csv(history: Sequence[EpochStats], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow(
                [
                    row.epoch,
                    repr(row.train_loss),
                    repr(row.bce),
                    repr(row.cl),
                    "" if row.valid_auc is None else repr(row.valid_auc),
                    "" if row.valid_rmse is None else repr(row.valid_rmse),
                ]
            )


@dataclass
class TrainResult:
    model: KTModel
    history: list[EpochStats]
    best_epoch: int
    best_valid_auc: float | None


def predictions(
    model: KTModel,
    dataset: Dataset,
    table: DifficultyTable,
    batch_size: int = 512,
) -> tuple[np.ndarray, np.ndarray]:
    """Pooled (probs, labels) over all valid positions, augmentation-free."""
    model.eval()
    probs_out: list[np.ndarray] = []
    labels_out: list[np.ndarray] = []
    with torch.no_grad():
        windows = make_windows(dataset, model.cfg.max_len)
        for start in range(0, len(windows), batch_size):
            chunk = [w.seq for w in windows[start : start + batch_size]]
            batch = sequences_to_batch(
                chunk, table, model.cfg.max_len, dataset.question_vocab, dataset.concept_vocab
            )
            out = model(batch, view="positive", role="bce")
            mask = batch.valid_mask.astype(bool)
            probs_out.append(out.probs.numpy()[mask])
            labels_out.append(batch.responses[mask])
    if not probs_out:
        return np.empty(0), np.empty(0, dtype=np.int64)
    return np.concatenate(probs_out), np.concatenate(labels_out)


def evaluate_model(
    model: KTModel,
    dataset: Dataset,
    table: DifficultyTable,
    batch_size: int = 512,
) -> tuple[float, float]:
    """(AUC, RMSE) on the dataset's pooled predictions."""
    probs, labels = predictions(model, dataset, table, batch_size)
    return auc_from_arrays(probs, labels), rmse_from_arrays(probs, labels.astype(np.float64))


def _dump_augmented_csv(path: str | Path, originals: Sequence[Seq], view1: Sequence[Seq], view2: Sequence[Seq]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["sequence", "view", "position", "question", "concept", "response"])
        for label, seqs in (("original", originals), ("view1", view1), ("view2", view2)):
            for i, seq in enumerate(seqs):
                for pos in range(len(seq)):
                    writer.writerow(
                        [i, label, pos, seq.questions[pos], seq.concepts[pos], seq.responses[pos]]
                    )


def train(
    model: KTModel,
    split: DataSplit,
    tcfg: TrainingConfig,
    acfg: AugmentationConfig | None = None,
    table: DifficultyTable | None = None,
    dump_augmented: str | Path | None = None,
) -> TrainResult:
    """Fit the model with the combined objective and early stopping.

    The difficulty table defaults to CTT over the training split. Per epoch,
    window order is reshuffled deterministically from (seed, epoch); with
    lambda_c = 0 the contrastive machinery (augmentation included) is skipped
    entirely, making the run a plain BCE run. Training stops once validation
    AUC has not improved for ``early_stop_patience`` consecutive epochs and
    the best-validation weights are restored.
    """
    acfg = acfg if acfg is not None else AugmentationConfig()
    if table is None:
        table = compute_ctt(split.train)
    torch.manual_seed(tcfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=tcfg.learning_rate)

    max_len = model.cfg.max_len
    qv, cv = split.train.question_vocab, split.train.concept_vocab
    seqs = [w.seq for w in make_windows(split.train, max_len)]
    if not seqs:
        raise ValueError("training split has no sequences")
    ctx = AugmentationContext.from_dataset(split.train, table, max_len)
    has_valid = split.valid.n_interactions > 0

    history: list[EpochStats] = []
    best_auc = -math.inf
    best_state: dict | None = None
    best_epoch = 0
    since_best = 0

    for epoch in range(1, tcfg.max_epochs + 1):
        model.train()
        order = np.random.default_rng([tcfg.seed, epoch]).permutation(len(seqs))
        batch_losses: list[tuple[float, float, float]] = []
        optimizer.zero_grad()
        stepped_cleanly = True
        for bi, start in enumerate(range(0, len(order), tcfg.batch_size)):
            batch_seqs = [seqs[j] for j in order[start : start + tcfg.batch_size]]
            batch = sequences_to_batch(batch_seqs, table, max_len, qv, cv)
            out = model(batch, view="positive", role="bce")
            responses = torch.from_numpy(batch.responses)
            mask = torch.from_numpy(batch.valid_mask)
            l_bce = bce_loss(out.probs, responses, mask)

            if tcfg.lambda_c > 0:
                view1, view2 = make_views(batch_seqs, acfg, ctx, [tcfg.seed, epoch, bi])
                if dump_augmented is not None and epoch == 1 and bi == 0:
                    _dump_augmented_csv(dump_augmented, batch_seqs, view1, view2)
                batch1 = sequences_to_batch(view1, table, max_len, qv, cv)
                batch2 = sequences_to_batch(view2, table, max_len, qv, cv)
                out1 = model(batch1, view="positive", role="view1")
                out2 = model(batch2, view="positive", role="view2")
                # the hard negative is the second view with difficulties and
                # responses reflected, matching the t2 index of its latents
                out_neg = model(batch2, view="negative", role="negative")
                view2_mask = torch.from_numpy(batch2.valid_mask)
                views = ContrastiveViews.from_hidden(
                    model,
                    out1.hidden,
                    torch.from_numpy(batch1.valid_mask),
                    out2.hidden,
                    view2_mask,
                    out_neg.hidden,
                    view2_mask,
                )
                l_cl = contrastive_loss(views, tcfg.temperature, tcfg.in_batch_negatives)
                loss = total_loss(l_bce, l_cl, tcfg.lambda_c)
            else:
                l_cl = torch.zeros(())
                loss = l_bce

            if not torch.isfinite(loss):
                raise DivergenceError(epoch, history)
            (loss / tcfg.grad_accum_steps).backward()
            stepped_cleanly = False
            if (bi + 1) % tcfg.grad_accum_steps == 0:
                optimizer.step()
                optimizer.zero_grad()
                stepped_cleanly = True
            batch_losses.append(
                (loss.detach().item(), l_bce.detach().item(), l_cl.detach().item())
            )
        if not stepped_cleanly:
            optimizer.step()
            optimizer.zero_grad()

        valid_auc = valid_rmse = None
        if has_valid:
            try:
                valid_auc, valid_rmse = evaluate_model(model, split.valid, table, tcfg.batch_size)
            except UndefinedMetricError:
                # single-class validation slice: no AUC this epoch, no stopping signal
                valid_auc = valid_rmse = None
        losses = np.asarray(batch_losses)
        history.append(
            EpochStats(
                epoch=epoch,
                train_loss=float(losses[:, 0].mean()),
                bce=float(losses[:, 1].mean()),
                cl=float(losses[:, 2].mean()),
                valid_auc=valid_auc,
                valid_rmse=valid_rmse,
            )
        )

        if has_valid and valid_auc is not None:
            if valid_auc > best_auc:
                best_auc = valid_auc
                best_epoch = epoch
                best_state = copy.deepcopy(model.state_dict())
                since_best = 0
            else:
                since_best += 1
                if since_best >= tcfg.early_stop_patience:
                    break

    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        best_epoch = len(history)
    return TrainResult(
        model=model,
        history=history,
        best_epoch=best_epoch,
        best_valid_auc=best_auc if best_state is not None else None,
    )


@dataclass(frozen=True)
class CVResult:
    fold_students: list[list[str]]
    fold_metrics: list[dict[str, float]]
    mean: dict[str, float]
    std: dict[str, float]


def k_fold_cv(
    dataset: Dataset,
    k: int,
    runner: Callable[[DataSplit], Mapping[str, float]],
    seed: int = 0,
    valid_frac: float = 0.1,
) -> CVResult:
    """Student-level k-fold cross-validation.

    Folds are disjoint, exhaustive, and deterministic for a fixed seed; each
    fold serves once as the test set while a validation slice is carved from
    the remaining pool. ``runner`` maps a DataSplit to a metrics mapping.
    """
    students = dataset.student_ids
    if k < 2:
        raise ValueError("k must be at least 2")
    if len(students) < k:
        raise ValueError(f"{len(students)} students cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    shuffled = [students[i] for i in rng.permutation(len(students))]
    folds = [shuffled[i::k] for i in range(k)]

    fold_metrics: list[dict[str, float]] = []
    for i, fold in enumerate(folds):
        test_ids = set(fold)
        pool = [s for s in shuffled if s not in test_ids]
        n_valid = round(len(pool) * valid_frac)
        if valid_frac > 0:
            n_valid = min(max(n_valid, 1), len(pool) - 1)
        pool_order = np.random.default_rng([seed, i]).permutation(len(pool))
        valid_ids = {pool[j] for j in pool_order[:n_valid]}
        train_ids = {s for s in pool if s not in valid_ids}
        split = DataSplit(
            train=dataset.subset(train_ids),
            valid=dataset.subset(valid_ids),
            test=dataset.subset(test_ids),
            ratio=(1 - 1 / k, valid_frac, 1 / k),
        )
        fold_metrics.append(dict(runner(split)))

    keys = sorted({key for metrics in fold_metrics for key in metrics})
    mean = {key: float(np.mean([m[key] for m in fold_metrics if key in m])) for key in keys}
    std = {
        key: float(np.std([m[key] for m in fold_metrics if key in m], ddof=1))
        if sum(key in m for m in fold_metrics) > 1
        else 0.0
        for key in keys
    }
    return CVResult(fold_students=folds, fold_metrics=fold_metrics, mean=mean, std=std)
