"""Seed sweeps and ablation grids.

Each driver returns a pandas DataFrame that the CLI writes to CSV and plots.
Model initialization and splits are re-seeded per run, and the two arms of a
comparison always share seeds, so differences come from the treatment rather
than the draw.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Sequence

import pandas as pd
import torch

from .augmentation import STRATEGY_ORDER, AugmentationConfig
from .data import DataSplit, Dataset, split_dataset
from .difficulty import DifficultyTable, compute_ctt
from .model import KTModel, ModelConfig
from .textdiff import TextModelConfig, difficulty_text_pairs, evaluate_difficulty_prediction, fit_text_model
from .training import TrainingConfig, evaluate_model, train


def new_model(split: DataSplit, model_cfg: ModelConfig, seed: int) -> KTModel:
    torch.manual_seed(seed)
    return KTModel(len(split.train.question_vocab), len(split.train.concept_vocab), model_cfg)


def fit_and_eval(
    split: DataSplit,
    model_cfg: ModelConfig,
    tcfg: TrainingConfig,
    acfg: AugmentationConfig | None = None,
    table: DifficultyTable | None = None,
    model_seed: int | None = None,
) -> dict[str, float]:
    """Train a fresh model on the split and report test AUC/RMSE."""
    if table is None:
        table = compute_ctt(split.train)
    model = new_model(split, model_cfg, tcfg.seed if model_seed is None else model_seed)
    train(model, split, tcfg, acfg, table=table)
    auc, rmse = evaluate_model(model, split.test, table, tcfg.batch_size)
    return {"auc": auc, "rmse": rmse}


def unseen_question_rate(split: DataSplit) -> float:
    """Fraction of distinct test questions that never appear in train."""

    def question_ids(dataset: Dataset) -> set[str]:
        return {e.question_id for events in dataset.students.values() for e in events}

    test_items = question_ids(split.test)
    if not test_items:
        return 0.0
    return len(test_items - question_ids(split.train)) / len(test_items)


def diff_cl_comparison(
    dataset: Dataset,
    seeds: Sequence[int],
    model_cfg: ModelConfig,
    tcfg: TrainingConfig,
    acfg: AugmentationConfig | None = None,
    ratio: tuple[float, float, float] = (0.8, 0.1, 0.2),
) -> pd.DataFrame:
    """Difficulty-reflected negatives (unseen 0.75/0.25) versus the flat
    0.75-everywhere treatment, paired by seed."""
    rows = []
    for seed in seeds:
        split = split_dataset(dataset, ratio, seed=seed)
        base = compute_ctt(split.train)
        rate = unseen_question_rate(split)
        for arm, fallbacks in (("diff_cl", (0.75, 0.25)), ("non_diff_cl", (0.75, 0.75))):
            table = base.with_fallbacks(*fallbacks)
            metrics = fit_and_eval(
                split, model_cfg, replace(tcfg, seed=seed), acfg, table=table, model_seed=seed
            )
            rows.append({"arm": arm, "seed": seed, "unseen_rate": rate, **metrics})
    return pd.DataFrame(rows)


def summarize_arms(frame: pd.DataFrame, by: str = "arm") -> pd.DataFrame:
    grouped = frame.groupby(by)
    out = grouped.agg(
        auc_mean=("auc", "mean"),
        auc_std=("auc", "std"),
        rmse_mean=("rmse", "mean"),
        rmse_std=("rmse", "std"),
        runs=("auc", "size"),
    ).reset_index()
    return out.fillna(0.0)


DEFAULT_LAMBDA_GRID = (0.0, 0.1, 0.5, 0.8, 1.0)


def lambda_sweep(
    dataset: Dataset,
    model_cfg: ModelConfig,
    tcfg: TrainingConfig,
    acfg: AugmentationConfig | None = None,
    grid: Sequence[float] = DEFAULT_LAMBDA_GRID,
    ratio: tuple[float, float, float] = (0.8, 0.1, 0.2),
    seed: int = 0,
) -> pd.DataFrame:
    """Test metrics across the contrastive-weight grid on one shared split."""
    split = split_dataset(dataset, ratio, seed=seed)
    table = compute_ctt(split.train)
    rows = []
    for lam in grid:
        metrics = fit_and_eval(
            split, model_cfg, replace(tcfg, lambda_c=lam, seed=seed), acfg, table=table, model_seed=seed
        )
        rows.append({"lambda_c": lam, **metrics})
    return pd.DataFrame(rows)


def single_strategy_config(name: str, rng_seed: int = 0) -> AugmentationConfig:
    """One strategy at its mixed-setting probability, everything else off."""
    mixed = AugmentationConfig.mixed()
    if name not in STRATEGY_ORDER:
        raise ValueError(f"unknown strategy {name!r}")
    prob = mixed.prob(name) if mixed.prob(name) > 0 else 0.03
    key = {"cutoff": "cutoff_prob", "span_cutoff": "span_cutoff_prob"}.get(name, f"{name}_prob")
    return AugmentationConfig(**{key: prob, "rng_seed": rng_seed})


def augment_sweep(
    dataset: Dataset,
    model_cfg: ModelConfig,
    tcfg: TrainingConfig,
    ratio: tuple[float, float, float] = (0.8, 0.1, 0.2),
    seed: int = 0,
) -> pd.DataFrame:
    """Baseline vs each strategy alone vs the mixed setting, one shared split."""
    split = split_dataset(dataset, ratio, seed=seed)
    table = compute_ctt(split.train)
    runs: list[tuple[str, AugmentationConfig | None]] = [("baseline", None)]
    runs += [(name, single_strategy_config(name)) for name in STRATEGY_ORDER]
    runs.append(("mixed", AugmentationConfig.mixed()))
    rows = []
    for name, acfg in runs:
        metrics = fit_and_eval(
            split, model_cfg, replace(tcfg, seed=seed), acfg, table=table, model_seed=seed
        )
        rows.append({"strategy": name, **metrics})
    return pd.DataFrame(rows)


def difficulty_prediction_comparison(
    dataset: Dataset,
    text_cfg: TextModelConfig,
    ratio: tuple[float, float, float] = (0.8, 0.1, 0.2),
    seed: int = 0,
    baselines: Sequence[float] = (0.75, 0.25),
) -> pd.DataFrame:
    """Holdout RMSE of the text model against the constant baselines,
    separately for question and concept difficulty."""
    split = split_dataset(dataset, ratio, seed=seed)
    table = compute_ctt(split.train)
    rows = []
    for kind in ("question", "concept"):
        pairs = difficulty_text_pairs(split.train, table, kind, joint=text_cfg.joint_question_input)
        if len(pairs) < 5:
            continue
        model = fit_text_model(pairs, replace(text_cfg, seed=seed))
        heldout = model.holdout_pairs or pairs
        report = evaluate_difficulty_prediction(model, heldout, baselines)
        for predictor, rmse in report.items():
            rows.append({"kind": kind, "predictor": predictor, "rmse": rmse})
    return pd.DataFrame(rows)
