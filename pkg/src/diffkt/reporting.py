"""Figure and markdown-report emission from experiment CSVs.

Every plot renders from a DataFrame (usually re-read from a CSV on disk), so
the report command can regenerate figures without rerunning experiments.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import pandas as pd


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_history(history: pd.DataFrame, path: str | Path) -> Path:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(history["epoch"], history["train_loss"], label="total")
    ax1.plot(history["epoch"], history["bce"], label="bce")
    ax1.plot(history["epoch"], history["cl"], label="contrastive")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("training loss")
    ax1.legend()
    if history["valid_auc"].notna().any():
        ax2.plot(history["epoch"], history["valid_auc"], marker="o")
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("validation AUC")
    return _save(fig, path)


def plot_lambda_sweep(frame: pd.DataFrame, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(frame["lambda_c"], frame["auc"], marker="o")
    ax.set_xlabel("contrastive loss weight")
    ax.set_ylabel("test AUC")
    return _save(fig, path)


def plot_augment_sweep(frame: pd.DataFrame, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(8, 3.5))
    ax.bar(frame["strategy"], frame["auc"])
    baseline = frame.loc[frame["strategy"] == "baseline", "auc"]
    if len(baseline):
        ax.axhline(float(baseline.iloc[0]), linestyle="--", color="gray", label="baseline")
        ax.legend()
    ax.set_ylabel("test AUC")
    ax.tick_params(axis="x", rotation=60)
    return _save(fig, path)


def plot_diff_cl(summary: pd.DataFrame, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(summary["arm"], summary["auc_mean"], yerr=summary["auc_std"], capsize=4)
    ax.set_ylabel("test AUC (mean over seeds)")
    return _save(fig, path)


def plot_difficulty_prediction(frame: pd.DataFrame, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.35
    kinds = sorted(frame["kind"].unique())
    predictors = list(dict.fromkeys(frame["predictor"]))
    for i, kind in enumerate(kinds):
        sub = frame[frame["kind"] == kind].set_index("predictor").reindex(predictors)
        ax.bar(
            [p + (i - (len(kinds) - 1) / 2) * width for p in range(len(predictors))],
            sub["rmse"],
            width=width,
            label=kind,
        )
    ax.set_xticks(range(len(predictors)), predictors)
    ax.set_ylabel("RMSE (0-100 scale)")
    ax.legend()
    return _save(fig, path)


def plot_char_length(frame: pd.DataFrame, path: str | Path) -> Path:
    fig, ax1 = plt.subplots(figsize=(7, 3.5))
    ax1.bar(frame["length"], frame["count"], color="#aac6e8", label="questions")
    ax1.set_xlabel("question text length (characters)")
    ax1.set_ylabel("count")
    ax2 = ax1.twinx()
    ax2.plot(frame["length"], frame["mean_correct"], color="tab:orange", label="mean correctness")
    ax2.plot(frame["length"], frame["median_correct"], color="tab:green", label="median correctness")
    ax2.set_ylabel("correct rate")
    ax2.legend(loc="upper right")
    return _save(fig, path)


_REPORT_SECTIONS = (
    ("history.csv", "Training curves", plot_history, "history.png"),
    ("ablate_diff_cl_summary.csv", "Difficulty-reflected negatives vs flat fallback", plot_diff_cl, "diff_cl.png"),
    ("ablate_lambda_sweep.csv", "Contrastive weight sweep", plot_lambda_sweep, "lambda_sweep.png"),
    ("ablate_augment_sweep.csv", "Augmentation strategies", plot_augment_sweep, "augment_sweep.png"),
    (
        "ablate_difficulty_prediction.csv",
        "Text-based difficulty prediction vs constants",
        plot_difficulty_prediction,
        "difficulty_prediction.png",
    ),
    ("char_length.csv", "Text length vs correctness", plot_char_length, "char_length.png"),
)


def _markdown_table(frame: pd.DataFrame) -> str:
    headers = list(frame.columns)
    rows = [[str(v) for v in row] for row in frame.itertuples(index=False)]
    lines = ["| " + " | ".join(headers) + " |", "| " + " | ".join("---" for _ in headers) + " |"]
    lines += ["| " + " | ".join(row) + " |" for row in rows]
    return "\n".join(lines)


def write_report(out_dir: str | Path, name: str = "report.md") -> Path:
    """Render report.md plus figures from whatever CSVs exist in out_dir.

    Missing inputs are listed and skipped; an empty directory produces a
    stub report. Reruns overwrite deterministically.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    figures = out / "figures"
    lines = ["# Experiment report", ""]
    rendered = 0
    skipped: list[str] = []
    for csv_name, title, plotter, png_name in _REPORT_SECTIONS:
        csv_path = out / csv_name
        if not csv_path.exists():
            skipped.append(csv_name)
            continue
        frame = pd.read_csv(csv_path)
        if frame.empty:
            skipped.append(csv_name)
            continue
        png = plotter(frame, figures / png_name)
        lines += [f"## {title}", "", f"![{title}](figures/{png.name})", "",
                  f"Source: `{csv_name}`", ""]
        rendered += 1
    metrics_path = out / "metrics.csv"
    if metrics_path.exists():
        metrics = pd.read_csv(metrics_path)
        lines += ["## Test metrics", "", _markdown_table(metrics), ""]
        rendered += 1
    if rendered == 0:
        lines += ["No results found in this directory.", ""]
    if skipped:
        lines += ["### Skipped (missing inputs)", ""] + [f"- {name}" for name in skipped] + [""]
    path = out / name
    path.write_text("\n".join(lines), encoding="utf-8")
    return path
