"""Command-line harness: prepare | synth | train | evaluate | ablate |
predict-diff | report.

Every command is deterministic given (inputs, config, seed). Exit codes:
0 success, 2 input/config error, 3 missing prepare/train artifact,
4 training divergence. ``--config`` points at a flat key=value file and
``--set key=value`` overrides individual keys; the output directory defaults
to the DIFFKT_OUTPUT environment variable, then ./runs.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import pandas as pd

from . import reporting
from .augmentation import STRATEGY_ORDER, AugmentationConfig
from .config import Settings
from .data import (
    ColumnMap,
    DataSplit,
    Dataset,
    EmptyDatasetError,
    SchemaError,
    load_interactions,
    load_texts,
    split_dataset,
)
from .difficulty import compute_ctt, export_table_csv
from .experiments import (
    DEFAULT_LAMBDA_GRID,
    augment_sweep,
    diff_cl_comparison,
    difficulty_prediction_comparison,
    lambda_sweep,
    new_model,
    summarize_arms,
)
from .metrics import UndefinedMetricError
from .model import load_checkpoint, save_checkpoint
from .synth import generate_dataset, write_synth_csvs
from .textdiff import (
    char_length_analysis,
    compose_text_inputs,
    difficulty_text_pairs,
    evaluate_difficulty_prediction,
    fill_unseen,
    fit_text_model,
)
from .training import DivergenceError, evaluate_model, history_to_csv, train

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_MISSING_ARTIFACT = 3
EXIT_DIVERGED = 4

MANIFEST_NAME = "split_manifest.json"
MANIFEST_FORMAT = "diffkt-prepare/1"


class MissingArtifactError(FileNotFoundError):
    """A required prepare/train artifact is absent."""


def default_out() -> str:
    return os.environ.get("DIFFKT_OUTPUT", "runs")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override one config key")
    parser.add_argument("--out", default=None, help="output directory")


def _settings(args: argparse.Namespace) -> Settings:
    return Settings.load(args.config, args.overrides)


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out if args.out is not None else default_out())
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_input_dataset(args, settings: Settings) -> Dataset:
    data_cfg = settings.data_config()
    question_texts = load_texts(args.question_texts) if getattr(args, "question_texts", None) else None
    concept_texts = load_texts(args.concept_texts) if getattr(args, "concept_texts", None) else None
    return load_interactions(
        args.input,
        columns=data_cfg.column_map(),
        question_texts=question_texts,
        concept_texts=concept_texts,
    )


def cmd_synth(args) -> int:
    settings = _settings(args)
    out = _out_dir(args)
    cfg = settings.synth_config()
    paths = write_synth_csvs(cfg, out)
    print(f"synth: wrote {len(paths)} files to {out}")
    for name, path in paths.items():
        print(f"  {name}: {path}")
    return EXIT_OK


def cmd_prepare(args) -> int:
    settings = _settings(args)
    out = _out_dir(args)
    data_cfg = settings.data_config()
    dataset = _load_input_dataset(args, settings)
    split = split_dataset(dataset, data_cfg.ratio, data_cfg.seed)

    with open(out / "vocab_questions.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["id", "index"])
        writer.writerows(dataset.question_vocab.items())
    with open(out / "vocab_concepts.csv", "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["id", "index"])
        writer.writerows(dataset.concept_vocab.items())

    table = compute_ctt(split.train, data_cfg.laplace_alpha)
    export_table_csv(table, out / "difficulty.csv", dataset.question_vocab, dataset.concept_vocab)

    manifest = {
        "format": MANIFEST_FORMAT,
        "input": str(Path(args.input).resolve()),
        "question_texts": str(Path(args.question_texts).resolve()) if args.question_texts else None,
        "concept_texts": str(Path(args.concept_texts).resolve()) if args.concept_texts else None,
        "columns": {
            "user": data_cfg.user_col,
            "question": data_cfg.question_col,
            "concept": data_cfg.concept_col,
            "response": data_cfg.response_col,
            "timestamp": data_cfg.timestamp_col,
        },
        "ratio": list(data_cfg.ratio),
        "seed": data_cfg.seed,
        "max_len": data_cfg.max_len,
        "dropped_rows": dataset.dropped_rows,
        "students": {
            "train": split.train.student_ids,
            "valid": split.valid.student_ids,
            "test": split.test.student_ids,
        },
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")

    texts_note = "available" if args.question_texts else "unavailable (text-difficulty features off)"
    print(
        f"prepare: {len(dataset.students)} students, {dataset.n_interactions} interactions "
        f"({dataset.dropped_rows} rows dropped), {len(dataset.question_vocab)} questions, "
        f"{len(dataset.concept_vocab)} concepts"
    )
    print(
        f"prepare: split {len(split.train.students)}/{len(split.valid.students)}/"
        f"{len(split.test.students)} students (train/valid/test), texts {texts_note}"
    )
    print(f"prepare: artifacts in {out}: vocab_questions.csv vocab_concepts.csv difficulty.csv {MANIFEST_NAME}")
    return EXIT_OK


def _split_from_manifest(data_dir: Path, settings: Settings) -> tuple[DataSplit, dict]:
    manifest_path = data_dir / MANIFEST_NAME
    if not manifest_path.exists():
        raise MissingArtifactError(f"no {MANIFEST_NAME} in {data_dir}; run `diffkt prepare` first")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != MANIFEST_FORMAT:
        raise SchemaError(["format"], list(manifest))
    columns = ColumnMap(
        user=manifest["columns"]["user"],
        question=manifest["columns"]["question"],
        concept=manifest["columns"]["concept"],
        response=manifest["columns"]["response"],
        timestamp=manifest["columns"]["timestamp"],
    )
    question_texts = load_texts(manifest["question_texts"]) if manifest.get("question_texts") else None
    concept_texts = load_texts(manifest["concept_texts"]) if manifest.get("concept_texts") else None
    dataset = load_interactions(
        manifest["input"], columns=columns, question_texts=question_texts, concept_texts=concept_texts
    )
    students = manifest["students"]
    split = DataSplit(
        train=dataset.subset(students["train"]),
        valid=dataset.subset(students["valid"]),
        test=dataset.subset(students["test"]),
        ratio=tuple(manifest["ratio"]),
    )
    return split, manifest


def _table_for(split: DataSplit, settings: Settings):
    data_cfg = settings.data_config()
    table = compute_ctt(split.train, data_cfg.laplace_alpha)
    return table.with_fallbacks(data_cfg.fallback_positive, data_cfg.fallback_negative)


def cmd_train(args) -> int:
    settings = _settings(args)
    out = _out_dir(args)
    data_dir = Path(args.data) if args.data else out
    split, manifest = _split_from_manifest(data_dir, settings)
    model_cfg = replace(settings.model_config(), max_len=int(manifest["max_len"]))
    if args.untied_encoders:
        model_cfg = replace(model_cfg, untied_encoders=True)
    if args.separate_negative_tables:
        model_cfg = replace(model_cfg, separate_negative_tables=True)
    tcfg = settings.training_config()
    acfg = settings.augmentation_config()
    table = _table_for(split, settings)

    model = new_model(split, model_cfg, tcfg.seed)
    result = train(
        model,
        split,
        tcfg,
        acfg,
        table=table,
        dump_augmented=(out / "augmented_dump.csv") if args.dump_augmented else None,
    )
    history_to_csv(result.history, out / "history.csv")
    save_checkpoint(
        model,
        out / "checkpoint.pt",
        extra={"best_epoch": result.best_epoch, "seed": tcfg.seed},
    )
    best = f"{result.best_valid_auc:.4f}" if result.best_valid_auc is not None else "n/a"
    print(
        f"train: {len(result.history)} epochs, best epoch {result.best_epoch}, "
        f"best valid AUC {best}"
    )
    print(f"train: wrote {out / 'history.csv'} and {out / 'checkpoint.pt'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    settings = _settings(args)
    out = _out_dir(args)
    data_dir = Path(args.data) if args.data else out
    split, _ = _split_from_manifest(data_dir, settings)
    checkpoint = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.pt"
    if not checkpoint.exists():
        raise MissingArtifactError(f"no checkpoint at {checkpoint}; run `diffkt train` first")
    model, _ = load_checkpoint(checkpoint)
    table = _table_for(split, settings)
    auc, rmse = evaluate_model(model, split.test, table, settings.training_config().batch_size)
    pd.DataFrame([{"auc": auc, "rmse": rmse}]).to_csv(out / "metrics.csv", index=False)
    print(f"evaluate: test AUC {auc:.4f}, RMSE {rmse:.4f}")
    print(f"evaluate: wrote {out / 'metrics.csv'}")
    return EXIT_OK


def _ablation_dataset(args, settings: Settings) -> Dataset:
    if args.synth:
        dataset, _ = generate_dataset(settings.synth_config())
        return dataset
    if not args.input:
        raise SchemaError(["--input or --synth"], [])
    return _load_input_dataset(args, settings)


def cmd_ablate(args) -> int:
    settings = _settings(args)
    out = _out_dir(args)
    dataset = _ablation_dataset(args, settings)
    data_cfg = settings.data_config()
    model_cfg = settings.model_config()
    tcfg = settings.training_config()
    seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]

    if args.which == "diff-cl":
        # masking routes unseen-item fallbacks through both embedding views
        # during training; without it the two arms barely differ
        acfg = settings.augmentation_config()
        if all(acfg.prob(name) == 0 for name in STRATEGY_ORDER):
            acfg = AugmentationConfig(mask_prob=0.2)
        frame = diff_cl_comparison(dataset, seeds, model_cfg, tcfg, acfg=acfg, ratio=data_cfg.ratio)
        summary = summarize_arms(frame)
        frame.to_csv(out / "ablate_diff_cl.csv", index=False)
        summary.to_csv(out / "ablate_diff_cl_summary.csv", index=False)
        reporting.plot_diff_cl(summary, out / "figures" / "diff_cl.png")
        print(summary.to_string(index=False))
    elif args.which == "lambda-sweep":
        grid = [float(x) for x in args.grid.split(",")] if args.grid else list(DEFAULT_LAMBDA_GRID)
        frame = lambda_sweep(dataset, model_cfg, tcfg, grid=grid, ratio=data_cfg.ratio, seed=data_cfg.seed)
        frame.to_csv(out / "ablate_lambda_sweep.csv", index=False)
        reporting.plot_lambda_sweep(frame, out / "figures" / "lambda_sweep.png")
        print(frame.to_string(index=False))
    elif args.which == "augment-sweep":
        frame = augment_sweep(dataset, model_cfg, tcfg, ratio=data_cfg.ratio, seed=data_cfg.seed)
        frame.to_csv(out / "ablate_augment_sweep.csv", index=False)
        reporting.plot_augment_sweep(frame, out / "figures" / "augment_sweep.png")
        print(frame.to_string(index=False))
    elif args.which == "difficulty-prediction":
        frame = difficulty_prediction_comparison(
            dataset, settings.text_config(), ratio=data_cfg.ratio, seed=data_cfg.seed
        )
        frame.to_csv(out / "ablate_difficulty_prediction.csv", index=False)
        if not frame.empty:
            reporting.plot_difficulty_prediction(frame, out / "figures" / "difficulty_prediction.png")
        print(frame.to_string(index=False))
    else:  # argparse choices guard this
        raise SchemaError([args.which], [])
    print(f"ablate: wrote results to {out}")
    return EXIT_OK


def cmd_predict_diff(args) -> int:
    settings = _settings(args)
    out = _out_dir(args)
    data_dir = Path(args.data) if args.data else out
    split, manifest = _split_from_manifest(data_dir, settings)
    if not manifest.get("question_texts"):
        raise MissingArtifactError("prepare ran without text side files; predict-diff needs them")
    text_cfg = settings.text_config()
    table = _table_for(split, settings)

    filled = table
    eval_rows = []
    predicted_rows = []
    for kind in ("question", "concept"):
        pairs = difficulty_text_pairs(split.train, table, kind, joint=text_cfg.joint_question_input)
        if not pairs:
            continue
        model = fit_text_model(pairs, text_cfg)
        texts = compose_text_inputs(split.train, kind, joint=text_cfg.joint_question_input)
        before = dict(filled.question_diff if kind == "question" else filled.concept_diff)
        filled = fill_unseen(filled, model, texts, split, kind=kind)
        after = filled.question_diff if kind == "question" else filled.concept_diff
        vocab = split.train.question_vocab if kind == "question" else split.train.concept_vocab
        for idx, value in sorted(after.items()):
            if idx in before:
                continue
            predicted_rows.append(
                {"item_id": vocab.id_of(idx), "kind": kind, "predicted_difficulty": value, "source": "text_model"}
            )
        print(f"predict-diff: {kind} model train RMSE {model.train_rmse:.3f} (0-100 scale)")
        if model.holdout_pairs:
            for predictor, rmse in evaluate_difficulty_prediction(model, model.holdout_pairs).items():
                eval_rows.append({"kind": kind, "predictor": predictor, "rmse": rmse})

    pd.DataFrame(predicted_rows, columns=["item_id", "kind", "predicted_difficulty", "source"]).to_csv(
        out / "predicted_difficulty.csv", index=False
    )
    pd.DataFrame(eval_rows, columns=["kind", "predictor", "rmse"]).to_csv(
        out / "difficulty_prediction_eval.csv", index=False
    )
    print(f"predict-diff: {len(predicted_rows)} unseen items filled; wrote predicted_difficulty.csv")
    return EXIT_OK


def cmd_report(args) -> int:
    settings = _settings(args)
    out = _out_dir(args)
    data_dir = Path(args.data) if args.data else out
    manifest_path = data_dir / MANIFEST_NAME
    if manifest_path.exists():
        split, _ = _split_from_manifest(data_dir, settings)
        if split.train.question_texts:
            table = _table_for(split, settings)
            frame = char_length_analysis(split.train, table, cap=settings.text_config().max_text_len)
            frame.to_csv(out / "char_length.csv", index=False)
    path = reporting.write_report(out)
    print(f"report: wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffkt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset with known ground truth")
    _add_common(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("prepare", help="build vocabularies, difficulty table, and split manifest")
    _add_common(p)
    p.add_argument("--input", required=True, help="interaction CSV/TSV")
    p.add_argument("--question-texts", help="optional (id,text) side file")
    p.add_argument("--concept-texts", help="optional (id,text) side file")
    p.set_defaults(fn=cmd_prepare)

    p = sub.add_parser("train", help="train on prepared artifacts")
    _add_common(p)
    p.add_argument("--data", help="directory with prepare artifacts (default: --out)")
    p.add_argument("--dump-augmented", action="store_true",
                   help="write the first batch before/after augmentation as CSV")
    p.add_argument("--untied-encoders", action="store_true",
                   help="give each of the four encoder invocations its own weights")
    p.add_argument("--separate-negative-tables", action="store_true",
                   help="dedicated negative difficulty/response tables instead of index reflection")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on the test split")
    _add_common(p)
    p.add_argument("--data", help="directory with prepare artifacts (default: --out)")
    p.add_argument("--checkpoint", help="checkpoint path (default: <out>/checkpoint.pt)")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ablate", help="run an ablation grid")
    _add_common(p)
    p.add_argument("--which", required=True,
                   choices=["diff-cl", "lambda-sweep", "augment-sweep", "difficulty-prediction"])
    p.add_argument("--input", help="interaction CSV/TSV")
    p.add_argument("--question-texts", help="optional (id,text) side file")
    p.add_argument("--concept-texts", help="optional (id,text) side file")
    p.add_argument("--synth", action="store_true", help="generate data instead of reading --input")
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seed list")
    p.add_argument("--grid", help="comma-separated lambda grid (lambda-sweep only)")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("predict-diff", help="fit text models and fill unseen difficulties")
    _add_common(p)
    p.add_argument("--data", help="directory with prepare artifacts (default: --out)")
    p.set_defaults(fn=cmd_predict_diff)

    p = sub.add_parser("report", help="render report.md and figures from emitted CSVs")
    _add_common(p)
    p.add_argument("--data", help="directory with prepare artifacts (for the text-length figure)")
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except MissingArtifactError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_MISSING_ARTIFACT
    except SchemaError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except (EmptyDatasetError, UndefinedMetricError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except DivergenceError as err:
        print(f"error: {err} ({len(err.history)} epochs completed)", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
