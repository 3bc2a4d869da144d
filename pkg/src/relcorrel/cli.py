"""Command-line entry point: ``relcorrel <subcommand> [options]``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import heatmap, relstats
from .corpus import CorpusError, RelationSchema, load_dataset
from .evaluator import evaluate, gold_triplets
from .trainer import TrainedModel, TrainingConfig, TrainingDivergence, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

logger = logging.getLogger("relcorrel")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _read_json(path: str | Path) -> Any:
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None


def _write_json(obj: Any, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=1, ensure_ascii=False)
        f.write("\n")


def _require_file(path: str | None, flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{p}: no such file")
    return p


def _schema(path: str | None) -> RelationSchema:
    return RelationSchema.load(_require_file(path, "--schema"))


def _out_dir(path: str | None) -> Path:
    if path is None:
        raise UsageError("--out is required")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_stats(args: argparse.Namespace) -> int:
    schema = _schema(args.schema)
    docs = load_dataset(_require_file(args.dataset, "--dataset"), schema)
    out = _out_dir(args.out)
    names = list(schema.ids)
    counts = relstats.count_cooccurrence(docs, len(schema))
    relstats.write_matrix_csv(counts.joint, names, out / "cooccurrence.csv")
    matrix = relstats.ppmi(counts)
    relstats.write_matrix_csv(matrix.values, names, out / "ppmi.csv")
    relstats.write_matrix_json(matrix.values, names, out / "ppmi.json")
    freq = relstats.relation_frequency(docs, len(schema))
    relstats.write_frequency_csv(freq, names, out / "relation_frequency.csv")
    relstats.write_histogram_csv(relstats.multilabel_histogram(docs), out / "multilabel_histogram.csv")
    print(f"stats for {len(docs)} documents written to {out}")
    return EXIT_OK


def _resolve(base: Path, value: str | None) -> str | None:
    if value is None:
        return None
    p = Path(value)
    return str(p if p.is_absolute() else base / p)


def load_run_config(args: argparse.Namespace) -> dict[str, Any]:
    """Merge the JSON config file (paths relative to it) with command-line overrides."""
    run: dict[str, Any] = {"train": None, "dev": None, "schema": None, "out": None, "training": {}}
    if args.config is not None:
        path = _require_file(args.config, "--config")
        data = _read_json(path)
        if not isinstance(data, dict):
            raise UsageError(f"{path}: config must be a JSON object")
        unknown = set(data) - set(run)
        if unknown:
            raise UsageError(f"{path}: unknown config keys {sorted(unknown)}")
        for key in ("train", "dev", "schema", "out"):
            run[key] = _resolve(path.parent, data.get(key))
        run["training"] = dict(data.get("training", {}))
    overrides = {
        "train": args.dataset,
        "dev": args.dev,
        "schema": args.schema,
        "out": args.out,
    }
    run.update({k: v for k, v in overrides.items() if v is not None})
    t = run["training"]
    for flag, key in (("seed", "seed"), ("alpha", "alpha"), ("beta", "beta"), ("epochs", "epochs")):
        value = getattr(args, flag)
        if value is not None:
            t[key] = value
    if args.no_correlation:
        t.update(use_correlation=False, use_crcp=False, use_frcp=False)
    if args.no_crcp:
        t["use_crcp"] = False
    if args.no_frcp:
        t["use_frcp"] = False
    return run


def cmd_train(args: argparse.Namespace) -> int:
    run = load_run_config(args)
    try:
        config = TrainingConfig.from_dict(run["training"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from None
    schema = _schema(run["schema"])
    train_docs = load_dataset(_require_file(run["train"], "--dataset (train split)"), schema)
    dev_docs = load_dataset(_require_file(run["dev"], "--dev"), schema)
    out = _out_dir(run["out"])

    log_path = out / "train_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as log:

        def on_epoch(record: dict[str, Any]) -> None:
            log.write(json.dumps(record) + "\n")
            log.flush()

        sink: list | None = [] if args.dump_examples else None
        trained = train(train_docs, dev_docs, schema, config, on_epoch=on_epoch, example_sink=sink)
    trained.save(out / "model.pt")
    _write_json({"training": config.to_dict(), "threshold": trained.threshold}, out / "run.json")
    if sink is not None:
        _write_json(sink, out / "cooccur_examples.json")
    best = max((h["dev_F1"] for h in trained.history), default=None)
    print(f"checkpoint {out / 'model.pt'}; threshold {trained.threshold}; best dev F1 {best}")
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    trained = TrainedModel.load(_require_file(args.checkpoint, "--checkpoint"))
    schema = RelationSchema.load(args.schema) if args.schema else trained.schema
    if schema.ids != trained.schema.ids:
        raise DataError("dataset schema does not match the checkpoint schema")
    docs = load_dataset(_require_file(args.dataset, "--dataset"), schema)
    if args.threshold is not None and not 0.0 < args.threshold < 1.0:
        raise UsageError("--threshold must lie in (0, 1)")
    rows = trained.predict(docs, args.threshold)
    if args.out is None:
        raise UsageError("--out is required")
    _write_json(rows, Path(args.out))
    print(f"{len(rows)} predictions written to {args.out}")
    return EXIT_OK


def _read_predictions(path: Path, schema: RelationSchema) -> set[tuple]:
    rows = _read_json(path)
    if not isinstance(rows, list):
        raise DataError(f"{path}: expected a JSON array of predictions")
    pred = set()
    for i, row in enumerate(rows):
        try:
            pred.add((row["title"], int(row["h_idx"]), int(row["t_idx"]), schema.index(row["r"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: prediction {i} is malformed ({exc})") from None
    return pred


def cmd_evaluate(args: argparse.Namespace) -> int:
    schema = _schema(args.schema)
    gold_docs = load_dataset(_require_file(args.dataset, "--dataset"), schema)
    pred = _read_predictions(_require_file(args.pred, "--pred"), schema)
    train_docs = load_dataset(_require_file(args.train, "--train"), schema) if args.train else None
    freq = relstats.relation_frequency(train_docs, len(schema)) if train_docs is not None else None
    report = evaluate(
        pred,
        gold_triplets(gold_docs),
        train_docs=train_docs,
        gold_docs=gold_docs,
        train_freq=freq,
        k_list=args.k_list,
    )
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_export_correl(args: argparse.Namespace) -> int:
    trained = TrainedModel.load(_require_file(args.checkpoint, "--checkpoint"))
    if trained.relation_embeddings is None:
        raise DataError(f"{args.checkpoint}: checkpoint carries no relation embeddings")
    out = _out_dir(args.out)
    names = list(trained.schema.ids)
    matrix = relstats.learned_similarity(trained.relation_embeddings)
    relstats.write_matrix_csv(matrix.values, names, out / "learned_correlation.csv")
    relstats.write_matrix_json(matrix.values, names, out / "learned_correlation.json")
    print(f"learned correlation matrix written to {out}")
    return EXIT_OK


def _read_matrix(path: Path) -> tuple[list[str], np.ndarray]:
    try:
        if path.suffix.lower() == ".json":
            return relstats.read_matrix_json(path)
        return relstats.read_matrix_csv(path)
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: unreadable matrix ({exc})") from None


def cmd_plot_heatmap(args: argparse.Namespace) -> int:
    matrix_path = _require_file(args.matrix, "--matrix")
    if args.out is None:
        raise UsageError("--out is required")
    out = Path(args.out)
    if out.suffix.lower() not in (".svg", ".png"):
        raise UsageError("--out must end in .svg or .png")
    names, values = _read_matrix(matrix_path)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise DataError(f"{matrix_path}: matrix is {values.shape[0]}x{values.shape[1]}, expected square")
    if args.dataset is not None:
        schema = _schema(args.schema)
        if list(schema.ids) != names:
            raise DataError("matrix relations do not match the schema")
        freq = relstats.relation_frequency(load_dataset(_require_file(args.dataset, "--dataset"), schema), len(schema))
        values, names = heatmap.reorder(values, names, relstats.frequency_order(freq))
    top_n = args.top_n if args.top_n is not None else len(names)
    masked = heatmap.mask_matrix(values, top_n=top_n, truncate=args.truncate)
    heatmap.render_heatmap(masked, names, out, title=args.title or "")
    relstats.write_matrix_csv(masked, names, out.with_suffix(".csv"))
    print(f"heatmap written to {out}")
    return EXIT_OK


def cmd_make_toy(args: argparse.Namespace) -> int:
    from .synthetic import toy_schema, toy_splits

    out = _out_dir(args.out)
    seed = 0 if args.seed is None else args.seed
    train_records, dev_records = toy_splits(seed)
    _write_json(train_records, out / "train.json")
    _write_json(dev_records, out / "dev.json")
    _write_json(toy_schema(), out / "rel_info.json")
    _write_json(
        {
            "train": "train.json",
            "dev": "dev.json",
            "schema": "rel_info.json",
            "out": "run",
            "training": TOY_TRAINING | {"seed": seed},
        },
        out / "config.json",
    )
    print(f"toy corpus written to {out}")
    return EXIT_OK


TOY_TRAINING: dict[str, Any] = {
    "epochs": 200,
    "lr_encoder": 1e-3,
    "lr_other": 1e-3,
    "beta": 0.1,
}


# ---------------------------------------------------------------------------
# parser


def _k_list(text: str) -> list[int]:
    try:
        ks = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not ks or any(k <= 0 for k in ks):
        raise argparse.ArgumentTypeError("K values must be positive")
    return ks


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relcorrel", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="co-occurrence, PPMI, frequency and multi-label statistics")
    p.add_argument("--dataset", required=True, help="DocRED-format JSON file")
    p.add_argument("--schema", required=True, help="JSON object mapping relation id to name")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train a model and select the decision threshold on dev")
    p.add_argument("--config", help="JSON run config (train/dev/schema/out paths plus a 'training' object)")
    p.add_argument("--dataset", help="training split (overrides config)")
    p.add_argument("--dev", help="development split (overrides config)")
    p.add_argument("--schema", help="relation schema (overrides config)")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--alpha", type=float, help="coarse/fine subtask mix")
    p.add_argument("--beta", type=float, help="weight of the subtask loss in the combined objective")
    p.add_argument("--no-correlation", action="store_true", help="base model: no relation features, no subtasks")
    p.add_argument("--no-crcp", action="store_true", help="disable the coarse co-occurrence subtask")
    p.add_argument("--no-frcp", action="store_true", help="disable the fine co-occurrence subtask")
    p.add_argument("--dump-examples", action="store_true", help="write first-epoch co-occurrence examples")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write DocRED-style predictions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--schema", help="defaults to the checkpoint schema")
    p.add_argument("--threshold", type=float, help="override the stored threshold")
    p.add_argument("--out", required=True, help="prediction JSON file")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against gold")
    p.add_argument("--pred", required=True, help="prediction JSON file")
    p.add_argument("--dataset", required=True, help="gold split")
    p.add_argument("--train", help="training split, enables Ign F1 and Macro@K")
    p.add_argument("--schema", required=True)
    p.add_argument("--k-list", type=_k_list, default=[500, 200, 100], help="comma-separated K values")
    p.add_argument("--out", help="report JSON file")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-correl", help="export the learned relation similarity matrix")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_export_correl)

    p = sub.add_parser("plot-heatmap", help="render a masked correlation heatmap")
    p.add_argument("--matrix", required=True, help="matrix CSV or JSON")
    p.add_argument("--out", required=True, help="image path (.svg or .png); the masked matrix goes next to it as CSV")
    p.add_argument("--top-n", type=int, help="cells kept per row (default: all)")
    p.add_argument("--truncate", type=float, help="clip values above this")
    p.add_argument("--dataset", help="training split; rows are ordered by its relation frequency")
    p.add_argument("--schema", help="required with --dataset")
    p.add_argument("--title")
    p.set_defaults(func=cmd_plot_heatmap)

    p = sub.add_parser("make-toy", help="write the synthetic toy corpus and a training config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_make_toy)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"relcorrel {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CorpusError, ValueError) as exc:
        print(f"relcorrel {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergence, FloatingPointError) as exc:
        print(f"relcorrel {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"relcorrel {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
