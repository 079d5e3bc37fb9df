"""Command-line entry point: ``tripledml <subcommand> [flags]``.

Exit codes: 0 success, 1 failed gradient check, 2 configuration error,
3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shlex
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .autograd import Tensor
from .data import FORMATS, load_dataset, stratified_kfold, subsample
from .encoder import Vocabulary, load_checkpoint, save_checkpoint
from .errors import ConfigError, ContractError, DataError, NumericError
from .fixtures import FIXTURE_SEED, write_fixtures
from .gradcheck import TOLERANCE, check_all
from .reporting import (
    RunRecord,
    RunReport,
    compare,
    comparison_markdown,
    emit,
    load_records_jsonl,
    load_report,
    write_gain_vs_size,
)
from .training import (
    DESK_LR,
    GRID_PRESETS,
    LOSSES,
    PROTOCOL_SEEDS,
    ExperimentPlan,
    HyperGrid,
    LossConfig,
    TrainSettings,
    evaluate_accuracy,
    run_grid,
    train_one,
)

log = logging.getLogger("tripledml")

EXIT_GRADCHECK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3, 4
OUT_ENV = "TRIPLEDML_OUT"
LOSS_FLAGS = ("k", "gamma", "lambda", "delta", "beta", "margin", "alpha")


# -- argument parsing -------------------------------------------------------------


def _number_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}")


def _add_output(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", default="tripledml-out",
                   help=f"output directory (default: %(default)s; the {OUT_ENV} environment variable overrides it)")


def _add_dataset(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--dataset", required=required, help="path to a csv, tsv or jsonl file")
    p.add_argument("--format", choices=FORMATS, help="file format (default: from the file extension)")
    p.add_argument("--name", help="dataset name used in reports (default: file stem)")
    p.add_argument("--subsample", type=int, metavar="N", help="stratified sample of N records before training")
    p.add_argument("--sample-seed", type=int, default=0, help="seed for --subsample (default: %(default)s)")


def _add_loss(p: argparse.ArgumentParser, lists: bool) -> None:
    kind = _number_list if lists else float
    suffix = " (comma-separated list allowed)" if lists else ""
    p.add_argument("--loss", choices=LOSSES, help="training objective")
    p.add_argument("--k", type=kind, help="proxies per class, softtriple/tripleentropy" + suffix)
    p.add_argument("--gamma", type=kind, help="entropy temperature, softtriple/tripleentropy" + suffix)
    p.add_argument("--lambda", dest="lam", metavar="LAMBDA", type=kind, help="logit scale, softtriple/tripleentropy" + suffix)
    p.add_argument("--delta", type=kind, help="class margin, softtriple/tripleentropy" + suffix)
    p.add_argument("--beta", type=kind, help="cross-entropy weight, tripleentropy only" + suffix)
    p.add_argument("--margin", type=kind, help="distance margin, contrastive only" + suffix)
    p.add_argument("--alpha", type=kind, help="triplet margin, triplet only" + suffix)


def _add_training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--folds", type=int, default=5, help="cross-validation folds (default: %(default)s)")
    p.add_argument("--epochs", type=int, default=10, help="maximum epochs per run (default: %(default)s)")
    p.add_argument("--batch-size", type=int, default=64, help="training batch size (default: %(default)s)")
    p.add_argument("--dim", type=int, default=64, help="embedding width (default: %(default)s)")
    p.add_argument("--lr", type=float, default=DESK_LR, help="peak learning rate (default: %(default)s)")
    p.add_argument("--weight-decay", type=float, default=0.01, help="decoupled weight decay (default: %(default)s)")
    p.add_argument("--patience", type=int, default=3,
                   help="stop after this many epochs without validation improvement (default: %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE",
                        help="key=value file of flag defaults; flags on the command line win")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="tripledml", description="Train and compare text classifiers with metric-learning losses.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    p = sub.add_parser("train", parents=[common], help="train one run and write a checkpoint")
    _add_dataset(p)
    _add_loss(p, lists=False)
    _add_training(p)
    p.add_argument("--seed", type=int, default=PROTOCOL_SEEDS[0], help="run seed (default: %(default)s)")
    p.add_argument("--fold", type=int, default=0, help="which fold to hold out for validation (default: %(default)s)")
    _add_output(p)

    p = sub.add_parser("evaluate", parents=[common], help="accuracy of a checkpoint on a labelled file")
    _add_dataset(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint written by 'train'")
    _add_output(p)

    p = sub.add_parser("gridsearch", parents=[common], help="seeds x folds x configs, with resume")
    _add_dataset(p)
    _add_loss(p, lists=True)
    _add_training(p)
    p.add_argument("--seeds", type=_int_list, default=list(PROTOCOL_SEEDS),
                   help="comma-separated run seeds (default: 2,16,128,2048)")
    p.add_argument("--grid-preset", choices=sorted(GRID_PRESETS), default="desk-small",
                   help="tripleentropy grid; --k/--gamma/--lambda/--delta/--beta lists replace single axes")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes (default: %(default)s)")
    p.add_argument("--resume", action="store_true", help="skip runs already recorded in the output directory")
    _add_output(p)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every loss")
    p.add_argument("--instances", type=int, default=50, help="random instances per loss (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="instance seed (default: %(default)s)")
    p.add_argument("--step", type=float, default=1e-5, help="central difference step (default: %(default)s)")

    p = sub.add_parser("report", parents=[common], help="re-emit run reports or compare two of them")
    p.add_argument("--runs", nargs="+", metavar="FILE", help="report json/csv files or run .jsonl streams to merge")
    p.add_argument("--baseline", metavar="FILE", help="baseline report for a comparison")
    p.add_argument("--candidate", metavar="FILE", help="candidate report for a comparison")
    p.add_argument("--report-format", choices=("json", "csv", "markdown"), default="markdown",
                   help="format for --runs output (default: %(default)s)")
    p.add_argument("--chart", action="store_true", help="also draw gain_vs_size.png (needs matplotlib)")
    _add_output(p)

    p = sub.add_parser("fixtures", parents=[common], help="write the synthetic fixture corpora")
    p.add_argument("--seed", type=int, default=FIXTURE_SEED, help="generation seed (default: %(default)s)")
    p.add_argument("--format", choices=FORMATS, default="csv", help="file format (default: %(default)s)")
    _add_output(p)
    return parser


def _config_tokens(path: str) -> list[str]:
    """Turn ``key = value`` lines into ``--key value`` tokens; ``#`` starts a comment."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    tokens = []
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        flag = "--" + key.replace("_", "-")
        if key == "config":
            raise ConfigError(f"{path}:{lineno}: config files cannot include other config files")
        if value.lower() in ("true", "yes", "on"):
            tokens.append(flag)
        elif value.lower() in ("false", "no", "off"):
            continue
        else:
            tokens.extend([flag] + shlex.split(value))
    return tokens


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config is not None:
        where = next((i for i, tok in enumerate(argv) if tok in COMMANDS), None)
        if where is not None:
            # file values go first so anything given on the command line overrides them
            argv = argv[: where + 1] + _config_tokens(known.config) + argv[where + 1:]
    args = parser.parse_args(argv)
    if hasattr(args, "out") and os.environ.get(OUT_ENV):
        args.out = os.environ[OUT_ENV]
    return args


# -- helpers ----------------------------------------------------------------------------


def _load(args):
    ds = load_dataset(args.dataset, args.format)
    if args.subsample is not None:
        ds = subsample(ds, args.subsample, args.sample_seed)
    return ds, args.name or Path(args.dataset).stem


def _settings(args) -> TrainSettings:
    return TrainSettings(dim=args.dim, epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                         weight_decay=args.weight_decay, patience=args.patience)


def _loss_values(args) -> dict:
    return {f: getattr(args, "lam" if f == "lambda" else f) for f in LOSS_FLAGS
            if getattr(args, "lam" if f == "lambda" else f) is not None}


def _single_config(args) -> LossConfig:
    values = _loss_values(args)
    loss = args.loss or "ce"
    return LossConfig(loss, **{("lam" if k == "lambda" else k): v for k, v in values.items()})


def _grid_configs(args) -> tuple[LossConfig, ...]:
    values = _loss_values(args)
    loss = args.loss or "tripleentropy"
    if loss == "tripleentropy":
        preset = GRID_PRESETS[args.grid_preset]
        axes = {name: tuple(values.get("lambda" if name == "lam" else name, getattr(preset, name)))
                for name in ("k", "gamma", "lam", "delta", "beta")}
        for foreign in ("margin", "alpha"):
            if foreign in values:
                raise ConfigError(f"--{foreign} does not apply to loss 'tripleentropy'")
        return tuple(HyperGrid(**axes).configs())
    # other losses: the cartesian product of whatever lists were given
    names = list(values)
    combos = [{}]
    for name in names:
        combos = [{**c, ("lam" if name == "lambda" else name): v} for c in combos for v in values[name]]
    return tuple(LossConfig(loss, **c) for c in combos)


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _print_table(rows: list[list[str]]) -> None:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    for r in rows:
        print("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())


# -- subcommands --------------------------------------------------------------------------


def cmd_train(args) -> int:
    ds, name = _load(args)
    config = _single_config(args)
    settings = _settings(args)
    if not 0 <= args.fold < args.folds:
        raise ConfigError(f"--fold {args.fold} outside [0, {args.folds})")
    train_idx, val_idx = stratified_kfold(ds, args.folds, args.seed)[args.fold]
    start = time.perf_counter()
    result = train_one(config, args.seed, train_idx, val_idx, ds, settings=settings)
    elapsed = time.perf_counter() - start
    out = _out_dir(args)
    extra = dict(result.loss_params)
    if result.centroids is not None:
        extra["centroids"] = Tensor(result.centroids)
    meta = {"config": config.as_dict(), "class_names": list(ds.class_names), "vocab": list(result.vocab.tokens),
            "settings": asdict(settings), "seed": args.seed, "fold": args.fold, "fold_count": args.folds,
            "dataset": name}
    save_checkpoint(out / "checkpoint.npz", result.model, extra, meta)
    record = RunRecord(name, config.as_dict(), args.seed, args.fold, result.val_accuracy, result.epochs_trained)
    run = record.as_dict()
    # timing lives outside the record so repeated runs write identical records
    run.pop("wall_time")
    run["val_history"] = result.val_history
    (out / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log.info("trained in %.1fs", elapsed)
    print(f"{config.label()}  seed={args.seed} fold={args.fold}  val_accuracy={result.val_accuracy:.4f}  "
          f"epochs={result.epochs_trained}")
    return 0


def cmd_evaluate(args) -> int:
    from .training import Predictor

    model, extra, meta = load_checkpoint(args.checkpoint)
    try:
        config = LossConfig.from_dict(meta["config"])
        vocab = Vocabulary(tuple(meta["vocab"]))
        class_names = meta["class_names"]
    except (KeyError, TypeError) as exc:
        raise DataError(f"checkpoint {args.checkpoint} lacks training metadata: {exc}") from exc
    ds = load_dataset(args.dataset, args.format, label_names=class_names)
    if args.subsample is not None:
        ds = subsample(ds, args.subsample, args.sample_seed)
    centroids = extra.pop("centroids", None)
    predictor = Predictor(config, model, extra, None if centroids is None else centroids.data)
    acc = evaluate_accuracy(predictor, ds, vocab)
    out = _out_dir(args)
    doc = {"checkpoint": str(args.checkpoint), "dataset": args.name or Path(args.dataset).stem,
           "n": len(ds), "accuracy": acc, "config": config.as_dict()}
    (out / "eval.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"accuracy={acc:.4f} on {len(ds)} records")
    return 0


def cmd_gridsearch(args) -> int:
    ds, name = _load(args)
    if args.jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    plan = ExperimentPlan(configs=_grid_configs(args), seeds=tuple(args.seeds), fold_count=args.folds,
                          settings=_settings(args))
    out = _out_dir(args)
    log.info("%d configs x %d seeds x %d folds", len(plan.configs), len(plan.seeds), plan.fold_count)
    report = run_grid(plan, ds, jobs=args.jobs, results_path=out / "runs.jsonl", resume=args.resume,
                      dataset_name=name)
    for fmt, suffix in (("json", "json"), ("csv", "csv"), ("markdown", "md")):
        emit(report, out / f"report.{suffix}", fmt)
    best = report.best(name)
    print(f"best on {name}: {LossConfig.from_dict(best.config).label()}  "
          f"mean={100 * best.mean:.2f}%  std={100 * best.std:.2f}  n={best.n}")
    return 0


def cmd_gradcheck(args) -> int:
    results = check_all(args.instances, args.seed, args.step)
    rows = [["loss", "instances", "max_rel_error", "seconds", "status"]]
    for r in results:
        rows.append([r.loss, str(r.instances), f"{r.max_error:.3e}", f"{r.seconds:.2f}",
                     "pass" if r.passed else "FAIL"])
    _print_table(rows)
    failed = [r.loss for r in results if not r.passed]
    if failed:
        print(f"gradient check failed (tolerance {TOLERANCE:g}): {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return 0


def _read_any_report(path: str) -> RunReport:
    if path.endswith(".jsonl"):
        return RunReport(load_records_jsonl(path))
    return load_report(path)


def cmd_report(args) -> int:
    if args.runs and (args.baseline or args.candidate):
        raise ConfigError("use either --runs or --baseline/--candidate, not both")
    out = _out_dir(args)
    if args.runs:
        report = _read_any_report(args.runs[0])
        for path in args.runs[1:]:
            report = report.merge(_read_any_report(path))
        suffix = {"json": "json", "csv": "csv", "markdown": "md"}[args.report_format]
        path = emit(report, out / f"report.{suffix}", args.report_format)
        print(path.read_text(encoding="utf-8"), end="")
        return 0
    if not (args.baseline and args.candidate):
        raise ConfigError("report needs --runs, or both --baseline and --candidate")
    table = compare(load_report(args.baseline), load_report(args.candidate))
    text = comparison_markdown(table)
    (out / "comparison.md").write_text(text, encoding="utf-8")
    write_gain_vs_size(table, out / "gain_vs_size.csv", out / "gain_vs_size.png" if args.chart else None)
    print(text, end="")
    return 0


def cmd_fixtures(args) -> int:
    out = _out_dir(args)
    for path in write_fixtures(out, seed=args.seed, format=args.format):
        print(path)
    return 0


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "gridsearch": cmd_gridsearch,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
    "fixtures": cmd_fixtures,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except ConfigError as exc:
        print(f"tripledml: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ContractError) as exc:
        print(f"tripledml: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"tripledml: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"tripledml: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
