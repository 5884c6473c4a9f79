"""
dgmil command line: generate synthetic data, train, evaluate, run ablation
sweeps and inspect files.

Diagnostics go to stderr through rich; primary outputs are files written
atomically. Exit codes: 0 success, 1 validation error, 2 runtime error.
"""

import argparse
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd
from dotenv import load_dotenv
from rich.markup import escape
from rich.progress import BarColumn, MofNCompleteColumn, Progress, SpinnerColumn, TextColumn

from ablation import SWEEP_COLUMNS, AblationGrid, run_ablate
from bundle import ModelBundle, load_bundle, save_bundle
from errors import ConfigError, DGMILError
from feature_files import MAGIC, read_feature_file, write_feature_csv, write_feature_file
from metrics import evaluate, roc_auc, roc_curve
from mil_dataset import Dataset
from plots import plot_curves, plot_sweep
from refinement import refine
from reporting import (configure_logging, console, print_summary, print_table, sha256_file, write_csv_table,
                       write_json, write_json_lines)
from run_config import OPTIONS, RunConfig, build_config, options_for, resolve_run_config
from strategies import get_strategy
from synthetic import SyntheticConfig, generate

SYNTHETIC_FIELDS = list(SyntheticConfig.model_fields)

COMMANDS = {
    "generate": "write a synthetic train/test split",
    "train": "run iterative refinement and save a model bundle",
    "eval": "evaluate a model bundle on a test file",
    "ablate": "sweep ratio, cluster count or strategy",
    "inspect": "summarize feature files and model bundles",
}


class _Parser(argparse.ArgumentParser):
    """Argument errors become ConfigError (exit 1) instead of SystemExit(2)."""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key=value file; keys are long flag names")
    common.add_argument("--quiet", action="store_true", help="warnings and errors only")
    common.add_argument("--verbose", action="store_true", help="debug logging and tracebacks")

    parser = _Parser(prog="dgmil", description="Cluster-conditioned MIL scoring with iterative feature refinement")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command, description in COMMANDS.items():
        sub = subparsers.add_parser(command, parents=[common], help=description, description=description)
        for option in options_for(command):
            help_text = f"{option.help} (default: {option.default})"
            if option.is_flag:
                sub.add_argument(f"--{option.name}", dest=option.dest, action=argparse.BooleanOptionalAction,
                                 default=argparse.SUPPRESS, help=help_text)
            else:
                sub.add_argument(f"--{option.name}", dest=option.dest, type=option.parse,
                                 default=argparse.SUPPRESS, help=help_text)
        if command == "inspect":
            sub.add_argument("paths", nargs="+", help="DGMF/CSV feature files or JSON model bundles")
    return parser


def _progress(quiet: bool) -> Progress:
    return Progress(SpinnerColumn(), TextColumn("{task.description}"), BarColumn(), MofNCompleteColumn(),
                    console=console, transient=True, disable=quiet)


def _require(run: RunConfig, name: str) -> str:
    value = run[name]
    if not value:
        raise ConfigError(f"{run.command} needs --{name}")
    return value


def _read_dataset(path: str) -> Dataset:
    return Dataset(*read_feature_file(path))


def cmd_generate(run: RunConfig, quiet: bool) -> None:
    config = build_config(SyntheticConfig, run.pick(SYNTHETIC_FIELDS))
    out = Path(run["out"] or "data")
    split = generate(config)

    files: Dict[str, Any] = {}
    for name, dataset in (("train", split.train), ("test", split.test)):
        path = out / f"{name}.dgmf"
        write_feature_file(dataset.instances, dataset.bags, path)
        if run["csv"]:
            write_feature_csv(dataset.instances, dataset.bags, out / f"{name}.csv")
        files[path.name] = {
            "sha256": sha256_file(path),
            "n_instances": dataset.instances.n,
            "n_bags": len(dataset.bags),
            "dim": dataset.instances.d,
        }
    write_json(out / "manifest.json", {"run": run.to_record(), "synthetic": config.model_dump(), "files": files})

    if not quiet:
        print_table(f"Generated data in {out}", ["File", "Instances", "Bags", "Dim", "SHA-256"],
                    [(name, f["n_instances"], f["n_bags"], f["dim"], f["sha256"][:16]) for name, f in files.items()])


def cmd_train(run: RunConfig, quiet: bool) -> None:
    instances, bags = read_feature_file(_require(run, "train"))
    config = run.refinement_config()

    with _progress(quiet) as progress:
        task = progress.add_task("Refining feature space", total=config.max_rounds or None)
        state = refine(instances, bags, config, on_round=lambda record: progress.advance(task))

    out = run["out"] or "model.json"
    save_bundle(ModelBundle.from_state(state, run.to_record()), out)
    round_log = run["round_log"] or f"{out}.rounds.jsonl"
    write_json_lines(round_log, [{"version": run.version, **r.to_log_record()} for r in state.rounds])

    if not quiet:
        print_table("Refinement rounds",
                    ["Round", "Pseudo +", "Pseudo -", "Epochs", "Loss", "Instance AUC", "Bag AUC"],
                    [(r.round_index, r.selection.pos_indices.size, r.selection.neg_indices.size,
                      len(r.loss_curve), r.loss_curve[-1], r.instance_auc, r.bag_auc) for r in state.rounds])
        print_summary("Training summary", {
            "rounds": state.round_index,
            "stop reason": state.stop_reason,
            "round-0 bag AUC": roc_auc(state.initial_scores.bag_scores, bags.labels),
            "final bag AUC": state.final_bag_auc,
            "final instance AUC": state.final_instance_auc,
            "threshold": state.threshold,
            "bundle": out,
            "round log": round_log,
        })


def _curve_rows(report, test: Dataset) -> List[List[Any]]:
    rows: List[List[Any]] = []
    scores = report.scores
    rows += [["bag_roc", x, y] for x, y in roc_curve(scores.bag_scores, test.bags.labels)]
    if report.instance_auc is not None:
        rows += [["instance_roc", x, y] for x, y in roc_curve(scores.instance_scores, test.instances.instance_label)]
        rows += [["froc", x, y] for x, y in report.froc_points]
    return rows


def cmd_eval(run: RunConfig, quiet: bool) -> None:
    bundle = load_bundle(_require(run, "bundle"))
    test = _read_dataset(_require(run, "test"))
    report = evaluate(bundle.to_model(), test, mode=run.mode)

    record = {"run": run.to_record(), "bundle_config": bundle.config, "metrics": report.to_dict()}
    write_json_lines(run["out"] or "report.jsonl", [record])

    if run["curves"] or run["plot"]:
        rows = _curve_rows(report, test)
        if run["curves"]:
            write_csv_table(run["curves"], pd.DataFrame(rows, columns=["curve", "x", "y"]))
        if run["plot"]:
            curves: Dict[str, list] = {}
            for name, x, y in rows:
                curves.setdefault(name, []).append((x, y))
            plot_curves(curves, run["plot"], title=Path(run["test"]).name)

    if not quiet:
        metrics = report.to_dict()
        print_summary("Evaluation", {key: value for key, value in metrics.items()
                                     if not isinstance(value, dict)} | metrics["counts"])


def cmd_ablate(run: RunConfig, quiet: bool) -> None:
    grid = AblationGrid.parse(run["axis"], run["values"])
    get_strategy(run["strategy"])
    if run["jobs"] < 1:
        raise ConfigError(f"--jobs must be >= 1, got {run['jobs']}")
    train = _read_dataset(_require(run, "train"))
    test = _read_dataset(_require(run, "test"))
    config = run.refinement_config()

    with _progress(quiet) as progress:
        task = progress.add_task(f"Sweeping {grid.axis}", total=len(grid.values))
        rows = run_ablate(grid, train, test, config, run["strategy"], run["jobs"],
                          on_cell=lambda row: progress.advance(task))

    out = Path(run["out"] or "sweep")
    write_csv_table(out / "sweep.csv", pd.DataFrame(rows, columns=SWEEP_COLUMNS))
    write_json(out / "sweep.json", {"run": run.to_record(), "grid": grid.model_dump(), "rows": rows})
    if run["plot"]:
        plot_sweep(rows, grid.axis, run["plot"])

    if not quiet:
        print_table(f"{grid.axis} sweep", ["Value", "Status", "Instance AUC", "Bag AUC", "Accuracy", "FROC"],
                    [(row["value"], row["status"], row["instance_auc"], row["bag_auc"], row["bag_accuracy"],
                      row["froc_score"]) for row in rows])


def _inspect_features(path: str) -> None:
    instances, bags = read_feature_file(path)
    labels = bags.labels
    known = instances.has_instance_labels
    print_summary(f"Feature file {path}", {
        "instances": instances.n,
        "dimension": instances.d,
        "bags": len(bags),
        "positive bags": int((labels == 1).sum()),
        "negative bags": int((labels == 0).sum()),
        "bag size (min/max)": f"{min(b.size for b in bags)}/{max(b.size for b in bags)}",
        "instance labels": "known" if known else "unknown",
        "positive instances": int((instances.instance_label == 1).sum()) if known else None,
        "validation": "ok",
    })


def _inspect_bundle(path: str) -> None:
    bundle = load_bundle(path)
    model = bundle.to_model()
    print_summary(f"Model bundle {path}", {
        "version": bundle.version,
        "dimension": model.cluster_model.d,
        "clusters": model.cluster_model.M,
        "fitted instances": model.cluster_model.n_fitted,
        "refinement rounds": len(bundle.rounds),
        "converged": bundle.converged,
        "threshold": bundle.threshold,
        "anchors": f"{bundle.anchors[0]:.4f} .. {bundle.anchors[1]:.4f}",
        "train bag AUC": bundle.train_bag_auc,
        "train instance AUC": bundle.train_instance_auc,
        "seed": bundle.config.get("options", {}).get("seed"),
    })


def cmd_inspect(paths: List[str]) -> None:
    for path in paths:
        try:
            head = Path(path).read_bytes()[:4]
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc.strerror}") from exc
        if head == MAGIC or head.startswith(b"bag_"):
            _inspect_features(path)
        else:
            _inspect_bundle(path)


HANDLERS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}

_RESOLVED = {option.dest for option in OPTIONS}


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    verbose = False
    try:
        args = build_parser().parse_args(argv)
        verbose = args.verbose
        configure_logging(args.quiet, args.verbose)
        if args.command == "inspect":
            cmd_inspect(args.paths)
            return 0
        given = {key: value for key, value in vars(args).items() if key in _RESOLVED}
        run = resolve_run_config(args.command, given, args.config, os.environ)
        HANDLERS[args.command](run, args.quiet)
    except DGMILError as exc:
        if verbose:
            console.print_exception()
        console.print(f"[bold red]error:[/bold red] {escape(str(exc))}")
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
