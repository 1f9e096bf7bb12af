"""Command-line entry point: ``diststn <command> [options]``.

Every command writes ``run.json`` (a :class:`RunManifest`) into its output
directory before doing any work, then fills in the artifact list on success.
Relative output paths are resolved against ``$DISTSTN_OUT`` when it is set.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .chipio import load_dataset, save_dataset
from .data import (
    ARCS,
    PaaSplit,
    TargetChip,
    build_paa_split,
    choose_noncoop,
    generate_dataset,
)
from .errors import DistStnError, FormatError, InvalidArg
from .harness import (
    AccuracyReport,
    TrainConfig,
    arc_deficit,
    baseline_cnn_train,
    evaluate,
    other_arc,
    reconstruction_report,
    train,
    write_metrics,
)
from .model import DistStnModel, ModelConfig
from .verify import SCOPES, run_scope

log = logging.getLogger("diststn")

OUT_ENV = "DISTSTN_OUT"
MANIFEST_NAME = "run.json"
SPLIT_NAME = "split.json"
CHECKPOINT_NAME = "model.dstn"


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seeds: list[int]
    artifacts: list[str] = field(default_factory=list)
    version: str = __version__
    timestamp: str = ""

    def write(self, out_dir: Path) -> Path:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / MANIFEST_NAME
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _timestamp() -> str:
    """UTC time, pinned by ``SOURCE_DATE_EPOCH`` for reproducible manifests."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = float(epoch) if epoch else time.time()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


def _resolve_out(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from exc
    if not seeds:
        raise argparse.ArgumentTypeError("seed list is empty")
    return seeds


def _floats(text: str) -> list[float]:
    try:
        vals = [float(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}") from exc
    if not vals:
        raise argparse.ArgumentTypeError("list is empty")
    return vals


def _begin(args: argparse.Namespace, out: Path, config: dict, seeds: Sequence[int]) -> RunManifest:
    manifest = RunManifest(
        command=args.command,
        argv=list(args.argv),
        config=config,
        seeds=list(seeds),
        timestamp=_timestamp(),
    )
    manifest.write(out)
    return manifest


def _finish(manifest: RunManifest, out: Path, artifacts: Sequence[Path]) -> None:
    manifest.artifacts = sorted(str(Path(a).relative_to(out)) for a in artifacts)
    manifest.write(out)


# split manifests -----------------------------------------------------------


def write_split(split: PaaSplit, dataset_dir: Path, path: Path) -> None:
    doc = {
        "dataset": os.path.relpath(dataset_dir.resolve(), path.parent.resolve()),
        "noncoop_classes": sorted(split.noncoop_classes),
        "noncoop_arc": split.noncoop_arc,
        "train": [c.path for c in split.train],
        "validation": [c.path for c in split.validation],
        "test": [c.path for c in split.test],
    }
    path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def read_split(path: str | Path) -> PaaSplit:
    path = Path(path)
    if path.is_dir():
        path = path / SPLIT_NAME
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc.msg})", offset=exc.pos) from exc
    chips = {c.path: c for c in load_dataset(path.parent / doc["dataset"])}
    try:
        subsets = {k: [chips[p] for p in doc[k]] for k in ("train", "validation", "test")}
    except KeyError as exc:
        raise FormatError(f"{path}: chip {exc.args[0]} is not in the dataset") from exc
    split = PaaSplit(
        subsets["train"], subsets["validation"], subsets["test"],
        frozenset(doc["noncoop_classes"]), doc["noncoop_arc"],
    )
    problems = split.violations()
    if problems:
        raise FormatError(f"{path}: split is unsound: {problems[0]}")
    return split


def _model_config(split: PaaSplit, seed: int, alpha: float, beta: float) -> ModelConfig:
    chips = split.train + split.validation + split.test
    num_classes = max(c.class_id for c in chips) + 1
    return ModelConfig(
        image_size=chips[0].image.shape[0],
        num_classes=num_classes,
        alpha=alpha,
        beta=beta,
        seed=seed,
    )


def _train_config(args: argparse.Namespace, seed: int, alpha: float, beta: float) -> TrainConfig:
    return TrainConfig(
        lr=args.lr,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        alpha=alpha,
        beta=beta,
        max_epochs=args.max_epochs,
        patience=args.patience,
        batch_size=args.batch_size,
        seed=seed,
    )


def _report_dict(report: AccuracyReport, split: PaaSplit | None) -> dict:
    doc = {
        "overall": report.overall,
        "count": int(len(report.correct)),
        "per_class": {str(k): v for k, v in report.per_class.items()},
        "binned": [None if np.isnan(v) else float(v) for v in report.binned_accuracy()],
    }
    if split is not None and split.noncoop_classes:
        nc = sorted(split.noncoop_classes)
        doc["seen_arc"] = report.arc_accuracy(split.noncoop_arc, nc)
        doc["unseen_arc"] = report.arc_accuracy(other_arc(split.noncoop_arc), nc)
        doc["arc_deficit"] = arc_deficit(report, split)
    return doc


def _write_json(path: Path, doc: dict) -> Path:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# commands ------------------------------------------------------------------


def cmd_generate(args: argparse.Namespace) -> int:
    out = _resolve_out(args.out)
    config = {
        "classes": args.classes, "scatterers": args.scatterers, "size": args.size,
        "angle_step": args.angle_step, "seed": args.seed, "looks": args.looks,
    }
    manifest = _begin(args, out, config, [args.seed])
    chips = generate_dataset(
        num_classes=args.classes,
        num_scatterers=args.scatterers,
        size=args.size,
        angle_step=args.angle_step,
        seed=args.seed,
        looks=args.looks,
    )
    index = save_dataset(chips, out)
    by_dep: dict[float, int] = {}
    for c in chips:
        by_dep[c.depression_deg] = by_dep.get(c.depression_deg, 0) + 1
    for dep, n in sorted(by_dep.items()):
        print(f"depression {dep:g}: {n} chips")
    print(f"wrote {len(chips)} chips to {out}")
    _finish(manifest, out, [index] + [out / c.path for c in chips])
    return 0


def cmd_split(args: argparse.Namespace) -> int:
    out = _resolve_out(args.out)
    dataset = Path(args.dataset)
    chips = load_dataset(dataset)
    num_classes = max(c.class_id for c in chips) + 1
    config = {
        "dataset": str(dataset), "noncoop": args.noncoop, "arc": args.arc,
        "coop_fraction": args.coop_fraction, "val_fraction": args.val_fraction, "seed": args.seed,
    }
    manifest = _begin(args, out, config, [args.seed])
    noncoop = choose_noncoop(num_classes, args.noncoop, args.seed)
    split = build_paa_split(
        chips, noncoop, args.arc, args.coop_fraction, args.val_fraction, args.seed
    )
    problems = split.violations()
    if problems:
        raise InvalidArg(f"split is unsound: {problems[0]}")
    dataset_dir = dataset if dataset.is_dir() else dataset.parent
    path = out / SPLIT_NAME
    write_split(split, dataset_dir, path)
    print(f"non-cooperative classes {noncoop} restricted to {args.arc}")
    print(f"train {len(split.train)}  validation {len(split.validation)}  test {len(split.test)}")
    _finish(manifest, out, [path])
    return 0


def _train_one(args, split, seed, alpha, beta, out: Path) -> tuple[DistStnModel, dict, list[Path]]:
    out.mkdir(parents=True, exist_ok=True)
    cfg = _train_config(args, seed, alpha, beta)
    model = DistStnModel(_model_config(split, seed, alpha, beta))
    if args.baseline:
        model, reports = baseline_cnn_train(split, cfg, model=model)
    else:
        model, reports = train(model, split, cfg)
    test = evaluate(model, split.test)
    result = {
        "seed": seed,
        "alpha": alpha,
        "beta": beta,
        "epochs": len(reports),
        "val_accuracy": max(r.val_accuracy for r in reports),
        "test": _report_dict(test, split),
    }
    ckpt = out / CHECKPOINT_NAME
    save_checkpoint(model, ckpt)
    metrics = out / "metrics.csv"
    write_metrics(reports, metrics, {"val_accuracy": result["val_accuracy"], "test_accuracy": test.overall})
    report = _write_json(out / "report.json", result)
    return model, result, [ckpt, metrics, report]


def _train_args_config(args) -> dict:
    return {
        "split": str(args.split), "lr": args.lr, "momentum": args.momentum,
        "weight_decay": args.weight_decay, "max_epochs": args.max_epochs,
        "patience": args.patience, "batch_size": args.batch_size, "baseline": args.baseline,
    }


def cmd_train(args: argparse.Namespace) -> int:
    out = _resolve_out(args.out)
    config = _train_args_config(args) | {"alpha": args.alpha, "beta": args.beta}
    manifest = _begin(args, out, config, args.seeds)
    split = read_split(args.split)
    artifacts: list[Path] = []
    rows = []
    for seed in args.seeds:
        _, result, files = _train_one(args, split, seed, args.alpha, args.beta, out / f"seed_{seed}")
        artifacts += files
        rows.append(result)
        print(f"seed {seed}: test accuracy {result['test']['overall']:.4f} ({result['epochs']} epochs)")
    summary = out / "summary.csv"
    with open(summary, "w", newline="", encoding="utf-8") as fh:
        table = csv.writer(fh, lineterminator="\n")
        table.writerow(["seed", "epochs", "val_accuracy", "test_accuracy", "arc_deficit"])
        for r in rows:
            table.writerow(
                [r["seed"], r["epochs"], repr(r["val_accuracy"]), repr(r["test"]["overall"]),
                 repr(r["test"].get("arc_deficit", 0.0))]
            )
        mean = float(np.mean([r["test"]["overall"] for r in rows]))
        table.writerow(["mean", "", "", repr(mean), ""])
    print(f"mean test accuracy over {len(rows)} seed(s): {mean:.4f}")
    _finish(manifest, out, artifacts + [summary])
    return 0


def cmd_gridsearch(args: argparse.Namespace) -> int:
    out = _resolve_out(args.out)
    config = _train_args_config(args) | {"alphas": args.alphas, "betas": args.betas}
    manifest = _begin(args, out, config, args.seeds)
    split = read_split(args.split)
    artifacts: list[Path] = []
    cells = []
    for alpha in args.alphas:
        for beta in args.betas:
            cell_dir = out / "grid" / f"a{alpha:g}_b{beta:g}"
            vals = []
            for seed in args.seeds:
                _, result, files = _train_one(args, split, seed, alpha, beta, cell_dir / f"seed_{seed}")
                artifacts += files
                vals.append(result["val_accuracy"])
            cells.append((alpha, beta, float(np.mean(vals)), cell_dir))
            print(f"alpha={alpha:g} beta={beta:g}: mean validation accuracy {cells[-1][2]:.4f}")
    table_path = out / "grid.csv"
    with open(table_path, "w", newline="", encoding="utf-8") as fh:
        table = csv.writer(fh, lineterminator="\n")
        table.writerow(["alpha", "beta", "mean_val_accuracy"])
        for alpha, beta, acc, _ in cells:
            table.writerow([repr(alpha), repr(beta), repr(acc)])
    # first cell wins ties, so the choice is stable under reruns
    best = max(cells, key=lambda c: c[2])
    best_dir = out / "best"
    if best_dir.exists():
        shutil.rmtree(best_dir)
    shutil.copytree(best[3], best_dir)
    _write_json(best_dir / "cell.json", {"alpha": best[0], "beta": best[1], "mean_val_accuracy": best[2]})
    artifacts += [table_path] + [p for p in best_dir.rglob("*") if p.is_file()]
    print(f"best: alpha={best[0]:g} beta={best[1]:g} (copied to {best_dir})")
    _finish(manifest, out, artifacts)
    return 0


def _eval_chips(args) -> tuple[list[TargetChip], PaaSplit | None]:
    if args.split:
        split = read_split(args.split)
        return split.test, split
    return load_dataset(args.dataset), None


def cmd_eval(args: argparse.Namespace) -> int:
    out = _resolve_out(args.out)
    config = {"checkpoint": str(args.checkpoint), "split": args.split, "dataset": args.dataset}
    manifest = _begin(args, out, config, [])
    model = load_checkpoint(args.checkpoint)
    chips, split = _eval_chips(args)
    report = evaluate(model, chips)
    path = _write_json(out / "eval.json", _report_dict(report, split))
    print(f"accuracy {report.overall:.4f} on {len(chips)} chips")
    _finish(manifest, out, [path])
    return 0


def cmd_reconstruct(args: argparse.Namespace) -> int:
    out = _resolve_out(args.out)
    config = {
        "checkpoint": str(args.checkpoint), "split": args.split, "dataset": args.dataset,
        "pairs": args.pairs,
    }
    manifest = _begin(args, out, config, [args.seed])
    model = load_checkpoint(args.checkpoint)
    chips, _ = _eval_chips(args)
    if len(chips) < 2:
        raise InvalidArg("need at least two chips to form pairs")
    rng = np.random.default_rng(args.seed)
    pairs = []
    for _ in range(args.pairs):
        i, j = rng.choice(len(chips), size=2, replace=False)
        pairs.append((chips[i], chips[j]))
    summary = reconstruction_report(model, pairs, out)
    print(
        f"{len(pairs)} grids; mean mae(self, cross) {summary.mae_self_cross.mean():.4f}, "
        f"mean mae(x1, x2) {summary.mae_inputs.mean():.4f}, ratio {summary.mean_ratio:.4f}"
    )
    _finish(manifest, out, summary.paths + [out / "summary.csv"])
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    scopes = SCOPES if args.scope == "all" else (args.scope,)
    failed = 0
    for scope in scopes:
        for name, rep in run_scope(scope, tol=args.tol, step=args.step, seed=args.seed):
            status = "PASS" if rep.passed else "FAIL"
            print(f"{status} {scope}/{name}: {rep.summary()}")
            failed += not rep.passed
    print("gradcheck: " + ("FAIL" if failed else "PASS"))
    return 1 if failed else 0


# parser --------------------------------------------------------------------


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--split", required=True, help="split.json or its directory")
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=0.004)
    p.add_argument("--max-epochs", type=int, default=200)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--seeds", type=_seeds, default=[0], help="comma-separated, e.g. 0,1,2,3,4")
    p.add_argument("--baseline", action="store_true", help="train the plain CNN classifier instead")


def _add_eval_source(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--split", help="evaluate on this split's test chips")
    src.add_argument("--dataset", help="evaluate on every chip of this dataset")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diststn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a synthetic chip dataset")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--scatterers", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--angle-step", type=float, default=5.0)
    p.add_argument("--looks", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="dataset")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("split", help="build a partial-aspect-angle split")
    p.add_argument("--dataset", required=True, help="dataset directory or manifest.csv")
    p.add_argument("--noncoop", type=int, default=5)
    p.add_argument("--arc", choices=sorted(ARCS), default="first_half")
    p.add_argument("--coop-fraction", type=float, default=0.5)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="split")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train one model per seed")
    _add_train_flags(p)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--out", default="train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gridsearch", help="pick alpha and beta by validation accuracy")
    _add_train_flags(p)
    p.add_argument("--alphas", type=_floats, default=[0.1, 1.0, 10.0, 100.0])
    p.add_argument("--betas", type=_floats, default=[0.1, 1.0, 10.0, 100.0])
    p.add_argument("--out", default="gridsearch")
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("eval", help="accuracy report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    _add_eval_source(p)
    p.add_argument("--out", default="eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reconstruct", help="self/cross reconstruction grids")
    p.add_argument("--checkpoint", required=True)
    _add_eval_source(p)
    p.add_argument("--pairs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="reconstruct")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--scope", choices=SCOPES + ("all",), default="all")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (DistStnError, OSError, KeyError) as exc:
        print(f"diststn {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
