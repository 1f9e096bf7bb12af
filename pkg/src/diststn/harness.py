"""Training protocol, evaluation and reconstruction reporting."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import ARCS, PaaSplit, TargetChip, in_arc, labels, stack_images
from .errors import EmptySet, InvalidArg, TooFewSamples
from .model import DistStnModel
from .nn import ParamGroup, sgd_momentum_step
from .tensor import Tape

log = logging.getLogger(__name__)

N_ASPECT_BINS = 36


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.004
    alpha: float = 1.0
    beta: float = 1.0
    max_epochs: int = 200
    patience: int = 10
    batch_size: int = 16
    seed: int = 0
    decoupled_decay: bool = False

    def __post_init__(self) -> None:
        if self.lr <= 0 or self.momentum <= 0 or self.weight_decay <= 0:
            raise InvalidArg("lr, momentum and weight_decay must be positive")
        if self.patience < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise InvalidArg("patience, max_epochs and batch_size must be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise InvalidArg("alpha and beta must be non-negative")


@dataclass
class EpochReport:
    epoch: int
    classification: float
    cross: float
    self_i: float
    self_j: float
    val_accuracy: float
    wall_time: float = field(default=0.0, compare=False)

    CSV_FIELDS = ("epoch", "classification", "cross", "self_i", "self_j", "val_accuracy")

    def row(self) -> list:
        return [self.epoch] + [repr(float(getattr(self, k))) for k in self.CSV_FIELDS[1:]]


# sampling ------------------------------------------------------------------


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def pair_indices(n: int, seed: int, epoch: int) -> tuple[np.ndarray, np.ndarray]:
    """Two shuffles of ``range(n)`` zipped into ``n`` ordered pairs with ``i != j``.

    Collisions are repaired by swapping within the second shuffle, so each
    sample still appears exactly once on each side.
    """
    if n < 2:
        raise TooFewSamples(f"need at least 2 training samples for pairs, got {n}")
    rng = _epoch_rng(seed, epoch)
    first = rng.permutation(n)
    second = rng.permutation(n)
    for k in np.flatnonzero(first == second):
        if first[k] != second[k]:
            continue
        for step in range(1, n):
            m = (k + step) % n
            if second[m] != first[k] and second[k] != first[m]:
                second[k], second[m] = second[m], second[k]
                break
    return first, second


def sample_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Single-sample order; identical to the first side of :func:`pair_indices`."""
    if n < 1:
        raise TooFewSamples("no training samples")
    return _epoch_rng(seed, epoch).permutation(n)


def pair_stream(
    split: PaaSplit | Sequence[TargetChip], seed: int, epoch: int
) -> list[tuple[TargetChip, TargetChip]]:
    chips = split.train if isinstance(split, PaaSplit) else list(split)
    first, second = pair_indices(len(chips), seed, epoch)
    return [(chips[i], chips[j]) for i, j in zip(first, second)]


# evaluation ----------------------------------------------------------------


@dataclass
class AccuracyReport:
    correct: np.ndarray
    class_ids: np.ndarray
    aspects: np.ndarray

    @property
    def overall(self) -> float:
        return float(self.correct.mean())

    @property
    def per_class(self) -> dict[int, float]:
        return {
            int(c): float(self.correct[self.class_ids == c].mean())
            for c in np.unique(self.class_ids)
        }

    def bins(self) -> tuple[np.ndarray, np.ndarray]:
        """Correct and total counts in 36 aspect bins of 10 degrees."""
        idx = (np.floor(self.aspects / (360.0 / N_ASPECT_BINS)).astype(int)) % N_ASPECT_BINS
        total = np.bincount(idx, minlength=N_ASPECT_BINS)
        hits = np.bincount(idx, weights=self.correct.astype(float), minlength=N_ASPECT_BINS)
        return hits, total

    def binned_accuracy(self) -> np.ndarray:
        hits, total = self.bins()
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(total > 0, hits / np.maximum(total, 1), np.nan)

    def arc_accuracy(self, arc: str, classes: Sequence[int] | None = None) -> float:
        mask = np.array([in_arc(a, arc) for a in self.aspects], dtype=bool)
        if classes is not None:
            mask &= np.isin(self.class_ids, list(classes))
        if not mask.any():
            return float("nan")
        return float(self.correct[mask].mean())


def evaluate(predictor, chips: Sequence[TargetChip], batch_size: int = 64) -> AccuracyReport:
    """Accuracy of ``predictor.predict`` (or a plain callable) over ``chips``."""
    if len(chips) == 0:
        raise EmptySet("cannot evaluate on an empty chip list")
    predict = predictor.predict if hasattr(predictor, "predict") else predictor
    images = stack_images(chips)
    preds = np.concatenate(
        [np.atleast_1d(predict(images[k : k + batch_size])) for k in range(0, len(chips), batch_size)]
    )
    truth = labels(chips)
    aspects = np.array([c.aspect_deg for c in chips])
    return AccuracyReport(preds == truth, truth, aspects)


def other_arc(arc: str) -> str:
    return "second_half" if arc == "first_half" else "first_half"


def arc_deficit(report: AccuracyReport, split: PaaSplit) -> float:
    """Seen-arc minus unseen-arc test accuracy over the non-cooperative classes."""
    classes = sorted(split.noncoop_classes)
    if not classes:
        return 0.0
    seen = report.arc_accuracy(split.noncoop_arc, classes)
    unseen = report.arc_accuracy(other_arc(split.noncoop_arc), classes)
    return seen - unseen


# training ------------------------------------------------------------------


def _fit(
    model: DistStnModel,
    groups: list[ParamGroup],
    split: PaaSplit,
    config: TrainConfig,
    batches: Callable[[int], list[tuple[np.ndarray, ...]]],
    batch_loss: Callable[..., tuple],
    evaluator: Callable[[DistStnModel], float] | None,
) -> tuple[DistStnModel, list[EpochReport]]:
    if evaluator is None:
        held_out = split.validation or split.train
        evaluator = lambda m: evaluate(m, held_out).overall  # noqa: E731

    reports: list[EpochReport] = []
    best_acc = -np.inf
    best_state = model.state_dict()
    stale = 0
    for epoch in range(config.max_epochs):
        start = time.perf_counter()
        sums = np.zeros(4)
        seen = 0
        for batch in batches(epoch):
            with Tape() as tape:
                loss, terms = batch_loss(*batch)
            tape.backward(loss)
            sgd_momentum_step(
                groups, config.lr, config.momentum, config.weight_decay, config.decoupled_decay
            )
            n = len(batch[0])
            sums += n * np.asarray(terms)
            seen += n
        acc = float(evaluator(model))
        means = sums / max(seen, 1)
        report = EpochReport(epoch, *means.tolist(), acc, time.perf_counter() - start)
        reports.append(report)
        log.info(
            "epoch %d cls=%.4f cross=%.4f self=%.4f/%.4f val_acc=%.4f (%.1fs)",
            epoch, *means, acc, report.wall_time,
        )
        if acc > best_acc:
            best_acc, best_state, stale = acc, model.state_dict(), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.load_state_dict(best_state)
    return model, reports


def train(
    model: DistStnModel,
    split: PaaSplit,
    config: TrainConfig,
    evaluator: Callable[[DistStnModel], float] | None = None,
) -> tuple[DistStnModel, list[EpochReport]]:
    """Pairwise training with early stopping; the best-validation snapshot is restored."""
    x = stack_images(split.train)
    y = labels(split.train)

    def batches(epoch: int):
        first, second = pair_indices(len(y), config.seed, epoch)
        for k in range(0, len(y), config.batch_size):
            i, j = first[k : k + config.batch_size], second[k : k + config.batch_size]
            yield x[i], y[i], x[j], y[j]

    def batch_loss(xi, yi, xj, yj):
        loss, bd = model.pair_loss(xi, yi, xj, yj, config.alpha, config.beta)
        return loss, (bd.classification, bd.cross, bd.self_i, bd.self_j)

    return _fit(model, list(model.groups.values()), split, config, batches, batch_loss, evaluator)


def baseline_cnn_train(
    split: PaaSplit,
    config: TrainConfig,
    model: DistStnModel | None = None,
    model_config=None,
    evaluator: Callable[[DistStnModel], float] | None = None,
) -> tuple[DistStnModel, list[EpochReport]]:
    """Encoder + classifier trained on cross-entropy alone, one sample at a time."""
    if model is None:
        model = DistStnModel(model_config)
    x = stack_images(split.train)
    y = labels(split.train)

    def batches(epoch: int):
        order = sample_order(len(y), config.seed, epoch)
        for k in range(0, len(y), config.batch_size):
            i = order[k : k + config.batch_size]
            yield x[i], y[i]

    def batch_loss(xb, yb):
        loss = model.classification_loss(xb, yb)
        return loss, (loss.item(), 0.0, 0.0, 0.0)

    groups = [model.groups["encoder"], model.groups["classifier"]]
    return _fit(model, groups, split, config, batches, batch_loss, evaluator)


def write_metrics(reports: Sequence[EpochReport], path: str | Path, summary: dict | None = None) -> None:
    """One CSV row per epoch, then a ``summary`` row of ``key=value`` cells."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(EpochReport.CSV_FIELDS)
        for r in reports:
            out.writerow(r.row())
        if summary is not None:
            out.writerow(["summary"] + [f"{k}={v}" for k, v in summary.items()])


# reconstruction ------------------------------------------------------------


def write_pgm16(image: np.ndarray, path: str | Path) -> None:
    """Binary 16-bit graymap; ``image`` is min-max scaled to 0..65535."""
    lo, hi = float(image.min()), float(image.max())
    span = hi - lo if hi > lo else 1.0
    pix = np.rint((image - lo) / span * 65535.0).astype(">u2")
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode("ascii") + pix.tobytes())


def read_pgm16(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary graymap")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=">u2").reshape(h, w)


@dataclass
class ReconstructionSummary:
    mae_self_cross: np.ndarray
    mae_inputs: np.ndarray
    paths: list[Path]

    @property
    def mean_ratio(self) -> float:
        return float(self.mae_self_cross.mean() / self.mae_inputs.mean())


def reconstruction_report(
    model: DistStnModel, pairs: Sequence[tuple[TargetChip, TargetChip]], out_dir: str | Path
) -> ReconstructionSummary:
    """Per pair, a column of four images: x1, x2, self-reconstruction, cross-reconstruction."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    x1 = stack_images([a for a, _ in pairs])
    x2 = stack_images([b for _, b in pairs])
    hat, tilde = model.cross_reconstruct(x1, x2)
    d_rec = np.abs(hat - tilde).mean(axis=(1, 2))
    d_in = np.abs(x1 - x2).mean(axis=(1, 2))

    paths = []
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        table = csv.writer(fh, lineterminator="\n")
        table.writerow(
            ["pair", "class_1", "aspect_1", "class_2", "aspect_2", "mae_self_cross", "mae_inputs", "ratio"]
        )
        for k, (a, b) in enumerate(pairs):
            path = out / f"pair_{k:03d}.pgm"
            write_pgm16(np.concatenate([x1[k], x2[k], hat[k], tilde[k]], axis=0), path)
            paths.append(path)
            table.writerow(
                [k, a.class_id, a.aspect_deg, b.class_id, b.aspect_deg,
                 repr(float(d_rec[k])), repr(float(d_in[k])), repr(float(d_rec[k] / d_in[k]))]
            )
        table.writerow(
            ["mean", "", "", "", "", repr(float(d_rec.mean())), repr(float(d_in.mean())),
             repr(float(d_rec.mean() / d_in.mean()))]
        )
    return ReconstructionSummary(d_rec, d_in, paths)


def config_row(config: TrainConfig) -> dict:
    return asdict(config)
