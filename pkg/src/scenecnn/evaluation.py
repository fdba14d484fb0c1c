"""Accuracy metrics, k-fold cross-validation and report rendering."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .architectures import build_network, replace_head
from .data import LabeledDataset, crop_size, make_folds
from .graph import NetworkGraph
from .training import TrainingConfig, configure_modality, predict, train


@dataclass
class MetricsReport:
    class_names: list[str]
    confusion: np.ndarray
    errors: list[tuple[str, int, int]] = field(default_factory=list)
    sample_ids: list[str] = field(default_factory=list)

    @classmethod
    def from_predictions(cls, true, pred, ids: Sequence[str], class_names: Sequence[str]) -> "MetricsReport":
        true = np.asarray(true, dtype=np.int64)
        pred = np.asarray(pred, dtype=np.int64)
        k = len(class_names)
        confusion = np.zeros((k, k), dtype=np.int64)
        np.add.at(confusion, (true, pred), 1)
        errors = [(ids[i], int(true[i]), int(pred[i])) for i in np.flatnonzero(true != pred)]
        return cls(list(class_names), confusion, errors, list(ids))

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def overall_accuracy(self) -> float:
        return float(np.trace(self.confusion) / self.total) if self.total else 0.0

    @property
    def per_class_accuracy(self) -> dict[str, float]:
        rows = self.confusion.sum(axis=1)
        return {name: (float(self.confusion[c, c] / rows[c]) if rows[c] else float("nan"))
                for c, name in enumerate(self.class_names)}

    def merge(self, other: "MetricsReport") -> "MetricsReport":
        return MetricsReport(self.class_names, self.confusion + other.confusion, self.errors + other.errors,
                             self.sample_ids + other.sample_ids)


def evaluate(net: NetworkGraph, ds: LabeledDataset, sample_ids=None, means=None) -> MetricsReport:
    """Predict ``sample_ids`` (indices into ``ds``; all samples when omitted) and tabulate the results.

    ``means`` are the preprocessing means of the training data; they default
    to the means stored on the network, then to the dataset's own.
    """
    if net.num_classes != ds.num_classes:
        raise ValueError(f"network predicts {net.num_classes} classes, dataset has {ds.num_classes}")
    idx = np.arange(len(ds)) if sample_ids is None else np.asarray(sample_ids, dtype=np.int64)
    if means is None:
        means = net.meta.get("channel_means", ds.channel_means)
    pred = predict(net, ds.images[idx], means)
    return MetricsReport.from_predictions(ds.labels[idx], pred, [ds.ids[i] for i in idx], ds.class_names)


@dataclass(frozen=True)
class ModelSpec:
    """Picklable recipe for a fresh network: builder name plus keyword arguments."""

    architecture: str
    crop_ratio: float = 1.0
    kwargs: tuple = ()

    def input_shape(self, image_shape) -> tuple[int, int, int]:
        c, h, w = image_shape
        return (c, crop_size(h, self.crop_ratio), crop_size(w, self.crop_ratio))

    def build(self, image_shape, num_classes: int, seed: int) -> NetworkGraph:
        return build_network(self.architecture, self.input_shape(image_shape), num_classes,
                             seed=seed, **dict(self.kwargs))


@dataclass
class CrossValResult:
    modality: str
    reports: list[MetricsReport]
    assignment: dict[str, int]

    @property
    def fold_accuracies(self) -> list[float]:
        return [r.overall_accuracy for r in self.reports]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.fold_accuracies))

    @property
    def std_accuracy(self) -> float:
        accs = self.fold_accuracies
        return float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0

    def pooled(self) -> MetricsReport:
        out = self.reports[0]
        for r in self.reports[1:]:
            out = out.merge(r)
        return out


def _run_fold(spec: ModelSpec, ds: LabeledDataset, train_idx, test_idx, config: TrainingConfig,
              modality: str, pretrained: NetworkGraph | None, fold: int) -> MetricsReport:
    train_ds = ds.subset(train_idx)
    seed = config.seed + fold
    if modality == "from_scratch":
        net = spec.build(ds.image_shape, ds.num_classes, seed)
    else:
        if pretrained is None:
            raise ValueError(f"modality {modality} needs a pretrained network")
        net = replace_head(pretrained, ds.num_classes, seed)
    modal = configure_modality(net, modality, config.base_lr)
    fold_config = replace(config, modality=modality, seed=seed, lr_multipliers=modal.lr_multipliers,
                          frozen=modal.frozen)
    trained, _ = train(net, train_ds, fold_config)
    return evaluate(trained, ds, test_idx, means=train_ds.channel_means)


def cross_validate(spec: ModelSpec, ds: LabeledDataset, k: int, config: TrainingConfig,
                   modality: str | None = None, pretrained: NetworkGraph | None = None,
                   fold_seed: int = 0, jobs: int = 1) -> CrossValResult:
    """Train on k-1 folds and test on the held-out fold, for every fold.

    Fold ``i`` trains from seed ``config.seed + i``; preprocessing means come
    from its training folds only.
    """
    modality = modality or config.modality
    split = make_folds(ds, k, fold_seed)
    tasks = [(spec, ds, split.train_indices(ds, i), split.test_indices(ds, i), config, modality, pretrained, i)
             for i in range(k)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            reports = list(pool.map(_run_fold, *zip(*tasks)))
    else:
        reports = [_run_fold(*t) for t in tasks]
    return CrossValResult(modality, reports, split.assignment)


# ----------------------------------------------------------------- rendering

def pct(x: float) -> str:
    return f"{100 * x:.2f}"


def render_table(rows: Sequence[tuple[str, str, int, float]]) -> str:
    """Aligned text table: one row per (architecture, modality) with iterations and accuracy in percent."""
    header = ("CNN", "Design", "Iterations", "Accuracy")
    body = [(arch, modality.replace("_", " "), f"{iters:,}", pct(acc)) for arch, modality, iters, acc in rows]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(4)]
    sep = "+".join("-" * (w + 2) for w in widths)

    def row(cells):
        return " " + " | ".join(cells) + " "

    lines = [sep, row(h.ljust(w) for h, w in zip(header, widths)), sep]
    prev_arch = None
    for arch, design, iters, acc in body:
        shown = arch if arch != prev_arch else ""
        lines.append(row([shown.ljust(widths[0]), design.ljust(widths[1]),
                          iters.rjust(widths[2]), acc.rjust(widths[3])]))
        prev_arch = arch
    lines.append(sep)
    return "\n".join(lines) + "\n"


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def render_summary_csv(rows) -> str:
    return _csv([("architecture", "modality", "iterations", "accuracy")] +
                [(a, m, i, pct(acc)) for a, m, i, acc in rows])


def render_per_class(report: MetricsReport) -> str:
    return _csv([("class", "accuracy")] + [(c, pct(a)) for c, a in report.per_class_accuracy.items()])


def render_errors(report: MetricsReport) -> str:
    """``id,true,predicted`` lines with class names, one per misclassified sample."""
    names = report.class_names
    return "".join(f"{sid},{names[t]},{names[p]}\n" for sid, t, p in report.errors)


def render_report(reports, fmt: str = "table") -> str:
    """Render ``table`` rows (architecture, modality, iterations, accuracy), or a MetricsReport as
    ``per_class`` CSV or ``errors`` listing."""
    if fmt == "table":
        return render_table(reports)
    if fmt == "summary_csv":
        return render_summary_csv(reports)
    if isinstance(reports, (list, tuple)):
        merged = reports[0]
        for r in reports[1:]:
            merged = merged.merge(r)
        reports = merged
    if fmt == "per_class":
        return render_per_class(reports)
    if fmt == "errors":
        return render_errors(reports)
    raise ValueError(f"unknown report format {fmt!r}")
