"""Train/test split, confusion matrices, the four percentage metrics, reports and sweeps."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import ml
from .errors import DegenerateLabels, EmptyTestSet, InvalidConfig, ProxgateError, UndefinedMetric
from .rssi import DISTANCE_MAX_M, LabeledDataset

METRICS = ("accuracy", "sensitivity", "specificity", "precision")
METRIC_TITLES = {
    "accuracy": "Accuracy",
    "sensitivity": "Sensitivity",
    "specificity": "Specificity",
    "precision": "Precision",
}
# column headings used in the rendered tables
MODEL_COLUMNS = {"LR": "LR", "KNN": "KNN", "GNB": "NB"}
CATEGORIES = ("Crosswise", "Direct")

# Published percentages, kept for comparison against sweep output.
PUBLISHED = {
    "Crosswise": {
        "LR": {"accuracy": 97.29, "sensitivity": 97.79, "specificity": 96.66, "precision": 97.35},
        "KNN": {"accuracy": 94.86, "sensitivity": 96.64, "specificity": 92.62, "precision": 94.27},
        "GNB": {"accuracy": 85.50, "sensitivity": 88.97, "specificity": 81.14, "precision": 85.56},
    },
    "Direct": {
        "LR": {"accuracy": 97.78, "sensitivity": 98.35, "specificity": 97.03, "precision": 97.77},
        "KNN": {"accuracy": 95.41, "sensitivity": 97.49, "specificity": 92.66, "precision": 94.62},
        "GNB": {"accuracy": 90.59, "sensitivity": 92.44, "specificity": 88.14, "precision": 91.17},
    },
}


# ---------------------------------------------------------------------------
# split


def split(data: LabeledDataset, train_fraction: float = 0.8, seed: int = 0):
    """Seeded stratified split.

    The train set has exactly ``floor(train_fraction * N)`` rows; per-class
    train counts are floors of their share, topped up by largest remainder.
    Returns ``(train, test, train_idx, test_idx)``.
    """
    if not 0 < train_fraction < 1:
        raise InvalidConfig("train_fraction must lie in (0, 1)")
    n = len(data)
    if n < 5:
        raise InvalidConfig("split needs at least 5 rows")
    y = data.labels
    if y.all() or not y.any():
        raise DegenerateLabels("both classes must be present to split")

    rng = np.random.default_rng(seed)
    total = math.floor(train_fraction * n)
    classes = [np.flatnonzero(~y), np.flatnonzero(y)]
    quotas = [train_fraction * len(c) for c in classes]
    take = [math.floor(q) for q in quotas]
    order = sorted(range(2), key=lambda i: (-(quotas[i] - take[i]), i))
    for i in order[: total - sum(take)]:
        take[i] += 1

    train_idx, test_idx = [], []
    for members, t in zip(classes, take):
        shuffled = rng.permutation(members)
        train_idx.append(shuffled[:t])
        test_idx.append(shuffled[t:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return data.subset(train_idx), data.subset(test_idx), train_idx, test_idx


# ---------------------------------------------------------------------------
# confusion matrix and metrics


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def to_dict(self) -> dict:
        return {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn}


def confusion_from_labels(y_true, y_pred) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=bool)
    y_pred = np.asarray(y_pred, dtype=bool)
    if y_true.size == 0:
        raise EmptyTestSet("no samples to evaluate")
    return ConfusionMatrix(
        tp=int(np.sum(y_true & y_pred)),
        tn=int(np.sum(~y_true & ~y_pred)),
        fp=int(np.sum(~y_true & y_pred)),
        fn=int(np.sum(y_true & ~y_pred)),
    )


def confusion(model: ml.TrainedModel, test: LabeledDataset) -> ConfusionMatrix:
    if len(test) == 0:
        raise EmptyTestSet("no samples to evaluate")
    predicted, _ = ml.predict_batch(model, test.features)
    return confusion_from_labels(test.labels, predicted)


def _pct(num: int, den: int, name: str) -> float:
    if den == 0:
        raise UndefinedMetric(f"{name} is undefined: zero denominator")
    return num / den * 100.0


def accuracy(cm: ConfusionMatrix) -> float:
    return _pct(cm.tp + cm.tn, cm.total, "accuracy")


def sensitivity(cm: ConfusionMatrix) -> float:
    return _pct(cm.tp, cm.tp + cm.fn, "sensitivity")


def specificity(cm: ConfusionMatrix) -> float:
    return _pct(cm.tn, cm.tn + cm.fp, "specificity")


def precision(cm: ConfusionMatrix) -> float:
    return _pct(cm.tp, cm.tp + cm.fp, "precision")


METRIC_FUNCS: dict[str, Callable[[ConfusionMatrix], float]] = {
    "accuracy": accuracy,
    "sensitivity": sensitivity,
    "specificity": specificity,
    "precision": precision,
}


def metrics_of(cm: ConfusionMatrix) -> dict[str, float | None]:
    """All four metrics; None marks an undefined one."""
    out: dict[str, float | None] = {}
    for name, fn in METRIC_FUNCS.items():
        try:
            out[name] = fn(cm)
        except UndefinedMetric:
            out[name] = None
    return out


# ---------------------------------------------------------------------------
# reports


@dataclass
class ModelResult:
    confusion: ConfusionMatrix
    metrics: dict[str, float | None]

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix) -> "ModelResult":
        return cls(cm, metrics_of(cm))


@dataclass
class EvaluationReport:
    results: dict[str, dict[str, ModelResult]]  # category -> model -> result
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "metadata": self.metadata,
            "results": {
                cat: {
                    model: {
                        "confusion": r.confusion.to_dict(),
                        **{f"{m}_pct": r.metrics[m] for m in METRICS},
                    }
                    for model, r in models.items()
                }
                for cat, models in self.results.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["category", "model", "metric", "value_pct"])
        for cat, models in self.results.items():
            for model, r in models.items():
                for m in METRICS:
                    w.writerow([cat, model, m, _fmt_raw(r.metrics[m])])
        return buf.getvalue()

    def render(self) -> str:
        blocks = []
        for cat, models in self.results.items():
            values = {name: r.metrics for name, r in models.items()}
            blocks.append(render_table(f"{cat} Results", values))
        return "\n\n".join(blocks) + "\n"


def _fmt_raw(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def format_pct(v: float | None) -> str:
    return "undefined" if v is None else f"{v:.2f}%"


def render_table(title: str, values: Mapping[str, Mapping[str, float | None]]) -> str:
    """Rows are the four metrics, columns are the models."""
    header = ["ML Model"] + [MODEL_COLUMNS.get(m, m) for m in values]
    rows = [header]
    for metric in METRICS:
        rows.append([METRIC_TITLES[metric]] + [format_pct(values[m].get(metric)) for m in values])
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = [title]
    for r in rows:
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    train_fraction: float = 0.8
    k: int = 5
    logistic: ml.LogisticHyper = field(default_factory=ml.LogisticHyper)
    models: tuple[str, ...] = ml.MODEL_NAMES


def _with_context(exc: ProxgateError, context: str) -> ProxgateError:
    wrapped = type(exc)(f"{context}: {exc}")
    wrapped.__cause__ = exc
    return wrapped


def evaluate_category(
    data: LabeledDataset, config: ExperimentConfig, category: str
) -> dict[str, ModelResult]:
    try:
        train, test, _, _ = split(data, config.train_fraction, config.seed)
    except ProxgateError as exc:
        raise _with_context(exc, category) from exc
    results = {}
    for name in config.models:
        try:
            model = ml.train(name, train, k=config.k, hyper=config.logistic)
            results[name] = ModelResult.from_confusion(confusion(model, test))
        except ProxgateError as exc:
            raise _with_context(exc, f"{category}/{name}") from exc
    return results


def run_experiment(
    crosswise: LabeledDataset | None,
    direct: LabeledDataset | None,
    config: ExperimentConfig | None = None,
) -> EvaluationReport:
    return run_experiments({"Crosswise": crosswise, "Direct": direct}, config)


def run_experiments(
    datasets: Mapping[str, LabeledDataset | None], config: ExperimentConfig | None = None
) -> EvaluationReport:
    """Split, train every model and score it on the held-out part, per category."""
    config = config or ExperimentConfig()
    results = {}
    taus = {}
    provenance = {}
    for cat, data in datasets.items():
        if data is None:
            continue
        results[cat] = evaluate_category(data, config, cat)
        taus[cat] = data.proximity_threshold_m
        provenance[cat] = data.provenance.value
    if not results:
        raise InvalidConfig("no datasets to evaluate")
    metadata = {
        "seed": config.seed,
        "split_ratio": config.train_fraction,
        "k": config.k,
        "logistic": asdict(config.logistic),
        "tau_m": taus,
        "provenance": provenance,
    }
    return EvaluationReport(results, metadata)


# ---------------------------------------------------------------------------
# sweep

SWEEP_HEADER = ("tau_m", "k", "model", "metric", "value_pct")


@dataclass
class SweepCell:
    tau_m: float
    k: int
    report: EvaluationReport | None = None
    errors: dict[str, str] = field(default_factory=dict)  # category -> error code


def sweep(
    datasets: Mapping[str, LabeledDataset],
    tau_grid: Iterable[float],
    k_grid: Iterable[int],
    config: ExperimentConfig | None = None,
) -> list[SweepCell]:
    """Relabel at every tau and rerun the experiment for every k.

    Categories whose relabeled data are single-class are recorded in the
    cell's ``errors`` rather than aborting the sweep.
    """
    config = config or ExperimentConfig()
    tau_grid = [float(t) for t in tau_grid]
    k_grid = [int(k) for k in k_grid]
    if not tau_grid or not k_grid:
        raise InvalidConfig("sweep grids must be non-empty")
    for cat, data in datasets.items():
        if data.distances is None:
            raise InvalidConfig(f"{cat}: sweep needs ground-truth distances")
    for tau in tau_grid:
        if not (math.isfinite(tau) and 0 < tau <= DISTANCE_MAX_M):
            raise InvalidConfig(f"tau {tau} outside the valid distance range (0, {DISTANCE_MAX_M}]")

    cells = []
    for tau in tau_grid:
        relabeled = {cat: d.relabel(tau) for cat, d in datasets.items()}
        # LR and GNB do not depend on k; train them once per tau
        fixed: dict[str, dict[str, ModelResult]] = {}
        errors: dict[str, str] = {}
        k_free = tuple(m for m in config.models if m != "KNN")
        for cat, data in relabeled.items():
            try:
                fixed[cat] = evaluate_category(data, replace(config, models=k_free), cat)
            except ProxgateError as exc:
                errors[cat] = exc.code
        for k in k_grid:
            cell = SweepCell(tau, k, errors=dict(errors))
            results = {}
            for cat, data in relabeled.items():
                if cat in errors:
                    continue
                merged = dict(fixed[cat])
                if "KNN" in config.models:
                    try:
                        merged.update(evaluate_category(data, replace(config, k=k, models=("KNN",)), cat))
                    except ProxgateError as exc:
                        cell.errors[cat] = exc.code
                        continue
                results[cat] = {m: merged[m] for m in config.models}
            if results:
                meta = {"seed": config.seed, "split_ratio": config.train_fraction, "k": k, "tau_m": tau}
                cell.report = EvaluationReport(results, meta)
            cells.append(cell)
    return cells


def sweep_csv(cells: Sequence[SweepCell]) -> str:
    """CSV rows of (tau, k, model, metric, value); models are category-qualified.

    A grid point that failed for a category yields one ``error`` row whose
    value is the error code.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for cell in cells:
        if cell.report is not None:
            for cat, models in cell.report.results.items():
                for model, r in models.items():
                    for m in METRICS:
                        w.writerow([repr(cell.tau_m), cell.k, f"{cat}/{model}", m, _fmt_raw(r.metrics[m])])
        for cat, code in sorted(cell.errors.items()):
            w.writerow([repr(cell.tau_m), cell.k, f"{cat}/*", "error", code])
    return buf.getvalue()


@dataclass(frozen=True)
class PublishedComparison:
    tau_m: float
    k: int
    category: str
    mean_abs_delta: float
    deltas: dict[str, dict[str, float]]  # model -> metric -> (ours - published)


def closest_to_published(cells: Sequence[SweepCell], category: str = "Direct") -> PublishedComparison:
    """The (tau, k) cell whose 3x4 metric grid is nearest the published table."""
    target = PUBLISHED[category]
    best = None
    for cell in cells:
        if cell.report is None or category not in cell.report.results:
            continue
        res = cell.report.results[category]
        deltas: dict[str, dict[str, float]] = {}
        total, count = 0.0, 0
        for model, published in target.items():
            if model not in res:
                continue
            deltas[model] = {}
            for metric, ref in published.items():
                ours = res[model].metrics[metric]
                if ours is None:
                    continue
                deltas[model][metric] = ours - ref
                total += abs(ours - ref)
                count += 1
        if count == 0:
            continue
        cand = PublishedComparison(cell.tau_m, cell.k, category, total / count, deltas)
        if best is None or cand.mean_abs_delta < best.mean_abs_delta:
            best = cand
    if best is None:
        raise InvalidConfig(f"no sweep cell has results for {category}")
    return best
