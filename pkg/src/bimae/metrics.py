"""Accuracy-matrix bookkeeping and evaluation metrics.

The ledger holds acc[t][k]: accuracy on task k's test classes measured after
training task t (0-indexed, k <= t, lower-triangular). Overall accuracy at a
phase weights each task by its test-set size, i.e. it equals total correct
over total evaluated.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np


class IncompleteLedgerError(ValueError):
    pass


class MetricsLedger:
    def __init__(self):
        self.acc: list[list[float]] = []
        self.test_sizes: list[int] = []
        self.wall_clock: list[float] = []
        self.replay_mse: list[float] = []   # per replay image, across all tasks

    def add_task_row(self, accuracies, test_sizes, wall_clock: float = 0.0) -> None:
        row = [float(a) for a in accuracies]
        if len(row) != len(self.acc) + 1:
            raise ValueError(f"row {len(self.acc)} must have {len(self.acc) + 1} entries")
        if any(not 0.0 <= a <= 1.0 for a in row):
            raise ValueError(f"accuracies outside [0, 1]: {row}")
        sizes = [int(s) for s in test_sizes]
        if len(sizes) != len(row):
            raise ValueError("need one test size per accuracy entry")
        for k, s in enumerate(sizes[:-1]):
            if s != self.test_sizes[k]:
                raise ValueError(f"test size for task {k} changed from {self.test_sizes[k]} to {s}")
        if len(self.acc) == 0:
            self.test_sizes = sizes
        else:
            self.test_sizes.append(sizes[-1])
        self.acc.append(row)
        self.wall_clock.append(float(wall_clock))

    @property
    def n_tasks(self) -> int:
        return len(self.acc)

    def overall_accuracy(self, t: int) -> float:
        """Accuracy over all classes seen through task index t (0-based)."""
        row = self.acc[t]
        sizes = self.test_sizes[: t + 1]
        return float(sum(a * s for a, s in zip(row, sizes)) / sum(sizes))

    def _require_complete(self):
        if not self.acc:
            raise IncompleteLedgerError("ledger has no completed tasks")


def avg_accuracy(ledger: MetricsLedger) -> float:
    """Mean over phases of the seen-classes overall accuracy."""
    ledger._require_complete()
    return float(np.mean([ledger.overall_accuracy(t) for t in range(ledger.n_tasks)]))


def last_accuracy(ledger: MetricsLedger) -> float:
    """Overall accuracy over all classes after the final task."""
    ledger._require_complete()
    return ledger.overall_accuracy(ledger.n_tasks - 1)


def forgetting(ledger: MetricsLedger) -> float:
    """Average forgetting: mean over earlier tasks k of the drop from the
    best accuracy ever reached on k to the final accuracy on k.

    Zero for a single-task ledger by definition.
    """
    ledger._require_complete()
    t_final = ledger.n_tasks - 1
    if t_final == 0:
        return 0.0
    drops = []
    for k in range(t_final):
        best = max(ledger.acc[t][k] for t in range(k, t_final + 1))
        drops.append(best - ledger.acc[t_final][k])
    return float(np.mean(drops))


def feature_density(features_by_class: dict) -> float:
    """Ratio of mean within-class to mean across-class cosine similarity.

    Returns ``inf`` when the across-class mean is exactly zero. Requires at
    least two classes with at least two samples each; zero vectors are
    rejected because their cosine similarity is undefined.
    """
    if len(features_by_class) < 2:
        raise ValueError("need features from at least two classes")
    feats, labels = [], []
    for cls, rows in features_by_class.items():
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] < 2:
            raise ValueError(f"class {cls}: need a 2D array with at least two samples")
        feats.append(rows)
        labels.append(np.full(rows.shape[0], cls))
    feats = np.concatenate(feats)
    norms = np.linalg.norm(feats, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero feature vector has undefined cosine similarity")
    unit = feats / norms[:, None]
    sim = unit @ unit.T
    same = np.concatenate(labels)[:, None] == np.concatenate(labels)[None, :]
    off_diag = ~np.eye(len(feats), dtype=bool)
    pi_intra = float(sim[same & off_diag].mean())
    pi_inter = float(sim[~same].mean())
    if pi_inter == 0.0:
        return math.inf
    return pi_intra / pi_inter


ACC_CSV = "acc_matrix.csv"
METRICS_CSV = "metrics.csv"
PLOT_PNG = "accuracy_plot.png"


def emit_reports(ledger: MetricsLedger, outdir) -> list[Path]:
    """Write the accuracy matrix and summary metrics as CSV plus an
    accuracy-evolution plot. Floats are written with repr so reading the CSV
    back reproduces them bit-for-bit. Re-emitting overwrites identically.
    """
    ledger._require_complete()
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    acc_path = outdir / ACC_CSV
    with open(acc_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["after_task", "eval_task", "accuracy", "test_size"])
        for t, row in enumerate(ledger.acc):
            for k, acc in enumerate(row):
                writer.writerow([t, k, repr(acc), ledger.test_sizes[k]])

    metrics_path = outdir / METRICS_CSV
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["avg_accuracy", "last_accuracy", "forgetting"])
        writer.writerow([repr(avg_accuracy(ledger)), repr(last_accuracy(ledger)),
                         repr(forgetting(ledger))])

    plot_path = outdir / PLOT_PNG
    _plot_accuracy(ledger, plot_path)
    return [acc_path, metrics_path, plot_path]


def load_accuracy_csv(path) -> MetricsLedger:
    """Rebuild a ledger from an acc-matrix CSV; metrics recomputed from it
    match the originals exactly."""
    rows: dict[int, dict[int, float]] = {}
    sizes: dict[int, int] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            t, k = int(rec["after_task"]), int(rec["eval_task"])
            rows.setdefault(t, {})[k] = float(rec["accuracy"])
            sizes[k] = int(rec["test_size"])
    ledger = MetricsLedger()
    for t in sorted(rows):
        row = [rows[t][k] for k in sorted(rows[t])]
        ledger.add_task_row(row, [sizes[k] for k in range(len(row))])
    return ledger


def _plot_accuracy(ledger: MetricsLedger, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    phases = list(range(1, ledger.n_tasks + 1))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(phases, [ledger.overall_accuracy(t) for t in range(ledger.n_tasks)],
            marker="o", color="black", label="all seen classes")
    for k in range(ledger.n_tasks):
        ys = [ledger.acc[t][k] for t in range(k, ledger.n_tasks)]
        ax.plot(phases[k:], ys, marker=".", alpha=0.5, label=f"task {k + 1}")
    ax.set_xlabel("after task")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    ax.set_xticks(phases)
    if ledger.n_tasks <= 10:
        ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
