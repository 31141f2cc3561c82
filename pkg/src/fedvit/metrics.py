"""AUC and the local-test / new-test evaluation protocols."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class UndefinedMetricError(ValueError):
    pass


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg), ties counted one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.size} vs {y.size}")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != y.size:
        raise ValueError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUC needs both classes, got {n_pos} positive / {n_neg} negative")
    # midranks, 1-based
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    _, first, counts = np.unique(sorted_s, return_index=True, return_counts=True)
    mid = first + (counts + 1) / 2.0
    ranks = np.empty_like(s)
    ranks[order] = np.repeat(mid, counts)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def positive_scores(model, images) -> np.ndarray:
    return model.predict_proba(images)[:, 1]


def local_test(clients: Sequence) -> list[float]:
    """Each client's own model scored on its own local test set."""
    return [auc(positive_scores(c.model, c.shard.test_x), c.shard.test_y) for c in clients]


def ensemble_scores(models: Sequence, images) -> np.ndarray:
    if not models:
        raise ValueError("ensemble needs at least one model")
    total = None
    for m in models:
        s = positive_scores(m, images).astype(np.float64)
        total = s if total is None else total + s
    return total / len(models)


def new_test(clients: Sequence, images, labels) -> float:
    """AUC of the client-averaged positive-class probability."""
    return auc(ensemble_scores([c.model for c in clients], images), labels)


@dataclass
class EvalResult:
    local_auc: list[float]
    new_auc: float
    counts: list[int] = field(default_factory=list)

    @property
    def mean_local_auc(self) -> float:
        return float(np.mean(self.local_auc))


CSV_HEADER = ("round", "client_id", "split", "metric", "value")


def metric_rows(report) -> list[tuple]:
    """Flatten a RoundReport into metrics-CSV rows."""
    r = report.round
    rows = []
    for j, (ce, con, a) in enumerate(zip(report.ce_loss, report.con_loss, report.local_auc)):
        rows.append((r, j, "train", "ce_loss", ce))
        rows.append((r, j, "train", "con_loss", con))
        rows.append((r, j, "local_test", "auc", a))
    rows.append((r, "*", "new_test", "auc", report.new_auc))
    return rows


def write_metrics_csv(path, reports: Iterable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for rep in reports:
            for r, j, split, metric, value in metric_rows(rep):
                w.writerow((r, j, split, metric, f"{value:.6f}"))
