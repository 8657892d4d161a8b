"""Grouped, robust and ranking metrics plus cluster/subclass alignment."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

TRUE_SUBCLASS = "true_subclass"
CLUSTER = "cluster"
SUPERCLASS = "superclass"


@dataclass
class MetricReport:
    overall: float
    per_group: np.ndarray  # NaN for empty groups
    robust: float
    group_kind: str
    weighted: bool = False
    empty_groups: list = field(default_factory=list)

    def rows(self, prefix=()):
        """Flat (…prefix, group_kind, group, metric, value) rows."""
        out = [(*prefix, self.group_kind, "overall", "accuracy", self.overall),
               (*prefix, self.group_kind, "robust", "accuracy", self.robust)]
        for g, v in enumerate(self.per_group):
            out.append((*prefix, self.group_kind, str(g), "accuracy", v))
        return out


def grouped_accuracy(preds, dataset, groups, weights=None, group_kind: str = CLUSTER,
                     n_groups: int | None = None) -> MetricReport:
    """Per-group (optionally weighted) accuracy; robust is the minimum over nonempty groups."""
    preds = np.asarray(preds)
    groups = np.asarray(groups, dtype=int)
    correct = (preds == dataset.y).astype(float)
    w = np.ones(len(preds)) if weights is None else np.asarray(weights, dtype=float)
    G = int(groups.max()) + 1 if n_groups is None else n_groups
    num = np.bincount(groups, weights=w * correct, minlength=G)
    den = np.bincount(groups, weights=w, minlength=G)
    empty = [int(g) for g in np.flatnonzero(den == 0)]
    with np.errstate(invalid="ignore", divide="ignore"):
        per = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)
    overall = float(np.dot(w, correct) / w.sum())
    return MetricReport(overall, per, float(np.nanmin(per)), group_kind,
                        weights is not None, empty)


def auroc(scores, labels, restrict=None) -> float:
    """Mann-Whitney AUROC of ``scores`` for positive label 1; tied pairs count 1/2."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    if restrict is not None:
        mask = np.asarray(restrict, dtype=bool)
        scores, labels = scores[mask], labels[mask]
    n_pos = int(np.sum(labels == 1))
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both positive and negative examples")
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def worst_restricted_auroc(scores, y, groups, designated: int):
    """Per-group AUROC of each designated-superclass group against the other superclass.

    Returns (worst, {group: auroc}).
    """
    y = np.asarray(y)
    groups = np.asarray(groups)
    positive = int(1 - designated)
    per = {}
    for c in np.unique(groups[y == designated]):
        mask = ((groups == c) & (y == designated)) | (y != designated)
        per[int(c)] = auroc(scores, (y == positive).astype(int), restrict=mask)
    return min(per.values()), per


def average_precision(scores, labels) -> float:
    """Step-interpolated AP: sum over recall increments of precision at that threshold."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    n_pos = labels.sum()
    if n_pos == 0:
        raise ValueError("average precision needs a positive example")
    order = np.argsort(-scores, kind="mergesort")
    s, l = scores[order], labels[order]
    # thresholds at the last index of each run of tied scores
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(l)[last]
    precision = tp / (last + 1)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


@dataclass
class Alignment:
    subclass: int
    cluster: int
    precision: float
    recall: float
    prevalence: float  # subclass share of its superclass (or of all data)


def cluster_alignment(clusters, subclasses, superclasses=None) -> list[Alignment]:
    """For each true subclass, the cluster with the best F1 and its precision/recall.

    Prevalence is the subclass share within its superclass when superclass
    labels are supplied, otherwise within the whole dataset.
    """
    clusters = np.asarray(clusters, dtype=int)
    subclasses = np.asarray(subclasses, dtype=int)
    K, C = clusters.max() + 1, subclasses.max() + 1
    table = np.zeros((C, K))
    np.add.at(table, (subclasses, clusters), 1)
    cluster_sizes = table.sum(axis=0)
    subclass_sizes = table.sum(axis=1)
    out = []
    for c in range(C):
        if subclass_sizes[c] == 0:
            continue
        with np.errstate(invalid="ignore", divide="ignore"):
            prec = np.where(cluster_sizes > 0, table[c] / np.maximum(cluster_sizes, 1), 0.0)
        rec = table[c] / subclass_sizes[c]
        with np.errstate(invalid="ignore"):
            f1 = np.where(prec + rec > 0, 2 * prec * rec / np.where(prec + rec > 0, prec + rec, 1), 0.0)
        best = int(np.argmax(f1))
        if superclasses is not None:
            sup = np.asarray(superclasses)
            b = sup[subclasses == c][0]
            prevalence = subclass_sizes[c] / np.sum(sup == b)
        else:
            prevalence = subclass_sizes[c] / len(subclasses)
        out.append(Alignment(c, best, float(prec[best]), float(rec[best]), float(prevalence)))
    return out


def scaa(preds, dataset) -> float:
    """Unweighted mean of per-subclass accuracies."""
    report = grouped_accuracy(preds, dataset, dataset.z, group_kind=TRUE_SUBCLASS)
    return float(np.nanmean(report.per_group))


def split_purity(acc_high: float, acc_low: float):
    """Subclass concentrations of the correct / incorrect split of a two-subclass superclass.

    With equal-prior subclasses at accuracies x and y, the correctly
    classified examples are x / (x + y) from the first subclass and the
    misclassified ones (1 - y) / ((1 - x) + (1 - y)) from the second. An
    undefined fraction (no correct or no incorrect examples) is NaN.
    """
    x, y = float(acc_high), float(acc_low)
    correct = x / (x + y) if x + y > 0 else float("nan")
    err = (1 - x) + (1 - y)
    incorrect = (1 - y) / err if err > 0 else float("nan")
    return correct, incorrect


def misclass_split_diagnostic(preds, dataset, superclass: int):
    """split_purity from the observed accuracies of the two subclasses of ``superclass``.

    The higher-accuracy subclass plays the role of x.
    """
    if dataset.n_classes != 2:
        raise ValueError("diagnostic defined for binary tasks")
    z = dataset.z
    mask = dataset.y == superclass
    subs = np.unique(z[mask])
    if len(subs) != 2:
        raise ValueError("superclass must contain exactly two subclasses")
    preds = np.asarray(preds)
    accs = sorted((float(np.mean(preds[mask & (z == c)] == superclass)) for c in subs), reverse=True)
    return split_purity(*accs)


def ci95(values):
    """(mean, half-width) with half-width = 1.96 * sd / sqrt(trials)."""
    v = np.asarray(values, dtype=float)
    if len(v) < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(1.96 * v.std(ddof=1) / np.sqrt(len(v)))
