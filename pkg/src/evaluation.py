""" Grading metrics: confusion matrices, accuracy / balanced accuracy, class-wise and weighted
precision / recall / F1, the binary KL>=2 collapse and quadratic weighted kappa agreement. """
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from sklearn.metrics import cohen_kappa_score, confusion_matrix

from exceptions import EvaluationError

logger = logging.getLogger(__name__)

N_KL_GRADES = 5
N_JSN_GRADES = 4
POSITIVE_FROM = 2


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """ counts[t][p]: knees of true grade t predicted as grade p. """

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1] or np.any(counts < 0):
            raise EvaluationError(f"confusion counts must be a square non-negative grid, got shape {counts.shape}")
        object.__setattr__(self, "counts", counts)

    @property
    def n(self):
        return int(self.counts.sum())

    @property
    def n_classes(self):
        return int(self.counts.shape[0])

    def transpose(self):
        return ConfusionMatrix(self.counts.T.copy())

    def to_document(self):
        return {"counts": self.counts.tolist(), "n": self.n}


def _as_grades(values, n_classes, name):
    grades = np.asarray(list(values))
    if grades.size and not np.issubdtype(grades.dtype, np.integer):
        if not np.all(np.equal(np.mod(grades, 1), 0)):
            raise EvaluationError(f"{name} must hold integer grades")
        grades = grades.astype(np.int64)
    if grades.size and (grades.min() < 0 or grades.max() >= n_classes):
        raise EvaluationError(f"{name} holds a grade outside 0-{n_classes - 1}")
    return grades.astype(np.int64)


def _paired(a, b, n_classes, names):
    a = _as_grades(a, n_classes, names[0])
    b = _as_grades(b, n_classes, names[1])
    if a.size != b.size:
        raise EvaluationError(f"{names[0]} and {names[1]} differ in length ({a.size} vs {b.size})")
    if a.size == 0:
        raise EvaluationError("nothing to evaluate: empty grade lists")
    return a, b


def confusion(preds, labels, n_classes=N_KL_GRADES):
    """ Counts (true, predicted) grade pairs into an n_classes x n_classes matrix. """

    preds, labels = _paired(preds, labels, n_classes, ("preds", "labels"))
    return ConfusionMatrix(confusion_matrix(labels, preds, labels=list(range(n_classes))))


def _ratio(num, den):
    return np.divide(num, den, out=np.zeros_like(num, dtype=np.float64), where=den > 0)


def summary_metrics(cm):
    """ Multi-class summary of a confusion matrix.

    Returns
    -------
    Dictionary with accuracy, balanced_accuracy, per_class precision/recall/F1/support,
    weighted and macro averages and one_grade_off_rate (None when the matrix is diagonal)
    """

    counts = cm.counts.astype(np.float64)
    n = counts.sum()
    if n == 0:
        raise EvaluationError("empty confusion matrix")
    tp = np.diag(counts)
    support = counts.sum(axis=1)
    predicted = counts.sum(axis=0)
    precision = _ratio(tp, predicted)
    recall = _ratio(tp, support)
    f1 = _ratio(2 * precision * recall, precision + recall)
    weights = support / n
    present = support > 0
    seen = present | (predicted > 0)

    off_mass = n - tp.sum()
    t, p = np.indices(counts.shape)
    one_off = float(counts[np.abs(t - p) == 1].sum() / off_mass) if off_mass > 0 else None

    return {
        "n": int(n),
        "accuracy": float(tp.sum() / n),
        "balanced_accuracy": float(recall[present].mean()),
        "per_class": [
            {"grade": g, "precision": float(precision[g]), "recall": float(recall[g]),
             "f1": float(f1[g]), "support": int(support[g])}
            for g in range(cm.n_classes)
        ],
        "weighted_precision": float(np.sum(weights * precision)),
        "weighted_recall": float(np.sum(weights * recall)),
        "weighted_f1": float(np.sum(weights * f1)),
        "macro_precision": float(precision[seen].mean()),
        "macro_recall": float(recall[seen].mean()),
        "one_grade_off_rate": one_off,
    }


def binary_oa(preds_or_cm, labels=None, n_classes=N_KL_GRADES):
    """ Collapses grades to KL>=2 (positive) vs KL<=1 and scores the positive class.

    Parameters
    ----------
    preds_or_cm : <class 'ConfusionMatrix'> or sequence
        a confusion matrix, or predicted grades together with `labels`
    """

    if isinstance(preds_or_cm, ConfusionMatrix):
        cm = preds_or_cm
    else:
        if labels is None:
            raise EvaluationError("binary_oa needs labels when given predictions")
        cm = confusion(preds_or_cm, labels, n_classes)
    counts = cm.counts
    if counts.sum() == 0:
        raise EvaluationError("empty confusion matrix")
    pos = slice(POSITIVE_FROM, None)
    neg = slice(0, POSITIVE_FROM)
    tp, fp = int(counts[pos, pos].sum()), int(counts[neg, pos].sum())
    fn, tn = int(counts[pos, neg].sum()), int(counts[neg, neg].sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"precision": precision, "recall": recall, "f1": f1,
            "accuracy": (tp + tn) / (tp + fp + fn + tn),
            "table": {"tp": tp, "fp": fp, "fn": fn, "tn": tn}}


def qwk(ra, rb, n_classes=N_KL_GRADES):
    """ Quadratic weighted kappa between two raters.

    When the expected disagreement is zero (both raters constant on the same
    grade) the result is 1.0 if they also agree on every case, else 0.0.
    """

    ra, rb = _paired(ra, rb, n_classes, ("ra", "rb"))
    grades = np.arange(n_classes)
    weights = (grades[:, None] - grades[None, :]) ** 2
    hist_a = np.bincount(ra, minlength=n_classes)
    hist_b = np.bincount(rb, minlength=n_classes)
    expected = np.outer(hist_a, hist_b) / ra.size
    if np.sum(weights * expected) == 0:
        return 1.0 if np.array_equal(ra, rb) else 0.0
    return float(cohen_kappa_score(ra, rb, labels=list(range(n_classes)), weights="quadratic"))


@dataclass(frozen=True, eq=False)
class AgreementTable:
    """ Pairwise quadratic weighted kappa between raters.

    Methods
    -------
    distances():
        1 / kappa per pair, None where kappa <= 0 (unconnected)
    """

    rater_ids: tuple
    kappa: np.ndarray

    def distances(self):
        size = len(self.rater_ids)
        return [[(1.0 / self.kappa[i, j] if self.kappa[i, j] > 0 else None) for j in range(size)]
                for i in range(size)]

    def to_document(self):
        return {"rater_ids": list(self.rater_ids), "kappa": self.kappa.tolist(), "distance": self.distances()}


def _aligned_ratings(ratings):
    """ Rater -> grade array over a shared, sorted case order. """

    aligned = {}
    cases = None
    for rater, values in ratings.items():
        if isinstance(values, dict):
            keys = sorted(values)
            if cases is None:
                cases = keys
            elif keys != cases:
                raise EvaluationError(f"rater {rater!r} rated a different case set")
            aligned[rater] = [values[c] for c in cases]
        else:
            values = list(values)
            if cases is None:
                cases = list(range(len(values)))
            elif len(values) != len(cases):
                raise EvaluationError(f"rater {rater!r} rated {len(values)} cases, expected {len(cases)}")
            aligned[rater] = values
    return aligned


def agreement_table(ratings, n_classes=N_KL_GRADES, workers=1):
    """ Pairwise QWK over the raters' common case set. """

    if len(ratings) < 2:
        raise EvaluationError("agreement needs at least two raters")
    aligned = _aligned_ratings(ratings)
    rater_ids = tuple(aligned)
    pairs = list(combinations(range(len(rater_ids)), 2))

    def score(pair):
        i, j = pair
        return qwk(aligned[rater_ids[i]], aligned[rater_ids[j]], n_classes)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(score, pairs))
    else:
        scores = [score(pair) for pair in pairs]

    kappa = np.eye(len(rater_ids))
    for (i, j), value in zip(pairs, scores):
        kappa[i, j] = kappa[j, i] = value
    logger.info("Agreement over %d raters and %d pairs", len(rater_ids), len(pairs))
    return AgreementTable(rater_ids, kappa)


def jsn_metrics(preds, labels):
    """ Summary metrics for 4-class JSN grades. """

    return summary_metrics(confusion(preds, labels, N_JSN_GRADES))
