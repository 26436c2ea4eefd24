"""Utterance decoding, accuracy, confusion matrices, run statistics and
significance testing."""

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import InvalidArgument


def majority_vote(frame_labels):
    """Most frequent frame label; ties go to the lowest class index."""
    frame_labels = np.asarray(frame_labels).ravel()
    if frame_labels.size == 0:
        raise InvalidArgument("majority_vote of an empty sequence")
    counts = np.bincount(frame_labels.astype(np.int64))
    return int(np.argmax(counts))


def utterance_accuracy(predictions, labels):
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise InvalidArgument(f"{predictions.shape[0]} predictions vs {labels.shape[0]} labels")
    if labels.size == 0:
        raise InvalidArgument("accuracy of an empty set")
    return float(np.mean(predictions == labels))


def confusion_matrix(predictions, labels, num_classes=10):
    """Counts with the true class on rows and the predicted class on columns."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise InvalidArgument(f"{predictions.shape[0]} predictions vs {labels.shape[0]} labels")
    out = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(out, (labels, predictions), 1)
    return out


def run_stats(accuracies):
    """``(mean, std)`` with the n-1 sample std; std is None for a single run."""
    a = np.asarray(accuracies, dtype=np.float64)
    if a.size == 0:
        raise InvalidArgument("run_stats of no runs")
    return float(a.mean()), (float(a.std(ddof=1)) if a.size > 1 else None)


def per_subject_accuracy(runs):
    """Aggregate per-subject accuracy over runs.

    ``runs`` is a list of ``(predictions, labels, subjects)`` triples, one per
    run. Returns ``{subject: (mean, std)}`` across runs.
    """
    if not runs:
        raise InvalidArgument("per_subject_accuracy of no runs")
    per = {}
    for preds, labels, subjects in runs:
        preds, labels, subjects = map(np.asarray, (preds, labels, subjects))
        for s in np.unique(subjects):
            sel = subjects == s
            per.setdefault(int(s), []).append(float(np.mean(preds[sel] == labels[sel])))
    return {s: run_stats(v) for s, v in sorted(per.items())}


@dataclass
class SignificanceResult:
    welch_t: float
    welch_p: float
    mannwhitney_u: float
    mannwhitney_p: float
    alpha: float = 0.05

    @property
    def significant(self):
        return self.welch_p < self.alpha


def welch_test(a, b):
    """Two-sided Welch t-test, defined also when both samples are constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    va = a.var(ddof=1) / a.size
    vb = b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    if va + vb == 0:
        return (0.0, 1.0) if diff == 0 else (float(np.copysign(np.inf, diff)), 0.0)
    res = stats.ttest_ind(a, b, equal_var=False)
    return float(res.statistic), float(res.pvalue)


def significance_test(runs_a, runs_b, alpha=0.05):
    """Welch t-test (decides the flag) with Mann-Whitney U reported alongside."""
    a = np.asarray(runs_a, dtype=np.float64)
    b = np.asarray(runs_b, dtype=np.float64)
    if a.size < 3 or b.size < 3:
        raise InvalidArgument(f"significance test needs >= 3 runs each, got {a.size} and {b.size}")
    t, p = welch_test(a, b)
    if np.ptp(np.concatenate([a, b])) == 0:
        u, pu = a.size * b.size / 2.0, 1.0
    else:
        mw = stats.mannwhitneyu(a, b, alternative="two-sided")
        u, pu = float(mw.statistic), float(mw.pvalue)
    return SignificanceResult(t, p, u, pu, alpha)

