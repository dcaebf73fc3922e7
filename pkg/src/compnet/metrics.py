"""Figures of merit: overall/average accuracy, ROC AUC, average rank across
methods, the one-sided Wilcoxon signed-rank test, and the comparison table
emitted after detection experiments."""

import math
from dataclasses import dataclass

import numpy as np


def overall_accuracy(preds, labels):
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.size == 0:
        raise ValueError("preds and labels must be equal-length and nonempty")
    return float((preds == labels).mean())


def average_accuracy(preds, labels):
    """Unweighted mean of per-class recalls."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.size == 0:
        raise ValueError("preds and labels must be equal-length and nonempty")
    recalls = []
    for cls in np.unique(labels):
        mask = labels == cls
        recalls.append(float((preds[mask] == cls).mean()))
    return float(np.mean(recalls))


def _midranks(values):
    values = np.asarray(values, dtype=float)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(scores, labels):
    """Probability that a random anomalous score exceeds a random normal
    score, ties counted half (the rank/Mann-Whitney formulation). Labels:
    1 = anomalous, 0 = normal."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = labels == 1
    neg = labels == 0
    n_pos = int(pos.sum())
    n_neg = int(neg.sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: both classes must be present")
    ranks = _midranks(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class MethodResults:
    """Per-class metric values for one method; class order is shared across
    all compared methods."""

    name: str
    values: list

    def __post_init__(self):
        self.values = [float(v) for v in self.values]
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError("metric values must be finite")


def average_rank(results):
    """Per class, rank methods with 1 = best (higher metric = better), ties
    sharing the mean of their rank span; average the ranks over classes.
    Returns {method name: average rank}."""
    if len(results) < 2:
        raise ValueError("need at least two methods to rank")
    lengths = {len(r.values) for r in results}
    if len(lengths) != 1:
        raise ValueError("methods must cover identical class lists")
    (num_classes,) = lengths
    if num_classes == 0:
        raise ValueError("need at least one class")
    totals = {r.name: 0.0 for r in results}
    for c in range(num_classes):
        column = np.array([r.values[c] for r in results])
        ranks = _midranks(-column)  # negate: highest value gets rank 1
        for r, rank in zip(results, ranks):
            totals[r.name] += rank
    return {name: total / num_classes for name, total in totals.items()}


def _signed_rank_statistic(a, b):
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    d = d[d != 0.0]
    if d.size == 0:
        raise ValueError("no information: all differences are zero")
    if d.size < 5:
        raise ValueError("need at least 5 nonzero differences")
    ranks = _midranks(np.abs(d))
    return float(ranks[d > 0.0].sum()), ranks, d


def _exact_upper_tail(ranks, w_observed):
    """P(W+ >= w_observed) over all 2^n sign assignments, computed by
    dynamic programming over the (doubled, integral) rank sums."""
    doubled = np.round(2.0 * ranks).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    threshold = int(math.ceil(round(2.0 * w_observed, 9)))
    return counts[threshold:].sum() / counts.sum()


def _normal_upper_tail(ranks, w_observed):
    n = len(ranks)
    mean = n * (n + 1) / 4.0
    variance = n * (n + 1) * (2 * n + 1) / 24.0
    # tie correction: each group of t tied ranks removes (t^3 - t)/48
    _, tie_counts = np.unique(ranks, return_counts=True)
    variance -= ((tie_counts ** 3 - tie_counts) / 48.0).sum()
    z = (w_observed - mean - 0.5) / math.sqrt(variance)
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def wilcoxon_one_sided(a, b, method="auto"):
    """One-sided Wilcoxon signed-rank p-value for H1: a > b.

    Zero differences are dropped; needs at least 5 remaining. Exact tail by
    sign-assignment enumeration for n <= 20 (or method='exact'), normal
    approximation with continuity correction beyond that.
    """
    w_plus, ranks, _ = _signed_rank_statistic(a, b)
    if method not in ("auto", "exact", "normal"):
        raise ValueError(f"unknown method {method!r}")
    use_exact = method == "exact" or (method == "auto" and len(ranks) <= 20)
    if use_exact:
        return float(_exact_upper_tail(ranks, w_plus))
    return float(_normal_upper_tail(ranks, w_plus))


def detection_table(per_method, class_names, p_floor=None):
    """Comparison table: one AUC row per class, then average-rank and
    Wilcoxon-p footer rows testing the best-ranking method against each
    other method ('--' marks the best method itself).

    per_method: {method: [auc per class]} preserving insertion order.
    Returns (text, csv_rows).
    """
    methods = list(per_method)
    results = [MethodResults(m, per_method[m]) for m in methods]
    ranks = average_rank(results) if len(methods) > 1 else {methods[0]: 1.0}
    best = min(ranks, key=ranks.get)
    p_values = {}
    for m in methods:
        if m == best:
            p_values[m] = None
            continue
        try:
            p_values[m] = wilcoxon_one_sided(per_method[best], per_method[m])
        except ValueError:
            p_values[m] = float("nan")

    header = ["Class"] + methods
    rows = []
    for c, cls in enumerate(class_names):
        rows.append([cls] + [f"{per_method[m][c]:.3f}" for m in methods])
    rows.append(["Avg. Rank"] + [f"{ranks[m]:.3f}" for m in methods])
    footer = []
    for m in methods:
        if p_values[m] is None:
            footer.append("--")
        elif math.isnan(p_values[m]):
            footer.append("n/a")
        else:
            footer.append(f"{p_values[m]:.3g}")
    rows.append(["Wilcoxon-p"] + footer)

    widths = [max(len(str(r[i])) for r in [header] + rows)
              for i in range(len(header))]
    def fmt(row):
        return "  ".join(str(v).ljust(w) for v, w in zip(row, widths)).rstrip()
    text = "\n".join([fmt(header)] + [fmt(r) for r in rows])
    csv_rows = [header] + rows
    return text, csv_rows
