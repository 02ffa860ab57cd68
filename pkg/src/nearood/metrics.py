"""Detection metrics computed from raw ID/OOD score arrays.

Conventions, pinned once for the whole package: scores are oriented so
higher means more in-distribution; ID is the positive class for AUROC,
AUPR-In, and the TPR operating point (AUPR-Out negates scores and swaps
roles); AUROC ties count 0.5 per pair; PR areas use step-wise
average-precision summation with tied scores grouped at one threshold;
operating thresholds are always attained score values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .errors import DataError, EmptyInput, LengthMismatch


def _scores(a, name: str) -> np.ndarray:
    v = np.asarray(a, dtype=np.float64)
    if v.ndim != 1:
        raise DataError(f"{name} must be 1-D")
    if v.size == 0:
        raise EmptyInput(f"{name} is empty")
    if not np.all(np.isfinite(v)):
        raise DataError(f"{name} contains non-finite scores")
    return v


def auroc(id_scores, ood_scores) -> float:
    """Probability that a random ID score exceeds a random OOD score,
    ties counted half: the Mann-Whitney statistic, via midranks."""
    pos = _scores(id_scores, "id_scores")
    neg = _scores(ood_scores, "ood_scores")
    combined = np.concatenate([pos, neg])
    order = np.argsort(combined, kind="stable")
    ranks = np.empty(combined.shape[0])
    sorted_scores = combined[order]
    i = 0
    while i < sorted_scores.shape[0]:
        j = i
        while j + 1 < sorted_scores.shape[0] and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum = ranks[: pos.shape[0]].sum()
    n, m = pos.shape[0], neg.shape[0]
    return (rank_sum - n * (n + 1) / 2.0) / (n * m)


def _aupr_id_positive(pos: np.ndarray, neg: np.ndarray) -> float:
    """Step-sum area under precision-recall, positives = high scores."""
    combined = np.concatenate([pos, neg])
    is_pos = np.concatenate([np.ones(pos.shape[0], bool), np.zeros(neg.shape[0], bool)])
    order = np.argsort(-combined, kind="stable")
    sorted_scores = combined[order]
    sorted_pos = is_pos[order]
    total_pos = pos.shape[0]
    area = 0.0
    recall_prev = 0.0
    tp = 0
    seen = 0
    i = 0
    while i < sorted_scores.shape[0]:
        j = i
        while j + 1 < sorted_scores.shape[0] and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        tp += int(sorted_pos[i : j + 1].sum())
        seen += j - i + 1
        recall = tp / total_pos
        precision = tp / seen
        area += (recall - recall_prev) * precision
        recall_prev = recall
        i = j + 1
    return area


def aupr(scores_pos, scores_neg, positive_is: str = "ID") -> float:
    """Area under the PR curve with ID ("ID") or OOD ("OOD") as positive.

    Arguments are always (id_scores, ood_scores); for AUPR-Out both are
    negated so OOD becomes the high-score positive class.
    """
    pos = _scores(scores_pos, "id_scores")
    neg = _scores(scores_neg, "ood_scores")
    if positive_is == "ID":
        return _aupr_id_positive(pos, neg)
    if positive_is == "OOD":
        return _aupr_id_positive(-neg, -pos)
    raise DataError(f"positive_is must be 'ID' or 'OOD', got {positive_is!r}")


def threshold_at_tpr(id_scores, target_tpr: float) -> float:
    """Largest attained threshold t with fraction(id_scores >= t) >= target."""
    pos = _scores(id_scores, "id_scores")
    if not 0.0 < target_tpr <= 1.0:
        raise DataError(f"target_tpr must be in (0, 1], got {target_tpr}")
    n = pos.shape[0]
    k = math.ceil(n * target_tpr)
    # Guard the ceil against float dust so k is the smallest count whose
    # achieved fraction clears the target under the same float comparison.
    while k > 1 and (k - 1) / n >= target_tpr:
        k -= 1
    while k < n and k / n < target_tpr:
        k += 1
    return float(np.sort(pos)[n - k])


def precision_f1_at(threshold: float, id_scores, ood_scores) -> tuple[float, float, float]:
    """(precision, recall, f1) at ``score >= threshold`` with ID positive."""
    pos = _scores(id_scores, "id_scores")
    neg = _scores(ood_scores, "ood_scores")
    tp = int(np.sum(pos >= threshold))
    fp = int(np.sum(neg >= threshold))
    fn = pos.shape[0] - tp
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn)
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def id_accuracy(predictions, labels) -> float:
    """Exact-match fraction. ``predictions`` is either a class-index array
    or a logits matrix (argmax, ties to the lowest class index)."""
    y = np.asarray(labels, dtype=np.int64)
    pred = np.asarray(predictions)
    if pred.ndim == 2:
        pred = pred.argmax(axis=1)
    pred = pred.astype(np.int64)
    if pred.shape != y.shape:
        raise LengthMismatch(f"{pred.shape[0]} predictions vs {y.shape[0]} labels")
    if y.size == 0:
        raise EmptyInput("no labels to score")
    return float(np.mean(pred == y))


@dataclass(frozen=True)
class EvalReport:
    """One method row of the evaluation suite.

    Counts are stored as floats so fold-aggregated reports (field-wise
    means across folds) share the type. ``id_accuracy`` is None for score
    files that carry no classifier predictions.
    """

    method: str
    source_tag: str
    n_id: float
    n_ood: float
    auroc: float
    aupr_in: float
    aupr_out: float
    target_tpr: float
    threshold_at_tpr: float
    precision_at_tpr: float
    recall_at_tpr: float
    f1_at_tpr: float
    id_accuracy: float | None = None

    _NUMERIC = (
        "n_id", "n_ood", "auroc", "aupr_in", "aupr_out", "target_tpr",
        "threshold_at_tpr", "precision_at_tpr", "recall_at_tpr", "f1_at_tpr",
        "id_accuracy",
    )


def evaluate_scores(
    id_scores,
    ood_scores,
    target_tpr: float = 0.95,
    method: str = "",
    source_tag: str = "",
    accuracy: float | None = None,
) -> EvalReport:
    """Run the full metric suite on one pair of score arrays."""
    threshold = threshold_at_tpr(id_scores, target_tpr)
    precision, recall, f1 = precision_f1_at(threshold, id_scores, ood_scores)
    return EvalReport(
        method=method,
        source_tag=source_tag,
        n_id=float(len(id_scores)),
        n_ood=float(len(ood_scores)),
        auroc=auroc(id_scores, ood_scores),
        aupr_in=aupr(id_scores, ood_scores, "ID"),
        aupr_out=aupr(id_scores, ood_scores, "OOD"),
        target_tpr=target_tpr,
        threshold_at_tpr=threshold,
        precision_at_tpr=precision,
        recall_at_tpr=recall,
        f1_at_tpr=f1,
        id_accuracy=accuracy,
    )


def aggregate_reports(reports: list[EvalReport]) -> EvalReport:
    """Field-wise mean across fold reports (method/source from the first)."""
    if not reports:
        raise EmptyInput("no reports to aggregate")
    first = reports[0]
    means = {}
    for name in EvalReport._NUMERIC:
        values = [getattr(r, name) for r in reports]
        if any(v is None for v in values):
            means[name] = None
        else:
            means[name] = float(np.mean(values))
    return replace(first, **means)


# ---------------------------------------------------------------------------
# Report files and the Table-1-style text table.
# ---------------------------------------------------------------------------

_REPORT_MAGIC = "nearood-report 1"


def save_report(report: EvalReport, path) -> None:
    lines = [_REPORT_MAGIC]
    lines.append("# precision/recall/F1 use ID as the positive class at the TPR target")
    lines.append(f"method {report.method}")
    lines.append(f"source_tag {report.source_tag}")
    for name in EvalReport._NUMERIC:
        value = getattr(report, name)
        lines.append(f"{name} {'none' if value is None else format(value, '.17g')}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_report(path) -> EvalReport:
    path = Path(path)
    if not path.exists():
        raise DataError(f"report file not found: {path}")
    lines = path.read_text().splitlines()
    if not lines or lines[0] != _REPORT_MAGIC:
        raise DataError(f"{path} is not a report file")
    raw: dict[str, str] = {}
    for line in lines[1:]:
        if line.startswith("#") or not line.strip():
            continue
        key, _, value = line.partition(" ")
        raw[key] = value
    try:
        kwargs = {"method": raw.get("method", ""), "source_tag": raw.get("source_tag", "")}
        for name in EvalReport._NUMERIC:
            kwargs[name] = None if raw[name] == "none" else float(raw[name])
        return EvalReport(**kwargs)
    except (KeyError, ValueError) as exc:
        raise DataError(f"malformed report file {path}: {exc}") from exc


def format_report_table(reports: list[EvalReport]) -> str:
    """Aligned text table, one row per method (the Table-1 layout)."""
    header = (
        f"{'method':<8} {'AUROC':>8} {'AUPR-In':>8} {'AUPR-Out':>9} "
        f"{'Prec@TPR':>9} {'F1@TPR':>8}"
    )
    rows = [header]
    for r in reports:
        rows.append(
            f"{r.method:<8} {r.auroc:>8.4f} {r.aupr_in:>8.4f} {r.aupr_out:>9.4f} "
            f"{r.precision_at_tpr:>9.4f} {r.f1_at_tpr:>8.4f}"
        )
    return "\n".join(rows) + "\n"
