"""Evaluation metrics for the three-class task.

Accuracy, balanced accuracy (mean per-class recall), one-vs-rest ROC/AUC
with micro and macro averaging, percentile-bootstrap confidence intervals,
and serialization of the evaluation report (text summary, per-class ROC
CSVs, per-sample probability CSV).

AUC is computed with the rank statistic using midranks for ties, which
equals the pairwise count (#concordant + 0.5 * #tied) / (P * N) exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import LABEL_NAMES
from .tensor import Rng

NUM_CLASSES = len(LABEL_NAMES)

# sentinel thresholds for the synthetic ROC endpoints
ROC_START = float("inf")
ROC_END = float("-inf")


def _check_pair(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if p.ndim != 1 or p.shape != y.shape:
        raise ValueError(f"preds shape {p.shape} vs labels shape {y.shape}")
    if p.size == 0:
        raise ValueError("empty input")
    for name, a in (("preds", p), ("labels", y)):
        if a.min() < 0 or a.max() >= NUM_CLASSES:
            raise ValueError(f"{name} outside [0, {NUM_CLASSES})")
    return p, y


def accuracy(preds, labels) -> float:
    p, y = _check_pair(preds, labels)
    return float((p == y).mean())


def balanced_accuracy(preds, labels) -> float:
    """Unweighted mean of per-class recall. Classes absent from the labels
    are excluded from the average (with a warning)."""
    p, y = _check_pair(preds, labels)
    recalls = []
    absent = []
    for c in range(NUM_CLASSES):
        mask = y == c
        if not mask.any():
            absent.append(LABEL_NAMES[c])
            continue
        recalls.append(float((p[mask] == c).mean()))
    if absent:
        warnings.warn(f"classes absent from labels excluded from recall "
                      f"average: {absent}", stacklevel=2)
    return float(np.mean(recalls))


def roc_auc(scores, labels) -> tuple[float, list[tuple[float, float, float]]]:
    """Binary AUC plus the ROC polyline.

    Returns (auc, points) where points is [(fpr, tpr, threshold), ...]
    starting at (0, 0, inf), one row per unique score threshold in
    descending order, and ending at (1, 1, -inf). A sample is predicted
    positive when its score >= threshold.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.ndim != 1 or y.shape != s.shape:
        raise ValueError(f"scores shape {s.shape} vs labels shape {y.shape}")
    if s.size == 0:
        raise ValueError("empty input")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary 0/1")
    pos = int((y == 1).sum())
    neg = int(y.size - pos)
    if pos == 0 or neg == 0:
        raise ValueError("AUC undefined: labels contain a single class")

    n = s.size
    order = np.argsort(s, kind="stable")
    ss = s[order]
    run_ends = np.r_[np.flatnonzero(ss[1:] != ss[:-1]) + 1, n]
    ranks = np.empty(n, dtype=np.float64)
    lo = 0
    for hi in run_ends:
        # midrank: mean of the 1-based ranks lo+1 .. hi
        ranks[order[lo:hi]] = 0.5 * (lo + hi + 1)
        lo = int(hi)
    auc = (ranks[y == 1].sum() - pos * (pos + 1) / 2.0) / (pos * neg)

    desc = order[::-1]
    yy = y[desc]
    sd = ss[::-1]
    tp = np.cumsum(yy == 1)
    fp = np.cumsum(yy == 0)
    last = np.r_[sd[1:] != sd[:-1], True]
    points = [(0.0, 0.0, ROC_START)]
    for i in np.flatnonzero(last):
        points.append((fp[i] / neg, tp[i] / pos, float(sd[i])))
    points.append((1.0, 1.0, ROC_END))
    return float(auc), points


@dataclass(frozen=True)
class MulticlassAuc:
    per_class: tuple           # one float per class, None where undefined
    micro: float
    macro: float
    roc_points: tuple          # per class, () where undefined


def multiclass_auc(probs, labels) -> MulticlassAuc:
    """One-vs-rest AUCs. Micro pools the per-class (probability, indicator)
    pairs into one binary problem of 3N samples; macro is the unweighted
    mean over classes that appear in the labels."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if p.ndim != 2 or p.shape[1] != NUM_CLASSES:
        raise ValueError(f"probs shape {p.shape}, expected (N, {NUM_CLASSES})")
    if y.shape != (p.shape[0],) or p.shape[0] == 0:
        raise ValueError("labels must match probs rows and be non-empty")
    if y.min() < 0 or y.max() >= NUM_CLASSES:
        raise ValueError(f"labels outside [0, {NUM_CLASSES})")
    if np.abs(p.sum(axis=1) - 1.0).max() > 1e-4:
        raise ValueError("probability rows must sum to 1 within 1e-4")

    per = []
    rocs = []
    undefined = []
    for c in range(NUM_CLASSES):
        yc = (y == c).astype(np.int64)
        if yc.min() == yc.max():
            per.append(None)
            rocs.append(())
            undefined.append(LABEL_NAMES[c])
            continue
        a, pts = roc_auc(p[:, c], yc)
        per.append(a)
        rocs.append(tuple(pts))
    defined = [a for a in per if a is not None]
    if not defined:
        raise ValueError("AUC undefined for every class")
    if undefined:
        warnings.warn(f"AUC undefined for {undefined}; macro averages the "
                      f"remaining classes", stacklevel=2)
    macro = float(np.mean(defined))

    pooled_scores = p.T.ravel()
    pooled_labels = np.concatenate(
        [(y == c).astype(np.int64) for c in range(NUM_CLASSES)])
    micro, _ = roc_auc(pooled_scores, pooled_labels)
    return MulticlassAuc(tuple(per), micro, macro, tuple(rocs))


def bootstrap_ci(records, metric_fn, rng: Rng, n_resamples: int = 1000,
                 alpha: float = 0.05) -> tuple[float, float]:
    """Percentile bootstrap interval for metric_fn over the records.

    Resamples with replacement; a resample on which metric_fn raises
    ValueError (undefined metric, e.g. a single-class draw) is redrawn.
    Each draw consumes its own RNG substream so the interval does not
    depend on evaluation order.
    """
    if n_resamples < 1:
        raise ValueError(f"n_resamples must be >= 1, got {n_resamples}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    recs = list(records)
    n = len(recs)
    if n == 0:
        raise ValueError("no records to resample")
    cap = 10 * n_resamples
    vals = []
    counter = 0
    while len(vals) < n_resamples:
        if counter >= cap:
            raise ValueError(
                f"bootstrap redraw cap exceeded: {counter} draws yielded "
                f"{len(vals)} defined values of {n_resamples} requested")
        idx = rng.stream("bootstrap", counter).integers(n, (n,))
        counter += 1
        try:
            vals.append(float(metric_fn([recs[i] for i in idx])))
        except ValueError:
            continue
    lo, hi = np.percentile(vals, [50.0 * alpha, 100.0 - 50.0 * alpha])
    return float(lo), float(hi)


@dataclass(frozen=True)
class SampleRecord:
    subject_id: str
    label: int
    probs: tuple            # one probability per class
    pred: int


def make_record(subject_id: str, label: int, probs) -> SampleRecord:
    p = tuple(float(v) for v in probs)
    if len(p) != NUM_CLASSES:
        raise ValueError(f"expected {NUM_CLASSES} probabilities, got {len(p)}")
    return SampleRecord(str(subject_id), int(label), p, int(np.argmax(p)))


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    balanced_accuracy: float
    auc_per_class: tuple
    micro_auc: float
    macro_auc: float
    intervals: dict          # metric key -> (lo, hi)
    records: tuple
    roc_points: tuple        # per class


def _rec_arrays(recs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    y = np.array([r.label for r in recs], dtype=np.int64)
    pred = np.array([r.pred for r in recs], dtype=np.int64)
    probs = np.array([r.probs for r in recs], dtype=np.float64)
    return y, pred, probs


def _quiet(fn):
    def wrapped(recs):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return fn(recs)
    return wrapped


def build_report(records, rng: Rng, n_resamples: int = 1000,
                 alpha: float = 0.05) -> EvalReport:
    """Point metrics plus bootstrap intervals.

    Interval keys: accuracy, balanced_accuracy, micro_auc, and, when every
    class appears in the records, auc_<class> per class and macro_auc.
    Per-class/macro intervals are omitted otherwise because resamples could
    never cover the missing class.
    """
    recs = tuple(records)
    if not recs:
        raise ValueError("no records")
    y, pred, probs = _rec_arrays(recs)
    acc = accuracy(pred, y)
    bal = balanced_accuracy(pred, y)
    mc = multiclass_auc(probs, y)
    all_defined = all(a is not None for a in mc.per_class)

    def acc_fn(rs):
        ly, lp, _ = _rec_arrays(rs)
        return accuracy(lp, ly)

    def bal_fn(rs):
        ly, lp, _ = _rec_arrays(rs)
        return balanced_accuracy(lp, ly)

    def micro_fn(rs):
        ly, _, lpr = _rec_arrays(rs)
        return multiclass_auc(lpr, ly).micro

    def macro_fn(rs):
        ly, _, lpr = _rec_arrays(rs)
        out = multiclass_auc(lpr, ly)
        if any(a is None for a in out.per_class):
            raise ValueError("resample misses a class")  # redrawn
        return out.macro

    def class_fn(c):
        def fn(rs):
            ly, _, lpr = _rec_arrays(rs)
            a, _ = roc_auc(lpr[:, c], (ly == c).astype(np.int64))
            return a
        return fn

    plan = [("accuracy", acc_fn), ("balanced_accuracy", bal_fn),
            ("micro_auc", micro_fn)]
    if all_defined:
        plan.append(("macro_auc", macro_fn))
        for c in range(NUM_CLASSES):
            plan.append((f"auc_{LABEL_NAMES[c].lower()}", class_fn(c)))
    intervals = {}
    for key, fn in plan:
        intervals[key] = bootstrap_ci(recs, _quiet(fn), rng.stream(key),
                                      n_resamples, alpha)
    return EvalReport(acc, bal, mc.per_class, mc.micro, mc.macro,
                      intervals, recs, mc.roc_points)


REPORT_KEYS = ("n_samples", "accuracy", "balanced_accuracy", "auc_cn",
               "auc_mci", "auc_ad", "micro_auc", "macro_auc")


def format_report(report: EvalReport) -> str:
    """Key = value lines (REPORT_KEYS order), interval appended when known."""
    def line(key, value):
        if value is None:
            body = f"{key} = undefined"
        else:
            body = f"{key} = {value:.6f}"
        ci = report.intervals.get(key)
        if ci is not None:
            body += f" ci95 = [{ci[0]:.6f}, {ci[1]:.6f}]"
        return body

    out = [f"n_samples = {len(report.records)}",
           line("accuracy", report.accuracy),
           line("balanced_accuracy", report.balanced_accuracy)]
    for c in range(NUM_CLASSES):
        out.append(line(f"auc_{LABEL_NAMES[c].lower()}",
                        report.auc_per_class[c]))
    out.append(line("micro_auc", report.micro_auc))
    out.append(line("macro_auc", report.macro_auc))
    return "\n".join(out) + "\n"


def write_report(report: EvalReport, path) -> Path:
    path = Path(path)
    path.write_text(format_report(report))
    return path


def export_roc(report: EvalReport, out_dir, prefix: str = "roc") -> list[Path]:
    """One CSV per defined class: fpr,tpr,threshold with fpr non-decreasing.
    Thresholds use repr formatting so the endpoints read inf / -inf."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for c in range(NUM_CLASSES):
        pts = report.roc_points[c]
        if not pts:
            continue
        lines = ["fpr,tpr,threshold"]
        lines += [f"{fpr:.6f},{tpr:.6f},{thr!r}" for fpr, tpr, thr in pts]
        path = out_dir / f"{prefix}_{LABEL_NAMES[c].lower()}.csv"
        path.write_text("\n".join(lines) + "\n")
        written.append(path)
    return written


def write_logits_csv(records, path) -> Path:
    """Per-sample probabilities: subject_id,label,p_cn,p_mci,p_ad,pred.
    Labels and predictions are written as class names."""
    lines = ["subject_id,label,p_cn,p_mci,p_ad,pred"]
    for r in records:
        probs = ",".join(f"{v:.6f}" for v in r.probs)
        lines.append(f"{r.subject_id},{LABEL_NAMES[r.label]},{probs},"
                     f"{LABEL_NAMES[r.pred]}")
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path
