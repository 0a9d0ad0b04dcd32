"""Discrimination metrics, operating-point selection and encounter-level confusion."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .cohort import binary_imv_label

DEFAULT_TARGET_SENSITIVITY = 0.60


class MetricError(ValueError):
    pass


def _as_arrays(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel().astype(int)
    if s.shape != y.shape:
        raise MetricError("scores and labels differ in length")
    if np.any((y != 0) & (y != 1)):
        raise MetricError("labels must be 0/1")
    return s, y


def average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    _, inv, counts = np.unique(x, return_inverse=True, return_counts=True)
    start = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return (start + (counts + 1) / 2.0)[inv]


def auroc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative (ties count half)."""
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs both classes")
    r = average_ranks(s)
    u = r[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion_at(scores, labels, threshold: float) -> ConfusionCounts:
    """Counts with positive calls at ``score >= threshold``."""
    s, y = _as_arrays(scores, labels)
    call = s >= threshold
    return ConfusionCounts(
        tp=int(np.sum(call & (y == 1))),
        fp=int(np.sum(call & (y == 0))),
        fn=int(np.sum(~call & (y == 1))),
        tn=int(np.sum(~call & (y == 0))),
    )


@dataclass
class RocCurve:
    # (threshold, sensitivity, false positive rate), thresholds decreasing
    points: list[tuple[float, float, float]]
    auroc: float

    def trapezoid_area(self) -> float:
        fpr = np.array([p[2] for p in self.points])
        tpr = np.array([p[1] for p in self.points])
        return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "sensitivity", "fpr"])
        for thr, sens, fpr in self.points:
            w.writerow([repr(float(thr)), repr(float(sens)), repr(float(fpr))])
        return buf.getvalue()


def roc_curve(scores, labels) -> RocCurve:
    """ROC points at every observed score plus +inf."""
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC needs both classes")
    thr = np.concatenate([[np.inf], np.unique(s)[::-1]])
    pos = np.sort(s[y == 1])
    neg = np.sort(s[y == 0])
    tp = n_pos - np.searchsorted(pos, thr, side="left")
    fp = n_neg - np.searchsorted(neg, thr, side="left")
    points = [(float(t), a / n_pos, b / n_neg) for t, a, b in zip(thr, tp, fp)]
    return RocCurve(points, auroc(s, y))


def select_threshold(
    val_scores, val_labels, target_sensitivity: float = DEFAULT_TARGET_SENSITIVITY
) -> float:
    """Largest candidate threshold whose validation sensitivity reaches the target.

    Candidates are the observed scores plus +inf. Among thresholds meeting the
    target the largest one has the highest specificity.
    """
    s, y = _as_arrays(val_scores, val_labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("threshold selection needs validation positives")
    if not 0.0 <= target_sensitivity <= 1.0:
        raise MetricError("target sensitivity must be in [0, 1]")
    cand = np.concatenate([[np.inf], np.unique(s)[::-1]])
    pos = np.sort(s[y == 1])
    sens = (n_pos - np.searchsorted(pos, cand, side="left")) / n_pos
    ok = np.flatnonzero(sens >= target_sensitivity)
    return float(cand[ok[0]])


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den else None


@dataclass
class EvalReport:
    auroc: Optional[float]
    threshold: Optional[float]
    sensitivity: Optional[float]
    specificity: Optional[float]
    ppv: Optional[float]
    balanced_accuracy: Optional[float]
    counts: ConfusionCounts
    roc: list[tuple[float, float, float]] = field(default_factory=list)
    encounter_counts: Optional[ConfusionCounts] = None
    encounter_metrics: Optional[dict] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["roc"] = [list(p) for p in self.roc]
        return d

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, float) and math.isinf(v):
                return "inf" if v > 0 else "-inf"
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, list):
                return [clean(x) for x in v]
            return v

        return json.dumps(clean(self.to_dict()), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)

        def num(v):
            if v == "inf":
                return math.inf
            if v == "-inf":
                return -math.inf
            return v

        enc = d.get("encounter_counts")
        return cls(
            auroc=d["auroc"],
            threshold=num(d["threshold"]),
            sensitivity=d["sensitivity"],
            specificity=d["specificity"],
            ppv=d["ppv"],
            balanced_accuracy=d["balanced_accuracy"],
            counts=ConfusionCounts(**d["counts"]),
            roc=[tuple(num(x) for x in p) for p in d.get("roc", [])],
            encounter_counts=ConfusionCounts(**enc) if enc else None,
            encounter_metrics=d.get("encounter_metrics"),
            extra=d.get("extra", {}),
        )


def ratio_metrics(c: ConfusionCounts) -> dict:
    sens = _ratio(c.tp, c.tp + c.fn)
    spec = _ratio(c.tn, c.tn + c.fp)
    return {
        "sensitivity": sens,
        "specificity": spec,
        "ppv": _ratio(c.tp, c.tp + c.fp),
        "balanced_accuracy": (sens + spec) / 2.0 if sens is not None and spec is not None else None,
    }


def binary_predictor_metrics(counts: ConfusionCounts) -> EvalReport:
    """Operating metrics for a binary predictor; AUROC is undefined and left absent."""
    for k in ("tp", "fp", "fn", "tn"):
        if getattr(counts, k) < 0:
            raise MetricError("confusion counts must be non-negative")
    if counts.total == 0:
        raise MetricError("all confusion counts are zero")
    return EvalReport(auroc=None, threshold=None, counts=counts, **ratio_metrics(counts))


def score_report(scores, labels, threshold: float) -> EvalReport:
    """Report for a scored predictor at a frozen threshold."""
    s, y = _as_arrays(scores, labels)
    curve = roc_curve(s, y)
    counts = confusion_at(s, y, threshold)
    return EvalReport(
        auroc=curve.auroc, threshold=float(threshold), counts=counts, roc=curve.points,
        **ratio_metrics(counts),
    )


# ---------------------------------------------------------------------------
# encounter-level evaluation

TP, FP, FN, TN = "TP", "FP", "FN", "TN"


@dataclass
class EncounterConfusion:
    prediction: ConfusionCounts
    encounter: ConfusionCounts
    cells: list[str]  # per prediction, in input order
    encounter_cells: dict[str, str]


def encounter_confusion(
    encounter_ids: Sequence[str],
    timestamps,
    scores,
    labels,
    t0: Mapping[str, Optional[float]],
    threshold: float,
) -> EncounterConfusion:
    """Prediction-level cells and their per-encounter rollup.

    A prediction is positive when ``score >= threshold``. Its label marks
    ventilation onset within the following 24 h, i.e. the prediction lies in
    the window up to 24 h before T0. An encounter with any positive label is
    detected (TP) when any of its in-window predictions is positive and missed
    (FN) otherwise; an encounter without positive labels is FP if it received
    any positive prediction and TN otherwise.
    """
    ids = [str(e) for e in encounter_ids]
    ts = np.asarray(timestamps, dtype=float).ravel()
    s, y = _as_arrays(scores, labels)
    if not (len(ids) == ts.size == s.size):
        raise MetricError("encounter ids, timestamps and scores are misaligned")
    for e, t, lab in zip(ids, ts, y):
        if e not in t0:
            raise MetricError(f"no onset entry for encounter {e}")
        if binary_imv_label(float(t), t0[e]) != lab:
            raise MetricError(f"label at {e}@{t} disagrees with its onset time")

    call = s >= threshold
    cells = [
        (TP if lab else FP) if c else (FN if lab else TN) for c, lab in zip(call, y)
    ]
    pred = ConfusionCounts(
        tp=cells.count(TP), fp=cells.count(FP), fn=cells.count(FN), tn=cells.count(TN)
    )

    any_label: dict[str, bool] = {}
    any_hit: dict[str, bool] = {}
    any_call: dict[str, bool] = {}
    for e, c, lab in zip(ids, call, y):
        any_label[e] = any_label.get(e, False) or bool(lab)
        any_hit[e] = any_hit.get(e, False) or bool(c and lab)
        any_call[e] = any_call.get(e, False) or bool(c)
    enc_cells = {}
    for e in any_label:
        if any_label[e]:
            enc_cells[e] = TP if any_hit[e] else FN
        else:
            enc_cells[e] = FP if any_call[e] else TN
    vals = list(enc_cells.values())
    enc = ConfusionCounts(tp=vals.count(TP), fp=vals.count(FP), fn=vals.count(FN), tn=vals.count(TN))
    return EncounterConfusion(pred, enc, cells, enc_cells)


# ---------------------------------------------------------------------------
# comparison tables

COMPARE_COLUMNS = ("AUC", "Specificity", "Sensitivity", "PPV")


def _fmt(v: Optional[float]) -> str:
    return "--" if v is None else f"{v:.3f}"


def _row(report: EvalReport) -> list[Optional[float]]:
    return [report.auroc, report.specificity, report.sensitivity, report.ppv]


def compare(reports: Sequence[tuple[str, EvalReport]]) -> str:
    """Markdown table with one row per predictor."""
    if len(reports) < 2:
        raise MetricError("comparison needs at least two predictors")
    lines = [
        "| Predictor | " + " | ".join(COMPARE_COLUMNS) + " |",
        "|---|" + "---|" * len(COMPARE_COLUMNS),
    ]
    for name, rep in reports:
        lines.append(f"| {name} | " + " | ".join(_fmt(v) for v in _row(rep)) + " |")
    return "\n".join(lines) + "\n"


def compare_csv(reports: Sequence[tuple[str, EvalReport]]) -> str:
    if len(reports) < 2:
        raise MetricError("comparison needs at least two predictors")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["predictor", *[c.lower() for c in COMPARE_COLUMNS]])
    for name, rep in reports:
        w.writerow([name, *["" if v is None else f"{v:.6f}" for v in _row(rep)]])
    return buf.getvalue()
