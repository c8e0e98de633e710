"""Per-tool ranking metrics, significance testing and consensus masking."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.stats import rankdata


class UndefinedMetric(ValueError):
    """The metric needs both classes (or at least one positive)."""


def _binary(labels) -> np.ndarray:
    labels = np.asarray(labels)
    return labels > 0 if labels.dtype != bool else labels


def roc_auc(scores, labels) -> float:
    """Mann-Whitney estimate of the ROC area; ties between classes count 1/2."""
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("Az needs positive and negative samples")
    ranks = rankdata(s)
    # average ranks are multiples of 1/2, so the doubled statistic is an exact integer
    u2 = 2.0 * ranks[y].sum() - n_pos * (n_pos + 1)
    return float(u2 / (2.0 * n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Step-wise AP: ``sum_k (R_k - R_{k-1}) P_k`` over descending unique thresholds."""
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetric("AP needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    n = last + 1
    recall_steps = np.diff(np.r_[0, tp])
    return float(np.sum(recall_steps * (tp / n)) / n_pos)


def roc_points(scores, labels) -> np.ndarray:
    """Rows ``(threshold, fpr, tpr)`` at every unique score, descending."""
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    n_pos, n_neg = max(int(y.sum()), 1), max(int((~y).sum()), 1)
    return np.column_stack([s[last], fp / n_neg, tp / n_pos])


def pr_points(scores, labels) -> np.ndarray:
    """Rows ``(threshold, precision, recall)`` at every unique score, descending."""
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    return np.column_stack([s[last], tp / (last + 1), tp / max(int(y.sum()), 1)])


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("pearson needs two equal-length samples of size >= 2")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ValueError("zero variance")
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


def paired_t_test(a, b) -> tuple[float, float]:
    """Two-sided paired t-test on ``a - b``; returns ``(t, p)``."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if d.ndim != 1 or d.size < 2:
        raise ValueError("paired t-test needs two equal-length samples of size >= 2")
    if np.all(d == 0):
        return 0.0, 1.0
    sd = d.std(ddof=1)
    if sd == 0:
        raise ValueError("zero-variance differences")
    t = float(d.mean() / (sd / math.sqrt(d.size)))
    p = float(2.0 * stats.t.sf(abs(t), d.size - 1))
    return t, min(p, 1.0)


def consensus_mask(labels_a, labels_b) -> tuple[np.ndarray, np.ndarray]:
    """Agreement mask and union labels for two annotators.

    Inputs are ``(T,)`` or ``(T, tools)`` arrays in the +/-1 encoding.  The
    mask is per tool: frame ``t`` is evaluable for tool ``j`` iff both
    annotators agree there.  Training labels are +1 where either says +1.
    """
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape:
        raise ValueError("annotator label shapes differ")
    agree = a == b
    union = np.where((a > 0) | (b > 0), 1.0, -1.0)
    return agree, union


@dataclass
class EvalReport:
    tools: list[str]
    az: list[float | None]
    ap: list[float | None]
    frames: list[int]
    prevalence: list[float] = field(default_factory=list)
    header: dict = field(default_factory=dict)

    @property
    def m_az(self) -> float:
        vals = [v for v in self.az if v is not None]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def m_ap(self) -> float:
        vals = [v for v in self.ap if v is not None]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def excluded(self) -> int:
        return sum(v is None for v in self.az)

    def prevalence_correlation(self, which: str = "az") -> float | None:
        vals = self.az if which == "az" else self.ap
        pairs = [(v, p) for v, p in zip(vals, self.prevalence) if v is not None]
        if len(pairs) < 2:
            return None
        try:
            return pearson([v for v, _ in pairs], [p for _, p in pairs])
        except ValueError:
            return None

    def write_csv(self, path) -> None:
        fmt = lambda v: "" if v is None else repr(float(v))
        with open(path, "w", newline="") as fh:
            for k in sorted(self.header):
                fh.write(f"# {k}: {self.header[k]}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["tool", "az", "ap", "frames", "train_prevalence"])
            for i, t in enumerate(self.tools):
                prev = self.prevalence[i] if self.prevalence else None
                w.writerow([t, fmt(self.az[i]), fmt(self.ap[i]), self.frames[i], fmt(prev)])
            w.writerow(["mean", fmt(self.m_az), fmt(self.m_ap), sum(self.frames), ""])
            w.writerow(["excluded_tools", self.excluded, self.excluded, "", ""])
            w.writerow(["pearson_prevalence", fmt(self.prevalence_correlation("az")),
                        fmt(self.prevalence_correlation("ap")), "", ""])

    @classmethod
    def read_csv(cls, path) -> "EvalReport":
        header, rows = {}, []
        with open(path, newline="") as fh:
            for line in fh:
                if line.startswith("# "):
                    k, _, v = line[2:].rstrip("\n").partition(": ")
                    header[k] = v
                else:
                    rows.append(line)
        reader = list(csv.DictReader(rows))
        parse = lambda v: None if v == "" else float(v)
        tools = [r for r in reader if r["tool"] not in ("mean", "excluded_tools", "pearson_prevalence")]
        return cls([r["tool"] for r in tools], [parse(r["az"]) for r in tools],
                   [parse(r["ap"]) for r in tools], [int(r["frames"]) for r in tools],
                   [parse(r["train_prevalence"]) or 0.0 for r in tools], header)


def evaluate(scores: np.ndarray, labels: np.ndarray, mask: np.ndarray | None = None,
             tools: Sequence[str] | None = None, prevalence: Sequence[float] | None = None,
             header: dict | None = None) -> EvalReport:
    """Per-tool Az/AP over ``(frames, tools)`` scores and +/-1 labels."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    n_tools = scores.shape[1]
    if mask is None:
        mask = np.ones(scores.shape, dtype=bool)
    tools = list(tools) if tools is not None else [f"tool_{j}" for j in range(n_tools)]
    az, ap, frames = [], [], []
    for j in range(n_tools):
        m = mask[:, j]
        s, y = scores[m, j], labels[m, j] > 0
        frames.append(int(m.sum()))
        try:
            az.append(roc_auc(s, y))
        except UndefinedMetric:
            az.append(None)
        try:
            ap.append(average_precision(s, y))
        except UndefinedMetric:
            ap.append(None)
    hdr = {"az": "Mann-Whitney, ties 1/2", "ap": "step-wise, no interpolation"}
    hdr.update(header or {})
    return EvalReport(tools, az, ap, frames, list(prevalence or []), hdr)


def write_curves(scores: np.ndarray, labels: np.ndarray, mask: np.ndarray | None, tools: Sequence[str],
                 out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if mask is None:
        mask = np.ones(scores.shape, dtype=bool)
    for j, name in enumerate(tools):
        m = mask[:, j]
        s, y = scores[m, j], labels[m, j] > 0
        for kind, pts, cols in (("roc", roc_points(s, y), "threshold,fpr,tpr"),
                                ("pr", pr_points(s, y), "threshold,precision,recall")):
            with open(out_dir / f"{kind}_{name}.csv", "w") as fh:
                fh.write(cols + "\n")
                for row in pts:
                    fh.write(",".join(repr(float(v)) for v in row) + "\n")
