"""Detection metrics and the key=value evaluation report."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .dataio import read_kv, write_kv
from .errors import ArgumentError, MetricUndefinedError


def _check(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ArgumentError(f"{s.size} scores for {y.size} labels")
    if not np.all(np.isin(y, (0, 1))):
        raise ArgumentError("labels must be 0 or 1")
    return s, y.astype(np.int64)


def auc(scores, labels) -> float:
    """Probability a random positive outranks a random negative (ties count 1/2)."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUC needs both positive and negative labels")
    ranks = rankdata(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Step-wise area under the precision-recall curve.

    One threshold per distinct score; tied spots enter together.
    """
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricUndefinedError("average precision needs at least one positive")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[last]
    precision = tp / (last + 1)
    recall = tp / n_pos
    delta = np.diff(np.r_[0.0, recall])
    return float(np.sum(precision * delta))


def f1_at_prevalence(scores, labels) -> float:
    """F1 after calling the top ceil(prevalence * n) scores positive.

    Ties at the cut go to the lower index.
    """
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricUndefinedError("F1 at prevalence needs at least one positive")
    k = n_pos  # ceil(prevalence * n) is exactly the positive count
    order = np.lexsort((np.arange(s.size), -s))
    pred = np.zeros_like(y)
    pred[order[:k]] = 1
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & (1 - y)))
    fn = int(np.sum((1 - pred) & y))
    return 2 * tp / (2 * tp + fp + fn)


def ks_distance(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic sup |F_a - F_b|."""
    a = np.sort(np.asarray(a, dtype=np.float64).reshape(-1))
    b = np.sort(np.asarray(b, dtype=np.float64).reshape(-1))
    if a.size == 0 or b.size == 0:
        raise ArgumentError("KS distance needs two non-empty samples")
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


@dataclass
class ScoreReport:
    dataset_id: str = ""
    n_spots: int = 0
    positive_fraction: float = float("nan")
    auc: float | None = None
    ap: float | None = None
    f1: float | None = None
    ks: float | None = None
    f1_threshold: float | None = None
    gmm_weights: tuple[float, float] | None = None
    gmm_means: tuple[float, float] | None = None
    gmm_variances: tuple[float, float] | None = None
    theta: float | None = None
    threshold_method: str | None = None
    seed: int | None = None
    config_fingerprint: str = ""
    scores_path: str = ""
    reasons: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            if f.name == "reasons":
                continue
            v = getattr(self, f.name)
            if v is None:
                out[f.name] = "null"
            elif isinstance(v, tuple):
                out[f.name] = ",".join(repr(float(x)) for x in v)
            elif isinstance(v, float):
                out[f.name] = repr(v)
            else:
                out[f.name] = str(v)
        for k, reason in sorted(self.reasons.items()):
            out[f"{k}_reason"] = reason.replace("\n", " ")
        return out

    def save(self, path) -> None:
        write_kv(path, self.to_dict())

    @classmethod
    def from_dict(cls, raw: dict[str, str]) -> "ScoreReport":
        kwargs: dict = {"reasons": {}}
        types = {f.name: f.type for f in fields(cls)}
        for key, value in raw.items():
            if key.endswith("_reason"):
                kwargs["reasons"][key[: -len("_reason")]] = value
                continue
            if key not in types:
                continue
            kind = types[key]
            if value == "null":
                kwargs[key] = None
            elif "tuple" in kind:
                kwargs[key] = tuple(float(x) for x in value.split(","))
            elif kind.startswith("int"):
                kwargs[key] = int(value)
            elif kind.startswith("float"):
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "ScoreReport":
        return cls.from_dict(read_kv(path))


def build_report(scores, labels, gmm=None, threshold=None, **extras) -> ScoreReport:
    """Compute every metric; undefined ones become ``None`` with a reason."""
    s, y = _check(scores, labels)
    report = ScoreReport(n_spots=int(y.size), positive_fraction=float(y.mean()) if y.size else float("nan"), **extras)

    def attempt(name, fn):
        try:
            setattr(report, name, fn())
        except (MetricUndefinedError, ArgumentError) as exc:
            report.reasons[name] = str(exc)

    attempt("auc", lambda: auc(s, y))
    attempt("ap", lambda: average_precision(s, y))
    attempt("f1", lambda: f1_at_prevalence(s, y))
    attempt("ks", lambda: ks_distance(s[y == 1], s[y == 0]))
    if y.sum() > 0:
        k = int(y.sum())
        report.f1_threshold = float(s[np.lexsort((np.arange(s.size), -s))][k - 1])
    if gmm is not None:
        report.gmm_weights = tuple(gmm.weights)
        report.gmm_means = tuple(gmm.means)
        report.gmm_variances = tuple(gmm.variances)
    if threshold is not None:
        report.theta = threshold.theta
        report.threshold_method = threshold.method
    return report
