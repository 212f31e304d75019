"""Evaluation criteria: Pearson correlation from raw sums, Spearman rank
correlation with average ranks for ties, and root-mean-square error.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class MetricReport:
    plcc: float
    srcc: float
    rmse: float
    n: int

    def csv_line(self):
        return f"{self.plcc!r},{self.srcc!r},{self.rmse!r},{self.n}"


def plcc(pred, target):
    """Pearson linear correlation, sum-form: no variance normalization."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1:
        raise ValueError("pred/target must be equal-length vectors")
    if p.size < 2:
        raise DataError("correlation needs >= 2 samples")
    pc = p - p.mean()
    tc = t - t.mean()
    denom = np.sqrt((pc**2).sum()) * np.sqrt((tc**2).sum())
    if denom == 0.0:
        raise DataError("zero variance: correlation undefined")
    return float((pc * tc).sum() / denom)


def average_ranks(values):
    """1-based ranks; tied values share the mean of their rank span."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def srcc(pred, target):
    """Spearman rank-order correlation: Pearson over average ranks."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1:
        raise ValueError("pred/target must be equal-length vectors")
    if p.size < 2:
        raise DataError("correlation needs >= 2 samples")
    rp = average_ranks(p)
    rt = average_ranks(t)
    if np.all(rp == rp[0]) or np.all(rt == rt[0]):
        raise DataError("zero rank variance: ranks are all tied")
    return plcc(rp, rt)


def rmse(pred, target):
    """Root mean squared prediction error."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1:
        raise ValueError("pred/target must be equal-length vectors")
    if p.size == 0:
        raise DataError("rmse needs at least one sample")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def report(pred, target):
    return MetricReport(
        plcc=plcc(pred, target),
        srcc=srcc(pred, target),
        rmse=rmse(pred, target),
        n=len(pred),
    )
