"""Evaluation statistics: MAE, rMAE, PCC, percentiles, Wilcoxon, OLS R^2.

Conventions pinned for reproducibility: rMAE divides by the population
(not sample) standard deviation of the targets; percentiles use linear
interpolation between order statistics; the Wilcoxon signed-rank test is
exact (full null distribution) for n <= 25 pairs and uses the normal
approximation with tie and continuity corrections above that.  Report
rows list the plain rMAE ratio (some tables display it scaled by 1e3).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def _validate_pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(target, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape[0]} predictions vs {t.shape[0]} targets")
    if p.size < 1:
        raise ValueError("need at least one sample")
    return p, t


def mae(pred, target) -> float:
    p, t = _validate_pair(pred, target)
    return float(np.mean(np.abs(p - t)))


def rmae(pred, target) -> float:
    """MAE divided by the population standard deviation of the targets."""
    p, t = _validate_pair(pred, target)
    sd = float(np.std(t))
    if sd == 0.0:
        raise ValueError("targets are constant; rMAE undefined")
    return mae(p, t) / sd


def pcc(pred, target) -> float:
    p, t = _validate_pair(pred, target)
    pc = p - p.mean()
    tc = t - t.mean()
    denom = math.sqrt(float(pc @ pc)) * math.sqrt(float(tc @ tc))
    if denom == 0.0:
        raise ValueError("zero variance in one of the series; PCC undefined")
    return float(pc @ tc) / denom


def percentile(values, q: float) -> float:
    """Linear-interpolation quantile: position q/100 * (n - 1) in sorted order."""
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if v.size == 0:
        raise ValueError("need at least one value")
    pos = q / 100.0 * (v.size - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, v.size - 1)
    frac = pos - lo
    return float(v[lo] * (1.0 - frac) + v[hi] * frac)


def linreg_r2(pred, target) -> tuple[float, float, float]:
    """OLS fit of pred on target; returns (slope, intercept, r^2)."""
    p, t = _validate_pair(pred, target)
    if p.size < 2:
        raise ValueError("need at least two samples for a regression")
    tc = t - t.mean()
    var_t = float(tc @ tc)
    if var_t == 0.0:
        raise ValueError("targets are constant; regression undefined")
    slope = float(tc @ (p - p.mean())) / var_t
    intercept = float(p.mean() - slope * t.mean())
    residuals = p - (slope * t + intercept)
    ss_res = float(residuals @ residuals)
    pc = p - p.mean()
    ss_tot = float(pc @ pc)
    r2 = 0.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return slope, intercept, r2


# -- Wilcoxon signed-rank ------------------------------------------------------------


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    sorted_vals = values[order]
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_tail_probs(scaled_ranks: list[int], w_scaled: int) -> tuple[float, float]:
    """P(W+ <= w) and P(W+ >= w) over all 2^n equally likely sign choices.

    Dynamic program over the achievable rank-sum support (ranks scaled by
    2 so mid-ranks are integers).
    """
    total = sum(scaled_ranks)
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in scaled_ranks:  # scaled ranks are >= 2, so the shift is real
        counts[r:] += counts[:-r].copy()
    counts /= counts.sum()
    le = float(counts[:w_scaled + 1].sum())
    ge = float(counts[w_scaled:].sum())
    return le, ge


def wilcoxon_signed_rank(errors_a, errors_b, alpha: float = 0.05
                         ) -> tuple[float, float, bool]:
    """Two-sided paired test on the median of the differences a - b.

    Zero differences are dropped; ties get mid-ranks.  Returns
    (statistic, p_value, significant) where the statistic is
    min(W+, W-).  All-zero differences give the defined non-significant
    outcome (0.0, 1.0, False).  Exact distribution for n <= 25 pairs,
    normal approximation with continuity and tie corrections otherwise.
    """
    a, b = _validate_pair(errors_a, errors_b)
    diff = a - b
    diff = diff[diff != 0.0]
    n = diff.size
    if n == 0:
        return 0.0, 1.0, False
    ranks = _midranks(np.abs(diff))
    w_plus = float(ranks[diff > 0].sum())
    w_minus = float(ranks[diff < 0].sum())
    stat = min(w_plus, w_minus)
    if n <= 25:
        scaled = [int(round(2 * r)) for r in ranks]
        w_scaled = int(round(2 * w_plus))
        le, ge = _exact_tail_probs(scaled, w_scaled)
        p = min(1.0, 2.0 * min(le, ge))
    else:
        mean = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0
        _, tie_counts = np.unique(ranks, return_counts=True)
        var -= float(np.sum(tie_counts ** 3 - tie_counts)) / 48.0
        sd = math.sqrt(var)
        z = (w_plus - mean - 0.5 * math.copysign(1.0, w_plus - mean)) / sd
        p = 2.0 * (1.0 - _phi(abs(z)))
        p = min(1.0, p)
    return stat, p, p < alpha


def _phi(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


# -- report --------------------------------------------------------------------------


REPORT_COLUMNS = ("run_id", "arch", "representation", "p", "f",
                  "mae", "p25", "p75", "rmae", "pcc", "r2", "n")


@dataclass
class MetricsReport:
    """One evaluation run: errors in mN, relative metrics dimensionless."""

    run_id: str
    arch: str
    representation: str
    p: int
    f: int
    mae: float
    p25: float
    p75: float
    rmae: float
    pcc: float
    r2: float
    n: int
    wilcoxon_p: float | None = None

    def __post_init__(self):
        if self.p25 > self.p75:
            raise ValueError(f"p25 {self.p25} > p75 {self.p75}")
        if abs(self.pcc) > 1.0 + 1e-12:
            raise ValueError(f"pcc out of range: {self.pcc}")
        if self.rmae < 0:
            raise ValueError(f"rmae must be >= 0, got {self.rmae}")

    def csv_row(self) -> str:
        cells = [self.run_id, self.arch, self.representation, str(self.p), str(self.f),
                 f"{self.mae:.6g}", f"{self.p25:.6g}", f"{self.p75:.6g}",
                 f"{self.rmae:.6g}", f"{self.pcc:.6g}", f"{self.r2:.6g}", str(self.n)]
        if self.wilcoxon_p is not None:
            cells.append(f"{self.wilcoxon_p:.6g}")
        return ",".join(cells)

    @staticmethod
    def csv_header(with_wilcoxon: bool = False) -> str:
        cols = REPORT_COLUMNS + (("wilcoxon_p",) if with_wilcoxon else ())
        return ",".join(cols)


def evaluate(pred, target, run_id: str = "", arch: str = "",
             representation: str = "", p: int = 0, f: int = 0) -> MetricsReport:
    """Assemble the standard report from predictions and targets in mN."""
    errors = np.abs(np.asarray(pred, dtype=np.float64)
                    - np.asarray(target, dtype=np.float64))
    _, _, r2 = linreg_r2(pred, target)
    return MetricsReport(
        run_id=run_id, arch=arch, representation=representation, p=p, f=f,
        mae=mae(pred, target), p25=percentile(errors, 25), p75=percentile(errors, 75),
        rmae=rmae(pred, target), pcc=pcc(pred, target), r2=r2,
        n=int(np.asarray(pred).reshape(-1).size))
