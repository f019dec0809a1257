"""Evaluation metrics: AUC, shortcut-sensitivity set, confounder robustness,
attention correlation, and a from-scratch Welch t-test.

The interpretability metrics compare paired predictions of the same WSI with
and without an artificial confounder.  Only WSIs whose hard prediction flips
between the two runs (the sensitive set) contribute; the conventions for an
empty sensitive set are CR = 0 and NCC = 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .abmil import Prediction
from .core import ConfbenchError

TOP_ATTENTION_FRACTION = 0.2


class EmptyClass(ConfbenchError):
    """AUC needs at least one score from each class."""


class DegenerateSamples(ConfbenchError):
    """Welch's test needs two samples of size >= 2 with nonzero variance."""


class ZeroVarianceAttention(ConfbenchError):
    """A constant attention vector has no defined correlation."""


def auc(pos_scores, neg_scores) -> float:
    """Area under the ROC curve via the rank-sum identity.

    Ties get the average rank, so a tied positive/negative pair counts 1/2,
    matching the brute-force pairwise definition exactly.
    """
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise EmptyClass("AUC requires at least one positive and one negative score")
    combined = np.concatenate([pos, neg])
    order = np.argsort(combined, kind="stable")
    ranks = np.empty(combined.size, dtype=np.float64)
    sorted_vals = combined[order]
    i = 0
    while i < sorted_vals.size:
        j = i
        while j + 1 < sorted_vals.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average of 1-based ranks
        i = j + 1
    rank_sum_pos = float(ranks[: pos.size].sum())
    return (rank_sum_pos - pos.size * (pos.size + 1) / 2.0) / (pos.size * neg.size)


def top_attention_mask(weights, fraction: float = TOP_ATTENTION_FRACTION) -> np.ndarray:
    """Boolean mask of the ceil(fraction * T) highest-attention tiles.

    Equal weights break toward the lower tile index, so the mask is a pure
    function of the weight vector.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("weights must be a non-empty 1-D vector")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    count = math.ceil(fraction * w.size)
    order = np.argsort(-w, kind="stable")  # stable sort keeps index order inside ties
    mask = np.zeros(w.size, dtype=bool)
    mask[order[:count]] = True
    return mask


def prevalence(modified_mask) -> float:
    """Fraction of a WSI's tiles that carry the confounder."""
    mask = np.asarray(modified_mask, dtype=bool)
    if mask.ndim != 1 or mask.size == 0:
        raise ValueError("modified_mask must be a non-empty 1-D vector")
    return float(mask.mean())


def precision_at_top(attention_weights, modified_mask, fraction: float = TOP_ATTENTION_FRACTION) -> float:
    """Fraction of the top-attention tiles that are actually modified."""
    mask = np.asarray(modified_mask, dtype=bool)
    top = top_attention_mask(attention_weights, fraction)
    if mask.shape != top.shape:
        raise ValueError("attention weights and modified mask must have equal length")
    return float(mask[top].mean())


@dataclass(frozen=True, eq=False)
class PairedEval:
    """Predictions for one test WSI on the clean and the confounded copy."""

    wsi_id: str
    pred_clean: Prediction
    pred_modified: Prediction
    modified_mask: np.ndarray

    def __post_init__(self) -> None:
        mask = np.asarray(self.modified_mask, dtype=bool)
        if mask.ndim != 1:
            raise ValueError("modified_mask must be 1-D")
        t = self.pred_modified.attention.weights.size
        if mask.size != t or self.pred_clean.attention.weights.size != t:
            raise ValueError("mask and both attention vectors must cover the same tiles")
        mask = mask.copy()
        mask.setflags(write=False)
        object.__setattr__(self, "modified_mask", mask)

    @property
    def flipped(self) -> bool:
        """True when the confounder changed the hard prediction."""
        return self.pred_clean.label_hat != self.pred_modified.label_hat


def sensitive_set(evals: list[PairedEval]) -> list[PairedEval]:
    """The WSIs whose prediction at threshold 0.5 flips under the confounder."""
    return [e for e in evals if e.flipped]


def confounder_robustness(evals: list[PairedEval]) -> float:
    """Share of flipped WSIs whose top attention concentrates on the confounder.

    A flipped WSI counts as attending to the confounder when the modified
    fraction of its top-attention tiles exceeds the modified fraction of the
    whole slide.  When every tile is modified both fractions are pinned to 1
    and the comparison is taken as met.  No flips at all scores 0.
    """
    flipped = sensitive_set(evals)
    if not flipped:
        return 0.0
    hits = 0
    for e in flipped:
        prec = precision_at_top(e.pred_modified.attention.weights, e.modified_mask)
        prev = prevalence(e.modified_mask)
        if prec > prev or (prec == 1.0 and prev == 1.0):
            hits += 1
    return hits / len(flipped)


def attention_correlation(clean_weights, modified_weights, *, pearson: bool = False) -> float:
    """Similarity of the two attention vectors of one WSI.

    Default is a normalized-covariance variant whose denominator multiplies
    absolute centered values before summing; it lands in [-1, 1] but weights
    tied mass differently than Pearson.  Set pearson=True for the classical
    coefficient.
    """
    a = np.asarray(clean_weights, dtype=np.float64)
    b = np.asarray(modified_weights, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise ValueError("attention vectors must be non-empty, equal-length and 1-D")
    ca = a - a.mean()
    cb = b - b.mean()
    if not ca.any() or not cb.any():
        raise ZeroVarianceAttention("constant attention vector")
    num = float(np.dot(ca, cb))
    if pearson:
        den = float(np.sqrt(np.dot(ca, ca) * np.dot(cb, cb)))
    else:
        den = float(np.sum(np.abs(ca) * np.abs(cb)))
    # |num| <= den by the triangle inequality; clamp float round-off
    return min(1.0, max(-1.0, num / den))


def ncc(evals: list[PairedEval], *, pearson: bool = False) -> float:
    """Mean attention correlation over the sensitive set (1.0 when empty)."""
    value, _ = ncc_with_exclusions(evals, pearson=pearson)
    return value


def ncc_with_exclusions(evals: list[PairedEval], *, pearson: bool = False) -> tuple[float, int]:
    """NCC plus the count of sensitive WSIs dropped for constant attention."""
    flipped = sensitive_set(evals)
    if not flipped:
        return 1.0, 0
    values = []
    excluded = 0
    for e in flipped:
        try:
            values.append(
                attention_correlation(
                    e.pred_clean.attention.weights, e.pred_modified.attention.weights, pearson=pearson
                )
            )
        except ZeroVarianceAttention:
            excluded += 1
    if not values:
        return 1.0, excluded
    return float(np.mean(values)), excluded


# ---------------------------------------------------------------------------
# Welch's t-test, self-contained
# ---------------------------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (Lentz's method)."""
    tiny = 1e-30
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    frac = d
    for m in range(1, 300):
        m2 = 2 * m
        num = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + num * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + num / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        frac *= d * c
        num = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + num * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + num / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        frac *= delta
        if abs(delta - 1.0) < 1e-14:
            break
    return frac


def reg_inc_beta(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    # use whichever tail the continued fraction converges fastest on
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - math.exp(ln_front) * _betacf(b, a, 1.0 - x) / b


@dataclass(frozen=True)
class WelchResult:
    statistic: float
    dof: float
    p_value: float


def welch_t_test(x, y) -> WelchResult:
    """Two-sided Welch's t-test for unequal variances.

    The degrees of freedom follow the Welch-Satterthwaite formula and the
    p-value comes from the regularized incomplete beta identity
    p = I_{df/(df+t^2)}(df/2, 1/2), so no lookup tables are involved.
    """
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.size < 2 or ya.size < 2:
        raise DegenerateSamples("each sample needs at least two observations")
    vx = float(xa.var(ddof=1))
    vy = float(ya.var(ddof=1))
    if vx == 0.0 and vy == 0.0:
        raise DegenerateSamples("both samples have zero variance")
    sx = vx / xa.size
    sy = vy / ya.size
    t = (float(xa.mean()) - float(ya.mean())) / math.sqrt(sx + sy)
    dof = (sx + sy) ** 2 / (sx**2 / (xa.size - 1) + sy**2 / (ya.size - 1))
    if t == 0.0:
        p = 1.0
    else:
        p = reg_inc_beta(dof / 2.0, 0.5, dof / (dof + t * t))
    return WelchResult(statistic=t, dof=dof, p_value=min(max(p, 0.0), 1.0))


# ---------------------------------------------------------------------------
# Aggregate report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InterpretabilityReport:
    """Per-condition summary of the paired evaluation."""

    cr: float
    ncc: float
    sensitive_count: int
    total_count: int
    ncc_excluded: int
    per_wsi: tuple[dict, ...] = field(default_factory=tuple)


def build_report(evals: list[PairedEval], *, pearson: bool = False) -> InterpretabilityReport:
    """CR, NCC and the per-WSI rows the experiment runner writes to disk."""
    ncc_value, excluded = ncc_with_exclusions(evals, pearson=pearson)
    rows = []
    for e in evals:
        row = {
            "wsi_id": e.wsi_id,
            "prob_clean": e.pred_clean.probability,
            "prob_modified": e.pred_modified.probability,
            "flipped": e.flipped,
            "prevalence": prevalence(e.modified_mask),
            "precision_at_top": precision_at_top(e.pred_modified.attention.weights, e.modified_mask),
        }
        try:
            row["attention_correlation"] = attention_correlation(
                e.pred_clean.attention.weights, e.pred_modified.attention.weights, pearson=pearson
            )
        except ZeroVarianceAttention:
            row["attention_correlation"] = None
        rows.append(row)
    return InterpretabilityReport(
        cr=confounder_robustness(evals),
        ncc=ncc_value,
        sensitive_count=len(sensitive_set(evals)),
        total_count=len(evals),
        ncc_excluded=excluded,
        per_wsi=tuple(rows),
    )
