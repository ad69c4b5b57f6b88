"""Voxel-level segmentation metrics and residual statistics."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import BinMismatch, DegenerateLabels
from .postproc import PostprocConfig, binarize_and_prune

GRID_DECIMALS = 3
N_BINS = 100


@dataclass
class EvalReport:
    approach: str
    auroc: float
    auprc: float
    best_dice: float
    best_threshold: float
    dice_mean: float
    dice_std: float
    re_normal_mean: float
    re_normal_std: float
    re_anom_mean: float
    re_anom_std: float
    chi_sq: float
    extra: dict = field(default_factory=dict)

    COLUMNS = ("Approach", "AUROC", "AUPRC", "⌈DICE⌉", "DICE", "ℓ1-RE_N", "ℓ1-RE_A", "χ²")

    def row(self) -> list:
        return [
            self.approach,
            f"{self.auroc:.4f}",
            f"{self.auprc:.4f}",
            f"{self.best_dice:.4f}",
            f"{self.dice_mean:.4f}±{self.dice_std:.4f}",
            f"{self.re_normal_mean:.4f}±{self.re_normal_std:.4f}",
            f"{self.re_anom_mean:.4f}±{self.re_anom_std:.4f}",
            f"{self.chi_sq:.4f}",
        ]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ResidualHistograms:
    normal_hist: np.ndarray
    anom_hist: np.ndarray
    bin_count: int = N_BINS

    @property
    def edges(self):
        return np.linspace(0.0, 1.0, self.bin_count + 1)


def _check_labels(labels):
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise DegenerateLabels("need at least one positive and one negative label")


def _flat(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.shape} scores vs {labels.shape} labels")
    return scores, labels


def prc_and_auprc(scores, labels):
    """Precision-recall curve over all distinct thresholds and its area.

    A voxel is predicted positive when ``score >= threshold``.  The curve is
    anchored at recall 0 with the precision of the highest threshold, and the
    area is the trapezoidal integral over recall.
    Returns ``((precision, recall, thresholds), auprc)`` with thresholds
    descending.
    """
    scores, labels = _flat(scores, labels)
    _check_labels(labels)
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    tp = np.cumsum(y, dtype=np.int64)
    fp = np.cumsum(~y, dtype=np.int64)
    # last index of every run of equal scores
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp, fp, thresholds = tp[last], fp[last], s[last]
    precision = tp / (tp + fp)
    recall = tp / tp[-1]
    precision = np.r_[precision[0], precision]
    recall = np.r_[0.0, recall]
    area = float(np.sum(np.diff(recall) * (precision[1:] + precision[:-1]) / 2.0))
    return (precision, recall, thresholds), area


def auprc(scores, labels) -> float:
    return prc_and_auprc(scores, labels)[1]


def auroc(scores, labels) -> float:
    """Area under the ROC curve as the Mann-Whitney U statistic (ties count 1/2)."""
    scores, labels = _flat(scores, labels)
    _check_labels(labels)
    ranks = rankdata(scores)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def dice(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def _as_list(x):
    if isinstance(x, np.ndarray) and x.ndim == 3:
        return [x]
    return list(x)


def _pooled_counts(scores_list, gt_list, t, cfg):
    inter = pred = 0
    for s, g in zip(scores_list, gt_list):
        p = binarize_and_prune(s, t, cfg)
        inter += int(np.logical_and(p, g).sum())
        pred += int(p.sum())
    return inter, pred


def greedy_best_dice(scores, gt, postproc_cfg: Optional[PostprocConfig] = None):
    """Best pooled DICE over thresholds on the 0.001 grid, found coarse to fine.

    Thresholds are searched at steps 0.1, 0.01 and 0.001.  Binarize+prune is
    monotone in the threshold, so for an interval ``[lo, hi]`` the DICE is
    bounded by ``2|P(lo) & G| / (|P(hi)| + |G|)``; only intervals whose bound
    can still reach the current best are refined.  The result therefore equals
    an exhaustive scan of the 0.001 grid while touching far fewer thresholds.
    Returns ``(best_dice, threshold)``; ties go to the smallest threshold.
    """
    cfg = postproc_cfg or PostprocConfig()
    scores_list = [np.asarray(s) for s in _as_list(scores)]
    gt_list = [np.asarray(g, dtype=bool) for g in _as_list(gt)]
    n_gt = sum(int(g.sum()) for g in gt_list)
    total = sum(g.size for g in gt_list)
    if n_gt == 0 or n_gt == total:
        raise DegenerateLabels("ground truth must contain lesion and normal voxels")

    full = 10 ** GRID_DECIMALS
    cache = {}

    def counts(j):
        if j not in cache:
            cache[j] = _pooled_counts(scores_list, gt_list, j / full, cfg)
        return cache[j]

    def value(j):
        inter, pred = counts(j)
        return 2.0 * inter / (pred + n_gt)

    best_j = None
    best = -1.0

    def consider(j):
        nonlocal best, best_j
        d = value(j)
        if d > best or (d == best and j < best_j):
            best, best_j = d, j

    intervals = [(0, full)]
    for step in (100, 10, 1):
        points = sorted({j for lo, hi in intervals for j in range(lo, hi + 1, step)})
        for j in points:
            consider(j)
        if step == 1:
            break
        refined = []
        for lo, hi in intervals:
            for a in range(lo, hi, step):
                b = a + step
                inter_hi_bound = counts(a)[0]
                pred_lo_bound = counts(b)[1]
                bound = 2.0 * inter_hi_bound / (pred_lo_bound + n_gt)
                if bound >= best:
                    refined.append((a, b))
        intervals = refined
    return best, best_j / full


def dice_at_op(scores, gt, t: float, postproc_cfg: Optional[PostprocConfig] = None):
    """Per-patient DICE at threshold ``t``; returns ``(mean, population std, values)``."""
    cfg = postproc_cfg or PostprocConfig()
    values = np.array(
        [dice(binarize_and_prune(s, t, cfg), g) for s, g in zip(_as_list(scores), _as_list(gt))]
    )
    return float(values.mean()), float(values.std()), values


def residual_stats(scores, gt, brain_mask):
    """Mean and std of residuals over normal and lesion voxels.

    Returns ``((re_n_mean, re_n_std), (re_a_mean, re_a_std))``; the lesion
    pair is NaN when there are no lesion voxels.
    """
    normal, anom = _partition(scores, gt, brain_mask)
    re_n = (float(normal.mean()), float(normal.std())) if normal.size else (math.nan, math.nan)
    re_a = (float(anom.mean()), float(anom.std())) if anom.size else (math.nan, math.nan)
    return re_n, re_a


def _partition(scores, gt, brain_mask):
    normal, anom = [], []
    for s, g, m in zip(_as_list(scores), _as_list(gt), _as_list(brain_mask)):
        s = np.asarray(s, dtype=np.float64)
        g = np.asarray(g, dtype=bool)
        m = np.asarray(m, dtype=bool)
        normal.append(s[m & ~g])
        anom.append(s[m & g])
    return np.concatenate(normal), np.concatenate(anom)


def normalized_histogram(values, bin_count: int = N_BINS) -> np.ndarray:
    """Histogram over (0, 1] with zeros excluded, normalized to unit mass."""
    values = np.asarray(values, dtype=np.float64).ravel()
    values = values[(values > 0) & (values <= 1.0)]
    edges = np.linspace(0.0, 1.0, bin_count + 1)
    # right-closed bins so that 1.0 lands in the last bin
    idx = np.clip(np.searchsorted(edges, values, side="left") - 1, 0, bin_count - 1)
    hist = np.bincount(idx, minlength=bin_count).astype(np.float64)
    if hist.sum() > 0:
        hist /= hist.sum()
    return hist


def residual_histograms(scores, gt, brain_mask, bin_count: int = N_BINS) -> ResidualHistograms:
    normal, anom = _partition(scores, gt, brain_mask)
    return ResidualHistograms(
        normal_hist=normalized_histogram(normal, bin_count),
        anom_hist=normalized_histogram(anom, bin_count),
        bin_count=bin_count,
    )


def chi_square_distance(h1, h2) -> float:
    """Symmetric chi-squared distance with a 1/2 factor; 0 for equal histograms."""
    p = np.asarray(h1, dtype=np.float64)
    q = np.asarray(h2, dtype=np.float64)
    if p.shape != q.shape:
        raise BinMismatch(f"{p.shape} vs {q.shape} bins")
    s = p + q
    nz = s > 0
    return float(0.5 * np.sum((p[nz] - q[nz]) ** 2 / s[nz]))


CORRELATION_FIELDS = ("auprc", "best_dice", "re_normal_mean", "re_anom_mean", "chi_sq")


def correlation_matrix(reports: Sequence, fields: Sequence[str] = CORRELATION_FIELDS) -> np.ndarray:
    """Pearson correlations between metric columns across models.

    ``reports`` holds EvalReports (or mappings/rows of numbers).  Columns with
    zero variance produce NaN rows and columns.
    """
    if len(reports) < 3:
        raise ValueError("correlation needs at least 3 model rows")
    table = np.array(
        [
            [getattr(r, f) if hasattr(r, f) else r[f] for f in fields]
            if not isinstance(r, (list, tuple, np.ndarray))
            else list(r)
            for r in reports
        ],
        dtype=np.float64,
    )
    centred = table - table.mean(axis=0)
    norms = np.sqrt((centred ** 2).sum(axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = (centred.T @ centred) / np.outer(norms, norms)
    zero = norms == 0
    corr[zero, :] = np.nan
    corr[:, zero] = np.nan
    idx = np.flatnonzero(~zero)
    corr[idx, idx] = 1.0
    return np.clip(corr, -1.0, 1.0)


def evaluate(
    approach: str,
    scores,
    gt,
    brain_masks,
    postproc_cfg: Optional[PostprocConfig] = None,
    op_threshold: Optional[float] = None,
    bin_count: int = N_BINS,
) -> tuple:
    """Full report for one approach on one pooled dataset.

    ``scores`` are post-processed continuous volumes.  When ``op_threshold``
    is None the best-DICE threshold of this dataset is used for the
    per-patient DICE.  Returns ``(EvalReport, ResidualHistograms)``.
    """
    cfg = postproc_cfg or PostprocConfig()
    scores, gt, brain_masks = _as_list(scores), _as_list(gt), _as_list(brain_masks)
    flat_s = np.concatenate([np.asarray(s)[m] for s, m in zip(scores, brain_masks)])
    flat_y = np.concatenate([np.asarray(g)[m] for g, m in zip(gt, brain_masks)])
    roc = auroc(flat_s, flat_y)
    prc = auprc(flat_s, flat_y)
    best, t_best = greedy_best_dice(scores, gt, cfg)
    t = t_best if op_threshold is None else op_threshold
    d_mean, d_std, _ = dice_at_op(scores, gt, t, cfg)
    (rn, rn_s), (ra, ra_s) = residual_stats(scores, gt, brain_masks)
    hists = residual_histograms(scores, gt, brain_masks, bin_count)
    chi = chi_square_distance(hists.normal_hist, hists.anom_hist)
    report = EvalReport(
        approach=approach,
        auroc=roc,
        auprc=prc,
        best_dice=best,
        best_threshold=t_best,
        dice_mean=d_mean,
        dice_std=d_std,
        re_normal_mean=rn,
        re_normal_std=rn_s,
        re_anom_mean=ra,
        re_anom_std=ra_s,
        chi_sq=chi,
        extra={"op_threshold": t, "prevalence": float(flat_y.mean())},
    )
    return report, hists
