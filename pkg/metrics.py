"""
metrics.py – DepthAug3D
Classification metrics (confusion matrix, per-class precision / recall /
F1, ROC-AUC, PR-AUC), trial aggregation and an exact t-SNE used to project
layer embeddings.

AD (label 1) is the positive class wherever a single positive is needed.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.spatial.distance import pdist, squareform
from scipy.stats import rankdata
from sklearn.metrics import average_precision_score, confusion_matrix, precision_recall_fscore_support, roc_curve

import config
from augment import SeededRng
from errors import DegenerateInput, LengthMismatch, NoPositives, SingleClass
from helpers import atomic_write_text, format_mean_std

logger = logging.getLogger(__name__)

CLASSES = ('CN', 'AD')


# ── Confusion matrix & rates ─────────────────────────────────────────────────

@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def as_array(self) -> np.ndarray:
        """Rows = true CN, AD; columns = predicted CN, AD."""
        return np.array([[self.tn, self.fp], [self.fn, self.tp]])

    def __add__(self, other: 'ConfusionMatrix') -> 'ConfusionMatrix':
        return ConfusionMatrix(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)

    def to_dict(self) -> Dict[str, int]:
        return asdict(self)


@dataclass(frozen=True)
class ClassRates:
    precision: float
    recall: float
    f1: float


class RatesResult(NamedTuple):
    confusion: ConfusionMatrix
    per_class: Dict[str, ClassRates]
    accuracy: float
    undefined: List[str]


def _aligned(labels, other, what: str) -> Tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels)
    other = np.asarray(other)
    if labels.ndim != 1 or labels.shape != other.shape:
        raise LengthMismatch(f"labels ({labels.shape}) and {what} ({other.shape}) are not aligned")
    if labels.size == 0:
        raise LengthMismatch(f"labels and {what} are empty")
    return labels.astype(np.int64), other


def confusion_and_rates(labels, predictions) -> RatesResult:
    """
    Confusion matrix plus per-class precision / recall / F1 and accuracy.
    A rate with a zero denominator is reported as 0 and listed in
    ``undefined`` (e.g. ``'AD.precision'``).

    Raises:
        LengthMismatch: If the sequences differ in length or are empty.
    """
    labels, predictions = _aligned(labels, predictions, 'predictions')
    predictions = predictions.astype(np.int64)
    counts = confusion_matrix(labels, predictions, labels=[0, 1])
    (tn, fp), (fn, tp) = counts
    precision, recall, f1, _ = precision_recall_fscore_support(
        labels, predictions, labels=[0, 1], zero_division=0)

    undefined = []
    for c, name in enumerate(CLASSES):
        if counts[:, c].sum() == 0:
            undefined.append(f"{name}.precision")
        if counts[c, :].sum() == 0:
            undefined.append(f"{name}.recall")
    if undefined:
        logger.warning("Zero-denominator rates reported as 0: %s", ', '.join(undefined))

    per_class = {name: ClassRates(float(precision[c]), float(recall[c]), float(f1[c]))
                 for c, name in enumerate(CLASSES)}
    cm = ConfusionMatrix(int(tp), int(tn), int(fp), int(fn))
    return RatesResult(cm, per_class, (cm.tp + cm.tn) / cm.total, undefined)


# ── Ranking metrics ──────────────────────────────────────────────────────────

def roc_auc(labels, scores) -> float:
    """
    Area under the ROC curve as the normalised Mann-Whitney U statistic
    (average ranks, so ties count one half).

    Raises:
        LengthMismatch: If labels and scores are not aligned.
        SingleClass:    If only one class is present.
    """
    labels, scores = _aligned(labels, scores, 'scores')
    positive = labels == 1
    n_pos = int(positive.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("roc_auc needs both classes present")
    ranks = rankdata(np.asarray(scores, dtype=np.float64))
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pr_auc(labels, scores) -> float:
    """
    Area under precision-recall as the step sum over descending unique
    thresholds, sum (R_i - R_{i-1}) * P_i, with no interpolation.

    Raises:
        NoPositives: If no positive label is present.
    """
    labels, scores = _aligned(labels, scores, 'scores')
    if not np.any(labels == 1):
        raise NoPositives("pr_auc needs at least one positive sample")
    return float(average_precision_score(labels, np.asarray(scores, dtype=np.float64)))


def pr_auc_per_class(labels, p_ad) -> Dict[str, float]:
    """PR-AUC with AD scored by p and CN scored by 1 - p."""
    labels = np.asarray(labels, dtype=np.int64)
    p_ad = np.asarray(p_ad, dtype=np.float64)
    return {'CN': pr_auc(1 - labels, 1.0 - p_ad), 'AD': pr_auc(labels, p_ad)}


def roc_curve_points(labels, scores) -> pd.DataFrame:
    """Full ROC curve (fpr, tpr, threshold) for plotting."""
    labels, scores = _aligned(labels, scores, 'scores')
    if len(set(labels.tolist())) < 2:
        raise SingleClass("ROC curve needs both classes present")
    fpr, tpr, thresholds = roc_curve(labels, scores, drop_intermediate=False)
    return pd.DataFrame({'fpr': fpr, 'tpr': tpr, 'threshold': thresholds})


# ── Reports ───────────────────────────────────────────────────────────────────

@dataclass
class MetricReport:
    """One fold's complete evaluation."""

    accuracy: float
    roc_auc: float
    per_class: Dict[str, Dict[str, float]]
    confusion: ConfusionMatrix
    undefined: List[str] = field(default_factory=list)

    def flat(self) -> Dict[str, float]:
        out = {'accuracy': self.accuracy, 'roc_auc': self.roc_auc}
        for name, values in self.per_class.items():
            out.update({f"{name}.{k}": v for k, v in values.items()})
        return out

    def to_dict(self) -> Dict[str, Any]:
        return {'accuracy': self.accuracy, 'roc_auc': self.roc_auc, 'per_class': self.per_class,
                'confusion': self.confusion.to_dict(), 'undefined': list(self.undefined)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'MetricReport':
        return cls(data['accuracy'], data['roc_auc'], data['per_class'],
                   ConfusionMatrix(**data['confusion']), data.get('undefined', []))


def metric_report(labels, p_ad) -> MetricReport:
    """
    Build a MetricReport from labels and AD probabilities. The decision is
    the argmax of (1 - p, p), so p == 0.5 counts as CN.
    ROC-AUC is NaN when a single class is present.
    """
    labels = np.asarray(labels, dtype=np.int64)
    p_ad = np.asarray(p_ad, dtype=np.float64)
    predictions = (p_ad > 0.5).astype(np.int64)
    rates = confusion_and_rates(labels, predictions)

    try:
        auc = roc_auc(labels, p_ad)
        pr = pr_auc_per_class(labels, p_ad)
    except (SingleClass, NoPositives):
        logger.warning("Single-class evaluation set; ranking metrics reported as NaN")
        auc, pr = float('nan'), {'CN': float('nan'), 'AD': float('nan')}

    per_class = {name: {'precision': r.precision, 'recall': r.recall, 'f1': r.f1, 'pr_auc': pr[name]}
                 for name, r in rates.per_class.items()}
    return MetricReport(rates.accuracy, auc, per_class, rates.confusion, rates.undefined)


class Aggregate(NamedTuple):
    mean: float
    std: float
    n: int
    per_fold: Dict[Any, List[float]]

    def formatted(self, percent: bool = True) -> str:
        return format_mean_std(self.mean, self.std, percent=percent)


def aggregate(values: Sequence[float], folds: Optional[Sequence[Any]] = None) -> Aggregate:
    """
    Mean and sample standard deviation (n - 1; 0 for a single value). With
    *folds*, the values are also grouped per fold for distribution plots.
    """
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("aggregate needs at least one value")
    std = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
    per_fold: Dict[Any, List[float]] = {}
    if folds is not None:
        if len(folds) != arr.size:
            raise LengthMismatch("folds and values are not aligned")
        for fold, value in zip(folds, arr):
            per_fold.setdefault(fold, []).append(float(value))
    return Aggregate(float(arr.mean()), std, int(arr.size), per_fold)


def aggregate_reports(reports: Sequence[MetricReport]) -> Tuple[pd.DataFrame, ConfusionMatrix]:
    """
    Mean ± std of every metric over folds, plus the confusion matrix summed
    over folds.

    Returns:
        (table with columns metric, class, mean, std, formatted; summed confusion)
    """
    if not reports:
        raise ValueError("aggregate_reports needs at least one report")
    rows = []
    for metric in ('precision', 'recall', 'f1', 'pr_auc'):
        for name in CLASSES:
            agg = aggregate([r.per_class[name][metric] for r in reports])
            rows.append({'metric': metric, 'class': name, 'mean': agg.mean, 'std': agg.std,
                         'formatted': agg.formatted()})
    for metric in ('accuracy', 'roc_auc'):
        agg = aggregate([getattr(r, metric) for r in reports])
        rows.append({'metric': metric, 'class': 'all', 'mean': agg.mean, 'std': agg.std,
                     'formatted': agg.formatted()})

    total = reports[0].confusion
    for r in reports[1:]:
        total = total + r.confusion
    return pd.DataFrame(rows), total


# ── t-SNE ─────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = config.TSNE_PERPLEXITY
    iterations: int = config.TSNE_ITERATIONS
    learning_rate: float = 200.0
    exaggeration: float = config.TSNE_EXAGGERATION
    exaggeration_iters: int = config.TSNE_EXAGGERATION_ITERS
    momentum_initial: float = 0.5
    momentum_final: float = 0.8
    momentum_switch: int = 250
    min_gain: float = 0.01
    seed: int = 0

    @classmethod
    def from_config(cls, section: Dict[str, Any], **changes) -> 'TsneConfig':
        known = {k: section[k] for k in cls.__dataclass_fields__ if k in section}
        known.update(changes)
        return cls(**known)


class TsneResult(NamedTuple):
    coords: np.ndarray
    kl_trace: List[float]
    affinities: np.ndarray


def _row_entropy(d: np.ndarray, beta: float) -> Tuple[float, np.ndarray]:
    p = np.exp(-(d - d.min()) * beta)
    total = p.sum()
    h = np.log(total) + beta * np.sum((d - d.min()) * p) / total
    return float(h), p / total


def conditional_affinities(sq_distances: np.ndarray, perplexity: float,
                           tol: float = 1e-10, max_iter: int = 200) -> np.ndarray:
    """
    Row-stochastic P(j|i) with a per-row Gaussian precision found by
    bisection so that each row's perplexity matches *perplexity*.
    """
    n = sq_distances.shape[0]
    target = np.log(perplexity)
    p = np.zeros((n, n))
    for i in range(n):
        d = np.delete(sq_distances[i], i)
        beta, lo, hi = 1.0, 0.0, np.inf
        h, row = _row_entropy(d, beta)
        for _ in range(max_iter):
            if abs(h - target) < tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = (beta + lo) / 2.0
            h, row = _row_entropy(d, beta)
        p[i, np.arange(n) != i] = row
    return p


def row_perplexity(row: np.ndarray) -> float:
    nz = row[row > 0]
    return float(np.exp(-np.sum(nz * np.log(nz))))


def joint_affinities(points: np.ndarray, perplexity: float, floor: float = 1e-12) -> np.ndarray:
    """
    Symmetrised P = (P(j|i) + P(i|j)) / 2n with off-diagonal entries floored
    at *floor* and renormalised, so P sums to 1 with a zero diagonal.
    """
    conditional = conditional_affinities(squareform(pdist(points, 'sqeuclidean')), perplexity)
    p = np.maximum((conditional + conditional.T) / (2.0 * points.shape[0]), floor)
    np.fill_diagonal(p, 0.0)
    return p / p.sum()


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / np.maximum(q[mask], 1e-300))))


def tsne(points, cfg: TsneConfig = TsneConfig()) -> TsneResult:
    """
    Exact t-SNE to 2D: perplexity-calibrated Gaussian input affinities,
    Student-t output affinities, gradient descent with momentum, adaptive
    gains and early exaggeration.

    Returns:
        TsneResult(coords (n, 2), KL trace per iteration starting with the
        initial layout, joint input affinities)

    Raises:
        DegenerateInput: Fewer than 3 points, or all points identical.
        ValueError:      If perplexity is not below the point count.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise DegenerateInput(f"t-SNE needs at least 3 points, got shape {x.shape}")
    n = x.shape[0]
    if not 0 < cfg.perplexity < n:
        raise ValueError(f"perplexity must be in (0, {n}), got {cfg.perplexity}")
    if np.all(x == x[0]):
        raise DegenerateInput("All points are identical")

    p = joint_affinities(x, cfg.perplexity)
    rng = SeededRng(cfg.seed)
    y = rng.normal(0.0, 1e-4, (n, 2))
    update = np.zeros_like(y)
    gains = np.ones_like(y)

    def q_of(y_):
        num = 1.0 / (1.0 + squareform(pdist(y_, 'sqeuclidean')))
        np.fill_diagonal(num, 0.0)
        return num, np.maximum(num / num.sum(), 1e-12)

    num, q = q_of(y)
    kl_trace = [_kl(p, q)]
    for it in range(cfg.iterations):
        exaggeration = cfg.exaggeration if it < cfg.exaggeration_iters else 1.0
        momentum = cfg.momentum_initial if it < cfg.momentum_switch else cfg.momentum_final

        pq = (exaggeration * p - q) * num
        grad = 4.0 * (np.diag(pq.sum(axis=1)) - pq) @ y

        same_sign = (grad > 0) == (update > 0)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        np.maximum(gains, cfg.min_gain, out=gains)
        update = momentum * update - cfg.learning_rate * gains * grad
        y = y + update
        y -= y.mean(axis=0)

        num, q = q_of(y)
        kl_trace.append(_kl(p, q))
        if (it + 1) % 100 == 0:
            logger.debug("t-SNE iteration %d: KL=%.5f", it + 1, kl_trace[-1])

    return TsneResult(y, kl_trace, p)


def write_embedding_table(path: Union[str, Path], frame: pd.DataFrame) -> None:
    """Write 2D coordinates (columns layer, split, id, label, x, y) as TSV."""
    atomic_write_text(path, frame.to_csv(sep='\t', index=False, float_format='%.6g'))
