"""
report.py – DepthAug3D
Tables and static SVG figures built from a results store: the grid table,
per-fold validation distributions (depth rows x strategy columns, best
configuration framed in red), the strategy x depth comparison, training
curves, external-evaluation ROC + confusion matrix and t-SNE scatters.
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import matplotlib

matplotlib.use('Agg')
matplotlib.rcParams.update({
    'font.family': 'DejaVu Sans',
    'axes.unicode_minus': False,
    'svg.hashsalt': 'depthaug',
})
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from errors import EmptyStore  # noqa: E402
from experiment import RunResult, Summary, best_model_report, load_results, summarize  # noqa: E402
from helpers import atomic_write_text, ensure_dir  # noqa: E402
from train import TrainHistory, read_history  # noqa: E402

logger = logging.getLogger(__name__)

# SVG output without a creation date, so reruns produce identical files
_SVG_METADATA = {'Date': None}


def _save(fig, path: Union[str, Path]) -> Path:
    path = Path(path)
    ensure_dir(path.parent)
    fig.savefig(path, format='svg', metadata=_SVG_METADATA)
    plt.close(fig)
    logger.debug("Wrote %s", path)
    return path


def write_table(path: Union[str, Path], frame: pd.DataFrame) -> None:
    atomic_write_text(path, frame.to_csv(sep='\t', index=False, float_format='%.6g'))


# ── Grid figures ──────────────────────────────────────────────────────────────

def plot_fold_distributions(path: Union[str, Path], summary: Summary) -> Path:
    """Validation accuracy per fold (over trials), one panel per (depth, strategy)."""
    strategies = sorted({s for s, _ in summary.per_fold})
    depths = sorted({d for _, d in summary.per_fold})
    fig, axes = plt.subplots(len(depths), len(strategies), squeeze=False, sharey=True,
                             figsize=(3.2 * len(strategies), 2.2 * len(depths)), constrained_layout=True)

    for row, depth in enumerate(depths):
        for col, strategy in enumerate(strategies):
            ax = axes[row][col]
            per_fold = summary.per_fold.get((strategy, depth), {})
            folds = sorted(per_fold)
            if folds:
                ax.boxplot([np.asarray(per_fold[f]) * 100 for f in folds])
                ax.set_xticks(range(1, len(folds) + 1), labels=[str(f) for f in folds])
            if (strategy, depth) == tuple(summary.best):
                for spine in ax.spines.values():
                    spine.set_edgecolor('red')
                    spine.set_linewidth(2.0)
            if row == 0:
                ax.set_title(f"Strategy {strategy}")
            if col == 0:
                ax.set_ylabel(f"{depth} CL\nval acc (%)")
            if row == len(depths) - 1:
                ax.set_xlabel("Fold")
            ax.grid(True, alpha=0.3)
    return _save(fig, path)


def plot_strategy_depth(path: Union[str, Path], summary: Summary) -> Path:
    """Mean ± std validation accuracy versus depth, one line per strategy."""
    fig, ax = plt.subplots(figsize=(5, 3.6), constrained_layout=True)
    for strategy, rows in summary.table.groupby('strategy'):
        rows = rows.sort_values('depth')
        ax.errorbar(rows['depth'], rows['val_mean'] * 100, yerr=rows['val_std'] * 100,
                    marker='o', capsize=3, label=f"({strategy})")
    ax.set_xlabel("Convolutional layers")
    ax.set_ylabel("Validation accuracy (%)")
    ax.grid(True, alpha=0.3)
    ax.legend(loc='best', fontsize=8)
    return _save(fig, path)


# ── Training curves ──────────────────────────────────────────────────────────

def plot_training_curves(path: Union[str, Path], history: TrainHistory, title: str = '') -> Path:
    """Loss, predicted-class probability quantiles, train and validation accuracy."""
    frame = history.to_frame()
    epochs = frame['epoch']
    fig, axes = plt.subplots(1, 4, figsize=(14, 3.2), constrained_layout=True)

    axes[0].plot(epochs, frame['loss'])
    axes[0].set_title("Cross-entropy loss")

    axes[1].fill_between(epochs, frame['p05'], frame['p95'], alpha=0.2, label='5-95%')
    axes[1].fill_between(epochs, frame['p25'], frame['p75'], alpha=0.4, label='25-75%')
    axes[1].plot(epochs, frame['p50'], label='median')
    axes[1].set_title("Predicted-class probability")
    axes[1].legend(loc='lower right', fontsize=7)

    axes[2].plot(epochs, frame['train_acc'])
    axes[2].set_title("Training accuracy")
    axes[3].plot(epochs, frame['val_acc'])
    axes[3].set_title("Validation accuracy")
    if history.best_epoch:
        axes[3].axvline(history.best_epoch, color='red', linestyle='--', linewidth=1)

    for ax in axes:
        ax.set_xlabel("Epoch")
        ax.grid(True, alpha=0.3)
    if title:
        fig.suptitle(title)
    return _save(fig, path)


# ── External evaluation ──────────────────────────────────────────────────────

def plot_external(path: Union[str, Path], roc: pd.DataFrame, confusion: np.ndarray, auc: float) -> Path:
    """ROC curve next to the confusion matrix (rows true CN/AD, columns predicted)."""
    fig, (ax_roc, ax_cm) = plt.subplots(1, 2, figsize=(9, 4), constrained_layout=True)
    if len(roc):
        ax_roc.plot(roc['fpr'], roc['tpr'], label=f"AUC = {auc:.2f}")
    ax_roc.plot([0, 1], [0, 1], color='grey', linestyle=':')
    ax_roc.set_xlabel("False positive rate")
    ax_roc.set_ylabel("True positive rate")
    ax_roc.legend(loc='lower right')
    ax_roc.grid(True, alpha=0.3)

    ax_cm.imshow(confusion, cmap='Blues')
    for (i, j), value in np.ndenumerate(confusion):
        ax_cm.text(j, i, str(value), ha='center', va='center')
    ax_cm.set_xticks([0, 1], labels=['CN', 'AD'])
    ax_cm.set_yticks([0, 1], labels=['CN', 'AD'])
    ax_cm.set_xlabel("Predicted")
    ax_cm.set_ylabel("True")
    return _save(fig, path)


# ── Embeddings ────────────────────────────────────────────────────────────────

def plot_embeddings(path: Union[str, Path], frame: pd.DataFrame) -> Path:
    """One t-SNE scatter per layer; colour = class, marker = split."""
    layers = sorted(frame['layer'].unique())
    fig, axes = plt.subplots(1, len(layers), squeeze=False, figsize=(3.2 * len(layers), 3.2),
                             constrained_layout=True)
    for ax, layer in zip(axes[0], layers):
        part = frame[frame['layer'] == layer]
        for (label, split), points in part.groupby(['label', 'split']):
            ax.scatter(points['x'], points['y'], s=10,
                       c='tab:red' if label == 1 else 'tab:blue',
                       marker='o' if split == 'train' else '^',
                       label=f"{'AD' if label == 1 else 'CN'} {split}")
        ax.set_title(f"Layer {layer}")
        ax.set_xticks([])
        ax.set_yticks([])
    axes[0][-1].legend(loc='best', fontsize=7)
    return _save(fig, path)


# ── Full report ───────────────────────────────────────────────────────────────

def build_report(out_dir: Union[str, Path], results: Optional[Sequence[RunResult]] = None) -> Dict[str, Path]:
    """
    Write every table and figure for the runs stored under *out_dir* into
    <out_dir>/report/.

    Raises:
        EmptyStore: If there is no successful run to report.
    """
    results = list(results) if results is not None else load_results(out_dir)
    if not results:
        raise EmptyStore(f"No successful runs stored under {out_dir}")

    report_dir = ensure_dir(Path(out_dir) / 'report')
    summary = summarize(results)
    written: Dict[str, Path] = {}

    write_table(report_dir / 'grid.tsv', summary.table)
    written['grid'] = report_dir / 'grid.tsv'

    metrics_table, confusion = best_model_report(results, summary.best)
    write_table(report_dir / 'best_model.tsv', metrics_table)
    written['best_model'] = report_dir / 'best_model.tsv'
    write_table(report_dir / 'best_confusion.tsv',
                pd.DataFrame(confusion.as_array(), index=['CN', 'AD'], columns=['CN', 'AD'])
                .rename_axis('true').reset_index())

    written['folds'] = plot_fold_distributions(report_dir / 'fold_distributions.svg', summary)
    written['strategy_depth'] = plot_strategy_depth(report_dir / 'strategy_depth.svg', summary)

    best_runs: List[RunResult] = [r for r in sorted(results, key=lambda r: tuple(r.key))
                                  if (r.key.strategy, r.key.depth) == tuple(summary.best)]
    for run in best_runs[:1]:
        if run.history_path and Path(run.history_path).exists():
            history = read_history(run.history_path)
            written['curves'] = plot_training_curves(
                report_dir / f"training_curves_{run.key.tag}.svg", history, title=run.key.tag)

    logger.info("Report written to %s (best: %s, %d CL)", report_dir, *summary.best)
    return written
