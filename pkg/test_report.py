# -*- coding: utf-8 -*-
"""Report tables and SVG figures."""
import numpy as np
import pandas as pd
import pytest

from errors import EmptyStore
from experiment import RunKey, RunResult
from metrics import metric_report, roc_curve_points
from report import (
    build_report, plot_embeddings, plot_external, plot_training_curves, write_table,
)
from train import EpochRecord, TrainHistory, write_history


def _history(epochs=4):
    records = [EpochRecord(e, 1.0 / e, 0.5 + 0.1 * e, 0.5 + 0.05 * e, (0.5, 0.6, 0.7, 0.8, 0.9))
               for e in range(1, epochs + 1)]
    return TrainHistory(records, best_epoch=epochs)


def _results(tmp_path):
    history_path = tmp_path / 'history.tsv'
    write_history(history_path, _history())
    report = metric_report([0, 1, 0, 1], [0.2, 0.8, 0.6, 0.7])
    results = []
    for strategy, depth, val in (('A', 4, 0.7), ('B', 4, 0.9), ('B', 8, 0.8)):
        for fold in range(2):
            results.append(RunResult(RunKey(strategy, depth, fold, 0, 0.0), val, val - 0.1, 4, 4, report,
                                     1, 20, 80, history_path=str(history_path)))
    return results


def test_report_needs_runs(tmp_path):
    with pytest.raises(EmptyStore):
        build_report(tmp_path)


def test_report_from_results(tmp_path):
    written = build_report(tmp_path, _results(tmp_path))
    report_dir = tmp_path / 'report'
    grid = pd.read_csv(report_dir / 'grid.tsv', sep='\t')
    assert len(grid) == 3
    assert {'strategy', 'depth', 'val_mean', 'validation', 'testing'} <= set(grid.columns)
    assert (report_dir / 'best_model.tsv').exists()
    confusion = pd.read_csv(report_dir / 'best_confusion.tsv', sep='\t')
    assert confusion[['CN', 'AD']].to_numpy().sum() == 8
    for name in ('folds', 'strategy_depth', 'curves'):
        assert written[name].read_text(encoding='utf-8').lstrip().startswith('<?xml')
    assert written['curves'].name == 'training_curves_B-d4-f0-t0-p0.00.svg'


def test_figures_are_byte_stable(tmp_path):
    first = plot_training_curves(tmp_path / 'a.svg', _history(), title='run')
    second = plot_training_curves(tmp_path / 'b.svg', _history(), title='run')
    assert first.read_bytes() == second.read_bytes()


def test_external_figure(tmp_path):
    labels, p = [0, 1, 0, 1], [0.2, 0.8, 0.6, 0.7]
    report = metric_report(labels, p)
    path = plot_external(tmp_path / 'external.svg', roc_curve_points(labels, p),
                         report.confusion.as_array(), report.roc_auc)
    assert path.exists()


def test_embedding_figure(tmp_path):
    rng = np.random.default_rng(0)
    frame = pd.DataFrame({
        'layer': [1] * 6 + [2] * 6,
        'split': ['train', 'train', 'test'] * 4,
        'id': [f"s{i}" for i in range(12)],
        'label': [0, 1] * 6,
        'x': rng.normal(size=12),
        'y': rng.normal(size=12),
    })
    assert plot_embeddings(tmp_path / 'emb.svg', frame).exists()


def test_write_table(tmp_path):
    write_table(tmp_path / 't.tsv', pd.DataFrame({'a': [1.0 / 3], 'b': ['x']}))
    assert (tmp_path / 't.tsv').read_text(encoding='utf-8') == 'a\tb\n0.333333\tx\n'
