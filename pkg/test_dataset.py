# -*- coding: utf-8 -*-
"""Manifest parsing, fold plans and the synthetic cohort."""
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from dataset import (
    AD, CN, SampleRecord, SyntheticSpec, cavity_region_mask, class_totals, export_fold_plan, generate_synthetic,
    load_manifest, load_samples, materialize_split, oracle_rule_accuracy, stratified_kfold, summarize_manifest,
    write_manifest, write_synthetic_dataset,
)
from errors import DuplicateId, MissingFile, ParseError, TooFewSamples


def _records(n_cn, n_ad):
    records = [SampleRecord(f"cn{i:03d}", Path(f"cn{i}.dav"), CN, 'site-a') for i in range(n_cn)]
    records += [SampleRecord(f"ad{i:03d}", Path(f"ad{i}.dav"), AD, 'site-b') for i in range(n_ad)]
    return records


def _write_table(path, rows):
    path.write_text('\n'.join('\t'.join(row) for row in rows) + '\n', encoding='utf-8')
    return path


# ── Manifest ──────────────────────────────────────────────────────────────────

def test_manifest_resolves_relative_paths(tmp_path):
    (tmp_path / 'a.dav').write_bytes(b'')
    manifest = _write_table(tmp_path / 'm.tsv', [
        ('id', 'path', 'label', 'cohort_tag'),
        ('s1', 'a.dav', 'AD', 'site-a'),
        ('s2', str(tmp_path / 'a.dav'), '0', 'site-b'),
    ])
    records = load_manifest(manifest)
    assert [r.id for r in records] == ['s1', 's2']
    assert records[0].volume_path == tmp_path / 'a.dav'
    assert [r.label for r in records] == [AD, CN]
    assert class_totals(records) == {'CN': 1, 'AD': 1}


def test_manifest_without_cohort_column(tmp_path):
    manifest = _write_table(tmp_path / 'm.tsv', [('id', 'path', 'label'), ('s1', 'x.dav', '1')])
    records = load_manifest(manifest, check_files=False)
    assert records[0].cohort_tag == ''


def test_manifest_errors(tmp_path):
    with pytest.raises(MissingFile):
        load_manifest(tmp_path / 'absent.tsv')

    dup = _write_table(tmp_path / 'dup.tsv', [('id', 'path', 'label'), ('s1', 'a', '0'), ('s1', 'b', '1')])
    with pytest.raises(DuplicateId):
        load_manifest(dup, check_files=False)

    bad_label = _write_table(tmp_path / 'bad.tsv', [('id', 'path', 'label'), ('s1', 'a', 'MCI')])
    with pytest.raises(ParseError):
        load_manifest(bad_label, check_files=False)

    no_label = _write_table(tmp_path / 'cols.tsv', [('id', 'path'), ('s1', 'a')])
    with pytest.raises(ParseError):
        load_manifest(no_label, check_files=False)

    missing_volume = _write_table(tmp_path / 'vol.tsv', [('id', 'path', 'label'), ('s1', 'nope.dav', '0')])
    with pytest.raises(MissingFile):
        load_manifest(missing_volume)


def test_write_manifest_stores_relative_paths(tmp_path):
    records = [SampleRecord('s1', tmp_path / 'volumes' / 's1.dav', AD, 'x')]
    write_manifest(tmp_path / 'manifest.tsv', records)
    frame = pd.read_csv(tmp_path / 'manifest.tsv', sep='\t', dtype=str)
    assert frame.loc[0, 'path'] == 'volumes/s1.dav'
    assert load_manifest(tmp_path / 'manifest.tsv', check_files=False) == records


def test_summarize_manifest_totals():
    table = summarize_manifest(_records(3, 2))
    assert table.loc['site-a', 'CN'] == 3
    assert table.loc['site-b', 'AD'] == 2
    assert table.loc['Total', 'Total'] == 5


# ── Fold plans ────────────────────────────────────────────────────────────────

def test_fold_sizes_for_full_cohort():
    plan = stratified_kfold(_records(307, 243), k=7, seed=3)
    counts = plan.fold_counts()
    assert counts['CN'].tolist() == [44] * 6 + [43]
    assert counts['AD'].tolist() == [35] * 5 + [34] * 2
    assert counts.loc[6, 'Total'] == 77
    assert counts['Total'].sum() == 550


def test_fold_assignment_is_seeded():
    records = _records(30, 20)
    a = stratified_kfold(records, k=5, seed=1)
    b = stratified_kfold(records, k=5, seed=1)
    c = stratified_kfold(records, k=5, seed=2)
    assert a.assignments == b.assignments
    assert a.assignments != c.assignments


def test_too_few_samples():
    with pytest.raises(TooFewSamples):
        stratified_kfold(_records(10, 6), k=7)
    with pytest.raises(ValueError):
        stratified_kfold(_records(10, 10), k=1)


def test_split_schedule_rotates_validation():
    plan = stratified_kfold(_records(21, 14), k=7, seed=0)
    for test, val, train in plan.split_schedule:
        assert val == (test + 1) % 7
        assert len(train) == 5 and test not in train and val not in train
    assert plan.split_schedule[6][1] == 0


def test_materialized_splits_partition_the_cohort():
    records = _records(21, 14)
    plan = stratified_kfold(records, k=7, seed=0)
    everyone = {r.id for r in records}
    seen_as_test = []
    for f in range(7):
        split = materialize_split(plan, f)
        train, val, test = set(split.train), set(split.val), set(split.test)
        assert not (train & val or train & test or val & test)
        assert train | val | test == everyone
        assert test == set(plan.fold_ids(f))
        assert val == set(plan.fold_ids((f + 1) % 7))
        seen_as_test.extend(split.test)
    assert sorted(seen_as_test) == sorted(everyone)
    with pytest.raises(ValueError):
        materialize_split(plan, 7)


def test_export_fold_plan(tmp_path):
    plan = stratified_kfold(_records(7, 7), k=7, seed=0)
    export_fold_plan(tmp_path / 'folds.tsv', plan)
    frame = pd.read_csv(tmp_path / 'folds.tsv', sep='\t')
    assert list(frame.columns) == ['id', 'label', 'fold']
    assert dict(zip(frame['id'], frame['fold'])) == plan.assignments


# ── Synthetic cohort ─────────────────────────────────────────────────────────

SMALL = dict(dims=(16, 16, 12), n_per_class=(6, 6))


def test_synthetic_ids_labels_and_background():
    samples = generate_synthetic(SyntheticSpec(**SMALL))
    assert len(samples) == 12
    assert samples[0][0].source_id == 'syn-CN-0000'
    assert samples[6][0].source_id == 'syn-AD-0000'
    assert [label for _, label in samples] == [CN] * 6 + [AD] * 6
    for vol, _ in samples:
        assert vol.dims == (16, 16, 12)
        assert vol.data[0, 0, 0] == 0.0 and vol.data[-1, -1, -1] == 0.0


def test_synthetic_is_deterministic():
    a = generate_synthetic(SyntheticSpec(seed=5, **SMALL))
    b = generate_synthetic(SyntheticSpec(seed=5, **SMALL))
    c = generate_synthetic(SyntheticSpec(seed=6, **SMALL))
    assert all(np.array_equal(va.data, vb.data) for (va, _), (vb, _) in zip(a, b))
    assert not np.array_equal(a[0][0].data, c[0][0].data)


def test_synthetic_classes_separate_on_cavity_shell():
    spec = SyntheticSpec(**SMALL)
    assert oracle_rule_accuracy(generate_synthetic(spec), spec.cavity_radius, spec.delta) >= 0.95
    assert cavity_region_mask(spec.dims, spec.cavity_radius, spec.delta).any()


def test_synthetic_normalization_switch():
    raw = generate_synthetic(SyntheticSpec(normalize=False, **SMALL))
    normalized = generate_synthetic(SyntheticSpec(**SMALL))
    values = normalized[0][0].data[raw[0][0].data != 0]
    assert abs(values.mean()) < 1e-10
    assert raw[0][0].data.max() > 0.5


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(dims=(0, 4, 4))
    with pytest.raises(ValueError):
        SyntheticSpec(cavity_radius=1.5)
    spec = SyntheticSpec.from_config({'dims': [8, 8, 6], 'seed': 1, 'other': True})
    assert spec.dims == (8, 8, 6) and spec.to_dict()['seed'] == 1


def test_write_synthetic_dataset_round_trip(tmp_path):
    spec = SyntheticSpec(dims=(8, 8, 6), n_per_class=(3, 2))
    manifest = write_synthetic_dataset(spec, tmp_path / 'data')
    records = load_manifest(manifest)
    assert len(records) == 5
    assert {r.cohort_tag for r in records} == {'synthetic-8x8x6'}
    samples = load_samples(records)
    vol, label = samples['syn-AD-0001']
    assert label == AD
    assert vol.dims == (8, 8, 6)
