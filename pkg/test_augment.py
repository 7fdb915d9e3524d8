# -*- coding: utf-8 -*-
"""Augmentation parameters, affine construction and the A/B/C expansion law."""
import math

import numpy as np
import pytest

from augment import (
    AugmentParams, AugmentRanges, SeededRng, Strategy, augment_set, replay_augmentation, sample_params,
    source_ids, to_affine, write_augmentation_log,
)
from helpers import read_jsonl
from volume import Volume3D


def _samples(n, dims=(5, 4, 3), seed=0):
    rng = np.random.default_rng(seed)
    return [(Volume3D(rng.normal(size=dims), source_id=f"s{i}"), i % 2) for i in range(n)]


# ── SeededRng ─────────────────────────────────────────────────────────────────

def test_same_seed_same_stream():
    a, b = SeededRng(42), SeededRng(42)
    assert np.array_equal(a.uniform(0, 1, 10), b.uniform(0, 1, 10))
    assert a.position == b.position == 1


def test_spawned_streams_differ():
    root = SeededRng(42)
    assert root.spawn('augment').seed != root.spawn('init').seed
    assert root.spawn('augment').seed == SeededRng(42).spawn('augment').seed


# ── sample_params ────────────────────────────────────────────────────────────

def test_zoom_kind_leaves_other_fields_identity():
    p = sample_params('zoom', SeededRng(1))
    assert p.shift == (0.0, 0.0, 0.0)
    assert p.angles == (0.0, 0.0, 0.0)
    assert 0.8 <= p.zoom <= 1.2


def test_all_kind_within_ranges():
    rng = SeededRng(2)
    ranges = AugmentRanges()
    for _ in range(200):
        p = sample_params('all', rng, ranges)
        assert p.within(ranges)
        assert all(abs(s) < 0.4 for s in p.shift)


def test_forced_identity_draws():
    p = sample_params('shift', SeededRng(3), AugmentRanges.identity())
    assert p == AugmentParams()


def test_same_seed_same_params():
    assert sample_params('all', SeededRng(9)) == sample_params('all', SeededRng(9))


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        sample_params('shear', SeededRng(0))


# ── to_affine ─────────────────────────────────────────────────────────────────

def test_identity_params_identity_transform():
    t = to_affine(AugmentParams(), (8, 8, 8))
    assert t.is_identity()
    assert np.allclose(t.center, 3.5)


def test_pure_zoom_matrix():
    t = to_affine(AugmentParams(zoom=1.2), (8, 8, 8))
    assert np.allclose(t.linear, np.diag([1.2, 1.2, 1.2]))
    assert not np.any(t.translation)


def test_x_rotation_closed_form():
    t = to_affine(AugmentParams(angles=(5.0, 0.0, 0.0)), (8, 8, 8))
    c, s = math.cos(math.radians(5)), math.sin(math.radians(5))
    expected = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    assert np.allclose(t.linear, expected, atol=1e-15)


def test_shift_is_fraction_of_axis_length():
    t = to_affine(AugmentParams(shift=(0.25, -0.5, 0.1)), (8, 4, 10))
    assert np.allclose(t.translation, [2.0, -2.0, 1.0])


def test_zoom_must_be_positive():
    with pytest.raises(ValueError):
        AugmentParams(zoom=0.0)


# ── augment_set ──────────────────────────────────────────────────────────────

def test_cardinality_law_for_random_sizes():
    picker = np.random.default_rng(11)
    for n in picker.integers(1, 51, size=4):
        samples = _samples(int(n), dims=(3, 3, 2))
        labels = sorted(label for _, label in samples)
        for strategy, factor in (('A', 2), ('B', 4), ('C', 4)):
            out = augment_set(samples, strategy, SeededRng(int(n)))
            assert len(out.samples) == factor * n
            assert len(out.log) == (factor - 1) * n
            assert sorted(label for _, label in out.samples) == sorted(labels * factor)
            assert all(vol.dims == (3, 3, 2) for vol, _ in out.samples)


def test_originals_come_first():
    samples = _samples(3)
    out = augment_set(samples, 'A', SeededRng(0))
    for (orig, _), (kept, _) in zip(samples, out.samples[:3]):
        assert kept is orig


def test_drop_originals():
    out = augment_set(_samples(5), 'B', SeededRng(0), keep_originals=False)
    assert len(out.samples) == 15


def test_identity_params_bit_identical():
    samples = _samples(4)
    out = augment_set(samples, 'C', SeededRng(5), AugmentRanges.identity())
    for vol, _ in out.samples[4:]:
        source = next(v for v, _ in samples if vol.source_id.startswith(v.source_id + '#'))
        assert np.array_equal(vol.data, source.data)


def test_deterministic_under_seed():
    samples = _samples(3)
    a = augment_set(samples, 'C', SeededRng(77))
    b = augment_set(samples, 'C', SeededRng(77))
    for (va, la), (vb, lb) in zip(a.samples, b.samples):
        assert la == lb
        assert np.array_equal(va.data, vb.data)
    assert a.log == b.log


def test_strategy_b_one_variant_per_kind():
    out = augment_set(_samples(1), 'B', SeededRng(8))
    assert [r['kind'] for r in out.log] == ['zoom', 'shift', 'rotation']
    zoom, shift, rotation = out.log
    assert zoom['shift'] == [0.0, 0.0, 0.0] and zoom['angles'] == [0.0, 0.0, 0.0]
    assert shift['zoom'] == 1.0 and shift['angles'] == [0.0, 0.0, 0.0]
    assert rotation['zoom'] == 1.0 and rotation['shift'] == [0.0, 0.0, 0.0]


def test_integer_shift_is_exact_translation():
    data = np.zeros((8, 8, 8))
    data[3, 3, 3] = 1.0
    vol = Volume3D(data, source_id='dot')
    record = {'zoom': 1.0, 'shift': [2 / 8, 0.0, 0.0], 'angles': [0.0, 0.0, 0.0]}
    out = replay_augmentation(vol, record)
    assert out.data[5, 3, 3] == 1.0
    assert np.count_nonzero(out.data) == 1


def test_log_replays_exactly(tmp_path):
    samples = _samples(2)
    out = augment_set(samples, 'A', SeededRng(13))
    path = tmp_path / 'augmentation.jsonl'
    write_augmentation_log(path, out.log)
    records = read_jsonl(path)
    assert len(records) == 2
    by_id = {vol.source_id: vol for vol, _ in samples}
    for record, (augmented, _) in zip(records, out.samples[2:]):
        rebuilt = replay_augmentation(by_id[record['source_id']], record)
        assert np.array_equal(rebuilt.data, augmented.data)
    assert source_ids(records) == {'s0', 's1'}


def test_strategy_metadata():
    assert Strategy('A').multiplier == 1
    assert Strategy('B').kinds == ('zoom', 'shift', 'rotation')
    assert Strategy('C').multiplier == 3


def test_empty_set_rejected():
    with pytest.raises(ValueError):
        augment_set([], 'A', SeededRng(0))
