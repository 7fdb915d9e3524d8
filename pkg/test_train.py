# -*- coding: utf-8 -*-
"""Optimizer, loss, early stopping and the training loop."""
import numpy as np
import pytest

from augment import SeededRng
from errors import ConfigError, EmptySplit, ShapeMismatch
from nn import ArchitectureSpec, DenseLayer, Flatten, Model, build_model
from train import (
    AdamState, EarlyStopping, TrainConfig, _batches, adam_step, as_arrays, evaluate, fit, l2_penalty, read_history,
    total_loss, write_history,
)
from volume import Volume3D

DIMS = (8, 8, 6)


def _toy_set(n_per_class, seed, dims=DIMS):
    """Class 1 carries a bright central cube on top of the shared noise."""
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(2 * n_per_class):
        label = i % 2
        data = rng.normal(0.0, 0.1, size=dims)
        if label:
            data[2:6, 2:6, 2:4] += 1.0
        samples.append((Volume3D(data, source_id=f"t{i}"), label))
    return samples


def _small_model(seed=0, depth=4):
    return build_model(ArchitectureSpec(total_conv_layers=depth, input_dims=DIMS), SeededRng(seed))


# ── TrainConfig ──────────────────────────────────────────────────────────────

def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ConfigError):
        TrainConfig(max_epochs=5, patience=6)
    with pytest.raises(ConfigError):
        TrainConfig(l2_weight=-1.0)


def test_config_from_section_ignores_unknown_keys():
    cfg = TrainConfig.from_config({'learning_rate': 0.01, 'unrelated': 3}, seed=9)
    assert cfg.learning_rate == 0.01
    assert cfg.seed == 9


# ── Adam ──────────────────────────────────────────────────────────────────────

def test_adam_first_step_magnitude():
    cfg = TrainConfig(learning_rate=0.1)
    params = {'x': np.array([1.0, -2.0])}
    adam_step(params, {'x': np.array([2.0, -0.5])}, AdamState(), cfg)
    # bias-corrected first step moves each coordinate by lr * g / (|g| + eps)
    assert params['x'][0] == pytest.approx(1.0 - 0.1 * 2.0 / (2.0 + 1e-8), rel=1e-12)
    assert params['x'][1] == pytest.approx(-2.0 + 0.1 * 0.5 / (0.5 + 1e-8), rel=1e-12)


def test_adam_descends_quadratic_monotonically():
    cfg = TrainConfig(learning_rate=0.001)
    params = {'x': np.array([1.0])}
    state = AdamState()
    previous = 1.0
    for _ in range(500):
        adam_step(params, {'x': 2.0 * params['x']}, state, cfg)
        current = float(params['x'][0])
        assert 0 < current < previous
        previous = current
    assert state.t == 500


def test_adam_converges_on_quadratic():
    cfg = TrainConfig(learning_rate=0.05)
    params = {'x': np.array([1.0])}
    state = AdamState()
    for _ in range(2000):
        adam_step(params, {'x': 2.0 * params['x']}, state, cfg)
    assert abs(params['x'][0]) < 1e-2


def test_adam_rejects_mismatched_inputs():
    cfg = TrainConfig()
    with pytest.raises(ShapeMismatch):
        adam_step({'a': np.zeros(2)}, {'b': np.zeros(2)}, AdamState(), cfg)
    with pytest.raises(ShapeMismatch):
        adam_step({'a': np.zeros(2)}, {'a': np.zeros(3)}, AdamState(), cfg)


def test_adam_state_from_checkpoint_dict():
    assert AdamState.from_dict(None) is None
    state = AdamState.from_dict({'t': 4, 'm': {'a': np.ones(2)}, 'v': {'a': np.ones(2)}})
    assert state.t == 4 and set(state.m) == {'a'}


# ── Loss ──────────────────────────────────────────────────────────────────────

def test_l2_penalty_value_and_grad():
    params = {'w': np.array([1.0, -2.0]), 'b': np.array([5.0])}
    value, grads = l2_penalty(params, ['w'], 0.5)
    assert value == pytest.approx(2.5)
    assert set(grads) == {'w'}
    assert np.allclose(grads['w'], [1.0, -2.0])


def test_total_loss_adds_decay_to_weights_only():
    samples = _toy_set(2, seed=1)
    x, y = as_arrays(samples)
    plain = TrainConfig(l2_weight=0.0)
    decayed = TrainConfig(l2_weight=0.01)

    model = _small_model()
    loss0, grads0 = total_loss(model, x, y, plain)
    loss1, grads1 = total_loss(model, x, y, decayed)

    params = model.parameters()
    expected = 0.01 * sum(float(np.sum(params[n] ** 2)) for n in model.decay_names())
    assert loss1 - loss0 == pytest.approx(expected, rel=1e-9)
    assert np.allclose(grads1['fc.weights'] - grads0['fc.weights'], 0.02 * params['fc.weights'])
    assert np.array_equal(grads1['conv0.bias'], grads0['conv0.bias'])
    assert np.array_equal(grads1['bn0.gamma'], grads0['bn0.gamma'])
    assert set(model.decay_names()) == {'conv0.weights', 'conv1.weights', 'conv2.weights', 'conv3.weights',
                                        'fc.weights'}


def test_as_arrays_shapes():
    x, y = as_arrays(_toy_set(3, seed=2))
    assert x.shape == (6, 1) + DIMS
    assert list(y) == [0, 1, 0, 1, 0, 1]
    same_x, same_y = as_arrays((x, y))
    assert same_x is x and np.array_equal(same_y, y)


# ── Evaluation ────────────────────────────────────────────────────────────────

def test_evaluate_constant_classifier():
    features = int(np.prod(DIMS))
    model = Model([Flatten(), DenseLayer(np.zeros((features, 2)), np.array([1.0, 0.0]))])
    samples = _toy_set(2, seed=3) + [_toy_set(1, seed=4)[0]]
    result = evaluate(model, samples, batch_size=2)
    assert result.accuracy == pytest.approx(3 / 5)
    assert result.probabilities.shape == (5, 2)
    assert np.allclose(result.probabilities.sum(axis=1), 1.0)
    assert np.allclose(result.probabilities[:, 0], np.e / (np.e + 1))


def test_evaluate_empty_set():
    with pytest.raises(EmptySplit):
        evaluate(_small_model(), [])


# ── Early stopping ────────────────────────────────────────────────────────────

def test_early_stopping_counts_only_strict_improvements():
    stopper = EarlyStopping(patience=2)
    assert not stopper.update(1, 0.5, 'e1')
    assert not stopper.update(2, 0.6, 'e2')
    assert not stopper.update(3, 0.6, 'e3')
    assert stopper.update(4, 0.55, 'e4')
    assert stopper.best_epoch == 2
    assert stopper.best_state == 'e2'


def test_early_stopping_patience_positive():
    with pytest.raises(ValueError):
        EarlyStopping(0)


# ── fit ───────────────────────────────────────────────────────────────────────

def test_fit_is_deterministic_and_restores_best():
    train_set, val_set = _toy_set(6, seed=5), _toy_set(3, seed=6)
    cfg = TrainConfig(max_epochs=4, patience=4, batch_size=4, seed=11)

    model_a, history_a, stopped_a = fit(_small_model(1), train_set, val_set, cfg)
    model_b, history_b, stopped_b = fit(_small_model(1), train_set, val_set, cfg)

    assert stopped_a == stopped_b == len(history_a)
    assert history_a.to_frame().equals(history_b.to_frame())
    for key, value in model_a.state_dict().items():
        assert np.array_equal(value, model_b.state_dict()[key])

    best = history_a.records[history_a.best_epoch - 1]
    assert evaluate(model_a, val_set, batch_size=4).accuracy == best.val_acc


def test_fit_early_stops():
    # four validation samples allow at most five distinct accuracies
    train_set, val_set = _toy_set(4, seed=7), _toy_set(2, seed=8)
    cfg = TrainConfig(max_epochs=6, patience=1, batch_size=4)
    _, history, stopped = fit(_small_model(2), train_set, val_set, cfg)
    scores = [r.val_acc for r in history.records]
    assert len(scores) == stopped
    assert history.best_epoch == int(np.argmax(scores)) + 1
    assert stopped - history.best_epoch == 1


def test_fit_history_columns(tmp_path):
    cfg = TrainConfig(max_epochs=2, patience=2, batch_size=3)
    _, history, _ = fit(_small_model(3), _toy_set(3, seed=9), _toy_set(2, seed=10), cfg)
    frame = history.to_frame()
    assert list(frame.columns[:4]) == ['epoch', 'loss', 'train_acc', 'val_acc']
    quantiles = frame[['p05', 'p25', 'p50', 'p75', 'p95']].to_numpy()
    assert np.all(quantiles >= 0.5) and np.all(quantiles <= 1.0)
    assert np.all(np.diff(quantiles, axis=1) >= 0)

    path = tmp_path / 'history.tsv'
    write_history(path, history)
    back = read_history(path)
    assert len(back) == len(history)
    assert back.records[0].epoch == 1
    assert back.records[-1].val_acc == history.records[-1].val_acc


def test_fit_rejects_empty_sets():
    cfg = TrainConfig(max_epochs=1, patience=1)
    with pytest.raises(EmptySplit):
        fit(_small_model(), _toy_set(2, seed=11), [], cfg)
    with pytest.raises(EmptySplit):
        fit(_small_model(), _toy_set(1, seed=12), _toy_set(1, seed=13),
            TrainConfig(max_epochs=1, patience=1, batch_size=8, drop_last=True))


@pytest.mark.slow
def test_fit_learns_separable_toy_problem():
    cfg = TrainConfig(learning_rate=0.01, max_epochs=49, patience=49, batch_size=8, seed=3)
    _, history, _ = fit(_small_model(4), _toy_set(12, seed=14), _toy_set(10, seed=15), cfg)
    assert max(r.val_acc for r in history.records) >= 0.95
    assert history.records[-1].loss < history.records[0].loss


# ── Minibatching ─────────────────────────────────────────────────────────────

@pytest.mark.parametrize('n, batch_size, sizes', [
    (6, 3, [3, 3]),
    (7, 3, [3, 4]),
    (51, 50, [51]),
    (101, 50, [50, 51]),
    (1, 50, [1]),
])
def test_trailing_single_sample_joins_previous_batch(n, batch_size, sizes):
    chunks = list(_batches(n, batch_size, np.arange(n), drop_last=False))
    assert [len(c) for c in chunks] == sizes
    assert np.array_equal(np.concatenate(chunks), np.arange(n))


def test_drop_last_still_drops_short_tail():
    assert [len(c) for c in _batches(51, 50, np.arange(51), drop_last=True)] == [50]


def test_fit_one_sample_past_a_full_batch():
    # block 4 runs at 1x1x1 for this input, so a lone sample would leave BN one value per channel
    dims = (32, 32, 25)
    rng = np.random.default_rng(21)
    train_set = [(Volume3D(rng.normal(size=dims), source_id=f"n{i}"), i % 2) for i in range(51)]
    val_set = [(Volume3D(rng.normal(size=dims), source_id=f"v{i}"), i % 2) for i in range(4)]
    model = build_model(ArchitectureSpec(total_conv_layers=4, input_dims=dims), SeededRng(0))
    _, history, stopped = fit(model, train_set, val_set, TrainConfig(max_epochs=1, patience=1, batch_size=50))
    assert stopped == 1
    assert len(history) == 1
    assert np.isfinite(history.records[0].loss)
