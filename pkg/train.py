"""
train.py – DepthAug3D
Adam optimisation under cross-entropy + l2, early stopping on validation
accuracy, per-epoch diagnostics and the history table writer.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import softmax

import config
from augment import SeededRng
from errors import ConfigError, EmptySplit, ShapeMismatch
from helpers import atomic_write_text
from nn import Model, softmax_crossentropy

logger = logging.getLogger(__name__)

QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)
HISTORY_COLUMNS = ['epoch', 'loss', 'train_acc', 'val_acc'] + [f"p{int(q * 100):02d}" for q in QUANTILES]


# ── Configuration ─────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = config.LEARNING_RATE
    l2_weight: float = config.L2_WEIGHT
    max_epochs: int = config.MAX_EPOCHS
    patience: int = config.PATIENCE
    batch_size: int = config.BATCH_SIZE
    adam_beta1: float = config.ADAM_BETA1
    adam_beta2: float = config.ADAM_BETA2
    adam_epsilon: float = config.ADAM_EPSILON
    drop_last: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ('learning_rate', 'max_epochs', 'patience', 'batch_size', 'adam_epsilon'):
            if not getattr(self, name) > 0:
                raise ConfigError(f"train.{name} must be positive, got {getattr(self, name)}")
        if self.l2_weight < 0:
            raise ConfigError(f"train.l2_weight must be >= 0, got {self.l2_weight}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.patience > self.max_epochs:
            raise ConfigError(f"patience ({self.patience}) exceeds max_epochs ({self.max_epochs})")

    @classmethod
    def from_config(cls, section: Dict[str, Any], **changes) -> 'TrainConfig':
        known = {k: section[k] for k in cls.__dataclass_fields__ if k in section}
        known.update(changes)
        return cls(**known)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


# ── Adam ──────────────────────────────────────────────────────────────────────

@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Dict[str, np.ndarray]) -> 'AdamState':
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )

    def to_dict(self) -> Dict[str, Any]:
        return {'t': self.t, 'm': self.m, 'v': self.v}

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> Optional['AdamState']:
        if data is None:
            return None
        return cls(m=dict(data['m']), v=dict(data['v']), t=int(data['t']))


def adam_step(params: Dict[str, np.ndarray],
              grads: Dict[str, np.ndarray],
              state: AdamState,
              cfg: TrainConfig) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """
    One bias-corrected Adam update, applied to *params* in place.

    Raises:
        ShapeMismatch: If the keys or shapes of params, grads and state disagree.
    """
    if set(params) != set(grads):
        raise ShapeMismatch("Parameter and gradient names differ")
    if not state.m:
        state.m = {k: np.zeros_like(p) for k, p in params.items()}
        state.v = {k: np.zeros_like(p) for k, p in params.items()}

    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    correction1 = 1.0 - b1 ** state.t
    correction2 = 1.0 - b2 ** state.t

    for name, p in params.items():
        g = grads[name]
        m, v = state.m.get(name), state.v.get(name)
        if m is None or np.shape(g) != np.shape(p) or np.shape(m) != np.shape(p):
            raise ShapeMismatch(f"Shape mismatch for parameter '{name}'")
        m[...] = b1 * m + (1 - b1) * g
        v[...] = b2 * v + (1 - b2) * g * g
        p[...] -= cfg.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + cfg.adam_epsilon)
    return params, state


# ── Loss ──────────────────────────────────────────────────────────────────────

def l2_penalty(params: Dict[str, np.ndarray], names: Sequence[str],
               weight: float) -> Tuple[float, Dict[str, np.ndarray]]:
    """weight * sum(w^2) over *names*, and its gradient 2 * weight * w."""
    value = float(weight * sum(float(np.sum(params[n] ** 2)) for n in names))
    return value, {n: 2.0 * weight * params[n] for n in names}


def _loss_and_grads(model: Model, batch: np.ndarray, labels: np.ndarray,
                    cfg: TrainConfig, mode: str = 'train') -> Tuple[float, Dict[str, np.ndarray], np.ndarray]:
    logits, _ = model.forward(batch, mode)
    data_loss, grad_logits = softmax_crossentropy(logits, labels)
    model.zero_grad()
    model.backward(grad_logits)

    params = model.parameters()
    penalty, penalty_grads = l2_penalty(params, model.decay_names(), cfg.l2_weight)
    grads = {k: g.copy() for k, g in model.gradients().items()}
    for name, g in penalty_grads.items():
        grads[name] += g
    return data_loss + penalty, grads, logits


def total_loss(model: Model, batch: np.ndarray, labels, cfg: TrainConfig,
               mode: str = 'train') -> Tuple[float, Dict[str, np.ndarray]]:
    """
    Mean cross-entropy plus cfg.l2_weight * sum(w^2) over conv and FC
    weights (biases and BN parameters excluded).

    Returns:
        (loss, grads) with grads keyed like model.parameters().
    """
    loss, grads, _ = _loss_and_grads(model, batch, np.asarray(labels), cfg, mode)
    return loss, grads


# ── Data plumbing ─────────────────────────────────────────────────────────────

def as_arrays(dataset) -> Tuple[np.ndarray, np.ndarray]:
    """
    Accept either a sequence of (Volume3D, label) pairs or an (X, y) pair
    of arrays and return X shaped (n, 1, nx, ny, nz) plus integer labels.
    """
    if isinstance(dataset, tuple) and len(dataset) == 2 and isinstance(dataset[0], np.ndarray):
        x, y = dataset
        return x, np.asarray(y, dtype=np.int64)
    samples = list(dataset)
    if not samples:
        return np.empty((0, 1, 1, 1, 1)), np.empty(0, dtype=np.int64)
    x = np.stack([vol.data for vol, _ in samples])[:, None]
    y = np.asarray([label for _, label in samples], dtype=np.int64)
    return x, y


def _batches(n: int, batch_size: int, order: np.ndarray, drop_last: bool):
    """
    Index chunks of *batch_size*. A trailing single sample joins the batch
    before it so train-mode BatchNorm never sees a batch of one.
    """
    starts = list(range(0, n, batch_size))
    if not drop_last and len(starts) > 1 and n - starts[-1] == 1:
        starts.pop()
    for i, start in enumerate(starts):
        stop = starts[i + 1] if i + 1 < len(starts) else n
        idx = order[start:stop]
        if drop_last and len(idx) < batch_size:
            return
        yield idx


# ── Evaluation ────────────────────────────────────────────────────────────────

class Evaluation(NamedTuple):
    accuracy: float
    probabilities: np.ndarray
    logits: np.ndarray


def evaluate(model: Model, dataset, batch_size: int = config.BATCH_SIZE) -> Evaluation:
    """
    Infer-mode forward over *dataset*.

    Raises:
        EmptySplit: If the set has no samples.
    """
    x, y = as_arrays(dataset)
    if len(y) == 0:
        raise EmptySplit("Cannot evaluate an empty set")

    chunks = []
    for start in range(0, len(y), batch_size):
        logits, _ = model.forward(x[start:start + batch_size], 'infer')
        chunks.append(logits)
    logits = np.concatenate(chunks)
    probabilities = softmax(logits, axis=1)
    accuracy = float(np.mean(logits.argmax(axis=1) == y))
    return Evaluation(accuracy, probabilities, logits)


# ── Early stopping ────────────────────────────────────────────────────────────

class EarlyStopping:
    """
    Tracks the best validation score. Only strict improvements reset the
    wait counter; stopping is due once *patience* epochs pass without one.
    """

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best_score = -math.inf
        self.best_epoch = 0
        self.best_state = None
        self.wait = 0

    def update(self, epoch: int, score: float, state: Any = None) -> bool:
        """Record *score* for *epoch*; return True when training should stop."""
        if score > self.best_score:
            self.best_score = score
            self.best_epoch = epoch
            self.best_state = state
            self.wait = 0
        else:
            self.wait += 1
        return self.wait >= self.patience


# ── History ───────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    train_acc: float
    val_acc: float
    prob_quantiles: Tuple[float, ...]

    def to_row(self) -> Dict[str, Any]:
        row = {'epoch': self.epoch, 'loss': self.loss, 'train_acc': self.train_acc, 'val_acc': self.val_acc}
        row.update(zip(HISTORY_COLUMNS[4:], self.prob_quantiles))
        return row


@dataclass
class TrainHistory:
    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    def __len__(self):
        return len(self.records)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.to_row() for r in self.records], columns=HISTORY_COLUMNS)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> 'TrainHistory':
        records = [
            EpochRecord(int(row['epoch']), float(row['loss']), float(row['train_acc']), float(row['val_acc']),
                        tuple(float(row[c]) for c in HISTORY_COLUMNS[4:]))
            for _, row in frame.iterrows()
        ]
        best = int(frame['val_acc'].to_numpy().argmax()) + 1 if len(frame) else 0
        return cls(records, best)


def write_history(path: Union[str, Path], history: TrainHistory) -> None:
    """Tab-separated history table, one row per epoch."""
    atomic_write_text(path, history.to_frame().to_csv(sep='\t', index=False, float_format='%.10g'))


def read_history(path: Union[str, Path]) -> TrainHistory:
    return TrainHistory.from_frame(pd.read_csv(path, sep='\t'))


# ── Training loop ─────────────────────────────────────────────────────────────

def fit(model: Model, train_set, val_set, cfg: TrainConfig,
        optimizer: Optional[AdamState] = None) -> Tuple[Model, TrainHistory, int]:
    """
    Train *model* with seeded minibatch shuffling and early stopping on
    validation accuracy. The best-epoch parameters are restored before
    returning.

    Args:
        model:     Freshly built (or resumed) model; trained in place.
        train_set: (Volume3D, label) pairs or an (X, y) array pair.
        val_set:   Same forms; never augmented.
        cfg:       TrainConfig.
        optimizer: Optional AdamState; updated in place so callers can
                   checkpoint it.

    Returns:
        (model, history, stopped_epoch)

    Raises:
        EmptySplit: If either set is empty.
    """
    x_train, y_train = as_arrays(train_set)
    x_val, y_val = as_arrays(val_set)
    if len(y_train) == 0 or len(y_val) == 0:
        raise EmptySplit(f"fit needs nonempty sets (train={len(y_train)}, val={len(y_val)})")

    rng = SeededRng(cfg.seed)
    shuffle_rng = rng.spawn('shuffle')
    model.set_rng(rng.spawn('dropout'))
    state = optimizer if optimizer is not None else AdamState()
    stopper = EarlyStopping(cfg.patience)
    history = TrainHistory()
    n = len(y_train)
    stopped_epoch = 0

    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(n)
        loss_sum, seen, correct = 0.0, 0, 0
        chosen_probs = []

        for idx in _batches(n, cfg.batch_size, order, cfg.drop_last):
            labels = y_train[idx]
            loss, grads, logits = _loss_and_grads(model, x_train[idx], labels, cfg)
            adam_step(model.parameters(), grads, state, cfg)

            probs = softmax(logits, axis=1)
            predicted = probs.argmax(axis=1)
            correct += int(np.sum(predicted == labels))
            loss_sum += loss * len(idx)
            seen += len(idx)
            chosen_probs.append(probs[np.arange(len(idx)), predicted])

        if seen == 0:
            raise EmptySplit(f"drop_last left no full batch of {cfg.batch_size} in {n} samples")

        val_acc = evaluate(model, (x_val, y_val), cfg.batch_size).accuracy
        quantiles = tuple(float(q) for q in np.quantile(np.concatenate(chosen_probs), QUANTILES))
        record = EpochRecord(epoch, loss_sum / seen, correct / seen, val_acc, quantiles)
        history.records.append(record)
        stopped_epoch = epoch
        logger.info("Epoch %d/%d loss=%.4f train_acc=%.3f val_acc=%.3f",
                    epoch, cfg.max_epochs, record.loss, record.train_acc, val_acc)

        if stopper.update(epoch, val_acc, model.state_dict()):
            logger.info("Early stop at epoch %d (best epoch %d, val_acc=%.3f)",
                        epoch, stopper.best_epoch, stopper.best_score)
            break

    model.load_state_dict(stopper.best_state)
    history.best_epoch = stopper.best_epoch
    return model, history, stopped_epoch
