"""
experiment.py – DepthAug3D
Orchestrates the studies: the strategy x depth grid over K folds and
repeated trials, the dropout ablation, external (domain-shift) evaluation,
summaries with best-model selection and per-layer embedding projections.

Every run writes a self-contained directory under <out>/runs/<tag>/:
    config.json         resolved config snapshot + run key
    seeds.json          seed ledger (master, fold, run, augment, init, train)
    augmentation.jsonl  one record per augmented sample
    history.tsv         per-epoch training history
    model.ckpt          best-epoch weights + Adam state
    metrics.json        validation / test accuracy and the test MetricReport
Results are appended to the SQLite store (<out>/results.db) as runs finish.
"""

import hashlib
import logging
import tempfile
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

import config as defaults
import database
from augment import AugmentRanges, RNG_ALGORITHM, SeededRng, Strategy, augment_set, source_ids, \
    write_augmentation_log
from dataset import load_manifest, load_samples, materialize_split, stratified_kfold
from errors import ConfigError, LeakageError, ShapeMismatch
from helpers import ensure_dir, format_mean_std, mix_seed, read_json, write_json
from metrics import (
    MetricReport, TsneConfig, aggregate, aggregate_reports, metric_report, roc_curve_points, tsne,
)
from nn import ArchitectureSpec, build_model, load_checkpoint, save_checkpoint
from train import AdamState, TrainConfig, evaluate, fit, write_history
from volume import Volume3D, preprocess_volume

logger = logging.getLogger(__name__)

ABLATION_COLUMNS = ['Dropout', 'Validation accuracy', 'Testing accuracy', 'N. epochs']

Sample = Tuple[Volume3D, int]


# ── Plan & keys ───────────────────────────────────────────────────────────────

class RunKey(NamedTuple):
    strategy: str
    depth: int
    fold: int
    trial: int
    dropout: float = 0.0

    @property
    def tag(self) -> str:
        return f"{self.strategy}-d{self.depth}-f{self.fold}-t{self.trial}-p{self.dropout:.2f}"

    @classmethod
    def from_row(cls, row: Dict[str, Any]) -> 'RunKey':
        return cls(row['strategy'], int(row['depth']), int(row['fold']), int(row['trial']), float(row['dropout']))


def derive_seed(master: int, strategy: str, depth: int, fold: int, trial: int, dropout: float) -> int:
    """Per-run seed: BLAKE2b mix of the master seed and the run tuple."""
    return mix_seed('run', int(master), str(strategy), int(depth), int(fold), int(trial), float(dropout))


@dataclass(frozen=True)
class ExperimentPlan:
    strategies: Tuple[str, ...] = defaults.STRATEGIES
    depths: Tuple[int, ...] = defaults.DEPTHS
    trials: int = defaults.N_TRIALS
    folds: int = defaults.N_FOLDS
    master_seed: int = defaults.MASTER_SEED
    fold_seed: int = 0
    dropout_grid: Tuple[float, ...] = (0.0,)
    ablation_grid: Tuple[float, ...] = defaults.DROPOUT_GRID
    test_folds: Optional[Tuple[int, ...]] = None
    train: TrainConfig = field(default_factory=TrainConfig)
    ranges: AugmentRanges = field(default_factory=AugmentRanges)
    keep_originals: bool = True
    model: Dict[str, Any] = field(default_factory=dict)
    dtype: str = 'float64'
    reference_mode: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'strategies', tuple(str(s) for s in self.strategies))
        object.__setattr__(self, 'depths', tuple(int(d) for d in self.depths))
        for name in ('dropout_grid', 'ablation_grid'):
            object.__setattr__(self, name, tuple(float(p) for p in getattr(self, name)))
        if self.test_folds is not None:
            object.__setattr__(self, 'test_folds', tuple(self.test_folds))
        self.validate()

    def validate(self) -> None:
        if self.trials < 1:
            raise ConfigError(f"plan.trials must be >= 1, got {self.trials}")
        if self.folds < 2:
            raise ConfigError(f"plan.folds must be >= 2, got {self.folds}")
        for s in self.strategies:
            if s not in {x.value for x in Strategy}:
                raise ConfigError(f"Unknown strategy '{s}'")
        for d in self.depths:
            if d not in defaults.DEPTHS:
                raise ConfigError(f"Unknown depth {d}")
        for p in self.dropout_grid + self.ablation_grid:
            if not 0 <= p <= 0.5:
                raise ConfigError(f"Dropout {p} outside [0, 0.5]")
        for f in self.test_folds or ():
            if not 0 <= f < self.folds:
                raise ConfigError(f"Test fold {f} outside 0..{self.folds - 1}")

    @classmethod
    def from_config(cls, cfg: Dict[str, Any]) -> 'ExperimentPlan':
        plan = cfg['plan']
        model = cfg['model']
        augment = cfg['augment']
        return cls(
            strategies=plan['strategies'],
            depths=plan['depths'],
            trials=int(plan['trials']),
            folds=int(plan['folds']),
            master_seed=int(plan['master_seed']),
            fold_seed=int(plan['fold_seed']),
            dropout_grid=plan['dropout_grid'],
            ablation_grid=plan['ablation_grid'],
            test_folds=plan.get('test_folds'),
            train=TrainConfig.from_config(cfg['train']),
            ranges=AugmentRanges.from_config(augment),
            keep_originals=bool(augment['keep_originals']),
            model={k: model[k] for k in ('activation', 'pooling', 'pooling_sizes', 'bn_momentum', 'bn_epsilon')},
            dtype=cfg['runtime']['dtype'],
            reference_mode=bool(cfg['runtime'].get('reference_mode', False)),
        )

    def keys(self) -> List[RunKey]:
        folds = self.test_folds if self.test_folds is not None else tuple(range(self.folds))
        return [RunKey(s, d, f, t, p)
                for s in self.strategies for d in self.depths
                for p in self.dropout_grid for f in folds for t in range(self.trials)]

    def seed_for(self, key: RunKey) -> int:
        return derive_seed(self.master_seed, *key)

    def architecture(self, depth: int, dropout: float, input_dims: Sequence[int]) -> ArchitectureSpec:
        return ArchitectureSpec(
            total_conv_layers=depth,
            input_dims=tuple(input_dims),
            dropout_p=dropout,
            activation=self.model.get('activation', defaults.ACTIVATION),
            pooling=self.model.get('pooling', defaults.POOLING),
            pooling_sizes=tuple(self.model.get('pooling_sizes', defaults.POOLING_SIZES)),
            bn_momentum=self.model.get('bn_momentum', defaults.BN_MOMENTUM),
            bn_epsilon=self.model.get('bn_epsilon', defaults.BN_EPSILON),
        )


def check_seed_collisions(plan: ExperimentPlan, keys: Optional[Sequence[RunKey]] = None) -> Dict[RunKey, int]:
    """
    Raises:
        ConfigError: If two run keys derive the same seed.
    """
    seeds: Dict[int, RunKey] = {}
    for key in keys if keys is not None else plan.keys():
        seed = plan.seed_for(key)
        if seed in seeds and seeds[seed] != key:
            raise ConfigError(f"Seed collision between {seeds[seed]} and {key}")
        seeds[seed] = key
    return {k: s for s, k in seeds.items()}


# ── Results ───────────────────────────────────────────────────────────────────

@dataclass
class RunResult:
    key: RunKey
    val_accuracy: float
    test_accuracy: float
    stopped_epoch: int
    best_epoch: int
    report: MetricReport
    seed: int
    n_train_raw: int
    n_train_augmented: int
    history_path: str = ''
    checkpoint_path: str = ''

    def to_payload(self) -> Dict[str, Any]:
        return {
            'key': self.key._asdict(),
            'val_accuracy': self.val_accuracy,
            'test_accuracy': self.test_accuracy,
            'stopped_epoch': self.stopped_epoch,
            'best_epoch': self.best_epoch,
            'report': self.report.to_dict(),
            'seed': self.seed,
            'n_train_raw': self.n_train_raw,
            'n_train_augmented': self.n_train_augmented,
            'history_path': self.history_path,
            'checkpoint_path': self.checkpoint_path,
        }

    @classmethod
    def from_payload(cls, payload: Dict[str, Any]) -> 'RunResult':
        return cls(
            key=RunKey.from_row(payload['key']),
            val_accuracy=payload['val_accuracy'],
            test_accuracy=payload['test_accuracy'],
            stopped_epoch=payload['stopped_epoch'],
            best_epoch=payload['best_epoch'],
            report=MetricReport.from_dict(payload['report']),
            seed=payload['seed'],
            n_train_raw=payload['n_train_raw'],
            n_train_augmented=payload['n_train_augmented'],
            history_path=payload.get('history_path', ''),
            checkpoint_path=payload.get('checkpoint_path', ''),
        )


# ── Per-run checks ───────────────────────────────────────────────────────────

def check_leakage(train_ids: Sequence[str], augmented_sources: Sequence[str],
                  val_ids: Sequence[str], test_ids: Sequence[str]) -> None:
    """
    Raises:
        LeakageError: If a training or augmentation-source id is in val/test,
                      or val and test overlap.
    """
    held_out = set(val_ids) | set(test_ids)
    leaked = (set(train_ids) | set(augmented_sources)) & held_out
    if leaked:
        raise LeakageError(f"Training ids leaked into held-out sets: {sorted(leaked)[:5]}")
    if set(val_ids) & set(test_ids):
        raise LeakageError("Validation and test sets overlap")


def expected_train_size(n_raw: int, strategy: str, keep_originals: bool = True) -> int:
    """2N for strategy A and 4N for B and C (with originals kept)."""
    return n_raw * (Strategy(strategy).multiplier + (1 if keep_originals else 0))


def _digest(samples: Sequence[Sample]) -> str:
    h = hashlib.blake2b(digest_size=16)
    for vol, _ in samples:
        h.update(vol.data.tobytes())
    return h.hexdigest()


# ── Single run ────────────────────────────────────────────────────────────────

@lru_cache(maxsize=4)
def _cached_cohort(manifest: str, mtime_ns: int) -> Tuple[Tuple[Any, ...], Dict[str, Sample]]:
    records = load_manifest(manifest)
    return tuple(records), load_samples(records)


def _load_cohort(manifest: str) -> Tuple[Tuple[Any, ...], Dict[str, Sample]]:
    """Manifest records and volumes, cached per (path, modification time)."""
    path = Path(manifest).resolve()
    if not path.is_file():
        records = load_manifest(path)
        return tuple(records), load_samples(records)
    return _cached_cohort(str(path), path.stat().st_mtime_ns)


def _input_dims(samples: Dict[str, Sample]) -> Tuple[int, int, int]:
    dims = {vol.dims for vol, _ in samples.values()}
    if len(dims) != 1:
        raise ShapeMismatch(f"Volumes have mixed dims {sorted(dims)}; preprocess them first")
    return dims.pop()


def run_dir_for(out_dir: Union[str, Path], key: RunKey) -> Path:
    return Path(out_dir) / 'runs' / key.tag


def execute_run(key: RunKey, plan: ExperimentPlan, manifest: Union[str, Path],
                out_dir: Union[str, Path], snapshot: Optional[Dict[str, Any]] = None) -> RunResult:
    """
    One (strategy, depth, fold, trial, dropout) run: split, augment the
    training ids only, build with the derived seed, fit, checkpoint, then
    score validation and test with the reloaded checkpoint.
    """
    records, samples = _load_cohort(str(manifest))
    fold_plan = stratified_kfold(records, plan.folds, plan.fold_seed)
    split = materialize_split(fold_plan, key.fold)
    run_dir = ensure_dir(run_dir_for(out_dir, key))

    run_seed = plan.seed_for(key)
    root = SeededRng(run_seed)
    aug_rng, init_rng = root.spawn('augment'), root.spawn('init')
    train_cfg = replace(plan.train, seed=mix_seed(run_seed, 'train'))

    train_raw = [samples[i] for i in split.train]
    val_set = [samples[i] for i in split.val]
    test_set = [samples[i] for i in split.test]
    held_out_digest = _digest(val_set + test_set)

    augmented = augment_set(train_raw, key.strategy, aug_rng, plan.ranges, plan.keep_originals)
    check_leakage(split.train, source_ids(augmented.log), split.val, split.test)
    expected = expected_train_size(len(train_raw), key.strategy, plan.keep_originals)
    if len(augmented.samples) != expected:
        raise RuntimeError(f"Training set has {len(augmented.samples)} samples, expected {expected}")

    write_json(run_dir / 'config.json', {**(snapshot or {}), 'run': key._asdict()})
    write_json(run_dir / 'seeds.json', {
        'algorithm': RNG_ALGORITHM,
        'master_seed': plan.master_seed,
        'fold_seed': plan.fold_seed,
        'run_seed': run_seed,
        'augment_seed': aug_rng.seed,
        'init_seed': init_rng.seed,
        'train_seed': train_cfg.seed,
    })
    write_augmentation_log(run_dir / 'augmentation.jsonl', augmented.log)

    spec = plan.architecture(key.depth, key.dropout, _input_dims(samples))
    model = build_model(spec, init_rng, dtype=np.dtype(plan.dtype))
    optimizer = AdamState()
    logger.info("Run %s: %d train (%d raw), %d val, %d test",
                key.tag, len(augmented.samples), len(train_raw), len(val_set), len(test_set))
    model, history, stopped = fit(model, augmented.samples, val_set, train_cfg, optimizer)

    write_history(run_dir / 'history.tsv', history)
    checkpoint = run_dir / 'model.ckpt'
    save_checkpoint(checkpoint, model, optimizer.to_dict())
    reloaded, _ = load_checkpoint(checkpoint, expected_spec=spec)

    val_eval = evaluate(reloaded, val_set, train_cfg.batch_size)
    test_eval = evaluate(reloaded, test_set, train_cfg.batch_size)
    report = metric_report([label for _, label in test_set], test_eval.probabilities[:, 1])

    if _digest(val_set + test_set) != held_out_digest:
        raise LeakageError(f"Held-out volumes changed during run {key.tag}")

    result = RunResult(
        key=key,
        val_accuracy=val_eval.accuracy,
        test_accuracy=test_eval.accuracy,
        stopped_epoch=stopped,
        best_epoch=history.best_epoch,
        report=report,
        seed=run_seed,
        n_train_raw=len(train_raw),
        n_train_augmented=len(augmented.samples),
        history_path=str(run_dir / 'history.tsv'),
        checkpoint_path=str(checkpoint),
    )
    write_json(run_dir / 'metrics.json', result.to_payload())
    logger.info("Run %s done: val=%.3f test=%.3f epochs=%d", key.tag, val_eval.accuracy, test_eval.accuracy, stopped)
    return result


def _run_job(key: RunKey, plan: ExperimentPlan, manifest: str, out_dir: str,
             snapshot: Optional[Dict[str, Any]]) -> Tuple[RunKey, str, Dict[str, Any]]:
    """Worker entry: never raises, so one failed run cannot abort the pool."""
    try:
        return key, 'ok', execute_run(key, plan, manifest, out_dir, snapshot).to_payload()
    except Exception as e:
        logger.exception("Run %s failed", key.tag)
        return key, 'error', {'key': key._asdict(), 'error': type(e).__name__, 'message': str(e)}


# ── Grid ──────────────────────────────────────────────────────────────────────

def run_grid(plan: ExperimentPlan, manifest: Union[str, Path], out_dir: Union[str, Path],
             jobs: int = 1, snapshot: Optional[Dict[str, Any]] = None,
             keys: Optional[Sequence[RunKey]] = None) -> List[RunResult]:
    """
    Execute every run key not already stored as successful, persisting each
    result as it finishes. Failed runs are stored with status 'error' and do
    not stop their siblings.
    A plan in reference mode runs sequentially whatever *jobs* says.

    Returns:
        Successful RunResults for the plan's keys, in key order.
    """
    keys = list(keys if keys is not None else plan.keys())
    if plan.reference_mode and jobs > 1:
        logger.info("Reference mode: running sequentially instead of %d jobs", jobs)
        jobs = 1
    check_seed_collisions(plan, keys)
    out_dir = ensure_dir(out_dir)
    db_path = database.db_path_for(out_dir)
    database.init_db(db_path)

    done = database.completed_keys(db_path)
    pending = [k for k in keys if tuple(k) not in done]
    logger.info("Grid: %d runs, %d already stored, %d to run (jobs=%d)",
                len(keys), len(keys) - len(pending), len(pending), jobs)

    def record(key: RunKey, status: str, payload: Dict[str, Any], position: int) -> None:
        database.save_run(db_path, tuple(key), status, payload)
        logger.info("[%d/%d] %s %s", position, len(pending), key.tag, status)

    if jobs <= 1:
        for position, key in enumerate(pending, start=1):
            record(*_run_job(key, plan, str(manifest), str(out_dir), snapshot), position)
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_job, k, plan, str(manifest), str(out_dir), snapshot) for k in pending]
            for position, future in enumerate(as_completed(futures), start=1):
                record(*future.result(), position)

    wanted = {tuple(k) for k in keys}
    stored = [RunResult.from_payload(r['payload']) for r in database.get_latest_runs(db_path, status='ok')]
    return sorted((r for r in stored if tuple(r.key) in wanted), key=lambda r: tuple(r.key))


def load_results(out_dir: Union[str, Path]) -> List[RunResult]:
    """Every successful run in an output directory's store."""
    rows = database.get_latest_runs(database.db_path_for(out_dir), status='ok')
    return [RunResult.from_payload(r['payload']) for r in rows]


def replay_run(key: RunKey, plan: ExperimentPlan, manifest: Union[str, Path], out_dir: Union[str, Path],
               snapshot: Optional[Dict[str, Any]] = None) -> bool:
    """Re-run *key* in a scratch directory and compare its history byte-for-byte."""
    original = run_dir_for(out_dir, key) / 'history.tsv'
    with tempfile.TemporaryDirectory(prefix='depthaug-replay-') as scratch:
        execute_run(key, plan, manifest, scratch, snapshot)
        same = (run_dir_for(scratch, key) / 'history.tsv').read_bytes() == original.read_bytes()
    logger.info("Replay of %s %s", key.tag, 'matches' if same else 'DIFFERS')
    return same


# ── Ablation ──────────────────────────────────────────────────────────────────

def run_dropout_ablation(plan: ExperimentPlan, manifest: Union[str, Path], best_config: Tuple[str, int],
                         out_dir: Union[str, Path], jobs: int = 1,
                         dropout_grid: Optional[Sequence[float]] = None) -> pd.DataFrame:
    """
    Re-run the grid restricted to *best_config* across the dropout grid.

    Returns:
        Table with columns Dropout / Validation accuracy / Testing accuracy /
        N. epochs, one row per dropout value.
    """
    strategy, depth = best_config
    grid = tuple(dropout_grid if dropout_grid is not None else plan.ablation_grid)
    sub = replace(plan, strategies=(strategy,), depths=(int(depth),), dropout_grid=grid)
    results = run_grid(sub, manifest, out_dir, jobs=jobs)

    rows = []
    for p in grid:
        runs = [r for r in results if r.key.dropout == float(p)]
        if not runs:
            logger.warning("No successful runs for dropout %.2f", p)
            continue
        val = aggregate([r.val_accuracy for r in runs])
        test = aggregate([r.test_accuracy for r in runs])
        rows.append({
            'Dropout': f"{p:g}",
            'Validation accuracy': format_mean_std(val.mean, val.std),
            'Testing accuracy': format_mean_std(test.mean, test.std),
            'N. epochs': int(round(np.mean([r.stopped_epoch for r in runs]))),
        })
    return pd.DataFrame(rows, columns=ABLATION_COLUMNS)


# ── External evaluation ──────────────────────────────────────────────────────

class ExternalEvaluation(NamedTuple):
    accuracy: float
    report: MetricReport
    roc: pd.DataFrame
    probabilities: np.ndarray
    ids: List[str]


def evaluate_external(checkpoint: Union[str, Path], manifest: Union[str, Path],
                      expected_spec: Optional[ArchitectureSpec] = None,
                      preprocess: bool = False) -> ExternalEvaluation:
    """
    Pure inference of a stored model on an external cohort.

    Args:
        preprocess: Resize + normalise each volume to the model's input dims
                    first (for raw external volumes).

    Raises:
        CheckpointMismatch: If the checkpoint disagrees with *expected_spec*.
    """
    model, _ = load_checkpoint(checkpoint, expected_spec=expected_spec)
    records = load_manifest(manifest)
    samples = load_samples(records)
    ordered = []
    for r in records:
        vol, label = samples[r.id]
        if preprocess:
            vol = preprocess_volume(vol, model.spec.input_dims)
        ordered.append((vol, label))

    result = evaluate(model, ordered)
    labels = np.array([label for _, label in ordered])
    p_ad = result.probabilities[:, 1]
    report = metric_report(labels, p_ad)
    roc = roc_curve_points(labels, p_ad) if len(set(labels.tolist())) == 2 else pd.DataFrame()
    logger.info("External evaluation on %d samples: accuracy=%.3f auc=%.3f",
                len(ordered), result.accuracy, report.roc_auc)
    return ExternalEvaluation(result.accuracy, report, roc, p_ad, [r.id for r in records])


# ── Summaries ─────────────────────────────────────────────────────────────────

@dataclass
class Summary:
    table: pd.DataFrame
    per_fold: Dict[Tuple[str, int], Dict[int, List[float]]]
    best: Tuple[str, int]


def summarize(results: Sequence[RunResult]) -> Summary:
    """
    Validation / test accuracy mean ± std per (strategy, depth) over folds x
    trials, per-fold validation distributions, and the best configuration:
    highest mean validation accuracy, then lower std, then lower depth.
    """
    if not results:
        raise ValueError("summarize needs at least one result")
    ordered = sorted(results, key=lambda r: tuple(r.key))
    groups: Dict[Tuple[str, int], List[RunResult]] = {}
    for r in ordered:
        groups.setdefault((r.key.strategy, r.key.depth), []).append(r)

    rows, per_fold = [], {}
    for (strategy, depth), runs in sorted(groups.items()):
        val = aggregate([r.val_accuracy for r in runs], folds=[r.key.fold for r in runs])
        test = aggregate([r.test_accuracy for r in runs])
        per_fold[(strategy, depth)] = val.per_fold
        rows.append({
            'strategy': strategy, 'depth': depth, 'runs': val.n,
            'val_mean': val.mean, 'val_std': val.std, 'test_mean': test.mean, 'test_std': test.std,
            'epochs_mean': float(np.mean([r.stopped_epoch for r in runs])),
            'validation': val.formatted(), 'testing': test.formatted(),
        })
    table = pd.DataFrame(rows)
    best_row = min(rows, key=lambda row: (-row['val_mean'], row['val_std'], row['depth'], row['strategy']))
    return Summary(table, per_fold, (best_row['strategy'], best_row['depth']))


def best_model_report(results: Sequence[RunResult], best: Tuple[str, int]):
    """Per-class metrics mean ± std over the best configuration's runs, plus the summed confusion."""
    runs = [r for r in sorted(results, key=lambda r: tuple(r.key)) if (r.key.strategy, r.key.depth) == tuple(best)]
    return aggregate_reports([r.report for r in runs])


# ── Embeddings ────────────────────────────────────────────────────────────────

def embed_layers(checkpoint: Union[str, Path], train_set: Sequence[Sample], test_set: Sequence[Sample],
                 cfg: TsneConfig = TsneConfig(), layers: Optional[Sequence[int]] = None,
                 ids: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """
    Project each conv layer's flattened activations of the training and
    test samples to 2D with t-SNE.

    Returns:
        Rows (layer, split, id, label, x, y); layer indices are 1-based.
    """
    model, _ = load_checkpoint(checkpoint)
    samples = list(train_set) + list(test_set)
    splits = ['train'] * len(train_set) + ['test'] * len(test_set)
    ids = list(ids) if ids is not None else [vol.source_id for vol, _ in samples]
    batch = np.stack([vol.data for vol, _ in samples])[:, None]
    _, embeddings = model.forward(batch, 'infer')

    perplexity = min(cfg.perplexity, (len(samples) - 1) / 3.0)
    if perplexity != cfg.perplexity:
        logger.warning("t-SNE perplexity lowered to %.1f for %d points", perplexity, len(samples))
    cfg = replace(cfg, perplexity=perplexity)

    wanted = layers or range(1, len(embeddings) + 1)
    frames = []
    for layer in wanted:
        coords = tsne(embeddings[layer - 1], cfg).coords
        frames.append(pd.DataFrame({
            'layer': layer, 'split': splits, 'id': ids,
            'label': [label for _, label in samples], 'x': coords[:, 0], 'y': coords[:, 1],
        }))
        logger.info("Embedded layer %d (%d features)", layer, embeddings[layer - 1].shape[1])
    return pd.concat(frames, ignore_index=True)


def run_samples(key: RunKey, plan: ExperimentPlan, manifest: Union[str, Path]) -> Tuple[List[Sample], List[Sample]]:
    """Raw training and test samples of one run's split."""
    records, samples = _load_cohort(str(manifest))
    split = materialize_split(stratified_kfold(records, plan.folds, plan.fold_seed), key.fold)
    return [samples[i] for i in split.train], [samples[i] for i in split.test]


def read_run_metrics(out_dir: Union[str, Path], key: RunKey) -> RunResult:
    return RunResult.from_payload(read_json(run_dir_for(out_dir, key) / 'metrics.json'))
