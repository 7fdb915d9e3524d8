"""
cli.py – DepthAug3D
Command-line entry point.

    python cli.py synth  --config desk.json --out runs/desk
    python cli.py split  --config desk.json --out runs/desk
    python cli.py grid   --config desk.json --out runs/desk --jobs 4
    python cli.py report --out runs/desk

Relative paths in the config's ``paths`` section resolve against --out.
Every failure exits nonzero with one JSON line on stderr.
"""

import argparse
import json
import logging
import logging.handlers
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from config import LOG_FILE_NAME, LOG_LEVEL, load_config
from errors import ConfigError, DepthAugError
from helpers import ensure_dir, write_json

logger = logging.getLogger('depthaug')

_HANDLERS: List[logging.Handler] = []


# ── Logging ───────────────────────────────────────────────────────────────────

def _configure_logging(out_dir: Path, verbose: bool = False) -> None:
    """Set up console + rotating-file logging under the output directory."""
    fmt = logging.Formatter(
        '[%(asctime)s] %(levelname)s %(name)s – %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S',
    )
    level = logging.DEBUG if verbose else getattr(logging, LOG_LEVEL.upper(), logging.INFO)

    root = logging.getLogger()
    for handler in _HANDLERS:
        root.removeHandler(handler)
        handler.close()
    _HANDLERS.clear()

    console = logging.StreamHandler()
    console.setFormatter(fmt)

    file_handler = logging.handlers.RotatingFileHandler(
        out_dir / LOG_FILE_NAME, maxBytes=2_000_000, backupCount=3, encoding='utf-8'
    )
    file_handler.setFormatter(fmt)

    root.setLevel(level)
    for handler in (console, file_handler):
        root.addHandler(handler)
        _HANDLERS.append(handler)


# ── Helpers ───────────────────────────────────────────────────────────────────

def _path(config: Dict[str, Any], key: str, out_dir: Path, required: bool = True) -> Optional[Path]:
    raw = config['paths'].get(key)
    if raw is None:
        if required:
            raise ConfigError(f"paths.{key} is not set (use --set paths.{key}=...)")
        return None
    path = Path(raw)
    return path if path.is_absolute() else out_dir / path


def _single_key(config: Dict[str, Any]):
    from experiment import RunKey
    plan, model = config['plan'], config['model']
    return RunKey(str(plan['strategy']), int(model['depth']), int(plan['test_fold']),
                  int(plan['trial']), float(model['dropout']))


# ── Subcommands ───────────────────────────────────────────────────────────────

def cmd_preprocess(config: Dict[str, Any], out_dir: Path, args) -> None:
    from dataset import SampleRecord, load_manifest, write_manifest
    from volume import preprocess_volume, read_volume, write_volume

    records = load_manifest(_path(config, 'manifest', out_dir))
    target = tuple(config['volume']['target_dims'])
    dest = ensure_dir(out_dir / 'preprocessed')
    written = []
    for record in records:
        vol = preprocess_volume(read_volume(record.volume_path), target, config['volume']['scale_variance'])
        path = dest / 'volumes' / f"{record.id}.dav"
        write_volume(path, vol)
        written.append(SampleRecord(record.id, path, record.label, record.cohort_tag))
    write_manifest(dest / 'manifest.tsv', written)
    logger.info("Preprocessed %d volumes to %s -> %s", len(written), target, dest)


def cmd_synth(config: Dict[str, Any], out_dir: Path, args) -> None:
    from dataset import SyntheticSpec, generate_synthetic, oracle_rule_accuracy, write_synthetic_dataset

    spec = SyntheticSpec.from_config(config['synthetic'])
    samples = generate_synthetic(spec)
    manifest = write_synthetic_dataset(spec, _path(config, 'data_dir', out_dir), samples)
    if samples:
        accuracy = oracle_rule_accuracy(samples, spec.cavity_radius, spec.delta)
        logger.info("Oracle rule accuracy on the synthetic cohort: %.3f", accuracy)
    logger.info("Manifest: %s", manifest)


def cmd_split(config: Dict[str, Any], out_dir: Path, args) -> None:
    from dataset import export_fold_plan, load_manifest, stratified_kfold, summarize_manifest
    from report import write_table

    records = load_manifest(_path(config, 'manifest', out_dir))
    plan = stratified_kfold(records, int(config['plan']['folds']), int(config['plan']['fold_seed']))
    export_fold_plan(out_dir / 'folds.tsv', plan)
    write_table(out_dir / 'fold_counts.tsv', plan.fold_counts().rename_axis('fold').reset_index())
    write_table(out_dir / 'cohorts.tsv', summarize_manifest(records).rename_axis('cohort_tag').reset_index())
    logger.info("Fold plan:\n%s", plan.fold_counts())


def cmd_train(config: Dict[str, Any], out_dir: Path, args) -> None:
    import database
    from experiment import ExperimentPlan, execute_run

    plan = ExperimentPlan.from_config(config)
    key = _single_key(config)
    result = execute_run(key, plan, _path(config, 'manifest', out_dir), out_dir, config)
    db_path = database.db_path_for(out_dir)
    database.init_db(db_path)
    database.save_run(db_path, tuple(key), 'ok', result.to_payload())
    print(json.dumps({'run': key.tag, 'val_accuracy': result.val_accuracy,
                      'test_accuracy': result.test_accuracy, 'stopped_epoch': result.stopped_epoch}))


def cmd_grid(config: Dict[str, Any], out_dir: Path, args) -> None:
    from experiment import ExperimentPlan, run_grid, summarize

    plan = ExperimentPlan.from_config(config)
    results = run_grid(plan, _path(config, 'manifest', out_dir), out_dir,
                       jobs=int(config['runtime']['jobs']), snapshot=config)
    if results:
        summary = summarize(results)
        logger.info("Grid summary:\n%s", summary.table[['strategy', 'depth', 'runs', 'validation', 'testing']])
        logger.info("Best configuration: (%s, %d CL)", *summary.best)


def cmd_ablate(config: Dict[str, Any], out_dir: Path, args) -> None:
    from experiment import ExperimentPlan, load_results, run_dropout_ablation, summarize
    from report import write_table

    plan = ExperimentPlan.from_config(config)
    if args.best:
        strategy, depth = args.best.split(',')
        best = (strategy.strip(), int(depth))
    else:
        stored = load_results(out_dir)
        best = summarize(stored).best if stored else (str(config['plan']['strategy']), int(config['model']['depth']))
    table = run_dropout_ablation(plan, _path(config, 'manifest', out_dir), best, out_dir,
                                 jobs=int(config['runtime']['jobs']))
    write_table(out_dir / 'ablation.tsv', table)
    logger.info("Dropout ablation for (%s, %d CL):\n%s", best[0], best[1], table.to_string(index=False))


def cmd_eval_external(config: Dict[str, Any], out_dir: Path, args) -> None:
    from experiment import evaluate_external
    from report import plot_external, write_table

    result = evaluate_external(_path(config, 'checkpoint', out_dir), _path(config, 'external_manifest', out_dir),
                               preprocess=args.preprocess)
    dest = ensure_dir(out_dir / 'external')
    write_json(dest / 'metrics.json', {'accuracy': result.accuracy, 'report': result.report.to_dict()})
    write_table(dest / 'roc.tsv', result.roc)
    plot_external(dest / 'external.svg', result.roc, result.report.confusion.as_array(), result.report.roc_auc)
    print(json.dumps({'accuracy': result.accuracy, 'roc_auc': result.report.roc_auc}))


def cmd_report(config: Dict[str, Any], out_dir: Path, args) -> None:
    from report import build_report

    for name, path in build_report(out_dir).items():
        logger.info("%s: %s", name, path)


def cmd_embed(config: Dict[str, Any], out_dir: Path, args) -> None:
    from experiment import ExperimentPlan, embed_layers, run_dir_for, run_samples
    from metrics import TsneConfig, write_embedding_table
    from report import plot_embeddings

    plan = ExperimentPlan.from_config(config)
    key = _single_key(config)
    train_set, test_set = run_samples(key, plan, _path(config, 'manifest', out_dir))
    frame = embed_layers(run_dir_for(out_dir, key) / 'model.ckpt', train_set, test_set,
                         TsneConfig.from_config(config['tsne']))
    dest = ensure_dir(out_dir / 'embeddings')
    write_embedding_table(dest / f"{key.tag}.tsv", frame)
    plot_embeddings(dest / f"{key.tag}.svg", frame)


COMMANDS = {
    'preprocess': (cmd_preprocess, "Resize + normalise the manifest's volumes"),
    'synth': (cmd_synth, "Generate the synthetic cohort"),
    'split': (cmd_split, "Build and export the stratified fold plan"),
    'train': (cmd_train, "Run one (strategy, depth, fold, trial) configuration"),
    'grid': (cmd_grid, "Run the strategy x depth grid"),
    'ablate': (cmd_ablate, "Dropout ablation of the best configuration"),
    'eval-external': (cmd_eval_external, "Evaluate a checkpoint on an external cohort"),
    'report': (cmd_report, "Tables and plots from the results store"),
    'embed': (cmd_embed, "t-SNE of one run's layer embeddings"),
}


# ── Parser & dispatch ─────────────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help="JSON experiment config")
    common.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help="Dotted config override, repeatable")
    common.add_argument('--out', default='out', help="Output directory (default: out)")
    common.add_argument('--jobs', type=int, help="Concurrent runs")
    common.add_argument('--seed', type=int, help="Master seed (synthetic seed for synth)")
    common.add_argument('--reference-mode', action='store_true', help="Deterministic sequential mode (jobs=1)")
    common.add_argument('-v', '--verbose', action='store_true', help="Debug logging")

    parser = argparse.ArgumentParser(prog='depthaug', description="3D CNN depth x augmentation study toolkit")
    sub = parser.add_subparsers(dest='command', metavar='command', required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == 'ablate':
            p.add_argument('--best', help="Configuration as STRATEGY,DEPTH (default: best stored)")
        if name == 'eval-external':
            p.add_argument('--preprocess', action='store_true', help="Preprocess external volumes first")
    return parser


def _resolve_config(args) -> Dict[str, Any]:
    overrides = list(args.overrides)
    if args.seed is not None:
        key = 'synthetic.seed' if args.command == 'synth' else 'plan.master_seed'
        overrides.append(f"{key}={args.seed}")
    if args.jobs is not None:
        overrides.append(f"runtime.jobs={args.jobs}")
    if args.reference_mode:
        overrides += ['runtime.reference_mode=true', 'runtime.jobs=1']
    config = load_config(args.config, overrides)
    if int(config['runtime']['jobs']) < 1:
        raise ConfigError("runtime.jobs must be >= 1")
    try:
        np.dtype(config['runtime']['dtype'])
    except TypeError:
        raise ConfigError(f"Unknown runtime.dtype '{config['runtime']['dtype']}'")
    return config


def dispatch(args) -> int:
    """Run one parsed invocation; returns the process exit status."""
    try:
        out_dir = ensure_dir(args.out)
        _configure_logging(out_dir, args.verbose)
        config = _resolve_config(args)
        write_json(out_dir / 'config.resolved.json', config)
        handler, _ = COMMANDS[args.command]
        handler(config, out_dir, args)
        return 0
    except DepthAugError as e:
        logger.error("%s failed: %s", args.command, e)
        print(json.dumps({'error': type(e).__name__, 'message': str(e), 'exit_code': e.exit_code}), file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception("%s failed unexpectedly", args.command)
        print(json.dumps({'error': type(e).__name__, 'message': str(e), 'exit_code': 1}), file=sys.stderr)
        return 1


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return dispatch(args)


if __name__ == '__main__':
    sys.exit(main())
