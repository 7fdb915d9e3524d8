"""
config.py – DepthAug3D
Default constants and the experiment-config loader.

Every run is driven by one JSON config file. Values missing from the file
fall back to the defaults below; ``--set key=value`` overrides are applied
after parsing and recorded in the resolved config.
"""

import copy
import json
import os
from typing import Any, Dict, Iterable, List, Optional

from errors import ConfigError

# ===== VOLUME PREPROCESSING =====

# Target grid the network consumes (sagittal, coronal, axial)
TARGET_DIMS = (96, 96, 73)

# Divide by the nonzero-voxel std as well as subtracting the mean
NORMALIZE_SCALE_VARIANCE = True

# ===== AUGMENTATION =====

ZOOM_RANGE = (0.8, 1.2)
SHIFT_LIMIT = 0.4          # fraction of each axis length
ROTATION_LIMIT_DEG = 5.0
KEEP_ORIGINALS = True

# ===== NETWORK =====

DEPTHS = (4, 6, 8, 10, 12)
POOLING_SIZES = (4, 3, 2, 2)
ACTIVATION = 'relu'
POOLING = 'max'
BN_MOMENTUM = 0.1
BN_EPSILON = 1e-5

# ===== TRAINING =====

LEARNING_RATE = 0.001
L2_WEIGHT = 0.01
MAX_EPOCHS = 200
PATIENCE = 20
BATCH_SIZE = 50
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8

# ===== CROSS-VALIDATION & GRID =====

N_FOLDS = 7
N_TRIALS = 10
STRATEGIES = ('A', 'B', 'C')
DROPOUT_GRID = (0.0, 0.1, 0.25, 0.5)
MASTER_SEED = 20240501

# ===== T-SNE =====

TSNE_PERPLEXITY = 30.0
TSNE_ITERATIONS = 1000
TSNE_EXAGGERATION = 12.0
TSNE_EXAGGERATION_ITERS = 100

# ===== LOGGING =====

# DEPTHAUG_LOG_LEVEL wins over the generic LOG_LEVEL; nothing else reads the environment
LOG_LEVEL = os.environ.get('DEPTHAUG_LOG_LEVEL', os.environ.get('LOG_LEVEL', 'INFO'))
LOG_FILE_NAME = 'depthaug.log'


DEFAULTS: Dict[str, Dict[str, Any]] = {
    'volume': {
        'target_dims': list(TARGET_DIMS),
        'scale_variance': NORMALIZE_SCALE_VARIANCE,
    },
    'synthetic': {
        'dims': [32, 32, 25],
        'n_per_class': [70, 70],
        'cavity_radius': 0.25,
        'delta': 0.4,
        'noise_sigma': 0.1,
        'intensity_jitter': 0.05,
        'normalize': True,
        'seed': 7,
    },
    'augment': {
        'zoom_range': list(ZOOM_RANGE),
        'shift_limit': SHIFT_LIMIT,
        'rotation_limit': ROTATION_LIMIT_DEG,
        'keep_originals': KEEP_ORIGINALS,
    },
    'model': {
        'depth': 8,
        'dropout': 0.0,
        'activation': ACTIVATION,
        'pooling': POOLING,
        'pooling_sizes': list(POOLING_SIZES),
        'bn_momentum': BN_MOMENTUM,
        'bn_epsilon': BN_EPSILON,
    },
    'train': {
        'learning_rate': LEARNING_RATE,
        'l2_weight': L2_WEIGHT,
        'max_epochs': MAX_EPOCHS,
        'patience': PATIENCE,
        'batch_size': BATCH_SIZE,
        'adam_beta1': ADAM_BETA1,
        'adam_beta2': ADAM_BETA2,
        'adam_epsilon': ADAM_EPSILON,
        'drop_last': False,
        'seed': 0,
    },
    'plan': {
        'strategies': list(STRATEGIES),
        'depths': list(DEPTHS),
        'trials': N_TRIALS,
        'folds': N_FOLDS,
        'master_seed': MASTER_SEED,
        'fold_seed': 0,
        'dropout_grid': [0.0],
        'ablation_grid': list(DROPOUT_GRID),
        'test_folds': None,
        'test_fold': 0,
        'trial': 0,
        'strategy': 'B',
    },
    'tsne': {
        'perplexity': TSNE_PERPLEXITY,
        'iterations': TSNE_ITERATIONS,
        'learning_rate': 200.0,
        'exaggeration': TSNE_EXAGGERATION,
        'exaggeration_iters': TSNE_EXAGGERATION_ITERS,
        'seed': 0,
    },
    'paths': {
        'manifest': 'data/manifest.tsv',
        'external_manifest': None,
        'checkpoint': None,
        'input_dir': None,
        'data_dir': 'data',
    },
    'runtime': {
        'jobs': 1,
        'reference_mode': False,
        'dtype': 'float64',
    },
}


# ===== LOADING =====

def _parse_value(raw: str) -> Any:
    """Parse an override value as JSON, falling back to the raw string."""
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _merge(base: Dict[str, Any], incoming: Dict[str, Any], where: str) -> None:
    for key, value in incoming.items():
        if key not in base:
            raise ConfigError(f"Unknown config key '{where}{key}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"Config key '{where}{key}' must be a section")
            _merge(base[key], value, f"{where}{key}.")
        else:
            base[key] = value


def apply_override(config: Dict[str, Any], override: str) -> None:
    """
    Apply one dotted ``section.key=value`` override in place.

    Raises:
        ConfigError: If the override is malformed or names an unknown key.
    """
    if '=' not in override:
        raise ConfigError(f"Override must look like key=value, got '{override}'")
    dotted, raw = override.split('=', 1)
    parts = dotted.strip().split('.')
    node = config
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"Unknown config section in override '{dotted}'")
        node = node[part]
    if parts[-1] not in node or isinstance(node[parts[-1]], dict):
        raise ConfigError(f"Unknown config key in override '{dotted}'")
    node[parts[-1]] = _parse_value(raw)


def load_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> Dict[str, Any]:
    """
    Build the resolved config: defaults, then the JSON file, then overrides.

    Args:
        path:      Optional JSON config file.
        overrides: Dotted ``key=value`` strings.

    Returns:
        The resolved config dict; ``config['overrides']`` lists what was applied.

    Raises:
        ConfigError: If the file is unreadable, not JSON, or has unknown keys.
    """
    config = copy.deepcopy(DEFAULTS)
    if path:
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"Config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file is not valid JSON ({path}): {e}")
        except OSError as e:
            raise ConfigError(f"Failed to read config file {path}: {e}")
        if not isinstance(data, dict):
            raise ConfigError("Config file must contain a JSON object")
        data.pop('overrides', None)
        _merge(config, data, '')

    applied: List[str] = []
    for override in overrides:
        apply_override(config, override)
        applied.append(override)
    config['overrides'] = applied
    return config


def get_section(config: Dict[str, Any], name: str) -> Dict[str, Any]:
    """Return a copy of one config section."""
    if name not in config or not isinstance(config[name], dict):
        raise ConfigError(f"Missing config section '{name}'")
    return dict(config[name])


if __name__ == '__main__':
    print("=== DepthAug3D Configuration ===\n")
    print(f"Target dims: {TARGET_DIMS}")
    print(f"Depths: {DEPTHS}  Strategies: {STRATEGIES}")
    print(f"Adam lr={LEARNING_RATE}  l2={L2_WEIGHT}  epochs={MAX_EPOCHS}  patience={PATIENCE}")
    print(f"Log Level: {LOG_LEVEL}")
