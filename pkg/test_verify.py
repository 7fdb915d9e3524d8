# -*- coding: utf-8 -*-
"""Quick import and sanity check for all modules."""
import importlib

import pytest

import config
from errors import ConfigError, DepthAugError, MissingFile
from helpers import format_mean_std, mix_seed, read_json, write_json

MODULES = ['config', 'errors', 'helpers', 'database', 'volume', 'augment', 'nn', 'train', 'dataset', 'metrics',
           'experiment', 'report', 'cli']


@pytest.mark.parametrize('name', MODULES)
def test_module_imports(name):
    importlib.import_module(name)


def test_error_codes_are_distinct():
    import errors
    codes = [cls.exit_code for cls in vars(errors).values()
             if isinstance(cls, type) and issubclass(cls, DepthAugError)]
    assert len(codes) == len(set(codes))
    assert issubclass(MissingFile, FileNotFoundError)
    assert issubclass(ConfigError, ValueError)


def test_config_defaults_and_overrides(tmp_path):
    cfg = config.load_config(overrides=['train.max_epochs=5', 'plan.strategies=["A"]', 'plan.strategy=C'])
    assert cfg['train']['max_epochs'] == 5
    assert cfg['plan']['strategies'] == ['A']
    assert cfg['plan']['strategy'] == 'C'
    assert config.DEFAULTS['train']['max_epochs'] == config.MAX_EPOCHS

    path = tmp_path / 'c.json'
    path.write_text('{"model": {"depth": 12}}', encoding='utf-8')
    assert config.load_config(str(path))['model']['depth'] == 12

    with pytest.raises(ConfigError):
        config.load_config(overrides=['model.width=3'])
    with pytest.raises(ConfigError):
        config.load_config(overrides=['no-equals-sign'])
    path.write_text('{"model": {"width": 3}}', encoding='utf-8')
    with pytest.raises(ConfigError):
        config.load_config(str(path))
    with pytest.raises(ConfigError):
        config.get_section(cfg, 'missing')


def test_helpers(tmp_path):
    assert mix_seed(1, 'a') == mix_seed(1, 'a')
    assert mix_seed(1, 'a') != mix_seed('1', 'a')
    assert 0 <= mix_seed('x') < 2 ** 64
    assert format_mean_std(0.82, 0.0283) == '82.00 ± 2.83'
    assert format_mean_std(1.5, 0.25, percent=False, digits=1) == '1.5 ± 0.2'

    write_json(tmp_path / 'nested' / 'x.json', {'b': 1, 'a': [1, 2]})
    assert read_json(tmp_path / 'nested' / 'x.json') == {'a': [1, 2], 'b': 1}
    with pytest.raises(MissingFile):
        read_json(tmp_path / 'absent.json')
