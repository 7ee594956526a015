import json

import pytest

import config
from config import RunConfig, Tolerances, get_config, get_tolerances, set_config
from errors import ConfigError


def test_defaults():
    c = RunConfig()
    assert c.model == 'pjt'
    assert c.order == 2
    assert c.output_format == 'csv'
    assert isinstance(c.tolerances, Tolerances)
    assert c.tolerances.coalescence_threshold == 1e-8


def test_save_and_load(tmp_path):
    path = tmp_path / 'run.json'
    c = RunConfig(model='jt', grid='qx=-0.5:0.5:11,qy=-0.5:0.5:11', seed=5)
    c.tolerances.nac_step = 2e-5
    c.save(path)
    loaded = RunConfig.load(path)
    assert loaded == c
    assert loaded.tolerances.nac_step == 2e-5


def test_unknown_keys_rejected(tmp_path):
    path = tmp_path / 'run.json'
    path.write_text(json.dumps({'model': 'pjt', 'colour': 'red'}), encoding='utf-8')
    with pytest.raises(ConfigError) as info:
        RunConfig.load(path)
    assert info.value.details['unknown_keys'] == ['colour']
    path.write_text(json.dumps({'tolerances': {'nac_stepp': 1e-5}}), encoding='utf-8')
    with pytest.raises(ConfigError):
        RunConfig.load(path)


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / 'missing.json')
    bad = tmp_path / 'bad.json'
    bad.write_text('[1, 2]', encoding='utf-8')
    with pytest.raises(ConfigError):
        RunConfig.load(bad)


@pytest.mark.parametrize('kwargs', [
    {'model': 'xyz'},
    {'order': 4},
    {'model': 'jt', 'order': 3},
    {'output_format': 'xml'},
    {'threads': 0},
    {'loop': {'radius': 0.1, 'colour': 'red'}},
    {'fit': {'data': 'a.csv', 'order': 3}},
    {'loop': [0.1]},
])
def test_validation(kwargs):
    with pytest.raises(ConfigError):
        RunConfig(**kwargs)


def test_threads_from_environment(monkeypatch):
    monkeypatch.setenv(config.THREADS_ENV, '4')
    assert set_config(RunConfig()).threads == 4
    assert get_config().threads == 4
    monkeypatch.setenv(config.THREADS_ENV, 'many')
    with pytest.raises(ConfigError):
        set_config(RunConfig())


def test_global_tolerances():
    c = RunConfig()
    c.tolerances.berry_tol = 1e-6
    set_config(c)
    assert get_tolerances().berry_tol == 1e-6
