import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from errors import DomainError, SchemaError
from file_io import (
    atomic_write, csv_text, dumps_json, fmt, load_params, params_from_dict, params_to_dict,
    read_slice_data, read_time_delay, save_params, validate_files, write_slice_data, write_time_delay,
)
from fitting import ResonanceSample, synth_data, synth_time_delay


def test_params_round_trip(tmp_path, pjt2, pjt3, jt):
    for p in (pjt2, pjt3, jt):
        path = tmp_path / 'params.json'
        save_params(path, p)
        assert load_params(path) == p
    data = params_to_dict(pjt3)
    assert data['metadata']['third_order_domain'] == 'qy=0 slice only'
    assert 'metadata' not in params_to_dict(pjt2)


def test_scalar_complex_is_schema_error(pjt2):
    data = params_to_dict(pjt2)
    data['params']['alpha'] = 0.0627
    with pytest.raises(SchemaError) as info:
        params_from_dict(data)
    assert info.value.details['param'] == 'alpha'


def test_params_schema_errors(pjt2, tmp_path):
    base = params_to_dict(pjt2)
    for broken in ({**base, 'model': 'xyz'},
                   {**base, 'order': 4},
                   {**base, 'params': {**base['params'], 'beta': [0.0, 0.0]}},
                   {'model': 'jt', 'order': 3, 'params': {}}):
        with pytest.raises(SchemaError):
            params_from_dict(broken)
    bad = tmp_path / 'bad.json'
    bad.write_text('{not json', encoding='utf-8')
    with pytest.raises(SchemaError):
        load_params(bad)


def test_fmt_is_lossless():
    for v in (0.1, 1 / 3, -0.0121, 1e-300, 0.3332375):
        assert float(fmt(v)) == v


def test_json_writes_complex_as_pairs():
    data = json.loads(dumps_json({'z': 1 - 2j, 'nan': float('nan'), 'arr': np.array([1.5, 2.5])}))
    assert data == {'z': [1.0, -2.0], 'nan': None, 'arr': [1.5, 2.5]}


def test_slice_csv_round_trip(tmp_path, pjt2):
    samples = synth_data(pjt2, np.linspace(-0.3, 0.3, 7), noise=1e-4, seed=1, v_ion=0.2)
    path = tmp_path / 'slice.csv'
    write_slice_data(path, samples)
    assert read_slice_data(path) == samples
    assert path.read_text(encoding='utf-8').splitlines()[0] == 'qx,branch,eps_n,gamma_n,v_ion'


def test_time_delay_csv_round_trip(tmp_path):
    curve = synth_time_delay(np.linspace(0.25, 0.35, 11), [(0.3, 0.01)], 0.5)
    path = tmp_path / 'td.csv'
    write_time_delay(path, curve)
    back = read_time_delay(path)
    assert np.array_equal(back.energies, curve.energies)
    assert np.array_equal(back.values, curve.values)


def test_read_slice_reports_line_number(tmp_path):
    path = tmp_path / 'slice.csv'
    path.write_text('qx,branch,eps_n,gamma_n,v_ion\n0.1,2,0.3,0.02,0\n0.2,2,abc,0.02,0\n', encoding='utf-8')
    with pytest.raises(SchemaError) as info:
        read_slice_data(path)
    assert info.value.details['row'] == 3
    path.write_text('qx,eps_n\n0.1,0.3\n', encoding='utf-8')
    with pytest.raises(SchemaError):
        read_slice_data(path)


def test_unordered_energies_rejected(tmp_path):
    path = tmp_path / 'td.csv'
    path.write_text('e,ddelta_de\n0.2,1\n0.1,2\n', encoding='utf-8')
    with pytest.raises(DomainError):
        read_time_delay(path)


def test_validate_clean_files(tmp_path, pjt2):
    params = tmp_path / 'p.json'
    data = tmp_path / 'd.csv'
    save_params(params, pjt2)
    write_slice_data(data, synth_data(pjt2, np.linspace(-0.2, 0.2, 5)))
    assert validate_files([params, data]) == []


def test_validate_negative_width(tmp_path):
    path = tmp_path / 'd.csv'
    rows = [ResonanceSample(0.1, 2, 0.3, 0.02), ResonanceSample(0.2, 2, 0.3, 0.02)]
    write_slice_data(path, rows)
    lines = path.read_text(encoding='utf-8').splitlines()
    lines[2] = '0.2,2,0.3,-0.01,0'
    path.write_text('\n'.join(lines) + '\n', encoding='utf-8')
    report = validate_files([path])
    assert len(report) == 1
    assert report[0]['row'] == 3
    assert report[0]['kind'] == 'invariant'


def test_validate_schema_violations(tmp_path, pjt2):
    params = tmp_path / 'p.json'
    data = params_to_dict(pjt2)
    data['params']['k'] = -0.0037
    params.write_text(json.dumps(data), encoding='utf-8')
    other = tmp_path / 'notes.txt'
    other.write_text('hello', encoding='utf-8')
    unknown = tmp_path / 'x.csv'
    unknown.write_text('a,b\n1,2\n', encoding='utf-8')
    report = validate_files([params, other, unknown])
    assert [r['kind'] for r in report] == ['schema'] * 3


def test_validate_time_delay_and_surface(tmp_path):
    td = tmp_path / 'td.csv'
    td.write_text('e,ddelta_de\n0.1,1\n0.1,2\n0.3,nan\n', encoding='utf-8')
    report = validate_files([td])
    assert [r['row'] for r in report] == [3, 4]
    surface = tmp_path / 's.csv'
    surface.write_text(csv_text(['qx', 'qy', 'rigidity'], [[0.0, 0.0, 1.0], [0.1, 0.0, 1.5]]), encoding='utf-8')
    report = validate_files([surface])
    assert len(report) == 1
    assert report[0]['row'] == 3


def test_atomic_write_replaces_file(tmp_path):
    path = tmp_path / 'out.txt'
    path.write_text('old', encoding='utf-8')
    atomic_write(path, 'new\n')
    assert path.read_text(encoding='utf-8') == 'new\n'
    assert [p.name for p in tmp_path.iterdir()] == ['out.txt']
