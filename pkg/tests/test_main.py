import json
import math

import pytest
from numpy.testing import assert_allclose

from file_io import load_params, save_params
from main import SUBCOMMANDS, run_command


@pytest.fixture
def pjt_file(tmp_path, pjt2):
    path = tmp_path / 'pjt.json'
    save_params(path, pjt2)
    return str(path)


@pytest.fixture
def jt_file(tmp_path, jt):
    path = tmp_path / 'jt.json'
    save_params(path, jt)
    return str(path)


def last_json(text):
    return json.loads(text.strip().splitlines()[-1])


def test_help_lists_subcommands(capsys):
    assert run_command(['--help']) == 0
    out = capsys.readouterr().out
    for name in SUBCOMMANDS:
        assert name in out


def test_surface_csv(pjt_file, capsys):
    assert run_command(['surface', '--params', pjt_file, '--grid', 'qx=-0.2:0.2:5,qy=-0.2:0.2:3']) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == 'qx,qy,re_v1,im_v1,re_v2,im_v2,re_v3,im_v3,rigidity'
    assert len(lines) == 16


def test_surface_output_is_deterministic(pjt_file, tmp_path):
    a, b = tmp_path / 'a.csv', tmp_path / 'b.csv'
    grid = 'rho=0.05:0.3:4,phi=0:360:13'
    assert run_command(['surface', '--params', pjt_file, '--grid', grid, '--threads', '1', '-o', str(a)]) == 0
    assert run_command(['surface', '--params', pjt_file, '--grid', grid, '--threads', '3', '-o', str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_slice_json(jt_file, capsys):
    assert run_command(['slice', '--params', jt_file, '--qx', '-0.1:0.1:3', '--format', 'json']) == 0
    rows = json.loads(capsys.readouterr().out)
    assert len(rows) == 3
    assert set(rows[0]) == {'qx', 're_v1', 'im_v1', 're_v2', 'im_v2'}


def test_berry_reports_pi(pjt_file, capsys):
    assert run_command(['berry', '--params', pjt_file, '--radius', '0.05']) == 0
    data = json.loads(capsys.readouterr().out)
    assert_allclose(data['tau'], math.pi, atol=1e-3)
    assert data['permutation'] == [0, 1, 2]


def test_nac_with_lambda(jt_file, capsys):
    assert run_command(['nac', '--params', jt_file, '--at', '0.2,0.1', '--polar', '--with-lambda']) == 0
    data = json.loads(capsys.readouterr().out)
    assert data['basis'] == 'polar'
    assert set(data['F']) == {'rho', 'phi'}
    assert len(data['FF']) == 2


def test_synth_then_fit(pjt_file, pjt2, tmp_path, capsys):
    data = tmp_path / 'slice.csv'
    fitted = tmp_path / 'fit.json'
    assert run_command(['synth', '--params', pjt_file, '--qx', '-0.5:0.5:41', '-o', str(data)]) == 0
    assert run_command(['fit', '--data', str(data), '-o', str(fitted)]) == 0
    result = load_params(fitted)
    assert_allclose(result.values(), pjt2.values(), atol=1e-6)
    assert json.loads(fitted.read_text(encoding='utf-8'))['converged'] is True


def test_synth_time_delay_then_bw_fit(tmp_path, capsys):
    data = tmp_path / 'td.csv'
    assert run_command(['synth', '--kind', 'time-delay', '--resonances', '0.3:0.01', '--bg', '0.5',
                        '--energies', '0.25:0.35:2001', '-o', str(data)]) == 0
    assert run_command(['bw-fit', '--data', str(data)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert_allclose([out['resonances'][0]['eps'], out['resonances'][0]['gamma']], [0.3, 0.01], atol=1e-6)


def test_validate_exit_codes(pjt_file, tmp_path, capsys):
    assert run_command(['validate', pjt_file]) == 0
    assert json.loads(capsys.readouterr().out) == []
    bad_row = tmp_path / 'd.csv'
    bad_row.write_text('qx,branch,eps_n,gamma_n,v_ion\n0.1,2,0.3,-0.01,0\n', encoding='utf-8')
    assert run_command(['validate', str(bad_row)]) == 1
    report = json.loads(capsys.readouterr().out)
    assert report[0]['row'] == 2
    bad_schema = tmp_path / 'p.json'
    bad_schema.write_text(json.dumps({'model': 'jt', 'params': {'k': 0.1}}), encoding='utf-8')
    assert run_command(['validate', str(bad_schema)]) == 2


def test_schema_error_goes_to_stderr(tmp_path, capsys):
    bad = tmp_path / 'p.json'
    bad.write_text(json.dumps({'model': 'pjt', 'params': {'eps_E': 0.3}}), encoding='utf-8')
    assert run_command(['berry', '--params', str(bad), '--radius', '0.05']) == 2
    captured = capsys.readouterr()
    assert captured.out == ''
    assert last_json(captured.err)['error'] == 'SchemaError'


def test_config_supplies_params(pjt_file, tmp_path, capsys):
    cfg = tmp_path / 'run.json'
    cfg.write_text(json.dumps({'params_path': pjt_file, 'output_format': 'json'}), encoding='utf-8')
    assert run_command(['--config', str(cfg), 'slice', '--qx', '0:0.1:2']) == 0
    rows = json.loads(capsys.readouterr().out)
    assert len(rows) == 2
    cfg.write_text(json.dumps({'colour': 'red'}), encoding='utf-8')
    assert run_command(['--config', str(cfg), 'slice', '--params', pjt_file]) == 2


def test_bad_arguments_report_json(capsys):
    assert run_command(['unknown-command']) == 2
    error = last_json(capsys.readouterr().err)
    assert error['error'] == 'SchemaError'
    assert 'usage' in error['details']
    assert run_command(['berry', '--radius', 'wide']) == 2
    assert last_json(capsys.readouterr().err)['error'] == 'SchemaError'
    assert run_command(['berry']) == 2


def test_berry_without_radius_needs_config(pjt_file, capsys):
    assert run_command(['berry', '--params', pjt_file]) == 2
    assert 'loop.radius' in last_json(capsys.readouterr().err)['message']


def test_config_supplies_loop(pjt_file, tmp_path, capsys):
    cfg = tmp_path / 'run.json'
    cfg.write_text(json.dumps({'params_path': pjt_file,
                               'loop': {'center': [0.0, 0.0], 'radius': 0.05, 'method': 'holonomy',
                                        'start_deg': 30.0}}), encoding='utf-8')
    assert run_command(['--config', str(cfg), 'berry']) == 0
    data = json.loads(capsys.readouterr().out)
    assert data['method'] == 'holonomy'
    assert_allclose(data['tau'], math.pi, atol=1e-3)
    # 命令行覆盖配置
    assert run_command(['--config', str(cfg), 'berry', '--method', 'line_integral']) == 0
    assert json.loads(capsys.readouterr().out)['method'] == 'line_integral'


def test_config_supplies_fit_data(pjt_file, tmp_path, capsys):
    data = tmp_path / 'slice.csv'
    assert run_command(['synth', '--params', pjt_file, '--qx', '-0.5:0.5:41', '-o', str(data)]) == 0
    assert run_command(['fit']) == 2
    assert 'fit.data' in last_json(capsys.readouterr().err)['message']
    cfg = tmp_path / 'run.json'
    cfg.write_text(json.dumps({'fit': {'data': str(data)}}), encoding='utf-8')
    assert run_command(['--config', str(cfg), 'fit']) == 0
    assert json.loads(capsys.readouterr().out)['converged'] is True


def test_config_supplies_bw_fit_settings(tmp_path, capsys):
    data = tmp_path / 'td.csv'
    assert run_command(['synth', '--kind', 'time-delay', '--resonances', '0.27:0.01,0.33:0.012',
                        '--energies', '0.22:0.38:2001', '-o', str(data)]) == 0
    cfg = tmp_path / 'run.json'
    cfg.write_text(json.dumps({'fit': {'data': str(data), 'n_res': 2}}), encoding='utf-8')
    assert run_command(['--config', str(cfg), 'bw-fit']) == 0
    out = json.loads(capsys.readouterr().out)
    assert len(out['resonances']) == 2


def test_nac_analytic_for_jt(jt_file, pjt_file, capsys):
    assert run_command(['nac', '--params', jt_file, '--at', '0.2,0.1', '--polar', '--analytic']) == 0
    analytic = json.loads(capsys.readouterr().out)
    assert analytic['basis'] == 'polar'
    assert set(analytic['grad_theta']) == {'rho', 'phi'}
    assert len(analytic['T']) == 2
    assert run_command(['nac', '--params', jt_file, '--at', '0.2,0.1', '--polar']) == 0
    numeric = json.loads(capsys.readouterr().out)
    # 非对角元比较平方，避开本征矢的符号约定
    for c in ('rho', 'phi'):
        a = complex(*analytic['F'][c][0][1])
        n = complex(*numeric['F'][c][0][1])
        assert_allclose(n * n, a * a, rtol=1e-6, atol=1e-9)
    assert run_command(['nac', '--params', pjt_file, '--at', '0.2,0.1', '--analytic']) == 2


def test_find_ep_reports_analytic_jt_points(jt_file, jt, capsys):
    assert run_command(['find-ep', '--params', jt_file, '--rho-min', '0.05', '--rho-max', '0.2']) == 0
    out = json.loads(capsys.readouterr().out)
    assert_allclose(out['analytic']['rho_c'], abs(jt.k) / abs(jt.g), rtol=1e-12)
    assert len(out['analytic']['points']) == 6
    numeric = [p for p in out['points'] if p['kind'] == 'exceptional_point']
    assert len(numeric) == 6
    for p in numeric:
        assert_allclose(p['rho'], out['analytic']['rho_c'], rtol=1e-8)


def test_seams_analytic_angles(jt_file, pjt_file, capsys):
    assert run_command(['seams', '--params', jt_file, '--rho', '0.2', '--format', 'json']) == 0
    rows = json.loads(capsys.readouterr().out)
    assert len(rows) == 6
    assert {r['kind'] for r in rows} <= {'re_seam', 'im_seam'}
    assert all(r['rho'] == 0.2 for r in rows)
    assert run_command(['seams', '--params', pjt_file, '--rho', '0.2']) == 2
