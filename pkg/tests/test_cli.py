import json
import logging

import pandas as pd
import pytest

from glmmtool import __version__
from glmmtool.cli import main, dumps
from glmmtool.database.db import RunDatabase

STEPPED_WEDGE = {
    'data': {'nelder': '~(cl(10) * t(11)) > i(10)', 'columns': {'int': 't > cl'}},
    'model': {'formula': '~ factor(t) + int - 1 + (1|gr(cl)*ar1(t))', 'family': 'binomial',
              'mean': [0.0] * 11 + [0.5], 'covariance': [0.25, 0.7]},
}

CLUSTERED = ['--nelder', '~cl(6) > i(5)', '--formula', '~ 1 + (1|gr(cl))', '--covariance', '0.5', '--mean', '0.3']


def _write_config(tmp_path, config, name='run.json'):
    path = tmp_path / name
    path.write_text(json.dumps(config))
    return str(path)


def test_gen(tmp_path):
    output = tmp_path / 'design.csv'
    assert main(['gen', '--nelder', '~cl(10) > i(10)', '-o', str(output)]) == 0
    data = pd.read_csv(output)
    assert len(data) == 100
    assert list(data.columns) == ['cl', 'i']
    assert data['i'].max() == 100


def test_power(tmp_path):
    output = tmp_path / 'power.json'
    assert main(['power', '-c', _write_config(tmp_path, STEPPED_WEDGE), '-o', str(output)]) == 0
    payload = json.loads(output.read_text())
    assert payload['command'] == 'power'
    assert payload['version'] == __version__
    assert payload['config']['model']['family'] == 'binomial'
    row = [record for record in payload['result']['power'] if record['Parameter'] == 'int'][0]
    assert row['SE'] == pytest.approx(0.18647, abs=1e-4)
    assert row['Power'] == pytest.approx(0.7647, abs=2e-3)


def test_flags_override_config(tmp_path):
    output = tmp_path / 'power.json'
    assert main(['power', '-c', _write_config(tmp_path, STEPPED_WEDGE), '--alpha', '0.01', '-o', str(output)]) == 0
    assert json.loads(output.read_text())['config']['alpha'] == 0.01


def test_simulate_is_deterministic(tmp_path):
    arguments = ['simulate', '--nelder', '~cl(5) > i(4)', '--formula', '~ 1 + (1|gr(cl))', '--covariance', '0.5',
                 '--mean', '1.0', '--seed', '7']
    first, second = tmp_path / 'a.csv', tmp_path / 'b.csv'
    assert main(arguments + ['-o', str(first)]) == 0
    assert main(arguments + ['-o', str(second)]) == 0
    assert first.read_text() == second.read_text()
    assert 'y' in pd.read_csv(first).columns
    assert main(arguments[:-1] + ['8', '-o', str(second)]) == 0
    assert first.read_text() != second.read_text()


def test_fit_non_convergence_writes_trace(tmp_path):
    data = tmp_path / 'data.csv'
    assert main(['simulate', '--nelder', '~cl(6) > i(5)', '--formula', '~ 1 + (1|gr(cl))', '--covariance', '0.5',
                 '--mean', '1.0', '--seed', '1', '-o', str(data)]) == 0
    output = tmp_path / 'fit.json'
    arguments = ['fit', '--csv', str(data), '--formula', '~ 1 + (1|gr(cl))', '--covariance', '0.5',
                 '--method', 'la', '-o', str(output)]
    assert main(arguments + ['--max-iter', '1', '--tol', '1e-12']) == 3
    payload = json.loads(output.read_text())
    assert payload['result']['converged'] is False
    assert len(payload['result']['trace']) == 1

    assert main(arguments + ['--emit-re']) in (0, 3)
    payload = json.loads(output.read_text())
    assert len(payload['result']['U']) == 6
    assert set(payload['result']['beta']) == {'(Intercept)'}


@pytest.mark.slow
def test_fit_warm_start_from_laplace(tmp_path):
    data = tmp_path / 'data.csv'
    assert main(['simulate', '--nelder', '~cl(8) > i(6)', '--formula', '~ 1 + (1|gr(cl))', '--covariance', '0.6',
                 '--mean', '0.5', '--seed', '2', '-o', str(data)]) == 0
    output = tmp_path / 'fit.json'
    status = main(['fit', '--csv', str(data), '--formula', '~ 1 + (1|gr(cl))', '--covariance', '0.5',
                   '--method', 'mcnr', '--warm-start', 'la', '--samples', '50', '--warmup', '50',
                   '--max-iter', '2', '--seed', '3', '-o', str(output)])
    assert status in (0, 3)
    result = json.loads(output.read_text())['result']
    assert result['method'] == 'mcnr'
    assert result['beta']['(Intercept)'] == pytest.approx(0.5, abs=1.0)


def test_exit_codes(tmp_path):
    assert main(['power', '--nelder', '~cl(4) >', '--formula', '~ 1']) == 1
    assert main(['power', '--nelder', '~cl(4) > i(2)']) == 1
    assert main(['simulate', '--nelder', '~cl(4) > i(2)', '--formula', '~ 1', '--family', 'binomial', '--link',
                 'identity', '--mean', '1.5', '-o', str(tmp_path / 'y.csv')]) == 2
    assert main(['fit', '--nelder', '~cl(4) > i(2)', '--formula', '~ 1']) == 1


def test_apportion(tmp_path):
    output = tmp_path / 'apportion.json'
    assert main(['apportion', '--weights', '0.5', '0.5', '--m', '4', '-o', str(output)]) == 0
    result = json.loads(output.read_text())['result']
    assert result['hamilton'] == [2, 2]
    assert result['modified-adams'] == [2, 2]


def test_design(tmp_path):
    config = {
        'data': {'nelder': '~cl(8) > i(2)', 'columns': {'x': 'cl * 0.5'}},
        'model': {'formula': '~ x + (1|gr(cl))', 'covariance': [0.5]},
        'design': {'m': 2, 'algo': [3], 'condition': 'cl', 'models': [{'covariance': [1.0]}]},
    }
    output = tmp_path / 'design.json'
    assert main(['design', '-c', _write_config(tmp_path, config), '--seed', '1', '-o', str(output)]) == 0
    result = json.loads(output.read_text())['result']
    assert result['selected'] == [1, 8]
    assert len(result['variances']) == 2


def test_design_contrast_and_apportionment(tmp_path):
    config = {
        'data': {'nelder': '~cl(8) > i(2)', 'columns': {'x': 'cl * 0.5'}},
        'model': {'formula': '~ x + (1|gr(cl))', 'covariance': [0.5]},
        'design': {'m': 2, 'algo': [3], 'condition': 'cl'},
    }
    path = _write_config(tmp_path, config)
    slope, intercept = tmp_path / 'slope.json', tmp_path / 'intercept.json'
    assert main(['design', '-c', path, '--c-vector', '0', '1', '--weights', '0.5', '0.5', '-o', str(slope)]) == 0
    assert main(['design', '-c', path, '--c-vector', '1', '0', '-o', str(intercept)]) == 0
    slope_payload, intercept_payload = json.loads(slope.read_text()), json.loads(intercept.read_text())
    assert slope_payload['config']['design']['c'] == [0.0, 1.0]
    assert slope_payload['result']['selected'] == [1, 8]
    assert slope_payload['result']['apportionment']['hamilton'] == [1, 1]
    assert 'apportionment' not in intercept_payload['result']
    assert intercept_payload['result']['value'] != slope_payload['result']['value']


@pytest.mark.parametrize('arguments', [
    ['gen', '--nelder', '~(j(4) * t(5)) > i(5)'],
    ['simulate', *CLUSTERED, '--family', 'binomial'],
    ['power', *CLUSTERED, '--family', 'binomial'],
    ['design', *CLUSTERED, '--m', '3', '--algo', '1', '2', '--condition', 'cl', '--restarts', '3'],
    ['apportion', '--weights', '0.2', '0.3', '0.5', '--m', '7'],
])
def test_rerun_is_byte_identical(tmp_path, arguments):
    output = tmp_path / 'out'
    assert main(arguments + ['--seed', '11', '-o', str(output)]) == 0
    first = output.read_bytes()
    assert main(arguments + ['--seed', '11', '-o', str(output)]) == 0
    assert output.read_bytes() == first


@pytest.mark.parametrize('method', ['la', 'mcnr'])
def test_fit_rerun_is_byte_identical(tmp_path, method):
    data = tmp_path / 'data.csv'
    assert main(['simulate', *CLUSTERED, '--family', 'binomial', '--seed', '4', '-o', str(data)]) == 0
    output = tmp_path / 'fit.json'
    arguments = ['fit', '--csv', str(data), '--formula', '~ 1 + (1|gr(cl))', '--family', 'binomial',
                 '--covariance', '0.5', '--method', method, '--samples', '20', '--warmup', '50', '--max-iter', '2',
                 '--seed', '11', '-o', str(output)]
    status = main(arguments)
    first = output.read_bytes()
    assert main(arguments) == status
    assert output.read_bytes() == first


def test_emit_matrices(tmp_path):
    directory = tmp_path / 'matrices'
    assert main(['power', '--nelder', '~cl(3) > i(2)', '--formula', '~ 1 + (1|gr(cl))', '--covariance', '0.5',
                 '--emit-matrices', str(directory), '-o', str(tmp_path / 'power.json')]) == 0
    assert sorted(p.name for p in directory.iterdir()) == ['D.mtx', 'Sigma.mtx', 'X.mtx', 'Z.mtx']
    assert (directory / 'Z.mtx').read_text().startswith('%%MatrixMarket')


def test_workspace_registry(tmp_path):
    workspace = tmp_path / 'workspace'
    assert main(['gen', '--nelder', '~cl(2)', '--workspace', str(workspace), '-o', str(tmp_path / 'g.csv')]) == 0
    assert main(['power', '--nelder', '~cl(2)', '--workspace', str(workspace)]) == 1
    runs = RunDatabase(str(workspace)).run_db
    assert sorted(run['exit_code'] for run in runs.values()) == [0, 1]
    assert {run['command'] for run in runs.values()} == {'gen', 'power'}


def test_workspace_reports_earlier_runs(tmp_path, caplog):
    workspace = str(tmp_path / 'workspace')
    arguments = ['gen', '--nelder', '~cl(2)', '--workspace', workspace, '-o', str(tmp_path / 'g.csv')]
    with caplog.at_level(logging.INFO, logger='glmmtool.cli'):
        assert main(arguments) == 0
        assert 'already run' not in caplog.text
        assert main(arguments) == 0
    assert 'Configuration already run 1 time(s)' in caplog.text
    assert 'exited with 0' in caplog.text
    assert len(RunDatabase(workspace).run_db) == 2


@pytest.mark.slow
def test_design_threads_give_same_output(tmp_path):
    config = {
        'data': {'nelder': '~cl(8) > i(2)', 'columns': {'x': 'cl * 0.5'}},
        'model': {'formula': '~ x + (1|gr(cl))', 'covariance': [0.5]},
        'design': {'m': 3, 'algo': [1], 'condition': 'cl', 'restarts': 3},
    }
    path = _write_config(tmp_path, config)
    results = []
    for threads in ('1', '2'):
        output = tmp_path / f'design_{threads}.json'
        assert main(['design', '-c', path, '--seed', '4', '--threads', threads, '-o', str(output)]) == 0
        results.append(json.loads(output.read_text())['result'])
    assert results[0] == results[1]


def test_dumps_is_deterministic():
    assert dumps({'b': 1, 'a': [1.5]}) == dumps({'a': [1.5], 'b': 1})
