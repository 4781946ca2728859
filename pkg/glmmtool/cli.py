"""Command-line interface.

Every command reads a JSON run configuration (``--config``) and/or flags, and writes CSV (``gen``, ``simulate``)
or deterministic JSON carrying the configuration echo and the engine version (``power``, ``fit``, ``design``,
``apportion``). Exit codes: 0 success, 1 configuration error, 2 numerical failure, 3 non-convergence.
"""
import argparse
import json
import logging
import os
import sys
from datetime import datetime

import numpy as np
import pandas as pd

from glmmtool import __version__
from glmmtool.config import RunConfig, ModelConfig, COMMANDS, FIT_METHODS
from glmmtool.core.model import GlmmModel
from glmmtool.core.sparse import write_matrix_market
from glmmtool.database.db import RunDatabase, config_hash
from glmmtool.exceptions import GlmmError, ConfigError, ConvergenceError
from glmmtool.fitting.laplace import la_fit, VARIANTS
from glmmtool.fitting.mcml import mcml_fit
from glmmtool.optim.apportion import apportion
from glmmtool.optim.design_space import DesignSpace, optimal_design, trace_report

logger = logging.getLogger(__name__)


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def dumps(payload: dict) -> str:
    """Deterministic JSON text of a result."""
    return json.dumps(payload, sort_keys=True, indent=2, default=_json_default) + '\n'


def _payload(config: RunConfig, result) -> dict:
    return {'command': config.command, 'version': __version__, 'config': config.to_dict(), 'result': result}


def _write_text(text: str, output: str = None):
    if output is None:
        sys.stdout.write(text)
        return
    with open(output, 'w') as f:
        f.write(text)
    logger.info(f"Wrote {output}")


def _write_csv(data: pd.DataFrame, output: str = None):
    _write_text(data.to_csv(index=False), output)


def _rng(config: RunConfig) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(config.seed))


def load_data(config: RunConfig) -> pd.DataFrame:
    return config.data.load(config.base_dir)


def build_model(config: RunConfig, data: pd.DataFrame, model_config: ModelConfig = None,
                outcome: str = None) -> GlmmModel:
    model = (model_config or config.model).build(data, outcome=outcome)
    if config.rows is not None:
        try:
            rows = data.query(config.rows).index.to_numpy()
        except Exception as error:
            raise ConfigError(f"Could not select rows with '{config.rows}': {error}")
        if not len(rows):
            raise ConfigError(f"Row selection '{config.rows}' is empty.")
        model = model.subset_rows(rows)
        logger.info(f"Using {len(rows)} of {len(data)} rows")
    return model


def emit_matrices(model: GlmmModel, directory: str):
    """Write X, Z, D and Sigma in Matrix-Market format."""
    os.makedirs(directory, exist_ok=True)
    matrices = {'X': model.X.matrix, 'Z': model.covariance.Z, 'D': model.covariance.build_D(),
                'Sigma': model.sigma_approx()}
    for name, matrix in matrices.items():
        write_matrix_market(os.path.join(directory, f'{name}.mtx'), matrix, comment=f'{name} of {model.formula}')
    logger.info(f"Wrote model matrices to {directory}")


def _model_for_command(config: RunConfig, data: pd.DataFrame = None, outcome: str = None) -> GlmmModel:
    data = load_data(config) if data is None else data
    model = build_model(config, data, outcome=outcome)
    if config.emit_matrices:
        emit_matrices(model, config.emit_matrices)
    return model


def run_gen(config: RunConfig):
    _write_csv(load_data(config), config.output)


def run_simulate(config: RunConfig):
    model = _model_for_command(config)
    _write_csv(model.sim_data(_rng(config), mode='data'), config.output)


def run_power(config: RunConfig):
    model = _model_for_command(config)
    logger.info(f"Power at alpha={config.alpha}:\n{model.power_report(config.alpha)}")
    records = model.power(config.alpha).to_dict(orient='records')
    _write_text(dumps(_payload(config, {'power': records})), config.output)


def run_fit(config: RunConfig):
    data = load_data(config)
    outcome = config.data.outcome or ('y' if 'y' in data.columns else None)
    if outcome is None:
        raise ConfigError("Fitting needs an outcome column: set data.outcome.")
    model = _model_for_command(config, data, outcome)
    fit = config.fit

    if config.model.mean is None or fit.warm_start == 'glm':
        model.update_parameters(beta=model.glm_start())
    if fit.method == 'la':
        result = la_fit(model, fit.la_options())
    else:
        if fit.warm_start == 'la':
            logger.info("Warm start from the Laplace approximation")
            la_fit(model, fit.la_options())
        result = mcml_fit(model, fit.mcml_options(), fit.hmc_options(), _rng(config))

    logger.info(f"Estimates:\n{result.summary()}")
    _write_text(dumps(_payload(config, result.to_dict(include_re=config.emit_re))), config.output)
    if not result.converged and fit.strict:
        raise ConvergenceError(f"Fit did not converge within {fit.max_iter} iterations "
                               f"(last change {result.max_delta:.5f}).", result=result)


def run_design(config: RunConfig):
    design = config.design
    if design.m is None:
        raise ConfigError("Design size design.m is missing.")
    data = load_data(config)
    model_configs = [config.model] + [config.model.merged(changes) for changes in design.models]
    models = [build_model(config, data, model_config=model_config) for model_config in model_configs]
    if config.emit_matrices:
        emit_matrices(models[0], config.emit_matrices)

    c = design.c_vector(models[0])
    space = DesignSpace(models, c, condition=design.condition, model_weights=design.model_weights,
                        robust=design.robust, rm_cols=design.rm_cols)
    result = optimal_design(space, int(design.m), algo=design.algo, restarts=design.restarts, seed=config.seed,
                            threads=config.threads)
    logger.info(f"Objective trace:\n{trace_report(result)}")
    payload = result.to_dict()
    if design.weights is not None:
        payload['apportionment'] = _apportionment(design)
    _write_text(dumps(_payload(config, payload)), config.output)


def _apportionment(design) -> dict:
    table = apportion(design.weights, int(design.m), methods=design.methods)
    return {column: table[column].tolist() for column in table.columns}


def run_apportion(config: RunConfig):
    design = config.design
    if design.weights is None or design.m is None:
        raise ConfigError("Apportionment needs design.weights and design.m.")
    _write_text(dumps(_payload(config, _apportionment(design))), config.output)


COMMAND_RUNNERS = {'gen': run_gen, 'simulate': run_simulate, 'power': run_power, 'fit': run_fit,
                   'design': run_design, 'apportion': run_apportion}


def run(config: RunConfig) -> int:
    """Execute a configured command and return its exit status."""
    assert config.command in COMMANDS, f"Command must be one of {COMMANDS}."
    database, run_id = None, None
    if config.workspace:
        database = RunDatabase(config.workspace)
        earlier = database.find_runs(config_hash(config.to_dict()))
        if earlier:
            logger.info(f"Configuration already run {len(earlier)} time(s) in this workspace; last run {earlier[-1]} "
                        f"exited with {database.get_run_data('exit_code', earlier[-1])}")
        run_id = database.store_run_information(config.command, config.to_dict(), config.seed, __version__,
                                                output=config.output, run_start_time=datetime.now())
    exit_code = 0
    try:
        COMMAND_RUNNERS[config.command](config)
    except GlmmError as error:
        logger.error(f"{type(error).__name__}: {error}")
        exit_code = error.exit_code
    finally:
        if database is not None:
            database.mark_run_as_finished(run_id, exit_code)
    return exit_code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='glmmtool', description="Generalised linear mixed models: design "
                                                                  "generation, power, fitting and optimal design.")
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    subparsers = parser.add_subparsers(dest='command', required=True)

    for command in COMMANDS:
        sub = subparsers.add_parser(command)
        sub.add_argument('--config', '-c', help="JSON run configuration")
        sub.add_argument('--output', '-o', help="output file, stdout when omitted")
        sub.add_argument('--seed', type=int)
        sub.add_argument('--threads', type=int, help="worker processes for the restarts of design searches "
                                                 "(default: $GLMMTOOL_THREADS or 1)")
        sub.add_argument('--workspace', help="folder of the run registry")
        sub.add_argument('--verbose', '-v', action='store_true')
        sub.add_argument('--quiet', '-q', action='store_true')
        sub.add_argument('--nelder', help="block design notation for the data")
        sub.add_argument('--csv', help="CSV file with the data")
        if command == 'gen':
            continue
        if command != 'apportion':
            sub.add_argument('--formula')
            sub.add_argument('--family')
            sub.add_argument('--link')
            sub.add_argument('--mean', type=float, nargs='+', help="mean parameters beta")
            sub.add_argument('--covariance', type=float, nargs='+', help="covariance parameters theta")
            sub.add_argument('--var-par', type=float, help="scale parameter")
            sub.add_argument('--rows', help="pandas query selecting the rows to use")
            sub.add_argument('--emit-matrices', metavar='DIR', help="write X, Z, D and Sigma as Matrix-Market files")
        if command == 'power':
            sub.add_argument('--alpha', type=float)
        if command == 'fit':
            sub.add_argument('--outcome')
            sub.add_argument('--method', choices=FIT_METHODS)
            sub.add_argument('--la-variant', choices=VARIANTS)
            sub.add_argument('--warm-start', choices=('la', 'glm'))
            sub.add_argument('--tol', type=float)
            sub.add_argument('--max-iter', type=int)
            sub.add_argument('--samples', type=int)
            sub.add_argument('--warmup', type=int)
            sub.add_argument('--sim-lik', action='store_true', default=None)
            sub.add_argument('--se-method', choices=('information', 'hessian'))
            sub.add_argument('--emit-re', action='store_true', default=None, help="include random-effect samples")
        if command in ('design', 'apportion'):
            sub.add_argument('--m', type=int, help="number of conditions or replications")
        if command == 'design':
            sub.add_argument('--algo', type=int, nargs='+', help="1 local search, 2 greedy, 3 reverse greedy")
            sub.add_argument('--condition', help="data column assigning rows to experimental conditions")
            sub.add_argument('--restarts', type=int)
            sub.add_argument('--c-vector', type=float, nargs='+', help="contrast c of the objective c^T M c")
        if command in ('design', 'apportion'):
            sub.add_argument('--weights', type=float, nargs='+', help="design weights to apportion over m")
    return parser


FLAG_FIELDS = {'output': 'output', 'seed': 'seed', 'threads': 'threads', 'workspace': 'workspace',
               'nelder': 'data.nelder', 'csv': 'data.csv', 'outcome': 'data.outcome', 'formula': 'model.formula',
               'family': 'model.family', 'link': 'model.link', 'mean': 'model.mean',
               'covariance': 'model.covariance', 'var_par': 'model.var_par', 'rows': 'rows',
               'emit_matrices': 'emit_matrices', 'alpha': 'alpha', 'method': 'fit.method',
               'la_variant': 'fit.la_variant', 'warm_start': 'fit.warm_start', 'tol': 'fit.tol',
               'max_iter': 'fit.max_iter', 'samples': 'fit.samples', 'warmup': 'fit.warmup',
               'sim_lik': 'fit.sim_lik', 'se_method': 'fit.se_method', 'emit_re': 'emit_re', 'm': 'design.m',
               'algo': 'design.algo', 'condition': 'design.condition', 'restarts': 'design.restarts',
               'weights': 'design.weights', 'c_vector': 'design.c'}


def config_from_args(args: argparse.Namespace) -> RunConfig:
    config = RunConfig.from_json(args.config) if args.config else RunConfig()
    config.command = args.command
    flags = vars(args)
    overrides = {field: flags[flag] for flag, field in FLAG_FIELDS.items() if flag in flags}
    # A data source given on the command line replaces the configured one.
    if overrides.get('data.nelder') is not None:
        config.data.csv = None
    if overrides.get('data.csv') is not None:
        config.data.nelder = None
    return config.override(overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format='%(asctime)s %(levelname)s %(name)s: %(message)s', stream=sys.stderr)
    try:
        config = config_from_args(args)
    except ConfigError as error:
        logger.error(f"{type(error).__name__}: {error}")
        return error.exit_code
    return run(config)
