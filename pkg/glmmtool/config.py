"""Run configuration of the command-line tool.

A run is described by a JSON document with the sections ``data``, ``model``, ``fit`` and ``design`` plus a few
top-level settings. Command-line flags override individual fields, see :meth:`RunConfig.override`.
"""
import json
import logging
import os
from dataclasses import dataclass, field, asdict, fields

import numpy as np
import pandas as pd

from glmmtool.core.model import GlmmModel
from glmmtool.core.nelder import nelder
from glmmtool.exceptions import ConfigError
from glmmtool.fitting.laplace import LaOptions
from glmmtool.fitting.mcml import McmlOptions
from glmmtool.fitting.sampler import HmcOptions
from glmmtool.optim.apportion import METHODS as APPORTION_METHODS
from glmmtool.optim.design_space import DEFAULT_RESTARTS

logger = logging.getLogger(__name__)

COMMANDS = ('gen', 'simulate', 'power', 'fit', 'design', 'apportion')
FIT_METHODS = ('mcnr', 'mcem', 'la')
THREADS_VARIABLE = 'GLMMTOOL_THREADS'


def default_threads() -> int:
    value = os.environ.get(THREADS_VARIABLE, '1')
    try:
        threads = int(value)
    except ValueError:
        raise ConfigError(f"{THREADS_VARIABLE} must be an integer, got '{value}'.")
    assert threads >= 1, f"{THREADS_VARIABLE} must be at least 1."
    return threads


def _from_section(cls, section: dict, name: str, aliases: dict = None):
    if section is None:
        return cls()
    if not isinstance(section, dict):
        raise ConfigError(f"Config section '{name}' must be an object.")
    section = {(aliases or {}).get(key, key): value for key, value in section.items()}
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(section) - known)
    if unknown:
        raise ConfigError(f"Unknown field(s) in config section '{name}': {', '.join(unknown)}.")
    return cls(**section)


@dataclass
class DataConfig:
    """Where the data table comes from: a CSV file or block design notation."""
    csv: str = None
    nelder: str = None
    columns: dict = field(default_factory=dict)
    outcome: str = None

    def __post_init__(self):
        if self.csv is not None and self.nelder is not None:
            raise ConfigError("Give either a CSV file or a design notation as data, not both.")

    def load(self, base_dir: str = '.') -> pd.DataFrame:
        if self.csv is not None:
            path = self.csv if os.path.isabs(self.csv) else os.path.join(base_dir, self.csv)
            if not os.path.isfile(path):
                raise ConfigError(f"Data file '{path}' does not exist.")
            data = pd.read_csv(path)
            for column in data.columns:
                if pd.api.types.is_numeric_dtype(data[column]):
                    data[column] = data[column].astype(float)
            logger.info(f"Read {len(data)} rows and {data.shape[1]} columns from {path}")
        elif self.nelder is not None:
            data = nelder(self.nelder)
        else:
            raise ConfigError("No data given: set data.csv or data.nelder.")
        for name, expression in self.columns.items():
            try:
                values = data.eval(expression)
            except Exception as error:
                raise ConfigError(f"Could not evaluate column '{name}' = {expression}: {error}")
            data[name] = values.astype(float) if pd.api.types.is_bool_dtype(values) else values
        if self.outcome is not None and self.outcome not in data.columns:
            raise ConfigError(f"Outcome column '{self.outcome}' not found in data.")
        return data


@dataclass
class ModelConfig:
    formula: str = None
    family: str = 'gaussian'
    link: str = None
    mean: list = None
    covariance: list = None
    var_par: float = 1.0
    offset: str = None
    attenuate: bool = False
    sparse: bool = True
    effective_range: object = None

    def build(self, data: pd.DataFrame, outcome: str = None) -> GlmmModel:
        """Compile the model on ``data``; parameter lengths are checked here, before any numerical work."""
        if not self.formula:
            raise ConfigError("Model formula is missing.")
        effective_range = self.effective_range
        if isinstance(effective_range, dict):
            effective_range = {int(term): float(value) for term, value in effective_range.items()}
        model = GlmmModel(self.formula, data, family=self.family, link=self.link, mean=self.mean,
                          covariance=self.covariance, var_par=self.var_par, offset=self.offset, outcome=outcome,
                          attenuate=self.attenuate, sparse=self.sparse, effective_range=effective_range)
        if self.covariance is None and model.covariance.n_theta:
            raise ConfigError(f"Model needs {model.covariance.n_theta} covariance parameter(s) "
                              f"({', '.join(model.covariance.parameter_labels)}).")
        return model

    def merged(self, changes: dict) -> 'ModelConfig':
        """A copy with some fields replaced, as used for the alternative models of a robust design."""
        return _from_section(ModelConfig, {**asdict(self), **changes}, 'design.models')


@dataclass
class FitConfig:
    method: str = 'mcnr'
    tol: float = 0.01
    max_iter: int = 100
    samples: int = 250
    warmup: int = 500
    adapt: int = 50
    max_steps: int = 100
    target_accept: float = 0.95
    integration_time: float = 5.0
    sim_lik: bool = False
    se_method: str = 'information'
    la_variant: str = 'scoring'
    warm_start: str = None
    strict: bool = True

    def __post_init__(self):
        if self.method not in FIT_METHODS:
            raise ConfigError(f"Fit method must be one of {FIT_METHODS}, got '{self.method}'.")
        if self.warm_start not in (None, 'la', 'glm'):
            raise ConfigError(f"Warm start must be 'la' or 'glm', got '{self.warm_start}'.")

    def mcml_options(self) -> McmlOptions:
        return McmlOptions(algorithm=self.method, tol=self.tol, max_iter=self.max_iter, sim_lik=self.sim_lik,
                           se_method=self.se_method)

    def hmc_options(self) -> HmcOptions:
        return HmcOptions(warmup=self.warmup, adapt=self.adapt, samples=self.samples, max_steps=self.max_steps,
                          target_accept=self.target_accept, integration_time=self.integration_time)

    def la_options(self) -> LaOptions:
        return LaOptions(variant=self.la_variant, tol=self.tol, max_iter=self.max_iter)


@dataclass
class DesignConfig:
    m: int = None
    algo: list = field(default_factory=lambda: [1])
    condition: str = None
    c: list = None
    models: list = field(default_factory=list)
    model_weights: list = None
    robust: str = 'log-sum'
    restarts: int = DEFAULT_RESTARTS
    rm_cols: list = None
    weights: list = None
    methods: list = field(default_factory=lambda: list(APPORTION_METHODS))

    def __post_init__(self):
        self.algo = [self.algo] if np.ndim(self.algo) == 0 else list(self.algo)

    def c_vector(self, model: GlmmModel) -> list:
        """c per model, the unit vector of the last mean parameter when omitted."""
        if self.c is not None:
            return self.c
        c = np.zeros(model.P - len(self.rm_cols or []))
        c[-1] = 1.0
        return list(c)


@dataclass
class RunConfig:
    command: str = None
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    design: DesignConfig = field(default_factory=DesignConfig)
    seed: int = None
    threads: int = field(default_factory=default_threads)
    alpha: float = 0.05
    output: str = None
    workspace: str = None
    emit_matrices: str = None
    emit_re: bool = False
    rows: str = None
    base_dir: str = field(default='.', repr=False)

    def __post_init__(self):
        if self.command is not None and self.command not in COMMANDS:
            raise ConfigError(f"Command must be one of {COMMANDS}, got '{self.command}'.")
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}.")
        if int(self.threads) < 1:
            raise ConfigError(f"threads must be at least 1, got {self.threads}.")

    @classmethod
    def from_dict(cls, config: dict, base_dir: str = '.') -> 'RunConfig':
        config = dict(config)
        sections = {
            'data': _from_section(DataConfig, config.pop('data', None), 'data'),
            'model': _from_section(ModelConfig, config.pop('model', None), 'model'),
            'fit': _from_section(FitConfig, config.pop('fit', None), 'fit', aliases={'lambda': 'integration_time'}),
            'design': _from_section(DesignConfig, config.pop('design', None), 'design'),
        }
        known = {f.name for f in fields(cls)} - set(sections) - {'base_dir'}
        unknown = sorted(set(config) - known)
        if unknown:
            raise ConfigError(f"Unknown top-level config field(s): {', '.join(unknown)}.")
        return cls(**sections, **config, base_dir=base_dir)

    @classmethod
    def from_json(cls, path: str) -> 'RunConfig':
        if not os.path.isfile(path):
            raise ConfigError(f"Config file '{path}' does not exist.")
        with open(path) as f:
            try:
                config = json.load(f)
            except json.JSONDecodeError as error:
                raise ConfigError(f"Config file '{path}' is not valid JSON: {error}")
        return cls.from_dict(config, base_dir=os.path.dirname(os.path.abspath(path)))

    def to_dict(self) -> dict:
        config = asdict(self)
        config.pop('base_dir')
        return config

    def override(self, overrides: dict):
        """Apply flag values; keys are field names, dotted for section fields (``'fit.method'``).

        ``None`` values are skipped so unset flags keep the configured value.
        """
        for key, value in overrides.items():
            if value is None:
                continue
            target, name = self, key
            if '.' in key:
                section, name = key.split('.', 1)
                target = getattr(self, section)
            if not hasattr(target, name):
                raise ConfigError(f"Unknown config field '{key}'.")
            setattr(target, name, value)
        # Re-run the validation of every section.
        for section in (self.data, self.fit, self.design):
            section.__post_init__()
        self.__post_init__()
        return self
