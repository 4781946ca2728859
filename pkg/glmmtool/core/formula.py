"""Model formulae: fixed effects and random-effect terms.

``~ factor(t) + int - 1 + (1|gr(cl)*ar1(t))`` has no intercept, a period factor and an intervention covariate for the
mean, and one random-effect term whose covariance is the product of a cluster membership and an AR(1) decay in
time. Covariance parameters are numbered across terms and functions in the order they are written.
"""
import logging
import re
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from glmmtool.core.covariance_functions import get_function
from glmmtool.core.rpn import ProgramBuilder, RpnProgram, Op
from glmmtool.exceptions import FormulaError

logger = logging.getLogger(__name__)

INTERCEPT = '(Intercept)'

_NAME = r'[A-Za-z.][A-Za-z0-9_.]*'
_CALL = re.compile(rf'^\s*({_NAME})\s*\(([^()]*)\)\s*$')
_IDENTIFIER = re.compile(rf'^{_NAME}$')


@dataclass(frozen=True)
class FunctionCall:
    name: str
    variables: tuple

    def __str__(self):
        return f"{self.name}({','.join(self.variables)})"


@dataclass(frozen=True)
class RandomTerm:
    """``(z | f1(vars) * f2(vars) ...)``; ``slope`` is None for a random intercept."""
    functions: tuple
    slope: str = None

    @property
    def variables(self) -> tuple:
        names = []
        for call in self.functions:
            names.extend(v for v in call.variables if v not in names)
        return tuple(names)

    @property
    def group_variables(self) -> tuple:
        names = []
        for call in self.functions:
            if call.name == 'gr':
                names.extend(v for v in call.variables if v not in names)
        return tuple(names)

    @property
    def n_params(self) -> int:
        return sum(get_function(call.name).n_params for call in self.functions)

    def __str__(self):
        return f"({self.slope or 1}|{'*'.join(str(call) for call in self.functions)})"


@dataclass(frozen=True)
class FixedTerm:
    """A covariate, or a factor expanded to indicator columns."""
    variable: str
    is_factor: bool = False

    def __str__(self):
        return f"factor({self.variable})" if self.is_factor else self.variable


@dataclass(frozen=True)
class ModelFormula:
    fixed: tuple
    intercept: bool
    random: tuple = field(default_factory=tuple)

    @property
    def n_theta(self) -> int:
        return sum(term.n_params for term in self.random)

    @property
    def variables(self) -> set:
        names = {term.variable for term in self.fixed}
        for term in self.random:
            names.update(term.variables)
            if term.slope:
                names.add(term.slope)
        return names

    def __str__(self):
        parts = [str(term) for term in self.fixed] + [str(term) for term in self.random]
        if not self.intercept:
            parts.append('-1')
        return '~ ' + ' + '.join(parts).replace('+ -1', '- 1')


def _split_top_level(text: str) -> list:
    """Split an additive formula into signed terms, ignoring operators inside brackets."""
    terms = []
    depth = 0
    sign = '+'
    current = ''
    for position, char in enumerate(text):
        if char == '(':
            depth += 1
        elif char == ')':
            depth -= 1
            if depth < 0:
                raise FormulaError(f"Unbalanced ')' at position {position} in '{text}'.")
        if depth == 0 and char in '+-':
            if current.strip():
                terms.append((sign, current.strip()))
            elif terms:
                raise FormulaError(f"Malformed formula '{text}' near position {position}.")
            sign = char
            current = ''
        else:
            current += char
    if depth != 0:
        raise FormulaError(f"Unbalanced '(' in '{text}'.")
    if current.strip():
        terms.append((sign, current.strip()))
    return terms


def _parse_variables(arguments: str, context: str) -> tuple:
    variables = tuple(v.strip() for v in arguments.split(','))
    if not variables or any(not _IDENTIFIER.match(v) for v in variables):
        raise FormulaError(f"Malformed variable list in '{context}'.")
    return variables


def _parse_random(body: str) -> RandomTerm:
    if body.count('|') != 1:
        raise FormulaError(f"Random-effect term '({body})' must contain exactly one '|'.")
    left, right = (part.strip() for part in body.split('|'))
    if left == '1':
        slope = None
    elif _IDENTIFIER.match(left):
        slope = left
    else:
        raise FormulaError(f"Malformed random-effect covariate '{left}' in '({body})'.")

    calls = []
    for factor in right.split('*'):
        match = _CALL.match(factor)
        if match is None:
            raise FormulaError(f"Malformed covariance function '{factor.strip()}' in '({body})'.")
        function = get_function(match.group(1))
        calls.append(FunctionCall(function.name, _parse_variables(match.group(2), factor)))

    scale_bearing = [str(call) for call in calls if get_function(call.name).scale_bearing]
    if len(scale_bearing) > 1:
        raise FormulaError(f"Term '({body})' multiplies {' and '.join(scale_bearing)}, which both carry a free "
                           f"scale parameter and are not identifiable together. Use the unit-variance version "
                           f"(e.g. fexp0) for one of them.")
    return RandomTerm(functions=tuple(calls), slope=slope)


def parse_formula(text: str) -> ModelFormula:
    """Parse a model formula.

    :param text: formula such as ``~ factor(t) - 1 + (1|gr(j)*ar1(t))``
    :type text: str
    :return: parsed formula
    """
    body = text.strip()
    if body.startswith('~'):
        body = body[1:]
    if not body.strip():
        raise FormulaError("Empty formula.")

    fixed = []
    random = []
    intercept = True
    for sign, term in _split_top_level(body):
        if term in ('0', '1'):
            intercept = sign == '+' and term == '1'
            continue
        if sign == '-':
            raise FormulaError(f"Only the intercept can be removed with '-', got '-{term}'.")
        if term.startswith('(') and term.endswith(')') and '|' in term:
            random.append(_parse_random(term[1:-1]))
            continue
        if '|' in term:
            raise FormulaError(f"Random-effect term '{term}' must be enclosed in brackets.")
        match = _CALL.match(term)
        if match is not None:
            if match.group(1) != 'factor':
                raise FormulaError(f"Unsupported transformation '{term}' in mean formula; only factor() is allowed.")
            fixed.append(FixedTerm(_parse_variables(match.group(2), term)[0], is_factor=True))
        elif _IDENTIFIER.match(term):
            fixed.append(FixedTerm(term))
        else:
            raise FormulaError(f"Malformed term '{term}'.")

    formula = ModelFormula(fixed=tuple(fixed), intercept=intercept, random=tuple(random))
    logger.debug(f"Parsed formula {formula} with {len(random)} random term(s) and {formula.n_theta} "
                 f"covariance parameter(s)")
    return formula


def sort_levels(values) -> list:
    """Ascending numeric levels first, then the remaining levels lexicographically."""
    numeric, other = [], []
    for value in pd.unique(pd.Series(values).dropna()):
        try:
            numeric.append((float(value), value))
        except (TypeError, ValueError):
            other.append(str(value))
    return [value for _, value in sorted(numeric, key=lambda pair: pair[0])] + sorted(other)


@dataclass
class FixedDesignMatrix:
    """Dense mean design matrix with the factor levels used to build it."""
    matrix: np.ndarray
    column_names: list
    factor_levels: dict
    terms: tuple
    intercept: bool

    @property
    def P(self) -> int:
        return self.matrix.shape[1]

    def for_data(self, data: pd.DataFrame) -> np.ndarray:
        """Rebuild the matrix for new rows with the same columns."""
        return _assemble(self.terms, self.intercept, data, self.factor_levels)[0]


def _check_present(data: pd.DataFrame, names):
    missing = [name for name in names if name not in data.columns]
    if missing:
        raise FormulaError(f"Variable(s) {', '.join(missing)} not found in data (columns: {list(data.columns)}).")


def _assemble(terms, intercept, data, factor_levels):
    n = len(data)
    columns = []
    names = []
    if intercept:
        columns.append(np.ones(n))
        names.append(INTERCEPT)
    first_factor = True
    for term in terms:
        values = data[term.variable]
        if not term.is_factor:
            if not pd.api.types.is_numeric_dtype(values):
                raise FormulaError(f"Covariate '{term.variable}' is not numeric; wrap it in factor().")
            columns.append(values.to_numpy(dtype=float))
            names.append(term.variable)
            continue

        levels = factor_levels[term.variable]
        full_coding = first_factor and not intercept
        first_factor = False
        kept = levels if full_coding else levels[1:]
        if not kept:
            raise FormulaError(f"factor({term.variable}) has a single level and collides with the intercept.")
        as_text = values.astype(str).to_numpy()
        for level in kept:
            columns.append((as_text == str(level)).astype(float))
            names.append(f"factor({term.variable}){level}")
    matrix = np.column_stack(columns) if columns else np.zeros((n, 0))
    return matrix, names


def build_X(formula: ModelFormula, data: pd.DataFrame) -> FixedDesignMatrix:
    """Expand the fixed part of a formula into a dense design matrix.

    With an intercept every factor contributes k-1 indicator columns. Without one, the first factor contributes all
    k levels.
    """
    _check_present(data, [term.variable for term in formula.fixed])
    factor_levels = {term.variable: sort_levels(data[term.variable])
                     for term in formula.fixed if term.is_factor}
    matrix, names = _assemble(formula.fixed, formula.intercept, data, factor_levels)
    if matrix.shape[1] == 0:
        raise FormulaError("Mean formula has no columns.")
    return FixedDesignMatrix(matrix=matrix, column_names=names, factor_levels=factor_levels,
                             terms=formula.fixed, intercept=formula.intercept)


@dataclass
class CovarianceBlockProgram:
    """A random-effect term compiled against a data table.

    ``values`` holds the unique combinations of the term's variables (one row per random effect), sorted by group
    then by the remaining variables; ``row_index`` maps every data row onto its combination.
    """
    term: RandomTerm
    program: RpnProgram
    param_indices: np.ndarray
    bounds: list
    variables: tuple
    values: np.ndarray
    group: np.ndarray
    row_index: np.ndarray
    slope: np.ndarray
    has_gr: bool
    compact: bool
    codes: dict = field(default_factory=dict)

    @property
    def n_effects(self) -> int:
        return self.values.shape[0]

    @property
    def n_params(self) -> int:
        return len(self.param_indices)

    def blocks(self) -> list:
        """Index arrays (into ``values``) of each block; one block per group level."""
        if not self.has_gr:
            return [np.arange(self.n_effects)]
        boundaries = np.flatnonzero(np.diff(self.group)) + 1
        return np.split(np.arange(self.n_effects), boundaries)

    def local_theta(self, theta) -> np.ndarray:
        return np.asarray(theta, dtype=float)[self.param_indices]

    def evaluate(self, theta, a, b) -> np.ndarray:
        """Covariance between effects ``a`` and ``b`` (index arrays into ``values``) at global ``theta``."""
        return self.program.evaluate(self.local_theta(theta), self.values[np.atleast_1d(a)],
                                     self.values[np.atleast_1d(b)])

    def encode(self, data: pd.DataFrame) -> np.ndarray:
        """Numeric representation of new rows using this term's encodings."""
        _check_present(data, self.variables)
        encoded = np.empty((len(data), len(self.variables)))
        for k, name in enumerate(self.variables):
            if name in self.codes:
                mapping = self.codes[name]
                as_text = data[name].astype(str)
                unknown = ~as_text.isin(mapping.keys())
                # Unseen group labels get fresh codes so they match nothing observed.
                fresh = {label: len(mapping) + i for i, label in enumerate(pd.unique(as_text[unknown]))}
                encoded[:, k] = as_text.map(lambda label: mapping.get(label, fresh.get(label))).to_numpy(dtype=float)
            else:
                encoded[:, k] = data[name].to_numpy(dtype=float)
        return encoded


def compile_term(term: RandomTerm, data: pd.DataFrame, param_offset: int = 0,
                 effective_range: float = None) -> CovarianceBlockProgram:
    """Compile a random-effect term into an RPN program bound to ``data``.

    :param term: parsed term
    :param data: data table
    :param param_offset: index of the term's first parameter in the model's theta
    :param effective_range: distance scaling for compactly supported functions
    :return: compiled term
    """
    variables = term.variables
    _check_present(data, variables + ((term.slope,) if term.slope else ()))
    group_variables = set(term.group_variables)

    codes = {}
    encoded = np.empty((len(data), len(variables)))
    for k, name in enumerate(variables):
        column = data[name]
        if pd.api.types.is_numeric_dtype(column):
            encoded[:, k] = column.to_numpy(dtype=float)
            continue
        if name not in group_variables or any(name in call.variables for call in term.functions
                                               if call.name != 'gr'):
            raise FormulaError(f"Variable '{name}' is not numeric and can only be used in gr(), not in a "
                               f"distance-based function of term {term}.")
        levels = [str(level) for level in sort_levels(column)]
        codes[name] = {level: float(i) for i, level in enumerate(levels)}
        encoded[:, k] = column.astype(str).map(codes[name]).to_numpy(dtype=float)

    builder = ProgramBuilder(len(variables))
    bounds = []
    compact = False
    local = 0
    for position, call in enumerate(term.functions):
        function = get_function(call.name)
        dim = len(call.variables)
        function.check_dimension(dim)
        if effective_range is not None and function.compact:
            assert effective_range > 0, "Effective range must be positive."
        scale = effective_range if function.compact else None
        function.emit(builder, local, [variables.index(v) for v in call.variables], scale)
        if position > 0:
            builder.emit(Op.MUL)
        bounds.extend(function.parameter_bounds(dim))
        compact = compact or function.compact
        local += function.n_params
    program = builder.build()

    # Sort combinations by group, then by the remaining variables.
    group_columns = [variables.index(v) for v in term.group_variables]
    other_columns = [k for k in range(len(variables)) if k not in group_columns]
    order_columns = group_columns + other_columns
    unique_rows, row_index = np.unique(encoded[:, order_columns], axis=0, return_inverse=True)
    values = np.empty_like(unique_rows)
    values[:, order_columns] = unique_rows
    row_index = np.asarray(row_index).reshape(-1)

    if group_columns:
        _, group = np.unique(unique_rows[:, :len(group_columns)], axis=0, return_inverse=True)
        group = np.asarray(group).reshape(-1)
    else:
        group = np.zeros(len(values), dtype=np.int64)

    slope = data[term.slope].to_numpy(dtype=float) if term.slope else np.ones(len(data))

    logger.debug(f"Compiled {term}: {len(values)} effects in {len(np.unique(group))} block(s), "
                 f"{len(program.instructions)} instructions")
    return CovarianceBlockProgram(term=term, program=program,
                                  param_indices=np.arange(param_offset, param_offset + local),
                                  bounds=bounds, variables=variables, values=values, group=group,
                                  row_index=row_index, slope=slope, has_gr=bool(group_columns), compact=compact,
                                  codes=codes)
