"""Reverse Polish instruction streams for covariance entries.

A program evaluates Cov(row_a, row_b) for many row pairs at once: the stack holds numpy arrays with one element per
pair. Data operands index the term's variables, ``k`` for row a and ``k + n_vars`` for row b.
"""
import enum
import json
from dataclasses import dataclass

import numpy as np
import scipy.special

from glmmtool import RPN_VERSION


class Op(enum.IntEnum):
    PUSH_DATA = 0
    PUSH_PARAM = 1
    PUSH_CONST = 2
    ADD = 3
    SUB = 4
    MUL = 5
    DIV = 6
    NEG = 7
    POW = 8
    EXP = 9
    SQRT = 10
    SIN = 11
    COS = 12
    ABS_DIFF = 13
    EUCLID_FOLD = 14
    IS_ZERO = 15
    POS_PART = 16
    BELOW_ONE = 17
    BESSEL_K = 18
    SCALED_BESSEL_K = 19
    GAMMA_FN = 20
    SINC = 21
    COSC = 22


# Opcodes that carry an operand.
_WITH_OPERAND = {Op.PUSH_DATA, Op.PUSH_PARAM, Op.PUSH_CONST, Op.EUCLID_FOLD}


def _scaled_bessel_k(nu, z):
    """z^nu K_nu(z), continuous at z = 0 where it tends to 2^(nu-1) Gamma(nu)."""
    z = np.asarray(z, dtype=float)
    nu = np.broadcast_to(nu, z.shape)
    out = np.empty(z.shape)
    zero = z == 0
    out[zero] = 2.0 ** (nu[zero] - 1) * scipy.special.gamma(nu[zero])
    nonzero = ~zero
    out[nonzero] = z[nonzero] ** nu[nonzero] * scipy.special.kv(nu[nonzero], z[nonzero])
    return out


def _sinc(x):
    x = np.asarray(x, dtype=float)
    with np.errstate(invalid='ignore', divide='ignore'):
        return np.where(x == 0, 1.0, np.sin(x) / np.where(x == 0, 1.0, x))


def _cosc(x):
    x = np.asarray(x, dtype=float)
    with np.errstate(invalid='ignore', divide='ignore'):
        return np.where(x == 0, 0.0, (1 - np.cos(x)) / np.where(x == 0, 1.0, x))


_UNARY = {Op.NEG: np.negative,
          Op.EXP: np.exp,
          Op.SQRT: np.sqrt,
          Op.SIN: np.sin,
          Op.COS: np.cos,
          Op.IS_ZERO: lambda x: (np.asarray(x) == 0).astype(float),
          Op.POS_PART: lambda x: np.maximum(x, 0.0),
          Op.BELOW_ONE: lambda x: (np.asarray(x) < 1).astype(float),
          Op.GAMMA_FN: scipy.special.gamma,
          Op.SINC: _sinc,
          Op.COSC: _cosc}

# Binary operators pop the right operand first.
_BINARY = {Op.ADD: np.add,
           Op.SUB: np.subtract,
           Op.MUL: np.multiply,
           Op.DIV: np.divide,
           Op.POW: np.power,
           Op.ABS_DIFF: lambda a, b: np.abs(a - b),
           Op.BESSEL_K: scipy.special.kv,
           Op.SCALED_BESSEL_K: _scaled_bessel_k}


@dataclass(frozen=True)
class RpnProgram:
    """Immutable instruction stream.

    :param instructions: tuple of ``(Op, operand)`` pairs; operand is ``None`` for operators
    :param n_vars: number of variables of the term the program reads
    """
    instructions: tuple
    n_vars: int
    version: int = RPN_VERSION

    def __post_init__(self):
        depth = 0
        for op, operand in self.instructions:
            if op in (Op.PUSH_DATA, Op.PUSH_PARAM, Op.PUSH_CONST):
                depth += 1
            elif op == Op.EUCLID_FOLD:
                assert depth >= operand, "EUCLID_FOLD needs as many differences as its operand on the stack."
                depth -= operand - 1
            elif op in _BINARY:
                depth -= 1
            if op == Op.PUSH_DATA:
                assert 0 <= operand < 2 * self.n_vars, f"Data operand {operand} out of range."
        assert depth == 1, f"Program leaves {depth} values on the stack instead of one."

    @property
    def param_operands(self) -> list:
        return sorted({operand for op, operand in self.instructions if op == Op.PUSH_PARAM})

    def evaluate(self, theta, xa, xb) -> np.ndarray:
        """Evaluate the program for row pairs.

        :param theta: parameters of the term (local indexing)
        :param xa: array (pairs x n_vars) of first rows
        :param xb: array (pairs x n_vars) of second rows
        :return: array of covariances, one per pair
        """
        xa = np.atleast_2d(np.asarray(xa, dtype=float))
        xb = np.atleast_2d(np.asarray(xb, dtype=float))
        n_pairs = xa.shape[0]
        stack = []
        for op, operand in self.instructions:
            if op == Op.PUSH_DATA:
                stack.append(xa[:, operand] if operand < self.n_vars else xb[:, operand - self.n_vars])
            elif op == Op.PUSH_PARAM:
                stack.append(np.full(n_pairs, theta[operand], dtype=float))
            elif op == Op.PUSH_CONST:
                stack.append(np.full(n_pairs, operand, dtype=float))
            elif op == Op.EUCLID_FOLD:
                diffs = [stack.pop() for _ in range(operand)]
                stack.append(np.sqrt(np.sum(np.square(diffs), axis=0)))
            elif op in _UNARY:
                stack.append(_UNARY[op](stack.pop()))
            else:
                right = stack.pop()
                left = stack.pop()
                stack.append(_BINARY[op](left, right))
        return np.asarray(stack.pop(), dtype=float)

    def to_dict(self) -> dict:
        return {'version': self.version,
                'n_vars': self.n_vars,
                'instructions': [[op.name] if operand is None else [op.name, operand]
                                 for op, operand in self.instructions]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, program: dict):
        assert program['version'] == RPN_VERSION, \
            f"Program version {program['version']} does not match engine version {RPN_VERSION}."
        instructions = tuple((Op[entry[0]], entry[1] if len(entry) > 1 else None)
                             for entry in program['instructions'])
        return cls(instructions=instructions, n_vars=program['n_vars'])


class ProgramBuilder:
    """Accumulates instructions; concatenating sub-programs keeps RPN order."""

    def __init__(self, n_vars: int):
        self.n_vars = n_vars
        self.instructions = []

    def emit(self, op: Op, operand=None):
        assert (operand is not None) == (op in _WITH_OPERAND), f"Operand mismatch for {op.name}."
        self.instructions.append((op, operand))
        return self

    def data(self, k: int, second_row=False):
        return self.emit(Op.PUSH_DATA, k + self.n_vars if second_row else k)

    def param(self, k: int):
        return self.emit(Op.PUSH_PARAM, k)

    def const(self, value: float):
        return self.emit(Op.PUSH_CONST, float(value))

    def distance(self, columns: list, scale: float = None):
        """Push the Euclidean distance between the two rows over ``columns``."""
        if len(columns) == 1:
            self.data(columns[0]).data(columns[0], second_row=True).emit(Op.ABS_DIFF)
        else:
            for k in columns:
                self.data(k).data(k, second_row=True).emit(Op.SUB)
            self.emit(Op.EUCLID_FOLD, len(columns))
        if scale is not None and scale != 1:
            self.const(scale).emit(Op.DIV)
        return self

    def build(self) -> RpnProgram:
        return RpnProgram(instructions=tuple(self.instructions), n_vars=self.n_vars)

