"""Block design notation.

A design such as ``~(j(4) * t(5)) > i(5)`` describes four clusters crossed with five periods, with five individuals
in each cluster-period. ``*`` crosses two designs, ``>`` nests the right design inside every row of the left one.
Both operators bind equally and associate to the left; brackets override.
"""
import logging
import re
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from glmmtool.exceptions import NelderSyntaxError, DesignSizeError

logger = logging.getLogger(__name__)

DEFAULT_ROW_CAP = 10 ** 8

_TOKEN = re.compile(r'\s*(?:(?P<name>[A-Za-z][A-Za-z0-9_]*)|(?P<number>-?\d+)|(?P<op>[()*>~]))')


@dataclass(frozen=True)
class BlockDesignTree:
    """Node of a parsed design. ``kind`` is ``'factor'``, ``'nest'`` or ``'cross'``."""
    kind: str
    name: str = None
    levels: int = None
    children: tuple = field(default_factory=tuple)

    @classmethod
    def factor(cls, name: str, levels: int):
        assert levels >= 1, f"Factor {name} needs at least one level."
        return cls(kind='factor', name=name, levels=levels)

    @classmethod
    def nest(cls, parent, child):
        return cls(kind='nest', children=(parent, child))

    @classmethod
    def cross(cls, left, right):
        return cls(kind='cross', children=(left, right))

    @property
    def is_factor(self):
        return self.kind == 'factor'

    def factors(self) -> list:
        """Leaves in textual order."""
        if self.is_factor:
            return [self]
        return self.children[0].factors() + self.children[1].factors()

    def n_rows(self) -> int:
        """Row count of the expanded design without expanding it."""
        if self.is_factor:
            return self.levels
        return self.children[0].n_rows() * self.children[1].n_rows()

    def to_text(self, leading_tilde=True) -> str:
        text = self._text()
        return f"~{text}" if leading_tilde else text

    def _text(self):
        if self.is_factor:
            return f"{self.name}({self.levels})"
        op = '>' if self.kind == 'nest' else '*'
        left, right = self.children
        right_text = right._text() if right.is_factor else f"({right._text()})"
        return f"{left._text()} {op} {right_text}"

    def __str__(self):
        return self.to_text()


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = []
        pos = 0
        stripped = text.rstrip()
        while pos < len(stripped):
            match = _TOKEN.match(stripped, pos)
            if match is None or match.end() == pos:
                raise NelderSyntaxError("Unexpected character", text,
                                        pos + len(stripped[pos:]) - len(stripped[pos:].lstrip()))
            kind = match.lastgroup
            self.tokens.append((kind, match.group(kind), match.start(kind)))
            pos = match.end()
        self.tokens.append(('end', None, len(stripped)))
        self.index = 0

    def peek(self):
        return self.tokens[self.index]

    def take(self, kind, value=None):
        token = self.peek()
        if token[0] != kind or (value is not None and token[1] != value):
            expected = value if value is not None else kind
            raise NelderSyntaxError(f"Expected '{expected}'", self.text, token[2])
        self.index += 1
        return token

    def parse(self) -> BlockDesignTree:
        if self.peek()[:2] == ('op', '~'):
            self.index += 1
        tree = self.expression()
        if self.peek()[0] != 'end':
            raise NelderSyntaxError("Unexpected trailing input", self.text, self.peek()[2])
        return tree

    def expression(self):
        tree = self.operand()
        while self.peek()[0] == 'op' and self.peek()[1] in '*>':
            op = self.take('op')[1]
            right = self.operand()
            tree = BlockDesignTree.cross(tree, right) if op == '*' else BlockDesignTree.nest(tree, right)
        return tree

    def operand(self):
        token = self.peek()
        if token[:2] == ('op', '('):
            self.index += 1
            tree = self.expression()
            self.take('op', ')')
            return tree
        if token[0] != 'name':
            raise NelderSyntaxError("Expected a factor name or '('", self.text, token[2])
        name = self.take('name')[1]
        self.take('op', '(')
        number = self.take('number')
        levels = int(number[1])
        if levels < 1:
            raise NelderSyntaxError(f"Factor {name} must have a positive level count", self.text, number[2])
        self.take('op', ')')
        return BlockDesignTree.factor(name, levels)


def parse_nelder(formula_text: str) -> BlockDesignTree:
    """Parse block design notation into a tree.

    :param formula_text: notation such as ``~cl(4) > ind(5)``, leading ``~`` optional
    :type formula_text: str
    :return: parsed design tree
    """
    tree = _Parser(formula_text).parse()
    names = [leaf.name for leaf in tree.factors()]
    duplicates = sorted({name for name in names if names.count(name) > 1})
    if duplicates:
        position = formula_text.find(duplicates[0], formula_text.find(duplicates[0]) + 1)
        raise NelderSyntaxError(f"Factor {duplicates[0]} appears more than once", formula_text, position)
    return tree


def _expand(tree: BlockDesignTree) -> dict:
    if tree.is_factor:
        return {tree.name: np.arange(1, tree.levels + 1, dtype=np.int64)}

    left = _expand(tree.children[0])
    right = _expand(tree.children[1])
    n_left = len(next(iter(left.values())))
    n_right = len(next(iter(right.values())))

    columns = {name: np.repeat(values, n_right) for name, values in left.items()}
    parent_index = np.repeat(np.arange(n_left, dtype=np.int64), n_right)
    for name, values in right.items():
        tiled = np.tile(values, n_left)
        if tree.kind == 'nest':
            # Labels continue counting across parent rows.
            tiled = tiled + parent_index * values.max()
        columns[name] = tiled
    return columns


def expand_design(tree: BlockDesignTree, row_cap: int = DEFAULT_ROW_CAP) -> pd.DataFrame:
    """Expand a design tree into a data table of 1-based integer factor columns.

    :param tree: parsed design
    :type tree: BlockDesignTree
    :param row_cap: largest number of rows allowed
    :type row_cap: int
    :return: data table, columns in order of first appearance in the notation
    """
    n_rows = tree.n_rows()
    if n_rows > row_cap:
        raise DesignSizeError(f"Design {tree} expands to {n_rows} rows, above the cap of {row_cap}.")

    logger.debug(f"Expanding {tree} into {n_rows} rows")
    return pd.DataFrame(_expand(tree))


def nelder(formula_text: str, row_cap: int = DEFAULT_ROW_CAP) -> pd.DataFrame:
    """Parse and expand in one call."""
    return expand_design(parse_nelder(formula_text), row_cap=row_cap)
