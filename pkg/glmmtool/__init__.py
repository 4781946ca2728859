"""Generalised linear mixed model engine: design generation, covariance formulae, model fitting and optimal
experimental design."""

__version__ = '0.3.0'

# Bumped whenever the RPN opcode table changes meaning.
RPN_VERSION = 2
