"""Hamiltonian Monte Carlo for the standardised random effects v, with dual-averaging step-size adaptation."""
import logging
import math
from dataclasses import dataclass, asdict
from typing import Callable

import numpy as np
import scipy.signal

from glmmtool.exceptions import ConfigError, SamplerError

logger = logging.getLogger(__name__)

# Dual-averaging constants.
DA_GAMMA = 0.05
DA_T0 = 10
DA_KAPPA = 0.75

# Energy error beyond which a trajectory counts as divergent.
MAX_ENERGY_ERROR = 1000.0

# Relative spread of the step size drawn for each transition.
STEP_JITTER = 0.1


@dataclass
class HmcOptions:
    warmup: int = 500
    adapt: int = 50
    samples: int = 250
    max_steps: int = 100
    target_accept: float = 0.95
    integration_time: float = 5.0

    def __post_init__(self):
        for name in ('warmup', 'adapt', 'samples', 'max_steps'):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"HMC option '{name}' must be a positive integer, got {getattr(self, name)}.")
        if not 0 < self.target_accept < 1:
            raise ConfigError(f"Target acceptance must lie in (0, 1), got {self.target_accept}.")
        if not self.integration_time > 0:
            raise ConfigError(f"Integration time must be positive, got {self.integration_time}.")
        if self.adapt > self.warmup:
            raise ConfigError(f"Adaptation iterations ({self.adapt}) exceed warmup iterations ({self.warmup}).")

    def to_dict(self) -> dict:
        return asdict(self)


def chain_ess(chain) -> np.ndarray:
    """Effective sample size of each row of a (dim x samples) chain.

    Autocorrelations are summed in adjacent pairs until a pair turns negative.
    """
    chain = np.atleast_2d(np.asarray(chain, dtype=float))
    n = chain.shape[1]
    ess = np.full(chain.shape[0], float(n))
    for row, values in enumerate(chain):
        centred = values - values.mean()
        variance = centred @ centred
        if n < 4 or variance == 0:
            continue
        rho = scipy.signal.correlate(centred, centred, mode='full', method='fft')[n - 1:] / variance
        pairs = rho[:n - n % 2].reshape(-1, 2).sum(axis=1)
        negative = np.flatnonzero(pairs < 0)
        pairs = pairs[:negative[0]] if negative.size else pairs
        tau = max(-1.0 + 2.0 * pairs.sum(), 1.0 / math.log10(n))
        ess[row] = n / tau
    return ess


@dataclass
class SamplerTrace:
    """Post-warmup draws (dim x samples) and chain diagnostics. ``n_steps`` is the largest leapfrog count."""
    samples: np.ndarray
    step_size: float
    n_steps: int
    accept_rate: float
    warmup_accept_rate: float
    n_divergent: int

    def ess(self) -> np.ndarray:
        return chain_ess(self.samples)

    def mc_standard_error(self) -> np.ndarray:
        """Monte Carlo standard error of each posterior mean."""
        return self.samples.std(axis=1, ddof=1) / np.sqrt(self.ess())


class HmcSampler:
    """Static-trajectory HMC with identity mass matrix.

    :param log_density: function of v returning ``(log density, gradient)``
    :param dim: dimension of v
    :param options: sampler options
    :param rng: random number generator
    """
    log_density: Callable
    options: HmcOptions

    def __init__(self, log_density: Callable, dim: int, options: HmcOptions, rng: np.random.Generator):
        self.log_density = log_density
        self.dim = dim
        self.options = options
        self.rng = rng
        self.step_size = None

    def leapfrog(self, v, p, grad, step_size: float, n_steps: int):
        v, p = v.copy(), p.copy()
        p += 0.5 * step_size * grad
        for step in range(n_steps):
            v += step_size * p
            logp, grad = self.log_density(v)
            if not np.isfinite(logp):
                return v, p, logp, grad
            p += (step_size if step < n_steps - 1 else 0.5 * step_size) * grad
        return v, p, logp, grad

    def find_reasonable_step_size(self, v, logp, grad) -> float:
        """Double or halve a unit step until the one-step acceptance probability crosses 1/2."""
        step_size = 1.0
        p = self.rng.standard_normal(self.dim)
        energy = logp - 0.5 * p @ p

        def log_ratio(eps):
            _, p_new, logp_new, _ = self.leapfrog(v, p, grad, eps, 1)
            value = logp_new - 0.5 * p_new @ p_new - energy
            return value if np.isfinite(value) else -np.inf

        direction = 1 if log_ratio(step_size) > math.log(0.5) else -1
        for _ in range(100):
            if direction * log_ratio(step_size) <= direction * math.log(0.5):
                break
            step_size *= 2.0 ** direction
        return step_size

    def n_steps(self, step_size: float) -> int:
        return int(min(math.ceil(self.options.integration_time / step_size), self.options.max_steps))

    def transition(self, v, logp, grad, step_size: float):
        """One HMC transition; returns the new state, acceptance probability and a divergence flag.

        The step size is jittered and the number of leapfrog steps drawn uniformly up to :meth:`n_steps`, so the
        trajectory length never locks onto a period of the target.
        """
        p = self.rng.standard_normal(self.dim)
        energy = logp - 0.5 * p @ p
        jittered = step_size * self.rng.uniform(1 - STEP_JITTER, 1 + STEP_JITTER)
        n_steps = int(self.rng.integers(1, self.n_steps(step_size), endpoint=True))
        v_new, p_new, logp_new, grad_new = self.leapfrog(v, p, grad, jittered, n_steps)
        error = logp_new - 0.5 * p_new @ p_new - energy
        divergent = not np.isfinite(error) or -error > MAX_ENERGY_ERROR
        accept = 0.0 if divergent else min(1.0, math.exp(min(error, 0.0)))
        if not divergent and self.rng.uniform() < accept:
            return v_new, logp_new, grad_new, accept, divergent
        return v, logp, grad, accept, divergent

    def sample(self, v0=None) -> SamplerTrace:
        options = self.options
        v = np.zeros(self.dim) if v0 is None else np.asarray(v0, dtype=float).copy()
        logp, grad = self.log_density(v)
        if not np.isfinite(logp):
            raise SamplerError(f"Log density is not finite at the starting point (value {logp}).")

        step_size = self.step_size or self.find_reasonable_step_size(v, logp, grad)
        mu = math.log(10 * step_size)
        h_bar, log_bar = 0.0, 0.0
        warmup_accept, warmup_divergent = 0.0, 0
        for iteration in range(1, options.warmup + 1):
            v, logp, grad, accept, divergent = self.transition(v, logp, grad, step_size)
            warmup_accept += accept
            warmup_divergent += divergent
            if iteration <= options.adapt:
                eta = 1 / (iteration + DA_T0)
                h_bar = (1 - eta) * h_bar + eta * (options.target_accept - accept)
                log_step = mu - math.sqrt(iteration) / DA_GAMMA * h_bar
                weight = iteration ** -DA_KAPPA
                log_bar = weight * log_step + (1 - weight) * log_bar
                step_size = math.exp(log_step)
                if iteration == options.adapt:
                    step_size = math.exp(log_bar)
                    logger.debug(f"Adapted HMC step size {step_size:.4g} ({self.n_steps(step_size)} leapfrog steps)")
        if warmup_divergent == options.warmup:
            raise SamplerError(f"All {options.warmup} warmup transitions diverged; final step size {step_size:.3g}.")
        self.step_size = step_size

        draws = np.empty((self.dim, options.samples))
        total_accept, divergences = 0.0, 0
        for k in range(options.samples):
            v, logp, grad, accept, divergent = self.transition(v, logp, grad, step_size)
            draws[:, k] = v
            total_accept += accept
            divergences += divergent
        if divergences:
            logger.warning(f"{divergences} divergent transition(s) among {options.samples} HMC samples")
        return SamplerTrace(samples=draws, step_size=step_size, n_steps=self.n_steps(step_size),
                            accept_rate=total_accept / options.samples,
                            warmup_accept_rate=warmup_accept / options.warmup, n_divergent=divergences)
