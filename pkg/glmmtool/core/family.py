"""Outcome families and link functions.

Families are parameterised by their mean mu and a scale parameter phi (``var_par``):

- gaussian: phi is the standard deviation, Var = phi^2
- binomial: Bernoulli trials, Var = mu (1 - mu); phi unused
- poisson: Var = mu; phi unused
- gamma: phi is the shape, Var = mu^2 / phi
- beta: phi is the precision, Var = mu (1 - mu) / (1 + phi)
"""
import math
from abc import ABC, abstractmethod

import numpy as np
import scipy.special
import scipy.stats

from glmmtool.exceptions import ParameterError, SupportError


class Link(ABC):
    name: str

    @abstractmethod
    def link(self, mu):
        """Linear predictor from mean."""

    @abstractmethod
    def inverse(self, eta):
        """Mean from linear predictor."""

    @abstractmethod
    def mu_eta(self, eta):
        """Derivative of the inverse link with respect to eta."""

    def __repr__(self):
        return f"{type(self).__name__}()"


class IdentityLink(Link):
    name = 'identity'

    def link(self, mu):
        return np.asarray(mu, dtype=float)

    def inverse(self, eta):
        return np.asarray(eta, dtype=float)

    def mu_eta(self, eta):
        return np.ones_like(np.asarray(eta, dtype=float))


class LogLink(Link):
    name = 'log'

    def link(self, mu):
        return np.log(mu)

    def inverse(self, eta):
        return np.exp(eta)

    def mu_eta(self, eta):
        return np.exp(eta)


class LogitLink(Link):
    name = 'logit'

    def link(self, mu):
        return scipy.special.logit(mu)

    def inverse(self, eta):
        return scipy.special.expit(eta)

    def mu_eta(self, eta):
        mu = scipy.special.expit(eta)
        return mu * (1 - mu)


class ProbitLink(Link):
    name = 'probit'

    def link(self, mu):
        return scipy.special.ndtri(mu)

    def inverse(self, eta):
        return scipy.special.ndtr(eta)

    def mu_eta(self, eta):
        return scipy.stats.norm.pdf(eta)


class InverseLink(Link):
    name = 'inverse'

    def link(self, mu):
        return 1 / np.asarray(mu, dtype=float)

    def inverse(self, eta):
        return 1 / np.asarray(eta, dtype=float)

    def mu_eta(self, eta):
        return -1 / np.asarray(eta, dtype=float) ** 2


LINKS = {link.name: link for link in (IdentityLink(), LogLink(), LogitLink(), ProbitLink(), InverseLink())}


class Family(ABC):
    """Conditional distribution of y given the random effects."""
    name: str
    links: tuple
    default_link: str
    has_scale = False

    def __init__(self, link: str = None):
        link = link or self.default_link
        if link not in self.links:
            raise ParameterError(f"Link '{link}' is not available for the {self.name} family; "
                                 f"choose one of {', '.join(self.links)}.")
        self.link = LINKS[link]

    def __repr__(self):
        return f"{self.name}({self.link.name})"

    def __eq__(self, other):
        return isinstance(other, Family) and (self.name, self.link.name) == (other.name, other.link.name)

    def __hash__(self):
        return hash((self.name, self.link.name))

    def check_support(self, mu):
        """Raise SupportError when a mean lies outside the family's support."""
        mu = np.asarray(mu, dtype=float)
        bad = ~self._valid_mean(mu)
        if np.any(bad):
            first = int(np.flatnonzero(bad)[0])
            raise SupportError(f"{np.count_nonzero(bad)} mean(s) outside the support of the {self!r} family, "
                               f"first at observation {first}: mu={mu[first]}.")

    def _valid_mean(self, mu):
        return np.isfinite(mu)

    def mean(self, eta):
        return self.link.inverse(eta)

    def initial_mean(self, y):
        """Starting means for iteratively reweighted least squares."""
        return np.asarray(y, dtype=float)

    @abstractmethod
    def variance(self, mu, phi):
        """Conditional variance Var(y | u)."""

    def weights(self, eta, phi):
        """GLM iterated weights, W = (dmu/deta)^2 / Var(y | u)."""
        mu = self.mean(eta)
        self.check_support(mu)
        return self.link.mu_eta(eta) ** 2 / self.variance(mu, phi)

    @abstractmethod
    def loglik(self, y, mu, phi):
        """Elementwise log f(y | mu, phi)."""

    @abstractmethod
    def score_mu(self, y, mu, phi):
        """Elementwise derivative of log f with respect to mu."""

    @abstractmethod
    def sample(self, rng: np.random.Generator, mu, phi):
        """Draw outcomes."""

    def loglik_eta(self, y, eta, phi):
        return self.loglik(y, self.mean(eta), phi)

    def score_eta(self, y, eta, phi):
        """Derivative of log f with respect to eta."""
        return self.score_mu(y, self.mean(eta), phi) * self.link.mu_eta(eta)

    def attenuate(self, eta, marginal_variance):
        """Linear predictor adjusted so that h^-1 approximates the marginal mean.

        :param marginal_variance: z_i D z_i^T per observation
        """
        name = self.link.name
        if name == 'log':
            return eta + marginal_variance / 2
        if name == 'logit':
            return eta / np.sqrt(1 + ATTENUATION_LOGIT * marginal_variance)
        if name == 'probit':
            return eta / np.sqrt(1 + marginal_variance)
        return eta


# Squared scaling between the logistic and the normal distribution function. The attenuated mean is an
# approximation: at eta = 0.8 with variance 0.25 it sits 0.003 above the exact marginal mean.
ATTENUATION_LOGIT = (16 * math.sqrt(3) / (15 * math.pi)) ** 2


class Gaussian(Family):
    name = 'gaussian'
    links = ('identity', 'log')
    default_link = 'identity'
    has_scale = True

    def variance(self, mu, phi):
        return np.full_like(np.asarray(mu, dtype=float), phi ** 2)

    def loglik(self, y, mu, phi):
        return scipy.stats.norm.logpdf(y, loc=mu, scale=phi)

    def score_mu(self, y, mu, phi):
        return (y - mu) / phi ** 2

    def sample(self, rng, mu, phi):
        return rng.normal(mu, phi)


class Binomial(Family):
    name = 'binomial'
    links = ('logit', 'log', 'probit', 'identity')
    default_link = 'logit'

    def _valid_mean(self, mu):
        return (mu > 0) & (mu < 1)

    def initial_mean(self, y):
        return (np.asarray(y, dtype=float) + 0.5) / 2

    def variance(self, mu, phi):
        return mu * (1 - mu)

    def loglik(self, y, mu, phi):
        return scipy.stats.bernoulli.logpmf(y, mu)

    def loglik_eta(self, y, eta, phi):
        if self.link.name == 'logit':
            return y * eta - np.logaddexp(0, eta)
        return super().loglik_eta(y, eta, phi)

    def score_mu(self, y, mu, phi):
        return (y - mu) / (mu * (1 - mu))

    def score_eta(self, y, eta, phi):
        if self.link.name == 'logit':
            return y - scipy.special.expit(eta)
        return super().score_eta(y, eta, phi)

    def sample(self, rng, mu, phi):
        return rng.binomial(1, mu).astype(float)


class Poisson(Family):
    name = 'poisson'
    links = ('log', 'identity')
    default_link = 'log'

    def _valid_mean(self, mu):
        return mu > 0

    def initial_mean(self, y):
        return np.asarray(y, dtype=float) + 0.1

    def variance(self, mu, phi):
        return np.asarray(mu, dtype=float)

    def loglik(self, y, mu, phi):
        return scipy.stats.poisson.logpmf(y, mu)

    def loglik_eta(self, y, eta, phi):
        if self.link.name == 'log':
            return y * eta - np.exp(eta) - scipy.special.gammaln(y + 1)
        return super().loglik_eta(y, eta, phi)

    def score_mu(self, y, mu, phi):
        return y / mu - 1

    def sample(self, rng, mu, phi):
        return rng.poisson(mu).astype(float)


class Gamma(Family):
    name = 'gamma'
    links = ('log', 'inverse', 'identity')
    default_link = 'log'
    has_scale = True

    def _valid_mean(self, mu):
        return mu > 0

    def initial_mean(self, y):
        return np.maximum(np.asarray(y, dtype=float), 1e-3)

    def variance(self, mu, phi):
        return mu ** 2 / phi

    def loglik(self, y, mu, phi):
        return scipy.stats.gamma.logpdf(y, a=phi, scale=mu / phi)

    def score_mu(self, y, mu, phi):
        return phi * (y - mu) / mu ** 2

    def sample(self, rng, mu, phi):
        return rng.gamma(shape=phi, scale=mu / phi)


class Beta(Family):
    name = 'beta'
    links = ('logit',)
    default_link = 'logit'
    has_scale = True

    def _valid_mean(self, mu):
        return (mu > 0) & (mu < 1)

    def initial_mean(self, y):
        return (np.asarray(y, dtype=float) + 0.5) / 2

    def variance(self, mu, phi):
        return mu * (1 - mu) / (1 + phi)

    def loglik(self, y, mu, phi):
        return scipy.stats.beta.logpdf(y, mu * phi, (1 - mu) * phi)

    def score_mu(self, y, mu, phi):
        return phi * (scipy.special.digamma((1 - mu) * phi) - scipy.special.digamma(mu * phi)
                      + np.log(y) - np.log1p(-y))

    def sample(self, rng, mu, phi):
        first = rng.gamma(shape=mu * phi)
        second = rng.gamma(shape=(1 - mu) * phi)
        return first / (first + second)


FAMILIES = {family.name: family for family in (Gaussian, Binomial, Poisson, Gamma, Beta)}


def get_family(name: str, link: str = None) -> Family:
    """Family instance by name, e.g. ``get_family('binomial', 'logit')``."""
    if name not in FAMILIES:
        raise ParameterError(f"Unknown family '{name}'; choose one of {', '.join(FAMILIES)}.")
    return FAMILIES[name](link)
