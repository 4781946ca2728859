import numpy as np
import pytest

from glmmtool.core.nelder import nelder


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(20240613))


@pytest.fixture
def stepped_wedge():
    """Ten clusters over eleven periods with ten individuals per cluster-period; cluster k switches to the
    intervention from period k + 1."""
    data = nelder('~(cl(10) * t(11)) > i(10)')
    data['int'] = (data['t'] > data['cl']).astype(float)
    return data


@pytest.fixture
def small_clustered():
    """Six clusters of four observations with a cluster-level covariate."""
    data = nelder('~cl(6) > i(4)')
    data['x'] = (data['cl'] % 2).astype(float)
    return data
