import sys

import numpy as np
import pytest

from mirrorbridge.gmm import ConditionalMixture, GmmPotential, cholesky_spd


def random_spd(rng, d, lo=0.3, hi=2.0):
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return Q @ np.diag(rng.uniform(lo, hi, d)) @ Q.T


def random_potential(rng, K, d, epsilon=0.5, spread=1.0):
    covs = np.stack([random_spd(rng, d) for _ in range(K)])
    return GmmPotential(epsilon, rng.normal(0.0, 0.5, K), spread * rng.standard_normal((K, d)),
                        cholesky_spd(covs))


def random_mixture(rng, K, d):
    covs = np.stack([random_spd(rng, d) for _ in range(K)])
    return ConditionalMixture.from_moments(rng.uniform(0.2, 1.0, K), rng.standard_normal((K, d)), covs)


def central_diff(f, x, step=1e-4):
    """Central differences of a scalar or vector valued ``f`` at ``x``."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * step))
    return np.stack(cols, axis=-1)


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(module.RESULTS):
        terminalreporter.write_line(module.RESULTS[n])
