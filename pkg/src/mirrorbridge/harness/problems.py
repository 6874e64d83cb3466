"""Synthetic source/target distributions and named presets."""
from dataclasses import dataclass, field

import numpy as np

from ..gmm import ConditionalMixture, sample
from ..metrics import eot_conditional, eot_potential

DESCRIPTOR_TYPES = ("gaussian", "gmm", "ring")


@dataclass(frozen=True)
class ProblemSpec:
    """Source ``mu`` and target ``nu`` descriptors plus volatility and seed.

    Descriptors are dicts with a ``type`` key:

    * ``{"type": "gaussian", "mean": [...], "cov": [[...]]}``
    * ``{"type": "gmm", "weights": [...], "means": [[...]], "covs": [[[...]]]}``
    * ``{"type": "ring", "n_modes": 8, "radius": 4.0, "std": 0.3}`` (2-d only;
      modes sit at angles ``(k + 1/2) 2 pi / n_modes``)
    """

    name: str
    d: int
    mu: dict = field(hash=False)
    nu: dict = field(hash=False)
    epsilon: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"d must be a positive integer, got {self.d}")
        for side in ("mu", "nu"):
            to_mixture(getattr(self, side), self.d)


def to_mixture(desc, d):
    """Instantiate a descriptor as a :class:`ConditionalMixture` density."""
    kind = desc.get("type")
    if kind not in DESCRIPTOR_TYPES:
        raise ValueError(f"unknown distribution type {kind!r}; expected one of {DESCRIPTOR_TYPES}")
    if kind == "gaussian":
        mean = np.asarray(desc.get("mean", np.zeros(d)), dtype=float).reshape(d)
        cov = np.asarray(desc.get("cov", np.eye(d)), dtype=float).reshape(d, d)
        return ConditionalMixture.from_moments([1.0], mean[None, :], cov[None, :, :])
    if kind == "gmm":
        weights = np.asarray(desc["weights"], dtype=float)
        means = np.asarray(desc["means"], dtype=float).reshape(weights.size, d)
        covs = np.asarray(desc["covs"], dtype=float).reshape(weights.size, d, d)
        return ConditionalMixture.from_moments(weights, means, covs)
    if d != 2:
        raise ValueError("ring distributions are 2-dimensional")
    n_modes = int(desc.get("n_modes", 8))
    radius = float(desc.get("radius", 4.0))
    std = float(desc.get("std", 0.3))
    if n_modes < 1 or radius < 0 or std <= 0:
        raise ValueError("ring needs n_modes >= 1, radius >= 0 and std > 0")
    angles = (np.arange(n_modes) + 0.5) * 2.0 * np.pi / n_modes
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    covs = np.broadcast_to(std ** 2 * np.eye(2), (n_modes, 2, 2))
    return ConditionalMixture.from_moments(np.full(n_modes, 1.0 / n_modes), means, covs)


def generate_problem(spec, n, stream=0):
    """Draw ``n`` source and ``n`` target samples; ``stream`` selects an independent draw."""
    if n < 1:
        raise ValueError("n must be at least 1")
    ss_x, ss_y = np.random.SeedSequence([spec.seed, stream]).spawn(2)
    return (sample(to_mixture(spec.mu, spec.d), n, ss_x),
            sample(to_mixture(spec.nu, spec.d), n, ss_y))


def gauss_to_ring8(epsilon=0.1, seed=0):
    return ProblemSpec("gauss_to_ring8", 2, {"type": "gaussian"},
                       {"type": "ring", "n_modes": 8, "radius": 4.0, "std": 0.3}, epsilon, seed)


def gauss_to_gauss(d=2, epsilon=1.0, seed=0):
    """A Gaussian pair with a closed-form entropic plan.

    The source is standard normal; the target has a fixed non-trivial mean
    and an anisotropic covariance.
    """
    rng = np.random.default_rng(12345 + d)
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    cov = Q @ np.diag(np.linspace(0.5, 2.0, d)) @ Q.T
    mean = np.linspace(1.0, -1.0, d)
    return ProblemSpec(f"gauss_to_gauss_d{d}", d, {"type": "gaussian"},
                       {"type": "gaussian", "mean": mean.tolist(), "cov": cov.tolist()}, epsilon, seed)


PRESETS = {"gauss_to_ring8": gauss_to_ring8, "gauss_to_gauss": gauss_to_gauss}


def gaussian_reference(spec):
    """Closed-form potential and conditional for a Gaussian-to-Gaussian spec."""
    if spec.mu["type"] != "gaussian" or spec.nu["type"] != "gaussian":
        raise ValueError("a closed-form reference needs Gaussian source and target")
    mu, nu = to_mixture(spec.mu, spec.d), to_mixture(spec.nu, spec.d)
    args = (mu.means[0], mu.covs[0], nu.means[0], nu.covs[0], spec.epsilon)
    return eot_potential(*args), eot_conditional(*args)
