"""Gaussian-mixture Schrödinger potentials and their conditional plans.

The adjusted potential is ``v(y) = sum_k a_k N(y | m_k, eps * S_k)`` and the
conditional plan is ``pi(y | x) ∝ exp(<x, y> / eps) v(y)``.  Completing the
square component-wise gives another Gaussian mixture with means
``m_k + S_k x``, covariances ``eps * S_k`` and log-weights shifted by
``(x' S_k x + 2 m_k' x) / (2 eps)``.

Covariances are stored as Cholesky factors and weights as logs.
"""
import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from ._math import logsumexp
from ._validation import as_samples, as_vector, check_count, check_positive

LOG_FLOOR = -700.0
FORMAT_VERSION = 1
_LOG_2PI = np.log(2.0 * np.pi)


def _readonly(arr):
    arr = np.array(arr, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


def _check_chol(chol, what):
    K, d, d2 = chol.shape
    if d != d2:
        raise ValueError(f"{what} Cholesky factors must be square, got {chol.shape}")
    if np.any(np.triu(chol, k=1) != 0.0):
        raise ValueError(f"{what} Cholesky factors must be lower-triangular")
    diag = np.diagonal(chol, axis1=1, axis2=2)
    if not np.all(np.isfinite(chol)) or np.any(diag <= 0.0):
        bad = int(np.argmax(np.any(~(diag > 0.0), axis=1)))
        raise ValueError(f"{what} component {bad} has a non-positive Cholesky diagonal")


def cholesky_spd(covs):
    """Cholesky factors of a stack of SPD matrices (symmetrized first)."""
    covs = np.asarray(covs, dtype=float)
    covs = 0.5 * (covs + np.swapaxes(covs, -1, -2))
    try:
        return np.linalg.cholesky(covs)
    except np.linalg.LinAlgError as exc:
        raise ValueError("covariance is not symmetric positive definite") from exc


@dataclass(frozen=True, eq=False)
class GmmPotential:
    """Learnable adjusted Schrödinger potential.

    Parameters
    ----------
    epsilon : float
        Volatility of the reference Wiener process.
    log_weights : array, shape (K,)
        Log of the (unnormalized) component weights.
    means : array, shape (K, d)
    chol : array, shape (K, d, d)
        Lower-triangular factors with positive diagonal, ``S_k = L_k L_k'``.
    """

    epsilon: float
    log_weights: np.ndarray
    means: np.ndarray
    chol: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "epsilon", check_positive(self.epsilon, "epsilon"))
        log_weights = _readonly(np.atleast_1d(self.log_weights))
        means = _readonly(self.means)
        chol = _readonly(self.chol)
        if log_weights.ndim != 1 or log_weights.size < 1:
            raise ValueError("need at least one component")
        K = log_weights.size
        if means.ndim != 2 or means.shape[0] != K:
            raise ValueError(f"means must have shape ({K}, d), got {means.shape}")
        d = means.shape[1]
        if chol.shape != (K, d, d):
            raise ValueError(f"chol must have shape ({K}, {d}, {d}), got {chol.shape}")
        if not np.all(np.isfinite(log_weights)):
            raise ValueError("log_weights must be finite")
        if not np.all(np.isfinite(means)):
            raise ValueError("means must be finite")
        _check_chol(chol, "potential")
        object.__setattr__(self, "log_weights", log_weights)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "chol", chol)

    @classmethod
    def from_moments(cls, weights, means, covs, epsilon):
        """Build a potential from weights, means and SPD matrices ``S_k``."""
        weights = np.atleast_1d(np.asarray(weights, dtype=float))
        if np.any(weights <= 0):
            raise ValueError("weights must be positive")
        means = np.asarray(means, dtype=float)
        if means.ndim == 1:
            means = means.reshape(weights.size, -1)
        covs = np.asarray(covs, dtype=float).reshape(means.shape[0], means.shape[1], means.shape[1])
        return cls(epsilon, np.log(weights), means, cholesky_spd(covs))

    @property
    def n_components(self):
        return self.log_weights.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def weights(self):
        return np.exp(self.log_weights)

    @cached_property
    def covs(self):
        return self.chol @ np.swapaxes(self.chol, -1, -2)

    def replace(self, **changes):
        fields = dict(epsilon=self.epsilon, log_weights=self.log_weights,
                      means=self.means, chol=self.chol)
        fields.update(changes)
        return GmmPotential(**fields)

    # unconstrained coordinates: log-weights, means, lower-triangular factor
    # entries row-major with the diagonal stored as a log
    def to_flat(self):
        K, d = self.n_components, self.dim
        rows, cols = np.tril_indices(d)
        tri = self.chol[:, rows, cols].copy()
        diag = rows == cols
        tri[:, diag] = np.log(tri[:, diag])
        return np.concatenate([self.log_weights, self.means.ravel(), tri.ravel()])

    @classmethod
    def from_flat(cls, flat, n_components, dim, epsilon):
        K, d = n_components, dim
        flat = np.asarray(flat, dtype=float)
        n_tri = d * (d + 1) // 2
        if flat.shape != (K + K * d + K * n_tri,):
            raise ValueError("flat parameter vector has the wrong length")
        log_weights = flat[:K]
        means = flat[K:K + K * d].reshape(K, d)
        tri = flat[K + K * d:].reshape(K, n_tri).copy()
        rows, cols = np.tril_indices(d)
        diag = rows == cols
        tri[:, diag] = np.exp(tri[:, diag])
        chol = np.zeros((K, d, d))
        chol[:, rows, cols] = tri
        return cls(epsilon, log_weights, means, chol)

    def to_dict(self):
        rows, cols = np.tril_indices(self.dim)
        return {
            "format_version": FORMAT_VERSION,
            "d": self.dim,
            "epsilon": self.epsilon,
            "K": self.n_components,
            "log_weights": self.log_weights.tolist(),
            "means": self.means.tolist(),
            "chol_factors": self.chol[:, rows, cols].tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        version = doc.get("format_version")
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format_version {version!r}")
        K, d = int(doc["K"]), int(doc["d"])
        rows, cols = np.tril_indices(d)
        tri = np.asarray(doc["chol_factors"], dtype=float).reshape(K, -1)
        if tri.shape[1] != rows.size:
            raise ValueError("chol_factors has the wrong number of entries")
        chol = np.zeros((K, d, d))
        chol[:, rows, cols] = tri
        means = np.asarray(doc["means"], dtype=float).reshape(K, d)
        return cls(float(doc["epsilon"]), np.asarray(doc["log_weights"], dtype=float), means, chol)


def save_checkpoint(theta, path):
    """Write ``theta`` as a JSON checkpoint.

    Floats are written with their shortest round-trip representation, so
    ``load_checkpoint(save_checkpoint(theta))`` is bit-identical.
    """
    with open(path, "w") as fh:
        json.dump(theta.to_dict(), fh, indent=1)
        fh.write("\n")


def load_checkpoint(path):
    with open(path) as fh:
        return GmmPotential.from_dict(json.load(fh))


@dataclass(frozen=True, eq=False)
class ConditionalMixture:
    """A normalized Gaussian mixture ``sum_k w_k N(m_k, C_k)``.

    ``chol`` holds the factors of the covariances ``C_k``.  ``log_z`` is the
    log-normalizer of the tilted weights when the mixture comes from
    :func:`condition`.
    """

    log_weights: np.ndarray
    means: np.ndarray
    chol: np.ndarray
    log_z: float = None

    def __post_init__(self):
        log_weights = _readonly(np.atleast_1d(self.log_weights))
        means = _readonly(self.means)
        chol = _readonly(self.chol)
        K = log_weights.size
        if K < 1 or means.ndim != 2 or means.shape[0] != K:
            raise ValueError("means must have shape (K, d) matching the weights")
        d = means.shape[1]
        if chol.shape != (K, d, d):
            raise ValueError(f"chol must have shape ({K}, {d}, {d}), got {chol.shape}")
        if not np.all(np.isfinite(log_weights)) or np.any(log_weights > 0):
            raise ValueError("mixture log-weights must be finite and <= 0")
        total = np.exp(logsumexp(log_weights))
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"mixture weights must sum to 1, got {total!r}")
        _check_chol(chol, "mixture")
        object.__setattr__(self, "log_weights", log_weights)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "chol", chol)

    @classmethod
    def from_moments(cls, weights, means, covs):
        weights = np.atleast_1d(np.asarray(weights, dtype=float))
        weights = weights / weights.sum()
        means = np.asarray(means, dtype=float)
        if means.ndim == 1:
            means = means.reshape(weights.size, -1)
        d = means.shape[1]
        covs = np.asarray(covs, dtype=float).reshape(weights.size, d, d)
        return cls(np.log(weights), means, cholesky_spd(covs))

    @property
    def n_components(self):
        return self.log_weights.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def weights(self):
        return np.exp(self.log_weights)

    @cached_property
    def covs(self):
        return self.chol @ np.swapaxes(self.chol, -1, -2)

    @cached_property
    def _chol_inv(self):
        return np.linalg.inv(self.chol)

    @cached_property
    def precisions(self):
        inv = self._chol_inv
        return np.swapaxes(inv, -1, -2) @ inv

    @cached_property
    def _log_norm(self):
        half_logdet = np.log(np.diagonal(self.chol, axis1=1, axis2=2)).sum(axis=1)
        return -0.5 * self.dim * _LOG_2PI - half_logdet

    def component_log_pdf(self, Y):
        """Log-densities of every component, shape (n, K)."""
        diff = Y[None, :, :] - self.means[:, None, :]
        z = np.matmul(diff, np.swapaxes(self._chol_inv, 1, 2))
        return self._log_norm[None, :] - 0.5 * np.sum(z * z, axis=-1).T

    def moments(self):
        """Mean and covariance of the mixture as a whole."""
        w = self.weights
        w = w / w.sum()
        mean = w @ self.means
        centred = self.means - mean
        cov = np.einsum("k,kij->ij", w, self.covs) + np.einsum("k,ki,kj->ij", w, centred, centred)
        return mean, 0.5 * (cov + cov.T)


def _tilt_exponents(theta, x):
    Sx = np.einsum("kij,j->ki", theta.covs, x)
    quad = Sx @ x
    lin = theta.means @ x
    return (quad + 2.0 * lin) / (2.0 * theta.epsilon), Sx


def condition(theta, x):
    """Conditional plan ``pi_theta(. | x)`` as an explicit Gaussian mixture."""
    x = as_vector(x, theta.dim)
    tilt, Sx = _tilt_exponents(theta, x)
    too_big = np.flatnonzero(np.abs(tilt) > -LOG_FLOOR)
    if too_big.size:
        k = int(too_big[0])
        raise OverflowError(
            f"tilting exponent {tilt[k]:.4g} of component {k} exceeds {-LOG_FLOOR:g} in magnitude"
        )
    log_alpha_x = theta.log_weights + tilt
    log_z = float(logsumexp(log_alpha_x))
    log_w = np.maximum(log_alpha_x - log_z, LOG_FLOOR)
    chol = np.sqrt(theta.epsilon) * theta.chol
    return ConditionalMixture(log_w, theta.means + Sx, chol, log_z=log_z)


def _log_potential(theta, Y):
    eps, d = theta.epsilon, theta.dim
    chol = np.sqrt(eps) * theta.chol
    inv = np.linalg.inv(chol)
    diff = Y[:, None, :] - theta.means[None, :, :]
    z = np.einsum("kij,nkj->nki", inv, diff)
    half_logdet = np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
    comp = -0.5 * d * _LOG_2PI - half_logdet[None, :] - 0.5 * np.sum(z * z, axis=-1)
    return logsumexp(comp + theta.log_weights[None, :], axis=1)


def potential_value(theta, y):
    """``log v_theta(y)``; ``y`` may be a single point or an (n, d) batch."""
    y_arr = np.asarray(y, dtype=float)
    if y_arr.ndim == 2:
        return _log_potential(theta, as_samples(y_arr, theta.dim, "y"))
    return float(_log_potential(theta, as_vector(y_arr, theta.dim, "y")[None, :])[0])


def _mixture_log_density(mix, Y):
    return logsumexp(mix.component_log_pdf(Y) + mix.log_weights[None, :], axis=1)


def log_density(mix, y):
    """Log-density of a normalized mixture at a point or (n, d) batch."""
    y_arr = np.asarray(y, dtype=float)
    if y_arr.ndim == 2:
        return _mixture_log_density(mix, as_samples(y_arr, mix.dim, "y"))
    return float(_mixture_log_density(mix, as_vector(y_arr, mix.dim, "y")[None, :])[0])


def _grad_hess(mix, Y):
    log_c = mix.component_log_pdf(Y) + mix.log_weights[None, :]
    log_p = logsumexp(log_c, axis=1)
    resp = np.exp(log_c - log_p[:, None])
    # per-component score -P_k (y - m_k)
    # component-major layout: K batched (n, d) @ (d, d) products
    n, K, d = Y.shape[0], mix.n_components, mix.dim
    diff = Y[None, :, :] - mix.means[:, None, :]
    scores = -np.swapaxes(np.matmul(diff, mix.precisions), 0, 1)
    weighted = resp[:, :, None] * scores
    grad = weighted.sum(axis=1)
    outer = np.matmul(np.swapaxes(weighted, 1, 2), scores)
    prec = (resp @ mix.precisions.reshape(K, d * d)).reshape(n, d, d)
    hess = outer - prec - grad[:, :, None] * grad[:, None, :]
    hess = 0.5 * (hess + np.swapaxes(hess, -1, -2))
    return log_p, grad, hess


def grad_hess_log_density(mix, y):
    """Gradient and (exactly symmetric) Hessian of ``log mix`` at ``y``.

    Accepts a single point, returning ``(d,)`` and ``(d, d)`` arrays, or an
    (n, d) batch, returning ``(n, d)`` and ``(n, d, d)``.
    """
    y_arr = np.asarray(y, dtype=float)
    if y_arr.ndim == 2:
        _, g, H = _grad_hess(mix, as_samples(y_arr, mix.dim, "y"))
        return g, H
    _, g, H = _grad_hess(mix, as_vector(y_arr, mix.dim, "y")[None, :])
    return g[0], H[0]


def sample(mix, n, seed):
    """Ancestral sampling: a categorical component, then a Gaussian draw."""
    n = check_count(n, "n")
    rng = np.random.default_rng(seed)
    p = mix.weights
    comps = rng.choice(mix.n_components, size=n, p=p / p.sum())
    z = rng.standard_normal((n, mix.dim))
    return mix.means[comps] + np.einsum("nij,nj->ni", mix.chol[comps], z)


def sample_conditional(theta, X, seed):
    """One draw from ``pi_theta(. | x_i)`` for every row of ``X`` (vectorized)."""
    X = as_samples(X, theta.dim, "X")
    rng = np.random.default_rng(seed)
    SX = np.einsum("kij,nj->nki", theta.covs, X)
    tilt = (np.einsum("nki,ni->nk", SX, X) + 2.0 * X @ theta.means.T) / (2.0 * theta.epsilon)
    logits = theta.log_weights[None, :] + tilt
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    cdf = np.cumsum(p / p.sum(axis=1, keepdims=True), axis=1)
    u = rng.random(X.shape[0])
    comps = np.minimum((u[:, None] > cdf).sum(axis=1), theta.n_components - 1)
    z = rng.standard_normal(X.shape)
    rows = np.arange(X.shape[0])
    means = theta.means[comps] + SX[rows, comps]
    return means + np.sqrt(theta.epsilon) * np.einsum("nij,nj->ni", theta.chol[comps], z)
