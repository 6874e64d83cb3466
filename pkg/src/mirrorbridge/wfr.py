"""Wasserstein-Fisher-Rao gradient of KL between two conditional mixtures.

For the model mixture ``rho`` and a target ``rho*`` every component ``k`` of
``rho`` carries a weight rate, a mean velocity and a covariance velocity
computed from expectations of ``log(rho / rho*)`` and its first two
derivatives under that component.  The expectations are Monte-Carlo
averages over ``n_y`` draws per component, or tensor Gauss-Hermite sums when
``quadrature`` is given.
"""
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from ._math import logsumexp
from ._validation import as_vector, check_count, check_positive
from .gmm import GmmPotential, _grad_hess, condition


class StepRejected(ValueError):
    """The covariance retraction would leave the SPD cone; retry with a smaller h."""


@dataclass(frozen=True, eq=False)
class WfrTangent:
    """Per-component tangent in potential coordinates.

    ``sym_hess_avg`` holds the averaged Hessian ``H_k``; the covariance
    velocity is ``-(H_k S_k + S_k H_k)``.
    """

    d_log_weight: np.ndarray
    d_mean: np.ndarray
    sym_hess_avg: np.ndarray

    @classmethod
    def zeros(cls, n_components, dim):
        return cls(np.zeros(n_components), np.zeros((n_components, dim)),
                   np.zeros((n_components, dim, dim)))

    def norms(self):
        """Frobenius norms of the (mean, covariance-Hessian, weight) blocks."""
        return (float(np.linalg.norm(self.d_mean)),
                float(np.linalg.norm(self.sym_hess_avg)),
                float(np.linalg.norm(self.d_log_weight)))


def combine(tangents, coefs):
    """Fixed-order linear combination ``sum_i coefs[i] * tangents[i]``."""
    lw = sum(c * t.d_log_weight for c, t in zip(coefs, tangents))
    dm = sum(c * t.d_mean for c, t in zip(coefs, tangents))
    H = sum(c * t.sym_hess_avg for c, t in zip(coefs, tangents))
    H = 0.5 * (H + np.swapaxes(H, -1, -2))
    return WfrTangent(np.asarray(lw, dtype=float), np.asarray(dm, dtype=float), H)


def _check_pair(theta, target):
    if theta.dim != target.dim:
        raise ValueError(f"dimension mismatch: model d={theta.dim}, target d={target.dim}")
    if theta.epsilon != target.epsilon:
        raise ValueError(f"epsilon mismatch: model {theta.epsilon}, target {target.epsilon}")


@lru_cache(maxsize=16)
def gauss_hermite_rule(dim, n_nodes):
    """Tensor-product nodes and weights for expectations under N(0, I_dim)."""
    x, w = hermegauss(n_nodes)
    w = w / w.sum()
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    wgrids = np.meshgrid(*([w] * dim), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    weights = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def standard_draws(n_components, dim, n_y, seed=None, quadrature=None):
    """Standard-normal draws shared by all tangent evaluations of one step.

    Returns ``(xi, weights)`` with ``xi`` of shape (K, n, d).
    """
    if quadrature is not None:
        nodes, weights = gauss_hermite_rule(dim, check_count(quadrature, "quadrature"))
        return np.broadcast_to(nodes, (n_components,) + nodes.shape), weights
    n_y = check_count(n_y, "n_y")
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal((n_components, n_y, dim))
    return xi, np.full(n_y, 1.0 / n_y)


def _tangents_from_draws(theta, targets, x, xi, weights):
    # one tangent per target; the model-side density work is shared
    rho = condition(theta, x)
    K, n, d = xi.shape
    Y = rho.means[:, None, :] + np.einsum("kij,knj->kni", rho.chol, xi)
    Y = Y.reshape(K * n, d)
    lp, gp, Hp = _grad_hess(rho, Y)
    w = rho.weights
    S = theta.covs
    out = []
    for target in targets:
        lq, gq, Hq = _grad_hess(condition(target, x), Y)
        ratio = (lp - lq).reshape(K, n)
        g = (gp - gq).reshape(K, n, d)
        H = (Hp - Hq).reshape(K, n, d, d)

        r = ratio @ weights
        r_bar = (w @ r) / w.sum()
        d_log_weight = -(r - r_bar)
        d_mean_cond = -np.einsum("knd,n->kd", g, weights)
        H_avg = np.einsum("knij,n->kij", H, weights)
        H_avg = 0.5 * (H_avg + np.swapaxes(H_avg, -1, -2))

        # conditional means are m_k + S_k x, so the potential mean moves by the
        # conditional velocity minus the covariance velocity applied to x
        d_cov = -(H_avg @ S + S @ H_avg)
        d_mean = d_mean_cond - np.einsum("kij,j->ki", d_cov, x)
        out.append(WfrTangent(d_log_weight, d_mean, H_avg))
    return out


def wfr_grad(theta, target, x, n_y, seed, quadrature=None):
    """WFR gradient of ``KL(pi_theta(.|x) || pi_target(.|x))``.

    Samples are drawn from the components of the model conditional.  When
    ``target`` equals ``theta`` the result is exactly zero for any seed.
    """
    if not isinstance(theta, GmmPotential) or not isinstance(target, GmmPotential):
        raise TypeError("wfr_grad expects GmmPotential arguments")
    _check_pair(theta, target)
    x = as_vector(x, theta.dim)
    xi, weights = standard_draws(theta.n_components, theta.dim, n_y, seed, quadrature)
    return _tangents_from_draws(theta, [target], x, xi, weights)[0]


def apply_tangent(theta, tangent, h):
    """Move ``theta`` along ``tangent`` for time ``h``.

    Means take an Euler step, covariances the Bures-Wasserstein retraction
    ``(I + hS) S_k (I + hS)`` with ``S = -H_k``, and log-weights an Euler
    step renormalized to keep the total mass.  Raises :class:`StepRejected`
    when ``I + hS`` is not positive definite.
    """
    h = check_positive(h, "h")
    K, d = theta.n_components, theta.dim
    if (tangent.d_log_weight.shape != (K,) or tangent.d_mean.shape != (K, d)
            or tangent.sym_hess_avg.shape != (K, d, d)):
        raise ValueError("tangent shape does not match the potential")

    eye = np.eye(d)
    chol = theta.chol.copy()
    for k in range(K):
        S = -tangent.sym_hess_avg[k]
        if not np.any(S):
            continue
        M = eye + h * S
        lam_min = np.linalg.eigvalsh(M)[0]
        if not lam_min > 0.0:
            raise StepRejected(
                f"component {k}: I + hS has eigenvalue {lam_min:.3g}; use a smaller step than h={h:g}"
            )
        cov = M @ theta.covs[k] @ M
        try:
            chol[k] = np.linalg.cholesky(0.5 * (cov + cov.T))
        except np.linalg.LinAlgError as exc:
            raise StepRejected(f"component {k}: retracted covariance lost definiteness at h={h:g}") from exc

    means = theta.means + h * tangent.d_mean
    log_w = theta.log_weights + h * tangent.d_log_weight
    log_w = log_w + (logsumexp(theta.log_weights) - logsumexp(log_w))
    if not (np.all(np.isfinite(means)) and np.all(np.isfinite(log_w))):
        raise StepRejected(f"non-finite parameters after a step of h={h:g}")
    return GmmPotential(theta.epsilon, log_w, means, chol)
