"""Target estimators: reverse-KL fitting, parameter EMA and discrete Sinkhorn."""
import csv
import logging
from dataclasses import dataclass

import numpy as np

from ._math import logsumexp, softmax
from ._validation import as_samples, check_count, check_positive
from .gmm import GmmPotential

logger = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


def _tilts(theta, X):
    # (n, K) tilt exponents (x' S_k x + 2 m_k' x) / (2 eps)
    SX = np.einsum("kij,nj->nki", theta.covs, X)
    quad = np.einsum("nki,ni->nk", SX, X)
    return (quad + 2.0 * X @ theta.means.T) / (2.0 * theta.epsilon)


def reverse_kl_loss(theta, x_batch, y_batch):
    """Sample reverse-KL objective and its gradient.

    ``L = mean_i log z(x_i) - mean_j log v(y_j)``, which equals
    ``KL(pi* || pi_theta)`` up to a theta-independent constant.  The gradient
    is taken with respect to :meth:`GmmPotential.to_flat` coordinates.

    Returns
    -------
    loss : float
    grad : array, shape (n_params,)
    """
    K, d, eps = theta.n_components, theta.dim, theta.epsilon
    X = as_samples(x_batch, d, "x_batch")
    Y = as_samples(y_batch, d, "y_batch")
    S = theta.covs
    P = np.linalg.inv(S)
    P = 0.5 * (P + np.swapaxes(P, -1, -2))

    # log-normalizer term
    la = theta.log_weights[None, :] + _tilts(theta, X)
    log_z = logsumexp(la, axis=1)
    w = softmax(la, axis=1)
    g_lw = w.mean(axis=0)
    g_m = (w.T @ X) / (eps * X.shape[0])
    G = np.einsum("nk,ni,nj->kij", w, X, X) / (2.0 * eps * X.shape[0])

    # log-potential term
    diff = Y[:, None, :] - theta.means[None, :, :]
    Pd = np.einsum("kij,nkj->nki", P, diff)
    maha = np.einsum("nki,nki->nk", diff, Pd) / eps
    logdet = 2.0 * np.log(np.diagonal(theta.chol, axis1=1, axis2=2)).sum(axis=1)
    comp = -0.5 * (d * np.log(2.0 * np.pi * eps) + logdet)[None, :] - 0.5 * maha
    lc = theta.log_weights[None, :] + comp
    log_v = logsumexp(lc, axis=1)
    r = softmax(lc, axis=1)
    n_y = Y.shape[0]
    g_lw -= r.mean(axis=0)
    g_m -= np.einsum("nk,nki->ki", r, Pd) / (eps * n_y)
    outer = np.einsum("nk,nki,nkj->kij", r, Pd, Pd) / (2.0 * eps * n_y)
    G -= outer - 0.5 * P * r.mean(axis=0)[:, None, None]

    per_x, per_y = log_z, log_v
    loss = float(per_x.mean() - per_y.mean())
    if not np.isfinite(loss):
        bad_x = np.flatnonzero(~np.isfinite(per_x))
        where = f"x_batch row {bad_x[0]}" if bad_x.size else \
            f"y_batch row {np.flatnonzero(~np.isfinite(per_y))[0]}"
        raise FloatingPointError(f"non-finite reverse-KL loss at {where}")

    G = 0.5 * (G + np.swapaxes(G, -1, -2))
    gL = 2.0 * G @ theta.chol
    rows, cols = np.tril_indices(d)
    g_tri = gL[:, rows, cols]
    diag = rows == cols
    g_tri[:, diag] *= theta.chol[:, rows[diag], cols[diag]]
    return loss, np.concatenate([g_lw, g_m.ravel(), g_tri.ravel()])


@dataclass(frozen=True)
class FitConfig:
    """Settings for :func:`fit_reverse_kl`.

    ``optimizer`` is ``"sgd"`` (heavy-ball with ``momentum``) or ``"adam"``
    (``momentum`` is then the first-moment decay; the second-moment decay is
    0.999).
    """

    n_components: int = 8
    epsilon: float = 0.1
    n_iters: int = 1000
    lr: float = 0.01
    momentum: float = 0.0
    batch_size: int = 128
    seed: int = 0
    init_cov: float = 1.0
    optimizer: str = "sgd"

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        check_count(self.n_components, "n_components")
        check_positive(self.epsilon, "epsilon")
        check_count(self.n_iters, "n_iters", minimum=0)
        check_positive(self.lr, "lr")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        check_count(self.batch_size, "batch_size")
        check_positive(self.init_cov, "init_cov")


def init_potential(n_components, y_samples, epsilon, seed, init_cov=1.0):
    """Uniform weights, means at random data points, isotropic covariances."""
    Y = as_samples(y_samples)
    rng = np.random.default_rng(seed)
    replace = Y.shape[0] < n_components
    idx = rng.choice(Y.shape[0], size=n_components, replace=replace)
    d = Y.shape[1]
    chol = np.broadcast_to(np.sqrt(init_cov) * np.eye(d), (n_components, d, d))
    return GmmPotential(epsilon, np.full(n_components, -np.log(n_components)), Y[idx], chol)


def _as_stream(source, batch_size, seed):
    if callable(source):
        return source
    data = as_samples(source)

    def draw(it):
        rng = np.random.default_rng([seed, it])
        return data[rng.integers(0, data.shape[0], size=batch_size)]

    return draw


def fit_reverse_kl(config, x_stream, y_stream, init=None):
    """Stochastic-gradient minimization of :func:`reverse_kl_loss`.

    ``x_stream`` and ``y_stream`` are either arrays to resample from or
    callables ``it -> batch``.  Passing ``init`` continues from an existing
    potential instead of a fresh initialization.
    """
    xs = _as_stream(x_stream, config.batch_size, [config.seed, 0])
    ys = _as_stream(y_stream, config.batch_size, [config.seed, 1])
    theta = init
    if theta is None:
        theta = init_potential(config.n_components, ys(0), config.epsilon,
                               config.seed, config.init_cov)
    K, d, eps = theta.n_components, theta.dim, theta.epsilon
    params = theta.to_flat()
    velocity = np.zeros_like(params)
    second = np.zeros_like(params)
    for it in range(config.n_iters):
        loss, grad = reverse_kl_loss(theta, xs(it), ys(it))
        if abs(loss) > 1e8:
            raise DivergenceError(f"reverse-KL loss {loss:.3g} at iteration {it}; "
                                  f"gradient norm {np.linalg.norm(grad):.3g}")
        if config.optimizer == "adam":
            b1, b2 = config.momentum, 0.999
            velocity = b1 * velocity + (1.0 - b1) * grad
            second = b2 * second + (1.0 - b2) * grad * grad
            m_hat = velocity / (1.0 - b1 ** (it + 1))
            v_hat = second / (1.0 - b2 ** (it + 1))
            params = params - config.lr * m_hat / (np.sqrt(v_hat) + 1e-8)
        else:
            velocity = config.momentum * velocity - config.lr * grad
            params = params + velocity
        try:
            theta = GmmPotential.from_flat(params, K, d, eps)
        except ValueError as exc:
            raise DivergenceError(f"parameters left the valid domain at iteration {it}: {exc}") from exc
    return theta


def ema_update(ema, phi, decay):
    """``ema <- decay * ema + (1 - decay) * phi`` on log-weights, means and Cholesky entries."""
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"decay must lie in [0, 1), got {decay}")
    if (ema.n_components, ema.dim) != (phi.n_components, phi.dim):
        raise ValueError("EMA and target potentials differ in shape")
    if decay == 0.0:
        return phi
    step = 1.0 - decay
    return GmmPotential(
        ema.epsilon,
        ema.log_weights + step * (phi.log_weights - ema.log_weights),
        ema.means + step * (phi.means - ema.means),
        ema.chol + step * (phi.chol - ema.chol),
    )


@dataclass(frozen=True, eq=False)
class DiscretePlan:
    """Coupling on finite supports with its log-scalings.

    ``weights[i, j] = exp(f[i] + g[j] - cost[i, j] / eps)``.
    """

    weights: np.ndarray
    duals: tuple
    support_x: np.ndarray = None
    support_y: np.ndarray = None
    converged: bool = True
    n_iters: int = 0
    marginal_error: float = 0.0

    def to_csv(self, path):
        rows, cols = np.nonzero(self.weights)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["x_index", "y_index", "weight"])
            for i, j in zip(rows, cols):
                writer.writerow([int(i), int(j), repr(float(self.weights[i, j]))])


def sinkhorn_col_update(f, log_b, log_kernel):
    """Refit the column scaling so the plan's second marginal equals ``b``."""
    return log_b - logsumexp(f[:, None] + log_kernel, axis=0)


def sinkhorn_row_update(g, log_a, log_kernel):
    """Refit the row scaling so the plan's first marginal equals ``a``."""
    return log_a - logsumexp(g[None, :] + log_kernel, axis=1)


def plan_from_duals(f, g, log_kernel):
    return np.exp(f[:, None] + g[None, :] + log_kernel)


def discrete_sinkhorn(a, b, cost, epsilon, max_iters=10000, tol=1e-10,
                      support_x=None, support_y=None):
    """Log-domain Sinkhorn iterations for entropic OT between histograms.

    Each sweep refits the column scaling and then the row scaling, so the
    first marginal is exact on return and convergence is measured by the
    total-variation error of the second.  A run that exhausts ``max_iters``
    returns its last iterate flagged ``converged=False``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    cost = np.asarray(cost, dtype=float)
    epsilon = check_positive(epsilon, "epsilon")
    if cost.shape != (a.size, b.size):
        raise ValueError(f"cost must have shape ({a.size}, {b.size}), got {cost.shape}")
    for name, w in (("a", a), ("b", b)):
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-10:
            raise ValueError(f"{name} must be strictly positive and sum to 1")
    log_a, log_b = np.log(a), np.log(b)
    log_kernel = -cost / epsilon
    f = np.zeros(a.size)
    g = np.zeros(b.size)
    err = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        g = sinkhorn_col_update(f, log_b, log_kernel)
        f = sinkhorn_row_update(g, log_a, log_kernel)
        col = np.exp(logsumexp(f[:, None] + g[None, :] + log_kernel, axis=0))
        err = 0.5 * np.abs(col - b).sum()
        if err < tol:
            break
    converged = bool(err < tol)
    if not converged:
        logger.warning("Sinkhorn stopped after %d iterations with marginal error %.3g", it, err)
    return DiscretePlan(plan_from_duals(f, g, log_kernel), (f, g), support_x, support_y,
                        converged, it, float(err))
