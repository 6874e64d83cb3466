"""The dynamic bridge driven by a Gaussian-mixture potential.

The bridge is the Doob h-transform of the Wiener process with variance
``eps`` toward the terminal potential ``f(y) = v(y) exp(|y|^2 / (2 eps))``.
Its space-time harmonic function

    h(t, x) = E[f(x + sqrt(eps (1 - t)) Z)]

closes on the mixture: each component contributes a Gaussian integral with
precision ``S_k^{-1} + t / (1 - t) I`` (in units of ``1 / eps``), so the
drift ``eps * grad log h`` is available in closed form.
"""
import csv
from dataclasses import dataclass

import numpy as np

from ._math import logsumexp, softmax
from ._validation import as_samples, as_vector, check_count
from .gmm import condition, sample


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        states = np.asarray(self.states, dtype=float)
        _check_times(times)
        if states.ndim != 2 or states.shape[0] != times.size:
            raise ValueError("states must have one row per time")
        if not np.all(np.isfinite(states)):
            raise ValueError("trajectory states must be finite")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)


def _check_times(times):
    if times.ndim != 1 or times.size < 2:
        raise ValueError("times must be a 1-d grid with at least two points")
    if times[0] != 0.0 or times[-1] != 1.0:
        raise ValueError("times must start at 0 and end at 1")
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")


def _components(theta, t, X):
    # per-component log h_k(t, x) up to an x- and k-independent constant,
    # together with eps * grad log h_k
    if not 0.0 <= t < 1.0:
        raise ValueError(f"the drift is defined for 0 <= t < 1, got t={t}")
    eps, d = theta.epsilon, theta.dim
    s = 1.0 - t
    S_inv = np.linalg.inv(theta.covs)
    S_inv = 0.5 * (S_inv + np.swapaxes(S_inv, -1, -2))
    P = S_inv + (t / s) * np.eye(d)
    P_inv = np.linalg.inv(P)
    c = np.einsum("kij,kj->ki", S_inv, theta.means)
    b = X[:, None, :] / s + c[None, :, :]
    u = np.einsum("kij,nkj->nki", P_inv, b)
    _, logdet_P = np.linalg.slogdet(P)
    logdet_S = 2.0 * np.log(np.diagonal(theta.chol, axis1=1, axis2=2)).sum(axis=1)
    quad = np.einsum("nki,nki->nk", b, u) - np.sum(X * X, axis=1)[:, None] / s
    quad -= np.einsum("ki,ki->k", theta.means, c)[None, :]
    log_h = (theta.log_weights - 0.5 * logdet_S - 0.5 * logdet_P)[None, :] + quad / (2.0 * eps)
    log_h -= 0.5 * d * np.log(2.0 * np.pi * eps * s)
    drift_k = (u - X[:, None, :]) / s
    return log_h, drift_k


def log_h(theta, t, X):
    """``log h(t, x)`` for an (n, d) batch (exact, including constants)."""
    X = as_samples(X, theta.dim)
    lh, _ = _components(theta, t, X)
    return logsumexp(lh, axis=1)


def _drift_batch(theta, t, X):
    lh, drift_k = _components(theta, t, X)
    w = softmax(lh, axis=1)
    return np.einsum("nk,nki->ni", w, drift_k)


def sb_drift(theta, t, x):
    """Drift ``eps * grad_x log h(t, x)`` at a point or an (n, d) batch."""
    x_arr = np.asarray(x, dtype=float)
    if x_arr.ndim == 2:
        return _drift_batch(theta, t, as_samples(x_arr, theta.dim))
    return _drift_batch(theta, t, as_vector(x_arr, theta.dim)[None, :])[0]


def sample_sde_batch(theta, x0, n_steps, seed):
    """Euler-Maruyama paths on a uniform grid.

    ``x0`` is a single start point or an (n, d) array of them.  Returns the
    time grid and states of shape (n_steps + 1, n, d).
    """
    n_steps = check_count(n_steps, "n_steps", minimum=2)
    x0 = np.asarray(x0, dtype=float)
    X = as_samples(x0[None, :] if x0.ndim == 1 else x0, theta.dim, "x0")
    rng = np.random.default_rng(seed)
    times = np.linspace(0.0, 1.0, n_steps + 1)
    dt = 1.0 / n_steps
    noise_scale = np.sqrt(theta.epsilon * dt)
    states = np.empty((n_steps + 1,) + X.shape)
    states[0] = X
    for i in range(n_steps):
        X = X + _drift_batch(theta, times[i], X) * dt + noise_scale * rng.standard_normal(X.shape)
        if not np.all(np.isfinite(X)):
            raise FloatingPointError(f"non-finite state at step {i + 1} (t={times[i + 1]:.4g})")
        states[i + 1] = X
    return times, states


def sample_sde(theta, x0, n_steps, seed):
    x0 = as_vector(x0, theta.dim, "x0")
    times, states = sample_sde_batch(theta, x0, n_steps, seed)
    return Trajectory(times, states[:, 0, :])


def sample_bridge_batch(theta, x0, times, n, seed):
    """Brownian bridges pinned at ``x0`` and at endpoints drawn from ``condition(theta, x0)``.

    Returns states of shape (len(times), n, d).
    """
    x0 = as_vector(x0, theta.dim, "x0")
    times = np.asarray(times, dtype=float)
    _check_times(times)
    n = check_count(n, "n")
    ss = np.random.SeedSequence(seed)
    end_seed, path_seed = ss.spawn(2)
    y = sample(condition(theta, x0), n, end_seed)
    rng = np.random.default_rng(path_seed)
    eps = theta.epsilon
    states = np.empty((times.size, n, theta.dim))
    states[0] = x0
    X = np.broadcast_to(x0, (n, theta.dim)).copy()
    for i in range(1, times.size - 1):
        s, t = times[i - 1], times[i]
        frac = (t - s) / (1.0 - s)
        var = eps * (t - s) * (1.0 - t) / (1.0 - s)
        X = X + frac * (y - X) + np.sqrt(var) * rng.standard_normal(X.shape)
        states[i] = X
    states[-1] = y
    return states


def sample_bridge(theta, x0, times, seed):
    states = sample_bridge_batch(theta, x0, times, 1, seed)
    return Trajectory(np.asarray(times, dtype=float), states[:, 0, :])


def write_trajectories_csv(times, states, path):
    """Write (trajectory_id, time, x_1..x_d) rows for states of shape (T, n, d)."""
    states = np.asarray(states)
    T, n, d = states.shape
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["trajectory_id", "time"] + [f"x{i + 1}" for i in range(d)])
        for j in range(n):
            for i in range(T):
                writer.writerow([j, repr(float(times[i]))] + [repr(float(v)) for v in states[i, j]])
