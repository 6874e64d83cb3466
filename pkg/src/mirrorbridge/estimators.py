"""scikit-learn style wrappers around the reverse-KL fitter and mirrored training.

Both estimators learn a conditional plan ``pi(y | x)`` from unpaired
samples: ``fit(X, Y)`` takes source and target samples with matching
dimension, ``predict(X)`` returns conditional means and ``sample(X)`` one
conditional draw per row.
"""
import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .gmm import condition, sample_conditional
from .solvers import FitConfig, fit_reverse_kl, init_potential
from .vomd import OmdSchedule, TrainerConfig, array_source, train


class _PlanMixin:
    def _check_X(self, X):
        check_is_fitted(self, "potential_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def predict(self, X):
        """Conditional means ``E[y | x]`` for every row of ``X``."""
        X = self._check_X(X)
        return np.stack([condition(self.potential_, x).moments()[0] for x in X])

    def sample(self, X, random_state=None):
        """One draw from ``pi(. | x)`` per row of ``X``."""
        X = self._check_X(X)
        seed = self.random_state if random_state is None else random_state
        return sample_conditional(self.potential_, X, seed)


def _check_pair(X, Y):
    X = check_array(X, dtype=float)
    Y = check_array(Y, dtype=float)
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"X and Y must share their dimension, got {X.shape[1]} and {Y.shape[1]}")
    return X, Y


class LightSB(_PlanMixin, BaseEstimator):
    """Gaussian-mixture potential fitted by minimizing the sample reverse KL.

    Parameters
    ----------
    n_components : int
    epsilon : float
        Volatility of the reference process.
    n_iters : int
        Optimizer iterations.
    lr, momentum, optimizer, batch_size :
        Optimizer settings, see :class:`mirrorbridge.solvers.FitConfig`.
    init_cov : float
        Initial isotropic potential covariance.
    random_state : int
    """

    def __init__(self, n_components=8, epsilon=0.1, n_iters=1000, lr=0.01, momentum=0.9,
                 optimizer="adam", batch_size=128, init_cov=1.0, random_state=0):
        self.n_components = n_components
        self.epsilon = epsilon
        self.n_iters = n_iters
        self.lr = lr
        self.momentum = momentum
        self.optimizer = optimizer
        self.batch_size = batch_size
        self.init_cov = init_cov
        self.random_state = random_state

    def _fit_config(self, n_iters=None):
        return FitConfig(self.n_components, self.epsilon, self.n_iters if n_iters is None else n_iters,
                         self.lr, self.momentum, self.batch_size, self.random_state, self.init_cov,
                         self.optimizer)

    def fit(self, X, Y):
        X, Y = _check_pair(X, Y)
        cfg = self._fit_config()
        init = init_potential(self.n_components, Y, self.epsilon, self.random_state, self.init_cov)
        self.potential_ = fit_reverse_kl(cfg, X, Y, init=init)
        self.n_features_in_ = X.shape[1]
        return self


class MirroredSB(_PlanMixin, BaseEstimator):
    """Mirrored training on top of a continually refitted reverse-KL target.

    Each of ``total_steps`` outer steps refits the target for
    ``target_iters`` iterations (continuing from the previous target) and
    then runs ``inner_steps`` blended WFR steps of size ``h``.

    Parameters
    ----------
    n_components, epsilon, lr, momentum, optimizer, batch_size, init_cov :
        As in :class:`LightSB`, for the target fitter.
    total_steps, inner_steps, h, n_y : int, int, float, int
        Outer steps, inner steps, inner step size, draws per component.
    eta_1, eta_T : float
        Harmonic step-size schedule endpoints.
    warmup_fraction : float
    zero_centered_trick : bool
        Evaluate tangents at ``x = 0`` only (valid for a zero-mean source).
    target_iters : int
    random_state : int
    """

    def __init__(self, n_components=8, epsilon=0.1, total_steps=400, inner_steps=50, h=1e-4,
                 n_y=16, eta_1=1.0, eta_T=0.05, warmup_fraction=0.0, zero_centered_trick=True,
                 target_iters=50, lr=0.01, momentum=0.9, optimizer="adam", batch_size=128,
                 init_cov=1.0, random_state=0):
        self.n_components = n_components
        self.epsilon = epsilon
        self.total_steps = total_steps
        self.inner_steps = inner_steps
        self.h = h
        self.n_y = n_y
        self.eta_1 = eta_1
        self.eta_T = eta_T
        self.warmup_fraction = warmup_fraction
        self.zero_centered_trick = zero_centered_trick
        self.target_iters = target_iters
        self.lr = lr
        self.momentum = momentum
        self.optimizer = optimizer
        self.batch_size = batch_size
        self.init_cov = init_cov
        self.random_state = random_state

    def fit(self, X, Y):
        X, Y = _check_pair(X, Y)
        seed = self.random_state
        fit_cfg = FitConfig(self.n_components, self.epsilon, self.target_iters, self.lr, self.momentum,
                            self.batch_size, seed, self.init_cov, self.optimizer)
        sched = OmdSchedule(self.eta_1, self.eta_T, self.total_steps, self.warmup_fraction)
        tc = TrainerConfig(self.inner_steps, self.h, 1, self.n_y, self.zero_centered_trick, seed, sched)
        targets = {}

        def provider(t, theta):
            if t not in targets:
                prev = targets.get(t - 1)
                if prev is None:
                    prev = init_potential(self.n_components, Y, self.epsilon, seed, self.init_cov)
                step_cfg = FitConfig(**{**fit_cfg.__dict__, "seed": seed * 100003 + t})
                targets.clear()
                targets[t] = fit_reverse_kl(step_cfg, X, Y, init=prev)
            return targets[t]

        source = None if self.zero_centered_trick else array_source(X, seed)
        self.potential_, self.log_ = train(tc, source, provider)
        self.target_ = provider(self.total_steps, self.potential_)
        self.n_features_in_ = X.shape[1]
        return self
