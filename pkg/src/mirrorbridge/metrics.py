"""Evaluation metrics and Gaussian ground truth."""
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from ._validation import as_samples, as_vector, check_count, check_positive
from .gmm import condition, log_density, sample


@dataclass(frozen=True, eq=False)
class GaussianMoments:
    """Mean and covariance of a Gaussian (or of a Gaussian fit)."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        d = mean.size
        if cov.shape != (d, d):
            raise ValueError(f"cov must have shape ({d}, {d}), got {cov.shape}")
        if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-12):
            raise ValueError("cov must be symmetric")
        cov = 0.5 * (cov + cov.T)
        lam = np.linalg.eigvalsh(cov)
        if lam[0] < -1e-10:
            raise ValueError(f"cov has a negative eigenvalue {lam[0]:.3g}")
        if lam[0] <= 0:
            cov = _project_spd(cov)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self):
        return self.mean.size

    @classmethod
    def fit(cls, samples):
        """Sample mean and unbiased, symmetrized, eigenvalue-floored covariance."""
        X = as_samples(samples, min_rows=2)
        cov = np.atleast_2d(np.cov(X, rowvar=False))
        return cls(X.mean(axis=0), _project_spd(0.5 * (cov + cov.T)))

    def scaled(self, s):
        return GaussianMoments(s * self.mean, s * s * self.cov)


def _project_spd(cov, floor=1e-12):
    lam, U = np.linalg.eigh(cov)
    return (U * np.maximum(lam, floor)) @ U.T


def _sum_pairwise(A, B, chunk=2048):
    if A.shape[1] == 1:
        return _sum_abs_diff_1d(A[:, 0], B[:, 0])
    total = 0.0
    for i in range(0, A.shape[0], chunk):
        total += cdist(A[i:i + chunk], B).sum()
    return total


def _sum_abs_diff_1d(a, b):
    # sum_{i,j} |a_i - b_j| via sorting: O((n + m) log(n + m))
    b = np.sort(b)
    cb = np.concatenate([[0.0], np.cumsum(b)])
    k = np.searchsorted(b, a, side="right")
    below = a * k - cb[k]
    above = (cb[-1] - cb[k]) - a * (b.size - k)
    return float(np.sum(below + above))


def energy_distance(A, B):
    """V-statistic energy distance ``2E|a-b| - E|a-a'| - E|b-b'|``.

    Within-sample means include the zero self-pairs, so identical samples
    give exactly zero; arguments are put in a canonical order first so that
    the result is exactly symmetric.
    """
    A = as_samples(A, name="A", min_rows=2)
    B = as_samples(B, A.shape[1], name="B", min_rows=2)
    if (B.shape[0], B.tobytes()) < (A.shape[0], A.tobytes()):
        A, B = B, A
    n, m = A.shape[0], B.shape[0]
    cross = _sum_pairwise(A, B) / (n * m)
    within_a = _sum_pairwise(A, A) / (n * n)
    within_b = _sum_pairwise(B, B) / (m * m)
    return float(2.0 * cross - within_a - within_b)


def _sqrtm_psd(M):
    lam, U = np.linalg.eigh(0.5 * (M + M.T))
    return (U * np.sqrt(np.maximum(lam, 0.0))) @ U.T


def bw2_gaussian(p, q):
    """Squared Bures-Wasserstein distance between two Gaussians."""
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")
    for name, g in (("p", p), ("q", q)):
        if np.linalg.cond(g.cov) > 1e12:
            raise np.linalg.LinAlgError(f"covariance of {name} is too ill-conditioned for a matrix square root")
    root_p = _sqrtm_psd(p.cov)
    cross = _sqrtm_psd(root_p @ q.cov @ root_p)
    dm = p.mean - q.mean
    val = float(dm @ dm + np.trace(p.cov) + np.trace(q.cov) - 2.0 * np.trace(cross))
    return max(val, 0.0)


def bw_uvp(model_samples, reference, variance_norm=None):
    """Unexplained-variance percentage ``100 * BW2^2(fit, reference) / variance_norm``.

    ``variance_norm`` defaults to half the trace of ``reference.cov``.
    """
    X = as_samples(model_samples, reference.dim, "model_samples")
    if X.shape[0] < reference.dim + 2:
        raise ValueError(f"need at least d + 2 = {reference.dim + 2} samples")
    if variance_norm is None:
        variance_norm = 0.5 * np.trace(reference.cov)
    variance_norm = check_positive(variance_norm, "variance_norm")
    return 100.0 * bw2_gaussian(GaussianMoments.fit(X), reference) / variance_norm


def cbw_uvp(model, reference_conditional, x_test, n_per_x=None, seed=0, variance_norm=None):
    """Conditional BW-UVP averaged over ``x_test``.

    Each conditional of ``model`` is summarized by a Gaussian fit of
    ``n_per_x`` samples, or by its exact mixture moments when ``n_per_x`` is
    None.  The normalizer is half the trace of the reference output
    covariance, recovered over ``x_test`` by the law of total variance unless
    given explicitly.
    """
    X = as_samples(x_test, model.dim, "x_test")
    if n_per_x is not None and n_per_x < model.dim + 2:
        raise ValueError(f"n_per_x must be at least d + 2 = {model.dim + 2}")
    refs = [reference_conditional(x) for x in X]
    if variance_norm is None:
        means = np.stack([r.mean for r in refs])
        mean_cov = np.mean([r.cov for r in refs], axis=0)
        spread = np.cov(means, rowvar=False, bias=True) if X.shape[0] > 1 else 0.0
        variance_norm = 0.5 * float(np.trace(mean_cov + spread))
    variance_norm = check_positive(variance_norm, "variance_norm")
    seeds = np.random.SeedSequence(seed).generate_state(X.shape[0])
    scores = []
    for x, ref, s in zip(X, refs, seeds):
        mix = condition(model, x)
        if n_per_x is None:
            fitted = GaussianMoments(*mix.moments())
        else:
            fitted = GaussianMoments.fit(sample(mix, n_per_x, int(s)))
        scores.append(100.0 * bw2_gaussian(fitted, ref) / variance_norm)
    return float(np.mean(scores))


def gaussian_eot_plan(a, A, b, B, epsilon):
    """Entropic OT plan between N(a, A) and N(b, B) for cost ``|x-y|^2 / 2``.

    The plan is jointly Gaussian with conditional ``y | x ~ N(b + S(x - a),
    eps S)`` where ``S`` is the SPD root of ``S A S + eps S = B``.
    Returns the joint moments over ``(x, y)``.
    """
    S = eot_potential_matrix(A, B, epsilon)
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    C = A @ S
    joint = np.block([[A, C], [C.T, B]])
    return GaussianMoments(np.concatenate([a, b]), 0.5 * (joint + joint.T))


def eot_potential_matrix(A, B, epsilon):
    """SPD solution ``S`` of ``S A S + eps S = B``."""
    epsilon = check_positive(epsilon, "epsilon")
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    for name, M in (("A", A), ("B", B)):
        if M.shape != A.shape or not np.allclose(M, M.T) or np.linalg.eigvalsh(M)[0] <= 0:
            raise ValueError(f"{name} must be symmetric positive definite of matching shape")
    lam, U = np.linalg.eigh(A)
    A_half = (U * np.sqrt(lam)) @ U.T
    A_ihalf = (U / np.sqrt(lam)) @ U.T
    D = A_half @ B @ A_half
    inner = _sqrtm_psd(D + 0.25 * epsilon ** 2 * np.eye(A.shape[0])) - 0.5 * epsilon * np.eye(A.shape[0])
    S = A_ihalf @ inner @ A_ihalf
    return 0.5 * (S + S.T)


def eot_conditional(a, A, b, B, epsilon):
    """Reference conditional ``x -> GaussianMoments`` of the Gaussian EOT plan."""
    S = eot_potential_matrix(A, B, epsilon)
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    cov = epsilon * S

    def conditional(x):
        x = as_vector(x, a.size)
        return GaussianMoments(b + S @ (x - a), cov)

    return conditional


def eot_potential(a, A, b, B, epsilon):
    """The K=1 potential whose conditional plan is the Gaussian EOT conditional."""
    from .gmm import GmmPotential

    S = eot_potential_matrix(A, B, epsilon)
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    m = b - S @ a
    return GmmPotential.from_moments([1.0], m[None, :], S[None, :, :], epsilon)


def mc_kl(p, q, n, seed):
    """Monte-Carlo ``KL(p || q)`` from ``n`` samples of ``p``."""
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")
    n = check_count(n, "n")
    Y = sample(p, n, seed)
    return float(np.mean(log_density(p, Y) - log_density(q, Y)))
