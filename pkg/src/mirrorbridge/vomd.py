"""Online mirror descent over Gaussian-mixture potentials.

Each outer step blends two WFR tangents: one toward an externally supplied
target potential with weight ``eta_t`` and one toward the snapshot taken at
the start of the step with weight ``1 - eta_t``.  The inner loop applies the
blended tangent ``inner_steps`` times.
"""
import csv
import datetime
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ._validation import as_samples, check_count, check_positive
from .wfr import StepRejected, _check_pair, _tangents_from_draws, apply_tangent, combine, standard_draws

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "eta", "tangent_norm_mean", "tangent_norm_cov",
                  "tangent_norm_weight", "kl_estimate", "energy_distance")


@dataclass(frozen=True)
class OmdSchedule:
    """Step-size sequence.

    ``kind="harmonic"`` interpolates ``1/eta`` linearly from ``1/eta_1`` at
    ``t=1`` to ``1/eta_T`` at ``t=T``; ``kind="inverse"`` is ``2/(t+1)``.
    Steps with ``t <= warmup_fraction * T`` use ``eta = 1``.
    """

    eta_1: float = 1.0
    eta_T: float = 0.05
    total_steps: int = 400
    warmup_fraction: float = 0.0
    kind: str = "harmonic"

    def __post_init__(self):
        if self.kind not in ("harmonic", "inverse"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not (1.0 >= self.eta_1 >= self.eta_T > 0.0):
            raise ValueError(f"need 1 >= eta_1 >= eta_T > 0, got eta_1={self.eta_1}, eta_T={self.eta_T}")
        check_count(self.total_steps, "total_steps")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError(f"warmup_fraction must lie in [0, 1), got {self.warmup_fraction}")

    @property
    def warmup_steps(self):
        return int(math.floor(self.warmup_fraction * self.total_steps))


def step_size(t, sched):
    """``eta_t`` for the 1-based outer step ``t``."""
    T = sched.total_steps
    if int(t) != t or not 1 <= t <= T:
        raise ValueError(f"step index must lie in [1, {T}], got {t}")
    if t <= sched.warmup_fraction * T:
        return 1.0
    if sched.kind == "inverse":
        return 2.0 / (t + 1.0)
    if T == 1 or sched.eta_1 == sched.eta_T:
        return float(sched.eta_1)
    inv_1, inv_T = 1.0 / sched.eta_1, 1.0 / sched.eta_T
    return 1.0 / (inv_1 + (inv_T - inv_1) * (t - 1) / (T - 1))


@dataclass(frozen=True)
class TrainerConfig:
    """Inner-loop settings; defaults follow the 2-d column of the reference setup."""

    inner_steps: int = 50
    h: float = 1e-4
    batch_size: int = 1
    n_y: int = 16
    zero_centered_trick: bool = True
    seed: int = 0
    schedule: OmdSchedule = field(default_factory=OmdSchedule)
    quadrature: int = None
    max_rejections: int = 3

    def __post_init__(self):
        check_count(self.inner_steps, "inner_steps")
        check_positive(self.h, "h")
        check_count(self.batch_size, "batch_size")
        check_count(self.n_y, "n_y")
        check_count(self.max_rejections, "max_rejections")
        if self.quadrature is not None:
            check_count(self.quadrature, "quadrature")


def batch_seeds(seed, batch_size):
    """Per-item seeds used by :func:`blended_tangent`."""
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(batch_size)]


def blended_tangent(theta, snapshot, target, eta, batch, n_y, seed, quadrature=None):
    """Batch average of ``eta * grad(target) + (1 - eta) * grad(snapshot)``.

    Both tangents of one batch item share their standard-normal draws.
    """
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    _check_pair(theta, target)
    _check_pair(theta, snapshot)
    batch = as_samples(batch, theta.dim, "batch")
    K, d = theta.n_components, theta.dim
    per_item = []
    for x, s in zip(batch, batch_seeds(seed, batch.shape[0])):
        xi, w = standard_draws(K, d, n_y, s, quadrature)
        others, coefs = [], []
        if eta > 0.0:
            others.append(target)
            coefs.append(eta)
        if eta < 1.0:
            others.append(snapshot)
            coefs.append(1.0 - eta)
        parts = _tangents_from_draws(theta, others, x, xi, w)
        per_item.append(parts[0] if coefs == [1.0] else combine(parts, coefs))
    if len(per_item) == 1:
        return per_item[0]
    return combine(per_item, [1.0 / len(per_item)] * len(per_item))


@dataclass
class MetricLog:
    """Per-outer-step training record, serializable to CSV."""

    rows: list = field(default_factory=list)
    stalled_steps: list = field(default_factory=list)

    def append(self, **row):
        unknown = set(row) - set(METRIC_COLUMNS)
        if unknown:
            raise KeyError(f"unknown metric columns {sorted(unknown)}")
        self.rows.append({c: row.get(c) for c in METRIC_COLUMNS})

    def column(self, name):
        return np.array([np.nan if r[name] is None else r[name] for r in self.rows], dtype=float)

    def to_csv(self, path=None, timestamp=True):
        buf = io.StringIO()
        if timestamp:
            stamp = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
            buf.write(f"# generated {stamp}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for r in self.rows:
            writer.writerow(["" if r[c] is None else repr(r[c]) if isinstance(r[c], float) else r[c]
                             for c in METRIC_COLUMNS])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def array_source(X, seed):
    """Data source drawing minibatches (with replacement) from a fixed array."""
    X = as_samples(X)

    def draw(t, n, batch_size):
        rng = np.random.default_rng([seed, t, n])
        return X[rng.integers(0, X.shape[0], size=batch_size)]

    return draw


def train(config, data_source, target_provider, init=None, evaluate=None):
    """Run the mirrored training loop.

    Parameters
    ----------
    config : TrainerConfig
    data_source : callable ``(t, n, batch_size) -> (B, d) array`` or None
        Ignored when ``config.zero_centered_trick`` is set.
    target_provider : callable ``(t, theta) -> GmmPotential``
        Supplies the external target for outer step ``t``.
    init : GmmPotential, optional
        Starting model; defaults to the first target.
    evaluate : callable ``(t, theta) -> dict``, optional
        May return ``kl_estimate`` and/or ``energy_distance``.

    Returns
    -------
    theta : GmmPotential
    log : MetricLog
    """
    sched = config.schedule
    log = MetricLog()
    theta = init
    warm = sched.warmup_steps
    for t in range(1, sched.total_steps + 1):
        phi = target_provider(t, theta)
        if theta is None:
            theta = phi
        _check_pair(theta, phi)
        if warm and t == warm + 1:
            theta = phi
        snapshot = theta
        eta = step_size(t, sched)
        norms = []
        stalled = False
        for n in range(1, config.inner_steps + 1):
            if config.zero_centered_trick:
                batch = np.zeros((1, theta.dim))
            else:
                batch = data_source(t, n, config.batch_size)
            tangent = blended_tangent(theta, snapshot, phi, eta, batch, config.n_y,
                                      seed=[config.seed, t, n], quadrature=config.quadrature)
            norms.append(tangent.norms())
            h = config.h
            for _ in range(config.max_rejections):
                try:
                    theta = apply_tangent(theta, tangent, h)
                    break
                except StepRejected as exc:
                    logger.debug("step %d.%d rejected: %s", t, n, exc)
                    h *= 0.5
            else:
                stalled = True
                break
        if stalled:
            logger.warning("outer step %d stalled after %d rejections", t, config.max_rejections)
            log.stalled_steps.append(t)
        extra = evaluate(t, theta) if evaluate is not None else {}
        mean_norms = np.mean(norms, axis=0)
        log.append(step=t, eta=float(eta),
                   tangent_norm_mean=float(mean_norms[0]),
                   tangent_norm_cov=float(mean_norms[1]),
                   tangent_norm_weight=float(mean_norms[2]),
                   kl_estimate=_opt_float(extra.get("kl_estimate")),
                   energy_distance=_opt_float(extra.get("energy_distance")))
    return theta, log


def _opt_float(v):
    return None if v is None else float(v)
