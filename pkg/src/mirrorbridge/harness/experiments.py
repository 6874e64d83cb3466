"""End-to-end runs: target fitting, mirrored training and the online stream."""
import logging
from dataclasses import dataclass, field

import numpy as np

from ..gmm import GmmPotential, condition, sample_conditional
from ..metrics import cbw_uvp, energy_distance, mc_kl
from ..solvers import ema_update, fit_reverse_kl, init_potential
from ..vomd import MetricLog, array_source, train
from .config import fit_config, problem_spec, trainer_config
from .problems import gaussian_reference, generate_problem
from .stream import StreamState, next_window

logger = logging.getLogger(__name__)

# independent streams drawn from one problem seed
TRAIN_STREAM, EVAL_STREAM, SOURCE_STREAM = 0, 1, 2


@dataclass
class RunResult:
    """Final model, final target and their per-step records."""

    theta: GmmPotential
    target: GmmPotential
    log: MetricLog
    target_log: MetricLog
    summary: dict = field(default_factory=dict)


def _int_seed(*entropy):
    return int(np.random.SeedSequence(list(entropy)).generate_state(1)[0])


def initial_target(cfg, seed, y_first):
    m = cfg["model"]
    K, eps = m["n_components"], float(cfg["problem"]["epsilon"])
    if m["init"] == "randn":
        rng = np.random.default_rng(_int_seed(seed, 3))
        d = y_first.shape[1]
        chol = np.broadcast_to(np.sqrt(float(m["init_cov"])) * np.eye(d), (K, d, d))
        return GmmPotential(eps, np.full(K, -np.log(K)), rng.standard_normal((K, d)), chol)
    return init_potential(K, y_first, eps, _int_seed(seed, 3), float(m["init_cov"]))


class Evaluator:
    """Energy distance of conditional samples to held-out target data.

    For Gaussian problems it also reports a KL estimate at ``x = 0`` and the
    conditional BW-UVP against the closed-form plan.
    """

    def __init__(self, cfg, seed):
        self.spec = problem_spec(cfg)
        n = cfg["eval"]["n_eval"]
        self.x_eval, self.y_eval = generate_problem(self.spec, n, stream=EVAL_STREAM)
        self.seed = seed
        self.reference = None
        if self.spec.mu["type"] == "gaussian" and self.spec.nu["type"] == "gaussian":
            self.reference = gaussian_reference(self.spec)
            self.x_test = self.x_eval[:cfg["eval"]["n_test_x"]]

    def energy(self, theta):
        Y = sample_conditional(theta, self.x_eval, _int_seed(self.seed, 4))
        return energy_distance(Y, self.y_eval)

    def __call__(self, theta):
        out = {"energy_distance": self.energy(theta)}
        if self.reference is not None:
            potential, _ = self.reference
            x0 = np.zeros(theta.dim)
            out["kl_estimate"] = mc_kl(condition(theta, x0), condition(potential, x0),
                                       self.y_eval.shape[0], _int_seed(self.seed, 5))
        return out

    def cbw(self, theta):
        if self.reference is None:
            return None
        return cbw_uvp(theta, self.reference[1], self.x_test)


def _target_provider(cfg, seed, y_source, x_data, on_target=None):
    """Build the ``(t, theta) -> phi_t`` callback driven by the reverse-KL fitter.

    ``y_source(t)`` returns the target data visible at step ``t`` and a flag
    marking an empty window (the refit is then skipped).
    """
    tr = cfg["trainer"]
    state = {"phi": None, "ema": None, "t": 0}

    def provide(t, theta):
        if t == state["t"]:
            return state["provided"]
        batch, empty = y_source(t)
        phi = state["phi"]
        if phi is None:
            if empty:
                raise ValueError("the first stream window is empty; cannot initialize the target")
            phi = initial_target(cfg, seed, batch)
        if not empty and tr["target_iters"] > 0:
            start = initial_target(cfg, seed, batch) if tr["target_refit"] == "fresh" else phi
            fc = fit_config(cfg, _int_seed(seed, 6, t))
            phi = fit_reverse_kl(fc, _fit_stream(x_data, _int_seed(seed, 7, t), fc.batch_size),
                                 batch, init=start)
        elif empty:
            logger.info("step %d: empty window, target refit skipped", t)
        state["phi"] = phi
        decay = tr["target_ema_decay"]
        state["ema"] = phi if state["ema"] is None or decay == 0.0 else ema_update(state["ema"], phi, decay)
        state["t"] = t
        state["provided"] = state["ema"]
        if on_target is not None:
            on_target(t, state["provided"])
        return state["provided"]

    return provide


def _fit_stream(X, seed, batch_size):
    draw = array_source(X, seed)
    return lambda it: draw(0, it, batch_size)


def _run(cfg, seed, y_source, x_data):
    tc = trainer_config(cfg, seed)
    evaluator = Evaluator(cfg, seed)
    every = cfg["eval"]["every"]
    T = tc.schedule.total_steps
    target_log = MetricLog()

    def due(t):
        return t == T or (every and t % every == 0)

    def on_target(t, phi):
        row = evaluator(phi) if due(t) else {}
        target_log.append(step=t, **row)

    def evaluate(t, theta):
        return evaluator(theta) if due(t) else {}

    provider = _target_provider(cfg, seed, y_source, x_data, on_target)
    data_source = None if tc.zero_centered_trick else array_source(x_data, _int_seed(seed, 8))
    theta, log = train(tc, data_source, provider, evaluate=evaluate)
    target = provider(T, theta)
    summary = {
        "seed": seed,
        "steps": T,
        "stalled_steps": list(log.stalled_steps),
        "energy_distance": log.rows[-1]["energy_distance"],
        "target_energy_distance": target_log.rows[-1]["energy_distance"],
    }
    if evaluator.reference is not None:
        summary["cbw_uvp"] = evaluator.cbw(theta)
        summary["target_cbw_uvp"] = evaluator.cbw(target)
    return RunResult(theta, target, log, target_log, summary)


def run_train(cfg, seed):
    """Mirrored training on top of the reverse-KL fitter with the full dataset visible."""
    spec = problem_spec(cfg)
    x_data, y_data = generate_problem(spec, cfg["problem"]["n_train"], stream=TRAIN_STREAM)
    return _run(cfg, seed, lambda t: (y_data, False), x_data)


def run_stream(cfg, seed):
    """The rotating-filter experiment: the fitter only sees the current sector."""
    spec = problem_spec(cfg)
    if spec.d != 2:
        raise ValueError("the rotating-filter stream needs a 2-d problem")
    x_data, y_data = generate_problem(spec, cfg["problem"]["n_train"], stream=TRAIN_STREAM)
    stream = StreamState(y_data, float(cfg["problem"]["window_width"]), cfg["problem"]["rotation_period"])
    return _run(cfg, seed, lambda t: next_window(stream), x_data)


def run_fit(cfg, seed):
    """The reverse-KL baseline trained for ``total_steps * target_iters`` iterations."""
    spec = problem_spec(cfg)
    x_data, y_data = generate_problem(spec, cfg["problem"]["n_train"], stream=TRAIN_STREAM)
    n_iters = cfg["schedule"]["total_steps"] * cfg["trainer"]["target_iters"]
    fc = fit_config(cfg, _int_seed(seed, 6), n_iters=n_iters)
    phi = fit_reverse_kl(fc, x_data, y_data, init=initial_target(cfg, seed, y_data))
    evaluator = Evaluator(cfg, seed)
    row = evaluator(phi)
    summary = {"seed": seed, "iterations": n_iters, "energy_distance": row["energy_distance"]}
    if evaluator.reference is not None:
        summary["cbw_uvp"] = evaluator.cbw(phi)
        summary["kl_estimate"] = row["kl_estimate"]
    return phi, summary


def source_samples(cfg, n):
    """Fresh source points for trajectory sampling."""
    spec = problem_spec(cfg)
    return generate_problem(spec, n, stream=SOURCE_STREAM)[0]

