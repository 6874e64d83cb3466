"""Acceptance checks, one test per criterion.

Each test records a one-line PASS/FAIL verdict (with its measurements and
wall time) that is printed in the terminal summary.  Run the module as a
script to execute every criterion and print the verdicts directly.  The
statistical experiments (5, 6, 7 and 9) are marked ``slow``.
"""
import time

import numpy as np
import pytest
from scipy.stats import kendalltau, norm

from mirrorbridge.dynamics import log_h, sample_bridge_batch, sample_sde_batch, sb_drift
from mirrorbridge.gmm import (GmmPotential, cholesky_spd, condition, grad_hess_log_density,
                              load_checkpoint, log_density, sample, save_checkpoint)
from mirrorbridge.harness import cli
from mirrorbridge.harness.config import resolve_config, to_toml
from mirrorbridge.harness.experiments import run_stream, run_train
from mirrorbridge.metrics import energy_distance, eot_potential, gaussian_eot_plan, mc_kl
from mirrorbridge.solvers import (FitConfig, discrete_sinkhorn, fit_reverse_kl, plan_from_duals,
                                  reverse_kl_loss, sinkhorn_col_update, sinkhorn_row_update)
from mirrorbridge.vomd import OmdSchedule, TrainerConfig, blended_tangent, train
from mirrorbridge.wfr import wfr_grad

from conftest import central_diff, random_mixture, random_potential, rel_err

RESULTS = {}


def record(n, ok, detail, elapsed, budget):
    within = elapsed < budget
    verdict = "PASS" if ok and within else "FAIL"
    RESULTS[n] = f"criterion {n:>2}: {verdict}  {detail}  [{elapsed:.1f}s / budget {budget:.0f}s]"
    print(RESULTS[n])
    assert ok, RESULTS[n]
    assert within, RESULTS[n]


def test_criterion_01_equilibrium_exactness():
    t0 = time.time()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        K, d = int(rng.integers(1, 6)), int(rng.integers(1, 5))
        theta = random_potential(rng, K, d, epsilon=float(rng.uniform(0.2, 2.0)))
        for x in (np.zeros(d), 0.5 * rng.standard_normal(d)):
            for n_y in (1, 16):
                g = wfr_grad(theta, theta, x, n_y, int(rng.integers(1 << 30)))
                worst = max(worst, np.abs(g.d_log_weight).max(), np.abs(g.d_mean).max(),
                            np.abs(g.sym_hess_avg).max())
    record(1, worst == 0.0, f"max |tangent| at equilibrium = {worst:.1e} over 400 evaluations",
           time.time() - t0, 10)


def test_criterion_02_derivative_oracles():
    t0 = time.time()
    rng = np.random.default_rng(2)
    errs = {"grad": 0.0, "hess": 0.0, "rkl": 0.0, "drift": 0.0}
    for _ in range(100):
        mix = random_mixture(rng, int(rng.integers(1, 4)), 2)
        y = rng.standard_normal(2)
        g, H = grad_hess_log_density(mix, y)
        errs["grad"] = max(errs["grad"], rel_err(g, central_diff(lambda z: log_density(mix, z), y)))
        errs["hess"] = max(errs["hess"], rel_err(H, central_diff(lambda z: grad_hess_log_density(mix, z)[0], y)))

        theta = random_potential(rng, 2, 2, epsilon=float(rng.uniform(0.3, 1.5)))
        X, Y = rng.standard_normal((8, 2)), rng.standard_normal((8, 2))
        _, grad = reverse_kl_loss(theta, X, Y)
        loss = lambda f: reverse_kl_loss(GmmPotential.from_flat(f, 2, 2, theta.epsilon), X, Y)[0]
        errs["rkl"] = max(errs["rkl"], rel_err(grad, central_diff(loss, theta.to_flat(), step=1e-5)))

        t, x = rng.uniform(0.0, 0.9), rng.standard_normal(2)
        fd = theta.epsilon * central_diff(lambda z: log_h(theta, t, z[None, :])[0], x, step=1e-5)
        errs["drift"] = max(errs["drift"], rel_err(sb_drift(theta, t, x), fd))
    ok = errs["grad"] < 1e-5 and errs["hess"] < 1e-4 and errs["rkl"] < 1e-5 and errs["drift"] < 1e-5
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    record(2, ok, f"max relative FD error: {detail}", time.time() - t0, 60)


def _grid_plan_moments(a, A, b, B, eps, n=400):
    x = np.linspace(a - 7 * np.sqrt(A), a + 7 * np.sqrt(A), n)
    y = np.linspace(b - 7 * np.sqrt(B), b + 7 * np.sqrt(B), n)
    wx, wy = norm.pdf(x, a, np.sqrt(A)), norm.pdf(y, b, np.sqrt(B))
    plan = discrete_sinkhorn(wx / wx.sum(), wy / wy.sum(), 0.5 * (x[:, None] - y[None, :]) ** 2, eps,
                             max_iters=50_000)
    P = plan.weights
    mx, my = P.sum(1) @ x, P.sum(0) @ y
    dx, dy = x - mx, y - my
    cov = np.array([[P.sum(1) @ dx ** 2, np.sum(P * np.outer(dx, dy))],
                    [np.sum(P * np.outer(dx, dy)), P.sum(0) @ dy ** 2]])
    return np.array([mx, my]), cov, plan.converged


def test_criterion_03_gaussian_ground_truth():
    t0 = time.time()
    a, A, b, B = 0.0, 1.0, 0.5, 2.0
    worst, zero = 0.0, True
    for eps in (0.1, 1.0):
        joint = gaussian_eot_plan([a], [[A]], [b], [[B]], eps)
        mean, cov, converged = _grid_plan_moments(a, A, b, B, eps)
        worst = max(worst, np.abs(mean - joint.mean).max(), np.abs(cov - joint.cov).max())
        zero &= converged
        theta = eot_potential([a], [[A]], [b], [[B]], eps)
        rng = np.random.default_rng(3)
        for eta in (0.0, 0.5, 1.0):
            t = blended_tangent(theta, theta, theta, eta, rng.standard_normal((4, 1)), 16, 0)
            zero &= not (np.any(t.d_mean) or np.any(t.sym_hess_avg) or np.any(t.d_log_weight))
    record(3, worst < 1e-3 and zero,
           f"max |moment gap| vs 400x400 Sinkhorn = {worst:.1e}; K=1 fixed point exact: {zero}",
           time.time() - t0, 30)


def test_criterion_04_sinkhorn_half_steps():
    t0 = time.time()
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        n, m = rng.integers(2, 40, size=2)
        a, b = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(m))
        eps = float(rng.uniform(0.05, 2.0))
        log_kernel = -rng.uniform(0.0, 4.0, (n, m)) / eps
        f = np.zeros(n)
        for _ in range(10):
            g = sinkhorn_col_update(f, np.log(b), log_kernel)
            worst = max(worst, 0.5 * np.abs(plan_from_duals(f, g, log_kernel).sum(0) - b).sum())
            f = sinkhorn_row_update(g, np.log(a), log_kernel)
            worst = max(worst, 0.5 * np.abs(plan_from_duals(f, g, log_kernel).sum(1) - a).sum())
    record(4, worst <= 1e-12, f"max TV after a half-update = {worst:.1e} over 100 problems",
           time.time() - t0, 10)


def mann_kendall_upward(values):
    """One-sided Mann-Kendall p-value for an increasing trend."""
    return kendalltau(np.arange(len(values)), values, alternative="greater").pvalue


@pytest.mark.slow
def test_criterion_05_inverse_schedule_rate():
    t0 = time.time()
    star = GmmPotential.from_moments([0.4, 0.6], [[-1.5], [1.0]], [[[0.5]], [[0.8]]], 1.0)
    init = GmmPotential.from_moments([0.5, 0.5], [[-0.5], [0.5]], [[[1.5]], [[1.5]]], 1.0)
    p_star = condition(star, [0.0])
    cfg = TrainerConfig(inner_steps=50, h=0.1, n_y=1, quadrature=20,
                        schedule=OmdSchedule(total_steps=400, kind="inverse"))
    evaluate = lambda t, th: {"kl_estimate": mc_kl(condition(th, [0.0]), p_star, 20_000, 0)}
    _, log = train(cfg, None, lambda t, th: star, init=init, evaluate=evaluate)
    t = np.arange(1, 401)
    scaled = (t * log.column("kl_estimate"))[49:]
    p = mann_kendall_upward(scaled)
    ok = p >= 0.05 and np.all(np.isfinite(scaled))
    record(5, ok, f"t*KL on [50,400]: max {scaled.max():.3g}, last {scaled[-1]:.3g}; "
           f"Mann-Kendall upward p = {p:.3g}", time.time() - t0, 300)


@pytest.mark.slow
def test_criterion_06_harmonic_schedule_with_noisy_targets():
    t0 = time.time()
    star = GmmPotential.from_moments([0.4, 0.6], [[-1.5], [1.0]], [[[0.5]], [[0.8]]], 1.0)
    p_star = condition(star, [0.0])
    T, x0 = 200, np.zeros((128, 1))
    wins, rows = 0, []
    for seed in range(5):
        # a converged initial fit, then one short refit per step on 128 fresh samples
        phi = fit_reverse_kl(FitConfig(2, 1.0, 1500, 0.02, 0.9, 128, seed), x0, sample(p_star, 512, [seed, 0]))
        targets = []
        for t in range(1, T + 1):
            y = sample(p_star, 128, [seed, t])
            phi = fit_reverse_kl(FitConfig(2, 1.0, 50, 0.02, 0.9, 128, seed), x0, lambda it: y, init=phi)
            targets.append(phi)
        kls = []
        for sched in (OmdSchedule(1.0, 0.05, T), OmdSchedule(1.0, 1.0, T)):
            cfg = TrainerConfig(inner_steps=25, h=0.2, n_y=16, seed=seed, schedule=sched)
            theta, _ = train(cfg, None, lambda t, th: targets[t - 1])
            kls.append(mc_kl(condition(theta, [0.0]), p_star, 100_000, 99))
        kls.append(mc_kl(condition(targets[-1], [0.0]), p_star, 100_000, 99))
        wins += kls[0] < kls[1] and kls[0] < kls[2]
        rows.append("/".join(f"{k:.4f}" for k in kls))
    record(6, wins >= 4, f"harmonic beats eta=1 and raw target in {wins}/5 seeds "
           f"(KL harmonic/eta=1/target: {', '.join(rows)})", time.time() - t0, 600)


def _iqr(v):
    return np.percentile(v, [25, 75])


@pytest.mark.slow
def test_criterion_07_online_stream():
    t0 = time.time()
    ok_median, separated, parts = True, False, []
    for K in (8, 20):
        ours, base = [], []
        for seed in range(5):
            cfg = resolve_config({"model": {"n_components": K}, "problem": {"seed": seed}})
            s = run_stream(cfg, seed).summary
            ours.append(s["energy_distance"])
            base.append(s["target_energy_distance"])
        ok_median &= np.median(ours) <= np.median(base)
        (lo_o, hi_o), (lo_b, hi_b) = _iqr(ours), _iqr(base)
        separated |= hi_o < lo_b or hi_b < lo_o
        parts.append(f"K={K}: median ED {np.median(ours):.3f} vs {np.median(base):.3f}, "
                     f"IQR [{lo_o:.3f}, {hi_o:.3f}] vs [{lo_b:.3f}, {hi_b:.3f}]")
    record(7, ok_median and separated, "; ".join(parts), time.time() - t0, 1200)


def test_criterion_08_static_dynamic_consistency():
    t0 = time.time()
    rng = np.random.default_rng(8)
    covs = np.stack([np.eye(2) * s for s in (0.6, 1.0, 1.4)])
    theta = GmmPotential(0.5, [0.0, -0.3, 0.2], rng.standard_normal((3, 2)), cholesky_spd(covs))
    x0 = np.array([0.3, -0.2])
    _, states = sample_sde_batch(theta, np.tile(x0, (20_000, 1)), 200, 1)
    ed_end = energy_distance(states[-1], sample(condition(theta, x0), 20_000, 2))

    theta1 = GmmPotential(0.5, [0.0, 0.4], [[-1.0], [1.2]], [[[0.8]], [[1.1]]])
    times = np.linspace(0.0, 1.0, 201)
    _, sde = sample_sde_batch(theta1, np.full((20_000, 1), 0.2), 200, 3)
    bridge = sample_bridge_batch(theta1, [0.2], times, 20_000, 4)
    ed_mid = [energy_distance(sde[i], bridge[i]) for i in (50, 100, 150)]
    ok = ed_end < 0.02 and max(ed_mid) < 0.03
    record(8, ok, f"endpoint ED {ed_end:.1e}; bridge vs SDE ED at t=.25/.5/.75: "
           + "/".join(f"{e:.1e}" for e in ed_mid), time.time() - t0, 300)


@pytest.mark.slow
def test_criterion_09_cbw_ordering():
    t0 = time.time()
    ok, parts = True, []
    for eps in (0.1, 1.0):
        ours, base = [], []
        for seed in range(5):
            cfg = resolve_config({"problem": {"preset": "gauss_to_gauss", "epsilon": eps, "seed": seed},
                                  "model": {"n_components": 4}, "schedule": {"total_steps": 100},
                                  "trainer": {"h": 0.02 * eps}})
            s = run_train(cfg, seed).summary
            ours.append(s["cbw_uvp"])
            base.append(s["target_cbw_uvp"])
        ok &= np.median(ours) <= np.median(base)
        parts.append(f"eps={eps}: median cBW-UVP {np.median(ours):.3f}% vs {np.median(base):.3f}%")
    record(9, ok, "; ".join(parts), time.time() - t0, 900)


def test_criterion_10_determinism_and_persistence(tmp_path):
    t0 = time.time()
    small = {"schedule": {"total_steps": 6}, "problem": {"n_train": 1000},
             "eval": {"n_eval": 200, "every": 3}}
    config = tmp_path / "c.toml"
    config.write_text(to_toml(resolve_config(small)))
    same = True
    for command in ("train", "stream"):
        outs = []
        for rep in range(2):
            root = tmp_path / f"{command}{rep}"
            assert cli.main([command, "--config", str(config), "--out", str(root)]) == 0
            run = next(root.iterdir())
            files = {}
            for p in sorted(run.iterdir()):
                data = p.read_bytes()
                if p.suffix == ".csv":
                    data = b"\n".join(l for l in data.split(b"\n") if not l.startswith(b"# generated"))
                files[p.name] = data
            outs.append(files)
        same &= outs[0] == outs[1]

    result = run_train(resolve_config(small), 0)
    round_trip = True
    for theta in (result.theta, result.target):
        path = tmp_path / "ckpt.json"
        save_checkpoint(theta, path)
        back = load_checkpoint(path)
        round_trip &= all(getattr(back, f).tobytes() == getattr(theta, f).tobytes()
                          for f in ("log_weights", "means", "chol")) and back.epsilon == theta.epsilon
        save_checkpoint(back, tmp_path / "again.json")
        round_trip &= path.read_bytes() == (tmp_path / "again.json").read_bytes()
    record(10, same and round_trip, f"identical reruns: {same}; exact checkpoint round trip: {round_trip}",
           time.time() - t0, 120)


if __name__ == "__main__":
    import sys
    import tempfile
    from pathlib import Path

    for name, fn in sorted(globals().items()):
        if name.startswith("test_criterion_"):
            try:
                if "tmp_path" in fn.__code__.co_varnames[:fn.__code__.co_argcount]:
                    with tempfile.TemporaryDirectory() as tmp:
                        fn(Path(tmp))
                else:
                    fn()
            except AssertionError:
                pass
    failed = sum("FAIL" in line for line in RESULTS.values())
    sys.exit(1 if failed else 0)
