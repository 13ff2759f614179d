import math

import numpy as np
import pytest

from pnpqn import fbe
from pnpqn.denoisers import CosineGradStep, QuadraticGradStep, SoftThreshold
from pnpqn.errors import ParameterError
from pnpqn.solvers import (
    CSV_COLUMNS, SOLVERS, SolverParams, dpir_hqs, dpir_schedule, minfbe, param_names, pnp_fista, pnp_lbfgs,
    pnp_pgd, solve,
)
from pnpqn.tensor import norm
from pnpqn.verification import descent_violations, ista, lasso_instance, quadratic_closed_form, small_deblur


def lasso_params(name, lf):
    base = SolverParams(stop_rule="none", max_iters=2000)
    if name in ("pnp_lbfgs", "minfbe"):
        return base.replace(max_iters=500)
    if name == "pnp_alpha_pgd":
        return base.replace(lam=2.0 / lf, alpha_hat=0.5)
    return base


@pytest.mark.parametrize("name", ["pnp_lbfgs", "minfbe", "pnp_pgd", "pnp_drs", "pnp_drsdiff", "pnp_alpha_pgd", "pnp_fista"])
def test_lasso_minimizer_shared(name):
    fid, reg = lasso_instance(seed=1)
    x0 = np.zeros(fid.shape)
    xs = ista(fid, reg, x0)
    rec = solve(name, x0, fid, reg, lasso_params(name, fid.lipschitz))
    assert norm(rec.x - xs) <= 1e-6


def test_quadratic_prior_closed_form():
    fid, _ = small_deblur(seed=2, n=8, channels=1)
    reg = QuadraticGradStep(0.5)
    xs, fmin = quadratic_closed_form(fid, reg, 1.0)
    rec = pnp_lbfgs(fid.y, fid, reg, SolverParams(stop_rule="none", max_iters=200))
    assert norm(rec.x - xs) <= 1e-8 * max(1.0, norm(xs))
    assert rec.final_phi == pytest.approx(fmin, abs=1e-10)


def test_fixed_point_start_stops_immediately():
    fid, reg = lasso_instance(seed=0)
    xs = ista(fid, reg, np.zeros(fid.shape))
    rec = pnp_lbfgs(xs, fid, reg, SolverParams(fixed_point_tol=1e-9))
    assert rec.status == "fixed_point" and rec.iterations == 0
    assert np.array_equal(rec.x, xs)


def test_minfbe_without_direction_is_forward_backward():
    fid, reg = lasso_instance(seed=2)
    x = np.zeros(fid.shape)
    rec = minfbe(x, fid, reg, SolverParams(stop_rule="none", max_iters=40, fixed_point_tol=0.0), direction_source="none")
    for _ in range(rec.iterations):
        x = reg.prox_step(x - fid.grad(x), 1.0)
    assert not rec.gamma_events
    assert norm(rec.x - x) <= 1e-12


def test_pgd_matches_minfbe_without_direction():
    fid, _ = small_deblur(seed=4, n=8, channels=1)
    reg = CosineGradStep(0.9)
    p = SolverParams(stop_rule="none", max_iters=25, fixed_point_tol=0.0, gamma0=0.9, lam=0.9)
    a = pnp_pgd(fid.y, fid, reg, p)
    b = minfbe(fid.y, fid, reg, p, direction_source="none")
    assert a.iterations == b.iterations == 25
    assert norm(a.x - b.x) <= 1e-12
    assert np.allclose(a.column("phi_next")[:-1], b.column("phi")[1:], rtol=1e-10)


def test_fista_momentum_sequence():
    fid, reg = lasso_instance(seed=0)
    rec = pnp_fista(np.zeros(fid.shape), fid, reg, SolverParams(stop_rule="none", max_iters=5))
    t = rec.extras["t"]
    assert t[0] == 1.0 and t[1] == pytest.approx((1 + math.sqrt(5)) / 2)
    assert all(b > a for a, b in zip(t, t[1:]))


def test_dpir_schedule_and_warnings():
    s = dpir_schedule(0.01, 8, sigma_start=49 / 255, iters=12)
    assert len(s) == 12 and s[0] == pytest.approx(49 / 255) and np.all(s[7:] == 0.01)
    assert np.all(np.diff(s) <= 0)
    fid, x_true = small_deblur(seed=0, n=8, channels=1)
    with pytest.raises(ParameterError):
        dpir_hqs(fid.y, fid, CosineGradStep(0.5), SolverParams(max_iters=3))
    rec = dpir_hqs(fid.y, fid, CosineGradStep(0.5), SolverParams(max_iters=10, noise_sigma=0.02, stop_rule="none"))
    assert rec.iterations == 10 and len(rec.extras["sigma_schedule"]) == 10
    assert any("strength" in w for w in rec.warnings)
    assert all(math.isnan(r.phi) for r in rec.rows)


def test_dpir_orders_differ():
    fid, _ = small_deblur(seed=0, n=8, channels=1)
    p = SolverParams(max_iters=6, noise_sigma=0.02, stop_rule="none")
    a = dpir_hqs(fid.y, fid, CosineGradStep(0.5), p)
    b = dpir_hqs(fid.y, fid, CosineGradStep(0.5), p.replace(dpir_order="sequential"))
    assert norm(a.x - b.x) > 0


@pytest.mark.parametrize("reg", [CosineGradStep(0.9), QuadraticGradStep(0.5), SoftThreshold(0.02)])
def test_lbfgs_call_budget_and_descent(reg):
    fid, x_true = small_deblur(seed=5, n=8, channels=2)
    params = SolverParams(stop_rule="none", max_iters=30)
    rec = pnp_lbfgs(fid.y, fid, reg, params, x_true=x_true)
    assert rec.iterations > 0
    for r in rec.rows:
        t = r.tau_tests
        assert r.calls == ((t + 1, 2, t + 1, 2) if r.tau > 0 else (t + 1, 1, t + 1, 1))
        assert r.tau_halvings <= params.tau_max_halvings
    assert descent_violations(rec, reg, params.beta) <= 1e-9
    assert np.all(np.diff(rec.column("residual_prefix_min")) <= 0)


def test_step_gate_rejects_large_gamma():
    fid, _ = small_deblur(seed=0, n=8, channels=1)
    reg = CosineGradStep(0.9)
    with pytest.raises(ParameterError):
        pnp_lbfgs(fid.y, fid, reg, SolverParams(gamma0=2.0 / fid.lipschitz))


def test_minfbe_backtracking_floor():
    fid, _ = small_deblur(seed=6, n=8, channels=1)
    reg = CosineGradStep(0.9)
    lf = fid.lipschitz
    p = SolverParams(gamma0=10.0 / lf, stop_rule="none", max_iters=30)
    floor = min(p.gamma0, p.xi * (1 - p.beta) / lf, 1 / reg.weak_convexity())
    rec = minfbe(fid.y, fid, reg, p)
    assert rec.gamma_events and all(e["to"] >= floor for e in rec.gamma_events)
    low = minfbe(fid.y, fid, reg, p.replace(gamma0=0.9 * floor))
    assert not low.gamma_events


def test_steepest_direction_never_falls_back():
    fid, _ = small_deblur(seed=7, n=8, channels=1)
    rec = minfbe(fid.y, fid, CosineGradStep(0.9), SolverParams(stop_rule="none", max_iters=20), direction_source="steepest")
    assert rec.fallbacks == 0 and not any(r.fallback for r in rec.rows)


def test_callback_and_csv():
    fid, _ = small_deblur(seed=0, n=8, channels=1)
    seen = []
    rec = pnp_lbfgs(fid.y, fid, CosineGradStep(0.9), SolverParams(max_iters=5, stop_rule="none", record_timing=False),
                    callback=lambda k, x: seen.append(k))
    assert seen == list(range(rec.iterations))
    lines = rec.csv_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert len(lines) == rec.iterations + 1
    assert lines[1].split(",")[-1] == "0.0"


def test_envelope_rule_on_baseline_warns():
    fid, reg = lasso_instance(seed=0)
    rec = pnp_pgd(np.zeros(fid.shape), fid, reg, SolverParams(max_iters=3))
    assert rec.iterations == 3 and rec.warnings


def test_params_validation_and_registry():
    with pytest.raises(ParameterError):
        SolverParams(stop_rule="never")
    with pytest.raises(ParameterError):
        SolverParams(beta=1.0)
    with pytest.raises(ParameterError):
        solve("adam", None, None, None)
    assert set(SOLVERS) >= {"pnp_lbfgs", "minfbe", "pnp_pgd", "pnp_drs", "pnp_drsdiff", "pnp_alpha_pgd", "pnp_fista", "dpir_hqs"}
    assert "tau_max_halvings" in param_names()
    with pytest.raises(ParameterError):
        solve("pnp_alpha_pgd", np.zeros((1, 1, 8)), *lasso_instance(0), SolverParams(alpha_hat=1.5))


def test_relative_phi_rule_converges():
    fid, reg = lasso_instance(seed=0)
    rec = pnp_lbfgs(np.zeros(fid.shape), fid, reg, SolverParams(stop_rule="relative_phi", max_iters=500, fixed_point_tol=0.0))
    assert rec.status == "converged"
    assert abs(rec.rows[-1].phi_next - rec.rows[-1].phi) <= 1e-8 * abs(rec.rows[-1].phi)


def test_line_search_halving_is_rare_on_standard_grid():
    from pnpqn.verification import run_grid
    iters = halving_iters = 0
    for _, _, params, rec in run_grid():
        h = rec.column("tau_halvings")
        assert h.sum() <= params.tau_max_halvings * np.count_nonzero(h)
        iters += rec.iterations
        halving_iters += np.count_nonzero(h)
    assert halving_iters < 0.2 * iters
