"""Numerical self-checks exposed through ``pnpqn verify``.

Each suite returns a list of :class:`Check` results. Instances are small and
seeded, so every suite is deterministic.
"""
import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from . import fbe
from .denoisers import CosineGradStep, QuadraticGradStep, SoftThreshold
from .fidelity import Fidelity
from .harness import ExperimentConfig, build_problem, solver_params
from .lbfgs import SecantStore, dense_inverse_bfgs
from .operators import (
    CircularConvolution, Composition, Downsample, MatrixOp, circ_conv_direct, gram, kernel_transfer,
    make_gaussian_kernel, op_norm, scale_to_opnorm,
)
from .solvers import SolverParams, minfbe, pnp_lbfgs, solve
from .tensor import inner, make_rng, norm, sqnorm

logger = logging.getLogger(__name__)

SLACK = 1e-9


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""
    value: float = math.nan

    def line(self):
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


# -- shared instances ----------------------------------------------------------

def small_deblur(seed=0, n=8, channels=3, ksize=5, kblur=1.0, noise=0.02):
    """Deblur fidelity on an ``n x n`` image with a Gaussian kernel scaled to 0.96."""
    rng = make_rng(seed)
    x_true = rng.uniform(size=(channels, n, n))
    op = scale_to_opnorm(CircularConvolution(make_gaussian_kernel(ksize, kblur), x_true.shape))
    y = op.apply(x_true) + noise * rng.standard_normal(x_true.shape)
    return Fidelity(op, y), x_true


def lasso_instance(seed=0, n=8, tau=0.05):
    """Random well-conditioned 8x8 least squares with an l1 penalty."""
    rng = make_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    r, _ = np.linalg.qr(rng.standard_normal((n, n)))
    mat = q @ np.diag(np.linspace(0.5, 1.0, n)) @ r
    mat *= math.sqrt(0.96) / np.linalg.norm(mat, 2)
    op = MatrixOp(mat)
    x_true = np.where(rng.uniform(size=n) < 0.5, 0.0, rng.standard_normal(n)).reshape(1, 1, n)
    y = op.apply(x_true) + 0.01 * rng.standard_normal((1, 1, n))
    return Fidelity(op, y, lipschitz=0.96), SoftThreshold(tau)


def ista(fid, reg, x0, step=1.0, tol=1e-12, maxiter=200_000):
    """Plain proximal gradient to a fixed-point residual below ``tol``."""
    x = np.array(x0, dtype=np.float64)
    for _ in range(maxiter):
        x_new = reg.prox_step(x - step * fid.grad(x), step)
        if norm(x_new - x) <= tol:
            return x_new
        x = x_new
    raise RuntimeError("ISTA oracle did not converge")


def quadratic_closed_form(fid, reg, gamma):
    """Minimizer and minimum of ``f + phi/gamma`` for a convolution fidelity and
    QuadraticGradStep (centered at 0); both terms are diagonal in frequency."""
    op = fid.op
    mult = op.fourier_multiplier()
    aL = reg.alpha * reg.lipschitz
    kappa = aL / (1.0 - aL) / gamma  # phi/gamma = (kappa/2) ||x||^2
    h, w = fid.shape[1:]
    aty = op.adjoint(fid.y)
    xs = np.fft.irfft2(fid.lam * np.fft.rfft2(aty) / (fid.lam * np.abs(mult) ** 2 + kappa), s=(h, w))
    fmin = 0.5 * fid.lam * sqnorm(op.apply(xs) - fid.y) + 0.5 * kappa * sqnorm(xs)
    return xs, fmin


def newton_cosine(mat, y, reg, x, iters=60):
    """Fixed point of ``x = D(x - grad f(x))`` for a dense fidelity by Newton's method."""
    H = mat.T @ mat
    b = mat.T @ y
    eye = np.eye(len(x))
    for _ in range(iters):
        v = x - (H @ x - b)
        F = x - reg.denoise(v)
        J = eye - np.diag(1.0 - reg.alpha * reg.potential_hess_diag(v)) @ (eye - H)
        x = x - np.linalg.solve(J, F)
    return x


def superlinear_instance(seed=0, n=2):
    """Small strongly convex smooth problem: dense fidelity with spectrum in
    [0.5, 1] times sqrt(0.96) and a weak cosine potential."""
    rng = make_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    mat = q * np.linspace(0.5, 1.0, n)
    mat *= math.sqrt(0.96) / np.linalg.norm(mat, 2)
    op = MatrixOp(mat)
    y = op.apply(rng.uniform(size=(1, 1, n)))
    return Fidelity(op, y, lipschitz=0.96), CosineGradStep(0.3, omega=2 * math.pi)


def q_ratios(fid, reg, floor=1e-7, max_iters=60):
    """Q-ratios ``|x^{k+1}-x*| / |x^k-x*|`` of PnP-LBFGS on a dense instance.

    Errors below ``floor`` are dropped: there the envelope decrease is below
    double-precision resolution and the line search degenerates.
    """
    mat, y = fid.op.matrix, np.ravel(fid.y)
    x_ref = pnp_lbfgs(fid.y, fid, reg, SolverParams(stop_rule="none", max_iters=200)).x
    xs = newton_cosine(mat, y, reg, np.ravel(x_ref)).reshape(fid.shape)
    errs = [norm(fid.y - xs)]
    pnp_lbfgs(fid.y, fid, reg, SolverParams(stop_rule="none", max_iters=max_iters),
              callback=lambda k, x: errs.append(norm(x - xs)))
    e = np.array(errs)
    e = e[e > floor]
    return e, e[1:] / e[:-1]


def standard_grid():
    """Configurations of the descent grid: 2 tasks x 2 analytic potentials x 3 noise levels."""
    cfgs = []
    for task, kernel, size in (("deblur", "gaussian25_1.6", 32), ("sr", "sr_gaussian25_1.6", 32)):
        for den in ("cosine", "quadratic"):
            for noise in (2.55, 7.65, 12.75):
                cfgs.append(ExperimentConfig(
                    task=task, kernel=kernel, noise=noise, denoiser=den, reg_lipschitz=0.9,
                    images=(f"synthetic:blend:{size}",), timing=False,
                    params=dict(stop_rule="none", max_iters=100),
                ))
    return cfgs


def run_grid(cfgs=None, solver="pnp_lbfgs"):
    out = []
    for cfg in cfgs or standard_grid():
        cfg = cfg.replace(solver=solver)
        prob = build_problem(cfg)
        params, _ = solver_params(cfg, prob)
        rec = solve(solver, prob.x0, prob.fid, prob.reg, params, x_true=prob.x_true)
        out.append((cfg, prob, params, rec))
    return out


# -- checks --------------------------------------------------------------------

def descent_violations(rec, reg, beta):
    """Largest excess in ``phi(x+) <= phi(x) - beta g/2 |R(w)|^2 - (g - M g^2)/2 |R(x)|^2``."""
    worst = -math.inf
    for r in rec.rows:
        g = r.gamma
        m = reg.modulus(g)
        rhs = r.phi - 0.5 * beta * g * r.fbe_residual_w ** 2 - 0.5 * (g - m * g * g) * r.fbe_residual ** 2
        worst = max(worst, r.phi_next - rhs)
    return worst


def sandwich_excess(x, gamma, fid, reg):
    """Excess in ``phi(T) <= phi_gamma - (g/2)(1 - g L_f)|R|^2`` and
    ``phi_gamma <= phi - (g - M g^2)/2 |R|^2``; both should be <= 0."""
    st = fbe.evaluate(x, gamma, fid, reg)
    r2 = sqnorm(st.R)
    phi_x = fbe.phi_value(x, gamma, fid, reg)
    phi_t = fbe.phi_value(st.T, gamma, fid, reg)
    m = reg.modulus(gamma)
    upper = st.phi_gamma - (phi_x - 0.5 * (gamma - m * gamma ** 2) * r2)
    lower = phi_t - (st.phi_gamma - 0.5 * gamma * (1.0 - gamma * fid.lipschitz) * r2)
    return lower, upper


def fd_gradient_error(x, gamma, fid, reg, h=1e-6):
    st = fbe.evaluate(x, gamma, fid, reg)
    g = fbe.grad_phi_gamma(st, fid)
    fd = np.zeros_like(x)
    flat, out = x.ravel(), fd.ravel()
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        p = fbe.evaluate((flat + e).reshape(x.shape), gamma, fid, reg, with_prox=False).phi_gamma
        q = fbe.evaluate((flat - e).reshape(x.shape), gamma, fid, reg, with_prox=False).phi_gamma
        out[i] = (p - q) / (2 * h)
    return norm(g - fd) / max(norm(g), 1e-300)


def suite_envelope(states=100, fd_states=50):
    checks = []
    regs = {
        "cosine": CosineGradStep(0.9),
        "quadratic": QuadraticGradStep(0.5),
        "soft": SoftThreshold(0.05),
    }
    for name, reg in regs.items():
        fid, _ = small_deblur(seed=1)
        rng = make_rng(2)
        worst = -math.inf
        for _ in range(states):
            x = rng.uniform(-0.5, 1.5, size=fid.shape)
            gamma = float(rng.uniform(0.05, 1.0))
            worst = max(worst, *sandwich_excess(x, gamma, fid, reg))
        checks.append(Check(f"envelope sandwich [{name}]", worst <= SLACK, f"max excess {worst:.3e} over {states} states", worst))
    fid, _ = small_deblur(seed=3)
    reg = CosineGradStep(0.9)
    rng = make_rng(4)
    errs = [fd_gradient_error(rng.uniform(0, 1, size=fid.shape), 1.0, fid, reg) for _ in range(fd_states)]
    worst = max(errs)
    checks.append(Check("envelope gradient vs finite differences", worst <= 1e-5,
                        f"max relative error {worst:.3e} over {fd_states} states", worst))
    return checks


def suite_lbfgs(n=10, m=20):
    rng = make_rng(5)
    B = rng.standard_normal((n, n))
    hess = B @ B.T + n * np.eye(n)
    store = SecantStore(memory=m)
    pairs = []
    worst = 0.0
    for _ in range(m):
        s = rng.standard_normal(n)
        y = hess @ s
        store.push(s.reshape(1, 1, n), y.reshape(1, 1, n))
        pairs.append((s, y))
        g = rng.standard_normal(n)
        ref = dense_inverse_bfgs(pairs, n) @ g
        got = store.apply(g.reshape(1, 1, n)).ravel()
        worst = max(worst, norm(got - ref) / norm(ref))
    return [Check("two-loop vs dense inverse BFGS", worst <= 1e-10, f"max relative error {worst:.3e}, k = 1..{m}", worst)]


def rate_bound_excess(rec, reg, phi0, phi_min, params, lf):
    """Largest excess of ``min_i |R_i|^2 (k+1)(c - M c^2)/2 - (phi0 - phi_min)``."""
    m_phi = reg.weak_convexity()
    c = min(params.gamma0, params.xi * (1.0 - params.beta) / lf, math.inf if m_phi == 0 else 1.0 / m_phi)
    m = reg.modulus(c)
    best = math.inf
    worst = -math.inf
    for k, r in enumerate(rec.rows):
        best = min(best, r.fbe_residual ** 2)
        lhs = best * (k + 1) * (c - m * c * c) / 2.0
        worst = max(worst, lhs - (phi0 - phi_min))
    return worst


def rate_runs():
    """Instances with closed-form minimum: (record, reg, phi0, phi_min, params, L_f)."""
    runs = []
    for seed, gamma in ((0, 1.0), (1, 0.8), (2, 0.5)):
        fid, _ = small_deblur(seed=seed, n=16, channels=1)
        reg = QuadraticGradStep(0.5)
        _, fmin = quadratic_closed_form(fid, reg, gamma)
        for direction in ("lbfgs", "steepest", "none"):
            params = SolverParams(gamma0=gamma, stop_rule="none", max_iters=60)
            rec = minfbe(fid.y, fid, reg, params, direction_source=direction)
            phi0 = fbe.phi_value(fid.y, gamma, fid, reg)
            runs.append((f"quadratic seed={seed} gamma={gamma} d={direction}", rec, reg, phi0, fmin, params, fid.lipschitz))
    return runs


def suite_rates():
    checks = []
    for name, rec, reg, phi0, fmin, params, lf in rate_runs():
        ex = rate_bound_excess(rec, reg, phi0, fmin, params, lf)
        checks.append(Check(f"residual rate [{name}]", ex <= SLACK, f"max excess {ex:.3e}", ex))
    return checks


def suite_descent(cfgs=None):
    checks = []
    for cfg, prob, params, rec in run_grid(cfgs):
        ex = descent_violations(rec, prob.reg, params.beta)
        name = f"{cfg.task}/{cfg.denoiser}/noise={cfg.noise}"
        checks.append(Check(f"monotone descent [{name}]", ex <= SLACK, f"max excess {ex:.3e}, {rec.iterations} iterations", ex))
    return checks


def suite_operators():
    rng = make_rng(6)
    checks = []
    shape = (3, 32, 32)
    k = make_gaussian_kernel(25, 1.6)
    conv = CircularConvolution(k, shape)
    x = rng.standard_normal(shape)
    direct = circ_conv_direct(x, k)
    err = norm(conv.apply(x) - direct) / norm(direct)
    checks.append(Check("FFT convolution vs shift-and-add", err <= 1e-12, f"relative error {err:.3e}", err))
    for name, op in (("conv", conv), ("sr", Composition([conv, Downsample(2, shape)]))):
        u = rng.standard_normal(op.input_shape)
        v = rng.standard_normal(op.output_shape)
        gap = abs(inner(op.apply(u), v) - inner(u, op.adjoint(v))) / (norm(u) * norm(v))
        checks.append(Check(f"adjoint identity [{name}]", gap <= 1e-12, f"relative gap {gap:.3e}", gap))
    est = op_norm(gram(conv))
    exact = float(np.max(np.abs(kernel_transfer(k, 32, 32)) ** 2))
    err = abs(est - exact) / exact
    checks.append(Check("power iteration vs largest Fourier eigenvalue", err <= 1e-6, f"relative error {err:.3e}", err))
    scaled = scale_to_opnorm(conv)
    got = float(np.max(np.abs(scaled.fourier_multiplier()) ** 2))
    checks.append(Check("deblur operator scaled to 0.96", abs(got - 0.96) <= 1e-6, f"||A^T A|| = {got:.8f}", got))
    return checks


def suite_denoisers():
    rng = make_rng(7)
    checks = []
    for name, reg in (("cosine", CosineGradStep(0.9, alpha=0.7)), ("quadratic", QuadraticGradStep(0.5))):
        x = rng.uniform(0, 1, size=(1, 6, 6))
        err = norm(reg.denoise(reg.inverse(x)) - x)
        checks.append(Check(f"denoiser inverse round trip [{name}]", err <= 1e-10, f"error {err:.3e}", err))
        # D(x) minimizes phi(u) + |u - x|^2 / 2 (checked against random perturbations)
        u = reg.denoise(x)
        base = reg.phi_sigma_value(u) + 0.5 * sqnorm(u - x)
        worst = math.inf
        for _ in range(20):
            d = 1e-3 * rng.standard_normal(x.shape)
            worst = min(worst, reg.phi_sigma_value(u + d) + 0.5 * sqnorm(u + d - x) - base)
        checks.append(Check(f"denoiser is a proximal map [{name}]", worst >= -1e-12, f"min increase {worst:.3e}", worst))
    q = QuadraticGradStep(0.5)
    x = rng.uniform(size=(1, 5, 5))
    err = abs(q.phi_sigma_value(x) - q.phi_closed_form(x))
    checks.append(Check("quadratic prior closed form", err <= 1e-12, f"error {err:.3e}", err))
    return checks


def suite_fidelity():
    rng = make_rng(8)
    checks = []
    fid, _ = small_deblur(seed=9, n=12)
    v = rng.standard_normal(fid.shape)
    a = fid.prox(v, 0.7, method="fft")
    b = fid.prox(v, 0.7, method="cg", tol=1e-13, maxiter=2000)
    err = norm(a - b) / norm(a)
    checks.append(Check("data prox FFT vs CG", err <= 1e-9, f"relative difference {err:.3e}", err))
    x = rng.standard_normal(fid.shape)
    d = rng.standard_normal(fid.shape)
    h = 1e-6
    fd = (fid.value(x + h * d) - fid.value(x - h * d)) / (2 * h)
    err = abs(fd - inner(fid.grad(x), d)) / max(abs(fd), 1e-300)
    checks.append(Check("data gradient vs finite differences", err <= 1e-6, f"relative error {err:.3e}", err))
    return checks


SUITES = {
    "envelope": suite_envelope,
    "lbfgs": suite_lbfgs,
    "rates": suite_rates,
    "descent": suite_descent,
    "operators": suite_operators,
    "denoisers": suite_denoisers,
    "fidelity": suite_fidelity,
}


def verify(suite="all"):
    names = list(SUITES) if suite == "all" else [suite]
    results = []
    for name in names:
        if name not in SUITES:
            raise KeyError(f"unknown suite {name!r}; known: {sorted(SUITES)} or 'all'")
        t0 = time.perf_counter()
        res = SUITES[name]()
        logger.info("suite %s: %d checks in %.2fs", name, len(res), time.perf_counter() - t0)
        results.extend(res)
    return results
