"""Iterative drivers: PnP-LBFGS, MINFBE with step backtracking, and the
Plug-and-Play baselines (PGD, DRSdiff, DRS, relaxed PGD, FISTA, DPIR)."""
import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import fbe
from .errors import NumericalError, ParameterError
from .lbfgs import SecantStore
from .tensor import inner, norm, psnr, sqnorm

logger = logging.getLogger(__name__)

CSV_COLUMNS = (
    "iter", "phi", "phi_gamma", "residual_sq", "residual_prefix_min", "fbe_residual",
    "tau", "tau_halvings", "gamma", "psnr", "wall_ms",
)

STOP_RULES = ("envelope", "relative_phi", "residual_only", "none")
_ROUNDING = 16 * np.finfo(np.float64).eps


@dataclass
class SolverParams:
    gamma0: float = 1.0
    beta: float = 0.01
    xi: float = 0.5
    tau_max_halvings: int = 10
    max_iters: int = 100
    memory: int = 20
    stop_rule: str = "envelope"
    envelope_diff: float = 1e-5
    envelope_gap: float = 5e-5
    consecutive: int = 5
    rel_phi: float = 1e-8
    residual_tol: float = 0.0
    fixed_point_tol: float = 1e-12
    # baselines: step on grad f / weight of prox_f
    lam: float = 1.0
    alpha: float = 1.0
    alpha_hat: Optional[float] = None
    sigma_d: Optional[float] = None
    noise_sigma: Optional[float] = None
    dpir_lambda_hat: float = 0.23
    dpir_steps: int = 8
    dpir_sigma_start: float = 49.0 / 255.0
    dpir_order: str = "displayed"
    track_phi: bool = True
    record_timing: bool = True
    debug: bool = False

    def __post_init__(self):
        if self.stop_rule not in STOP_RULES:
            raise ParameterError(f"stop_rule must be one of {STOP_RULES}, got {self.stop_rule!r}")
        if not 0 <= self.beta < 1:
            raise ParameterError("beta must lie in [0, 1)")
        if not 0 < self.xi < 1:
            raise ParameterError("xi must lie in (0, 1)")
        if self.gamma0 <= 0:
            raise ParameterError("gamma0 must be positive")
        if self.dpir_order not in ("displayed", "sequential"):
            raise ParameterError("dpir_order must be 'displayed' or 'sequential'")

    def replace(self, **changes):
        d = asdict(self)
        d.update(changes)
        return SolverParams(**d)


@dataclass
class IterationRow:
    iter: int
    phi: float
    phi_gamma: float
    residual_sq: float
    residual_prefix_min: float
    fbe_residual: float
    tau: float
    tau_halvings: int
    gamma: float
    psnr: float
    wall_ms: float
    # not exported to CSV
    phi_next: float = math.nan
    fbe_residual_w: float = math.nan
    tau_tests: int = 0
    calls: tuple = ()
    fallback: bool = False


@dataclass
class RunRecord:
    solver: str
    rows: list = field(default_factory=list)
    status: str = "running"
    x: np.ndarray = None
    x0: np.ndarray = None
    calls: dict = field(default_factory=dict)
    fallbacks: int = 0
    max_direction_ratio: float = 0.0
    gamma_events: list = field(default_factory=list)
    secant_rejections: int = 0
    warnings: list = field(default_factory=list)
    final_phi: float = math.nan
    final_phi_gamma: float = math.nan
    final_fbe_residual: float = math.nan
    extras: dict = field(default_factory=dict)
    wall_time: float = 0.0

    @property
    def iterations(self):
        return len(self.rows)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.rows], dtype=np.float64)

    def write_csv(self, fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])

    def csv_text(self):
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


class _Clock:
    def __init__(self, enabled):
        self.enabled = enabled
        self.t0 = time.perf_counter()

    def ms(self):
        return 1000.0 * (time.perf_counter() - self.t0) if self.enabled else 0.0


def _call_snapshot(fid, reg):
    return (reg.calls["potential"], reg.calls["prox"], fid.calls["grad"], fid.calls["hvp"])


def _finish_calls(record, fid, reg):
    record.calls = {
        "potential": reg.calls["potential"], "prox": reg.calls["prox"],
        "grad": fid.calls["grad"], "hvp": fid.calls["hvp"],
        "value": fid.calls["value"], "prox_f": fid.calls["prox"],
    }


def _x0_scale(x0):
    s = sqnorm(x0)
    return s if s > 0 else 1.0


def _psnr_or_nan(x, x_true):
    return math.nan if x_true is None else psnr(x, x_true)


# -- MINFBE family -----------------------------------------------------------

def _fbe_loop(name, x0, fid, reg, params, x_true, direction, backtrack, callback=None):
    if direction not in ("lbfgs", "steepest", "none"):
        raise ParameterError(f"unknown direction source {direction!r}")
    gamma = float(params.gamma0)
    if not backtrack:
        fbe.check_step(gamma, fid, reg, params.beta)
    need_grad = direction != "none"
    rec = RunRecord(solver=name, x0=np.array(x0, copy=True))
    clock = _Clock(params.record_timing)
    store = SecantStore(params.memory, initial_scale=gamma)
    x0n = _x0_scale(x0)

    def full_state(x, g):
        st = fbe.evaluate(x, g, fid, reg)
        if need_grad:
            fbe.grad_phi_gamma(st, fid)
        return st

    x = np.array(x0, dtype=np.float64, copy=True)
    st = full_state(x, gamma)
    phi_x = fbe.phi_value(x, gamma, fid, reg)
    phi_x = math.nan if phi_x is None else phi_x
    prefix_min = math.inf
    streak = 0
    k = 0
    try:
        while True:
            if k >= params.max_iters:
                rec.status = "max_iters"
                break
            if norm(st.R) <= params.fixed_point_tol * (1.0 + norm(x)):
                rec.status = "fixed_point"
                break
            c0 = _call_snapshot(fid, reg)

            if direction == "none":
                d = None
            else:
                gphi = st.grad
                d = -store.apply(gphi) if direction == "lbfgs" else -gphi
                fallback = False
                if inner(d, gphi) > 0:
                    d = -gamma * gphi
                    fallback = True
                    rec.fallbacks += 1
                rn = norm(st.R)
                if rn > 0:
                    rec.max_direction_ratio = max(rec.max_direction_ratio, norm(d) / rn)

            tau, tests, sw = 0.0, 0, None
            if d is not None:
                t = 1.0
                for _ in range(params.tau_max_halvings):
                    tests += 1
                    trial = fbe.evaluate(x + t * d, gamma, fid, reg, with_prox=False)
                    if trial.phi_gamma <= st.phi_gamma:
                        sw, tau = trial, t
                        break
                    t *= 0.5
            if sw is None:
                sw = st  # tau = 0: w = x, everything already cached
            else:
                fbe.complete_prox(sw, reg)
                if need_grad:
                    fbe.grad_phi_gamma(sw, fid)

            x_new = sw.T
            st_new = full_state(x_new, gamma)

            if backtrack:
                # sufficient-decrease test on f at T(w); shrink gamma and restart the iteration
                # compared up to the rounding error of its terms, so that a vanishing R
                # cannot trigger a spurious shrink
                lin = gamma * inner(sw.grad_f_x, sw.R)
                excess = st_new.f_x - sw.f_x + lin - 0.5 * (1.0 - params.beta) * gamma * sqnorm(sw.R)
                if excess > _ROUNDING * (abs(st_new.f_x) + abs(sw.f_x) + abs(lin)):
                    new_gamma = params.xi * gamma
                    rec.gamma_events.append({"iter": k, "from": gamma, "to": new_gamma})
                    gamma = new_gamma
                    store.clear()
                    store.initial_scale = gamma
                    st = full_state(x, gamma)
                    phi_x = fbe.phi_value(x, gamma, fid, reg)
                    phi_x = math.nan if phi_x is None else phi_x
                    continue

            phi_new = fbe.phi_next(sw, fid, f_next=st_new.f_x)
            if params.debug:
                direct = fbe.phi_value(x_new, gamma, fid, reg)
                if direct is not None and abs(direct - phi_new) > 1e-8 * (1.0 + abs(direct)):
                    raise NumericalError(f"objective bookkeeping mismatch: {phi_new} vs {direct}")
            if tau > 0 and direction == "lbfgs":
                store.push(sw.x - x, sw.grad - st.grad)

            res = sqnorm(x_new - x) / x0n
            prefix_min = min(prefix_min, res)
            calls = tuple(b - a for a, b in zip(c0, _call_snapshot(fid, reg)))
            rec.rows.append(IterationRow(
                iter=k, phi=phi_x, phi_gamma=st.phi_gamma, residual_sq=res, residual_prefix_min=prefix_min,
                fbe_residual=norm(st.R), tau=tau, tau_halvings=tests - (1 if tau > 0 else 0), gamma=gamma,
                psnr=_psnr_or_nan(x_new, x_true), wall_ms=clock.ms(), phi_next=phi_new,
                fbe_residual_w=norm(sw.R), tau_tests=tests, calls=calls,
                fallback=bool(d is not None and fallback),
            ))
            if callback is not None:
                callback(k, x_new)

            stop = False
            if params.stop_rule == "envelope":
                hit = (st.phi_gamma - st_new.phi_gamma < params.envelope_diff) or (phi_new - st_new.phi_gamma < params.envelope_gap)
                streak = streak + 1 if hit else 0
                stop = streak >= params.consecutive
            elif params.stop_rule == "relative_phi":
                stop = math.isfinite(phi_x) and abs(phi_new - phi_x) <= params.rel_phi * abs(phi_x)
            elif params.stop_rule == "residual_only":
                stop = res <= params.residual_tol

            x, st, phi_x = x_new, st_new, phi_new
            k += 1
            if stop:
                rec.status = "converged"
                break
    except NumericalError as exc:
        rec.status = "error"
        rec.x = x
        exc.record = rec
        raise
    finally:
        rec.wall_time = clock.ms() / 1000.0
        rec.secant_rejections = store.rejected
        _finish_calls(rec, fid, reg)

    rec.x = x
    rec.final_phi = phi_x
    rec.final_phi_gamma = st.phi_gamma
    rec.final_fbe_residual = norm(st.R)
    return rec


def pnp_lbfgs(x0, fid, reg, params=None, x_true=None, callback=None):
    """PnP-LBFGS: fixed step, quasi-Newton direction on the envelope, then a
    forward-backward step from the line-search point."""
    params = params or SolverParams()
    return _fbe_loop("pnp_lbfgs", x0, fid, reg, params, x_true, "lbfgs", backtrack=False, callback=callback)


def minfbe(x0, fid, reg, params=None, direction_source="lbfgs", x_true=None, callback=None):
    """MINFBE with step backtracking ``gamma <- xi * gamma``.

    ``direction_source`` is ``'lbfgs'``, ``'steepest'`` or ``'none'``; the last
    gives plain forward-backward splitting with backtracking.
    """
    params = params or SolverParams()
    return _fbe_loop("minfbe", x0, fid, reg, params, x_true, direction_source, backtrack=True, callback=callback)


# -- baselines ---------------------------------------------------------------

def _baseline_loop(name, x0, fid, reg, params, x_true, step, solution=None, callback=None):
    """Drive ``step(k) -> x_{k+1}`` on the iterated sequence.

    ``solution()`` returns the reported estimate (defaults to the iterate).
    The objective column uses ``f + g`` with ``g = reg_value(., lam)``.
    """
    rec = RunRecord(solver=name, x0=np.array(x0, copy=True))
    clock = _Clock(params.record_timing)
    x0n = _x0_scale(x0)
    lam = params.lam
    solution = solution or (lambda: state["x"])
    state = {"x": np.array(x0, dtype=np.float64, copy=True)}
    if params.stop_rule == "envelope":
        rec.warnings.append("envelope stopping rule does not apply to baseline solvers; running to max_iters")

    def objective(u):
        if not params.track_phi:
            return math.nan
        g = reg.reg_value(u, lam)
        return math.nan if g is None else fid.value(u) + g

    prefix_min = math.inf
    phi_prev = objective(solution())
    rec.status = "max_iters"
    for k in range(params.max_iters):
        x_old = state["x"]
        x_new = step(k)
        if not np.all(np.isfinite(x_new)):
            rec.status = "error"
            rec.x = x_old
            err = NumericalError(f"{name}: non-finite iterate at iteration {k}")
            err.record = rec
            raise err
        state["x"] = x_new
        res = sqnorm(x_new - x_old) / x0n
        prefix_min = min(prefix_min, res)
        sol = solution()
        phi_new = objective(sol)
        rec.rows.append(IterationRow(
            iter=k, phi=phi_prev, phi_gamma=math.nan, residual_sq=res, residual_prefix_min=prefix_min,
            fbe_residual=math.nan, tau=math.nan, tau_halvings=0, gamma=lam,
            psnr=_psnr_or_nan(sol, x_true), wall_ms=clock.ms(), phi_next=phi_new,
        ))
        if callback is not None:
            callback(k, sol)
        stop = False
        if params.stop_rule == "residual_only":
            stop = res <= params.residual_tol
        elif params.stop_rule == "relative_phi":
            stop = math.isfinite(phi_prev) and abs(phi_new - phi_prev) <= params.rel_phi * abs(phi_prev)
        phi_prev = phi_new
        if stop:
            rec.status = "converged"
            break
    rec.x = solution()
    rec.final_phi = phi_prev
    rec.wall_time = clock.ms() / 1000.0
    _finish_calls(rec, fid, reg)
    return rec


def pnp_pgd(x0, fid, reg, params=None, x_true=None, callback=None):
    params = params or SolverParams()
    lam = params.lam
    st = {}

    def step(k):
        x = st.get("x", x0)
        x_new = reg.prox_step(x - lam * fid.grad(x), lam)
        st["x"] = x_new
        return x_new

    return _baseline_loop("pnp_pgd", x0, fid, reg, params, x_true, step, callback=callback)


def pnp_drsdiff(x0, fid, reg, params=None, x_true=None, callback=None):
    """Douglas-Rachford with the data prox first; reports the denoiser output."""
    params = params or SolverParams()
    lam = params.lam
    st = {"x": np.array(x0, dtype=np.float64), "z": np.array(x0, dtype=np.float64)}

    def step(k):
        x = st["x"]
        y = fid.prox(x, lam)
        z = reg.prox_step(2 * y - x, lam)
        st["x"], st["z"] = x + (z - y), z
        return st["x"]

    return _baseline_loop("pnp_drsdiff", x0, fid, reg, params, x_true, step, solution=lambda: st["z"], callback=callback)


def pnp_drs(x0, fid, reg, params=None, x_true=None, callback=None):
    """Douglas-Rachford with the denoiser first; reports the denoiser output."""
    params = params or SolverParams()
    lam = params.lam
    st = {"x": np.array(x0, dtype=np.float64), "y": np.array(x0, dtype=np.float64)}

    def step(k):
        x = st["x"]
        y = reg.prox_step(x, lam)
        z = fid.prox(2 * y - x, lam)
        st["x"], st["y"] = x + (z - y), y
        return st["x"]

    return _baseline_loop("pnp_drs", x0, fid, reg, params, x_true, step, solution=lambda: st["y"], callback=callback)


def pnp_alpha_pgd(x0, fid, reg, params=None, x_true=None, callback=None):
    """Relaxed PGD with inertia ``alpha_hat``; defaults to ``1 / (lam L_f)``."""
    params = params or SolverParams()
    lam = params.lam
    a_hat = params.alpha_hat if params.alpha_hat is not None else 1.0 / (lam * fid.lipschitz)
    if not 0 < a_hat <= 1:
        raise ParameterError(f"alpha_hat must lie in (0, 1], got {a_hat}")
    st = {"x": np.array(x0, dtype=np.float64), "y": np.array(x0, dtype=np.float64)}

    def step(k):
        x, y = st["x"], st["y"]
        q = (1 - a_hat) * y + a_hat * x
        x_new = reg.prox_step(x - lam * fid.grad(q), lam)
        st["x"], st["y"] = x_new, (1 - a_hat) * y + a_hat * x_new
        return x_new

    rec = _baseline_loop("pnp_alpha_pgd", x0, fid, reg, params, x_true, step, callback=callback)
    rec.extras["alpha_hat"] = a_hat
    return rec


def pnp_fista(x0, fid, reg, params=None, x_true=None, callback=None):
    params = params or SolverParams()
    lam = params.lam
    x0 = np.array(x0, dtype=np.float64)
    st = {"y": x0, "x_prev": x0, "t": 1.0}
    ts = [1.0]

    def step(k):
        y, t = st["y"], st["t"]
        x = reg.prox_step(y - lam * fid.grad(y), lam)
        t_next = (1.0 + math.sqrt(1.0 + 4.0 * t * t)) / 2.0
        st["y"] = x + (t - 1.0) / t_next * (x - st["x_prev"])
        st["x_prev"], st["t"] = x, t_next
        ts.append(t_next)
        return x

    rec = _baseline_loop("pnp_fista", x0, fid, reg, params, x_true, step, callback=callback)
    rec.extras["t"] = ts
    return rec


def dpir_schedule(sigma, steps, sigma_start=49.0 / 255.0, iters=None):
    """Log-spaced denoiser strengths from ``sigma_start`` down to ``sigma``
    over ``steps`` iterations, then held at ``sigma``."""
    iters = steps if iters is None else iters
    head = np.geomspace(sigma_start, sigma, steps) if steps > 1 else np.array([sigma])
    return np.concatenate([head, np.full(max(iters - len(head), 0), sigma)])[:iters]


def dpir_hqs(x0, fid, reg, params=None, x_true=None, callback=None):
    """Half-quadratic splitting with a decreasing denoiser-strength schedule.

    ``dpir_order='displayed'`` computes ``x_{k+1} = prox(z_k)`` and
    ``z_{k+1} = D(x_k)``; ``'sequential'`` uses ``z_{k+1} = D(x_{k+1})``.
    """
    params = params or SolverParams()
    sigma = params.noise_sigma
    if sigma is None or sigma <= 0:
        raise ParameterError("dpir_hqs needs a positive noise_sigma")
    sched = dpir_schedule(sigma, params.dpir_steps, params.dpir_sigma_start, params.max_iters)
    st = {"x": np.array(x0, dtype=np.float64), "z": np.array(x0, dtype=np.float64)}
    warned = []
    if not reg.strength_dependent:
        warned.append("regularizer ignores denoising strength; DPIR schedule applied as a parameter only")

    def step(k):
        sk = sched[k]
        a_k = params.dpir_lambda_hat * sigma ** 2 / sk ** 2
        den = reg.with_strength(sk)
        x_old = st["x"]
        x_new = fid.prox(st["z"], 1.0 / (2.0 * a_k))
        src = x_old if params.dpir_order == "displayed" else x_new
        st["z"] = den.prox_step(src, 1.0)
        st["x"] = x_new
        return x_new

    rec = _baseline_loop("dpir_hqs", x0, fid, reg, params.replace(track_phi=False), x_true, step, callback=callback)
    rec.warnings.extend(warned)
    rec.extras["sigma_schedule"] = [float(s) for s in sched[: rec.iterations]]
    return rec


SOLVERS = {
    "pnp_lbfgs": pnp_lbfgs,
    "minfbe": minfbe,
    "pnp_pgd": pnp_pgd,
    "pnp_drsdiff": pnp_drsdiff,
    "pnp_drs": pnp_drs,
    "pnp_alpha_pgd": pnp_alpha_pgd,
    "pnp_fista": pnp_fista,
    "dpir_hqs": dpir_hqs,
}


def solve(name, x0, fid, reg, params=None, x_true=None, callback=None):
    try:
        fn = SOLVERS[name]
    except KeyError:
        raise ParameterError(f"unknown solver {name!r}; known: {sorted(SOLVERS)}") from None
    return fn(x0, fid, reg, params, x_true=x_true, callback=callback)


def param_names():
    return [f.name for f in fields(SolverParams)]
