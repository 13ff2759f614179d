"""Forward-backward envelope of ``phi = f + g``.

For step ``gamma`` and forward point ``v = x - gamma * grad f(x)``:

* ``T(x) = prox_{gamma g}(v)`` and ``R(x) = (x - T(x)) / gamma``
* ``phi_gamma(x) = f(x) - gamma/2 ||grad f(x)||^2 + g^gamma(v)``
* ``grad phi_gamma(x) = (I - gamma hess f) R(x)``
"""
import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ParameterError
from .tensor import sqnorm


@dataclass
class EnvelopeState:
    x: np.ndarray
    gamma: float
    f_x: float
    grad_f_x: np.ndarray
    fbs_point: np.ndarray
    envelope: float  # g^gamma at fbs_point
    phi_gamma: float
    T: np.ndarray = None
    R: np.ndarray = None
    grad: np.ndarray = None

    @property
    def has_prox(self):
        return self.T is not None


def step_bound(fid, reg, beta):
    """``min{(1 - beta) / L_f, 1 / M}`` with ``1/0 = inf``."""
    M = reg.weak_convexity()
    inv_m = math.inf if M == 0 else 1.0 / M
    lf = fid.lipschitz
    inv_l = math.inf if lf == 0 else (1.0 - beta) / lf
    return min(inv_l, inv_m)


def check_step(gamma, fid, reg, beta):
    bound = step_bound(fid, reg, beta)
    if not 0 < gamma < bound:
        raise ParameterError(f"step gamma={gamma} must lie in (0, {bound:.6g}) = (0, min((1-beta)/L_f, 1/M))")


def evaluate(x, gamma, fid, reg, *, beta=None, with_prox=True):
    """Envelope quantities at ``x``.

    Costs one gradient and one envelope-term evaluation, plus one prox step
    when ``with_prox`` (line-search trials skip it). Passing ``beta``
    enforces the fixed-step gate ``gamma < min{(1-beta)/L_f, 1/M}``.
    """
    if not (gamma > 0 and math.isfinite(gamma)):
        raise ParameterError(f"gamma must be positive and finite, got {gamma}")
    if beta is not None:
        check_step(gamma, fid, reg, beta)
    f_x, gf = fid.value_and_grad(x)
    v = x - gamma * gf
    env = reg.envelope_term(v, gamma)
    phi_gamma = f_x - 0.5 * gamma * sqnorm(gf) + env
    if not math.isfinite(phi_gamma):
        raise NumericalError(f"non-finite envelope value {phi_gamma}")
    state = EnvelopeState(x=x, gamma=gamma, f_x=f_x, grad_f_x=gf, fbs_point=v, envelope=env, phi_gamma=phi_gamma)
    if with_prox:
        complete_prox(state, reg)
    return state


def complete_prox(state, reg):
    """Fill ``T`` and ``R`` from the cached forward point (one prox step)."""
    if state.T is None:
        T = reg.prox_step(state.fbs_point, state.gamma)
        state.T = T
        state.R = (state.x - T) / state.gamma
    return state


def grad_phi_gamma(state, fid):
    """``R - gamma * hess f R``; one Hessian-vector product, cached."""
    if state.grad is None:
        if state.R is None:
            raise ParameterError("state has no prox step; call complete_prox first")
        state.grad = state.R - state.gamma * fid.hvp(state.R)
    return state.grad


def phi_next(state_w, fid, f_next=None):
    """``phi(T(w))`` from cached quantities at ``w``.

    Uses ``g(T) = g^gamma(v) - ||T - v||^2 / (2 gamma)``, so no further prox
    or potential call is needed. ``f_next`` is ``f(T(w))`` when the caller
    already has it.
    """
    if state_w.T is None:
        raise ParameterError("state has no prox step; call complete_prox first")
    if f_next is None:
        f_next = fid.value(state_w.T)
    return f_next + state_w.envelope - sqnorm(state_w.T - state_w.fbs_point) / (2.0 * state_w.gamma)


def phi_value(x, gamma, fid, reg):
    """``f(x) + g(x)`` through the regularizer value, or ``None`` if unavailable."""
    g = reg.reg_value(x, gamma)
    if g is None:
        return None
    return fid.value(x) + g
