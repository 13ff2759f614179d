"""Proximal regularizers and gradient-step denoisers.

All regularizers expose the same four quantities used by the envelope
engine: the proximal point ``prox_step(v, gamma)``, the Moreau envelope
value ``envelope_term(v, gamma)``, the regularizer value
``reg_value(u, gamma)`` (``None`` when unavailable) and the weak-convexity
bound ``weak_convexity()``.

For a gradient-step denoiser ``D = I - alpha * grad g_sigma`` the implicit
regularizer is ``g = phi / gamma`` where ``prox_phi = D``. The prox step is
then ``D`` itself for every ``gamma`` and the envelope collapses to
``alpha * g_sigma(v) / gamma``.
"""
from collections import Counter

import numpy as np

from .errors import NumericalError, ParameterError
from .tensor import norm, sqnorm


class Regularizer:
    smooth = False
    strength_dependent = False
    sigma_d = None

    def __init__(self):
        self.calls = Counter()

    def prox_step(self, v, gamma):
        raise NotImplementedError

    def envelope_term(self, v, gamma):
        raise NotImplementedError

    def reg_value(self, u, gamma):
        return None

    def weak_convexity(self):
        raise NotImplementedError

    def modulus(self, gamma):
        """Weak-convexity constant of ``g`` itself at step ``gamma``."""
        return self.weak_convexity()

    def with_strength(self, sigma_d):
        """Copy of this regularizer at denoising strength ``sigma_d``.

        Strength-independent regularizers return themselves.
        """
        return self


class SoftThreshold(Regularizer):
    """``g = tau ||x||_1``."""

    def __init__(self, tau):
        super().__init__()
        if tau < 0:
            raise ParameterError("tau must be non-negative")
        self.tau = float(tau)

    def prox_step(self, v, gamma):
        self.calls["prox"] += 1
        t = gamma * self.tau
        return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)

    def envelope_term(self, v, gamma):
        # Huber function: quadratic inside the threshold, linear outside
        self.calls["potential"] += 1
        t = gamma * self.tau
        a = np.abs(v)
        inside = a <= t
        val = np.where(inside, a * a / (2.0 * gamma), self.tau * a - 0.5 * gamma * self.tau ** 2)
        return float(val.sum())

    def reg_value(self, u, gamma):
        return self.tau * float(np.abs(u).sum())

    def weak_convexity(self):
        return 0.0


class GradStepDenoiser(Regularizer):
    """Relaxed gradient-step denoiser ``D(x) = x - alpha * grad g_sigma(x)``.

    Subclasses provide ``potential`` and ``potential_grad`` for a smooth
    ``g_sigma`` whose gradient is ``lipschitz``-Lipschitz with constant < 1.
    """

    smooth = True
    inverse_tol = 1e-12
    inverse_maxiter = 100_000

    def __init__(self, lipschitz, alpha=1.0):
        super().__init__()
        if not 0 <= lipschitz < 1:
            raise ParameterError(f"potential gradient Lipschitz constant must lie in [0, 1), got {lipschitz}")
        if not 0 < alpha <= 1:
            raise ParameterError(f"relaxation alpha must lie in (0, 1], got {alpha}")
        self.lipschitz = float(lipschitz)
        self.alpha = float(alpha)

    def potential(self, x):
        raise NotImplementedError

    def potential_grad(self, x):
        raise NotImplementedError

    def denoise(self, x):
        return x - self.alpha * self.potential_grad(x)

    def prox_step(self, v, gamma):
        self.calls["prox"] += 1
        return self.denoise(v)

    def envelope_term(self, v, gamma):
        self.calls["potential"] += 1
        return self.alpha * self.potential(v) / gamma

    def inverse(self, x):
        """Solve ``D(u) = x`` by the fixed-point iteration ``u <- x + alpha grad g(u)``.

        The map contracts with factor ``alpha * L < 1``.
        """
        u = np.array(x, dtype=np.float64, copy=True)
        for _ in range(self.inverse_maxiter):
            u_new = x + self.alpha * self.potential_grad(u)
            step = norm(u_new - u)
            u = u_new
            if step <= self.inverse_tol * (1.0 + norm(u)):
                return u
        raise NumericalError(f"denoiser inversion did not converge (last step {step:.3e})")

    def phi_sigma_value(self, x):
        """Value at ``x`` of the weakly convex function whose prox is ``D``."""
        z = self.inverse(x)
        return self.alpha * self.potential(z) - 0.5 * sqnorm(z - x)

    def reg_value(self, u, gamma):
        return self.phi_sigma_value(u) / gamma

    def weak_convexity(self):
        aL = self.alpha * self.lipschitz
        return aL / (aL + 1.0)

    def modulus(self, gamma):
        # g = phi / gamma inherits phi's modulus scaled by 1/gamma
        return self.weak_convexity() / gamma


class QuadraticGradStep(GradStepDenoiser):
    """``g_sigma(x) = (L/2) ||x - b||^2`` with closed-form inverse and prior."""

    def __init__(self, lipschitz=0.5, alpha=1.0, center=0.0):
        super().__init__(lipschitz, alpha)
        self.center = center

    def potential(self, x):
        return 0.5 * self.lipschitz * sqnorm(x - self.center)

    def potential_grad(self, x):
        return self.lipschitz * (x - self.center)

    def inverse(self, x):
        aL = self.alpha * self.lipschitz
        return (x - aL * self.center) / (1.0 - aL)

    def phi_closed_form(self, x):
        aL = self.alpha * self.lipschitz
        return aL / (2.0 * (1.0 - aL)) * sqnorm(x - self.center)


class CosineGradStep(GradStepDenoiser):
    """Nonconvex separable potential ``c * sum(1 - cos(omega x))`` with ``c omega^2 = L``."""

    def __init__(self, lipschitz=0.9, omega=2 * np.pi / 0.25, alpha=1.0):
        super().__init__(lipschitz, alpha)
        if omega <= 0:
            raise ParameterError("omega must be positive")
        self.omega = float(omega)
        self.c = self.lipschitz / self.omega ** 2

    def potential(self, x):
        return self.c * float(np.sum(1.0 - np.cos(self.omega * x)))

    def potential_grad(self, x):
        return self.c * self.omega * np.sin(self.omega * x)

    def potential_hess_diag(self, x):
        return self.c * self.omega ** 2 * np.cos(self.omega * x)


def make_regularizer(name, **kwargs):
    """Build an analytic regularizer by short name."""
    table = {
        "quadratic": QuadraticGradStep,
        "cosine": CosineGradStep,
        "soft": SoftThreshold,
    }
    try:
        cls = table[name]
    except KeyError:
        raise ParameterError(f"unknown regularizer {name!r}; known: {sorted(table)}") from None
    return cls(**kwargs)
