"""Quadratic data fidelity ``f(x) = (lam/2) ||A x - y||^2``."""
from collections import Counter

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from .errors import DimensionError, NumericalError, ParameterError
from .operators import gram, op_norm
from .tensor import norm, sqnorm


class Fidelity:
    """Value, gradient, Hessian-vector product and prox of the data term.

    ``calls`` counts evaluations by kind (``grad``, ``value``, ``hvp``,
    ``prox``) so solvers can be audited against their per-iteration budget.
    ``value_and_grad`` is a single ``grad`` call: the residual ``Ax - y``
    is shared between the two.
    """

    def __init__(self, op, y, lam=1.0, lipschitz=None):
        if lam < 0:
            raise ParameterError(f"lambda must be non-negative, got {lam}")
        y = np.asarray(y, dtype=np.float64)
        if y.shape != op.output_shape:
            raise DimensionError(f"measurement shape {y.shape} does not match operator output {op.output_shape}")
        self.op = op
        self.y = y
        self.lam = float(lam)
        self._lipschitz = lipschitz
        self._aty = None
        self.calls = Counter()

    @property
    def shape(self):
        return self.op.input_shape

    @property
    def lipschitz(self):
        """``L_f = lam * ||A^T A||``, estimated by power iteration on first use."""
        if self._lipschitz is None:
            self._lipschitz = self.lam * op_norm(gram(self.op))
        return self._lipschitz

    def _residual(self, x):
        if np.shape(x) != self.shape:
            raise DimensionError(f"expected input {self.shape}, got {np.shape(x)}")
        return self.op.apply(x) - self.y

    def value(self, x):
        self.calls["value"] += 1
        return 0.5 * self.lam * sqnorm(self._residual(x))

    def grad(self, x):
        self.calls["grad"] += 1
        return self.lam * self.op.adjoint(self._residual(x))

    def value_and_grad(self, x):
        self.calls["grad"] += 1
        r = self._residual(x)
        return 0.5 * self.lam * sqnorm(r), self.lam * self.op.adjoint(r)

    def hvp(self, v):
        """``lam A^T A v``; the Hessian is constant."""
        self.calls["hvp"] += 1
        if np.shape(v) != self.shape:
            raise DimensionError(f"expected input {self.shape}, got {np.shape(v)}")
        return self.lam * self.op.adjoint(self.op.apply(v))

    def _adjoint_y(self):
        if self._aty is None:
            self._aty = self.op.adjoint(self.y)
        return self._aty

    def prox(self, v, s, method="auto", tol=1e-10, maxiter=500):
        """``argmin_u ||u - v||^2 / 2 + s f(u)``.

        Uses frequency-domain division when ``A`` is a circular convolution
        (``method='fft'``), otherwise conjugate gradient (``method='cg'``).
        """
        if s < 0:
            raise ParameterError(f"prox weight must be non-negative, got {s}")
        v = np.asarray(v, dtype=np.float64)
        if v.shape != self.shape:
            raise DimensionError(f"expected input {self.shape}, got {v.shape}")
        self.calls["prox"] += 1
        if s == 0 or self.lam == 0:
            return v.copy()
        w = s * self.lam
        rhs = v + w * self._adjoint_y()
        mult = self.op.fourier_multiplier() if method in ("auto", "fft") else None
        if method == "fft" and mult is None:
            raise ParameterError("fft prox requires a convolution-only operator")
        if mult is not None:
            h, wd = self.shape[1:]
            return np.fft.irfft2(np.fft.rfft2(rhs) / (1.0 + w * np.abs(mult) ** 2), s=(h, wd))
        return self._prox_cg(rhs, w, tol, maxiter)

    def _prox_cg(self, rhs, w, tol, maxiter):
        shape = self.shape
        n = int(np.prod(shape))

        def matvec(u):
            u = u.reshape(shape)
            return (u + w * self.op.adjoint(self.op.apply(u))).ravel()

        sysop = LinearOperator((n, n), matvec=matvec, dtype=np.float64)
        b = rhs.ravel()
        sol, info = cg(sysop, b, x0=b.copy(), rtol=tol, atol=0.0, maxiter=maxiter)
        res = norm(matvec(sol) - b) / max(norm(b), 1e-300)
        if info != 0 and res > tol:
            raise NumericalError(f"conjugate gradient did not converge: relative residual {res:.3e} after {maxiter} iterations")
        return sol.reshape(shape)
