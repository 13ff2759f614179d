"""Limited-memory inverse-Hessian products by the two-loop recursion."""
from collections import deque

import numpy as np

from .errors import DimensionError
from .tensor import inner


class SecantStore:
    """Ring buffer of the last ``memory`` curvature pairs ``(s, y, 1/<y, s>)``.

    Pairs with ``<s, y> <= 0`` are rejected and leave the store unchanged.
    Until the first pair is accepted, ``apply`` returns ``initial_scale * g``.
    """

    def __init__(self, memory=20, initial_scale=1.0):
        self.memory = int(memory)
        self.initial_scale = float(initial_scale)
        self.pairs = deque(maxlen=self.memory)
        self.rejected = 0

    def __len__(self):
        return len(self.pairs)

    def clear(self):
        self.pairs.clear()

    def push(self, s, y):
        if np.shape(s) != np.shape(y):
            raise DimensionError(f"secant shapes differ: {np.shape(s)} vs {np.shape(y)}")
        sy = inner(s, y)
        if not sy > 0:
            self.rejected += 1
            return False
        self.pairs.append((np.array(s, copy=True), np.array(y, copy=True), 1.0 / sy, sy / inner(y, y)))
        return True

    def apply(self, grad):
        """Return ``H grad`` for the current inverse-Hessian approximation."""
        if not self.pairs:
            return self.initial_scale * np.asarray(grad)
        q = np.array(grad, dtype=np.float64, copy=True)
        alphas = []
        for s, y, rho, _ in reversed(self.pairs):
            a = rho * inner(s, q)
            q -= a * y
            alphas.append(a)
        r = self.pairs[-1][3] * q
        for (s, y, rho, _), a in zip(self.pairs, reversed(alphas)):
            b = rho * inner(y, r)
            r += (a - b) * s
        return r


def dense_inverse_bfgs(pairs, n):
    """Explicit inverse-BFGS matrix built from ``(s, y)`` pairs, oldest first.

    Starts from ``c I`` with ``c = <s, y> / <y, y>`` of the newest pair, the
    same initial matrix the two-loop recursion uses. Small-dimension
    reference only.
    """
    s_last, y_last = pairs[-1]
    H = (s_last @ y_last) / (y_last @ y_last) * np.eye(n)
    for s, y in pairs:
        rho = 1.0 / (y @ s)
        V = np.eye(n) - rho * np.outer(y, s)
        H = V.T @ H @ V + rho * np.outer(s, s)
    return H
