"""Linear forward operators for deblurring and super-resolution.

Every operator acts on ``(C, H, W)`` arrays and provides ``apply`` and
``adjoint``. Convolutions are circular and evaluated in the frequency
domain; the kernel center is index ``(h // 2, w // 2)``.
"""
import logging
import math
from pathlib import Path

import numpy as np

from .errors import DimensionError, ParameterError
from .tensor import inner, make_rng, norm

logger = logging.getLogger(__name__)

DEBLUR_OPNORM = 0.96


def _shape3(shape):
    shape = tuple(int(s) for s in shape)
    if len(shape) == 2:
        shape = (1,) + shape
    if len(shape) != 3:
        raise DimensionError(f"expected (C, H, W) shape, got {shape}")
    return shape


class LinearOp:
    """Base class. Subclasses implement ``_apply`` and ``_adjoint``."""

    kind = "abstract"

    def __init__(self, input_shape, output_shape):
        self.input_shape = _shape3(input_shape)
        self.output_shape = _shape3(output_shape)

    def apply(self, x):
        if np.shape(x) != self.input_shape:
            raise DimensionError(f"{self.kind}: expected input {self.input_shape}, got {np.shape(x)}")
        return self._apply(x)

    def adjoint(self, u):
        if np.shape(u) != self.output_shape:
            raise DimensionError(f"{self.kind}: expected adjoint input {self.output_shape}, got {np.shape(u)}")
        return self._adjoint(u)

    __call__ = apply

    @property
    def T(self):
        return Adjoint(self)

    def __matmul__(self, other):
        if not isinstance(other, LinearOp):
            return NotImplemented
        return Composition([other, self])

    def __mul__(self, c):
        return Scaled(self, float(c))

    __rmul__ = __mul__

    def fourier_multiplier(self):
        """Real-FFT transfer function of shape (H, W//2+1) if the operator is a
        (scaled) circular convolution, else ``None``."""
        return None

    def __repr__(self):
        return f"<{type(self).__name__} {self.input_shape} -> {self.output_shape}>"


class Identity(LinearOp):
    kind = "identity"

    def __init__(self, shape):
        super().__init__(shape, shape)

    def _apply(self, x):
        return np.array(x, dtype=np.float64, copy=True)

    _adjoint = _apply

    def fourier_multiplier(self):
        _, h, w = self.input_shape
        return np.ones((h, w // 2 + 1), dtype=np.complex128)


class Adjoint(LinearOp):
    kind = "adjoint"

    def __init__(self, op):
        super().__init__(op.output_shape, op.input_shape)
        self.op = op

    def _apply(self, x):
        return self.op.adjoint(x)

    def _adjoint(self, u):
        return self.op.apply(u)

    @property
    def T(self):
        return self.op

    def fourier_multiplier(self):
        m = self.op.fourier_multiplier()
        return None if m is None else np.conj(m)


class Scaled(LinearOp):
    kind = "scaled"

    def __init__(self, op, scale):
        super().__init__(op.input_shape, op.output_shape)
        self.op = op
        self.scale = float(scale)

    def _apply(self, x):
        return self.scale * self.op.apply(x)

    def _adjoint(self, u):
        return self.scale * self.op.adjoint(u)

    def fourier_multiplier(self):
        m = self.op.fourier_multiplier()
        return None if m is None else self.scale * m


class Composition(LinearOp):
    """``ops`` listed in application order: ``Composition([K, S])`` is ``S K``."""

    kind = "composition"

    def __init__(self, ops):
        ops = list(ops)
        if not ops:
            raise ParameterError("composition needs at least one operator")
        for a, b in zip(ops, ops[1:]):
            if a.output_shape != b.input_shape:
                raise DimensionError(f"cannot compose {a!r} with {b!r}")
        super().__init__(ops[0].input_shape, ops[-1].output_shape)
        self.ops = ops

    def _apply(self, x):
        for op in self.ops:
            x = op.apply(x)
        return x

    def _adjoint(self, u):
        for op in reversed(self.ops):
            u = op.adjoint(u)
        return u

    def fourier_multiplier(self):
        out = None
        for op in self.ops:
            m = op.fourier_multiplier()
            if m is None:
                return None
            out = m if out is None else out * m
        return out


class MatrixOp(LinearOp):
    """Dense matrix acting on the flattened input; for small test problems."""

    kind = "matrix"

    def __init__(self, matrix, input_shape=None):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise DimensionError("matrix must be 2-D")
        m, n = matrix.shape
        input_shape = (1, 1, n) if input_shape is None else input_shape
        super().__init__(input_shape, (1, 1, m))
        if int(np.prod(self.input_shape)) != n:
            raise DimensionError(f"input shape {self.input_shape} does not have {n} elements")
        self.matrix = matrix

    def _apply(self, x):
        return (self.matrix @ np.ravel(x)).reshape(self.output_shape)

    def _adjoint(self, u):
        return (self.matrix.T @ np.ravel(u)).reshape(self.input_shape)


def check_kernel(k, image_shape=None):
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2:
        raise ParameterError(f"kernel must be 2-D, got shape {k.shape}")
    kh, kw = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ParameterError(f"kernel dimensions must be odd, got {k.shape}")
    if not np.all(np.isfinite(k)):
        raise ParameterError("kernel contains non-finite weights")
    if image_shape is not None:
        h, w = image_shape[-2:]
        if kh > h or kw > w:
            raise ParameterError(f"kernel {k.shape} larger than image {h}x{w}")
    return k


def kernel_transfer(k, h, w):
    """Real-FFT transfer function of the centered kernel on an ``h x w`` torus."""
    k = check_kernel(k, (h, w))
    kh, kw = k.shape
    pad = np.zeros((h, w))
    pad[:kh, :kw] = k
    pad = np.roll(pad, (-(kh // 2), -(kw // 2)), axis=(0, 1))
    return np.fft.rfft2(pad)


class CircularConvolution(LinearOp):
    kind = "circular_convolution"

    def __init__(self, kernel, shape):
        shape = _shape3(shape)
        super().__init__(shape, shape)
        self.kernel = check_kernel(kernel, shape)
        self._transfer = kernel_transfer(self.kernel, shape[1], shape[2])

    def _filter(self, x, transfer):
        h, w = self.input_shape[1:]
        return np.fft.irfft2(np.fft.rfft2(x) * transfer, s=(h, w))

    def _apply(self, x):
        return self._filter(x, self._transfer)

    def _adjoint(self, u):
        return self._filter(u, np.conj(self._transfer))

    def fourier_multiplier(self):
        return self._transfer


class Downsample(LinearOp):
    """Keep pixels whose row and column indices are multiples of ``s``."""

    kind = "downsample"

    def __init__(self, s, shape):
        s = int(s)
        if s < 1:
            raise ParameterError(f"downsampling factor must be >= 1, got {s}")
        c, h, w = _shape3(shape)
        super().__init__((c, h, w), (c, h // s, w // s))
        self.s = s

    def _apply(self, x):
        s = self.s
        _, ho, wo = self.output_shape
        return np.array(x[:, : ho * s : s, : wo * s : s], dtype=np.float64)

    def _adjoint(self, u):
        s = self.s
        _, ho, wo = self.output_shape
        out = np.zeros(self.input_shape)
        out[:, : ho * s : s, : wo * s : s] = u
        return out

    def fourier_multiplier(self):
        return np.ones((self.input_shape[1], self.input_shape[2] // 2 + 1), dtype=np.complex128) if self.s == 1 else None


def gram(op):
    """The normal operator ``A^T A``."""
    return Composition([op, op.T])


def _as3(x):
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(_shape3(x.shape))


def circ_conv(x, k):
    x3 = _as3(x)
    return CircularConvolution(k, x3.shape).apply(x3).reshape(np.shape(x))


def circ_conv_adjoint(x, k):
    x3 = _as3(x)
    return CircularConvolution(k, x3.shape).adjoint(x3).reshape(np.shape(x))


def circ_conv_direct(x, k):
    """Spatial shift-and-add circular convolution; reference for the FFT path."""
    x = np.asarray(x, dtype=np.float64)
    k = check_kernel(k, x.shape)
    kh, kw = k.shape
    ch, cw = kh // 2, kw // 2
    out = np.zeros_like(x)
    for a in range(kh):
        for b in range(kw):
            if k[a, b] != 0.0:
                out += k[a, b] * np.roll(x, (a - ch, b - cw), axis=(-2, -1))
    return out


def downsample(x, s):
    return Downsample(s, np.shape(x)).apply(x)


def upsample_zerofill(u, s, shape):
    return Downsample(s, shape).adjoint(u)


def op_norm(op, iters=200, tol=1e-8, rng=None):
    """Power-iteration estimate of the largest eigenvalue of a square
    symmetric positive semidefinite operator such as ``gram(A)``."""
    if op.input_shape != op.output_shape:
        raise DimensionError("op_norm needs a square operator; pass gram(A)")
    if iters < 1:
        raise ParameterError("iters must be >= 1")
    rng = make_rng(0) if rng is None else rng
    x = rng.standard_normal(op.input_shape)
    x /= norm(x)
    rq_prev = None
    rq = 0.0
    restarts = 0
    for it in range(iters):
        y = op.apply(x)
        ny = norm(y)
        if ny == 0.0:
            # start vector in the null space: draw again, give up on a zero operator
            restarts += 1
            if restarts > 5:
                return 0.0
            x = rng.standard_normal(op.input_shape)
            x /= norm(x)
            rq_prev = None
            continue
        rq = inner(x, y)
        if rq_prev is not None and abs(rq - rq_prev) < tol:
            logger.debug("power iteration converged after %d iterations", it + 1)
            break
        rq_prev = rq
        x = y / ny
    return rq


def scale_to_opnorm(op, target=DEBLUR_OPNORM, **kwargs):
    """Rescale ``op`` by a scalar so that ``||A^T A|| = target``."""
    est = op_norm(gram(op), **kwargs)
    if est <= 0:
        raise ParameterError("cannot rescale an operator with zero norm")
    return Scaled(op, math.sqrt(target / est))


# -- kernels ---------------------------------------------------------------

def make_gaussian_kernel(size, sigma_blur):
    size = int(size)
    if size % 2 == 0 or size < 1:
        raise ParameterError(f"kernel size must be odd and positive, got {size}")
    if sigma_blur <= 0:
        raise ParameterError("sigma_blur must be positive")
    r = np.arange(size) - size // 2
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * sigma_blur ** 2))
    return g / g.sum()


def make_uniform_kernel(size):
    size = int(size)
    if size % 2 == 0 or size < 1:
        raise ParameterError(f"kernel size must be odd and positive, got {size}")
    return np.full((size, size), 1.0 / (size * size))


def delta_kernel(size=1):
    k = np.zeros((size, size))
    k[size // 2, size // 2] = 1.0
    return check_kernel(k)


BUILTIN_KERNELS = {
    "uniform9": ("deblur", lambda: make_uniform_kernel(9)),
    "gaussian25_1.6": ("deblur", lambda: make_gaussian_kernel(25, 1.6)),
    "sr_gaussian25_0.7": ("sr", lambda: make_gaussian_kernel(25, 0.7)),
    "sr_gaussian25_1.2": ("sr", lambda: make_gaussian_kernel(25, 1.2)),
    "sr_gaussian25_1.6": ("sr", lambda: make_gaussian_kernel(25, 1.6)),
    "sr_gaussian25_2.0": ("sr", lambda: make_gaussian_kernel(25, 2.0)),
    "delta": ("test", lambda: delta_kernel(1)),
}


def builtin_kernel(name):
    try:
        return BUILTIN_KERNELS[name][1]()
    except KeyError:
        raise ParameterError(f"unknown builtin kernel {name!r}; known: {sorted(BUILTIN_KERNELS)}") from None


def load_kernel(path, normalize=True):
    """Read the plain-text kernel format: a ``H W`` header, then H rows."""
    lines = [ln.split() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines or len(lines[0]) != 2:
        raise ParameterError(f"{path}: first line must be 'H W'")
    h, w = int(lines[0][0]), int(lines[0][1])
    rows = lines[1:]
    if len(rows) != h or any(len(r) != w for r in rows):
        raise ParameterError(f"{path}: expected {h} rows of {w} values")
    k = check_kernel(np.array(rows, dtype=np.float64))
    if normalize:
        s = k.sum()
        if s == 0:
            raise ParameterError(f"{path}: kernel sums to zero, cannot normalize")
        k = k / s
    return k


def save_kernel(path, k):
    k = check_kernel(k)
    lines = [f"{k.shape[0]} {k.shape[1]}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in k]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
