import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pnpqn.errors import DimensionError, ParameterError
from pnpqn.fidelity import Fidelity
from pnpqn.operators import CircularConvolution, Composition, Downsample, make_gaussian_kernel, scale_to_opnorm
from pnpqn.tensor import inner, make_rng, norm


def _deblur(seed=0, shape=(2, 10, 10), lam=1.0):
    rng = make_rng(seed)
    op = scale_to_opnorm(CircularConvolution(make_gaussian_kernel(5, 1.0), shape))
    return Fidelity(op, rng.standard_normal(shape), lam=lam), rng


def _sr(seed=0, shape=(1, 12, 12)):
    rng = make_rng(seed)
    op = Composition([CircularConvolution(make_gaussian_kernel(5, 1.0), shape), Downsample(2, shape)])
    return Fidelity(op, rng.standard_normal(op.output_shape)), rng


@given(st.integers(0, 1000), st.floats(0.1, 4.0))
def test_gradient_finite_difference(seed, lam):
    fid, rng = _deblur(seed, lam=lam)
    x, d = rng.standard_normal(fid.shape), rng.standard_normal(fid.shape)
    h = 1e-6
    fd = (fid.value(x + h * d) - fid.value(x - h * d)) / (2 * h)
    assert fd == pytest.approx(inner(fid.grad(x), d), rel=1e-6, abs=1e-8)


def test_value_and_grad_consistent():
    fid, rng = _deblur()
    x = rng.standard_normal(fid.shape)
    v, g = fid.value_and_grad(x)
    assert v == fid.value(x) and np.array_equal(g, fid.grad(x))


def test_hvp_is_gradient_difference():
    fid, rng = _deblur(lam=2.0)
    x, v = rng.standard_normal(fid.shape), rng.standard_normal(fid.shape)
    assert np.allclose(fid.hvp(v), fid.grad(x + v) - fid.grad(x), atol=1e-12)


@pytest.mark.parametrize("builder", [_deblur, _sr])
def test_prox_optimality(builder):
    fid, rng = builder(3)
    v = rng.standard_normal(fid.shape)
    s = 0.7
    u = fid.prox(v, s, method="cg", tol=1e-13, maxiter=5000)
    # stationarity: u - v + s grad f(u) = 0
    assert norm(u - v + s * fid.grad(u)) <= 1e-9 * max(norm(v), 1.0)


def test_prox_fft_matches_cg():
    fid, rng = _deblur(4)
    v = rng.standard_normal(fid.shape)
    a = fid.prox(v, 1.3, method="fft")
    b = fid.prox(v, 1.3, method="cg", tol=1e-13, maxiter=5000)
    assert norm(a - b) <= 1e-9 * norm(a)
    assert np.array_equal(fid.prox(v, 1.3), a)


def test_prox_edge_cases():
    fid, rng = _sr()
    v = rng.standard_normal(fid.shape)
    assert np.array_equal(fid.prox(v, 0.0), v)
    with pytest.raises(ParameterError):
        fid.prox(v, -1.0)
    with pytest.raises(ParameterError):
        fid.prox(v, 1.0, method="fft")
    with pytest.raises(DimensionError):
        fid.prox(v[:, :-1], 1.0)


def test_lipschitz_lazy_and_override():
    fid, _ = _deblur(lam=2.0)
    assert fid.lipschitz == pytest.approx(1.92, rel=1e-6)
    fid2 = Fidelity(fid.op, fid.y, lipschitz=5.0)
    assert fid2.lipschitz == 5.0


def test_call_counters():
    fid, rng = _deblur()
    x = rng.standard_normal(fid.shape)
    fid.value_and_grad(x)
    fid.hvp(x)
    fid.prox(x, 1.0)
    assert fid.calls == {"grad": 1, "hvp": 1, "prox": 1}


def test_construction_checks():
    fid, _ = _deblur()
    with pytest.raises(DimensionError):
        Fidelity(fid.op, np.zeros((1, 3, 3)))
    with pytest.raises(ParameterError):
        Fidelity(fid.op, fid.y, lam=-1)
