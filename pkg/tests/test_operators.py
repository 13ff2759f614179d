import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pnpqn.errors import DimensionError, ParameterError
from pnpqn.operators import (
    BUILTIN_KERNELS, CircularConvolution, Composition, Downsample, Identity, MatrixOp, builtin_kernel,
    circ_conv, circ_conv_adjoint, circ_conv_direct, delta_kernel, downsample, gram, kernel_transfer, load_kernel,
    make_gaussian_kernel, make_uniform_kernel, op_norm, save_kernel, scale_to_opnorm, upsample_zerofill,
)
from pnpqn.tensor import inner, make_rng, norm


def _adjoint_gap(op, seed=0):
    rng = make_rng(seed)
    u = rng.standard_normal(op.input_shape)
    v = rng.standard_normal(op.output_shape)
    return abs(inner(op.apply(u), v) - inner(u, op.adjoint(v))) / (norm(u) * norm(v))


@given(st.integers(0, 10_000), st.sampled_from([1, 3, 5]), st.sampled_from([(1, 8, 8), (3, 9, 7)]))
def test_convolution_matches_direct(seed, ksize, shape):
    rng = make_rng(seed)
    k = rng.uniform(size=(ksize, ksize))
    x = rng.standard_normal(shape)
    got = CircularConvolution(k, shape).apply(x)
    assert np.allclose(got, circ_conv_direct(x, k), atol=1e-12)


@given(st.integers(0, 10_000), st.sampled_from([2, 3]))
def test_adjoint_identities(seed, s):
    shape = (2, 12, 11)
    k = make_rng(seed).uniform(size=(5, 5))
    conv = CircularConvolution(k, shape)
    for op in (conv, Downsample(s, shape), Composition([conv, Downsample(s, shape)]), conv.T, 2.5 * conv):
        assert _adjoint_gap(op, seed) < 1e-12


def test_downsample_shape_and_zero_fill():
    x = np.arange(2 * 7 * 9, dtype=float).reshape(2, 7, 9)
    y = downsample(x, 2)
    assert y.shape == (2, 3, 4)
    assert np.array_equal(y, x[:, 0:6:2, 0:8:2])
    up = upsample_zerofill(y, 2, x.shape)
    assert up.shape == x.shape and up.sum() == y.sum()
    assert up[0, 1, 1] == 0.0


def test_delta_kernel_is_identity(rng):
    x = rng.standard_normal((3, 6, 6))
    assert np.allclose(circ_conv(x, delta_kernel(3)), x)


def test_helpers_accept_2d(rng):
    x = rng.standard_normal((6, 6))
    k = make_gaussian_kernel(3, 0.8)
    assert circ_conv(x, k).shape == (6, 6)
    assert np.isclose(inner(circ_conv(x, k), x), inner(x, circ_conv_adjoint(x, k)))


def test_kernel_validation():
    with pytest.raises(ParameterError):
        CircularConvolution(np.ones((2, 2)), (1, 8, 8))
    with pytest.raises(ParameterError):
        CircularConvolution(np.ones((9, 9)), (1, 8, 8))
    with pytest.raises(ParameterError):
        CircularConvolution(np.array([[np.inf]]), (1, 8, 8))
    with pytest.raises(ParameterError):
        make_gaussian_kernel(4, 1.0)


def test_shape_checks():
    op = CircularConvolution(delta_kernel(), (1, 4, 4))
    with pytest.raises(DimensionError):
        op.apply(np.zeros((1, 4, 5)))
    with pytest.raises(DimensionError):
        Composition([op, Downsample(2, (1, 8, 8))])


def test_op_norm_matches_fourier_eigenvalue():
    k = make_gaussian_kernel(25, 1.6)
    conv = CircularConvolution(k, (3, 32, 32))
    exact = np.max(np.abs(kernel_transfer(k, 32, 32)) ** 2)
    assert op_norm(gram(conv)) == pytest.approx(exact, rel=1e-6)


def test_op_norm_dense_oracle():
    rng = make_rng(3)
    mat = rng.standard_normal((6, 4))
    assert op_norm(gram(MatrixOp(mat)), iters=2000, tol=1e-14) == pytest.approx(np.linalg.norm(mat, 2) ** 2, rel=1e-8)


def test_op_norm_zero_operator():
    assert op_norm(gram(0.0 * Identity((1, 3, 3)))) == 0.0


def test_op_norm_requires_square():
    with pytest.raises(DimensionError):
        op_norm(Downsample(2, (1, 4, 4)))


def test_scale_to_opnorm():
    op = scale_to_opnorm(CircularConvolution(make_uniform_kernel(9), (1, 32, 32)))
    assert np.max(np.abs(op.fourier_multiplier()) ** 2) == pytest.approx(0.96, rel=1e-6)


def test_fourier_multiplier_propagation():
    conv = CircularConvolution(make_gaussian_kernel(3, 1.0), (1, 8, 8))
    assert Composition([conv, conv]).fourier_multiplier() is not None
    assert Composition([conv, Downsample(2, (1, 8, 8))]).fourier_multiplier() is None
    assert np.allclose(conv.T.fourier_multiplier(), np.conj(conv.fourier_multiplier()))


def test_builtin_kernels_normalized():
    for name in BUILTIN_KERNELS:
        k = builtin_kernel(name)
        assert k.sum() == pytest.approx(1.0)
        assert k.shape[0] % 2 == 1
    assert builtin_kernel("gaussian25_1.6").shape == (25, 25)
    with pytest.raises(ParameterError):
        builtin_kernel("nope")


def test_kernel_file_round_trip(tmp_path):
    k = make_gaussian_kernel(5, 1.2)
    p = tmp_path / "k.txt"
    save_kernel(p, k)
    assert np.array_equal(load_kernel(p, normalize=False), k)
    p.write_text("2 2\n1 2\n")
    with pytest.raises(ParameterError):
        load_kernel(p)
