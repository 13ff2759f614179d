import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pnpqn.errors import DimensionError
from pnpqn.lbfgs import SecantStore, dense_inverse_bfgs


def _spd(rng, n):
    b = rng.standard_normal((n, n))
    return b @ b.T + 0.5 * n * np.eye(n)


@given(st.integers(0, 10_000), st.integers(1, 25), st.integers(2, 12))
def test_two_loop_matches_dense(seed, k, n):
    rng = np.random.default_rng(seed)
    hess = _spd(rng, n)
    m = 20
    store = SecantStore(memory=m)
    pairs = []
    for _ in range(k):
        s = rng.standard_normal(n)
        store.push(s, hess @ s)
        pairs.append((s, hess @ s))
    g = rng.standard_normal(n)
    ref = dense_inverse_bfgs(pairs[-m:], n) @ g
    assert np.allclose(store.apply(g), ref, rtol=1e-10, atol=1e-12 * np.linalg.norm(ref))
    assert len(store) == min(k, m)


def test_secant_equation_for_newest_pair():
    rng = np.random.default_rng(1)
    hess = _spd(rng, 6)
    store = SecantStore(memory=5)
    for _ in range(4):
        s = rng.standard_normal(6)
        store.push(s, hess @ s)
    assert np.allclose(store.apply(hess @ s), s)


def test_curvature_safeguard():
    store = SecantStore(memory=3)
    assert not store.push(np.array([1.0, 0.0]), np.array([-1.0, 0.0]))
    assert not store.push(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    assert store.rejected == 2 and len(store) == 0
    assert store.push(np.array([1.0, 0.0]), np.array([2.0, 0.0]))


def test_empty_store_scales_gradient():
    store = SecantStore(initial_scale=0.25)
    g = np.array([4.0, -8.0])
    assert np.array_equal(store.apply(g), 0.25 * g)


@given(st.integers(0, 10_000))
def test_direction_is_descent(seed):
    rng = np.random.default_rng(seed)
    store = SecantStore(memory=4)
    for _ in range(6):
        s, y = rng.standard_normal(5), rng.standard_normal(5)
        store.push(s, y)
    g = rng.standard_normal(5)
    assert np.dot(g, store.apply(g)) > 0


def test_clear_and_shape_check():
    store = SecantStore()
    store.push(np.ones(3), np.ones(3))
    store.clear()
    assert len(store) == 0
    with pytest.raises(DimensionError):
        store.push(np.ones(3), np.ones(4))


def test_image_shaped_pairs():
    rng = np.random.default_rng(2)
    store = SecantStore()
    s = rng.standard_normal((2, 3, 3))
    store.push(s, 2.0 * s)
    g = rng.standard_normal((2, 3, 3))
    assert store.apply(g).shape == g.shape
    assert np.allclose(store.apply(2.0 * s), s)
