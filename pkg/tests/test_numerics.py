import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradsep.numerics import (
    AdamState, NumericalError, SeededRng, adam_step, as_matrix, finite_diff_check, sym_eig,
)

from conftest import jacobi_eig


def test_as_matrix_rejects_non_finite():
    with pytest.raises(NumericalError):
        as_matrix([[1.0, np.nan]])
    with pytest.raises(NumericalError):
        as_matrix([np.inf])
    with pytest.raises(ValueError):
        as_matrix([1.0, 2.0], ndim=2)


def test_rng_same_seed_same_stream():
    a, b = SeededRng(5), SeededRng(5)
    assert np.array_equal(a.normal(size=100), b.normal(size=100))
    assert np.array_equal(a.uniform(size=10), b.uniform(size=10))
    assert not np.array_equal(SeededRng(5).normal(size=10), SeededRng(6).normal(size=10))


def test_rng_spawn_independent_of_parent_state():
    a = SeededRng(3)
    child1 = a.spawn(2).normal(size=5)
    a.normal(size=1000)
    assert np.array_equal(child1, a.spawn(2).normal(size=5))
    assert not np.array_equal(child1, a.spawn(3).normal(size=5))


def test_rng_negative_seed():
    with pytest.raises(ValueError):
        SeededRng(-1)


def test_box_muller_moments():
    x = SeededRng(11).normal(1.0, 2.0, size=200_000)
    assert abs(x.mean() - 1.0) < 0.02
    assert abs(x.std() - 2.0) < 0.02


def test_adam_zero_grad_is_fixed_point():
    p = SeededRng(0).normal(size=(3, 4))
    state = AdamState(learning_rate=0.1)
    out = p
    for _ in range(5):
        out = adam_step(out, np.zeros_like(p), state)
    assert np.array_equal(out, p)
    assert state.step_count == 5


def test_adam_first_step_hand_value():
    # m_hat = 1, v_hat = 1 after bias correction: step = lr * 1 / (1 + eps)
    out = adam_step(np.array([0.0]), np.array([1.0]), AdamState(learning_rate=0.1))
    assert out[0] == pytest.approx(-0.1 / (1.0 + 1e-8), abs=1e-15)


def test_adam_deterministic_and_shape_checks():
    p, g = np.ones(4), np.arange(4.0)
    s1, s2 = AdamState(), AdamState()
    assert np.array_equal(adam_step(adam_step(p, g, s1), g, s1), adam_step(adam_step(p, g, s2), g, s2))
    with pytest.raises(ValueError):
        adam_step(np.ones(3), np.ones(4), AdamState())
    s = AdamState()
    adam_step(np.ones(3), np.ones(3), s)
    with pytest.raises(ValueError):
        adam_step(np.ones(4), np.ones(4), s)


def test_sym_eig_simple_cases():
    vals, vecs = sym_eig(np.eye(3))
    assert np.allclose(vals, 1.0)
    vals, vecs = sym_eig(np.diag([1.0, 3.0]))
    assert np.allclose(vals, [3.0, 1.0])
    assert np.allclose(np.abs(vecs), [[0, 1], [1, 0]])


def test_sym_eig_errors():
    with pytest.raises(ValueError):
        sym_eig(np.ones((2, 3)))
    with pytest.raises(ValueError):
        sym_eig(np.array([[1.0, 2.0], [2.1, 1.0]]))


def test_sym_eig_seed42_reconstruction_and_jacobi_oracle():
    b = SeededRng(42).normal(size=(8, 8))
    a = b + b.T
    vals, vecs = sym_eig(a)
    assert np.max(np.abs(vecs @ np.diag(vals) @ vecs.T - a)) < 1e-9
    assert np.max(np.abs(vecs.T @ vecs - np.eye(8))) < 1e-9
    assert np.all(np.diff(vals) <= 0)
    ref_vals, ref_vecs = jacobi_eig(a)
    assert np.allclose(vals, ref_vals, atol=1e-10)
    assert np.allclose(np.abs(vecs.T @ ref_vecs), np.eye(8), atol=1e-8)


def test_sym_eig_large():
    b = SeededRng(1).normal(size=(512, 512))
    a = (b + b.T) / 2
    vals, vecs = sym_eig(a)
    scale = np.abs(a).max()
    assert np.max(np.abs(a @ vecs - vecs * vals)) < 1e-9 * scale * 512
    assert np.max(np.abs(vecs.T @ vecs - np.eye(512))) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_sym_eig_property(n, seed):
    b = SeededRng(seed).normal(size=(n, n))
    a = b @ b.T - b.T @ b + np.diag(np.arange(n))
    a = (a + a.T) / 2
    vals, vecs = sym_eig(a)
    assert np.max(np.abs(vecs @ np.diag(vals) @ vecs.T - a)) < 1e-9 * max(1.0, np.abs(a).max())
    assert np.max(np.abs(vecs.T @ vecs - np.eye(n))) < 1e-9


def test_finite_diff_quadratic():
    x = SeededRng(0).normal(size=(4, 3))
    assert finite_diff_check(lambda p: 0.5 * np.sum(p * p), x, x, h=1e-5) < 1e-6


def test_finite_diff_detects_wrong_gradient_and_bad_input():
    x = SeededRng(0).normal(size=5)
    assert finite_diff_check(lambda p: 0.5 * np.sum(p * p), 2 * x, x) > 0.4
    with pytest.raises(ValueError):
        finite_diff_check(lambda p: 0.0, x, x, h=0)
    with pytest.raises(NumericalError):
        finite_diff_check(lambda p: np.nan, x, x)


def test_finite_diff_coords_subset():
    x = SeededRng(0).normal(size=10)
    wrong = x.copy()
    wrong[9] = 100.0
    assert finite_diff_check(lambda p: 0.5 * np.sum(p * p), wrong, x, coords=range(5)) < 1e-6
