"""Dense numerics shared by the victim models and the attacks.

Matrices are plain float64 numpy arrays. The helpers here add the contracts
the rest of the package relies on: finiteness checks on external input, a
reproducible RNG, Adam, a checked symmetric eigensolver and a central
finite-difference gradient checker.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

SYMMETRY_TOL = 1e-10


class NumericalError(ArithmeticError):
    """Raised when a computation produces or receives non-finite values."""


def as_matrix(data, ndim: int | None = None) -> np.ndarray:
    """Convert external input to a float64 array, rejecting NaN/Inf."""
    arr = np.array(data, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericalError("non-finite entries in input")
    return arr


class SeededRng:
    """Reproducible random stream.

    Backed by PCG64, whose raw output is platform independent. Gaussian
    draws use Box-Muller on the uniform stream instead of numpy's ziggurat so
    that the sample sequence depends only on the uniform generator.
    """

    algorithm = "pcg64+box-muller"

    def __init__(self, seed: int):
        self.seed = int(seed)
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, index: int) -> "SeededRng":
        """Child stream for run ``index``, independent of the parent state."""
        mask = 0xFFFFFFFFFFFFFFFF
        ss = np.random.SeedSequence([self.seed & mask, int(index) & mask])
        return SeededRng(int(ss.generate_state(1, dtype=np.uint64)[0]))

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return low + (high - low) * self._gen.random(size)

    def normal(self, loc=0.0, scale=1.0, size=None) -> np.ndarray:
        shape = () if size is None else (size,) if np.isscalar(size) else tuple(size)
        count = int(np.prod(shape, dtype=np.int64))
        pairs = (count + 1) // 2
        u1 = 1.0 - self._gen.random(pairs)  # (0, 1], keeps log finite
        u2 = self._gen.random(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * pairs)
        z[0::2] = radius * np.cos(2.0 * np.pi * u2)
        z[1::2] = radius * np.sin(2.0 * np.pi * u2)
        out = loc + scale * z[:count].reshape(shape)
        return out if shape else float(out)

    def laplace(self, scale=1.0, size=None) -> np.ndarray:
        u = self._gen.random(size) - 0.5
        return -scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: np.ndarray | None = None
    second_moment: np.ndarray | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState) -> np.ndarray:
    """One bias-corrected Adam descent step; mutates ``state``."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise ValueError(f"shape mismatch: params {params.shape} vs grad {grad.shape}")
    if state.first_moment is None:
        state.first_moment = np.zeros_like(params)
        state.second_moment = np.zeros_like(params)
    elif state.first_moment.shape != params.shape:
        raise ValueError(f"shape mismatch: state {state.first_moment.shape} vs params {params.shape}")
    state.step_count += 1
    t = state.step_count
    state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    state.second_moment = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad * grad
    m_hat = state.first_moment / (1.0 - state.beta1 ** t)
    v_hat = state.second_moment / (1.0 - state.beta2 ** t)
    return params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)


def sym_eig(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix.

    Returns eigenvalues in descending order and the matching orthonormal
    eigenvectors as columns.
    """
    a = as_matrix(a, ndim=2)
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"matrix must be square, got {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if a.size and np.max(np.abs(a - a.T)) > SYMMETRY_TOL * scale:
        raise ValueError("matrix is not symmetric")
    vals, vecs = np.linalg.eigh(0.5 * (a + a.T))
    order = np.argsort(vals)[::-1]
    return vals[order], vecs[:, order]


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    analytic_grad: np.ndarray,
    point: np.ndarray,
    h: float = 1e-5,
    coords: Sequence[int] | None = None,
) -> float:
    """Max relative error between central differences and ``analytic_grad``.

    ``coords`` restricts the check to a subset of flat indices, which keeps
    the check affordable on large tensors.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    point = np.array(point, dtype=np.float64)
    analytic = np.asarray(analytic_grad, dtype=np.float64).ravel()
    flat = point.ravel()
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = f(point)
        flat[i] = orig - h
        fm = f(point)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"non-finite objective at coordinate {i}")
        numeric = (fp - fm) / (2.0 * h)
        worst = max(worst, abs(numeric - analytic[i]) / (abs(analytic[i]) + 1e-8))
    return worst
