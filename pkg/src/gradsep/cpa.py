"""Cocktail-party attack: ICA on the gradient of a fully-connected layer.

The weight gradient of an FC layer, ``G = (1/n) * Delta^T X``, is a set of
``m`` linear mixtures of the ``n`` layer inputs. We center and whiten ``G``
down to ``n`` signals, then learn an ``n x n`` unmixing matrix ``U`` by
gradient ascent on a non-Gaussianity contrast plus source priors, with a
penalty on pairwise cosine similarity between rows of ``U``.

Rows of ``U`` are used normalised, so each recovered whitened signal has
unit variance and the objective is invariant to row scale.
"""

from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import AdamState, NumericalError, SeededRng, adam_step, as_matrix, sym_eig

RANK_TOL = 1e-12
REC_MAGIC = b"GSREC1"


class RankDeficiencyError(ValueError):
    pass


@dataclass
class MixedSignalMatrix:
    g: np.ndarray
    source_layer: str = "fc1"
    shape_hint: tuple[int, int, int] | None = None

    def __post_init__(self):
        self.g = as_matrix(self.g, ndim=2)
        if self.shape_hint is not None:
            self.shape_hint = tuple(int(s) for s in self.shape_hint)
            if int(np.prod(self.shape_hint)) != self.g.shape[1]:
                raise ValueError(f"shape hint {self.shape_hint} does not cover {self.g.shape[1]} dims")

    @classmethod
    def from_bundle(cls, bundle, layer: str = "fc1", shape_hint=None) -> "MixedSignalMatrix":
        return cls(bundle.grads[f"{layer}.weight"], layer, shape_hint)


@dataclass
class WhiteningTransform:
    row_means: np.ndarray
    projection: np.ndarray
    eigenvalues: np.ndarray

    @property
    def retained(self) -> int:
        return self.projection.shape[0]

    def apply(self, g: np.ndarray) -> np.ndarray:
        return self.projection @ (g - self.row_means[:, None])


@dataclass
class AttackConfig:
    """Hyper-parameters of one CPA run.

    ``lambda_ne`` weights the non-Gaussianity term (0 removes it for
    ablations). ``contrast`` picks how the log-cosh statistic enters the
    objective: ``"squared"`` uses its squared deviation from the Gaussian
    value, ``"raw"`` the statistic itself.
    """

    mode: str = "image"
    lambda_tv: float = 0.0
    lambda_mi: float = 1.0
    lambda_sp: float = 0.0
    lambda_sr: float = 0.0
    lambda_ne: float = 1.0
    temperature_t: float = 1.0
    negentropy_a: float = 1.0
    contrast: str = "squared"
    iters: int = 25000
    lr: float = 1e-3
    seed: int = 0
    log_every: int = 100

    def validate(self, shape_hint=None) -> None:
        if self.mode not in ("image", "embedding"):
            raise ValueError(f"unknown mode {self.mode!r}")
        for name in ("lambda_tv", "lambda_mi", "lambda_sp", "lambda_sr", "lambda_ne"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.temperature_t <= 0:
            raise ValueError("temperature_t must be positive")
        if not 1.0 <= self.negentropy_a <= 2.0:
            raise ValueError("negentropy_a must lie in [1, 2]")
        if self.contrast not in ("squared", "raw"):
            raise ValueError(f"unknown contrast {self.contrast!r}")
        if self.iters < 0 or self.lr <= 0:
            raise ValueError("iters must be >= 0 and lr > 0")
        if self.mode == "image" and shape_hint is None:
            raise ValueError("image mode needs a (channels, height, width) shape hint")
        if self.mode == "embedding" and self.lambda_tv != 0:
            raise ValueError("lambda_tv is not defined for embeddings")


@dataclass
class RecoveredBatch:
    sources: np.ndarray
    sign_flags: np.ndarray
    objective_trace: list[float]
    unmixing: np.ndarray
    whitening: WhiteningTransform = field(repr=False)


# -- whitening --------------------------------------------------------------

def center_whiten(g: MixedSignalMatrix | np.ndarray, n: int) -> tuple[np.ndarray, WhiteningTransform]:
    """Center each row, then project onto the top-``n`` principal directions.

    The result ``gw`` satisfies ``gw @ gw.T / d == I_n``.
    """
    mat = g.g if isinstance(g, MixedSignalMatrix) else as_matrix(g, ndim=2)
    m, d = mat.shape
    if not 1 <= n <= m:
        raise ValueError(f"need 1 <= n <= m, got n={n}, m={m}")
    means = mat.mean(axis=1)
    gc = mat - means[:, None]
    vals, vecs = sym_eig(gc @ gc.T / d)
    top = vals[:n]
    # relative to the leading eigenvalue, and never below the roundoff that
    # centering leaves behind on rows with large offsets
    roundoff = (64 * np.finfo(float).eps) ** 2 * float(np.max(np.mean(mat * mat, axis=1)))
    floor = max(RANK_TOL * vals[0], roundoff, np.finfo(float).tiny)
    deficient = int(np.sum(top <= floor))
    if deficient:
        raise RankDeficiencyError(
            f"gradient matrix has rank below n={n}: {deficient} of the top {n} eigenvalues are negligible"
        )
    basis = vecs[:, :n]
    # fix each eigenvector's sign by its largest entry so row order of G cannot flip it
    pivot = basis[np.argmax(np.abs(basis), axis=0), np.arange(n)]
    basis = basis * np.where(pivot < 0, -1.0, 1.0)
    projection = basis.T / np.sqrt(top)[:, None]
    return projection @ gc, WhiteningTransform(means, projection, top)


def suggest_batch_size(g: MixedSignalMatrix | np.ndarray) -> int:
    """Guess the number of mixed sources from the largest eigenvalue gap."""
    mat = g.g if isinstance(g, MixedSignalMatrix) else as_matrix(g, ndim=2)
    gc = mat - mat.mean(axis=1, keepdims=True)
    vals, _ = sym_eig(gc @ gc.T / mat.shape[1])
    vals = np.maximum(vals, np.finfo(float).tiny)
    limit = max(1, mat.shape[0] // 2)
    ratios = vals[:limit] / vals[1:limit + 1]
    return int(np.argmax(ratios)) + 1


# -- contrast and priors ----------------------------------------------------

def _logcosh(t):
    a = np.abs(t)
    return a + np.log1p(np.exp(-2.0 * a)) - math.log(2.0)


def negentropy(x, a: float = 1.0) -> float:
    """Mean of ``log(cosh(a x)^2) / a^2`` over the elements of ``x``."""
    if a <= 0:
        raise ValueError("a must be positive")
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(2.0 * _logcosh(a * x)) / (a * a))


@lru_cache(maxsize=None)
def gaussian_negentropy(a: float = 1.0) -> float:
    """Expected value of :func:`negentropy` for a standard normal variable."""
    nodes, weights = np.polynomial.hermite_e.hermegauss(120)
    return float(np.sum(weights * 2.0 * _logcosh(a * nodes)) / (a * a) / math.sqrt(2.0 * math.pi))


def _cosine_matrix(u):
    norms = np.linalg.norm(u, axis=1)
    if np.any(norms == 0):
        raise ValueError("unmixing matrix has a zero row")
    ub = u / norms[:, None]
    return ub @ ub.T, ub, norms


def mi_regularizer(u, t: float = 1.0) -> float:
    """Mean over ordered pairs ``i != j`` of ``exp(t * |cos(u_i, u_j)|)``."""
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    n = u.shape[0]
    cos, _, _ = _cosine_matrix(u)
    if n == 1:
        return 0.0
    off = ~np.eye(n, dtype=bool)
    return float(np.mean(np.exp(t * np.abs(cos[off]))))


def _tv_parts(x, shape):
    img = np.asarray(x, dtype=np.float64).reshape((-1,) + tuple(shape))
    dv = img[..., 1:, :] - img[..., :-1, :]
    dh = img[..., :, 1:] - img[..., :, :-1]
    return img, dv, dh


def tv_prior(x, shape) -> float:
    """Anisotropic total variation: mean vertical plus mean horizontal |difference|."""
    x = np.asarray(x, dtype=np.float64)
    if x.size != int(np.prod(shape)):
        raise ValueError(f"vector of length {x.size} does not match shape {tuple(shape)}")
    _, dv, dh = _tv_parts(x, shape)
    return float((np.abs(dv).mean() if dv.size else 0.0) + (np.abs(dh).mean() if dh.size else 0.0))


def tv_rows(x, shape) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise TV of an ``n x (c h w)`` matrix and its gradient."""
    n = x.shape[0]
    img, dv, dh = _tv_parts(x, shape)
    c, h, w = shape
    nv, nh = c * (h - 1) * w, c * h * (w - 1)
    values = np.zeros(n)
    grad = np.zeros_like(img)
    if nv:
        sv = np.sign(dv)
        values += (sv * dv).reshape(n, -1).sum(axis=1) / nv
        sv /= nv
        grad[..., 1:, :] += sv
        grad[..., :-1, :] -= sv
    if nh:
        sh = np.sign(dh)
        values += (sh * dh).reshape(n, -1).sum(axis=1) / nh
        sh /= nh
        grad[..., :, 1:] += sh
        grad[..., :, :-1] -= sh
    return values, grad.reshape(n, -1)


def sparsity(x) -> float:
    return float(np.mean(np.abs(np.asarray(x, dtype=np.float64))))


def sign_regularizer(x) -> float:
    """``min(mean(relu(x)), mean(relu(-x)))``: zero iff ``x`` is one-signed."""
    x = np.asarray(x, dtype=np.float64)
    return float(min(np.maximum(x, 0).mean(), np.maximum(-x, 0).mean()))


# -- objective --------------------------------------------------------------

def objective(u, gw, offsets, cfg: AttackConfig, shape_hint=None) -> tuple[float, np.ndarray]:
    """CPA objective (to maximise) and its gradient w.r.t. ``u``.

    ``offsets`` is the whitened projection of the row means, so that
    ``ub @ (gw + offsets[:, None])`` is the un-centered recovered signal that
    the sparsity and sign priors act on.
    """
    n, d = u.shape[0], gw.shape[1]
    cos, ub, norms = _cosine_matrix(u)
    y = ub @ gw
    value = 0.0
    dy = np.zeros_like(y)

    if cfg.lambda_ne:
        a = cfg.negentropy_a
        stat = (2.0 / (a * a)) * _logcosh(a * y).mean(axis=1)
        dstat = (2.0 / (a * d)) * np.tanh(a * y)
        if cfg.contrast == "squared":
            dev = stat - gaussian_negentropy(a)
            value += cfg.lambda_ne * np.mean(dev * dev)
            dy += (cfg.lambda_ne * 2.0 / n) * dev[:, None] * dstat
        else:
            value += cfg.lambda_ne * np.mean(stat)
            dy += (cfg.lambda_ne / n) * dstat

    if cfg.lambda_tv:
        tv, dtv = tv_rows(y, shape_hint)
        value -= cfg.lambda_tv * tv.mean()
        dy -= (cfg.lambda_tv / n) * dtv

    d_off = np.zeros(n)
    if cfg.lambda_sp or cfg.lambda_sr:
        s = y + (ub @ offsets)[:, None]
        ds = np.zeros_like(s)
        if cfg.lambda_sp:
            value -= cfg.lambda_sp * np.abs(s).mean()
            ds -= (cfg.lambda_sp / (n * d)) * np.sign(s)
        if cfg.lambda_sr:
            pos = np.maximum(s, 0).mean(axis=1)
            neg = np.maximum(-s, 0).mean(axis=1)
            value -= cfg.lambda_sr * np.minimum(pos, neg).mean()
            use_pos = pos <= neg
            dsr = np.where(use_pos[:, None], (s > 0).astype(float), -(s < 0).astype(float)) / d
            ds -= (cfg.lambda_sr / n) * dsr
        dy += ds
        d_off = ds.sum(axis=1)

    g_ub = dy @ gw.T + d_off[:, None] * offsets[None, :]

    if cfg.lambda_mi and n > 1:
        t = cfg.temperature_t
        off = ~np.eye(n, dtype=bool)
        e = np.exp(t * np.abs(cos)) * off
        value -= cfg.lambda_mi * e.sum() / (n * (n - 1))
        dcos = (cfg.lambda_mi * t / (n * (n - 1))) * np.sign(cos) * e
        g_ub -= (dcos + dcos.T) @ ub

    radial = np.sum(g_ub * ub, axis=1, keepdims=True)
    grad_u = (g_ub - radial * ub) / norms[:, None]
    return float(value), grad_u


# -- sign handling ----------------------------------------------------------

def disambiguate_sign(row, mode: str, shape_hint=None) -> tuple[np.ndarray, int]:
    """Resolve the ICA sign ambiguity of one recovered row.

    Images: keep the sign that puts more values inside the pixel range
    [0, 1] (ties keep +). Embeddings: make the mean non-negative.
    """
    row = np.asarray(row, dtype=np.float64)
    if mode == "image":
        inside_pos = np.count_nonzero((row >= 0) & (row <= 1))
        inside_neg = np.count_nonzero((row <= 0) & (row >= -1))
        flag = -1 if inside_neg > inside_pos else 1
    elif mode == "embedding":
        flag = -1 if row.mean() < 0 else 1
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return flag * row, flag


# -- attack -----------------------------------------------------------------

def _run(g: MixedSignalMatrix, cfg: AttackConfig, n: int) -> RecoveredBatch:
    cfg.validate(g.shape_hint)
    gw, wt = center_whiten(g, n)
    offsets = wt.projection @ wt.row_means
    rng = SeededRng(cfg.seed)
    u = rng.normal(0.0, 1.0 / math.sqrt(n), size=(n, n))
    state = AdamState(learning_rate=cfg.lr)
    trace = []
    for it in range(cfg.iters):
        value, grad = objective(u, gw, offsets, cfg, g.shape_hint)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite CPA objective at iteration {it}")
        if it % cfg.log_every == 0:
            trace.append(value)
        u = adam_step(u, -grad, state)
    value, _ = objective(u, gw, offsets, cfg, g.shape_hint)
    trace.append(value)
    ub = u / np.linalg.norm(u, axis=1, keepdims=True)
    raw = ub @ (gw + offsets[:, None])
    sources = np.empty_like(raw)
    flags = np.empty(n, dtype=int)
    for i in range(n):
        sources[i], flags[i] = disambiguate_sign(raw[i], cfg.mode, g.shape_hint)
    return RecoveredBatch(sources, flags, trace, ub * flags[:, None], wt)


def cpa_image(g: MixedSignalMatrix, cfg: AttackConfig, n: int) -> RecoveredBatch:
    """Recover ``n`` input images from the first FC layer's weight gradient."""
    if cfg.mode != "image":
        cfg = replace(cfg, mode="image")
    return _run(g, cfg, n)


def cpa_embedding(g: MixedSignalMatrix, cfg: AttackConfig, n: int) -> RecoveredBatch:
    """Recover ``n`` ReLU embeddings entering an FC layer from its weight gradient."""
    if cfg.mode != "embedding":
        cfg = replace(cfg, mode="embedding")
    return _run(g, cfg, n)


def rescale_for_display(rows) -> np.ndarray:
    """Min-max map each row to [0, 1]; constant rows map to 0.5."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    lo = rows.min(axis=1, keepdims=True)
    span = rows.max(axis=1, keepdims=True) - lo
    out = np.full_like(rows, 0.5)
    ok = span[:, 0] > 0
    out[ok] = (rows[ok] - lo[ok]) / span[ok]
    return out


def save_recovered(path, sources) -> None:
    sources = np.atleast_2d(np.asarray(sources, dtype=np.float64))
    with open(path, "wb") as fh:
        fh.write(REC_MAGIC)
        fh.write(np.array(sources.shape, dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(sources, dtype="<f8").tobytes())


def load_recovered(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:6] != REC_MAGIC:
        raise ValueError("not a GSREC1 file")
    rows, cols = np.frombuffer(data, dtype="<u4", count=2, offset=6)
    if len(data) != 14 + 8 * int(rows) * int(cols):
        raise ValueError("GSREC1 payload size does not match its header")
    return np.frombuffer(data, dtype="<f8", offset=14).reshape(int(rows), int(cols)).astype(np.float64)
