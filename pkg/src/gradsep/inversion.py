"""Input-space attacks: feature inversion (optionally with gradient matching)
and the gradient-matching baseline with a TV prior."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nets
from .cpa import tv_rows
from .fedsim import GradientBundle
from .numerics import AdamState, NumericalError, SeededRng, adam_step

INIT_MEAN, INIT_STD = 0.5, 0.1


@dataclass
class InversionConfig:
    lambda_tv: float = 1e-2
    lambda_gm: float = 0.0
    iters: int = 25000
    lr: float = 1e-2
    seed: int = 0
    labels_known: bool = True
    lr_decay: bool = True

    def validate(self) -> None:
        if self.iters <= 0:
            raise ValueError("iters must be positive")
        if self.lambda_tv < 0 or self.lambda_gm < 0:
            raise ValueError("regularisation weights must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


def _decay_hook(cfg: InversionConfig, *states):
    """Multi-step schedule: lr x0.1 at 3/8, 5/8 and 7/8 of the run."""
    milestones = {int(cfg.iters * f) for f in (3 / 8, 5 / 8, 7 / 8)} if cfg.lr_decay else set()

    def hook(it):
        if it in milestones:
            for st in states:
                st.learning_rate *= 0.1

    return hook


def cosine_similarity(a, b) -> tuple[float, np.ndarray]:
    """``cos(a, b)`` and its gradient with respect to ``a``."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero vector")
    cs = float(np.dot(a.ravel(), b.ravel()) / (na * nb))
    grad = b * (1.0 / (na * nb))
    grad -= (cs / (na * na)) * a
    return cs, grad


def cosine_distance(a, b) -> float:
    return 1.0 - cosine_similarity(np.ravel(a), np.ravel(b))[0]


def _flat(grads: dict) -> np.ndarray:
    return np.concatenate([g.ravel() for g in grads.values()])


def _unflat(vec, like: dict) -> dict:
    out, pos = {}, 0
    for k, g in like.items():
        out[k] = vec[pos:pos + g.size].reshape(g.shape)
        pos += g.size
    return out


def gradient_similarity(net, x, labels, target: np.ndarray):
    """``CS(dL/dtheta(x, labels), target)`` with gradients w.r.t. ``x`` and soft targets."""
    holder = {}

    def direction(grads):
        cs, dg = cosine_similarity(_flat(grads), target)
        holder["cs"] = cs
        return _unflat(dg, grads)

    _, _, dx, dq = nets.gradient_direction_input_grad(net, x, labels, direction)
    return holder["cs"], dx, dq


def _embedding_similarity(net, x, targets):
    def objective(out):
        total, grad = 0.0, np.zeros_like(out)
        for i in range(out.shape[0]):
            cs, g = cosine_similarity(out[i], targets[i])
            total += cs
            grad[i] = g
        return total, grad

    return nets.input_gradient(net, x, objective, at="embedding")


def _shape_of(net, shape):
    shape = shape if shape is not None else net.input_shape
    if shape is None:
        raise ValueError("the TV prior needs an image shape")
    return tuple(shape)


def _soft_label_grad(logits, dq):
    q = nets.softmax(logits)
    return q * (dq - (q * dq).sum(axis=1, keepdims=True))


def fi_objective(net, x, z_hat, cfg: InversionConfig, bundle=None, labels=None, shape=None) -> dict:
    """Components of the feature-inversion objective at ``x`` (for reporting)."""
    x = np.atleast_2d(x)
    z = np.atleast_2d(z_hat)
    cs, _ = _embedding_similarity(net, x, z)
    tv = tv_rows(x, _shape_of(net, shape))[0].sum() if cfg.lambda_tv else 0.0
    out = {"feature_cos": cs, "tv": float(tv), "gm_cos": 0.0}
    if cfg.lambda_gm:
        out["gm_cos"] = gradient_similarity(net, x, labels, bundle.flat())[0]
    out["total"] = out["feature_cos"] + cfg.lambda_gm * out["gm_cos"] - cfg.lambda_tv * out["tv"]
    return out


def _invert(net, z_hat, cfg: InversionConfig, bundle=None, labels=None, shape=None):
    cfg.validate()
    z = np.atleast_2d(np.asarray(z_hat, dtype=np.float64))
    if z.shape[1] != net.embedding_dim:
        raise ValueError(f"embedding must have {net.embedding_dim} entries, got {z.shape[1]}")
    if np.any(np.linalg.norm(z, axis=1) == 0):
        raise ValueError("cannot invert a zero embedding: cosine similarity is undefined")
    use_gm = cfg.lambda_gm != 0
    if use_gm:
        bundle.check_shapes(net)
        target = bundle.flat()
    shp = _shape_of(net, shape) if cfg.lambda_tv else None
    n = z.shape[0]
    rng = SeededRng(cfg.seed)
    x = np.clip(rng.normal(INIT_MEAN, INIT_STD, size=(n, net.input_dim)), 0.0, 1.0)
    soft = use_gm and not cfg.labels_known
    if use_gm and not soft and labels is None:
        raise ValueError("labels are required when labels_known is set")
    logits = rng.normal(0.0, 1.0, size=(n, net.num_classes)) if soft else None
    xs, ls = AdamState(learning_rate=cfg.lr), AdamState(learning_rate=cfg.lr)
    decay = _decay_hook(cfg, xs, ls)
    for it in range(cfg.iters):
        decay(it)
        value, gx = _embedding_similarity(net, x, z)
        if cfg.lambda_tv:
            tv, dtv = tv_rows(x, shp)
            value -= cfg.lambda_tv * tv.sum()
            gx = gx - cfg.lambda_tv * dtv
        if use_gm:
            target_labels = nets.softmax(logits) if soft else labels
            cs, dx, dq = gradient_similarity(net, x, target_labels, target)
            value += cfg.lambda_gm * cs
            gx = gx + cfg.lambda_gm * dx
            if soft:
                logits = adam_step(logits, -cfg.lambda_gm * _soft_label_grad(logits, dq), ls)
        if not np.isfinite(value):
            raise NumericalError(f"non-finite inversion objective at iteration {it}")
        x = np.clip(adam_step(x, -gx, xs), 0.0, 1.0)
    return x


def feature_invert(net: nets.Network, z_hat, cfg: InversionConfig, shape=None) -> np.ndarray:
    """Find inputs whose embeddings align with ``z_hat`` (one row per image)."""
    x = _invert(net, z_hat, InversionConfig(**{**cfg.__dict__, "lambda_gm": 0.0}), shape=shape)
    return x[0] if np.ndim(z_hat) == 1 else x


def feature_invert_gm(net: nets.Network, z_hat, bundle: GradientBundle, labels, cfg: InversionConfig,
                      shape=None) -> np.ndarray:
    """Feature inversion plus a gradient-matching term against ``bundle``.

    All rows of ``z_hat`` are optimised jointly so that the batch gradient of
    the dummies is compared with the aggregate bundle.
    """
    x = _invert(net, z_hat, cfg, bundle, labels, shape)
    return x[0] if np.ndim(z_hat) == 1 else x


def gradient_match(net: nets.Network, bundle: GradientBundle, n: int, labels, cfg: InversionConfig,
                   shape=None) -> np.ndarray:
    """Gradient-matching baseline: cosine gradient distance plus a TV prior."""
    cfg.validate()
    if n != bundle.batch_size_claimed:
        raise ValueError(f"bundle claims batch size {bundle.batch_size_claimed}, not {n}")
    bundle.check_shapes(net)
    target = bundle.flat()
    shp = _shape_of(net, shape) if cfg.lambda_tv else None
    rng = SeededRng(cfg.seed)
    x = np.clip(rng.normal(INIT_MEAN, INIT_STD, size=(n, net.input_dim)), 0.0, 1.0)
    soft = not cfg.labels_known or labels is None
    logits = rng.normal(0.0, 1.0, size=(n, net.num_classes)) if soft else None
    xs, ls = AdamState(learning_rate=cfg.lr), AdamState(learning_rate=cfg.lr)
    decay = _decay_hook(cfg, xs, ls)
    for it in range(cfg.iters):
        decay(it)
        cs, dx, dq = gradient_similarity(net, x, nets.softmax(logits) if soft else labels, target)
        loss, gx = 1.0 - cs, -dx
        if cfg.lambda_tv:
            tv, dtv = tv_rows(x, shp)
            loss += cfg.lambda_tv * tv.sum()
            gx = gx + cfg.lambda_tv * dtv
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite gradient-matching loss at iteration {it}")
        if soft:
            logits = adam_step(logits, -_soft_label_grad(logits, dq), ls)
        x = np.clip(adam_step(x, gx, xs), 0.0, 1.0)
    return x


def gm_loss(net, x, labels, bundle: GradientBundle, lambda_tv=0.0, shape=None) -> float:
    """Gradient-matching loss at ``x`` (cosine distance plus weighted TV)."""
    loss = 1.0 - gradient_similarity(net, np.atleast_2d(x), labels, bundle.flat())[0]
    if lambda_tv:
        loss += lambda_tv * tv_rows(np.atleast_2d(x), _shape_of(net, shape))[0].sum()
    return float(loss)
