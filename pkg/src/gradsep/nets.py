"""Victim classifiers with hand-written forward, backward and R-op passes.

Two architectures are provided: FC-2 (``Linear(256)-ReLU-Linear(k)``) and
ConvNet-S (three 3x3 conv/ReLU/maxpool blocks feeding the same FC head).
Activations are float64 arrays with the batch on axis 0; image inputs are
passed flattened in channel-major, row-major order.

Besides the usual backward pass, every layer implements the forward and
backward halves of Pearlmutter's R-operator. That gives the exact input
gradient of ``<v, dL/dtheta>`` for a fixed parameter direction ``v``, which
is what gradient-matching objectives need.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numerics import AdamState, SeededRng, adam_step

HIDDEN = 256
CONV_CHANNELS = (16, 32, 64)
NET_MAGIC = b"GSNET1"


class Linear:
    def __init__(self, name: str):
        self.name = name
        self.w, self.b = f"{name}.weight", f"{name}.bias"

    def forward(self, p, x):
        return x @ p[self.w].T + p[self.b], x

    def backward(self, p, cache, gy, grads):
        x = cache
        if grads is not None:
            grads[self.w] = gy.T @ x
            grads[self.b] = gy.sum(axis=0)
        return gy @ p[self.w]

    def rforward(self, p, v, cache, rx):
        x = cache
        ry = x @ v[self.w].T + v[self.b]
        return ry if rx is None else ry + rx @ p[self.w].T

    def rbackward(self, p, v, cache, gy, rgy):
        return rgy @ p[self.w] + gy @ v[self.w]


class ReLU:
    name = None

    def forward(self, p, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, p, mask, gy, grads):
        return gy * mask

    def rforward(self, p, v, mask, rx):
        return None if rx is None else rx * mask

    def rbackward(self, p, v, mask, gy, rgy):
        return rgy * mask


class Conv3x3:
    """3x3 convolution, stride 1, zero padding 1, computed via im2col."""

    def __init__(self, name: str):
        self.name = name
        self.w, self.b = f"{name}.weight", f"{name}.bias"

    @staticmethod
    def _cols(x):
        n, c, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # n, c, h, w, 3, 3
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)

    @staticmethod
    def _col2im(gcols, shape):
        n, c, h, w = shape
        g = gcols.reshape(n, h, w, c, 3, 3)
        out = np.zeros((n, c, h + 2, w + 2))
        for ki in range(3):
            for kj in range(3):
                out[:, :, ki:ki + h, kj:kj + w] += g[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
        return out[:, :, 1:-1, 1:-1]

    def _apply(self, weight, cols, shape):
        n, _, h, w = shape
        y = cols @ weight.reshape(weight.shape[0], -1).T
        return y.reshape(n, h, w, -1).transpose(0, 3, 1, 2)

    def forward(self, p, x):
        cols = self._cols(x)
        y = self._apply(p[self.w], cols, x.shape) + p[self.b][None, :, None, None]
        return y, (cols, x.shape)

    def backward(self, p, cache, gy, grads):
        cols, shape = cache
        cout = gy.shape[1]
        g2 = gy.transpose(0, 2, 3, 1).reshape(-1, cout)
        if grads is not None:
            grads[self.w] = (g2.T @ cols).reshape(p[self.w].shape)
            grads[self.b] = g2.sum(axis=0)
        return self._col2im(g2 @ p[self.w].reshape(cout, -1), shape)

    def rforward(self, p, v, cache, rx):
        cols, shape = cache
        ry = self._apply(v[self.w], cols, shape) + v[self.b][None, :, None, None]
        if rx is not None:
            ry = ry + self._apply(p[self.w], self._cols(rx), shape)
        return ry

    def rbackward(self, p, v, cache, gy, rgy):
        _, shape = cache
        cout = gy.shape[1]
        g2 = gy.transpose(0, 2, 3, 1).reshape(-1, cout)
        rg2 = rgy.transpose(0, 2, 3, 1).reshape(-1, cout)
        gcols = rg2 @ p[self.w].reshape(cout, -1) + g2 @ v[self.w].reshape(cout, -1)
        return self._col2im(gcols, shape)


class MaxPool2:
    name = None

    def forward(self, p, x):
        n, c, h, w = x.shape
        blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
        arg = blocks.argmax(axis=-1)
        onehot = np.zeros_like(blocks)
        np.put_along_axis(onehot, arg[..., None], 1.0, axis=-1)
        y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        return y, (onehot, x.shape)

    def _route(self, cache, gy):
        onehot, (n, c, h, w) = cache
        g = onehot * gy[..., None]
        g = g.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return g.reshape(n, c, h, w)

    def backward(self, p, cache, gy, grads):
        return self._route(cache, gy)

    def rforward(self, p, v, cache, rx):
        if rx is None:
            return None
        onehot, (n, c, h, w) = cache
        blocks = rx.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (blocks.reshape(n, c, h // 2, w // 2, 4) * onehot).sum(axis=-1)

    def rbackward(self, p, v, cache, gy, rgy):
        return self._route(cache, rgy)


class Reshape:
    name = None

    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, p, x):
        return x.reshape((x.shape[0],) + self.shape), x.shape

    def backward(self, p, in_shape, gy, grads):
        return gy.reshape(in_shape)

    def rforward(self, p, v, in_shape, rx):
        return None if rx is None else rx.reshape((rx.shape[0],) + self.shape)

    def rbackward(self, p, v, in_shape, gy, rgy):
        return rgy.reshape(in_shape)


@dataclass
class ForwardTrace:
    """Per-layer caches for one batch plus the embedding entering the target layer."""

    caches: list
    embedding: np.ndarray
    logits: np.ndarray | None = None


@dataclass
class Network:
    """A victim classifier: architecture, named parameters, CPA target layer."""

    arch: str
    params: dict[str, np.ndarray]
    num_classes: int
    input_shape: tuple[int, ...] | None
    layers: list = field(repr=False, default_factory=list)
    target: str = "fc1"

    def __post_init__(self):
        if not self.layers:
            self.layers = _build_layers(self.arch, self.input_shape)
        self.embed_index = next(i for i, l in enumerate(self.layers) if l.name == self.target)

    @property
    def input_dim(self) -> int:
        return self.params["fc1.weight"].shape[1] if self.arch == "fc2" else int(np.prod(self.input_shape))

    @property
    def embedding_dim(self) -> int:
        return self.params[f"{self.target}.weight"].shape[1]

    def copy(self, params: dict | None = None) -> "Network":
        params = {k: v.copy() for k, v in (params or self.params).items()}
        return Network(self.arch, params, self.num_classes, self.input_shape, self.layers, self.target)

    def zeros_like_params(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # -- passes ---------------------------------------------------------

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"batch must be n x {self.input_dim}, got {x.shape}")
        return x

    def forward(self, x, stop: int | None = None) -> tuple[np.ndarray, ForwardTrace]:
        x = self._check_input(x)
        stop = len(self.layers) if stop is None else stop
        caches, h, emb = [], x, None
        for i, layer in enumerate(self.layers[:stop]):
            if i == self.embed_index:
                emb = h
            h, cache = layer.forward(self.params, h)
            caches.append(cache)
        if emb is None and stop == self.embed_index:
            emb = h
        return h, ForwardTrace(caches, emb, h if stop == len(self.layers) else None)

    def embed(self, x) -> np.ndarray:
        """Input of the target FC layer (the embedding z)."""
        return self.forward(x, stop=self.embed_index)[0]

    def backward(self, trace: ForwardTrace, g_out, want_params=True):
        grads = {} if want_params else None
        g = g_out
        for layer, cache in zip(reversed(self.layers[:len(trace.caches)]), reversed(trace.caches)):
            g = layer.backward(self.params, cache, g, grads)
        if grads is not None:
            grads = {k: grads[k] for k in self.params if k in grads}
        return grads, g

    def rop_input_grad(self, trace: ForwardTrace, v, g_out, rg_out_fn):
        """Tangent of the input gradient along parameter direction ``v``.

        ``rg_out_fn(r_logits)`` maps the logit tangent to the tangent of the
        output gradient. Returns ``(d/dx <v, dL/dtheta>, r_logits)``.
        """
        r = None
        for layer, cache in zip(self.layers, trace.caches):
            r = layer.rforward(self.params, v, cache, r)
        rg = rg_out_fn(r)
        g = g_out
        for layer, cache in zip(reversed(self.layers), reversed(trace.caches)):
            rg = layer.rbackward(self.params, v, cache, g, rg)
            g = layer.backward(self.params, cache, g, None)
        return rg, r


def _build_layers(arch: str, input_shape):
    if arch == "fc2":
        return [Linear("fc1"), ReLU(), Linear("fc2")]
    if arch == "convnet-s":
        c, h, w = input_shape
        layers = [Reshape((c, h, w))]
        for i in range(len(CONV_CHANNELS)):
            layers += [Conv3x3(f"conv{i + 1}"), ReLU(), MaxPool2()]
        flat = CONV_CHANNELS[-1] * (h >> len(CONV_CHANNELS)) * (w >> len(CONV_CHANNELS))
        layers += [Reshape((flat,)), Linear("fc1"), ReLU(), Linear("fc2")]
        return layers
    raise ValueError(f"unknown architecture {arch!r}")


def _uniform(rng: SeededRng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def fc2(d_in: int, num_classes: int, seed: int = 0, hidden: int = HIDDEN) -> Network:
    rng = SeededRng(seed)
    params = {
        "fc1.weight": _uniform(rng, (hidden, d_in), d_in),
        "fc1.bias": _uniform(rng, (hidden,), d_in),
        "fc2.weight": _uniform(rng, (num_classes, hidden), hidden),
        "fc2.bias": _uniform(rng, (num_classes,), hidden),
    }
    return Network("fc2", params, num_classes, None)


def convnet_s(num_classes: int, seed: int = 0, input_shape=(3, 32, 32)) -> Network:
    c, h, w = input_shape
    if h % 8 or w % 8:
        raise ValueError("ConvNet-S needs spatial dims divisible by 8")
    rng = SeededRng(seed)
    params = {}
    cin = c
    for i, cout in enumerate(CONV_CHANNELS, start=1):
        fan_in = cin * 9
        params[f"conv{i}.weight"] = _uniform(rng, (cout, cin, 3, 3), fan_in)
        params[f"conv{i}.bias"] = _uniform(rng, (cout,), fan_in)
        cin = cout
    flat = cin * (h // 8) * (w // 8)
    params["fc1.weight"] = _uniform(rng, (HIDDEN, flat), flat)
    params["fc1.bias"] = _uniform(rng, (HIDDEN,), flat)
    params["fc2.weight"] = _uniform(rng, (num_classes, HIDDEN), HIDDEN)
    params["fc2.bias"] = _uniform(rng, (num_classes,), HIDDEN)
    return Network("convnet-s", params, num_classes, tuple(input_shape))


# -- loss -----------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _targets(labels, n, k) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 2:
        if labels.shape != (n, k):
            raise ValueError(f"soft labels must be {n} x {k}")
        return labels.astype(np.float64)
    labels = labels.astype(np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ValueError(f"expected {n} labels, got {labels.shape[0]}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    q = np.zeros((n, k))
    q[np.arange(n), labels] = 1.0
    return q


def cross_entropy(logits, labels) -> float:
    """Mean softmax cross-entropy; ``labels`` are class ids or an n x k soft-target matrix."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    n, k = logits.shape
    q = _targets(labels, n, k)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-(q * logp).sum() / n)


def _loss_grad(logits, q):
    n = logits.shape[0]
    return (softmax(logits) - q) / n


# -- public operations ------------------------------------------------------

def fc2_forward(net: Network, batch_x) -> tuple[np.ndarray, ForwardTrace]:
    if net.arch != "fc2":
        raise ValueError("fc2_forward needs an FC-2 network")
    return net.forward(batch_x)


def backward_aggregate(net: Network, batch_x, labels) -> dict[str, np.ndarray]:
    """Gradient of the batch-mean cross-entropy w.r.t. every parameter."""
    logits, trace = net.forward(batch_x)
    q = _targets(labels, logits.shape[0], net.num_classes)
    grads, _ = net.backward(trace, _loss_grad(logits, q))
    return grads


def backward_per_sample(net: Network, batch_x, labels) -> list[dict[str, np.ndarray]]:
    x = net._check_input(batch_x)
    labels = np.asarray(labels)
    return [backward_aggregate(net, x[j:j + 1], labels[j:j + 1]) for j in range(x.shape[0])]


def input_gradient(
    net: Network,
    x,
    objective: Callable[[np.ndarray], tuple[float, np.ndarray]],
    at: str = "logits",
) -> tuple[float, np.ndarray]:
    """Value and input gradient of ``objective`` applied to the network output.

    ``objective(out)`` returns ``(value, d value / d out)``; ``at`` selects
    the output: ``"logits"`` or ``"embedding"`` (input of the target layer).
    """
    if at not in ("logits", "embedding"):
        raise ValueError(f"unknown output {at!r}")
    stop = None if at == "logits" else net.embed_index
    out, trace = net.forward(x, stop=stop)
    value, g_out = objective(out)
    _, gx = net.backward(trace, np.asarray(g_out, dtype=np.float64), want_params=False)
    return value, gx


def gradient_direction_input_grad(net: Network, x, labels, v):
    """Input and soft-target gradients of ``s = <v, dL/dtheta>``.

    ``v`` is a dict of parameter-shaped arrays, or a callable building it
    from the parameter gradient (needed when ``v`` depends on the gradient
    itself, as for cosine gradient matching). Returns
    ``(s, grads, d s/dx, d s/dq)`` where ``grads`` is the parameter gradient
    at ``x`` and ``q`` the (possibly soft) target matrix.
    """
    logits, trace = net.forward(x)
    n = logits.shape[0]
    q = _targets(labels, n, net.num_classes)
    p = softmax(logits)
    g_out = (p - q) / n
    grads, _ = net.backward(trace, g_out)
    if callable(v):
        v = v(grads)

    def rg_out(r):
        return p * (r - (p * r).sum(axis=1, keepdims=True)) / n

    dx, r_logits = net.rop_input_grad(trace, v, g_out, rg_out)
    s = float((g_out * r_logits).sum())
    return s, grads, dx, -r_logits / n


def accuracy(net: Network, x, labels) -> float:
    logits, _ = net.forward(x)
    return float(np.mean(logits.argmax(axis=1) == np.asarray(labels)))


def train(
    net: Network,
    images,
    labels,
    epochs: int = 20,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 32,
    history: list | None = None,
) -> Network:
    """Mini-batch Adam on the cross-entropy; returns a trained copy.

    Per-epoch mean training loss is appended to ``history`` when given.
    """
    images = net._check_input(images)
    labels = np.asarray(labels)
    if images.shape[0] == 0:
        raise ValueError("empty training set")
    out = net.copy()
    if epochs == 0:
        return out
    rng = SeededRng(seed)
    states = {k: AdamState(learning_rate=lr) for k in out.params}
    n = images.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            logits, trace = out.forward(images[idx])
            q = _targets(labels[idx], len(idx), out.num_classes)
            total += cross_entropy(logits, q) * len(idx)
            grads, _ = out.backward(trace, _loss_grad(logits, q))
            for k, g in grads.items():
                out.params[k] = adam_step(out.params[k], g, states[k])
        if history is not None:
            history.append(total / n)
    return out


# -- checkpoint I/O ---------------------------------------------------------

def save_params(net: Network, path) -> None:
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(net.params))


def params_to_bytes(params: dict[str, np.ndarray]) -> bytes:
    parts = [NET_MAGIC]
    for name, arr in params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def params_from_bytes(data: bytes) -> dict[str, np.ndarray]:
    if data[:len(NET_MAGIC)] != NET_MAGIC:
        raise ValueError("not a GSNET1 checkpoint")
    pos, params = len(NET_MAGIC), {}
    try:
        while pos < len(data):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 8 * count > len(data):
                raise ValueError("truncated checkpoint")
            params[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * count
    except struct.error as exc:
        raise ValueError("truncated checkpoint") from exc
    return params


def load_params(path) -> Network:
    with open(path, "rb") as fh:
        params = params_from_bytes(fh.read())
    k = params["fc2.weight"].shape[0]
    if "conv1.weight" in params:
        cin = params["conv1.weight"].shape[1]
        side = int(round(8 * np.sqrt(params["fc1.weight"].shape[1] / CONV_CHANNELS[-1])))
        return Network("convnet-s", params, k, (cin, side, side))
    return Network("fc2", params, k, None)
