"""Honest-but-curious FL exchange: gradient capture, DP defense, bundle files."""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import nets
from .numerics import SeededRng

BUNDLE_MAGIC = b"GSGRD1"
# magic, batch size, has-dp flag, sigma, clipped flag, delta
_HEADER = struct.Struct("<6sIBdBd")


class BundleFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DPMeta:
    sigma: float
    clipped: bool
    delta: float = 1e-5


@dataclass
class GradientBundle:
    """Aggregate gradients of one client batch, keyed by parameter name."""

    grads: dict[str, np.ndarray]
    batch_size_claimed: int
    dp_meta: DPMeta | None = None

    def flat(self) -> np.ndarray:
        if not self.grads:
            return np.zeros(0)
        return np.concatenate([g.ravel() for g in self.grads.values()])

    def unflatten(self, vec: np.ndarray) -> dict[str, np.ndarray]:
        out, pos = {}, 0
        for name, g in self.grads.items():
            out[name] = vec[pos:pos + g.size].reshape(g.shape)
            pos += g.size
        return out

    def check_shapes(self, net: nets.Network) -> None:
        for name, p in net.params.items():
            if name not in self.grads or self.grads[name].shape != p.shape:
                raise ValueError(f"bundle does not match model at {name!r}")

    def __eq__(self, other):
        if not isinstance(other, GradientBundle):
            return NotImplemented
        return (
            self.batch_size_claimed == other.batch_size_claimed
            and self.dp_meta == other.dp_meta
            and list(self.grads) == list(other.grads)
            and all(np.array_equal(self.grads[k], other.grads[k]) for k in self.grads)
        )


def capture(net: nets.Network, batch, labels) -> GradientBundle:
    """The gradient a client sends to the server for ``batch``."""
    grads = nets.backward_aggregate(net, batch, labels)
    return GradientBundle(grads, int(np.atleast_2d(batch).shape[0]))


def apply_dp(bundle: GradientBundle, sigma: float, seed: int, delta: float = 1e-5) -> GradientBundle:
    """Clip the concatenated gradient to unit L2 norm, then add N(0, sigma^2) noise."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    flat = bundle.flat()
    norm = float(np.linalg.norm(flat))
    if norm == 0.0:
        raise ValueError("cannot normalise a zero gradient")
    clipped = flat / norm
    if sigma > 0:
        clipped = clipped + SeededRng(seed).normal(0.0, sigma, size=clipped.size)
    return GradientBundle(
        bundle.unflatten(clipped), bundle.batch_size_claimed, DPMeta(float(sigma), True, float(delta))
    )


def dp_epsilon(sigma: float, delta: float, batch_size: int) -> float:
    """Classical Gaussian-mechanism epsilon with sensitivity 1/batch_size.

    ``sigma == 0`` means no noise and returns ``math.inf``.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    if sigma == 0:
        return math.inf
    sensitivity = 1.0 / batch_size
    return sensitivity * math.sqrt(2.0 * math.log(1.25 / delta)) / sigma


def serialize(bundle: GradientBundle) -> bytes:
    dp = bundle.dp_meta
    parts = [
        _HEADER.pack(
            BUNDLE_MAGIC,
            bundle.batch_size_claimed,
            dp is not None,
            dp.sigma if dp else 0.0,
            bool(dp and dp.clipped),
            dp.delta if dp else 0.0,
        ),
        struct.pack("<I", len(bundle.grads)),
    ]
    for name, g in bundle.grads.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", g.ndim) + struct.pack(f"<{g.ndim}I", *g.shape))
        parts.append(np.ascontiguousarray(g, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def deserialize(data: bytes) -> GradientBundle:
    if len(data) < _HEADER.size + 8:
        raise BundleFormatError("truncated bundle")
    if data[:6] != BUNDLE_MAGIC:
        raise BundleFormatError("bad magic")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise BundleFormatError("checksum mismatch")
    _, batch, has_dp, sigma, clipped, delta = _HEADER.unpack_from(body, 0)
    pos = _HEADER.size
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    grads = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", body, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            size = 8 * int(np.prod(dims, dtype=np.int64))
            if pos + size > len(body):
                raise BundleFormatError(f"payload of {name!r} shorter than its header shape")
            grads[name] = np.frombuffer(body, dtype="<f8", count=size // 8, offset=pos).reshape(dims).astype(np.float64)
            pos += size
    except struct.error as exc:
        raise BundleFormatError("truncated bundle") from exc
    if pos != len(body):
        raise BundleFormatError("trailing bytes after last layer")
    meta = DPMeta(sigma, bool(clipped), delta) if has_dp else None
    return GradientBundle(grads, batch, meta)


def save_bundle(bundle: GradientBundle, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(bundle))


def load_bundle(path) -> GradientBundle:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
