"""Datasets, netpbm image I/O, reconstruction metrics, matching and reports."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.optimize import linear_sum_assignment

from .numerics import SeededRng

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_SHAPE = (3, 32, 32)


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    shape: tuple[int, int, int]
    num_classes: int = 10
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64).reshape(-1, int(np.prod(self.shape)))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) and (self.mean is None or self.std is None):
            per_channel = self.images.reshape((len(self.images), self.shape[0], -1))
            self.mean = per_channel.mean(axis=(0, 2))
            self.std = per_channel.std(axis=(0, 2))

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.shape, self.num_classes, self.mean, self.std)


def load_cifar10(path) -> Dataset:
    """Read a CIFAR-10 binary batch (1 label byte + 3072 pixel bytes per record)."""
    with open(path, "rb") as fh:
        data = np.frombuffer(fh.read(), dtype=np.uint8)
    if data.size == 0 or data.size % CIFAR_RECORD:
        raise ValueError(f"{path}: size {data.size} is not a positive multiple of {CIFAR_RECORD}")
    records = data.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if np.any(labels >= 10):
        raise ValueError(f"{path}: label byte >= 10")
    return Dataset(records[:, 1:].astype(np.float64) / 255.0, labels, CIFAR_SHAPE, 10)


def _smooth_field(rng: SeededRng, h, w, terms=4, max_freq=2.0):
    yy, xx = np.mgrid[0:h, 0:w] / np.array([h, w])[:, None, None]
    out = np.zeros((h, w))
    for _ in range(terms):
        fy, fx = rng.uniform(-max_freq, max_freq, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        out += rng.normal() * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
    return out / math.sqrt(terms)


def _sample_image(rng: SeededRng, shape):
    c, h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros(shape)
    slope = rng.normal(0, 0.15, size=(c, 2))
    img += slope[:, 0, None, None] * (yy / h - 0.5)[None] + slope[:, 1, None, None] * (xx / w - 0.5)[None]
    for _ in range(int(rng.integers(3, 7))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(0.1, 0.35) * h, rng.uniform(0.1, 0.35) * w
        if rng.uniform() < 0.5:
            dist = np.maximum(np.abs(yy - cy) - ry, np.abs(xx - cx) - rx)
        else:
            dist = (np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) - 1.0) * min(ry, rx)
        mask = 1.0 / (1.0 + np.exp(np.clip(2.0 * dist, -50, 50)))
        color = rng.normal(0, 0.25, size=c)
        img += color[:, None, None] * mask[None]
    return img


def synth_dataset(n: int, shape=CIFAR_SHAPE, k: int = 10, seed: int = 0, noise: float = 0.01) -> Dataset:
    """Class-conditional synthetic images in [0, 1].

    Each class owns a smooth low-frequency color field; each sample adds a
    random piecewise-smooth layout of soft-edged rectangles and ellipses
    over a color ramp, plus a little pixel noise. Sample ``j`` depends only
    on ``(seed, j)``, so datasets of different length share their prefix.
    """
    shape = tuple(int(s) for s in shape)
    c, h, w = shape
    root = SeededRng(seed)
    class_rng = root.spawn(-1)
    bases = np.stack([
        np.stack([0.12 * _smooth_field(class_rng, h, w) for _ in range(c)]) for _ in range(k)
    ]) if k else np.zeros((0,) + shape)
    images = np.zeros((n, c * h * w))
    labels = np.zeros(n, dtype=np.int64)
    for j in range(n):
        rng = root.spawn(j)
        labels[j] = rng.integers(0, k)
        img = 0.5 + bases[labels[j]] + _sample_image(rng, shape) + rng.normal(0, noise, size=shape)
        images[j] = np.clip(img, 0.0, 1.0).ravel()
    return Dataset(images, labels, shape, k)


# -- netpbm -----------------------------------------------------------------

def to_uint8(img) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_pnm(img) -> bytes:
    """Binary PGM (1 channel) or PPM (3 channels) from a (c, h, w) array in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    if c not in (1, 3):
        raise ValueError("netpbm output needs 1 or 3 channels")
    header = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n255\n".encode("ascii")
    return header + to_uint8(img).transpose(1, 2, 0).tobytes()


def write_pnm(path, img) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pnm(img))


def read_pnm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos)
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise ValueError("only 8-bit binary PGM/PPM is supported")
    c = 1 if magic == b"P5" else 3
    pix = np.frombuffer(data, dtype=np.uint8, count=w * h * c, offset=pos)
    return pix.reshape(h, w, c).transpose(2, 0, 1).astype(np.float64) / 255.0


def montage(images, shape, cols: int, pad: int = 1, pad_value: float = 1.0) -> np.ndarray:
    """Tile flattened images into a (c, H, W) grid, row-major, ``pad`` pixels apart."""
    images = np.atleast_2d(np.asarray(images, dtype=np.float64))
    c, h, w = shape
    count = images.shape[0]
    cols = max(1, min(cols, count))
    rows = -(-count // cols)
    out = np.full((c, rows * h + (rows - 1) * pad, cols * w + (cols - 1) * pad), pad_value)
    for i, img in enumerate(images):
        r, q = divmod(i, cols)
        out[:, r * (h + pad):r * (h + pad) + h, q * (w + pad):q * (w + pad) + w] = img.reshape(shape)
    return out


# -- metrics ----------------------------------------------------------------

def abs_cosine(a, b) -> float:
    a = np.ravel(np.asarray(a, dtype=np.float64))
    b = np.ravel(np.asarray(b, dtype=np.float64))
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero vector")
    return float(min(1.0, abs(a @ b) / (na * nb)))


def standardize_rows(rows) -> np.ndarray:
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    centered = rows - rows.mean(axis=1, keepdims=True)
    std = centered.std(axis=1, keepdims=True)
    return np.divide(centered, std, out=np.zeros_like(centered), where=std > 0)


def psnr(a, b, data_range: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / mse)


def ssim(a, b, shape=None, window: int = 8, data_range: float = 1.0) -> float:
    """Mean SSIM over all ``window x window`` patches of every channel."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if shape is not None:
        a, b = a.reshape(shape), b.reshape(shape)
    if a.ndim == 2:
        a, b = a[None], b[None]
    win = min(window, a.shape[-2], a.shape[-1])
    pa = sliding_window_view(a, (win, win), axis=(-2, -1))
    pb = sliding_window_view(b, (win, win), axis=(-2, -1))
    mu_a, mu_b = pa.mean(axis=(-2, -1)), pb.mean(axis=(-2, -1))
    var_a = pa.var(axis=(-2, -1))
    var_b = pb.var(axis=(-2, -1))
    cov = (pa * pb).mean(axis=(-2, -1)) - mu_a * mu_b
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


def affine_fit(recovered, truth) -> np.ndarray:
    """Least-squares ``alpha * recovered + beta`` closest to ``truth``."""
    r = np.asarray(recovered, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    design = np.stack([r, np.ones_like(r)], axis=1)
    coef, *_ = np.linalg.lstsq(design, t, rcond=None)
    return (design @ coef).reshape(np.shape(recovered))


# -- matching ---------------------------------------------------------------

@dataclass
class MatchResult:
    permutation: dict[int, int]
    per_pair_abs_cos: list[float]
    unmatched: list[int] = field(default_factory=list)

    @property
    def total(self) -> float:
        return float(sum(self.per_pair_abs_cos))

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_pair_abs_cos)) if self.per_pair_abs_cos else 0.0


def abs_cos_matrix(recovered, truth) -> np.ndarray:
    r = np.atleast_2d(np.asarray(recovered, dtype=np.float64))
    t = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    rn = np.linalg.norm(r, axis=1, keepdims=True)
    tn = np.linalg.norm(t, axis=1, keepdims=True)
    if np.any(rn == 0) or np.any(tn == 0):
        raise ValueError("cosine similarity of a zero row")
    return np.clip(np.abs((r / rn) @ (t / tn).T), 0.0, 1.0)


def hungarian_match(recovered, truth) -> MatchResult:
    """Assignment of recovered rows to truth rows maximising total |cos|."""
    scores = abs_cos_matrix(recovered, truth)
    rows, cols = linear_sum_assignment(scores, maximize=True)
    perm = {int(r): int(c) for r, c in zip(rows, cols)}
    unmatched = [i for i in range(scores.shape[0]) if i not in perm]
    return MatchResult(perm, [float(scores[r, c]) for r, c in zip(rows, cols)], unmatched)


def greedy_match(recovered, truth) -> MatchResult:
    scores = abs_cos_matrix(recovered, truth)
    perm, used = {}, set()
    for flat in np.argsort(-scores, axis=None, kind="stable"):
        r, c = divmod(int(flat), scores.shape[1])
        if r in perm or c in used:
            continue
        perm[r] = c
        used.add(c)
    ordered = sorted(perm)
    unmatched = [i for i in range(scores.shape[0]) if i not in perm]
    return MatchResult({r: perm[r] for r in ordered}, [float(scores[r, perm[r]]) for r in ordered], unmatched)


def max_offdiag_abs_cos(rows) -> float:
    """Largest |cos| between two distinct rows, used to spot duplicated recoveries."""
    rows = np.atleast_2d(rows)
    if rows.shape[0] < 2:
        return 0.0
    z = standardize_rows(rows)
    c = abs_cos_matrix(z, z)
    np.fill_diagonal(c, 0.0)
    return float(c.max())


# -- reports ----------------------------------------------------------------

@dataclass
class AttackReport:
    attack_id: str
    batch_size: int
    seed: int
    config: dict
    per_sample: list[dict]
    wall_time: float = 0.0
    aggregates: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregates:
            self.aggregates = aggregate(self.per_sample)

    def to_text(self) -> str:
        head = {
            "record": "report",
            "attack_id": self.attack_id,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "wall_time": self.wall_time,
            "config": self.config,
            "aggregates": self.aggregates,
        }
        lines = [json.dumps(head)]
        lines += [json.dumps({"record": "sample", **s}) for s in self.per_sample]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "AttackReport":
        records = [json.loads(line) for line in text.splitlines() if line.strip()]
        if not records or records[0].get("record") != "report":
            raise ValueError("report must start with a header record")
        head = records[0]
        samples = [{k: v for k, v in r.items() if k != "record"} for r in records[1:]]
        return cls(head["attack_id"], head["batch_size"], head["seed"], head["config"], samples,
                   head["wall_time"], head["aggregates"])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> "AttackReport":
        with open(path) as fh:
            return cls.from_text(fh.read())


METRICS = ("abs_cos", "psnr", "ssim")


def aggregate(per_sample: list[dict]) -> dict:
    out = {}
    for key in METRICS:
        vals = [s[key] for s in per_sample if s.get(key) is not None]
        if vals:
            out[f"mean_{key}"] = float(np.mean(vals))
            out[f"median_{key}"] = float(np.median(vals))
    return out


def score_images(recovered, truth, shape) -> tuple[MatchResult, list[dict]]:
    """Match recovered images to the truth and compute |cos|, PSNR and SSIM per pair.

    Rows are compared after standardisation; PSNR/SSIM use the recovered
    row affinely fitted to its matched truth, clipped to [0, 1].
    """
    rec = standardize_rows(recovered)
    tru = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    match = hungarian_match(rec, standardize_rows(tru))
    per_sample = []
    for (r, t), cos in zip(match.permutation.items(), match.per_pair_abs_cos):
        fitted = np.clip(affine_fit(rec[r], tru[t]), 0.0, 1.0)
        per_sample.append({
            "index": r, "truth_index": t, "abs_cos": cos,
            "psnr": psnr(fitted, tru[t]), "ssim": ssim(fitted, tru[t], shape),
        })
    return match, per_sample


def score_embeddings(recovered, truth) -> tuple[MatchResult, list[dict]]:
    """Match recovered embeddings to the truth on raw |cos|."""
    match = hungarian_match(recovered, truth)
    return match, [
        {"index": r, "truth_index": t, "abs_cos": cos}
        for (r, t), cos in zip(match.permutation.items(), match.per_pair_abs_cos)
    ]
