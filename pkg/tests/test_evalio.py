import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradsep import evalio
from gradsep.numerics import SeededRng


def _cifar_bytes(labels, seed=0):
    rng = SeededRng(seed)
    recs = [bytes([lab]) + rng.integers(0, 256, size=3072).astype(np.uint8).tobytes() for lab in labels]
    return b"".join(recs)


def test_load_cifar10(tmp_path):
    p = tmp_path / "one.bin"
    p.write_bytes(_cifar_bytes([7]))
    ds = evalio.load_cifar10(p)
    assert len(ds) == 1 and ds.labels[0] == 7 and ds.shape == (3, 32, 32)
    assert 0.0 <= ds.images.min() and ds.images.max() <= 1.0
    p.write_bytes(_cifar_bytes([1, 2])[:-5])
    with pytest.raises(ValueError):
        evalio.load_cifar10(p)
    p.write_bytes(_cifar_bytes([10]))
    with pytest.raises(ValueError):
        evalio.load_cifar10(p)


def test_cifar_record_round_trips_through_ppm(tmp_path):
    p = tmp_path / "rec.bin"
    raw = _cifar_bytes([3], seed=5)
    p.write_bytes(raw)
    img = evalio.load_cifar10(p).images[0].reshape(3, 32, 32)
    evalio.write_pnm(tmp_path / "r.ppm", img)
    back = evalio.read_pnm(tmp_path / "r.ppm")
    assert np.array_equal(evalio.to_uint8(back), evalio.to_uint8(img))
    assert evalio.to_uint8(back).ravel().tobytes() == raw[1:]


def test_pgm_and_errors(tmp_path):
    img = SeededRng(0).uniform(size=(1, 5, 7))
    evalio.write_pnm(tmp_path / "g.pgm", img)
    assert (tmp_path / "g.pgm").read_bytes()[:2] == b"P5"
    assert np.array_equal(evalio.to_uint8(evalio.read_pnm(tmp_path / "g.pgm")), evalio.to_uint8(img))
    with pytest.raises(ValueError):
        evalio.encode_pnm(np.zeros((2, 3, 3)))


def test_synth_dataset_properties():
    a = evalio.synth_dataset(40, seed=3)
    b = evalio.synth_dataset(40, seed=3)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert len(evalio.synth_dataset(0)) == 0
    assert 0.0 <= a.images.min() and a.images.max() <= 1.0
    assert a.labels.max() < 10
    # prefix stability: shorter datasets are prefixes of longer ones
    assert np.array_equal(evalio.synth_dataset(10, seed=3).images, a.images[:10])


def test_synth_class_means_distinct():
    ds = evalio.synth_dataset(600, seed=0)
    means = np.stack([ds.images[ds.labels == c].mean(axis=0) for c in range(10)])
    dists = [np.linalg.norm(means[i] - means[j]) for i in range(10) for j in range(i + 1, 10)]
    assert min(dists) >= 0.1


def test_abs_cosine():
    a = SeededRng(0).normal(size=9)
    assert evalio.abs_cosine(a, a) == pytest.approx(1.0)
    assert evalio.abs_cosine(a, -a) == pytest.approx(1.0)
    assert evalio.abs_cosine([1, 0], [0, 3]) == 0.0
    with pytest.raises(ValueError):
        evalio.abs_cosine(a, np.zeros(9))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 100.0))
def test_abs_cosine_symmetric_scale_invariant(seed, scale):
    rng = SeededRng(seed)
    a, b = rng.normal(size=6), rng.normal(size=6)
    assert evalio.abs_cosine(a, b) == pytest.approx(evalio.abs_cosine(b, a), abs=1e-14)
    assert evalio.abs_cosine(scale * a, b) == pytest.approx(evalio.abs_cosine(a, b), abs=1e-12)


def test_psnr_ssim():
    img = SeededRng(0).uniform(size=(3, 16, 16))
    assert evalio.psnr(img, img) == math.inf
    assert evalio.ssim(img, img) == pytest.approx(1.0)
    assert evalio.psnr(np.zeros(10), np.ones(10)) == pytest.approx(0.0)
    other = SeededRng(1).uniform(size=(3, 16, 16))
    assert evalio.psnr(img, other) == pytest.approx(evalio.psnr(other, img))
    board = np.where(np.add.outer(np.arange(16), np.arange(16)) % 2 == 0, 1.0, 0.0)
    assert evalio.ssim(board, 1.0 - board) < 0
    flat = img.ravel()
    assert evalio.ssim(flat, flat, shape=(3, 16, 16)) == pytest.approx(1.0)


def test_affine_fit_recovers_affine_copy():
    t = SeededRng(0).uniform(size=50)
    assert np.allclose(evalio.affine_fit(-3.0 * t + 2.0, t), t)


def test_hungarian_trivial_cases():
    truth = SeededRng(0).normal(size=(5, 30))
    m = evalio.hungarian_match(truth, truth)
    assert m.permutation == {i: i for i in range(5)}
    assert np.allclose(m.per_pair_abs_cos, 1.0)
    m = evalio.hungarian_match(truth[::-1], truth)
    assert m.permutation == {i: 4 - i for i in range(5)}
    m = evalio.hungarian_match(truth[:3], truth)
    assert len(m.permutation) == 3 and m.unmatched == []
    m = evalio.hungarian_match(truth, truth[:3])
    assert len(m.unmatched) == 2


def test_hungarian_equals_bruteforce():
    rng = SeededRng(17)
    rec, truth = rng.normal(size=(5, 12)), rng.normal(size=(5, 12))
    c = evalio.abs_cos_matrix(rec, truth)
    best = max(sum(c[i, p[i]] for i in range(5)) for p in itertools.permutations(range(5)))
    assert evalio.hungarian_match(rec, truth).total == pytest.approx(best, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 7))
def test_hungarian_at_least_greedy(seed, n):
    rng = SeededRng(seed)
    rec, truth = rng.normal(size=(n, 8)), rng.normal(size=(n, 8))
    h, g = evalio.hungarian_match(rec, truth), evalio.greedy_match(rec, truth)
    assert h.total >= g.total - 1e-12
    assert len(set(h.permutation.values())) == n


def test_max_offdiag_detects_duplicates():
    base = SeededRng(0).uniform(size=(3, 40))
    dup = np.vstack([base, 2.0 * base[1] + 0.3])
    assert evalio.max_offdiag_abs_cos(dup) > 0.999
    assert evalio.max_offdiag_abs_cos(SeededRng(1).normal(size=(4, 500))) < 0.3
    assert evalio.max_offdiag_abs_cos(base[:1]) == 0.0


def test_montage():
    img = SeededRng(0).uniform(size=(1, 3 * 4 * 5))
    assert np.array_equal(evalio.montage(img, (3, 4, 5), cols=1), img.reshape(3, 4, 5))
    grid = evalio.montage(np.tile(img, (4, 1)), (3, 4, 5), cols=2, pad=1)
    assert grid.shape == (3, 9, 11)
    assert evalio.encode_pnm(grid) == evalio.encode_pnm(evalio.montage(np.tile(img, (4, 1)), (3, 4, 5), cols=2))


def test_report_round_trip(tmp_path):
    truth = evalio.synth_dataset(3, shape=(3, 8, 8), seed=0).images
    rec = -2.0 * truth[::-1] + 1.0
    match, per = evalio.score_images(rec, truth, (3, 8, 8))
    assert match.mean == pytest.approx(1.0)
    assert all(s["psnr"] > 100 for s in per)
    r = evalio.AttackReport("cpa", 3, 0, {"a": 1}, per, wall_time=1.5)
    r.save(tmp_path / "r.jsonl")
    back = evalio.AttackReport.load(tmp_path / "r.jsonl")
    assert back == r
    assert back.aggregates == evalio.aggregate(back.per_sample)
    assert back.aggregates["mean_abs_cos"] == pytest.approx(np.mean([s["abs_cos"] for s in per]))
    with pytest.raises(ValueError):
        evalio.AttackReport.from_text('{"record": "sample"}\n')


def test_score_embeddings():
    z = np.abs(SeededRng(0).normal(size=(4, 20)))
    match, per = evalio.score_embeddings(z[[2, 0, 3, 1]], z)
    assert match.mean == pytest.approx(1.0)
    assert {s["index"]: s["truth_index"] for s in per} == {0: 2, 1: 0, 2: 3, 3: 1}
