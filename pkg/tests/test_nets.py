import numpy as np
import pytest

from gradsep import evalio, nets
from gradsep.numerics import SeededRng

from gradcheck import REL_TOL, check_function, check_param_grads


def _batch(net, n, seed):
    rng = SeededRng(seed)
    return rng.uniform(size=(n, net.input_dim)), rng.integers(0, net.num_classes, size=n)


def test_fc2_zero_weights_give_zero_logits():
    net = nets.fc2(12, 3, seed=0)
    net.params = {k: np.zeros_like(v) for k, v in net.params.items()}
    logits, _ = nets.fc2_forward(net, np.ones((2, 12)))
    assert np.array_equal(logits, np.zeros((2, 3)))


def test_fc2_identity_composition():
    net = nets.fc2(256, 256, seed=0)
    net.params = {"fc1.weight": np.eye(256), "fc1.bias": np.zeros(256),
                  "fc2.weight": np.eye(256), "fc2.bias": np.zeros(256)}
    x = SeededRng(0).uniform(size=(3, 256))
    assert np.array_equal(nets.fc2_forward(net, x)[0], x)


def test_fc2_matches_direct_products():
    net = nets.fc2(20, 5, seed=0)
    x, _ = _batch(net, 4, 1)
    p = net.params
    ref = np.maximum(x @ p["fc1.weight"].T + p["fc1.bias"], 0) @ p["fc2.weight"].T + p["fc2.bias"]
    assert np.allclose(nets.fc2_forward(net, x)[0], ref, atol=1e-12)
    with pytest.raises(ValueError):
        nets.fc2_forward(net, np.ones((2, 21)))
    with pytest.raises(ValueError):
        nets.fc2_forward(nets.convnet_s(3, input_shape=(3, 8, 8)), x)


def test_cross_entropy_cases():
    assert nets.cross_entropy(np.zeros((3, 10)), [0, 4, 9]) == pytest.approx(np.log(10), abs=1e-12)
    logits = np.zeros((1, 4))
    logits[0, 2] = 1000.0
    assert nets.cross_entropy(logits, [2]) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        nets.cross_entropy(np.zeros((1, 3)), [3])
    rng = SeededRng(3)
    logits = rng.normal(size=(5, 4))
    labels = rng.integers(0, 4, size=5)
    brute = 0.0
    for i in range(5):
        brute += -np.log(np.exp(logits[i, labels[i]]) / sum(np.exp(logits[i, j]) for j in range(4)))
    assert nets.cross_entropy(logits, labels) == pytest.approx(brute / 5, rel=1e-13)


@pytest.mark.parametrize("n", [1, 4, 8])
def test_linear_mixture_identity(n):
    net = nets.fc2(48, 5, seed=n)
    x, y = _batch(net, n, 10 + n)
    g = nets.backward_aggregate(net, x, y)
    logits, trace = net.forward(x)
    q = np.eye(5)[y]
    delta = ((nets.softmax(logits) - q) @ net.params["fc2.weight"]) * (x @ net.params["fc1.weight"].T + net.params["fc1.bias"] > 0)
    assert np.max(np.abs(g["fc1.weight"] - delta.T @ x / n)) < 1e-9


def test_aggregate_equals_mean_of_per_sample():
    for net in (nets.fc2(30, 4, seed=0), nets.convnet_s(3, seed=0, input_shape=(3, 8, 8))):
        x, y = _batch(net, 5, 2)
        agg = nets.backward_aggregate(net, x, y)
        per = nets.backward_per_sample(net, x, y)
        assert len(per) == 5
        for k in agg:
            assert np.max(np.abs(agg[k] - np.mean([p[k] for p in per], axis=0))) < 1e-10
        one = nets.backward_aggregate(net, x[:1], y[:1])
        for k in one:
            assert np.array_equal(one[k], per[0][k])


def test_surrogate_sum_loss_gives_mean_input():
    # bias-free single FC layer with L = sum of outputs: every weight-gradient row is the batch mean
    net = nets.fc2(6, 2, seed=0)
    x = SeededRng(0).uniform(size=(3, 6))
    _, trace = net.forward(x, stop=1)
    grads, _ = net.backward(trace, np.ones((3, 256)) / 3)
    assert np.allclose(grads["fc1.weight"], np.tile(x.mean(axis=0), (256, 1)), atol=1e-14)


def test_zero_input_sample_has_zero_first_layer_rows():
    net = nets.fc2(10, 3, seed=0)
    g = nets.backward_per_sample(net, np.zeros((1, 10)), [1])[0]
    assert np.array_equal(g["fc1.weight"], np.zeros_like(g["fc1.weight"]))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_param_gradients_fc2(seed):
    net = nets.fc2(24, 4, seed=seed, hidden=16)
    x, y = _batch(net, 3, seed)
    assert check_param_grads(net, x, y, seed) < REL_TOL


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_param_gradients_convnet(tiny_conv, seed):
    x, y = _batch(tiny_conv, 2, seed)
    assert check_param_grads(tiny_conv, x, y, seed) < REL_TOL


@pytest.mark.parametrize("at", ["logits", "embedding"])
def test_input_gradient_fd(tiny_conv, at):
    rng = SeededRng(4)
    x = rng.uniform(size=(2, tiny_conv.input_dim))
    out_dim = tiny_conv.num_classes if at == "logits" else tiny_conv.embedding_dim
    w = rng.normal(size=(2, out_dim))

    def objective(out):
        return float(np.sum(np.sin(out) * w)), np.cos(out) * w

    _, gx = nets.input_gradient(tiny_conv, x, objective, at=at)
    f = lambda p: nets.input_gradient(tiny_conv, p, objective, at=at)[0]
    assert check_function(f, gx, x, seed=1) < REL_TOL


def test_input_gradient_constant_objective(tiny_conv):
    x = SeededRng(0).uniform(size=(1, tiny_conv.input_dim))
    _, gx = nets.input_gradient(tiny_conv, x, lambda out: (1.0, np.zeros_like(out)))
    assert np.array_equal(gx, np.zeros_like(gx))
    with pytest.raises(ValueError):
        nets.input_gradient(tiny_conv, x, lambda out: (1.0, np.zeros_like(out)), at="conv1")


def test_dead_relu_unit_passes_no_gradient():
    net = nets.fc2(4, 2, seed=0, hidden=3)
    net.params["fc1.bias"] = np.array([-100.0, 0.0, 0.0])
    x = SeededRng(0).uniform(size=(2, 4))
    g = nets.backward_aggregate(net, x, [0, 1])
    assert np.array_equal(g["fc1.weight"][0], np.zeros(4))
    assert g["fc1.bias"][0] == 0.0


def test_gradient_direction_input_grad_fd(tiny_conv):
    rng = SeededRng(9)
    x = rng.uniform(size=(2, tiny_conv.input_dim))
    labels = nets.softmax(rng.normal(size=(2, tiny_conv.num_classes)))
    v = {k: rng.normal(size=p.shape) for k, p in tiny_conv.params.items()}

    def s_of(xx, qq=labels):
        g = nets.backward_aggregate(tiny_conv, xx, qq)
        return float(sum(np.sum(g[k] * v[k]) for k in v))

    s, _, dx, dq = nets.gradient_direction_input_grad(tiny_conv, x, labels, v)
    assert s == pytest.approx(s_of(x), rel=1e-12)
    assert check_function(s_of, dx, x, seed=2) < REL_TOL
    assert check_function(lambda q: s_of(x, q), dq, labels, seed=3) < REL_TOL


def test_train_zero_epochs_and_determinism(synth_small):
    net = nets.fc2(synth_small.images.shape[1], 10, seed=0)
    same = nets.train(net, synth_small.images, synth_small.labels, epochs=0)
    for k in net.params:
        assert np.array_equal(same.params[k], net.params[k])
    a = nets.train(net, synth_small.images, synth_small.labels, epochs=2, seed=3)
    b = nets.train(net, synth_small.images, synth_small.labels, epochs=2, seed=3)
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])
    with pytest.raises(ValueError):
        nets.train(net, synth_small.images[:0], synth_small.labels[:0])


@pytest.mark.slow
def test_train_fc2_synthetic_regression():
    ds = evalio.synth_dataset(512, seed=0)
    history = []
    net = nets.train(nets.fc2(ds.images.shape[1], 10, seed=0), ds.images, ds.labels, epochs=20, history=history)
    drops = sum(b < a for a, b in zip(history, history[1:]))
    assert drops >= 0.8 * (len(history) - 1)
    assert nets.accuracy(net, ds.images, ds.labels) > 0.1 + 0.2


def test_checkpoint_round_trip(tmp_path, tiny_conv):
    path = tmp_path / "m.gsnet"
    nets.save_params(tiny_conv, path)
    back = nets.load_params(path)
    assert back.arch == "convnet-s" and back.input_shape == tiny_conv.input_shape
    for k in tiny_conv.params:
        assert np.array_equal(back.params[k], tiny_conv.params[k])
    assert path.read_bytes()[:6] == b"GSNET1"
    with pytest.raises(ValueError):
        nets.params_from_bytes(b"XXXXXX" + path.read_bytes()[6:])
