import math

import numpy as np
import pytest

from qplace.model import UsageError
from qplace.nn import Adam, CategoricalQNet, Dense, NoisyDense, TrainingError, softmax


def rel_error(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-6))


def numeric_grad(f, param, h=1e-5):
    g = np.zeros_like(param)
    it = np.nditer(param, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = param[i]
        param[i] = old + h
        up = f()
        param[i] = old - h
        down = f()
        param[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def layer_grad_check(layer, rng, activation_input=None):
    x = activation_input if activation_input is not None else rng.normal(size=(4, layer.n_in))
    upstream = rng.normal(size=(4, layer.n_out))

    def loss():
        return float(np.sum(upstream * layer.forward(x)))

    loss()
    dx = layer.backward(upstream)
    worst = 0.0
    for name, p in layer.params.items():
        worst = max(worst, rel_error(layer.grads[name], numeric_grad(loss, p)))
    x_num = numeric_grad(loss, x)
    return max(worst, rel_error(dx, x_num))


@pytest.mark.parametrize("activation", ["relu", "identity"])
def test_dense_gradients(activation):
    rng = np.random.default_rng(1)
    assert layer_grad_check(Dense(6, 5, activation, rng), rng) < 1e-4


@pytest.mark.parametrize("activation", ["relu", "identity"])
def test_noisy_dense_gradients_include_sigma(activation):
    rng = np.random.default_rng(2)
    layer = NoisyDense(6, 5, activation, rng)
    layer.resample_noise(rng)
    assert layer_grad_check(layer, rng) < 1e-4
    assert np.any(layer.grads["sigma_w"] != 0)


@pytest.mark.parametrize("noisy", [False, True])
def test_full_network_gradients(noisy):
    rng = np.random.default_rng(3)
    net = CategoricalQNet(5, 3, n_atoms=4, hidden=(7, 6), noisy=noisy, seed=4)
    net.resample_noise(rng)
    x = rng.normal(size=(3, 5))
    g = rng.normal(size=(3, 3, 4))

    def loss():
        return float(np.sum(g * net.logits(x)))

    loss()
    net.backward(g)
    grads = {k: v.copy() for k, v in net.named_grads().items()}
    for name, p in net.named_params().items():
        assert rel_error(grads[name], numeric_grad(loss, p)) < 1e-4, name


def test_uniform_logits_give_uniform_probs():
    net = CategoricalQNet(3, 2, n_atoms=10, hidden=(4,), noisy=False)
    for layer in net.layers:
        for v in layer.params.values():
            v[...] = 0.0
    p = net.forward(np.ones(3))
    np.testing.assert_allclose(p, 0.1, atol=1e-15)
    np.testing.assert_allclose(net.q_values(np.ones(3)), 0.0, atol=1e-12)


def test_support_and_normalization():
    net = CategoricalQNet(4, 3, seed=5)
    assert net.support[0] == -10 and net.support[-1] == 10
    assert np.diff(net.support) == pytest.approx(np.full(9, 20 / 9))
    net.resample_noise(np.random.default_rng(0))
    p = net.forward(np.random.default_rng(1).normal(size=(8, 4)) * 50)
    assert p.shape == (8, 3, 10)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(p >= 0)


def test_softmax_is_stable():
    p = softmax(np.array([1000.0, 1000.0, -1000.0]))
    np.testing.assert_allclose(p, [0.5, 0.5, 0.0], atol=1e-15)


def test_zero_upstream_gradient_gives_zero_grads():
    rng = np.random.default_rng(0)
    net = CategoricalQNet(4, 2, hidden=(5,), seed=1)
    net.resample_noise(rng)
    net.logits(rng.normal(size=(3, 4)))
    dx = net.backward(np.zeros((3, 2, 10)))
    assert not np.any(dx)
    assert all(not np.any(g) for g in net.named_grads().values())


def test_identity_layer_weight_grad_is_outer_product():
    layer = Dense(3, 2, "identity")
    x = np.array([[1.0, 2.0, 3.0]])
    layer.forward(x)
    layer.backward(np.array([[1.0, -1.0]]))
    np.testing.assert_array_equal(layer.grads["w"], [[1, 2, 3], [-1, -2, -3]])
    np.testing.assert_array_equal(layer.grads["b"], [1, -1])


def test_backward_before_forward():
    with pytest.raises(UsageError):
        Dense(2, 2).backward(np.zeros((1, 2)))
    with pytest.raises(UsageError):
        CategoricalQNet(2, 2, hidden=(3,)).backward(np.zeros((1, 2, 10)))


def test_input_shape_checked():
    with pytest.raises(UsageError):
        CategoricalQNet(4, 2, hidden=(3,)).forward(np.zeros((2, 5)))


def test_noise_statistics():
    # eps_ij = f(a_i) f(b_j) with f(x) = sign(x) sqrt|x|: mean 0, variance E|a| E|b| = 2/pi
    layer = NoisyDense(50, 40, rng=np.random.default_rng(0))
    rng = np.random.default_rng(1)
    samples = []
    for _ in range(400):
        layer.resample_noise(rng)
        samples.append(np.outer(layer.eps_out, layer.eps_in).ravel())
    eps = np.concatenate(samples)
    assert abs(eps.mean()) < 0.01
    assert eps.var() == pytest.approx(2 / math.pi, rel=0.05)


def test_noisy_init_ranges():
    layer = NoisyDense(16, 8, rng=np.random.default_rng(0), sigma0=0.5)
    assert np.all(np.abs(layer.params["mu_w"]) <= 0.25)
    np.testing.assert_allclose(layer.params["sigma_w"], 0.125)
    np.testing.assert_allclose(layer.params["sigma_b"], 0.125)


def test_zero_noise_matches_plain_dense():
    rng = np.random.default_rng(0)
    noisy = NoisyDense(4, 3, "relu", rng)
    plain = Dense(4, 3, "relu")
    plain.params["w"][...] = noisy.params["mu_w"]
    plain.params["b"][...] = noisy.params["mu_b"]
    noisy.resample_noise(rng)
    noisy.zero_noise()
    x = rng.normal(size=(5, 4))
    np.testing.assert_array_equal(noisy.forward(x), plain.forward(x))


def test_adam_scalar_oracle():
    p = {"x": np.array([1.0])}
    opt = Adam(lr=0.01)
    opt.step(p, {"x": np.array([0.5])})
    # first step: m_hat = g, v_hat = g^2, so the move is lr * g / (|g| + eps)
    assert p["x"][0] == pytest.approx(1.0 - 0.01 * 0.5 / (0.5 + 1e-8), abs=1e-15)
    opt.step(p, {"x": np.array([0.5])})
    assert p["x"][0] == pytest.approx(1.0 - 2 * 0.01 * 0.5 / (0.5 + 1e-8), abs=1e-14)


def test_adam_zero_grad_is_noop_and_bad_grads_raise():
    p = {"x": np.array([2.0, -3.0])}
    Adam().step(p, {"x": np.zeros(2)})
    np.testing.assert_array_equal(p["x"], [2.0, -3.0])
    with pytest.raises(TrainingError):
        Adam().step(p, {"x": np.array([np.nan, 0.0])})


def test_adam_keeps_sigma_nonnegative():
    p = {"layers.0.sigma_w": np.array([0.001])}
    Adam(lr=0.1).step(p, {"layers.0.sigma_w": np.array([1.0])})
    assert p["layers.0.sigma_w"][0] == 0.0


def test_adam_decreases_quadratic():
    p = {"x": np.array([3.0, -2.0])}
    opt = Adam(lr=0.05)
    values = []
    for _ in range(100):
        values.append(float(np.sum(p["x"] ** 2)))
        opt.step(p, {"x": 2 * p["x"]})
    assert all(b < a for a, b in zip(values, values[1:20]))
    assert values[-1] < 0.1 * values[0]


def test_save_load_roundtrip(tmp_path):
    net = CategoricalQNet(6, 3, hidden=(8, 8), seed=7)
    path = tmp_path / "net.json"
    net.save(path)
    other = CategoricalQNet.load(path)
    for (k, a), (k2, b) in zip(net.named_params().items(), other.named_params().items()):
        assert k == k2 and np.array_equal(a, b)
    x = np.random.default_rng(0).normal(size=(2, 6))
    net.zero_noise()
    other.zero_noise()
    np.testing.assert_array_equal(net.q_values(x), other.q_values(x))


def test_load_rejects_foreign_format():
    state = CategoricalQNet(2, 2, hidden=(3,)).state_dict()
    state["format_version"] = 99
    with pytest.raises(ValueError):
        CategoricalQNet.from_state_dict(state)
