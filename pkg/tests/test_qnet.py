import numpy as np
import pytest

from berry_sim.errors import (
    ConfigurationError,
    IntegrityError,
    ShapeError,
    TrainingDivergedError,
    UsageError,
)
from berry_sim.qnet import (
    DenseLayer,
    QNetwork,
    apply_update,
    checkpoint_bytes,
    dequantize_layer,
    dequantize_network,
    forward,
    init_network,
    load_checkpoint,
    parse_checkpoint,
    quantize_layer,
    quantize_network,
    save_checkpoint,
    td_gradient,
)


def _layer(weights, biases, dtype=np.float32):
    return DenseLayer(np.asarray(weights, dtype=dtype), np.asarray(biases, dtype=dtype))


def test_init_is_deterministic():
    a = init_network([4, 8, 3], seed=7)
    b = init_network([4, 8, 3], seed=7)
    c = init_network([4, 8, 3], seed=8)

    assert a.arch == (4, 8, 3)
    assert a.parameter_count == 4 * 8 + 8 + 8 * 3 + 3
    assert a.parameter_digest() == b.parameter_digest()
    assert a.parameter_digest() != c.parameter_digest()
    assert all(np.all(layer.biases == 0) for layer in a.layers)
    limit = np.sqrt(6.0 / 12)
    assert np.all(np.abs(a.layers[0].weights) <= limit)


def test_init_rejects_bad_arch():
    with pytest.raises(ConfigurationError):
        init_network([4], seed=0)
    with pytest.raises(ConfigurationError):
        init_network([4, 0, 2], seed=0)


def test_layer_shapes_are_checked():
    with pytest.raises(ShapeError):
        _layer([[1.0, 2.0]], [0.0, 0.0])
    with pytest.raises(ShapeError):
        QNetwork((_layer([[1.0, 2.0]], [0.0]), _layer([[1.0, 2.0]], [0.0])))


def test_parameters_are_immutable():
    net = init_network([2, 3, 2], seed=0)
    with pytest.raises(ValueError):
        net.layers[0].weights[0, 0] = 1.0


def test_forward_single_and_batch():
    net = QNetwork(
        (
            _layer([[1.0, -1.0], [0.5, 0.5]], [0.0, -1.0]),
            _layer([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]], [0.0, 0.0, 1.0]),
        )
    )
    q = forward(net, [2.0, 1.0])
    assert q.shape == (3,)
    np.testing.assert_allclose(q, [1.0, 1.0, 2.5])

    batch = forward(net, [[2.0, 1.0], [1.0, 2.0]])
    assert batch.shape == (2, 3)
    np.testing.assert_allclose(batch[0], q)
    np.testing.assert_allclose(batch[1], [0.0, 1.0, 1.5])

    with pytest.raises(ShapeError):
        forward(net, [1.0, 2.0, 3.0])


def test_forward_calls_activation_hook_on_hidden_layers_only():
    net = init_network([3, 4, 5, 2], seed=1)
    seen = []

    def hook(index, h):
        seen.append((index, h.shape))
        return h

    forward(net, np.ones(3), hook)
    assert seen == [(0, (1, 4)), (1, (1, 5))]


def _random_case(rng):
    """A float64 net with random biases and a batch with no ReLU near its kink."""
    while True:
        depth = int(rng.integers(1, 4))
        arch = [int(w) for w in rng.integers(1, 6, size=depth + 1)]
        net = init_network(arch, seed=int(rng.integers(2**31)), dtype=np.float64)
        net = QNetwork(
            tuple(
                DenseLayer(layer.weights, rng.normal(scale=0.5, size=layer.biases.shape))
                for layer in net.layers
            )
        )
        batch = int(rng.integers(1, 6))
        states = rng.normal(size=(batch, arch[0]))
        h, margin = states, np.inf
        for layer in net.layers[:-1]:
            z = h @ layer.weights.T + layer.biases
            margin = min(margin, float(np.min(np.abs(z))))
            h = np.maximum(z, 0.0)
        if margin > 1e-3:
            actions = rng.integers(arch[-1], size=batch)
            return net, states, actions, rng.normal(size=batch)


def _numeric_gradient(net, loss_of, eps=1e-6):
    weights, biases = [], []
    for index, layer in enumerate(net.layers):
        for name, out in (("weights", weights), ("biases", biases)):
            base = getattr(layer, name)
            grad = np.zeros(base.shape)
            for idx in np.ndindex(base.shape):
                sides = []
                for step in (eps, -eps):
                    values = np.array(base)
                    values[idx] += step
                    layers = list(net.layers)
                    layers[index] = (
                        DenseLayer(values, layer.biases)
                        if name == "weights"
                        else DenseLayer(layer.weights, values)
                    )
                    sides.append(loss_of(QNetwork(tuple(layers))))
                grad[idx] = (sides[0] - sides[1]) / (2 * eps)
            out.append(grad)
    return weights, biases


@pytest.mark.parametrize("seed", range(10))
def test_td_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    for _ in range(100):
        net, states, actions, targets = _random_case(rng)
        rows = np.arange(len(actions))

        def loss_of(candidate):
            q = forward(candidate, states)
            return float(np.sum((q[rows, actions] - targets) ** 2))

        loss, grad = td_gradient(net, states, actions, targets)
        assert loss == pytest.approx(loss_of(net), rel=1e-12)

        weights, biases = _numeric_gradient(net, loss_of)
        for analytic, numeric in zip(grad.weights, weights):
            np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-7)
        for analytic, numeric in zip(grad.biases, biases):
            np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-7)


def test_td_gradient_of_a_repeated_batch_doubles():
    net, states, actions, targets = _random_case(np.random.default_rng(11))
    loss, grad = td_gradient(net, states, actions, targets)
    loss2, grad2 = td_gradient(
        net,
        np.concatenate([states, states]),
        np.concatenate([actions, actions]),
        np.concatenate([targets, targets]),
    )

    assert loss2 == pytest.approx(2 * loss, rel=1e-12)
    for once, twice in zip(grad.weights + grad.biases, grad2.weights + grad2.biases):
        np.testing.assert_allclose(twice, 2 * once, rtol=1e-12, atol=1e-12)


def test_td_gradient_only_the_taken_action_gets_error():
    net = QNetwork((_layer([[1.0], [2.0]], [0.0, 0.0], np.float64),))
    loss, grad = td_gradient(net, [[1.0]], [1], [0.0])

    assert loss == pytest.approx(4.0)
    np.testing.assert_allclose(grad.weights[0], [[0.0], [4.0]])
    np.testing.assert_allclose(grad.biases[0], [0.0, 4.0])


def test_td_gradient_rejects_bad_batches():
    net = init_network([2, 2], seed=0)
    with pytest.raises(UsageError):
        td_gradient(net, np.zeros((0, 2)), [], [])
    with pytest.raises(ShapeError):
        td_gradient(net, [[0.0, 0.0]], [2], [0.0])
    with pytest.raises(ShapeError):
        td_gradient(net, [[0.0, 0.0]], [0, 1], [0.0])
    with pytest.raises(TrainingDivergedError):
        td_gradient(net, [[0.0, 0.0]], [0], [np.nan])


def test_apply_update_adds_both_gradients():
    net = QNetwork((_layer([[1.0, 1.0]], [0.0], np.float64),))
    _, g = td_gradient(net, [[1.0, 0.0]], [0], [0.0])

    single = apply_update(net, g, None, 0.1)
    double = apply_update(net, g, g, 0.1)

    # d/dw (w.x)^2 = 2 * 1 * x
    np.testing.assert_allclose(single.layers[0].weights, [[0.8, 1.0]])
    np.testing.assert_allclose(double.layers[0].weights, [[0.6, 1.0]])
    np.testing.assert_allclose(net.layers[0].weights, [[1.0, 1.0]])

    with pytest.raises(ConfigurationError):
        apply_update(net, g, None, 0.0)


def test_gradient_clipping():
    net = QNetwork((_layer([[1.0, 1.0]], [0.0], np.float64),))
    _, g = td_gradient(net, [[3.0, 4.0]], [0], [0.0])
    clipped = g.clipped(1.0)

    assert clipped.global_norm() == pytest.approx(1.0)
    assert g.clipped(0).global_norm() == pytest.approx(g.global_norm())


def test_quantize_rounds_ties_away_from_zero():
    q = quantize_layer(_layer([[1.27, 0.635, -0.635]], [0.0]))

    assert q.codes.dtype == np.int8
    assert list(q.codes) == [127, 64, -64, 0]
    assert q.scale == pytest.approx(0.01)


def test_quantize_zero_layer():
    q = quantize_layer(_layer([[0.0, 0.0]], [0.0]))
    assert q.scale == 1.0
    assert not q.codes.any()


def _params(layer):
    return np.concatenate([layer.weights.ravel(), layer.biases]).astype(np.float64)


def test_quantization_error_is_bounded():
    rng = np.random.default_rng(5)
    net = init_network([6, 16, 4], seed=5)
    net = QNetwork(
        tuple(
            DenseLayer(
                layer.weights,
                rng.normal(scale=0.1, size=layer.biases.shape).astype(np.float32),
            )
            for layer in net.layers
        )
    )
    quantized = quantize_network(net)

    for dtype in (np.float64, np.float32):
        restored = dequantize_network(quantized, dtype)
        for layer, q, back in zip(net.layers, quantized, restored.layers):
            max_abs = float(np.max(np.abs(_params(layer))))
            # scale, code and product each round once
            bound = q.scale / 2 + 4 * np.spacing(dtype(max_abs))
            assert np.max(np.abs(_params(layer) - _params(back))) <= bound


def test_quantize_dequantize_quantize_is_idempotent():
    net = init_network([5, 12, 7], seed=9)
    first = quantize_network(net)

    for dtype in (np.float32, np.float64):
        second = quantize_network(dequantize_network(first, dtype))
        for a, b in zip(first, second):
            assert np.array_equal(a.codes, b.codes)
            assert b.scale == pytest.approx(a.scale, rel=1e-6)


def test_dequantize_restores_shapes():
    q = quantize_layer(_layer([[0.5, -1.0, 0.25], [0.0, 1.0, 0.75]], [0.1, -0.1]))
    back = dequantize_layer(q)
    assert back.weights.shape == (2, 3)
    assert back.biases.shape == (2,)


def test_checkpoint_keeps_parameters_exactly(tmp_path):
    net = init_network([5, 7, 3], seed=11)
    path = tmp_path / "net.bqn"
    save_checkpoint(path, net, seed=11, step=1234)

    checkpoint = load_checkpoint(path)
    assert checkpoint.seed == 11
    assert checkpoint.step == 1234
    assert checkpoint.network.arch == (5, 7, 3)
    assert checkpoint.network.parameter_digest() == net.parameter_digest()


def test_checkpoint_detects_damage():
    data = checkpoint_bytes(init_network([2, 3, 2], seed=0))

    with pytest.raises(IntegrityError, match="magic"):
        parse_checkpoint(b"NOTBERRY" + data[8:])
    with pytest.raises(IntegrityError, match="truncated"):
        parse_checkpoint(data[:-4])
    with pytest.raises(IntegrityError, match="trailing"):
        parse_checkpoint(data + b"\0\0\0\0")
    with pytest.raises(IntegrityError):
        parse_checkpoint(b"BE")
