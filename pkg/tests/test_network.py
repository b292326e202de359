import numpy as np
import pytest

from cbp import build_grids
from network import (
    DenseLayer,
    Network,
    accuracy,
    backward,
    forward,
    init_network,
    loss,
    project_network,
)
from quantizer import LayerQuantConfig
from utils import ContractError, DomainError, ShapeError


def _batch(rng, n=8, d=3, k=3):
    return rng.normal(size=(n, d)), rng.integers(0, k, size=n)


def test_init_network_is_seeded_and_marks_edges_exempt():
    a = init_network([3, 5, 4, 3], seed=11)
    b = init_network([3, 5, 4, 3], seed=11)
    for la, lb in zip(a.layers, b.layers):
        np.testing.assert_array_equal(la.W, lb.W)
        np.testing.assert_array_equal(la.b, lb.b)
    assert [layer.quant.exempt for layer in a.layers] == [True, False, True]
    assert a.layers[-1].activation == "none"
    assert a.sizes == [3, 5, 4, 3]
    assert a.constrained_indices() == [1]
    assert a.n_constrained() == 20
    everything = init_network([3, 5, 4, 3], seed=11, quantize_first_last=True)
    assert everything.constrained_indices() == [0, 1, 2]


def test_network_rejects_broken_chain():
    with pytest.raises(ShapeError):
        Network(layers=[DenseLayer(np.ones((4, 3)), np.zeros(4)),
                        DenseLayer(np.ones((2, 5)), np.zeros(2))])
    with pytest.raises(ShapeError):
        DenseLayer(np.ones((4, 3)), np.zeros(3))


def test_forward_matches_manual_computation(rng):
    net = init_network([3, 4, 2], seed=3)
    x = rng.normal(size=(5, 3))
    logits, trace = forward(net, x)
    hidden = np.maximum(x @ net.layers[0].W.T + net.layers[0].b, 0.0)
    expected = hidden @ net.layers[1].W.T + net.layers[1].b
    np.testing.assert_allclose(logits, expected, rtol=1e-12)
    assert trace.mode == "full-precision"


def test_forward_checks_features_and_mode(rng):
    net = init_network([3, 4, 2], seed=3)
    with pytest.raises(ShapeError):
        forward(net, rng.normal(size=(5, 4)))
    with pytest.raises(DomainError):
        forward(net, rng.normal(size=(5, 3)), mode="half-precision")
    with pytest.raises(ContractError):
        forward(net, rng.normal(size=(5, 3)), mode="quantized")


def test_loss_and_label_checks():
    logits = np.array([[0.0, 0.0], [10.0, -10.0]])
    assert loss(logits, [0, 0]) == pytest.approx((np.log(2) + np.log1p(np.exp(-20))) / 2)
    with pytest.raises(DomainError):
        loss(logits, [0, 2])
    with pytest.raises(ShapeError):
        loss(logits, [0])
    assert accuracy(logits, [1, 0]) == 0.5


def test_backward_matches_finite_differences(rng):
    net = init_network([3, 6, 5, 3], seed=5)
    x, y = _batch(rng)
    _, trace = forward(net, x)
    grads = backward(net, trace, y)
    h = 1e-6
    for i, layer in enumerate(net.layers):
        for r, c in [(0, 0), (layer.W.shape[0] - 1, layer.W.shape[1] - 1), (1, 2)]:
            old = layer.W[r, c]
            layer.W[r, c] = old + h
            up = loss(forward(net, x)[0], y)
            layer.W[r, c] = old - h
            down = loss(forward(net, x)[0], y)
            layer.W[r, c] = old
            assert grads.dW[i][r, c] == pytest.approx((up - down) / (2 * h), rel=1e-5, abs=1e-8)
        old = layer.b[0]
        layer.b[0] = old + h
        up = loss(forward(net, x)[0], y)
        layer.b[0] = old - h
        down = loss(forward(net, x)[0], y)
        layer.b[0] = old
        assert grads.db[i][0] == pytest.approx((up - down) / (2 * h), rel=1e-5, abs=1e-8)


def test_quantized_gradients_equal_projected_network_gradients(rng):
    net = init_network([3, 6, 5, 3], seed=9, quantize_first_last=True)
    grids = build_grids(net)
    x, y = _batch(rng)
    logits_q, trace_q = forward(net, x, "quantized", grids)
    grads_q = backward(net, trace_q, y)

    projected = project_network(net, grids)
    logits_p, trace_p = forward(projected, x)
    grads_p = backward(projected, trace_p, y)

    np.testing.assert_array_equal(logits_q, logits_p)
    for a, b in zip(grads_q.dW + grads_q.db, grads_p.dW + grads_p.db):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)
    for layer, grid in zip(projected.layers, grids):
        assert np.all(np.isin(layer.W, grid.q))


def test_exempt_layers_keep_full_precision_in_quantized_mode(rng):
    net = init_network([3, 6, 3], seed=2)
    net.layers[0].quant = LayerQuantConfig(exempt=False)
    grids = build_grids(net)
    assert grids[1] is None
    _, trace = forward(net, rng.normal(size=(4, 3)), "quantized", grids)
    assert np.all(np.isin(trace.weights[0], grids[0].q))
    np.testing.assert_array_equal(trace.weights[1], net.layers[1].W)


def test_backward_rejects_stale_trace(rng):
    net = init_network([3, 4, 3], seed=1)
    x, y = _batch(rng, n=4)
    _, trace = forward(net, x)
    net.touch()
    with pytest.raises(ContractError):
        backward(net, trace, y)
    other = net.copy()
    _, trace = forward(other, x)
    with pytest.raises(ContractError):
        backward(net, trace, y)


def test_forward_is_deterministic(rng):
    net = init_network([3, 6, 3], seed=4)
    x = rng.normal(size=(7, 3))
    np.testing.assert_array_equal(forward(net, x)[0], forward(net, x)[0])
