import numpy as np
import pytest

from advdefense.errors import ModelFormatError, ShapeError
from advdefense.graph import Graph
from advdefense.network import (
    LabeledBatch,
    MlpNetwork,
    bind_network,
    build_input_gradient_graph,
    decision_value,
    forward_graph,
    init_network,
    input_gradient,
    jacobian,
    load_model,
    mlp_forward,
    predict,
    save_model,
)


def eq4_net():
    # one hidden layer: W0 = I, b0 = 0, w1 = (1, -1), b1 = 0
    return MlpNetwork(
        [(np.eye(2), np.zeros(2)), (np.array([[1.0], [-1.0]]), np.zeros(1))], n_classes=1)


def random_net(widths, n_classes, seed):
    return init_network(widths, n_classes, np.random.default_rng(seed))


def test_forward_hand_example():
    assert decision_value(eq4_net(), [1.0, -1.0]) == 1.0


def test_forward_zero_propagation():
    assert decision_value(eq4_net(), [0.0, 0.0]) == 0.0


def test_forward_bias_passthrough():
    net = MlpNetwork(
        [(np.zeros((2, 2)), np.zeros(2)), (np.zeros((2, 1)), np.array([3.0]))], n_classes=1)
    assert decision_value(net, [5.0, -7.0]) == 3.0


def test_predict_binary_sign():
    net = MlpNetwork([(np.array([[1.0]]), np.array([-0.3]))], n_classes=1)
    assert predict(net, [0.0]) == -1


def test_predict_argmax_tie_break():
    b = np.array([0.2, 0.9, 0.9])
    net = MlpNetwork([(np.zeros((2, 3)), b)], n_classes=3)
    assert predict(net, [1.0, 1.0]) == 1


def test_predict_binary_zero_is_plus_one():
    net = MlpNetwork([(np.array([[1.0]]), np.zeros(1))], n_classes=1)
    assert predict(net, [0.0]) == 1


def test_input_gradient_hand_example():
    # a = (1, 0), mask = (1, 0), grad = I . (mask * w1) = (1, 0)
    assert np.array_equal(input_gradient(eq4_net(), [1.0, -1.0]), [1.0, 0.0])


def test_input_gradient_linear_net_is_weights():
    w = np.array([[2.0], [-3.0], [0.5]])
    net = MlpNetwork([(w, np.array([0.7]))], n_classes=1)
    for x in ([1.0, 1.0, 1.0], [-5.0, 2.0, 0.0]):
        assert np.array_equal(input_gradient(net, x), w[:, 0])


def test_input_gradient_matches_finite_differences():
    net = random_net([2, 8, 3], 3, seed=0)
    rng = np.random.default_rng(0)
    x = rng.normal(size=2)
    grad = input_gradient(net, x, class_index=2)
    h = 1e-6
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        numeric = (mlp_forward(net, x + e)[2] - mlp_forward(net, x - e)[2]) / (2 * h)
        assert abs(grad[j] - numeric) / max(1.0, abs(grad[j])) < 1e-6


def test_input_gradient_matches_autodiff_backward():
    # closed form vs generic backward through the forward graph
    for seed in range(5):
        net = random_net([4, 10, 6, 3], 3, seed=seed)
        x = np.random.default_rng(100 + seed).normal(size=4)
        g = Graph()
        nn = bind_network(g, net)
        x_node = g.input("x", (4,))
        trace = forward_graph(nn, x_node)
        out = g.select(trace.logits, 1)
        g.forward({"x": x})
        g.backward(out)
        auto = g.adjoint(x_node)
        closed = input_gradient(net, x, class_index=1)
        assert np.max(np.abs(auto - closed)) <= 1e-12 * max(1.0, np.max(np.abs(closed)))


def test_gradient_graph_reproduces_closed_form_bitwise():
    rng = np.random.default_rng(7)
    for trial in range(100):
        widths = [3, 5, 2] if trial % 2 else [4, 6, 6, 3]
        net = init_network(widths, widths[-1], rng)
        x = rng.normal(size=widths[0])
        cls = int(rng.integers(widths[-1]))
        g = Graph()
        nn = bind_network(g, net)
        x_node = g.input("x", (widths[0],))
        grad_node = build_input_gradient_graph(nn, x_node, class_index=cls)
        g.forward({"x": x})
        assert np.array_equal(g.value(grad_node), input_gradient(net, x, class_index=cls))


def test_gradient_graph_linear_net_constant_in_x():
    net = MlpNetwork([(np.array([[1.5], [-2.0]]), np.zeros(1))], n_classes=1)
    g = Graph()
    nn = bind_network(g, net)
    x_node = g.input("x", (2,))
    grad_node = build_input_gradient_graph(nn, x_node)
    g.forward({"x": [1.0, 2.0]})
    first = g.value(grad_node)
    g.forward({"x": [-3.0, 0.5]})
    assert np.array_equal(first, g.value(grad_node))


def test_gradient_graph_backward_matches_fd_over_weights():
    net = random_net([3, 6, 2], 2, seed=3)
    x = np.random.default_rng(4).normal(size=3)

    def sum_grad(n):
        return float(np.sum(input_gradient(n, x, class_index=0)))

    g = Graph()
    nn = bind_network(g, net)
    x_node = g.input("x", (3,))
    node = build_input_gradient_graph(nn, x_node, class_index=0)
    out = g.sum(node)
    g.forward({"x": x})
    grads = g.backward(out)

    W0 = net.layers[0][0]
    h = 1e-6
    worst = 0.0
    for idx in np.ndindex(W0.shape):
        pert = net.copy()
        pert.layers[0][0][idx] += h
        hi = sum_grad(pert)
        pert.layers[0][0][idx] -= 2 * h
        lo = sum_grad(pert)
        numeric = (hi - lo) / (2 * h)
        analytic = grads["W0"][idx]
        worst = max(worst, abs(analytic - numeric) / max(1.0, abs(analytic)))
    assert worst < 1e-5


def test_positive_homogeneity_zero_bias():
    rng = np.random.default_rng(11)
    net = init_network([3, 7, 1], 1, rng)
    x = rng.normal(size=3)
    f1 = decision_value(net, x)
    f3 = decision_value(net, 3.0 * np.asarray(x))
    assert f3 == pytest.approx(3.0 * f1, rel=1e-12)


def test_predict_invariant_under_logit_shift():
    net = random_net([2, 5, 4], 4, seed=2)
    shifted = net.copy()
    shifted.layers[-1] = (shifted.layers[-1][0], shifted.layers[-1][1] + 10.0)
    rng = np.random.default_rng(3)
    for _ in range(20):
        x = rng.normal(size=2)
        assert predict(net, x) == predict(shifted, x)


def test_layer_chain_validation():
    with pytest.raises(ShapeError):
        MlpNetwork([(np.ones((2, 3)), np.zeros(3)), (np.ones((4, 1)), np.zeros(1))], 1)
    with pytest.raises(ShapeError):
        MlpNetwork([(np.ones((2, 3)), np.zeros(3))], 1)  # binary needs fan-out 1
    with pytest.raises(ShapeError):
        MlpNetwork([(np.ones((2, 3)), np.zeros(3))], 4)  # fan-out != classes


def test_labeled_batch_validation():
    with pytest.raises(ShapeError):
        LabeledBatch(np.zeros((2, 3)), np.array([0, 2, 1]))
    with pytest.raises(ShapeError):
        LabeledBatch(np.zeros((2, 3)), np.array([0, 2]), binary=True)
    b = LabeledBatch(np.zeros((2, 3)), np.array([-1, 1]), binary=True)
    assert len(b) == 2


def test_model_round_trip_bit_exact(tmp_path):
    net = random_net([5, 9, 3], 3, seed=42)
    path = tmp_path / "model.txt"
    save_model(net, path, config_hash="abc123")
    loaded, config_hash = load_model(path)
    assert config_hash == "abc123"
    assert loaded.n_classes == 3
    for (W1, b1), (W2, b2) in zip(net.layers, loaded.layers):
        assert np.array_equal(W1, W2)
        assert np.array_equal(b1, b2)


def test_model_header_and_truncation_errors(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("NOPE\n")
    with pytest.raises(ModelFormatError, match="header"):
        load_model(bad)
    net = random_net([3, 2], 2, seed=0)
    path = tmp_path / "model.txt"
    save_model(net, path)
    text = path.read_text().splitlines()
    (tmp_path / "trunc.txt").write_text("\n".join(text[:-2]) + "\n")
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "trunc.txt")


def test_jacobian_columns_match_input_gradient():
    net = random_net([4, 8, 5], 5, seed=9)
    x = np.random.default_rng(10).normal(size=4)
    J = jacobian(net, x)
    for c in range(5):
        col = input_gradient(net, x, class_index=c)
        assert np.max(np.abs(J[:, c] - col)) < 1e-12
