import math

import numpy as np
import pytest

from advdefense.defense import (
    DefenseConfig,
    TrainConfig,
    build_regularizer_graph,
    deep_defense_objective,
    finetune_clean,
    finetune_deep_defense,
    partition_batch,
    sgd_loop,
)
from advdefense.errors import DivergenceError
from advdefense.graph import Graph
from advdefense.network import (
    LabeledBatch,
    MlpNetwork,
    bind_network,
    forward_graph,
    init_network,
)


def linear_binary(w, b=0.0):
    w = np.asarray(w, dtype=np.float64).reshape(-1, 1)
    return MlpNetwork([(w, np.array([float(b)]))], n_classes=1)


def small_batch(seed=0, n=6, classes=2, dim=2):
    rng = np.random.default_rng(seed)
    return LabeledBatch(rng.normal(size=(n, dim)) + 0.5, rng.integers(0, classes, size=n))


def lively_net(widths, classes, seed):
    """Random net with positive hidden biases so no test sample lands in a
    fully dead ReLU region (where boundary gradients vanish by construction)."""
    net = init_network(widths, classes, np.random.default_rng(seed))
    for W, b in net.layers[:-1]:
        b += 0.2
    return net


def test_partition_all_correct():
    net = linear_binary([1.0, 0.0])
    batch = LabeledBatch([[1.0, 0.0], [2.0, 0.0]], [1, 1], binary=True)
    part = partition_batch(net, batch)
    assert list(part.correct) == [0, 1] and len(part.wrong) == 0


def test_partition_all_wrong():
    net = linear_binary([1.0, 0.0])
    batch = LabeledBatch([[1.0, 0.0], [2.0, 0.0]], [-1, -1], binary=True)
    part = partition_batch(net, batch)
    assert len(part.correct) == 0 and list(part.wrong) == [0, 1]


def test_partition_hand_mixed():
    net = linear_binary([1.0, 0.0])
    batch = LabeledBatch(
        [[1.0, 0.0], [-1.0, 0.0], [2.0, 0.0], [-2.0, 0.0]], [1, 1, -1, -1], binary=True)
    part = partition_batch(net, batch)
    assert list(part.correct) == [0, 3]
    assert list(part.wrong) == [1, 2]


def test_regularizer_value_correct_sample():
    # linear net engineered so rho = |f| / (|w| |x|) = 0.1
    net = linear_binary([1.0, 0.0])
    x = np.array([0.1, math.sqrt(1 - 0.01)])  # unit norm, f = 0.1
    g, node = build_regularizer_graph(net, x, 1, True, DefenseConfig(c=25.0, unroll=1))
    assert g.scalar(node) == pytest.approx(math.exp(-2.5), rel=1e-12)
    assert g.scalar(node) == pytest.approx(0.082085, abs=1e-6)


def test_regularizer_value_wrong_sample():
    net = linear_binary([1.0, 0.0])
    x = np.array([0.1, math.sqrt(1 - 0.01)])
    g, node = build_regularizer_graph(net, x, -1, False, DefenseConfig(d=5.0, unroll=1))
    assert g.scalar(node) == pytest.approx(math.exp(0.5), rel=1e-12)
    assert g.scalar(node) == pytest.approx(1.648721, abs=1e-6)


def test_regularizer_monotone_in_rho():
    net = linear_binary([1.0, 0.0])
    cfg = DefenseConfig(c=25.0, d=5.0, unroll=1)
    vals_t, vals_f = [], []
    for f in (0.1, 0.2):
        x = np.array([f, math.sqrt(1 - f * f)])
        gt, nt = build_regularizer_graph(net, x, 1, True, cfg)
        gf, nf = build_regularizer_graph(net, x, -1, False, cfg)
        vals_t.append(gt.scalar(nt))
        vals_f.append(gf.scalar(nf))
    assert vals_t[0] > vals_t[1] > 0.0  # decreasing in rho on the correct side
    assert 0.0 < vals_f[0] < vals_f[1]  # increasing on the misclassified side


def test_regularizer_linear_closed_form():
    rng = np.random.default_rng(1)
    cfg = DefenseConfig(c=25.0, unroll=1)
    for _ in range(20):
        w = rng.normal(size=3)
        b = rng.normal() * 0.1
        x = rng.normal(size=3)
        f = float(w @ x + b)
        if abs(f) < 1e-3 or np.linalg.norm(x) < 1e-2:
            continue
        net = linear_binary(w, b)
        label = 1 if f > 0 else -1
        g, node = build_regularizer_graph(net, x, label, True, cfg)
        expected = math.exp(-cfg.c * abs(f) / (np.linalg.norm(w) * np.linalg.norm(x)))
        assert g.scalar(node) == pytest.approx(expected, rel=1e-10)


def test_lambda_zero_matches_classification_only_graph():
    from advdefense.defense import _chain_sum, _surrogate_node

    net = init_network([2, 8, 3], 3, np.random.default_rng(2))
    batch = small_batch(seed=3, classes=3)
    loss, grads = deep_defense_objective(net, batch, DefenseConfig(lam=0.0))

    g = Graph()
    nn = bind_network(g, net)
    nodes, ref_loss = [], 0.0
    for k in range(len(batch)):
        trace = forward_graph(nn, g.constant(batch.inputs[k]))
        node, l = _surrogate_node(g, nn, trace, batch.labels[k])
        nodes.append(node)
        ref_loss += l
    total = _chain_sum(g, nodes)
    g.run_pending()
    ref = g.backward(total)
    assert loss == ref_loss
    for k in range(net.depth):
        assert np.array_equal(grads[k][0], ref[f"W{k}"])
        assert np.array_equal(grads[k][1], ref[f"b{k}"])


@pytest.mark.parametrize("unroll", [1, 2, 3])
def test_objective_gradient_matches_finite_differences(unroll):
    net = init_network([2, 8, 2], 2, np.random.default_rng(0))
    batch = small_batch(seed=0, n=4)
    cfg = DefenseConfig(lam=15.0, c=25.0, d=5.0, unroll=unroll)
    _, grads = deep_defense_objective(net, batch, cfg)
    h = 1e-6
    worst = 0.0
    for k in range(net.depth):
        for which in (0, 1):
            arr = net.layers[k][which]
            analytic = grads[k][which]
            for idx in np.ndindex(arr.shape):
                saved = arr[idx]
                arr[idx] = saved + h
                hi = deep_defense_objective(net, batch, cfg)[0]
                arr[idx] = saved - h
                lo = deep_defense_objective(net, batch, cfg)[0]
                arr[idx] = saved
                numeric = (hi - lo) / (2 * h)
                worst = max(worst, abs(analytic[idx] - numeric) / max(1.0, abs(analytic[idx])))
    assert worst < 1e-5


def test_layer_mask_keeps_classification_gradients():
    net = init_network([2, 8, 2], 2, np.random.default_rng(4))
    batch = small_batch(seed=5)
    base = deep_defense_objective(net, batch, DefenseConfig(lam=0.0))[1]
    masked = deep_defense_objective(
        net, batch, DefenseConfig(lam=15.0, layer_mask={1}))[1]
    # regularizer gradients land only on layer 1; layer 0 sees the plain loss
    assert np.array_equal(masked[0][0], base[0][0])
    assert np.array_equal(masked[0][1], base[0][1])
    assert not np.array_equal(masked[1][0], base[1][0])


def test_layer_mask_all_equals_no_mask():
    net = init_network([2, 8, 2], 2, np.random.default_rng(6))
    batch = small_batch(seed=7)
    a = deep_defense_objective(net, batch, DefenseConfig(lam=15.0))
    b = deep_defense_objective(net, batch, DefenseConfig(lam=15.0, layer_mask={0, 1}))
    assert a[0] == b[0]
    for (gW1, gb1), (gW2, gb2) in zip(a[1], b[1]):
        assert np.array_equal(gW1, gW2)
        assert np.array_equal(gb1, gb2)


def test_zero_learning_rate_is_identity():
    net = lively_net([2, 6, 2], 2, 8)
    train = small_batch(seed=9, n=12)
    tcfg = TrainConfig(learning_rate=0.0, epochs=1, batch_size=4, seed=0,
                       halve_lr_after=None)
    tuned, _ = finetune_deep_defense(
        net, train, None, DefenseConfig(lam=15.0, unroll=2), tcfg)
    for (W1, b1), (W2, b2) in zip(net.layers, tuned.layers):
        assert np.array_equal(W1, W2)
        assert np.array_equal(b1, b2)


def blob_batch(seed, n_per_class=24):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n_per_class, 2)) * 0.3 + [1.5, 1.5]
    b = rng.normal(size=(n_per_class, 2)) * 0.3 + [-1.5, 1.5]
    X = np.vstack([a, b])
    y = np.array([0] * n_per_class + [1] * n_per_class)
    return LabeledBatch(X, y)


def test_training_is_deterministic():
    train = blob_batch(seed=11)
    ref = init_network([2, 6, 2], 2, np.random.default_rng(10))
    warm = TrainConfig(learning_rate=5e-3, epochs=20, batch_size=16, seed=1,
                       halve_lr_after=None)
    ref, _ = finetune_clean(ref, train, None, warm)
    tcfg = TrainConfig(learning_rate=1e-4, epochs=2, batch_size=16, seed=5,
                       halve_lr_after=1)
    cfg = DefenseConfig(lam=5.0, unroll=2)
    a, _ = finetune_deep_defense(ref, train, None, cfg, tcfg)
    b, _ = finetune_deep_defense(ref, train, None, cfg, tcfg)
    for (W1, _), (W2, _) in zip(a.layers, b.layers):
        assert np.array_equal(W1, W2)


def test_divergence_detection():
    net = init_network([2, 4, 2], 2, np.random.default_rng(12))
    train = small_batch(seed=13, n=8)
    tcfg = TrainConfig(learning_rate=1.0, epochs=1, batch_size=8, seed=0)

    def explode(n, b):
        z = [(np.zeros_like(W), np.zeros_like(bb)) for W, bb in n.layers]
        return float("inf"), z

    with pytest.raises(DivergenceError):
        sgd_loop(net, train, None, tcfg, explode)


def test_finetune_records_history_columns():
    net = init_network([2, 6, 2], 2, np.random.default_rng(14))
    train = small_batch(seed=15, n=16)
    val = small_batch(seed=16, n=8)
    tcfg = TrainConfig(learning_rate=1e-4, epochs=2, batch_size=8, seed=0,
                       halve_lr_after=None)
    _, hist = finetune_clean(net, train, val, tcfg)
    assert [h.epoch for h in hist] == [1, 2]
    for h in hist:
        assert math.isfinite(h.train_loss)
        assert 0.0 <= h.benign_accuracy <= 1.0
