"""MLP classifier: forward pass, prediction, and input gradients.

Input gradients come in two flavours with one contract: the
closed-form reverse chain below, and a graph construction
(:func:`build_input_gradient_graph`) whose evaluation must reproduce
the closed form exactly.  Both share the kernel's matvec primitive and
mirror each other's operation order, so agreement is bit-level, not
just within tolerance.

Weight convention: a layer is ``(W, b)`` with ``W`` of shape
(fan_in, fan_out); the forward pass applies ``W.T @ h + b`` and ReLU
between consecutive layers (identity after the last).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._core import matvec
from .errors import ModelFormatError, ShapeError
from .graph import Graph


@dataclass
class MlpNetwork:
    """Parameter set of the classifier.

    ``n_classes == 1`` marks the binary sign classifier (labels in
    {-1, +1}); ``n_classes >= 2`` is the usual argmax classifier with
    labels in 0..n-1.
    """

    layers: list
    n_classes: int

    def __post_init__(self):
        if self.n_classes < 1:
            raise ShapeError("class count must be >= 1")
        if not self.layers:
            raise ShapeError("network needs at least one layer")
        fixed = []
        for k, (W, b) in enumerate(self.layers):
            W = np.ascontiguousarray(np.asarray(W, dtype=np.float64))
            b = np.ascontiguousarray(np.asarray(b, dtype=np.float64))
            if W.ndim != 2 or b.ndim != 1 or W.shape[1] != b.shape[0]:
                raise ShapeError(f"layer {k}: weight {W.shape} / bias {b.shape} mismatch")
            if fixed and fixed[-1][0].shape[1] != W.shape[0]:
                raise ShapeError(
                    f"layer {k}: fan-in {W.shape[0]} != previous fan-out {fixed[-1][0].shape[1]}")
            fixed.append((W, b))
        final = fixed[-1][0].shape[1]
        expected = 1 if self.n_classes == 1 else self.n_classes
        if final != expected:
            raise ShapeError(f"final fan-out {final} incompatible with {self.n_classes} classes")
        self.layers = fixed

    @property
    def input_dim(self):
        return self.layers[0][0].shape[0]

    @property
    def depth(self):
        return len(self.layers)

    def copy(self):
        return MlpNetwork([(W.copy(), b.copy()) for W, b in self.layers], self.n_classes)


@dataclass
class LabeledBatch:
    """Inputs (batch, m) with integer labels (batch,)."""

    inputs: np.ndarray
    labels: np.ndarray
    binary: bool = False

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(np.asarray(self.inputs, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.labels.ndim != 1:
            raise ShapeError("inputs must be (batch, m), labels (batch,)")
        if len(self.inputs) != len(self.labels) or len(self.inputs) < 1:
            raise ShapeError("batch must be non-empty with matching label count")
        if self.binary:
            if not np.all(np.isin(self.labels, (-1, 1))):
                raise ShapeError("binary labels must be -1 or +1")
        elif np.any(self.labels < 0):
            raise ShapeError("multiclass labels must be non-negative")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return LabeledBatch(self.inputs[idx], self.labels[idx], self.binary)


def init_network(widths, n_classes, rng):
    """Fresh network, weights uniform in +-sqrt(6/(fan_in+fan_out)), zero bias."""
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-lim, lim, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return MlpNetwork(layers, n_classes)


def _forward_trace(net, x):
    """Logits plus every hidden pre-activation (mask sources)."""
    h = x
    preacts = []
    for k, (W, b) in enumerate(net.layers):
        z = matvec(W, h, trans=True)
        z = z + b
        if k < net.depth - 1:
            preacts.append(z)
            h = np.maximum(z, 0.0)
        else:
            return z, preacts
    raise AssertionError("unreachable")


def mlp_forward(net, x):
    """Logit vector (length 1 in binary mode)."""
    x = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    if x.shape != (net.input_dim,):
        raise ShapeError(f"input shape {x.shape} != ({net.input_dim},)")
    return _forward_trace(net, x)[0]


def decision_value(net, x):
    """Binary-mode scalar output f(x)."""
    return float(mlp_forward(net, x)[0])


def predict(net, x):
    """Predicted label: sign (binary, sign(0) = +1) or smallest argmax."""
    out = mlp_forward(net, x)
    if net.n_classes == 1:
        return 1 if out[0] >= 0.0 else -1
    return int(np.argmax(out))


def forward_batch(net, X):
    """Row-wise forward; keeps per-sample arithmetic identical to mlp_forward."""
    X = np.asarray(X, dtype=np.float64)
    out = np.empty((len(X), net.layers[-1][0].shape[1]))
    for i in range(len(X)):
        out[i] = _forward_trace(net, np.ascontiguousarray(X[i]))[0]
    return out


def predict_batch(net, X):
    out = forward_batch(net, X)
    if net.n_classes == 1:
        return np.where(out[:, 0] >= 0.0, 1, -1).astype(np.int64)
    return np.argmax(out, axis=1).astype(np.int64)


def accuracy(net, batch):
    return float(np.mean(predict_batch(net, batch.inputs) == batch.labels))


def _backprop_seed(net, preacts, e):
    """Closed-form reverse chain: gradient of e . logits w.r.t. the input."""
    v = e
    for k in range(net.depth - 1, 0, -1):
        u = matvec(net.layers[k][0], v)
        v = np.where(preacts[k - 1] > 0.0, u, 0.0)
    return matvec(net.layers[0][0], v)


def input_gradient(net, x, class_index=None):
    """Gradient of one logit w.r.t. x.

    ``class_index`` is required in multiclass mode and forbidden in
    binary mode.
    """
    x = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    n_out = net.layers[-1][0].shape[1]
    if net.n_classes == 1:
        if class_index is not None:
            raise ShapeError("binary network takes no class index")
        e = np.ones(1)
    else:
        if class_index is None:
            raise ShapeError("multiclass network needs a class index")
        if not 0 <= class_index < n_out:
            raise ShapeError(f"class index {class_index} out of range 0..{n_out - 1}")
        e = np.zeros(n_out)
        e[class_index] = 1.0
    _, preacts = _forward_trace(net, x)
    return _backprop_seed(net, preacts, e)


def logit_pair_gradient(net, x, target, current):
    """Gradient of f_target - f_current w.r.t. x (multiclass attack step)."""
    n_out = net.layers[-1][0].shape[1]
    e = np.zeros(n_out)
    e[target] += 1.0
    e[current] -= 1.0
    _, preacts = _forward_trace(net, np.ascontiguousarray(np.asarray(x, dtype=np.float64)))
    return _backprop_seed(net, preacts, e)


def jacobian(net, x):
    """d logits / d x as an (m, n) matrix (columns are logit gradients)."""
    x = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    _, preacts = _forward_trace(net, x)
    V = np.eye(net.layers[-1][0].shape[1])
    for k in range(net.depth - 1, 0, -1):
        U = net.layers[k][0] @ V
        V = np.where(preacts[k - 1][:, None] > 0.0, U, 0.0)
    return net.layers[0][0] @ V


# -- graph construction ----------------------------------------------


@dataclass
class NetworkNodes:
    """Parameter node ids of a network bound into a graph."""

    graph: Graph
    net: MlpNetwork
    weights: list = field(default_factory=list)  # [(w_node, b_node)]


@dataclass
class ForwardTrace:
    logits: int
    preacts: list  # hidden pre-activation node ids


def bind_network(g, net, prefix=""):
    """Add the network's parameters to ``g`` as shared parameter nodes."""
    nn = NetworkNodes(g, net)
    for k, (W, b) in enumerate(net.layers):
        nn.weights.append((g.parameter(f"{prefix}W{k}", W), g.parameter(f"{prefix}b{k}", b)))
    return nn


def forward_graph(nn, x_node):
    """Append the forward pass starting from ``x_node``; returns a trace."""
    g = nn.graph
    h = x_node
    preacts = []
    for k, (w, b) in enumerate(nn.weights):
        z = g.add(g.matmul(w, h, transpose=True), b)
        if k < len(nn.weights) - 1:
            preacts.append(z)
            h = g.relu(z)
        else:
            return ForwardTrace(logits=z, preacts=preacts)
    raise AssertionError("unreachable")


def reverse_graph(nn, trace, seed_node):
    """Append the reverse chain for d(seed . logits)/dx.

    ``seed_node`` holds the seed vector over logits; masks are taken
    from the trace's pre-activation nodes (no gradient flows through
    them), weights are shared with the forward pass, so parameter
    gradients of anything built on the result flow through both paths.
    """
    g = nn.graph
    v = seed_node
    for k in range(len(nn.weights) - 1, 0, -1):
        u = g.matmul(nn.weights[k][0], v)
        v = g.relu_mask(u, trace.preacts[k - 1])
    return g.matmul(nn.weights[0][0], v)


def build_input_gradient_graph(nn, x_node, class_index=None, trace=None):
    """Graph node holding the gradient of one logit w.r.t. ``x_node``.

    Builds (or reuses) the forward chain, then appends the reverse
    network; evaluating the returned node reproduces
    :func:`input_gradient` bit for bit.
    """
    g = nn.graph
    net = nn.net
    n_out = net.layers[-1][0].shape[1]
    if net.n_classes == 1:
        if class_index is not None:
            raise ShapeError("binary network takes no class index")
        e = np.ones(1)
    else:
        if class_index is None:
            raise ShapeError("multiclass network needs a class index")
        if not 0 <= class_index < n_out:
            raise ShapeError(f"class index {class_index} out of range 0..{n_out - 1}")
        e = np.zeros(n_out)
        e[class_index] = 1.0
    if trace is None:
        trace = forward_graph(nn, x_node)
    return reverse_graph(nn, trace, g.constant(e))


# -- serialization ----------------------------------------------------

_HEADER = "MLPMODEL v1"


def save_model(net, path, config_hash=None):
    """Versioned flat text format; floats at 17 significant digits."""
    lines = [_HEADER]
    if config_hash:
        lines.append(f"meta config_hash={config_hash}")
    lines.append(f"classes {net.n_classes}")
    lines.append(f"layers {net.depth}")
    for W, b in net.layers:
        lines.append(f"layer {W.shape[0]} {W.shape[1]}")
        for row in W:
            lines.append(" ".join(f"{v:.17g}" for v in row))
        lines.append(" ".join(f"{v:.17g}" for v in b))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path):
    """Returns (net, config_hash or None)."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != _HEADER:
        raise ModelFormatError(f"{path}: missing '{_HEADER}' header")
    pos = 1
    config_hash = None
    if pos < len(lines) and lines[pos].startswith("meta config_hash="):
        config_hash = lines[pos].split("=", 1)[1]
        pos += 1

    def expect(tag):
        nonlocal pos
        if pos >= len(lines) or not lines[pos].startswith(tag + " "):
            raise ModelFormatError(f"{path}: expected '{tag} ...' at line {pos + 1}")
        parts = lines[pos].split()
        pos += 1
        return parts[1:]

    try:
        n_classes = int(expect("classes")[0])
        depth = int(expect("layers")[0])
        layers = []
        for _ in range(depth):
            fan_in, fan_out = (int(v) for v in expect("layer"))
            rows = []
            for _ in range(fan_in + 1):
                rows.append(np.array([float(v) for v in lines[pos].split()]))
                pos += 1
            W = np.vstack(rows[:-1])
            b = rows[-1]
            if W.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise ModelFormatError(f"{path}: layer payload does not match declared shape")
            layers.append((W, b))
    except (IndexError, ValueError) as e:
        raise ModelFormatError(f"{path}: truncated or malformed ({e})") from None
    return MlpNetwork(layers, n_classes), config_hash
