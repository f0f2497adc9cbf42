"""Perturbation-norm regularized training.

The regularizer unrolls the minimal-perturbation attack inside the
training graph: each unrolled step evaluates the network, appends the
reverse (input-gradient) chain sharing the forward weights, applies
the closed-form boundary step, and accumulates the perturbation.  The
scalar emitted per sample is exp(-c * rho) for correctly classified
samples and exp(+d * rho) for misclassified ones, with
rho = |perturbation| / |input|.  Discrete choices made while building
(target labels, truncation point) are frozen into the graph; ReLU
masks are re-derived from the live pre-activations at each forward
with no gradient of their own.

Gradients of the classification term come from the same graph through
a frozen-residual surrogate node whose first-order gradient equals the
cross-entropy (resp. logistic) gradient; the loss *value* reported is
the true loss, computed numerically.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGradientError, DivergenceError
from .graph import Graph
from .losses import cross_entropy, logistic_loss, logit_residual
from .network import (
    NetworkNodes,
    accuracy,
    bind_network,
    forward_graph,
    jacobian,
    predict_batch,
    reverse_graph,
)

log = logging.getLogger(__name__)

_GUARD = 1e-12
# Relative-norm ceiling for the unrolled walk.  A step through a
# near-flat region can jump orders of magnitude past the data scale;
# past this point the exp(d * rho) term would overflow (or saturate to
# zero on the correct side), so the recursion truncates instead.
_RHO_CEILING = 10.0


@dataclass
class DefenseConfig:
    lam: float = 15.0
    c: float = 25.0
    d: float = 5.0
    unroll: int = 4
    layer_mask: frozenset | None = None  # layers whose params receive reg gradients
    overshoot: float = 0.02  # evaluation attacks only; the graph never overshoots

    def __post_init__(self):
        if self.lam < 0 or self.c <= 0 or self.d <= 0:
            raise ValueError("lambda must be >= 0, c and d > 0")
        if self.unroll < 1:
            raise ValueError("unroll must be >= 1")
        if self.layer_mask is not None:
            self.layer_mask = frozenset(int(i) for i in self.layer_mask)


@dataclass
class TrainConfig:
    learning_rate: float = 0.002
    epochs: int = 10
    batch_size: int = 64
    momentum: float = 0.9
    seed: int = 0
    halve_lr_after: int | None = 4  # halve the rate once, after this epoch

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")


@dataclass
class SamplePartition:
    correct: np.ndarray  # indices predicted == label
    wrong: np.ndarray


def partition_batch(net, batch):
    """Split batch indices by whether the current net classifies them right."""
    hit = predict_batch(net, batch.inputs) == batch.labels
    idx = np.arange(len(batch))
    return SamplePartition(correct=idx[hit], wrong=idx[~hit])


def _graph_predict(net, logits):
    if net.n_classes == 1:
        return 1 if logits[0] >= 0.0 else -1
    return int(np.argmax(logits))


def _closest_target_index(net, x, logits, current):
    """Construction-time target choice (frozen into the graph)."""
    J = jacobian(net, x)
    best_j, best_score = -1, np.inf
    for j in range(len(logits)):
        if j == current:
            continue
        w = J[:, j] - J[:, current]
        gn = float(w @ w)
        if gn < _GUARD:
            continue
        score = abs(float(logits[j] - logits[current])) / math.sqrt(gn)
        if score < best_score:
            best_j, best_score = j, score
    return best_j


def build_regularizer_node(g, nn, x, y, in_correct_set, cfg, x_node=None, trace=None):
    """Append one sample's unrolled-perturbation scalar to ``g``.

    Returns (scalar node, steps actually unrolled).  ``x_node``/``trace``
    allow reuse of an already-built forward pass at x.
    """
    net = nn.net
    x = np.asarray(x, dtype=np.float64)
    if float(x @ x) <= 0.0:
        raise ValueError("regularized sample must have a positive norm")
    if x_node is None:
        x_node = g.constant(x)
        trace = forward_graph(nn, x_node)
    g.run_pending()
    start_pred = _graph_predict(net, g.value_view(trace.logits))

    delta_node = None
    cur_x = x
    steps = 0
    for it in range(cfg.unroll):
        logits = g.value_view(trace.logits).copy()
        if net.n_classes == 1:
            gap_sources = (g.select(trace.logits, 0),)
            seed = np.ones(1)
        else:
            current = int(np.argmax(logits))
            if in_correct_set:
                target = _closest_target_index(net, cur_x, logits, current)
            else:
                target = int(y)  # walk the misclassified sample toward its truth
            if target < 0:
                if steps == 0:
                    raise DegenerateGradientError(
                        "all boundary gradients degenerate at the sample point")
                break  # flat region mid-recursion: truncate here
            gap_sources = (g.select(trace.logits, target),
                           g.neg(g.select(trace.logits, current)))
            seed = np.zeros(len(logits))
            seed[target] += 1.0
            seed[current] -= 1.0
        grad_node = reverse_graph(nn, trace, g.constant(seed))
        norm_node = g.sq_norm(grad_node)
        g.run_pending()
        gn = g.scalar(norm_node)
        if gn < _GUARD:
            # the in-graph divide would trip its guard; decide now instead
            if steps == 0:
                raise DegenerateGradientError(
                    "boundary gradient vanished at the sample point")
            break
        if net.n_classes == 1:
            gap_val = float(logits[0])
        else:
            gap_val = float(logits[target] - logits[current])
        held = 0.0 if delta_node is None else float(np.linalg.norm(g.value_view(delta_node)))
        bound = (held + abs(gap_val) / math.sqrt(gn)) / float(np.linalg.norm(x))
        if bound > _RHO_CEILING:
            if steps == 0:
                raise DegenerateGradientError(
                    f"first attack step spans {bound:.1f}x the input norm")
            break
        gap_node = gap_sources[0] if len(gap_sources) == 1 else g.add(*gap_sources)
        coef = g.neg(g.div(gap_node, norm_node))
        r_node = g.mul(grad_node, coef)
        delta_node = r_node if delta_node is None else g.add(delta_node, r_node)
        g.run_pending()
        steps += 1
        if it + 1 < cfg.unroll:
            next_x_node = g.add(x_node, delta_node)
            trace = forward_graph(nn, next_x_node)
            g.run_pending()
            cur_x = g.value_view(next_x_node).copy()
            if _graph_predict(net, g.value_view(trace.logits)) != start_pred:
                break
    if delta_node is None:
        return None, 0
    rho = g.div(g.l2_norm(delta_node), g.l2_norm(x_node))
    arg = g.scale(rho, -cfg.c if in_correct_set else cfg.d)
    return g.exp(arg), steps


def build_regularizer_graph(net, x, y, in_correct_set, cfg):
    """Stand-alone variant: fresh graph, returns (graph, scalar node)."""
    g = Graph()
    nn = bind_network(g, net)
    node, _ = build_regularizer_node(g, nn, x, y, in_correct_set, cfg)
    g.run_pending()
    return g, node


def _surrogate_node(g, nn, trace, y):
    """Loss-gradient surrogate for one sample; returns (node, true loss)."""
    g.run_pending()
    logits = g.value_view(trace.logits).copy()
    net = nn.net
    if net.n_classes == 1:
        loss = logistic_loss(logits[0], int(y))
    else:
        loss = cross_entropy(logits, int(y))
    residual = logit_residual(net, logits, int(y))
    return g.sum(g.mul(trace.logits, g.constant(residual))), loss


def _chain_sum(g, nodes):
    total = nodes[0]
    for node in nodes[1:]:
        total = g.add(total, node)
    return total


def deep_defense_objective(net, batch, cfg):
    """Loss and parameter gradients of the regularized objective.

    Both terms are sums over the batch.  Classification-path and
    regularizer-path gradients are accumulated by separate backward
    passes so a layer mask can zero the latter without touching the
    former; the total is cls + lambda * reg.
    """
    part = partition_batch(net, batch)
    in_correct = np.zeros(len(batch), dtype=bool)
    in_correct[part.correct] = True

    g = Graph()
    nn = bind_network(g, net)
    surrogates = []
    reg_nodes = []
    loss_cls = 0.0
    skipped = 0
    for k in range(len(batch)):
        x = batch.inputs[k]
        x_node = g.constant(x)
        trace = forward_graph(nn, x_node)
        node, loss = _surrogate_node(g, nn, trace, batch.labels[k])
        surrogates.append(node)
        loss_cls += loss
        if cfg.lam > 0.0:
            try:
                reg, _ = build_regularizer_node(
                    g, nn, x, batch.labels[k], bool(in_correct[k]), cfg,
                    x_node=x_node, trace=trace)
            except DegenerateGradientError:
                # zero boundary gradient at the sample itself: the attack
                # cannot start, so the sample carries no perturbation term
                skipped += 1
                continue
            if reg is not None:
                reg_nodes.append(reg)
    if skipped:
        log.warning("regularizer skipped %d degenerate samples in a batch of %d",
                    skipped, len(batch))
    cls_total = _chain_sum(g, surrogates)
    reg_total = _chain_sum(g, reg_nodes) if reg_nodes else None
    g.run_pending()

    grads = g.backward(cls_total)
    gW = [grads[f"W{k}"] for k in range(net.depth)]
    gb = [grads[f"b{k}"] for k in range(net.depth)]
    loss = loss_cls
    if reg_total is not None:
        loss += cfg.lam * g.scalar(reg_total)
        rgrads = g.backward(reg_total)
        for k in range(net.depth):
            if cfg.layer_mask is not None and k not in cfg.layer_mask:
                continue
            gW[k] = gW[k] + cfg.lam * rgrads[f"W{k}"]
            gb[k] = gb[k] + cfg.lam * rgrads[f"b{k}"]
    return loss, list(zip(gW, gb))


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    benign_accuracy: float
    rho2: float


def _history_rho2(net, val, attack_cfg, cap):
    # local import: evaluation sits on top of the attack stack
    from .evaluation import compute_rho2

    subset = val if cap is None or cap >= len(val) else val.subset(np.arange(cap))
    return compute_rho2(net, subset, attack_cfg)


def sgd_loop(net, train, val, tcfg, grads_fn, post_step=None, track_rho2=None):
    """Mini-batch SGD with momentum; returns (trained copy, history).

    ``grads_fn(net, batch) -> (loss, [(gW, gb), ...])`` supplies the
    step; ``post_step(net, step_index)`` runs after each update.
    ``track_rho2`` is an optional ``(attack_cfg, sample_cap)`` pair;
    when absent the history rho2 column is NaN-free zero-cost (-1).
    """
    net = net.copy()
    rng = np.random.default_rng(tcfg.seed)
    vel = [(np.zeros_like(W), np.zeros_like(b)) for W, b in net.layers]
    lr = tcfg.learning_rate
    history = []
    step_index = 0
    for epoch in range(1, tcfg.epochs + 1):
        order = rng.permutation(len(train))
        epoch_loss = 0.0
        for lo in range(0, len(train), tcfg.batch_size):
            batch = train.subset(order[lo : lo + tcfg.batch_size])
            loss, grads = grads_fn(net, batch)
            if not math.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss {loss} at epoch {epoch}, step {step_index}")
            epoch_loss += loss
            for k, (W, b) in enumerate(net.layers):
                vW, vb = vel[k]
                gWk, gbk = grads[k]
                vW *= tcfg.momentum
                vW += gWk
                vb *= tcfg.momentum
                vb += gbk
                W -= lr * vW
                b -= lr * vb
            step_index += 1
            if post_step is not None:
                post_step(net, step_index)
        if tcfg.halve_lr_after is not None and epoch == tcfg.halve_lr_after:
            lr *= 0.5
        rho2 = -1.0
        acc = -1.0
        if val is not None and len(val) > 0:
            acc = accuracy(net, val)
            if track_rho2 is not None:
                rho2 = _history_rho2(net, val, track_rho2[0], track_rho2[1])
        history.append(EpochStats(epoch, epoch_loss, acc, rho2))
    return net, history


def finetune_deep_defense(net, train, val, dcfg, tcfg, track_rho2=None):
    """Fine-tune a trained reference with the regularized objective."""
    return sgd_loop(
        net, train, val, tcfg,
        lambda n, b: deep_defense_objective(n, b, dcfg),
        track_rho2=track_rho2)


def finetune_clean(net, train, val, tcfg, track_rho2=None):
    """Benign fine-tuning: the same loop with the regularizer off."""
    return finetune_deep_defense(
        net, train, val, DefenseConfig(lam=0.0), tcfg, track_rho2=track_rho2)
