"""DeepFool (binary and multiclass) and the fast gradient sign attack.

Attacks are pure functions of (net, x): evaluation-time procedures
over a read-only network, safe to run in parallel across samples.

The DeepFool loop takes the minimal step to the linearized decision
boundary each iteration.  The overshoot factor (1 + eta) is applied
only when checking whether the attack goal is reached and in the
returned adversarial label; the recorded perturbation norm is the
un-overshot one, which is what the rho_2 metric averages.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGradientError
from .losses import loss_input_gradient
from .network import (
    _backprop_seed,
    _forward_trace,
    decision_value,
    input_gradient,
    predict,
)

_GUARD = 1e-12


@dataclass
class AttackConfig:
    max_iterations: int = 50
    overshoot: float = 0.02

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.overshoot < 0:
            raise ValueError("overshoot must be >= 0")


@dataclass
class PerturbationResult:
    delta: np.ndarray
    addends: list = field(default_factory=list)
    iterations: int = 0
    fooled: bool = False
    final_label: int = 0
    relative_norm: float = 0.0


def _finish(net, x, delta, addends, iterations, orig, overshoot, x_norm):
    adv = x + (1.0 + overshoot) * delta
    final = predict(net, adv)
    return PerturbationResult(
        delta=delta,
        addends=addends,
        iterations=iterations,
        fooled=final != orig,
        final_label=final,
        relative_norm=float(np.linalg.norm(delta) / x_norm),
    )


def _checked_norm(x):
    n = float(np.linalg.norm(x))
    if n <= 0.0:
        raise ValueError("attack input must have a positive norm")
    return n


def deepfool_binary(net, x, cfg=None):
    """Minimal-step boundary walk for the sign classifier.

    Raises DegenerateGradientError (carrying the partial result) when
    the input gradient vanishes mid-run.
    """
    cfg = cfg or AttackConfig()
    x = np.asarray(x, dtype=np.float64)
    x_norm = _checked_norm(x)
    orig = predict(net, x)
    delta = np.zeros_like(x)
    addends = []
    for i in range(cfg.max_iterations):
        xi = x + delta
        f = decision_value(net, xi)
        grad = input_gradient(net, xi)
        gn = float(grad @ grad)
        if gn < _GUARD:
            raise DegenerateGradientError(
                f"gradient norm^2 {gn:g} below guard at iteration {i}",
                partial_result=_finish(net, x, delta, addends, i, orig, cfg.overshoot, x_norm))
        r = (-(f / gn)) * grad
        delta = delta + r
        addends.append(r)
        if not np.any(r):
            # f(x + delta) was exactly 0: no step possible, predict stays +1
            return _finish(net, x, delta, addends, i + 1, orig, cfg.overshoot, x_norm)
        if predict(net, x + (1.0 + cfg.overshoot) * delta) != orig:
            return _finish(net, x, delta, addends, i + 1, orig, cfg.overshoot, x_norm)
    return _finish(net, x, delta, addends, cfg.max_iterations, orig, cfg.overshoot, x_norm)


def _boundary_step(net, xi, target_label=None):
    """Closest linearized boundary at xi: (logit gap, its gradient, target).

    All candidate gradients come from the same matvec reverse chain
    the binary attack uses, so an (f, -f) two-logit network walks the
    exact same iterates as its sign-classifier twin.  Ties in the
    candidate score break to the smallest class index.  When
    ``target_label`` is given the search is skipped (forced target).
    """
    logits, preacts = _forward_trace(net, xi)
    current = int(np.argmax(logits))
    n_out = len(logits)
    best = None
    candidates = [target_label] if target_label is not None else range(n_out)
    for j in candidates:
        if j == current:
            continue
        e = np.zeros(n_out)
        e[j] += 1.0
        e[current] -= 1.0
        grad = _backprop_seed(net, preacts, e)
        gn = float(grad @ grad)
        if gn < _GUARD:
            continue
        gap = float(logits[j] - logits[current])
        score = abs(gap) / np.sqrt(gn)
        if best is None or score < best[0]:
            best = (score, j, gap, grad, gn)
    return best, current


def deepfool_multiclass(net, x, cfg=None):
    """Iterative minimal perturbation for argmax classifiers.

    Each iteration picks the closest linearized boundary among all
    other classes and applies the binary step to that logit difference.
    """
    cfg = cfg or AttackConfig()
    x = np.asarray(x, dtype=np.float64)
    x_norm = _checked_norm(x)
    orig = predict(net, x)
    delta = np.zeros_like(x)
    addends = []
    for i in range(cfg.max_iterations):
        best, _ = _boundary_step(net, x + delta)
        if best is None:
            raise DegenerateGradientError(
                f"all boundary gradients degenerate at iteration {i}",
                partial_result=_finish(net, x, delta, addends, i, orig, cfg.overshoot, x_norm))
        _, target, gap, grad, gn = best
        r = (-(gap / gn)) * grad
        delta = delta + r
        addends.append(r)
        if not np.any(r):
            return _finish(net, x, delta, addends, i + 1, orig, cfg.overshoot, x_norm)
        if predict(net, x + (1.0 + cfg.overshoot) * delta) != orig:
            return _finish(net, x, delta, addends, i + 1, orig, cfg.overshoot, x_norm)
    return _finish(net, x, delta, addends, cfg.max_iterations, orig, cfg.overshoot, x_norm)


def deepfool(net, x, cfg=None):
    if net.n_classes == 1:
        return deepfool_binary(net, x, cfg)
    return deepfool_multiclass(net, x, cfg)


def fgs(net, x, label, epsilon):
    """x + epsilon * sign(dL/dx); sign(0) contributes nothing."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    if epsilon == 0:
        return x.copy()
    return x + epsilon * np.sign(loss_input_gradient(net, x, label))
