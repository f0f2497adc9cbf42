"""Comparison defenses: fixed-set adversarial training, online FGS
adversarial training, and Parseval (orthonormality) training."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .attacks import AttackConfig, deepfool, fgs
from .defense import DefenseConfig, deep_defense_objective, sgd_loop
from .errors import DegenerateGradientError
from .network import LabeledBatch

log = logging.getLogger(__name__)

_CLEAN = DefenseConfig(lam=0.0)


@dataclass
class ParsevalConfig:
    beta: float = 0.0001
    column_fraction: float = 0.3

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if not 0 < self.column_fraction <= 1:
            raise ValueError("column fraction must be in (0, 1]")


@dataclass
class AdvTrainConfig:
    mode: str = "fixed-deepfool"  # or "online-fgs"
    alpha: float = 0.5
    epsilon: float = 0.1
    augmentation_ratio: float = 0.5
    max_iterations: int = 50

    def __post_init__(self):
        if self.mode not in ("fixed-deepfool", "online-fgs"):
            raise ValueError(f"unknown adversarial-training mode '{self.mode}'")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must be in [0, 1]")
        if self.mode == "online-fgs" and self.epsilon <= 0:
            raise ValueError("online mode needs epsilon > 0")
        if not 0 <= self.augmentation_ratio <= 1:
            raise ValueError("augmentation ratio must be in [0, 1]")


def parseval_project(net, pcfg, rng):
    """One sampled-column tightness retraction per weight matrix.

    With rows oriented as output units, the sampled submatrix S gets
    S <- (1 + beta) S - beta W W^T S.  Mutates the net in place and
    returns it.
    """
    beta = pcfg.beta
    for W, _ in net.layers:
        oriented = W.T  # rows = output units (view into storage)
        cols = oriented.shape[1]
        k = int(math.ceil(pcfg.column_fraction * cols))
        idx = np.sort(rng.choice(cols, size=k, replace=False))
        S = oriented[:, idx]
        oriented[:, idx] = (1.0 + beta) * S - beta * (oriented @ (oriented.T @ S))
    return net


def generate_fixed_adversarial_set(net, train, ratio, rng, max_iterations=50):
    """Minimal perturbations (no overshoot) for a sampled subset, keeping
    original labels; degenerate samples are skipped with a warning."""
    count = int(math.ceil(ratio * len(train)))
    if count == 0:
        return None
    idx = np.sort(rng.choice(len(train), size=count, replace=False))
    cfg = AttackConfig(max_iterations=max_iterations, overshoot=0.0)
    xs, ys, skipped = [], [], 0
    for i in idx:
        try:
            res = deepfool(net, train.inputs[i], cfg)
        except DegenerateGradientError:
            skipped += 1
            continue
        xs.append(train.inputs[i] + res.delta)
        ys.append(train.labels[i])
    if skipped:
        log.warning("fixed adversarial set: skipped %d degenerate samples", skipped)
    if not xs:
        return None
    return LabeledBatch(np.vstack(xs), np.array(ys), train.binary)


def adv_train_fixed_set(net, train, val, tcfg, acfg, track_rho2=None):
    """Fine-tune on the union of the training set and a one-shot
    adversarial copy generated against the input net."""
    rng = np.random.default_rng((tcfg.seed, 0xADF))
    adv = generate_fixed_adversarial_set(
        net, train, acfg.augmentation_ratio, rng, acfg.max_iterations)
    if adv is None:
        augmented = train
    else:
        augmented = LabeledBatch(
            np.vstack([train.inputs, adv.inputs]),
            np.concatenate([train.labels, adv.labels]),
            train.binary)
    return sgd_loop(net, augmented, val, tcfg,
                    lambda n, b: deep_defense_objective(n, b, _CLEAN),
                    track_rho2=track_rho2)


def adv_train_online_fgs(net, train, val, tcfg, acfg, track_rho2=None):
    """Mixed objective alpha L(x) + (1 - alpha) L(x_adv), regenerating
    x_adv from the current parameters every step.  The sign step is
    data: no gradient flows through it."""
    alpha, eps = acfg.alpha, acfg.epsilon

    def step(n, batch):
        loss_c, grads_c = deep_defense_objective(n, batch, _CLEAN)
        if alpha == 1.0 or eps == 0.0:
            return loss_c, grads_c
        adv_inputs = np.vstack([
            fgs(n, batch.inputs[k], int(batch.labels[k]), eps) for k in range(len(batch))])
        adv_batch = LabeledBatch(adv_inputs, batch.labels, batch.binary)
        loss_a, grads_a = deep_defense_objective(n, adv_batch, _CLEAN)
        mixed = [
            (alpha * gW + (1 - alpha) * aW, alpha * gb + (1 - alpha) * ab)
            for (gW, gb), (aW, ab) in zip(grads_c, grads_a)
        ]
        return alpha * loss_c + (1 - alpha) * loss_a, mixed

    return sgd_loop(net, train, val, tcfg, step, track_rho2=track_rho2)


def parseval_train(net, train, val, tcfg, pcfg, track_rho2=None):
    """Clean objective with a tightness retraction after every step."""
    proj_rng = np.random.default_rng((tcfg.seed, 0x9A5))

    def project(n, step_index):
        parseval_project(n, pcfg, proj_rng)

    return sgd_loop(net, train, val, tcfg,
                    lambda n, b: deep_defense_objective(n, b, _CLEAN),
                    post_step=project, track_rho2=track_rho2)
