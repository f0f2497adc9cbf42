"""Robustness metrics: mean relative perturbation norm (rho_2), FGS
accuracy curves, the 50%-misclassification reference magnitude, and
the combined report."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .attacks import AttackConfig, deepfool, fgs
from .errors import DegenerateGradientError
from .losses import loss_input_gradient
from .network import accuracy, predict as _predict

log = logging.getLogger(__name__)

MULTIPLIERS = (0.2, 0.5, 1.0)


@dataclass
class PerSampleRecord:
    index: int
    label: int
    predicted: int
    correct: bool
    relative_norm: float
    fooled: bool


@dataclass
class EpsilonRef:
    epsilon: float
    reached_half: bool  # false when even the largest grid value fails


@dataclass
class EvalReport:
    benign_accuracy: float
    rho2: float
    epsilon_ref: float
    epsilon_ref_reached: bool
    fgs_accuracy_at: dict  # multiplier (as str) -> accuracy
    degenerate_count: int
    per_sample: list = field(default_factory=list)
    config_hash: str | None = None

    def to_json(self):
        payload = asdict(self)
        payload["per_sample"] = [asdict(r) for r in self.per_sample]
        return json.dumps(payload, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text):
        payload = json.loads(text)
        payload["per_sample"] = [PerSampleRecord(**r) for r in payload["per_sample"]]
        return cls(**payload)


def attack_records(net, dataset, cfg=None):
    """Per-sample minimal-perturbation records in index order.

    Samples where the attack degenerates contribute the partial
    perturbation accumulated before the failure; their count is
    reported and logged.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    cfg = cfg or AttackConfig()
    records = []
    degenerate = 0
    for k in range(len(dataset)):
        x = dataset.inputs[k]
        benign = _predict(net, x)
        try:
            res = deepfool(net, x, cfg)
        except DegenerateGradientError as e:
            res = e.partial_result
            degenerate += 1
        records.append(PerSampleRecord(
            index=k,
            label=int(dataset.labels[k]),
            predicted=int(benign),
            correct=bool(benign == dataset.labels[k]),
            relative_norm=float(res.relative_norm),
            fooled=bool(res.fooled),
        ))
    if degenerate:
        log.warning("attack degenerated on %d of %d samples", degenerate, len(dataset))
    return records, degenerate


def rho2_from_records(records):
    total = 0.0
    for r in records:  # fixed index-order reduction
        total += r.relative_norm
    return total / len(records)


def compute_rho2(net, dataset, cfg=None):
    """Mean relative perturbation norm over the whole dataset."""
    records, _ = attack_records(net, dataset, cfg)
    return rho2_from_records(records)


def fgs_accuracy(net, dataset, epsilon):
    """Fraction of samples still classified correctly after the sign step."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    hits = 0
    for k in range(len(dataset)):
        y = int(dataset.labels[k])
        if _predict(net, fgs(net, dataset.inputs[k], y, epsilon)) == y:
            hits += 1
    return hits / len(dataset)


def fgs_accuracy_curve(net, dataset, grid):
    """Accuracy at each grid magnitude, reusing one sign vector per sample."""
    signs = np.vstack([
        np.sign(loss_input_gradient(net, dataset.inputs[k], int(dataset.labels[k])))
        for k in range(len(dataset))
    ])
    out = []
    for eps in grid:
        hits = 0
        for k in range(len(dataset)):
            x = dataset.inputs[k] + eps * signs[k]
            if _predict(net, x) == dataset.labels[k]:
                hits += 1
        out.append(hits / len(dataset))
    return np.array(out)


def default_epsilon_grid(scale=1.0, points=40, lo=1e-3, hi=1.0):
    """Geometric sweep between lo and hi fractions of the input scale."""
    return scale * np.geomspace(lo, hi, points)


def find_epsilon_ref(net, dataset, grid):
    """Smallest grid magnitude at which at least half the perturbed
    samples are misclassified; falls back to the largest grid value
    (flagged) when none qualifies."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("empty grid")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly ascending")
    acc = fgs_accuracy_curve(net, dataset, grid)
    for eps, a in zip(grid, acc):
        if 1.0 - a >= 0.5:
            return EpsilonRef(float(eps), True)
    return EpsilonRef(float(grid[-1]), False)


def full_report(net, dataset, attack_cfg=None, grid=None, pivot_epsilon_ref=None,
                config_hash=None):
    """All metrics in one pass.

    ``pivot_epsilon_ref`` substitutes an externally determined
    reference magnitude (from the designated pivot model) for the
    self-computed one; scaled accuracies are evaluated either way.
    """
    if grid is None:
        grid = default_epsilon_grid()
    records, degenerate = attack_records(net, dataset, attack_cfg)
    if pivot_epsilon_ref is None:
        ref = find_epsilon_ref(net, dataset, grid)
        eps_ref, reached = ref.epsilon, ref.reached_half
    else:
        eps_ref, reached = float(pivot_epsilon_ref), True
    fgs_at = {
        str(m): fgs_accuracy(net, dataset, m * eps_ref) for m in MULTIPLIERS
    }
    return EvalReport(
        benign_accuracy=accuracy(net, dataset),
        rho2=rho2_from_records(records),
        epsilon_ref=eps_ref,
        epsilon_ref_reached=reached,
        fgs_accuracy_at=fgs_at,
        degenerate_count=degenerate,
        per_sample=records,
        config_hash=config_hash,
    )


def write_per_sample_csv(records, path, config_hash=None):
    lines = []
    if config_hash:
        lines.append(f"# config_hash={config_hash}")
    lines.append("index,label,predicted,relative_norm,fooled")
    for r in records:
        lines.append(f"{r.index},{r.label},{r.predicted},{r.relative_norm!r},{int(r.fooled)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
