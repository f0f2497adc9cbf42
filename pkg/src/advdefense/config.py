"""Flat key=value experiment configuration.

The format is one ``section.key=value`` pair per line; ``#`` starts a
comment.  Validation collects every problem before failing so a config
can be fixed in one pass.  The config hash (sha256 over the canonical
sorted key=value lines, output location excluded) stamps every
artifact an experiment writes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .attacks import AttackConfig
from .baselines import AdvTrainConfig, ParsevalConfig
from .data import DatasetSpec
from .defense import DefenseConfig, TrainConfig
from .errors import ConfigError

METHODS = ("clean", "deep-defense", "adv-train-1", "adv-train-2", "parseval")

_KNOWN_KEYS = {
    "method",
    "arch.widths",
    "dataset.kind", "dataset.classes", "dataset.samples-per-class", "dataset.noise",
    "dataset.dim", "dataset.centers-per-class", "dataset.seed",
    "dataset.train-fraction", "dataset.val-fraction", "dataset.test-fraction",
    "dataset.train-images", "dataset.train-labels", "dataset.test-images",
    "dataset.test-labels", "dataset.limit-train", "dataset.limit-test",
    "dataset.mean-subtract",
    "defense.lambda", "defense.c", "defense.d", "defense.unroll",
    "defense.layer-mask", "defense.overshoot",
    "advtrain.alpha", "advtrain.epsilon", "advtrain.ratio", "advtrain.max-iterations",
    "parseval.beta", "parseval.column-fraction",
    "reference.lr", "reference.epochs", "reference.batch-size", "reference.momentum",
    "reference.halve-lr-after", "reference.seed",
    "train.lr", "train.epochs", "train.batch-size", "train.momentum",
    "train.halve-lr-after", "train.seed",
    "attack.max-iterations", "attack.overshoot",
    "eval.grid-points", "eval.grid-lo", "eval.grid-hi", "eval.grid-scale",
    "eval.rho2-samples", "eval.history-samples", "eval.model", "eval.pivot-model",
    "output.dir",
}


def parse_config_text(text):
    """Raw key -> value mapping; raises ConfigError on malformed lines."""
    pairs = {}
    problems = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {lineno}: expected key=value, got '{raw.strip()}'")
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        if key in pairs:
            problems.append(f"line {lineno}: duplicate key '{key}'")
            continue
        pairs[key] = value
    if problems:
        raise ConfigError(problems)
    return pairs


def config_hash(pairs):
    lines = sorted(f"{k}={v}" for k, v in pairs.items() if k != "output.dir")
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]


def canonical_text(pairs):
    return "\n".join(sorted(f"{k}={v}" for k, v in pairs.items())) + "\n"


@dataclass
class EvalSettings:
    grid_points: int = 40
    grid_lo: float = 1e-3
    grid_hi: float = 1.0
    grid_scale: float = 1.0
    rho2_samples: int | None = None     # cap for the final report attack
    history_samples: int | None = 128   # cap for per-epoch history rho2
    model: str = ""                     # model file for the eval subcommand
    pivot_model: str = ""               # optional epsilon-ref pivot


@dataclass
class ExperimentConfig:
    method: str
    widths: list
    dataset: DatasetSpec
    defense: DefenseConfig
    advtrain: AdvTrainConfig
    parseval: ParsevalConfig
    reference: TrainConfig
    train: TrainConfig
    attack: AttackConfig
    eval: EvalSettings
    out_dir: str
    hash: str
    raw: dict = field(default_factory=dict)

    @property
    def n_classes(self):
        return 1 if self.widths[-1] == 1 else self.widths[-1]


class _Reader:
    """Typed accessors over the raw pairs, accumulating problems."""

    def __init__(self, pairs):
        self.pairs = pairs
        self.problems = []

    def get(self, key, default=None):
        return self.pairs.get(key, default)

    def _convert(self, key, default, conv, kind):
        raw = self.pairs.get(key)
        if raw is None or raw == "":
            return default
        try:
            return conv(raw)
        except ValueError:
            self.problems.append(f"{key}: cannot parse '{raw}' as {kind}")
            return default

    def num(self, key, default):
        return self._convert(key, default, float, "a number")

    def integer(self, key, default):
        return self._convert(key, default, int, "an integer")

    def flag(self, key, default):
        def conv(v):
            if v.lower() in ("true", "1", "yes"):
                return True
            if v.lower() in ("false", "0", "no"):
                return False
            raise ValueError(v)
        return self._convert(key, default, conv, "a boolean")

    def int_list(self, key, default):
        def conv(v):
            return [int(part) for part in v.split(",") if part.strip() != ""]
        return self._convert(key, default, conv, "a comma-separated integer list")

    def optional_int(self, key):
        raw = self.pairs.get(key)
        if raw in (None, "", "none"):
            return None
        return self._convert(key, None, int, "an integer")


def build_experiment(pairs, base_dir="."):
    """Validate raw pairs into an ExperimentConfig; all problems at once."""
    r = _Reader(pairs)
    unknown = sorted(set(pairs) - _KNOWN_KEYS)
    for key in unknown:
        r.problems.append(f"unknown key '{key}'")

    method = r.get("method", "clean")
    if method not in METHODS:
        r.problems.append(f"method: '{method}' is not one of {', '.join(METHODS)}")

    widths = r.int_list("arch.widths", [2, 16, 2])
    if len(widths) < 2 or any(w < 1 for w in widths):
        r.problems.append(f"arch.widths: need at least two positive extents, got {widths}")

    def build(cls, kwargs, prefix):
        try:
            return cls(**kwargs)
        except ValueError as e:
            r.problems.append(f"{prefix}: {e}")
            return None

    dataset = build(DatasetSpec, dict(
        kind=r.get("dataset.kind", "synthetic-moons"),
        classes=r.integer("dataset.classes", 2),
        samples_per_class=r.integer("dataset.samples-per-class", 500),
        noise=r.num("dataset.noise", 0.1),
        dim=r.integer("dataset.dim", 2),
        centers_per_class=r.integer("dataset.centers-per-class", 1),
        seed=r.integer("dataset.seed", 0),
        train_fraction=r.num("dataset.train-fraction", 0.7),
        val_fraction=r.num("dataset.val-fraction", 0.1),
        test_fraction=r.num("dataset.test-fraction", 0.2),
        train_images=r.get("dataset.train-images", ""),
        train_labels=r.get("dataset.train-labels", ""),
        test_images=r.get("dataset.test-images", ""),
        test_labels=r.get("dataset.test-labels", ""),
        limit_train=r.optional_int("dataset.limit-train"),
        limit_test=r.optional_int("dataset.limit-test"),
        mean_subtract=r.flag("dataset.mean-subtract", False),
        binary=(widths[-1] == 1 if widths else False),
    ), "dataset")

    mask = r.int_list("defense.layer-mask", None)
    defense = build(DefenseConfig, dict(
        lam=r.num("defense.lambda", 15.0),
        c=r.num("defense.c", 25.0),
        d=r.num("defense.d", 5.0),
        unroll=r.integer("defense.unroll", 4),
        layer_mask=frozenset(mask) if mask else None,
        overshoot=r.num("defense.overshoot", 0.02),
    ), "defense")

    advtrain = build(AdvTrainConfig, dict(
        mode="online-fgs" if method == "adv-train-2" else "fixed-deepfool",
        alpha=r.num("advtrain.alpha", 0.5),
        epsilon=r.num("advtrain.epsilon", 0.1),
        augmentation_ratio=r.num("advtrain.ratio", 0.5),
        max_iterations=r.integer("advtrain.max-iterations", 50),
    ), "advtrain")

    parseval = build(ParsevalConfig, dict(
        beta=r.num("parseval.beta", 0.0001),
        column_fraction=r.num("parseval.column-fraction", 0.3),
    ), "parseval")

    def train_cfg(prefix, defaults):
        return build(TrainConfig, dict(
            learning_rate=r.num(f"{prefix}.lr", defaults["lr"]),
            epochs=r.integer(f"{prefix}.epochs", defaults["epochs"]),
            batch_size=r.integer(f"{prefix}.batch-size", defaults["batch"]),
            momentum=r.num(f"{prefix}.momentum", 0.9),
            halve_lr_after=r.optional_int(f"{prefix}.halve-lr-after")
            if f"{prefix}.halve-lr-after" in pairs else defaults["halve"],
            seed=r.integer(f"{prefix}.seed", defaults["seed"]),
        ), prefix)

    reference = train_cfg("reference", dict(lr=2e-4, epochs=20, batch=64, halve=None, seed=0))
    train = train_cfg("train", dict(lr=1e-4, epochs=8, batch=64, halve=4, seed=0))

    attack = build(AttackConfig, dict(
        max_iterations=r.integer("attack.max-iterations", 50),
        overshoot=r.num("attack.overshoot", 0.02),
    ), "attack")

    eval_cfg = EvalSettings(
        grid_points=r.integer("eval.grid-points", 40),
        grid_lo=r.num("eval.grid-lo", 1e-3),
        grid_hi=r.num("eval.grid-hi", 1.0),
        grid_scale=r.num("eval.grid-scale", 1.0),
        rho2_samples=r.optional_int("eval.rho2-samples"),
        history_samples=r.optional_int("eval.history-samples")
        if "eval.history-samples" in pairs else 128,
        model=r.get("eval.model", ""),
        pivot_model=r.get("eval.pivot-model", ""),
    )

    out_dir = r.get("output.dir", base_dir)

    if r.problems:
        raise ConfigError(r.problems)
    return ExperimentConfig(
        method=method, widths=widths, dataset=dataset, defense=defense,
        advtrain=advtrain, parseval=parseval, reference=reference, train=train,
        attack=attack, eval=eval_cfg, out_dir=out_dir,
        hash=config_hash(pairs), raw=dict(pairs))


def load_config(path, overrides=None):
    with open(path) as fh:
        pairs = parse_config_text(fh.read())
    if overrides:
        pairs.update(overrides)
    return build_experiment(pairs)
