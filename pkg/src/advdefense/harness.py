"""Experiment orchestration: reference training, method application,
evaluation artifacts, and parameter sweeps.

Every artifact carries the config hash; re-running with the same
config and seeds reproduces report JSON byte for byte (no timestamps,
shortest-round-trip floats, sorted keys).
"""

from __future__ import annotations

import itertools
import logging
import os
from dataclasses import dataclass

import numpy as np

from .baselines import adv_train_fixed_set, adv_train_online_fgs, parseval_train
from .config import build_experiment, canonical_text, config_hash
from .data import prepare_dataset
from .defense import finetune_clean, finetune_deep_defense
from .errors import ConfigError
from .evaluation import default_epsilon_grid, find_epsilon_ref, full_report, write_per_sample_csv
from .network import init_network, load_model, save_model

log = logging.getLogger(__name__)

REFERENCE_FILE = "reference.model"
MODEL_FILE = "model.model"
REPORT_FILE = "report.json"
HISTORY_FILE = "history.csv"
REFERENCE_HISTORY_FILE = "reference_history.csv"
PER_SAMPLE_FILE = "per_sample.csv"
CONFIG_FILE = "config.txt"


def write_history_csv(history, path, cfg_hash):
    lines = [f"# config_hash={cfg_hash}", "epoch,train-loss,benign-accuracy,rho2"]
    for row in history:
        lines.append(f"{row.epoch},{row.train_loss!r},{row.benign_accuracy!r},{row.rho2!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _eval_grid(cfg):
    return default_epsilon_grid(
        scale=cfg.eval.grid_scale, points=cfg.eval.grid_points,
        lo=cfg.eval.grid_lo, hi=cfg.eval.grid_hi)


def _subset(batch, cap):
    if cap is None or cap >= len(batch):
        return batch
    return batch.subset(np.arange(cap))


def train_reference(cfg, data, out_dir):
    """Train (or reload) the clean reference model for this config."""
    path = os.path.join(out_dir, REFERENCE_FILE)
    if os.path.exists(path):
        net, stamp = load_model(path)
        if stamp == cfg.hash:
            log.info("reference reloaded from %s", path)
            return net
        log.info("reference at %s has a different config hash; retraining", path)
    net = init_network(cfg.widths, cfg.n_classes, np.random.default_rng(cfg.reference.seed))
    net, history = finetune_clean(net, data.train, data.val or data.test, cfg.reference)
    save_model(net, path, config_hash=cfg.hash)
    write_history_csv(history, os.path.join(out_dir, REFERENCE_HISTORY_FILE), cfg.hash)
    return net


def apply_method(cfg, reference, data):
    """Fine-tune the reference with the configured defense method."""
    val = data.val or data.test
    track = (cfg.attack, cfg.eval.history_samples)
    if cfg.method == "clean":
        return finetune_clean(reference, data.train, val, cfg.train, track_rho2=track)
    if cfg.method == "deep-defense":
        return finetune_deep_defense(reference, data.train, val, cfg.defense, cfg.train,
                                     track_rho2=track)
    if cfg.method == "adv-train-1":
        return adv_train_fixed_set(reference, data.train, val, cfg.train, cfg.advtrain,
                                   track_rho2=track)
    if cfg.method == "adv-train-2":
        return adv_train_online_fgs(reference, data.train, val, cfg.train, cfg.advtrain,
                                    track_rho2=track)
    if cfg.method == "parseval":
        return parseval_train(reference, data.train, val, cfg.train, cfg.parseval,
                              track_rho2=track)
    raise ConfigError([f"method: unknown '{cfg.method}'"])


@dataclass
class ExperimentResult:
    out_dir: str
    report: object
    model_path: str


def evaluate_model(cfg, net, data):
    grid = _eval_grid(cfg)
    test = _subset(data.test, cfg.eval.rho2_samples)
    pivot_eps = None
    if cfg.eval.pivot_model:
        pivot_net, _ = load_model(cfg.eval.pivot_model)
        pivot_eps = find_epsilon_ref(pivot_net, test, grid).epsilon
    return full_report(net, test, cfg.attack, grid,
                       pivot_epsilon_ref=pivot_eps, config_hash=cfg.hash)


def run_experiment(cfg):
    """Reference -> method -> metrics, all artifacts under cfg.out_dir."""
    out_dir = cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, CONFIG_FILE), "w") as fh:
        fh.write(f"# config_hash={cfg.hash}\n")
        fh.write(canonical_text(cfg.raw))
    data = prepare_dataset(cfg.dataset)
    reference = train_reference(cfg, data, out_dir)
    net, history = apply_method(cfg, reference, data)
    model_path = os.path.join(out_dir, MODEL_FILE)
    save_model(net, model_path, config_hash=cfg.hash)
    write_history_csv(history, os.path.join(out_dir, HISTORY_FILE), cfg.hash)
    report = evaluate_model(cfg, net, data)
    with open(os.path.join(out_dir, REPORT_FILE), "w") as fh:
        fh.write(report.to_json())
    write_per_sample_csv(report.per_sample, os.path.join(out_dir, PER_SAMPLE_FILE),
                         config_hash=cfg.hash)
    return ExperimentResult(out_dir=out_dir, report=report, model_path=model_path)


SWEEP_FILE = "sweep.csv"

# layer-wise study: regularize one layer at a time across the c range
LAYER_MASK_PRESET = {"defense.layer-mask": None, "defense.c": "5,15,25,35,45"}


def expand_sweep(base_pairs, param_lists):
    """Cross product of config overrides; yields (cell_name, pairs)."""
    keys = sorted(param_lists)
    for combo in itertools.product(*(param_lists[k] for k in keys)):
        pairs = dict(base_pairs)
        tags = []
        for key, value in zip(keys, combo):
            pairs[key] = value
            tags.append(f"{key.split('.')[-1]}={value}")
        yield "_".join(tags).replace("/", "-"), pairs


def run_sweep(base_pairs, param_lists, out_dir):
    """One experiment per cell; returns summary rows."""
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    keys = sorted(param_lists)
    for cell, pairs in expand_sweep(base_pairs, param_lists):
        cell_dir = os.path.join(out_dir, f"cell_{cell}")
        pairs["output.dir"] = cell_dir
        cfg = build_experiment(pairs)
        result = run_experiment(cfg)
        row = {key: pairs[key] for key in keys}
        row["accuracy"] = result.report.benign_accuracy
        row["rho2"] = result.report.rho2
        row["cell"] = cell
        rows.append(row)
        log.info("sweep cell %s: accuracy=%.4f rho2=%.5f",
                 cell, result.report.benign_accuracy, result.report.rho2)
    header = keys + ["accuracy", "rho2", "cell"]
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(row[k]) for k in header))
    with open(os.path.join(out_dir, SWEEP_FILE), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return rows


def _artifact_hash(path):
    """First config_hash stamp found in an artifact file."""
    if path.endswith(".json"):
        import json

        with open(path) as fh:
            return json.load(fh).get("config_hash")
    with open(path) as fh:
        for line in fh:
            if line.startswith("# config_hash="):
                return line.strip().split("=", 1)[1]
            if line.startswith("meta config_hash="):
                return line.strip().split("=", 1)[1]
    return None


def collect_run(out_dir):
    """Report row for one run directory, verifying hash consistency."""
    hashes = {}
    for name in (CONFIG_FILE, MODEL_FILE, REPORT_FILE, HISTORY_FILE, PER_SAMPLE_FILE):
        path = os.path.join(out_dir, name)
        if os.path.exists(path):
            hashes[name] = _artifact_hash(path)
    if not hashes:
        raise ConfigError([f"{out_dir}: no experiment artifacts found"])
    distinct = {h for h in hashes.values() if h is not None}
    if len(distinct) != 1:
        raise ConfigError(
            [f"{out_dir}: config hashes disagree across artifacts: {hashes}"])
    from .evaluation import EvalReport

    with open(os.path.join(out_dir, REPORT_FILE)) as fh:
        report = EvalReport.from_json(fh.read())
    return report
