"""Command-line harness.

Exit codes: 0 success, 1 configuration/usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .attacks import fgs
from .config import load_config
from .data import prepare_dataset
from .errors import AdvDefenseError, ConfigError
from .evaluation import PerSampleRecord, attack_records, write_per_sample_csv
from .harness import (
    PER_SAMPLE_FILE,
    REPORT_FILE,
    collect_run,
    run_experiment,
    run_sweep,
    train_reference,
)
from .network import load_model
from .network import predict as predict_one

log = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def _overrides(args):
    pairs = {}
    if getattr(args, "seed", None) is not None:
        pairs["dataset.seed"] = str(args.seed)
        pairs["reference.seed"] = str(args.seed)
        pairs["train.seed"] = str(args.seed)
    if getattr(args, "out", None):
        pairs["output.dir"] = args.out
    return pairs


def _cmd_train(args):
    cfg = load_config(args.config, _overrides(args))
    os.makedirs(cfg.out_dir, exist_ok=True)
    data = prepare_dataset(cfg.dataset)
    train_reference(cfg, data, cfg.out_dir)
    print(f"reference model written under {cfg.out_dir}")
    return 0


def _cmd_defend(args):
    cfg = load_config(args.config, _overrides(args))
    result = run_experiment(cfg)
    r = result.report
    print(f"method={cfg.method} accuracy={r.benign_accuracy:.4f} rho2={r.rho2:.5f} "
          f"eps_ref={r.epsilon_ref:.5f}")
    print(f"artifacts in {result.out_dir}")
    return 0


def _fgs_records(net, dataset, epsilon):
    records = []
    for k in range(len(dataset)):
        x = dataset.inputs[k]
        benign = predict_one(net, x)
        adv = fgs(net, x, int(dataset.labels[k]), epsilon)
        moved = np.linalg.norm(adv - x) / np.linalg.norm(x)
        records.append(PerSampleRecord(
            index=k, label=int(dataset.labels[k]), predicted=int(benign),
            correct=bool(benign == dataset.labels[k]),
            relative_norm=float(moved),
            fooled=bool(predict_one(net, adv) != benign)))
    return records


def _cmd_attack(args):
    cfg = load_config(args.dataset, _overrides(args))
    net, _ = load_model(args.model)
    data = prepare_dataset(cfg.dataset)
    if args.method == "deepfool":
        records, _ = attack_records(net, data.test, cfg.attack)
    else:
        records = _fgs_records(net, data.test, args.epsilon)
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, PER_SAMPLE_FILE)
    write_per_sample_csv(records, path, config_hash=cfg.hash)
    fooled = sum(r.fooled for r in records)
    print(f"{args.method}: {fooled}/{len(records)} fooled; per-sample records in {path}")
    return 0


def _cmd_eval(args):
    cfg = load_config(args.config, _overrides(args))
    if not cfg.eval.model:
        raise ConfigError(["eval.model: required by the eval command and missing"])
    from .harness import evaluate_model

    net, _ = load_model(cfg.eval.model)
    data = prepare_dataset(cfg.dataset)
    report = evaluate_model(cfg, net, data)
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, REPORT_FILE), "w") as fh:
        fh.write(report.to_json())
    write_per_sample_csv(report.per_sample, os.path.join(cfg.out_dir, PER_SAMPLE_FILE),
                         config_hash=cfg.hash)
    print(f"accuracy={report.benign_accuracy:.4f} rho2={report.rho2:.5f} "
          f"eps_ref={report.epsilon_ref:.5f} -> {cfg.out_dir}")
    return 0


def _parse_param(spec):
    if "=" not in spec:
        raise ConfigError([f"--param '{spec}': expected key=v1,v2,..."])
    key, values = spec.split("=", 1)
    items = [v.strip() for v in values.split(",") if v.strip() != ""]
    if not items:
        raise ConfigError([f"--param '{spec}': no values given"])
    return key.strip(), items


def _cmd_sweep(args):
    from .config import parse_config_text

    with open(args.config) as fh:
        base = parse_config_text(fh.read())
    base.update(_overrides(args))
    params = {}
    for spec in args.param or []:
        key, values = _parse_param(spec)
        params[key] = values
    if args.preset == "layer-mask":
        widths = [int(w) for w in base.get("arch.widths", "2,16,2").split(",")]
        params.setdefault("defense.layer-mask",
                          [str(i) for i in range(len(widths) - 1)])
        params.setdefault("defense.c", ["5", "15", "25", "35", "45"])
        base.setdefault("method", "deep-defense")
    if not params:
        raise ConfigError(["sweep: no --param given and no preset selected"])
    out_dir = args.out or base.get("output.dir", "sweep_out")
    rows = run_sweep(base, params, out_dir)
    print(f"{len(rows)} sweep rows written to {os.path.join(out_dir, 'sweep.csv')}")
    return 0


def _cmd_report(args):
    rows = []
    for run_dir in args.runs:
        report = collect_run(run_dir)
        rows.append((run_dir, report))
    print("run,accuracy,rho2,eps_ref,acc@0.2,acc@0.5,acc@1.0")
    for run_dir, r in rows:
        print(f"{run_dir},{r.benign_accuracy:.4f},{r.rho2:.5f},{r.epsilon_ref:.5f},"
              f"{r.fgs_accuracy_at['0.2']:.4f},{r.fgs_accuracy_at['0.5']:.4f},"
              f"{r.fgs_accuracy_at['1.0']:.4f}")
    return 0


def build_parser():
    parser = _Parser(prog="advdefense",
                     description="train, attack and evaluate defended MLP classifiers")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="key=value config file")
        p.add_argument("--seed", type=int, help="override dataset/reference/train seeds")
        p.add_argument("--out", help="override output directory")

    common(sub.add_parser("train", help="train the clean reference model"))
    common(sub.add_parser("defend", help="run the configured defense end to end"))

    p = sub.add_parser("attack", help="attack a saved model, write per-sample records")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True, help="config file providing dataset.*")
    p.add_argument("--method", choices=("deepfool", "fgs"), default="deepfool")
    p.add_argument("--epsilon", type=float, default=0.1, help="fgs magnitude")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    common(sub.add_parser("eval", help="evaluate a saved model (needs eval.model)"))

    p = sub.add_parser("sweep", help="grid of experiments over config overrides")
    common(p)
    p.add_argument("--param", action="append", help="key=v1,v2,... (repeatable)")
    p.add_argument("--preset", choices=("layer-mask",),
                   help="layer-wise regularization study")

    p = sub.add_parser("report", help="aggregate run directories (hash-checked)")
    p.add_argument("runs", nargs="+", help="experiment output directories")
    return parser


_COMMANDS = {
    "train": _cmd_train,
    "defend": _cmd_defend,
    "attack": _cmd_attack,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "report": _cmd_report,
}


def cli(argv=None):
    """Returns the process exit status (0 ok, 1 config error, 2 runtime)."""
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        sys.stderr.write(f"{e}\n")
        return 1
    except FileNotFoundError as e:
        sys.stderr.write(f"missing file: {e.filename}\n")
        return 1
    except AdvDefenseError as e:
        sys.stderr.write(f"runtime failure: {e}\n")
        return 2


def main():
    raise SystemExit(cli())


if __name__ == "__main__":
    main()
