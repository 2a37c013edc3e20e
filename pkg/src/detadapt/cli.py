"""Command-line experiment runner.

Modes:
  pretrain        train on generated source data, save the model
  adapt           pretrain (or load --params), adapt, save history/checkpoints
  eval            score saved params against a saved dataset
  ablation-suite  base / +SA / +SAL / full runs with a shared seed
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

from .config import AdaptationConfig, default_config
from .detector import load_params, save_params
from .metrics import evaluate
from .trainer import ablation_variants, adapt, pretrain_source
from .util import derive_seed
from .world import ConfigError, generate_domain, load_dataset, save_dataset


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="detadapt",
                                     description="source-free detector adaptation runner")
    parser.add_argument("--mode", required=True,
                        choices=["pretrain", "adapt", "eval", "ablation-suite"])
    parser.add_argument("--config", help="JSON config; omitted fields use documented defaults")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    parser.add_argument("--params", help="saved model params (adapt resume / eval)")
    parser.add_argument("--dataset", help="saved dataset JSON (eval mode)")
    return parser


def _load_config(args) -> AdaptationConfig:
    if args.config:
        with open(args.config) as fh:
            data = json.load(fh)
        if args.seed is not None:
            data["seed"] = args.seed
        return AdaptationConfig.from_dict(data)
    config = default_config(seed=args.seed if args.seed is not None else 0)
    config.validate()
    return config


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)


def _mode_pretrain(config: AdaptationConfig, out: str) -> None:
    params, _ = pretrain_source(config)
    save_params(os.path.join(out, "source_params.json"), params)
    eval_spec = dataclasses.replace(config.source, size=config.eval_size)
    eval_data = generate_domain(eval_spec, derive_seed(config.seed, "world", "source-eval"))
    result = evaluate(params, eval_data, num_classes=config.num_classes)
    _write_json(os.path.join(out, "pretrain_eval.json"), result.to_dict())


def _mode_adapt(config: AdaptationConfig, out: str, params_path: str | None) -> None:
    if params_path:
        source_params = load_params(params_path)
    else:
        source_params, _ = pretrain_source(config)
    save_params(os.path.join(out, "source_params.json"), source_params)
    target_data = generate_domain(config.target, derive_seed(config.seed, "world", "target"))
    teacher, history = adapt(source_params, target_data, config,
                             out_dir=os.path.join(out, "checkpoints"))
    history.save_csv(os.path.join(out, "history.csv"))
    save_params(os.path.join(out, "teacher_params.json"), teacher)
    eval_spec = dataclasses.replace(config.target, size=config.eval_size)
    eval_data = generate_domain(eval_spec, derive_seed(config.seed, "world", "eval"))
    result = evaluate(teacher, eval_data, num_classes=config.num_classes)
    summary = {"final_teacher": result.to_dict(),
               "final_teacher_map": history.final_teacher_map(),
               "epochs": config.epochs}
    _write_json(os.path.join(out, "summary.json"), summary)


def _mode_eval(config: AdaptationConfig, out: str, params_path: str | None,
               dataset_path: str | None) -> None:
    if not params_path:
        raise ConfigError("eval mode needs --params")
    params = load_params(params_path)
    if dataset_path:
        _, samples = load_dataset(dataset_path)
    else:
        samples = generate_domain(config.target, derive_seed(config.seed, "world", "target"))
        save_dataset(os.path.join(out, "eval_dataset.json"), config.target, samples)
    result = evaluate(params, samples, num_classes=config.num_classes)
    _write_json(os.path.join(out, "eval.json"), result.to_dict())


def _mode_ablation(config: AdaptationConfig, out: str) -> None:
    rows = []
    for name, variant in ablation_variants(config).items():
        source_params, _ = pretrain_source(variant)
        target_data = generate_domain(variant.target,
                                      derive_seed(variant.seed, "world", "target"))
        _, history = adapt(source_params, target_data, variant)
        history.save_csv(os.path.join(out, f"history_{name}.csv"))
        rows.append([name, repr(history.final_teacher_map())])
    with open(os.path.join(out, "ablation_summary.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "final_teacher_map"])
        writer.writerows(rows)


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        config = _load_config(args)
        os.makedirs(args.out, exist_ok=True)
        if args.mode == "pretrain":
            _mode_pretrain(config, args.out)
        elif args.mode == "adapt":
            _mode_adapt(config, args.out, args.params)
        elif args.mode == "eval":
            _mode_eval(config, args.out, args.params, args.dataset)
        else:
            _mode_ablation(config, args.out)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 1
        print(f"run failed: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_cli())
