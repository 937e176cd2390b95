"""Command-line front end for dataset generation, training and experiments.

Exit codes: 0 on success (possibly with per-trial warnings), 1 when a
requested experiment fails entirely, 2 on configuration errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .datasets import load_datasets, save_datasets
from .environments import build_environment, environment_names, sample_offline_dataset
from .experiments import (
    ExperimentConfig,
    config_from_dict,
    run_contraction_suite,
    run_coverage_experiment,
    run_policy_benchmark,
    run_qq_diagnostic,
    tune_forest,
)
from .fqi import TrainConfig, greedy_policy, load_qvector, save_qvector, train_cyclefqi
from .mdp import PolicyVector, UpdateSet, cumulative_reward_rollout, monte_carlo_value
from .regressors import BasisSpec, LinearSieveSpec, RandomForestSpec, TabularSpec
from .sieve import InferenceConfig, SieveLayout, ensemble_evaluate

logger = logging.getLogger(__name__)

CONFIG_ERROR, EXPERIMENT_ERROR = 2, 1


class ConfigError(Exception):
    pass


def _load_config(args, kind: str) -> ExperimentConfig:
    payload = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config JSON: {exc}") from exc
    overrides = {
        "kind": kind,
        "environment": getattr(args, "environment", None),
        "env_seed": getattr(args, "env_seed", None),
        "seed": args.seed,
        "trials": getattr(args, "trials", None),
        "n_per_stage": getattr(args, "n_per_stage", None),
        "folds": getattr(args, "folds", None),
        "out_dir": args.out_dir,
        "workers": getattr(args, "workers", None),
        "iterations": getattr(args, "iterations", None),
        "num_trees": getattr(args, "num_trees", None),
        "regressor": getattr(args, "regressor", None),
        "sigma_scale": getattr(args, "sigma_scale", None),
        "skip_discount": True if getattr(args, "skip_discount", False) else None,
        "full_battery": True if getattr(args, "full", False) else None,
        "num_eta_samples": getattr(args, "num_eta_samples", None),
        "update_sets": getattr(args, "update_sets", None),
        "feature_subsample": getattr(args, "feature_subsample", None),
        "min_leaf": getattr(args, "min_leaf", None),
        "max_depth": getattr(args, "max_depth", None),
        "eval_rollouts": getattr(args, "eval_rollouts", None),
        "tune_grid": getattr(args, "tune_grid", None),
    }
    try:
        return config_from_dict(payload, **overrides)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def _regressor_from_args(args, spec):
    if args.regressor == "random-forest":
        return RandomForestSpec(args.num_trees, args.max_depth, args.min_leaf, args.feature_subsample)
    if args.regressor == "linear-sieve":
        return tuple(LinearSieveSpec(BasisSpec("quadratic", s.state_dim)) for s in spec.stages)
    if args.regressor == "tabular":
        return TabularSpec()
    raise ConfigError(f"unknown regressor {args.regressor!r}")


def _update_set_from_arg(arg: str | None, num_stages: int) -> UpdateSet:
    if not arg or arg == "all":
        return UpdateSet.all_stages(num_stages)
    try:
        members = [int(v) for v in arg.split(",")]
        return UpdateSet.of(num_stages, members)
    except ValueError as exc:
        raise ConfigError(f"bad update set {arg!r}: {exc}") from exc


def _uniform_fixed_policies(spec, update_set):
    return {
        k: (lambda s, a=spec.stage(k).action_count: np.full(a, 1.0 / a))
        for k in range(1, spec.num_stages + 1)
        if k not in update_set
    }


def _cmd_gen_data(args) -> int:
    spec = build_environment(args.environment, seed=args.env_seed)
    behavior = PolicyVector.uniform(spec)
    rng = np.random.default_rng(args.seed)
    data = sample_offline_dataset(spec, behavior, args.n_per_stage, rng)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_datasets(data, out)
    print(f"wrote {sum(len(d) for d in data)} transitions to {out}")
    return 0


def _cmd_train(args) -> int:
    spec = build_environment(args.environment, seed=args.env_seed)
    data = load_datasets(args.data, spec.num_stages)
    update_set = _update_set_from_arg(args.update_set, spec.num_stages)
    config = TrainConfig(args.iterations, _regressor_from_args(args, spec), seed=args.seed)
    q, _ = train_cyclefqi(data, spec, update_set, _uniform_fixed_policies(spec, update_set), config)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_qvector(q, out, config)
    print(f"wrote checkpoint to {out}")
    return 0


def _cmd_eval(args) -> int:
    spec = build_environment(args.environment, seed=args.env_seed)
    q, manifest = load_qvector(args.checkpoint)
    q.fixed_policies.update(_uniform_fixed_policies(spec, q.update_set))
    policy = greedy_policy(q)
    rng = np.random.default_rng(args.seed)
    if args.metric == "cumulative":
        vals = [
            cumulative_reward_rollout(
                spec, policy, args.start_stage, spec.initial_state(args.start_stage, rng), args.cycles, rng
            )
            for _ in range(args.rollouts)
        ]
        mean = float(np.mean(vals))
        se = float(np.std(vals, ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
        print(json.dumps({"metric": "cumulative", "mean": mean, "std_error": se, "rollouts": args.rollouts}))
    else:
        value = monte_carlo_value(spec, policy, args.start_stage, args.rollouts, args.cycles, rng)
        print(json.dumps({"metric": "discounted", "mean": value, "rollouts": args.rollouts}))
    return 0


def _cmd_infer(args) -> int:
    spec = build_environment(args.environment, seed=args.env_seed)
    data = load_datasets(args.data, spec.num_stages)
    layout = SieveLayout.for_spec(spec, [BasisSpec("quadratic", s.state_dim) for s in spec.stages])
    train_cfg = TrainConfig(
        args.iterations,
        tuple(LinearSieveSpec(BasisSpec("quadratic", s.state_dim)) for s in spec.stages),
        seed=args.seed,
    )
    inf_cfg = InferenceConfig(num_eta_samples=args.num_eta_samples)
    rng = np.random.default_rng(args.seed)
    result = ensemble_evaluate(data, spec, layout, args.folds, train_cfg, inf_cfg, rng)
    record = result.to_record(level=args.level)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(record, sort_keys=True), encoding="utf-8")
    print(json.dumps(record, sort_keys=True))
    return 0


def _cmd_coverage(args) -> int:
    cfg = _load_config(args, "coverage")
    report = run_coverage_experiment(cfg)
    for row in report.rows:
        print(
            f"n={row['n_total']}: coverage {row['coverage_percent']:.1f}% "
            f"MSE {row['mse']:.6f} over {row['trials']} trials"
        )
    if report.failures:
        print(f"warning: {report.failures} trial(s) failed; see the trials CSV", file=sys.stderr)
    total_trials = sum(len(v) for v in report.trial_records.values())
    return EXPERIMENT_ERROR if report.failures >= total_trials else 0


def _cmd_qq(args) -> int:
    cfg = _load_config(args, "qq-diagnostic")
    summary = run_qq_diagnostic(cfg)
    print(json.dumps(summary, sort_keys=True))
    return 0


def _cmd_benchmark(args) -> int:
    cfg = _load_config(args, "policy-benchmark")
    rows = run_policy_benchmark(cfg)
    failed = all(row["trials"] == 0 for row in rows)
    for row in rows:
        print(
            f"{row['method']:>9} | U={row['update_set']:<11} n={row['n_per_stage']:<5} "
            f"mean {row['mean_cumulative_reward']:9.1f} (se {row['std_error']:.1f}, "
            f"{row['trials']} trials)"
        )
    return EXPERIMENT_ERROR if failed else 0


def _cmd_tune_forest(args) -> int:
    cfg = _load_config(args, "tune-forest")
    out = tune_forest(cfg)
    print(json.dumps(out, sort_keys=True))
    return 0


def _cmd_contraction(args) -> int:
    cfg = _load_config(args, "contraction-suite")
    report = run_contraction_suite(cfg)
    for check in report["checks"]:
        status = "PASS" if check["passed"] else "FAIL"
        print(f"[{status}] {check['name']}")
    return 0 if report["all_passed"] else EXPERIMENT_ERROR


def _cmd_env(args) -> int:
    if args.env_action != "describe":
        raise ConfigError(f"unknown env action {args.env_action!r}")
    spec = build_environment(args.name, seed=args.env_seed)
    print(json.dumps(spec.params, indent=2, sort_keys=True))
    return 0


def _add_common(parser, out_dir_default="results"):
    parser.add_argument("--config", help="JSON config file; flags override its entries")
    parser.add_argument("--seed", type=int, default=None, help="base seed (trial i uses seed + i)")
    parser.add_argument("--out-dir", default=None, help=f"artifact directory (default {out_dir_default})")
    parser.add_argument("--workers", type=int, default=None, help="parallel trial processes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cyclefqi",
        description="Offline RL for cyclic MDPs: training, inference and experiment reproduction",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="sample an offline dataset to JSONL")
    p.add_argument("--environment", required=True, choices=environment_names())
    p.add_argument("--env-seed", type=int, default=7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-per-stage", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a stage-wise Q vector on a dataset file")
    p.add_argument("--environment", required=True, choices=environment_names())
    p.add_argument("--env-seed", type=int, default=7)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--regressor", default="random-forest", choices=["random-forest", "linear-sieve", "tabular"])
    p.add_argument("--num-trees", type=int, default=100)
    p.add_argument("--max-depth", type=int, default=None)
    p.add_argument("--min-leaf", type=int, default=5)
    p.add_argument("--feature-subsample", type=float, default=1.0 / 3.0)
    p.add_argument("--update-set", default="all", help='"all" or comma-separated stage indices')
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained checkpoint by rollouts")
    p.add_argument("--environment", required=True, choices=environment_names())
    p.add_argument("--env-seed", type=int, default=7)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--start-stage", type=int, default=1)
    p.add_argument("--rollouts", type=int, default=100)
    p.add_argument("--cycles", type=int, default=50)
    p.add_argument("--metric", default="cumulative", choices=["cumulative", "discounted"])
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("infer", help="ensemble value inference on a dataset file")
    p.add_argument("--environment", required=True, choices=environment_names())
    p.add_argument("--env-seed", type=int, default=7)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--folds", type=int, default=2)
    p.add_argument("--iterations", type=int, default=60)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--num-eta-samples", type=int, default=200_000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("coverage", help="confidence-region coverage experiment (linear env)")
    _add_common(p)
    p.add_argument("--environment", default=None)
    p.add_argument("--env-seed", type=int, default=None)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--n-per-stage", type=int, nargs="+", default=None,
                   help="total sample sizes n (split evenly across stages)")
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--num-eta-samples", type=int, default=None)
    p.add_argument("--sigma-scale", type=float, default=None, help="debug: inflate covariance")
    p.set_defaults(func=_cmd_coverage)

    p = sub.add_parser("qq", help="Q-Q diagnostic of D^2 against chi-squared quantiles")
    _add_common(p)
    p.add_argument("--environment", default=None)
    p.add_argument("--env-seed", type=int, default=None)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--n-per-stage", type=int, nargs="+", default=None)
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--num-eta-samples", type=int, default=None)
    p.set_defaults(func=_cmd_qq)

    p = sub.add_parser("benchmark", help="policy benchmark on the glucose environment")
    _add_common(p)
    p.add_argument("--environment", default="glucose")
    p.add_argument("--env-seed", type=int, default=None)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--n-per-stage", type=int, nargs="+", default=None)
    p.add_argument("--update-sets", nargs="+", default=None, choices=["all", "day-evening"])
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--num-trees", type=int, default=None)
    p.add_argument("--min-leaf", type=int, default=None)
    p.add_argument("--max-depth", type=int, default=None)
    p.add_argument("--feature-subsample", type=float, default=None)
    p.add_argument("--eval-rollouts", type=int, default=None)
    p.add_argument("--regressor", default="random-forest")
    p.set_defaults(func=_cmd_benchmark)

    p = sub.add_parser("tune-forest", help="tree-count tuning on the glucose environment")
    _add_common(p)
    p.add_argument("--environment", default="glucose")
    p.add_argument("--env-seed", type=int, default=None)
    p.add_argument("--n-per-stage", type=int, nargs="+", default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--tune-grid", type=int, nargs="+", default=None)
    p.set_defaults(func=_cmd_tune_forest)

    p = sub.add_parser("contraction", help="operator contraction property suite")
    _add_common(p)
    p.add_argument("--skip-discount", action="store_true", help="debug: break the operator")
    p.add_argument("--full", action="store_true", help="include the Monte Carlo rollout check")
    p.set_defaults(func=_cmd_contraction)

    p = sub.add_parser("env", help="environment utilities")
    p.add_argument("env_action", choices=["describe"])
    p.add_argument("name", choices=environment_names())
    p.add_argument("--env-seed", type=int, default=7)
    p.set_defaults(func=_cmd_env)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad flags, which matches the config-error code
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return CONFIG_ERROR
    except (KeyError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return CONFIG_ERROR
    except Exception as exc:
        logger.exception("experiment failed")
        print(f"experiment failed: {exc}", file=sys.stderr)
        return EXPERIMENT_ERROR


if __name__ == "__main__":
    sys.exit(main())
