"""Command-line surface: thin deterministic wrappers over the library.

Each subcommand reads one RunConfig (file, environment, flags), runs exactly
one library entry point, writes its artifacts plus a normalized config echo
under --out, and exits 0; failures print a single JSON line on stderr and
exit nonzero (2 for configuration problems, 1 otherwise).
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .classical import DiscretizerSpec, estimate_transitions, load_qtable, \
    policy_from_q, save_qtable, value_iteration
from .compiled import compile_dataset
from .config import RunConfig
from .diabetes import default_rollout_horizon, rollout_policy, simulate_cohort
from .experiments import _observed_states, representative_states, run_study, \
    write_table
from .features import RbfFeatureMap, fit_rbf_spec, load_rbf_spec, save_rbf_spec
from .ggq import ggq_fit, load_estimate, save_estimate, theta_candidates
from .inference import infer, save_inference
from .mdp import ConfigurationError, DomainError, EstimationError, \
    GreedyPolicy, NumericalError, ParseError
from .trajectory_io import read_dataset, write_dataset

__all__ = [
    "main",
    "cmd_simulate",
    "cmd_fit_ggq",
    "cmd_fit_classical",
    "cmd_infer",
    "cmd_evaluate",
    "cmd_study",
]

_CONFIG_ERRORS = (ConfigurationError, ParseError)
_RUNTIME_ERRORS = (DomainError, EstimationError, NumericalError, OSError,
                   ValueError, KeyError)


def _out_dir(config: RunConfig) -> Path:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(config: RunConfig) -> Path:
    """Write one simulated cohort as a trajectory file."""
    data = simulate_cohort(config.sim_params())
    out = _out_dir(config)
    path = out / "dataset.csv"
    write_dataset(data, path)
    config.write_echo(out, "simulate")
    return path


def _load_data(config: RunConfig, data_path: str | None):
    path = data_path or config.data
    if path is None:
        raise ConfigurationError("no dataset given (positional or 'data' key)")
    return read_dataset(path)


def cmd_fit_ggq(config: RunConfig, data_path: str | None = None) -> Path:
    """Fit the greedy-gradient weights; write estimate, features, trace,
    and a policy reference usable by evaluate."""
    data = _load_data(config, data_path)
    fmap = RbfFeatureMap(fit_rbf_spec(data, bandwidth=config.bandwidth))
    cd = compile_dataset(data, fmap)
    grid = theta_candidates(cd, fmap, config.gamma) if config.init == "solve" \
        else None
    est = ggq_fit(cd, fmap, config.estimator_config(theta_grid=grid))

    out = _out_dir(config)
    save_estimate(est, out / "estimate.json")
    save_rbf_spec(fmap.spec, out / "features.json")
    with open(out / "trace.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sweep", "objective", "step_norm"])
        for i, obj in enumerate(est.objectives):
            step = repr(est.step_norms[i - 1]) if i >= 1 else ""
            writer.writerow([i, repr(float(obj)), step])
    ref = {"kind": "ggq", "estimate": "estimate.json",
           "features": "features.json"}
    with open(out / "policy_ggq.json", "w") as fh:
        json.dump(ref, fh, indent=2)
        fh.write("\n")
    config.write_echo(out, "fit-ggq")
    return out / "estimate.json"


def cmd_fit_classical(config: RunConfig, data_path: str | None = None) -> Path:
    """Discretize, estimate transitions, iterate values; write the
    action-value table and a policy reference."""
    data = _load_data(config, data_path)
    spec = DiscretizerSpec.fit(
        data, (config.percentile_low, config.percentile_high)
    )
    model = estimate_transitions(data, spec)
    qtable = value_iteration(model, config.gamma)

    out = _out_dir(config)
    save_qtable(qtable, out / "qtable.csv")
    ref = {
        "kind": "classical",
        "qtable": "qtable.csv",
        "a1c_edges": list(spec.a1c_edges),
        "bp_edges": list(spec.bp_edges),
        "weight_edges": list(spec.weight_edges),
        "default_action": 0,
    }
    with open(out / "policy_classical.json", "w") as fh:
        json.dump(ref, fh, indent=2)
        fh.write("\n")
    config.write_echo(out, "fit-classical")
    return out / "qtable.csv"


def cmd_infer(config: RunConfig, data_path: str | None = None,
              theta_path: str | None = None) -> Path:
    """Sandwich intervals and covariance for a saved fit."""
    data = _load_data(config, data_path)
    theta_file = theta_path or config.theta
    if theta_file is None:
        raise ConfigurationError("no estimate given (positional or 'theta' key)")
    est = load_estimate(theta_file)
    features_file = config.features or str(Path(theta_file).with_name("features.json"))
    fmap = RbfFeatureMap(load_rbf_spec(features_file))
    result = infer(data, fmap, est.theta, config.gamma, level=config.level,
                   variant=config.variant)

    out = _out_dir(config)
    save_inference(result, out / "intervals.csv")
    with open(out / "covariance.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in result.covariance:
            writer.writerow([repr(float(v)) for v in row])
    config.write_echo(out, "infer")
    return out / "intervals.csv"


def _load_policy(ref_path: str):
    """Rebuild a policy from a reference file written by a fit command."""
    base = Path(ref_path).parent
    with open(ref_path) as fh:
        ref = json.load(fh)
    kind = ref.get("kind")
    if kind == "ggq":
        est = load_estimate(base / ref["estimate"])
        fmap = RbfFeatureMap(load_rbf_spec(base / ref["features"]))
        return GreedyPolicy(est.theta, fmap)
    if kind == "classical":
        qtable = load_qtable(base / ref["qtable"])
        spec = DiscretizerSpec(
            a1c_edges=tuple(ref["a1c_edges"]),
            bp_edges=tuple(ref["bp_edges"]),
            weight_edges=tuple(ref["weight_edges"]),
        )
        return policy_from_q(qtable, spec=spec,
                             default_action=ref.get("default_action", 0))
    raise ConfigurationError(f"{ref_path}: unknown policy kind {kind!r}")


def cmd_evaluate(config: RunConfig, policy_ref: str | None = None,
                 data_path: str | None = None) -> Path:
    """Monte Carlo values of a saved policy at one representative state per
    oracle cell of the evaluation data (fresh simulation when none given)."""
    ref_path = policy_ref or config.policy
    if ref_path is None:
        raise ConfigurationError("no policy given (positional or 'policy' key)")
    policy = _load_policy(ref_path)
    path = data_path or config.data
    data = read_dataset(path) if path is not None \
        else simulate_cohort(config.sim_params())

    states = _observed_states(data)
    horizon = default_rollout_horizon(config.gamma)
    params = config.sim_params()
    header = ["nat", "d", "cat_a1c", "n_obs", "a1c", "bp", "weight",
              "value", "se"]
    rows = []
    for ci, (cell, state, m) in enumerate(representative_states(states)):
        returns = rollout_policy(params, policy, state, config.gamma,
                                 config.rollouts, config.seed + 810_000 + 97 * ci,
                                 horizon)
        rows.append((
            *cell, m,
            float(state.components[2]), float(state.components[3]),
            float(state.components[4]),
            float(returns.mean()),
            float(returns.std(ddof=1) / np.sqrt(config.rollouts)),
        ))
    out = _out_dir(config)
    write_table(out / "values.csv", header, rows)
    config.write_echo(out, "evaluate")
    return out / "values.csv"


def cmd_study(config: RunConfig, study_id: str | None = None) -> Path:
    """Run one named study into the output directory."""
    if study_id is not None:
        config = replace(config, study=study_id)
    out = _out_dir(config)
    spec = config.study_spec(out_dir=str(out))
    run_study(spec)
    config.write_echo(out, "study")
    return out


class _Parser(argparse.ArgumentParser):
    """argparse variant whose usage errors match the one-line JSON format."""

    def error(self, message):
        print(json.dumps({"error": "UsageError", "message": message}),
              file=sys.stderr)
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ggqdtr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, positionals=()):
        p = sub.add_parser(name, help=help_text)
        for pos, pos_help in positionals:
            p.add_argument(pos, nargs="?", default=None, help=pos_help)
        p.add_argument("--config", default=None, metavar="PATH",
                       help="JSON file of flat key/value settings")
        for key in RunConfig.keys():
            p.add_argument(f"--{key.replace('_', '-')}", dest=key,
                           default=None, metavar="V",
                           help=f"override config key '{key}'")
        return p

    add("simulate", "write a simulated cohort")
    add("fit-ggq", "fit greedy-gradient weights to a dataset",
        [("data_path", "trajectory file (default: 'data' config key)")])
    add("fit-classical", "fit the discretize-and-iterate baseline",
        [("data_path", "trajectory file (default: 'data' config key)")])
    add("infer", "confidence intervals for a saved fit",
        [("data_path", "trajectory file (default: 'data' config key)"),
         ("theta_path", "estimate file (default: 'theta' config key)")])
    add("evaluate", "Monte Carlo values of a saved policy",
        [("policy_ref", "policy reference file (default: 'policy' config key)"),
         ("data_path", "evaluation states source (default: fresh simulation)")])
    add("study", "run a named study end to end",
        [("study_id", "study name (default: 'study' config key)")])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {k: getattr(args, k) for k in RunConfig.keys()
                 if getattr(args, k, None) is not None}
    try:
        config = RunConfig.load(args.config, overrides=overrides)
        if args.command == "simulate":
            cmd_simulate(config)
        elif args.command == "fit-ggq":
            cmd_fit_ggq(config, args.data_path)
        elif args.command == "fit-classical":
            cmd_fit_classical(config, args.data_path)
        elif args.command == "infer":
            cmd_infer(config, args.data_path, args.theta_path)
        elif args.command == "evaluate":
            cmd_evaluate(config, args.policy_ref, args.data_path)
        else:
            cmd_study(config, args.study_id)
    except _CONFIG_ERRORS as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 2
    except _RUNTIME_ERRORS as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    return 0
