"""Flat run configuration for the command-line tools.

One namespace of scalar (or short-list) keys covers the simulator,
estimator, discretizer and study settings plus file paths.  Values come
from, in increasing precedence: built-in defaults, a JSON config file,
``GGQDTR_<KEY>`` environment variables, and command-line flags.  Loading
validates everything up front and reports every offending key in a single
error; every command writes back a normalized echo of the configuration it
ran with.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .experiments import STUDIES
from .ggq import SCHEDULE_FAMILIES
from .inference import GAMMA_VARIANTS
from .mdp import ConfigurationError

__all__ = ["ENV_PREFIX", "RunConfig"]

ENV_PREFIX = "GGQDTR_"


def _as_int(v):
    if isinstance(v, bool):
        raise ValueError(f"expected an integer, got {v!r}")
    if isinstance(v, int):
        return v
    if isinstance(v, str) and v.strip().lstrip("+-").isdigit():
        return int(v)
    raise ValueError(f"expected an integer, got {v!r}")


def _as_float(v):
    if isinstance(v, bool):
        raise ValueError(f"expected a number, got {v!r}")
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, str):
        return float(v)
    raise ValueError(f"expected a number, got {v!r}")


def _as_str(v):
    if isinstance(v, str):
        return v
    raise ValueError(f"expected a string, got {v!r}")


def _as_opt_str(v):
    if v is None or v == "":
        return None
    return _as_str(v)


def _split(v):
    if isinstance(v, str):
        return [part for part in v.split(",") if part.strip() != ""]
    if isinstance(v, (list, tuple)):
        return list(v)
    raise ValueError(f"expected a list or comma-separated string, got {v!r}")


def _as_floats(v):
    return tuple(_as_float(x) for x in _split(v))


def _as_schedules(v):
    """Tuning-grid entries written as 'family:nu'."""
    out = []
    for item in _split(v):
        if not isinstance(item, str) or ":" not in item:
            raise ValueError(f"expected 'family:nu' entries, got {item!r}")
        name, _, nu = item.partition(":")
        out.append((name.strip(), _as_float(nu)))
    return tuple(out)


# key -> (coercer, default).  None defaults mean "filled at load time"
# (workers) or "not set" (file paths).
_SCHEMA = {
    # simulator
    "n": (_as_int, 2000),
    "horizon": (_as_int, 20),
    "burn_in": (_as_int, 4),
    "reward_rule": (_as_str, "main"),
    "sigma_eps": (_as_float, 0.5),
    "baseline_mean": (_as_floats, (13.0, 160.0, 9.4)),
    "treatment_effects": (_as_floats, (0.14, 0.20, 0.02, 0.14)),
    "discontinuation": (_as_floats, (0.20, 0.20, 0.20, 0.35)),
    "assign_coefs": (_as_floats, (-0.2, 0.5, 0.5)),
    "death_coefs": (_as_floats, (-10.0, 0.08, 0.5)),
    # features
    "bandwidth": (_as_float, 0.5),
    # estimator
    "gamma": (_as_float, 0.6),
    "schedule": (_as_str, "klogk"),
    "nu": (_as_float, 0.05),
    "stop_c": (_as_float, 1e-3),
    "max_sweeps": (_as_int, 200),
    "init": (_as_str, "axis"),
    # classical baseline
    "percentile_low": (_as_float, 0.30),
    "percentile_high": (_as_float, 0.80),
    # inference
    "level": (_as_float, 0.95),
    "variant": (_as_str, "plain"),
    # studies
    "study": (_as_str, "fig1"),
    "replicates": (_as_int, 200),
    "gammas": (_as_floats, (0.1, 0.3, 0.6, 0.8)),
    "schedules": (_as_schedules, (
        ("klogk", 0.05), ("klogk", 0.025), ("klogk", 0.01),
        ("k34", 0.05), ("k34", 0.025), ("k34", 0.01),
        ("k13", 0.05), ("k13", 0.01),
    )),
    "oracle_n": (_as_int, 100_000),
    "truth_n": (_as_int, 10_000),
    "rollouts": (_as_int, 10_000),
    # shared
    "seed": (_as_int, 0),
    "workers": (_as_int, None),
    "out": (_as_str, "."),
    "data": (_as_opt_str, None),
    "theta": (_as_opt_str, None),
    "features": (_as_opt_str, None),
    "policy": (_as_opt_str, None),
}


@dataclass(frozen=True)
class RunConfig:
    n: int
    horizon: int
    burn_in: int
    reward_rule: str
    sigma_eps: float
    baseline_mean: tuple
    treatment_effects: tuple
    discontinuation: tuple
    assign_coefs: tuple
    death_coefs: tuple
    bandwidth: float
    gamma: float
    schedule: str
    nu: float
    stop_c: float
    max_sweeps: int
    init: str
    percentile_low: float
    percentile_high: float
    level: float
    variant: str
    study: str
    replicates: int
    gammas: tuple
    schedules: tuple
    oracle_n: int
    truth_n: int
    rollouts: int
    seed: int
    workers: int
    out: str
    data: str | None
    theta: str | None
    features: str | None
    policy: str | None

    @classmethod
    def load(cls, path: str | None = None, overrides: dict | None = None,
             env: dict | None = None) -> "RunConfig":
        """Merge defaults, config file, environment, and flag overrides.

        Raises ConfigurationError naming every unknown key and every value
        that fails to parse, all in one message.
        """
        values = {k: default for k, (_, default) in _SCHEMA.items()}
        problems: list[str] = []

        def apply(source: str, items: dict):
            for key, raw in items.items():
                if key not in _SCHEMA:
                    problems.append(f"unknown key {key!r} ({source})")
                    continue
                if raw is None:
                    continue
                coerce, _ = _SCHEMA[key]
                try:
                    values[key] = coerce(raw)
                except (ValueError, TypeError) as exc:
                    problems.append(f"bad value for {key!r} ({source}): {exc}")

        if path is not None:
            try:
                with open(path) as fh:
                    loaded = json.load(fh)
            except OSError as exc:
                raise ConfigurationError(f"cannot read config file: {exc}")
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"config file {path}: {exc}")
            if not isinstance(loaded, dict):
                raise ConfigurationError(
                    f"config file {path}: expected one flat JSON object"
                )
            apply(f"config file {path}", loaded)

        env = os.environ if env is None else env
        env_items = {
            key[len(ENV_PREFIX):].lower(): val
            for key, val in env.items() if key.startswith(ENV_PREFIX)
        }
        apply("environment", env_items)

        if overrides:
            apply("flags", overrides)

        problems.extend(cls._check(values))
        if problems:
            raise ConfigurationError("; ".join(problems))
        if values["workers"] is None:
            values["workers"] = os.cpu_count() or 1
        return cls(**values)

    @staticmethod
    def _check(values: dict) -> list[str]:
        problems = []
        if values["schedule"] not in SCHEDULE_FAMILIES:
            problems.append(
                f"bad value for 'schedule': choose from {sorted(SCHEDULE_FAMILIES)}"
            )
        for name, nu in values["schedules"]:
            if name not in SCHEDULE_FAMILIES:
                problems.append(
                    f"bad value for 'schedules': unknown family {name!r}"
                )
        if values["variant"] not in GAMMA_VARIANTS:
            problems.append(
                f"bad value for 'variant': choose from {list(GAMMA_VARIANTS)}"
            )
        if values["study"] not in STUDIES:
            problems.append(f"bad value for 'study': choose from {list(STUDIES)}")
        if values["init"] not in ("solve", "axis"):
            problems.append("bad value for 'init': choose from ['axis', 'solve']")
        for key in ("gamma",):
            if not 0.0 <= values[key] < 1.0:
                problems.append(f"bad value for {key!r}: must lie in [0, 1)")
        for g in values["gammas"]:
            if not 0.0 <= g < 1.0:
                problems.append("bad value for 'gammas': entries must lie in [0, 1)")
                break
        if not 0.0 < values["level"] < 1.0:
            problems.append("bad value for 'level': must lie in (0, 1)")
        if not 0.0 <= values["percentile_low"] < values["percentile_high"] <= 1.0:
            problems.append(
                "bad values for 'percentile_low'/'percentile_high': "
                "need 0 <= low < high <= 1"
            )
        if values["workers"] is not None and values["workers"] < 1:
            problems.append("bad value for 'workers': must be at least 1")
        return problems

    @classmethod
    def keys(cls) -> tuple[str, ...]:
        return tuple(_SCHEMA)

    def echo(self) -> dict:
        """Normalized key/value view, round-trippable through load()."""
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "schedules":
                v = [f"{name}:{nu!r}" for name, nu in v]
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    def write_echo(self, directory: str | Path, command: str) -> Path:
        path = Path(directory) / f"{command}.config.json"
        with open(path, "w") as fh:
            json.dump(self.echo(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path

    def sim_params(self, **replace):
        from .diabetes import SimParams

        kwargs = dict(
            n=self.n, horizon=self.horizon, burn_in=self.burn_in,
            seed=self.seed, baseline_mean=self.baseline_mean,
            treatment_effects=self.treatment_effects,
            discontinuation=self.discontinuation, sigma_eps=self.sigma_eps,
            assign_coefs=self.assign_coefs, death_coefs=self.death_coefs,
            reward_rule=self.reward_rule,
        )
        kwargs.update(replace)
        return SimParams(**kwargs)

    def estimator_config(self, theta_grid=None):
        from .ggq import EstimatorConfig

        return EstimatorConfig(gamma=self.gamma, schedule=self.schedule,
                               nu=self.nu, stop_c=self.stop_c,
                               max_sweeps=self.max_sweeps,
                               theta_grid=theta_grid, seed=self.seed)

    def study_spec(self, out_dir: str | None):
        from .experiments import StudySpec

        return StudySpec(
            study=self.study, n=self.n, replicates=self.replicates,
            gamma=self.gamma, gammas=self.gammas, schedules=self.schedules,
            schedule=self.schedule, nu=self.nu, seed=self.seed,
            oracle_n=self.oracle_n, truth_n=self.truth_n,
            rollouts=self.rollouts, level=self.level, init=self.init,
            out_dir=out_dir, workers=self.workers,
        )
