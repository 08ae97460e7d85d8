"""Feature maps for linear action-value models.

Two concrete maps:

* TabularFeatureMap: one indicator per enumerated (state, action) pair, so
  any table of action values is exactly representable.
* RbfFeatureMap: the diabetes-domain layout of nine indicator blocks keyed by
  (action, NAT).  Each block holds an intercept, Gaussian kernels
  exp(-h (A1c - q)^2) at a mix of fitted quantile centers and fixed clinical
  centers, optionally the discontinuation flag, and two-kernel expansions of
  BP and Weight at their marginal quartiles.  phi(absorbing, .) = 0.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mdp import ConfigurationError, Dataset, DomainError, State

__all__ = [
    "FeatureMap",
    "TabularFeatureMap",
    "RbfBlock",
    "RbfSpec",
    "RbfFeatureMap",
    "DIABETES_LAYOUT",
    "fit_rbf_spec",
    "save_rbf_spec",
    "load_rbf_spec",
]


class FeatureMap:
    """Interface: a dimension, a feasible-action rule and phi(s, a)."""

    dim: int

    def feasible_actions(self, state: State) -> tuple[int, ...]:
        raise NotImplementedError

    def features(self, state: State, action: int) -> np.ndarray:
        raise NotImplementedError


class TabularFeatureMap(FeatureMap):
    """One-hot features over an explicit list of (state, action) pairs."""

    def __init__(self, pairs):
        self.pairs = tuple(pairs)
        if len(set(self.pairs)) != len(self.pairs):
            raise ConfigurationError("duplicate (state, action) pairs")
        self.dim = len(self.pairs)
        self._index = {pair: i for i, pair in enumerate(self.pairs)}
        self._actions: dict[State, list[int]] = {}
        for s, a in self.pairs:
            self._actions.setdefault(s, []).append(a)
        for acts in self._actions.values():
            acts.sort()

    def feasible_actions(self, state: State) -> tuple[int, ...]:
        if state.is_absorbing:
            raise DomainError("absorbing state has no feasible actions")
        try:
            return tuple(self._actions[state])
        except KeyError:
            raise DomainError(f"state {state} not in the tabulated pairs") from None

    def features(self, state: State, action: int) -> np.ndarray:
        out = np.zeros(self.dim)
        if state.is_absorbing:
            return out
        try:
            out[self._index[(state, action)]] = 1.0
        except KeyError:
            raise DomainError(f"({state}, {action}) not in the tabulated pairs") from None
        return out

    def theta_from_table(self, table: dict) -> np.ndarray:
        """Coefficients realizing a given {(state, action): value} table."""
        theta = np.zeros(self.dim)
        for (s, a), v in table.items():
            theta[self._index[(s, a)]] = float(v)
        return theta


@dataclass(frozen=True)
class RbfBlock:
    """One (action, NAT) indicator block with resolved A1c kernel centers."""

    action: int
    nat: int
    a1c_centers: tuple[float, ...]
    include_d: bool

    @property
    def width(self) -> int:
        return 1 + len(self.a1c_centers) + (1 if self.include_d else 0) + 4


@dataclass(frozen=True)
class RbfSpec:
    """Fitted radial-basis layout: bandwidth, blocks, BP/Weight centers."""

    bandwidth: float
    blocks: tuple[RbfBlock, ...]
    bp_centers: tuple[float, float]
    weight_centers: tuple[float, float]

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ConfigurationError(f"bandwidth must be positive, got {self.bandwidth}")
        for b in self.blocks:
            for c in b.a1c_centers + self.bp_centers + self.weight_centers:
                if not np.isfinite(c):
                    raise ConfigurationError(f"non-finite kernel center in block {(b.action, b.nat)}")
        keys = [(b.action, b.nat) for b in self.blocks]
        if len(set(keys)) != len(keys):
            raise ConfigurationError("duplicate (action, NAT) blocks")

    @property
    def dim(self) -> int:
        return sum(b.width for b in self.blocks)


# Block layout before quantile fitting.  Center tokens are ("q", j) for the
# j-th observed quartile of A1c conditional on the block's (action, NAT), or
# ("c", value) for a fixed center.  Blocks at NAT = 0 omit the D flag (D is
# identically zero there, and a constant-zero column would break the
# second-moment matrix's full rank).
DIABETES_LAYOUT = (
    (0, 0, (("q", 1), ("q", 2)), False),
    (0, 1, (("q", 1), ("q", 2), ("c", 8.0)), True),
    (0, 2, (("q", 1), ("q", 3)), True),
    (0, 3, (("q", 1), ("q", 2), ("c", 8.5)), True),
    (0, 4, (("q", 1), ("q", 2), ("c", 8.0)), True),
    (1, 0, (("c", 6.5), ("c", 7.5)), False),
    (2, 1, (("c", 6.5), ("q", 1), ("q", 3)), True),
    (3, 2, (("q", 2), ("c", 8.5)), True),
    (4, 3, (("c", 6.5), ("q", 2), ("c", 8.5)), True),
)


def fit_rbf_spec(data: Dataset, bandwidth: float = 0.5, layout=DIABETES_LAYOUT) -> RbfSpec:
    """Resolve the quantile tokens of the block layout against a dataset.

    A1c quantiles are computed conditionally on each block's (action, NAT)
    over the observed decision points; BP and Weight quartiles are marginal.
    Quantiles use linear interpolation of order statistics throughout.

    Raises ConfigurationError when a block referenced by the layout has no
    observations.
    """
    if not bandwidth > 0:
        raise ConfigurationError(f"bandwidth must be positive, got {bandwidth}")
    i_nat = data.schema.index("nat")
    i_a1c = data.schema.index("a1c")
    i_bp = data.schema.index("bp")
    i_w = data.schema.index("weight")

    pools: dict[tuple[int, int], list[float]] = {}
    bp_all: list[float] = []
    w_all: list[float] = []
    for traj in data:
        for tr in traj:
            if tr.state.is_absorbing:
                continue
            comp = tr.state.components
            key = (tr.action, int(comp[i_nat]))
            pools.setdefault(key, []).append(comp[i_a1c])
            bp_all.append(comp[i_bp])
            w_all.append(comp[i_w])
    if not bp_all:
        raise ConfigurationError("dataset has no live decision points")

    blocks = []
    for action, nat, tokens, include_d in layout:
        needs_quantiles = any(kind == "q" for kind, _ in tokens)
        pool = pools.get((action, nat), [])
        if needs_quantiles and not pool:
            raise ConfigurationError(
                f"no observations for feature block (action={action}, nat={nat})"
            )
        centers = []
        for kind, value in tokens:
            if kind == "c":
                centers.append(float(value))
            elif kind == "q":
                centers.append(float(np.quantile(pool, value / 4.0, method="linear")))
            else:
                raise ConfigurationError(f"unknown center token kind {kind!r}")
        blocks.append(RbfBlock(action=action, nat=nat, a1c_centers=tuple(centers),
                               include_d=bool(include_d)))

    bp_c = tuple(float(np.quantile(bp_all, q, method="linear")) for q in (0.25, 0.75))
    w_c = tuple(float(np.quantile(w_all, q, method="linear")) for q in (0.25, 0.75))
    return RbfSpec(bandwidth=float(bandwidth), blocks=tuple(blocks),
                   bp_centers=bp_c, weight_centers=w_c)


class RbfFeatureMap(FeatureMap):
    """Evaluates the block layout; carries the diabetes feasible-action rule
    (continue, or augment the next treatment while NAT < 4)."""

    def __init__(self, spec: RbfSpec):
        self.spec = spec
        self.dim = spec.dim
        self._offsets: dict[tuple[int, int], int] = {}
        off = 0
        for b in spec.blocks:
            self._offsets[(b.action, b.nat)] = off
            off += b.width
        self._blocks = {(b.action, b.nat): b for b in spec.blocks}

    def feasible_actions(self, state: State) -> tuple[int, ...]:
        if state.is_absorbing:
            raise DomainError("absorbing state has no feasible actions")
        nat = int(state.components[0])
        if not 0 <= nat <= 4:
            raise DomainError(f"NAT={nat} outside 0..4")
        return (0,) if nat == 4 else (0, nat + 1)

    def features(self, state: State, action: int) -> np.ndarray:
        out = np.zeros(self.dim)
        if state.is_absorbing:
            return out
        nat, d, a1c, bp, weight = state.components
        key = (int(action), int(nat))
        block = self._blocks.get(key)
        if block is None:
            raise DomainError(f"action {action} infeasible at NAT={int(nat)}")
        h = self.spec.bandwidth
        off = self._offsets[key]
        out[off] = 1.0
        j = off + 1
        for c in block.a1c_centers:
            out[j] = np.exp(-h * (a1c - c) ** 2)
            j += 1
        if block.include_d:
            out[j] = d
            j += 1
        for c in self.spec.bp_centers:
            out[j] = np.exp(-h * (bp - c) ** 2)
            j += 1
        for c in self.spec.weight_centers:
            out[j] = np.exp(-h * (weight - c) ** 2)
            j += 1
        return out

    def features_batch(self, nat, d, a1c, bp, weight, action, absorbing) -> np.ndarray:
        """Vectorized phi for component arrays; absorbing rows come out zero."""
        nat = np.asarray(nat, dtype=int)
        action = np.asarray(action, dtype=int)
        d = np.asarray(d, dtype=float)
        a1c = np.asarray(a1c, dtype=float)
        bp = np.asarray(bp, dtype=float)
        weight = np.asarray(weight, dtype=float)
        absorbing = np.asarray(absorbing, dtype=bool)
        m = nat.shape[0]
        out = np.zeros((m, self.dim))
        h = self.spec.bandwidth
        live = ~absorbing
        claimed = absorbing.copy()
        for b in self.spec.blocks:
            rows = live & (action == b.action) & (nat == b.nat)
            if not rows.any():
                continue
            claimed |= rows
            off = self._offsets[(b.action, b.nat)]
            out[rows, off] = 1.0
            j = off + 1
            x = a1c[rows]
            for c in b.a1c_centers:
                out[rows, j] = np.exp(-h * (x - c) ** 2)
                j += 1
            if b.include_d:
                out[rows, j] = d[rows]
                j += 1
            for c in self.spec.bp_centers:
                out[rows, j] = np.exp(-h * (bp[rows] - c) ** 2)
                j += 1
            for c in self.spec.weight_centers:
                out[rows, j] = np.exp(-h * (weight[rows] - c) ** 2)
                j += 1
        if not claimed.all():
            i = int(np.flatnonzero(~claimed)[0])
            raise DomainError(
                f"action {int(action[i])} infeasible at NAT={int(nat[i])} (row {i})"
            )
        return out


def save_rbf_spec(spec: RbfSpec, path: str | Path) -> None:
    payload = {
        "kind": "rbf_spec",
        "bandwidth": spec.bandwidth,
        "bp_centers": list(spec.bp_centers),
        "weight_centers": list(spec.weight_centers),
        "blocks": [
            {"action": b.action, "nat": b.nat,
             "a1c_centers": list(b.a1c_centers), "include_d": b.include_d}
            for b in spec.blocks
        ],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def load_rbf_spec(path: str | Path) -> RbfSpec:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("kind") != "rbf_spec":
        raise ConfigurationError(f"{path}: not a radial-basis spec file")
    blocks = tuple(
        RbfBlock(action=int(b["action"]), nat=int(b["nat"]),
                 a1c_centers=tuple(float(c) for c in b["a1c_centers"]),
                 include_d=bool(b["include_d"]))
        for b in payload["blocks"]
    )
    return RbfSpec(
        bandwidth=float(payload["bandwidth"]),
        blocks=blocks,
        bp_centers=tuple(float(c) for c in payload["bp_centers"]),
        weight_centers=tuple(float(c) for c in payload["weight_centers"]),
    )
