"""Discretized-state baseline: empirical transition kernel plus action-value
iteration.

States are coarsened to integer tuples (NAT, D, Cat.A1c[, Cat.BP,
Cat.Weight]) with left-open/right-closed bins and 1-based category labels.
The kernel and per-triple mean rewards are empirical frequencies over the
observed transitions; the absorbing state is a forced self-loop with zero
reward.  Value iteration then solves the empirical Bellman optimality
equations to a sup-norm tolerance.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mdp import ConfigurationError, Dataset, DomainError, State

__all__ = [
    "A1C_EDGES",
    "DiscretizerSpec",
    "discretize",
    "TransitionModel",
    "estimate_transitions",
    "QTable",
    "value_iteration",
    "TabularPolicy",
    "policy_from_q",
]

# Fixed clinical A1c cut points; bins are (-inf,7], (7,7.2], ..., (9,inf).
A1C_EDGES = (7.0, 7.2, 7.5, 7.7, 8.0, 9.0)

# The absorbing discrete state.
DEAD = "absorbing"


def _bin(edges, x) -> np.ndarray:
    """1-based left-open/right-closed bin labels: bin j iff e_{j-1} < x <= e_j."""
    return np.searchsorted(np.asarray(edges), np.asarray(x, dtype=float), side="left") + 1


@dataclass(frozen=True)
class DiscretizerSpec:
    """Bin edges per continuous component; None drops the component
    (the oracle coarsening keeps only NAT, D, Cat.A1c)."""

    a1c_edges: tuple[float, ...] = A1C_EDGES
    bp_edges: tuple[float, ...] | None = None
    weight_edges: tuple[float, ...] | None = None

    def __post_init__(self):
        for name, edges in (("a1c", self.a1c_edges), ("bp", self.bp_edges),
                            ("weight", self.weight_edges)):
            if edges is None:
                continue
            arr = np.asarray(edges, dtype=float)
            if arr.ndim != 1 or arr.size == 0:
                raise ConfigurationError(f"{name} edges must be a nonempty 1-d sequence")
            if not np.all(np.isfinite(arr)):
                raise ConfigurationError(f"{name} edges must be finite")
            if np.any(np.diff(arr) <= 0):
                raise ConfigurationError(f"{name} edges must be strictly increasing")

    @classmethod
    def oracle(cls) -> "DiscretizerSpec":
        return cls(a1c_edges=A1C_EDGES, bp_edges=None, weight_edges=None)

    @classmethod
    def fit(cls, data: Dataset, percentiles=(0.30, 0.80)) -> "DiscretizerSpec":
        """Full coarsening: fixed A1c edges plus BP/Weight cut at the given
        marginal percentiles (defaults 30th/80th) of the observed decisions."""
        i_bp = data.schema.index("bp")
        i_w = data.schema.index("weight")
        bp, w = [], []
        for traj in data:
            for tr in traj:
                if tr.state.is_absorbing:
                    continue
                bp.append(tr.state.components[i_bp])
                w.append(tr.state.components[i_w])
        if not bp:
            raise ConfigurationError("dataset has no live decision points")
        bp_edges = tuple(float(np.quantile(bp, q, method="linear")) for q in percentiles)
        w_edges = tuple(float(np.quantile(w, q, method="linear")) for q in percentiles)
        return cls(a1c_edges=A1C_EDGES, bp_edges=bp_edges, weight_edges=w_edges)


def discretize(spec: DiscretizerSpec, state: State):
    """Coarsen one state: (nat, d, cat_a1c[, cat_bp, cat_weight]) or DEAD."""
    if state.is_absorbing:
        return DEAD
    nat, d, a1c, bp, weight = state.components
    out = [int(nat), int(d), int(_bin(spec.a1c_edges, a1c))]
    if spec.bp_edges is not None:
        out.append(int(_bin(spec.bp_edges, bp)))
    if spec.weight_edges is not None:
        out.append(int(_bin(spec.weight_edges, weight)))
    return tuple(out)


def discretize_batch(spec: DiscretizerSpec, nat, d, a1c, bp, weight) -> np.ndarray:
    """Vectorized coarsening -> (m, k) int array (live states only)."""
    cols = [np.asarray(nat, dtype=int), np.asarray(d, dtype=int),
            _bin(spec.a1c_edges, a1c).astype(int)]
    if spec.bp_edges is not None:
        cols.append(_bin(spec.bp_edges, bp).astype(int))
    if spec.weight_edges is not None:
        cols.append(_bin(spec.weight_edges, weight).astype(int))
    return np.stack(cols, axis=1)


@dataclass
class TransitionModel:
    """Empirical kernel and mean rewards over coarsened transitions.

    kernel[(s, a)] = list of (s_next, probability, mean_reward); rows sum to
    one.  state_actions maps each discrete state to its observed actions.
    next_only_states were seen only as destinations (no outgoing data).
    """

    spec: DiscretizerSpec
    kernel: dict = field(default_factory=dict)
    state_actions: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    next_only_states: set = field(default_factory=set)

    @property
    def pairs(self) -> list:
        return sorted(self.kernel.keys())

    def coverage_report(self) -> dict:
        return {
            "observed_pairs": len(self.kernel),
            "observed_states": len(self.state_actions),
            "next_only_states": sorted(self.next_only_states),
        }


def estimate_transitions(data: Dataset, spec: DiscretizerSpec) -> TransitionModel:
    """Tabulate P(s'|s,a) and mean rewards from a dataset."""
    counts: dict = {}
    reward_sums: dict = {}
    seen_next: set = set()
    for traj in data:
        for tr in traj:
            if tr.state.is_absorbing:
                continue
            s = discretize(spec, tr.state)
            s_next = discretize(spec, tr.next_state)
            key = (s, tr.action)
            bucket = counts.setdefault(key, {})
            bucket[s_next] = bucket.get(s_next, 0) + 1
            reward_sums[(s, tr.action, s_next)] = (
                reward_sums.get((s, tr.action, s_next), 0.0) + tr.reward
            )
            seen_next.add(s_next)
    if not counts:
        raise ConfigurationError("dataset has no live decision points")

    model = TransitionModel(spec=spec)
    for (s, a), bucket in counts.items():
        total = sum(bucket.values())
        rows = []
        for s_next in sorted(bucket, key=repr):
            c = bucket[s_next]
            rows.append((s_next, c / total, reward_sums[(s, a, s_next)] / c))
        model.kernel[(s, a)] = rows
        model.state_actions.setdefault(s, []).append(a)
        model.counts[(s, a)] = total
    for acts in model.state_actions.values():
        acts.sort()
    model.next_only_states = {
        s for s in seen_next if s != DEAD and s not in model.state_actions
    }
    return model


@dataclass
class QTable:
    """Action values over the observed (state, action) pairs."""

    values: dict
    iterations: int
    final_delta: float
    sup_diffs: list[float]

    def state_value(self, s) -> float:
        acts = [v for (s2, _), v in self.values.items() if s2 == s]
        if not acts:
            raise DomainError(f"no action values defined at state {s}")
        return max(acts)


def value_iteration(model: TransitionModel, gamma: float, epsilon: float = 1e-8,
                    max_iterations: int = 10_000) -> QTable:
    """Synchronous fixed-point iteration of the empirical Bellman operator.

    Q_{k+1}(s,a) = sum_{s'} P(s'|s,a) [ r(s,a,s') + gamma max_{a'} Q_k(s',a') ],
    with the absorbing state worth zero and destination-only states (no
    outgoing data) also treated as worth zero.  Stops when the sup-norm of
    successive updates drops below epsilon.
    """
    if not 0.0 <= gamma < 1.0:
        raise ConfigurationError(f"gamma must lie in [0, 1), got {gamma}")
    if epsilon <= 0:
        raise ConfigurationError("epsilon must be positive")
    pairs = model.pairs
    index = {pair: i for i, pair in enumerate(pairs)}
    states = sorted(model.state_actions, key=repr)
    state_index = {s: i for i, s in enumerate(states)}
    state_slots = [np.asarray([index[(s, a)] for a in model.state_actions[s]])
                   for s in states]

    # flatten destinations: -1 means "worth zero" (absorbing or no outgoing data)
    dest_idx, probs, rewards = [], [], []
    for pair in pairs:
        rows = model.kernel[pair]
        dest_idx.append(np.asarray([
            state_index.get(s, -1) if s != DEAD else -1 for s, _, _ in rows
        ]))
        probs.append(np.asarray([p for _, p, _ in rows]))
        rewards.append(np.asarray([r for _, _, r in rows]))

    q = np.zeros(len(pairs))
    sv = np.zeros(len(states) + 1)  # trailing slot holds the zero value
    sup_diffs: list[float] = []
    it = 0
    for it in range(1, max_iterations + 1):
        for j, slots in enumerate(state_slots):
            sv[j] = q[slots].max()
        sv[-1] = 0.0
        v_next = np.empty(len(pairs))
        for i in range(len(pairs)):
            cont = sv[dest_idx[i]]
            v_next[i] = float(probs[i] @ (rewards[i] + gamma * cont))
        diff = float(np.max(np.abs(v_next - q)))
        sup_diffs.append(diff)
        q = v_next
        if diff < epsilon:
            break

    values = {pair: float(q[index[pair]]) for pair in pairs}
    return QTable(values=values, iterations=it, final_delta=sup_diffs[-1],
                  sup_diffs=sup_diffs)


@dataclass
class TabularPolicy:
    """Deterministic action table over discrete states.

    Lookups of unknown states raise unless default_action is set (rollouts
    through rarely-visited regions set a safe default and count fallbacks).
    The optional discretizer lets the policy consume full continuous states.
    """

    table: dict
    spec: DiscretizerSpec | None = None
    default_action: int | None = None
    fallbacks: int = 0

    def __call__(self, state) -> int:
        key = state
        if isinstance(state, State):
            if self.spec is None:
                raise ConfigurationError("policy has no discretizer attached")
            key = discretize(self.spec, state)
        if key in self.table:
            return self.table[key]
        if self.default_action is None:
            raise DomainError(f"no action defined at state {key}")
        self.fallbacks += 1
        return self.default_action

    def select_batch(self, nat, d, a1c, bp, weight) -> np.ndarray:
        if self.spec is None:
            raise ConfigurationError("policy has no discretizer attached")
        keys = discretize_batch(self.spec, nat, d, a1c, bp, weight)
        out = np.empty(keys.shape[0], dtype=int)
        for i in range(keys.shape[0]):
            key = tuple(int(v) for v in keys[i])
            a = self.table.get(key)
            if a is None:
                if self.default_action is None:
                    raise DomainError(f"no action defined at state {key}")
                self.fallbacks += 1
                a = self.default_action
            out[i] = a
        return out


def _state_label(s) -> str:
    if s == DEAD:
        return DEAD
    return ";".join(str(int(v)) for v in s)


def _parse_state_label(label: str):
    if label == DEAD:
        return DEAD
    return tuple(int(v) for v in label.split(";"))


def save_qtable(qtable: QTable, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["state", "action", "value"])
        for (s, a) in sorted(qtable.values, key=lambda pair: (repr(pair[0]), pair[1])):
            writer.writerow([_state_label(s), a, repr(qtable.values[(s, a)])])


def load_qtable(path: str | Path) -> QTable:
    values = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["state", "action", "value"]:
            raise ConfigurationError(f"{path}: not a saved action-value table")
        for row in reader:
            values[(_parse_state_label(row[0]), int(row[1]))] = float(row[2])
    return QTable(values=values, iterations=0, final_delta=0.0, sup_diffs=[])


def save_transition_model(model: TransitionModel, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["state", "action", "next_state", "probability", "mean_reward"])
        for (s, a) in model.pairs:
            for s_next, p, r in model.kernel[(s, a)]:
                writer.writerow([_state_label(s), a, _state_label(s_next),
                                 repr(float(p)), repr(float(r))])


def policy_from_q(qtable: QTable, spec: DiscretizerSpec | None = None,
                  default_action: int | None = None) -> TabularPolicy:
    """Greedy policy from a Q table; ties break to the lowest action code."""
    by_state: dict = {}
    for (s, a), v in qtable.values.items():
        by_state.setdefault(s, []).append((a, v))
    table = {}
    for s, pairs in by_state.items():
        if not pairs:
            raise DomainError(f"no action values defined at state {s}")
        best_a, best_v = None, -np.inf
        for a, v in sorted(pairs):
            if v > best_v:
                best_a, best_v = a, v
        table[s] = best_a
    return TabularPolicy(table=table, spec=spec, default_action=default_action)
