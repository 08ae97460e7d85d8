"""Core data model for batch trajectory MDPs.

States are fixed-arity tuples of named real components, with a single shared
absorbing state (death / end of process).  A trajectory is the ordered list of
transitions (s_t, a_t, r_{t+1}, s_{t+1}) recorded for one subject; a dataset
is a list of trajectories sharing one schema and one maximal horizon.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Action code recorded when no action exists (absorbing state, terminal row).
ACTION_NONE = -1


class ConfigurationError(ValueError):
    """Raised for inconsistent dimensions, invalid constants or bad options."""


class DomainError(ValueError):
    """Raised when an operation is applied outside its domain
    (e.g. greedy action of an absorbing state, infeasible action)."""


class ParseError(ValueError):
    """Raised by the trajectory file reader with subject/time context."""


class NumericalError(RuntimeError):
    """Raised when a linear-algebra step is too ill-conditioned to trust."""


class EstimationError(RuntimeError):
    """Raised when an iterative fit diverges; carries the trace so far."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class Schema:
    """Names and kinds ("int" or "real") of the state components."""

    names: tuple[str, ...]
    kinds: tuple[str, ...]

    def __post_init__(self):
        if len(self.names) != len(self.kinds):
            raise ConfigurationError("schema names and kinds differ in length")
        bad = [k for k in self.kinds if k not in ("int", "real")]
        if bad:
            raise ConfigurationError(f"unknown component kinds: {bad}")

    @property
    def arity(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigurationError(f"unknown state component {name!r}") from None


# Component order used by the diabetes cohort simulator and the default
# trajectory file layout.
DIABETES_SCHEMA = Schema(
    names=("nat", "d", "a1c", "bp", "weight"),
    kinds=("int", "int", "real", "real", "real"),
)


@dataclass(frozen=True)
class State:
    """A state: a tuple of float components, or None for the absorbing state."""

    components: tuple[float, ...] | None

    @property
    def is_absorbing(self) -> bool:
        return self.components is None

    def component(self, schema: Schema, name: str) -> float:
        if self.is_absorbing:
            raise DomainError("absorbing state has no components")
        return self.components[schema.index(name)]


ABSORBING = State(None)


def make_state(*components: float) -> State:
    return State(tuple(float(c) for c in components))


@dataclass(frozen=True)
class Transition:
    """(s, a, r_next, s_next) at decision index t.

    Absorbing source states carry the no-action sentinel, zero reward and an
    absorbing successor; once entered, the absorbing state persists.
    """

    state: State
    action: int
    reward: float
    next_state: State
    t: int

    def __post_init__(self):
        if self.state.is_absorbing:
            if self.action != ACTION_NONE:
                raise DomainError(f"t={self.t}: absorbing state with action {self.action}")
            if self.reward != 0.0:
                raise DomainError(f"t={self.t}: absorbing state with nonzero reward")
            if not self.next_state.is_absorbing:
                raise DomainError(f"t={self.t}: absorbing state with live successor")
        elif self.action < 0:
            raise DomainError(f"t={self.t}: live state with action {self.action}")


@dataclass(frozen=True)
class Trajectory:
    """One subject's ordered transitions for t = 0..len-1."""

    subject_id: str
    transitions: tuple[Transition, ...]

    def __post_init__(self):
        prev_next = None
        for i, tr in enumerate(self.transitions):
            if tr.t != i:
                raise DomainError(
                    f"subject {self.subject_id}: transition index {tr.t} at position {i}"
                )
            if prev_next is not None and tr.state != prev_next:
                raise DomainError(
                    f"subject {self.subject_id}, t={tr.t}: state does not chain "
                    "from the previous transition"
                )
            prev_next = tr.next_state

    def __len__(self) -> int:
        return len(self.transitions)

    def __iter__(self):
        return iter(self.transitions)


@dataclass(frozen=True)
class Dataset:
    """Trajectories sharing one schema and one maximal decision count."""

    trajectories: tuple[Trajectory, ...]
    schema: Schema
    horizon: int

    def __post_init__(self):
        if self.horizon < 0:
            raise ConfigurationError("horizon must be nonnegative")
        for traj in self.trajectories:
            if len(traj) > self.horizon:
                raise DomainError(
                    f"subject {traj.subject_id}: {len(traj)} transitions exceed "
                    f"horizon {self.horizon}"
                )
            for tr in traj:
                for s in (tr.state, tr.next_state):
                    if not s.is_absorbing and len(s.components) != self.schema.arity:
                        raise DomainError(
                            f"subject {traj.subject_id}, t={tr.t}: state arity "
                            f"{len(s.components)} != schema arity {self.schema.arity}"
                        )

    @property
    def n(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)


def state_action_value(theta: np.ndarray, state: State, action: int, fmap) -> float:
    """Linear action value theta . phi(s, a); zero at the absorbing state."""
    if state.is_absorbing:
        return 0.0
    return float(np.dot(theta, fmap.features(state, action)))


def greedy_action(theta: np.ndarray, state: State, fmap) -> int:
    """Feasible action maximizing theta . phi(s, a).

    Ties break deterministically toward the lowest action code.  Raises
    DomainError for absorbing states (they admit no decision).
    """
    if state.is_absorbing:
        raise DomainError("greedy action requested for the absorbing state")
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (fmap.dim,):
        raise ConfigurationError(
            f"theta has shape {theta.shape}, feature map dimension is {fmap.dim}"
        )
    best_a, best_q = None, -np.inf
    for a in sorted(fmap.feasible_actions(state)):
        q = float(np.dot(theta, fmap.features(state, a)))
        if q > best_q:
            best_a, best_q = a, q
    if best_a is None:
        raise DomainError("state has no feasible actions")
    return best_a


def td_error(theta: np.ndarray, transition: Transition, gamma: float, fmap) -> float:
    """Temporal-difference residual of one transition under theta.

    delta = r + gamma * max_a' theta.phi(s', a') - theta.phi(s, a), where the
    maximum over the absorbing successor is zero by the phi(absorbing,.) = 0
    convention.

    Args:
        theta: coefficient vector of length fmap.dim.
        transition: the observed (s, a, r, s') tuple.
        gamma: discount in [0, 1).
        fmap: feature map supplying phi and the feasible-action rule.
    """
    if not 0.0 <= gamma < 1.0:
        raise ConfigurationError(f"gamma must lie in [0, 1), got {gamma}")
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (fmap.dim,):
        raise ConfigurationError(
            f"theta has shape {theta.shape}, feature map dimension is {fmap.dim}"
        )
    s, s_next = transition.state, transition.next_state
    if s.is_absorbing:
        return float(transition.reward)
    value = float(np.dot(theta, fmap.features(s, transition.action)))
    if s_next.is_absorbing:
        best = 0.0
    else:
        best = max(
            float(np.dot(theta, fmap.features(s_next, a)))
            for a in fmap.feasible_actions(s_next)
        )
    return float(transition.reward) + gamma * best - value


@dataclass(frozen=True)
class GreedyPolicy:
    """Deterministic policy s -> argmax_a theta . phi(s, a)."""

    theta: np.ndarray
    fmap: object = field(repr=False)

    def __call__(self, state: State) -> int:
        return greedy_action(self.theta, state, self.fmap)

    def select_batch(self, nat, d, a1c, bp, weight) -> np.ndarray:
        """Vectorized greedy choice for arrays of diabetes-domain states.

        Requires the feature map to provide features_batch (the radial-basis
        map does); used by the rollout engine.
        """
        nat = np.asarray(nat)
        n = nat.shape[0]
        zeros = np.zeros(n, dtype=bool)
        actions = np.zeros(n, dtype=int)
        q_cont = self.fmap.features_batch(nat, d, a1c, bp, weight, actions, zeros) @ self.theta
        out = np.zeros(n, dtype=int)
        can_augment = nat < 4
        if np.any(can_augment):
            aug = np.where(can_augment, nat + 1, 0).astype(int)
            q_aug = self.fmap.features_batch(nat, d, a1c, bp, weight, aug, zeros) @ self.theta
            # strict > keeps the lowest action code (continue) on ties
            take = can_augment & (q_aug > q_cont)
            out[take] = aug[take]
        return out
