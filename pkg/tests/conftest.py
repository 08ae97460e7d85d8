"""Shared fixtures: an exactly solvable 3-state MDP and small cached cohorts.

The toy model is solved two independent ways (exhaustive policy enumeration
with exact linear solves here; fixed-point iteration inside the package), so
tests can cross-check the estimators against a closed-form target.
"""
import numpy as np
import pytest

from ggqdtr import (
    Dataset,
    DiscretizerSpec,
    RbfFeatureMap,
    Schema,
    SimParams,
    TabularFeatureMap,
    Trajectory,
    Transition,
    TransitionModel,
    compile_dataset,
    fit_rbf_spec,
    make_state,
    simulate_cohort,
)

# Transition kernel indexed [action, state, next_state]; rows sum to one.
TOY_P = np.array([
    [[0.7, 0.2, 0.1], [0.1, 0.6, 0.3], [0.2, 0.3, 0.5]],
    [[0.3, 0.4, 0.3], [0.5, 0.1, 0.4], [0.1, 0.2, 0.7]],
])
# Deterministic reward per (state, action).
TOY_R = np.array([[1.0, 0.0], [0.0, 2.0], [-1.0, 0.5]])
TOY_GAMMA = 0.6
TOY_T = 6
TOY_STATES = 3
TOY_ACTIONS = 2


def solve_policy_value(pi) -> np.ndarray:
    """Exact V^pi for a deterministic policy via one linear solve."""
    p_pi = np.stack([TOY_P[pi[s], s] for s in range(TOY_STATES)])
    r_pi = np.array([TOY_R[s, pi[s]] for s in range(TOY_STATES)])
    return np.linalg.solve(np.eye(TOY_STATES) - TOY_GAMMA * p_pi, r_pi)


def toy_q_star() -> np.ndarray:
    """Optimal action values by exhaustive policy enumeration.

    The optimal stationary deterministic policy dominates every other
    policy at every state simultaneously, so the best policy's value is
    V* and Q* follows from one Bellman backup.
    """
    best_v, best_pi = None, None
    for code in range(TOY_ACTIONS ** TOY_STATES):
        pi = [(code >> s) & 1 for s in range(TOY_STATES)]
        v = solve_policy_value(pi)
        if best_v is None or v.sum() > best_v.sum():
            best_v, best_pi = v, pi
    for code in range(TOY_ACTIONS ** TOY_STATES):
        pi = [(code >> s) & 1 for s in range(TOY_STATES)]
        assert np.all(solve_policy_value(pi) <= best_v + 1e-9), \
            "optimal policy must dominate pointwise"
    q = np.empty((TOY_STATES, TOY_ACTIONS))
    for s in range(TOY_STATES):
        for a in range(TOY_ACTIONS):
            q[s, a] = TOY_R[s, a] + TOY_GAMMA * TOY_P[a, s] @ best_v
    return q


TOY_SCHEMA = Schema(("s",), ("int",))


def toy_dataset(n: int, seed: int, horizon: int = TOY_T) -> Dataset:
    """Uniform-behavior trajectories from the toy kernel."""
    rng = np.random.default_rng(seed)
    trajs = []
    for i in range(n):
        s = int(rng.integers(TOY_STATES))
        rows = []
        for t in range(horizon):
            a = int(rng.integers(TOY_ACTIONS))
            s2 = int(rng.choice(TOY_STATES, p=TOY_P[a, s]))
            rows.append(Transition(make_state(s), a, float(TOY_R[s, a]),
                                   make_state(s2), t))
            s = s2
        trajs.append(Trajectory(str(i), tuple(rows)))
    return Dataset(tuple(trajs), TOY_SCHEMA, horizon)


def toy_sim_arrays(n: int, horizon: int, seed: int):
    """Vectorized draw from the toy kernel.

    Returns (states, actions, rewards, next_states), each (n, horizon).
    """
    rng = np.random.default_rng(seed)
    s = rng.integers(TOY_STATES, size=n)
    steps = []
    for _ in range(horizon):
        a = rng.integers(TOY_ACTIONS, size=n)
        u = rng.random(n)
        s2 = (u[:, None] > np.cumsum(TOY_P[a, s], axis=1)).sum(axis=1)
        steps.append((s, a, TOY_R[s, a], s2))
        s = s2
    return tuple(np.stack([st[j] for st in steps], axis=1) for j in range(4))


def toy_dataset_vec(n: int, seed: int, horizon: int = TOY_T) -> Dataset:
    """Same law as toy_dataset, drawn in bulk; preferred at large n."""
    states, actions, rewards, nexts = toy_sim_arrays(n, horizon, seed)
    trajs = []
    for i in range(n):
        rows = tuple(
            Transition(make_state(int(states[i, t])), int(actions[i, t]),
                       float(rewards[i, t]), make_state(int(nexts[i, t])), t)
            for t in range(horizon)
        )
        trajs.append(Trajectory(str(i), rows))
    return Dataset(tuple(trajs), TOY_SCHEMA, horizon)


def toy_feature_map() -> TabularFeatureMap:
    return TabularFeatureMap([
        (make_state(s), a)
        for s in range(TOY_STATES)
        for a in range(TOY_ACTIONS)
    ])


def toy_transition_model() -> TransitionModel:
    """The exact toy kernel packaged for value iteration (nothing estimated)."""
    spec = DiscretizerSpec()
    model = TransitionModel(spec=spec)
    for s in range(TOY_STATES):
        key = (s,)
        model.state_actions[key] = list(range(TOY_ACTIONS))
        for a in range(TOY_ACTIONS):
            rows = [((s2,), float(TOY_P[a, s, s2]), float(TOY_R[s, a]))
                    for s2 in range(TOY_STATES)]
            model.kernel[(key, a)] = rows
            model.counts[(key, a)] = 1
    return model


@pytest.fixture(scope="session")
def q_star():
    return toy_q_star()


@pytest.fixture(scope="session")
def toy_fmap():
    return toy_feature_map()


@pytest.fixture(scope="session")
def toy_data_small():
    return toy_dataset(n=400, seed=7)


@pytest.fixture(scope="session")
def toy_theta_star(q_star, toy_fmap):
    """Exact optimal weights: one-hot features make Q* itself realizable."""
    table = {(make_state(s), a): q_star[s, a]
             for s in range(TOY_STATES) for a in range(TOY_ACTIONS)}
    return toy_fmap.theta_from_table(table)


@pytest.fixture(scope="session")
def cohort800():
    return simulate_cohort(SimParams(n=800, seed=0))


@pytest.fixture(scope="session")
def rbf800(cohort800):
    fmap = RbfFeatureMap(fit_rbf_spec(cohort800))
    return fmap, compile_dataset(cohort800, fmap)
