"""Discretizer, empirical kernel, value iteration and tabular policies."""
import numpy as np
import pytest

from ggqdtr import (
    ABSORBING,
    ACTION_NONE,
    ConfigurationError,
    Dataset,
    DiscretizerSpec,
    DomainError,
    Schema,
    TabularPolicy,
    Trajectory,
    Transition,
    estimate_transitions,
    load_qtable,
    make_state,
    policy_from_q,
    save_qtable,
    value_iteration,
)
from ggqdtr.classical import DEAD, discretize, discretize_batch

from conftest import TOY_GAMMA, toy_q_star, toy_transition_model

DIABETES_SCHEMA = Schema(("nat", "d", "a1c", "bp", "weight"),
                         ("int", "int", "real", "real", "real"))


def test_bins_are_left_open_right_closed():
    spec = DiscretizerSpec.oracle()
    cells = discretize_batch(spec, [0, 0, 0, 0], [0, 0, 0, 0],
                             [6.9, 7.0, 7.0001, 9.5], [0] * 4, [0] * 4)
    assert cells[:, 2].tolist() == [1, 1, 2, 7]
    # an exact interior edge lands in the bin it closes
    assert discretize(spec, make_state(2, 1, 7.5, 0, 0)) == (2, 1, 3)
    assert discretize(spec, ABSORBING) == DEAD


def test_discretizer_validation():
    with pytest.raises(ConfigurationError, match="strictly increasing"):
        DiscretizerSpec(a1c_edges=(7.0, 7.0))
    with pytest.raises(ConfigurationError, match="finite"):
        DiscretizerSpec(a1c_edges=(7.0, float("inf")))
    with pytest.raises(ConfigurationError, match="nonempty"):
        DiscretizerSpec(a1c_edges=())


def test_discretizer_fit_matches_quantiles(cohort800):
    spec = DiscretizerSpec.fit(cohort800, percentiles=(0.30, 0.80))
    bp = [tr.state.components[3] for traj in cohort800 for tr in traj
          if not tr.state.is_absorbing]
    assert spec.bp_edges[0] == pytest.approx(np.quantile(bp, 0.30))
    assert spec.bp_edges[1] == pytest.approx(np.quantile(bp, 0.80))
    assert spec.a1c_edges == (7.0, 7.2, 7.5, 7.7, 8.0, 9.0)


def _tiny_cohort() -> Dataset:
    s1 = make_state(0, 0, 7.5, 1.0, 20.0)
    s2 = make_state(1, 0, 8.5, 1.0, 20.0)
    s3 = make_state(1, 0, 6.5, 1.0, 20.0)
    s4 = make_state(1, 1, 8.6, 1.0, 20.0)
    a = Trajectory("a", (
        Transition(s1, 1, 0.0, s2, 0),
        Transition(s2, 0, 1.0, s3, 1),
    ))
    b = Trajectory("b", (
        Transition(s1, 1, 2.0, s2, 0),
        Transition(s2, 0, -2.0, s4, 1),
    ))
    return Dataset((a, b), DIABETES_SCHEMA, horizon=2)


def test_estimate_transitions_exact_counts():
    model = estimate_transitions(_tiny_cohort(), DiscretizerSpec.oracle())
    assert model.kernel[((0, 0, 3), 1)] == [((1, 0, 6), 1.0, 1.0)]
    rows = dict((s, (p, r)) for s, p, r in model.kernel[((1, 0, 6), 0)])
    assert rows[(1, 0, 1)] == (0.5, 1.0)
    assert rows[(1, 1, 6)] == (0.5, -2.0)
    assert model.counts[((0, 0, 3), 1)] == 2
    assert model.next_only_states == {(1, 0, 1), (1, 1, 6)}
    report = model.coverage_report()
    assert report["observed_pairs"] == 2
    for (s, a), rows in model.kernel.items():
        assert sum(p for _, p, _ in rows) == pytest.approx(1.0)


def test_estimate_transitions_rejects_empty():
    empty = Dataset((), DIABETES_SCHEMA, horizon=0)
    with pytest.raises(ConfigurationError, match="no live decision points"):
        estimate_transitions(empty, DiscretizerSpec.oracle())


def test_value_iteration_destination_only_states_worth_zero():
    model = estimate_transitions(_tiny_cohort(), DiscretizerSpec.oracle())
    q = value_iteration(model, gamma=0.6)
    assert q.values[((1, 0, 6), 0)] == pytest.approx(-0.5)
    assert q.values[((0, 0, 3), 1)] == pytest.approx(1.0 + 0.6 * -0.5)


def test_value_iteration_matches_exact_policy_solve(q_star):
    q = value_iteration(toy_transition_model(), TOY_GAMMA, epsilon=1e-10)
    for s in range(3):
        for a in range(2):
            assert q.values[((s,), a)] == pytest.approx(q_star[s, a], abs=1e-8)
    assert q.final_delta < 1e-10
    assert q.iterations < 10_000


def test_frozen_toy_optimum():
    # regression pin for the fixture itself
    np.testing.assert_allclose(
        toy_q_star(),
        [[2.626, 1.630], [1.727, 3.437], [0.487, 1.845]],
        atol=2e-3,
    )


def test_value_iteration_contracts_at_gamma():
    q = value_iteration(toy_transition_model(), TOY_GAMMA, epsilon=1e-12)
    diffs = q.sup_diffs
    assert len(diffs) >= 10
    for before, after in zip(diffs[1:-1], diffs[2:]):
        # absolute slack absorbs float rounding of the sup norms themselves
        assert after <= TOY_GAMMA * before + 1e-13


def test_value_iteration_validation():
    model = toy_transition_model()
    with pytest.raises(ConfigurationError, match="gamma"):
        value_iteration(model, gamma=1.0)
    with pytest.raises(ConfigurationError, match="epsilon"):
        value_iteration(model, TOY_GAMMA, epsilon=0.0)


def test_policy_from_q_breaks_ties_low():
    q = value_iteration(toy_transition_model(), TOY_GAMMA)
    policy = policy_from_q(q)
    for s in range(3):
        vals = {a: q.values[((s,), a)] for a in range(2)}
        assert policy.table[(s,)] == max(sorted(vals), key=lambda a: (vals[a], -a))
    assert q.state_value((1,)) == pytest.approx(max(q.values[((1,), a)]
                                                    for a in range(2)))
    with pytest.raises(DomainError):
        q.state_value((9,))


def test_tabular_policy_lookup_and_fallback():
    policy = TabularPolicy(table={(0, 0, 1): 1}, spec=DiscretizerSpec.oracle())
    assert policy(make_state(0, 0, 6.0, 1.0, 20.0)) == 1
    with pytest.raises(DomainError, match="no action defined"):
        policy((9, 9, 9))
    soft = TabularPolicy(table={}, spec=DiscretizerSpec.oracle(), default_action=0)
    acts = soft.select_batch(np.array([0, 1]), np.array([0, 0]),
                             np.array([7.1, 8.2]), np.zeros(2), np.zeros(2))
    assert acts.tolist() == [0, 0]
    assert soft.fallbacks == 2
    bare = TabularPolicy(table={})
    with pytest.raises(ConfigurationError, match="no discretizer"):
        bare(make_state(0, 0, 6.0, 1.0, 20.0))


def test_qtable_round_trip(tmp_path):
    q = value_iteration(toy_transition_model(), TOY_GAMMA)
    q.values[(DEAD, ACTION_NONE)] = 0.0
    path = tmp_path / "q.csv"
    save_qtable(q, path)
    back = load_qtable(path)
    assert back.values == q.values
    junk = tmp_path / "junk.csv"
    junk.write_text("a,b\n1,2\n")
    with pytest.raises(ConfigurationError, match="not a saved action-value"):
        load_qtable(junk)
