"""Feature-map contracts: tabular one-hots and the radial-basis layout."""
import numpy as np
import pytest

from ggqdtr import (
    ABSORBING,
    ConfigurationError,
    DomainError,
    RbfFeatureMap,
    TabularFeatureMap,
    fit_rbf_spec,
    load_rbf_spec,
    make_state,
    save_rbf_spec,
)

from conftest import toy_feature_map


def test_tabular_one_hot():
    fmap = toy_feature_map()
    assert fmap.dim == 6
    s, a = make_state(1), 1
    phi = fmap.features(s, a)
    assert phi.sum() == 1.0 and phi[fmap._index[(s, a)]] == 1.0
    assert fmap.feasible_actions(s) == (0, 1)
    assert np.all(fmap.features(ABSORBING, 0) == 0.0)
    with pytest.raises(DomainError):
        fmap.features(make_state(9), 0)
    with pytest.raises(DomainError):
        fmap.feasible_actions(ABSORBING)
    with pytest.raises(ConfigurationError, match="duplicate"):
        TabularFeatureMap([(make_state(0), 0), (make_state(0), 0)])


def test_tabular_theta_from_table_round_trip():
    fmap = toy_feature_map()
    table = {(make_state(s), a): 10.0 * s - a for s in range(3) for a in range(2)}
    theta = fmap.theta_from_table(table)
    for (s, a), v in table.items():
        assert float(theta @ fmap.features(s, a)) == v


def test_rbf_dimension_and_block_widths(rbf800):
    fmap, _ = rbf800
    widths = [b.width for b in fmap.spec.blocks]
    assert widths == [7, 9, 8, 9, 9, 7, 9, 8, 9]
    assert fmap.dim == 75


def test_rbf_feasible_actions(rbf800):
    fmap, _ = rbf800
    for nat in range(4):
        assert fmap.feasible_actions(make_state(nat, 0, 8, 10, 100)) == (0, nat + 1)
    assert fmap.feasible_actions(make_state(4, 0, 8, 10, 100)) == (0,)
    with pytest.raises(DomainError):
        fmap.feasible_actions(make_state(5, 0, 8, 10, 100))
    with pytest.raises(DomainError):
        fmap.feasible_actions(ABSORBING)


def test_rbf_absorbing_features_are_zero(rbf800):
    fmap, _ = rbf800
    assert np.all(fmap.features(ABSORBING, 0) == 0.0)
    assert np.all(fmap.features(ABSORBING, 3) == 0.0)


def test_rbf_block_structure(rbf800):
    fmap, _ = rbf800
    s = make_state(2, 1, 8.1, 1.0, 20.0)
    phi_cont = fmap.features(s, 0)
    phi_aug = fmap.features(s, 3)
    off_cont = fmap._offsets[(0, 2)]
    off_aug = fmap._offsets[(3, 2)]
    w_cont = fmap._blocks[(0, 2)].width
    w_aug = fmap._blocks[(3, 2)].width
    # support confined to the matching block, intercept set, D flag copied
    assert np.all(phi_cont[np.r_[0:off_cont, off_cont + w_cont:fmap.dim]] == 0.0)
    assert np.all(phi_aug[np.r_[0:off_aug, off_aug + w_aug:fmap.dim]] == 0.0)
    assert phi_cont[off_cont] == 1.0
    d_slot = off_cont + 1 + len(fmap._blocks[(0, 2)].a1c_centers)
    assert phi_cont[d_slot] == 1.0
    # kernel values match the closed form
    h = fmap.spec.bandwidth
    c0 = fmap._blocks[(0, 2)].a1c_centers[0]
    assert phi_cont[off_cont + 1] == pytest.approx(np.exp(-h * (8.1 - c0) ** 2))
    with pytest.raises(DomainError, match="infeasible"):
        fmap.features(s, 1)


def test_rbf_batch_matches_scalar(rbf800, cohort800):
    fmap, _ = rbf800
    rng = np.random.default_rng(0)
    states, actions = [], []
    for traj in cohort800:
        for tr in traj:
            if not tr.state.is_absorbing:
                states.append(tr.state)
                actions.append(tr.action)
    pick = rng.choice(len(states), size=50, replace=False)
    nat = np.array([states[i].components[0] for i in pick])
    d = np.array([states[i].components[1] for i in pick])
    a1c = np.array([states[i].components[2] for i in pick])
    bp = np.array([states[i].components[3] for i in pick])
    w = np.array([states[i].components[4] for i in pick])
    act = np.array([actions[i] for i in pick])
    batch = fmap.features_batch(nat, d, a1c, bp, w, act, np.zeros(50, dtype=bool))
    for row, i in enumerate(pick):
        np.testing.assert_allclose(batch[row], fmap.features(states[i], actions[i]),
                                   rtol=0, atol=0)
    # absorbing rows come out zero
    absorbing = np.ones(50, dtype=bool)
    assert np.all(fmap.features_batch(nat, d, a1c, bp, w, act, absorbing) == 0.0)


def test_rbf_batch_rejects_infeasible_rows(rbf800):
    fmap, _ = rbf800
    with pytest.raises(DomainError, match="row 1"):
        fmap.features_batch(
            np.array([0, 0]), np.zeros(2), np.array([8.0, 8.0]),
            np.zeros(2), np.zeros(2), np.array([1, 2]), np.zeros(2, dtype=bool),
        )


def test_fit_rbf_spec_deterministic_and_conditional(cohort800):
    s1 = fit_rbf_spec(cohort800)
    s2 = fit_rbf_spec(cohort800)
    assert s1 == s2
    # fixed clinical centers appear verbatim
    by_key = {(b.action, b.nat): b for b in s1.blocks}
    assert by_key[(1, 0)].a1c_centers == (6.5, 7.5)
    assert 8.5 in by_key[(4, 3)].a1c_centers
    # per-block quantile conditioning: the (0,2) block's A1c quartiles differ
    # from the (0,1) block's
    assert by_key[(0, 2)].a1c_centers[0] != by_key[(0, 1)].a1c_centers[0]
    with pytest.raises(ConfigurationError, match="bandwidth"):
        fit_rbf_spec(cohort800, bandwidth=0.0)


def test_rbf_spec_round_trip(tmp_path, rbf800):
    fmap, _ = rbf800
    path = tmp_path / "spec.json"
    save_rbf_spec(fmap.spec, path)
    assert load_rbf_spec(path) == fmap.spec
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    with pytest.raises(ConfigurationError, match="not a radial-basis spec"):
        load_rbf_spec(bad)
