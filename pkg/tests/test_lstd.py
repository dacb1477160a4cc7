import numpy as np
import pytest
import scipy.sparse as sp
from scipy.linalg import LinAlgError, cholesky

from conftest import random_model
from opdop.cmdp import REWARD, UTILITY, run_episode, uniform_policy
from opdop.envs import canonical_features, make_linear_mixture
from opdop.exceptions import NumericError
from opdop.lstd import (
    CholeskyGram,
    FeatureMaps,
    LstdState,
    LstdUcb,
    check_factors,
    elliptical_potential_bound,
    integrate_value_feature,
    ridge_solve,
    ucb_bonus,
)


@pytest.fixture
def mixture():
    return make_linear_mixture(4, 3, 5, 3, 4, 4, 1.0, seed=3)


def test_integrate_zero_value(mixture):
    _, maps = mixture
    assert not integrate_value_feature(maps, 0, np.zeros(5)).any()


def test_integrate_canonical_is_sparse_copy(rng):
    m = random_model(rng, S=3, A=2, H=2)
    maps = canonical_features(m)
    v = np.array([0.5, 1.0, 2.0])
    feat = integrate_value_feature(maps, 0, v)
    for x in range(3):
        for a in range(2):
            expected = np.zeros(18)
            expected[(x * 2 + a) * 3:(x * 2 + a + 1) * 3] = v
            np.testing.assert_array_equal(feat[x, a], expected)


def test_integrate_matches_kernel_sum(mixture, rng):
    m, maps = mixture
    for h in range(m.horizon):
        v = rng.random(5) * m.horizon
        feat = integrate_value_feature(maps, h, v)
        np.testing.assert_allclose(feat @ maps.theta[h], m.transitions[h] @ v, atol=1e-9)


def test_integrate_rejects_out_of_range(mixture):
    _, maps = mixture
    with pytest.raises(ValueError):
        integrate_value_feature(maps, 0, np.full(5, 4.1))
    with pytest.raises(ValueError):
        integrate_value_feature(maps, 0, np.full(5, -0.01))
    integrate_value_feature(maps, 0, np.full(5, 4.0 + 1e-10))


def test_integrate_custom_integrator(mixture):
    _, maps = mixture
    calls = []

    def integrator(mp, v):
        calls.append(v)
        return np.ones((15, mp.d1))

    assert integrate_value_feature(maps, 0, np.ones(5), integrator).shape == (5, 3, 4)
    assert len(calls) == 1


def test_ridge_empty_archive(mixture):
    _, maps = mixture
    state = LstdState(maps, 4, beta=1.0)
    w, u = ridge_solve(state, 0, REWARD)
    assert not w.any() and not u.any()


def test_ridge_single_sample_by_hand(rng):
    maps = canonical_features(random_model(rng, S=1, A=2, H=1, b=0.5))
    state = LstdState(maps, 1, beta=1.0)
    e1 = np.array([1.0, 0.0])
    state.value_grams[0].update(e1)
    state.value_rhs[REWARD][0] += e1
    _, u = ridge_solve(state, 0, REWARD)
    np.testing.assert_allclose(u, [0.5, 0.0], atol=1e-15)


def test_ridge_matches_normal_equations(rng):
    d = 4
    gram = CholeskyGram(d, 1.0)
    X = rng.normal(size=(50, d))
    y = rng.normal(size=50)
    for row in X:
        gram.update(row)
    dense = np.linalg.solve(X.T @ X + np.eye(d), X.T @ y)
    np.testing.assert_allclose(gram.solve(X.T @ y), dense, atol=1e-9)
    np.testing.assert_allclose(gram.factor, cholesky(X.T @ X + np.eye(d), lower=True), atol=1e-10)


def test_bonus_examples(rng):
    maps = canonical_features(random_model(rng, S=1, A=2, H=1, b=0.5))
    state = LstdState(maps, 1, beta=2.0)
    e1 = np.array([1.0, 0.0])
    reg = np.zeros(maps.d1)
    reg[0] = 1.0
    assert ucb_bonus(state, 0, REWARD, e1, reg) == (2.0, 2.0)
    state.beta = 0.0
    assert ucb_bonus(state, 0, REWARD, e1, reg) == (0.0, 0.0)
    state.beta = 2.0
    for _ in range(100):
        state.value_grams[0].update(e1)
    assert ucb_bonus(state, 0, REWARD, e1, reg)[0] == pytest.approx(2.0 / np.sqrt(101), abs=1e-9)
    rows = ucb_bonus(state, 0, REWARD, np.eye(2), np.eye(maps.d1)[:2])
    assert rows[0].shape == (2,)


def run_lstd(model, maps, episodes, beta=1.0, seed=0):
    backend = LstdUcb(maps, model.horizon, beta)
    pi = uniform_policy(model.horizon, model.num_states, model.num_actions)
    gen = np.random.default_rng(seed)
    estimates = []
    for k in range(episodes):
        traj = run_episode(model, pi, gen, k + 1)
        estimates.append(backend.evaluate(pi, traj))
    return backend, estimates


def test_first_episode_is_pure_bonus(mixture):
    m, maps = mixture
    backend, (est, *_) = run_lstd(m, maps, 1, beta=0.3)
    H = m.horizon
    for h in range(H):
        np.testing.assert_allclose(est.q_reward[h], np.clip(est.bonus_reward[h], 0, H - h), atol=1e-12)
    np.testing.assert_allclose(est.band_reward, 2 * est.bonus_reward)


def test_truncation_and_v_backup(mixture):
    m, maps = mixture
    _, ests = run_lstd(m, maps, 30, beta=50.0)
    pi = uniform_policy(m.horizon, 5, 3)
    for est in ests:
        for h in range(m.horizon):
            assert est.q_utility[h].max() <= m.horizon - h
            np.testing.assert_allclose(est.v_reward[h], (est.q_reward[h] * pi[h]).sum(-1), atol=1e-10)
    # large beta pins every entry at the cap
    assert np.all(ests[-1].q_reward[0] == m.horizon)


def test_gram_reproducible_and_factors_stable(mixture):
    m, maps = mixture
    backend, _ = run_lstd(m, maps, 130)
    st = backend.state
    for h in range(m.horizon):
        phis = np.array([s[0] for s in st.archive["value"][h]])
        np.testing.assert_allclose(st.value_grams[h].gram, phis.T @ phis + np.eye(maps.d2), atol=1e-9)
        feats = np.array([s[0] for s in st.archive[UTILITY][h]])
        np.testing.assert_allclose(st.regression_grams[UTILITY][h].gram, feats.T @ feats + np.eye(maps.d1),
                                   atol=1e-9)
    assert check_factors(st) <= 1e-8
    for g in st.grams():
        assert np.linalg.eigvalsh(g.gram).min() >= 1.0 - 1e-9


def test_quadratic_form_non_increasing(rng):
    gram = CholeskyGram(3, 1.0)
    probe = rng.normal(size=3)
    prev = gram.inverse_quadratic(probe)[0]
    for _ in range(40):
        gram.update(rng.normal(size=3))
        cur = gram.inverse_quadratic(probe)[0]
        assert cur <= prev + 1e-12
        prev = cur


def test_elliptical_potential_holds(mixture):
    m, maps = mixture
    backend, _ = run_lstd(m, maps, 200)
    bound = elliptical_potential_bound(maps.d, 200, 1.0)
    assert np.all(backend.state.potential <= bound)
    assert backend.diagnostics()["elliptical_bound"] == bound


def test_rebuild_then_hard_error(mixture):
    _, maps = mixture
    state = LstdState(maps, 2, beta=1.0)
    state.value_grams[0].factor[0, 0] = -1.0
    # the archive is empty, so a rebuild restores lam * I
    ridge_solve(state, 0, REWARD)
    assert state.value_grams[0].factor[0, 0] == 1.0

    class Broken(CholeskyGram):
        def solve(self, rhs):
            raise LinAlgError("broken")

    state.value_grams[1] = Broken(maps.d2, 1.0)
    state.rebuild_from_archive = lambda: None
    with pytest.raises(NumericError):
        ridge_solve(state, 1, REWARD)


def test_sparse_and_dense_maps_agree(rng):
    m = random_model(rng, S=3, A=2, H=2)
    sparse = canonical_features(m)
    assert sp.issparse(sparse.psi)
    dense = FeatureMaps(sparse.psi.toarray(), sparse.phi.toarray(), sparse.theta, sparse.theta_reward,
                        sparse.theta_utility, 3, 2)
    v = rng.random(3)
    np.testing.assert_allclose(sparse.integrate(v), dense.integrate(v), atol=1e-15)
