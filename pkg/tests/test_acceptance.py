"""Acceptance criteria, one test per criterion.

Each test prints a ``criterion N: PASS/FAIL`` line; the terminal summary
repeats them. Long OPDOP runs are shared through module-scoped fixtures.
"""

import math
import time

import numpy as np
import pytest

from conftest import acceptance_model, random_model, record_criterion
from opdop.agent import OPDOP
from opdop.cmdp import REWARD, CmdpModel, Trajectory, bellman_apply, evaluate_policy_exact, optimal_values
from opdop.envs import canonical_features, make_hazard_gridworld
from opdop.hindsight import dual_function, estimate_slater_gap, solve_hindsight
from opdop.ledger import RegretLedger, fit_regret_slope, score_episode
from opdop.lstd import CholeskyGram, LstdState, ridge_solve, ucb_bonus
from opdop.primal_dual import DualState, dual_update, mix_policy, policy_improve
from opdop.tabular import EmpiricalModel, VisitCounters, estimate_model, evaluate_tabular, update_counters

BACKENDS = ("tabular", "lstd")
SEEDS = range(10)
# bonus scale for the sublinearity runs; see the README for the sweep
SUBLINEAR_C1 = 0.003


def rollout_returns(model, policy, n, gen):
    """Vectorized Monte Carlo returns of ``n`` independent episodes."""
    H, S, A = model.horizon, model.num_states, model.num_actions
    pi_cdf = np.cumsum(policy, axis=-1)
    p_cdf = np.cumsum(model.transitions, axis=-1)
    x = np.full(n, model.initial_state)
    ret_r = np.zeros(n)
    ret_g = np.zeros(n)
    for h in range(H):
        a = np.minimum((gen.random((n, 1)) > pi_cdf[h, x]).sum(axis=1), A - 1)
        ret_r += model.reward[h, x, a]
        ret_g += model.utility[h, x, a]
        x = np.minimum((gen.random((n, 1)) > p_cdf[h, x, a]).sum(axis=1), S - 1)
    return ret_r, ret_g


def test_criterion_1_exact_dp_matches_monte_carlo():
    gen = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(20):
        m = random_model(gen, S=4, A=3, H=3)
        pi = gen.dirichlet(np.ones(3), size=(3, 4))
        exact = evaluate_policy_exact(m, pi).initial(m.initial_state)
        for ret, target in zip(rollout_returns(m, pi, 10**6, gen), exact):
            se = ret.std(ddof=1) / math.sqrt(len(ret))
            worst = max(worst, abs(ret.mean() - target) / se)
    elapsed = time.perf_counter() - start
    passed = worst <= 3.0 and elapsed < 30
    record_criterion(1, passed, f"max |MC - exact| = {worst:.2f} SE, {elapsed:.1f}s")
    assert passed


def test_criterion_2_hindsight_lp():
    gen = np.random.default_rng(7)
    start = time.perf_counter()
    gap = limit_err = dual_err = 0.0
    for i in range(50):
        S, A, H = 2 + i % 4, 2 + i % 3, 2 + i % 4
        m = random_model(gen, S=S, A=A, H=H)
        max_g = optimal_values(m, m.utility)[0][0, m.initial_state]
        m = m.with_offset(gen.uniform(0.1, 0.9) * max_g)
        sol = solve_hindsight(m)
        gap = max(gap, sol.duality_gap)
        V, _ = optimal_values(m)
        limit_err = max(limit_err, abs(solve_hindsight(m.with_offset(1e-9)).optimal_value - V[0, m.initial_state]))
        # dual function via unconstrained DP on r + Y* g
        V_l, _ = optimal_values(m, m.reward + sol.optimal_dual * m.utility)
        d_val = V_l[0, m.initial_state] - sol.optimal_dual * m.constraint_offset
        dual_err = max(dual_err, abs(d_val - sol.optimal_value))
        assert dual_function(m, sol.optimal_dual) == pytest.approx(d_val, abs=1e-9)
    elapsed = time.perf_counter() - start
    passed = gap <= 1e-8 and limit_err <= 1e-8 and dual_err <= 1e-6 and elapsed < 60
    record_criterion(2, passed, f"gap {gap:.1e}, b->0 err {limit_err:.1e}, D(Y*) err {dual_err:.1e}, "
                                f"{elapsed:.1f}s")
    assert passed


@pytest.fixture(scope="module")
def instance():
    return acceptance_model()


@pytest.fixture(scope="module")
def optimism_runs(instance):
    runs = {}
    for backend in BACKENDS:
        start = time.perf_counter()
        est = OPDOP(backend=backend, n_episodes=2000, c1=1.0, p=0.1, random_state=0).fit(instance)
        runs[backend] = (est, time.perf_counter() - start)
    return runs


@pytest.fixture(scope="module")
def sublinear_runs(instance):
    runs = {}
    for backend in BACKENDS:
        start = time.perf_counter()
        ests = [OPDOP(backend=backend, n_episodes=5000, alpha_rate="lemma", c1=SUBLINEAR_C1, p=0.1,
                      random_state=s).fit(instance) for s in SEEDS]
        runs[backend] = (ests, time.perf_counter() - start)
    return runs


def test_criterion_3_optimism_band(optimism_runs):
    parts, passed = [], True
    for backend, (est, elapsed) in optimism_runs.items():
        frac = est.ledger_.diagnostics["band_fraction"]
        ok = min(frac.values()) >= 0.95 and elapsed < 300
        passed &= ok
        parts.append(f"{backend}: r {frac['reward']:.3f} g {frac['utility']:.3f} in {elapsed:.0f}s")
    record_criterion(3, passed, "; ".join(parts))
    assert passed


def test_criterion_4_sublinear_regret_and_violation(sublinear_runs):
    parts, passed = [], True
    for backend, (ests, elapsed) in sublinear_runs.items():
        ledgers = [e.ledger_ for e in ests]
        slope = fit_regret_slope(ledgers)
        viol = np.mean([lg.column("violation_cum") for lg in ledgers], axis=0)
        early, late = viol[499] / 500, viol[4999] / 5000
        ok = slope < 0.85 and late < 0.5 * early and elapsed < 900
        passed &= ok
        parts.append(f"{backend}: slope {slope:.3f}, violation/K {early:.4f} -> {late:.4f}, {elapsed:.0f}s")
    record_criterion(4, passed, "; ".join(parts))
    assert passed


def test_criterion_5_dual_and_simplex(optimism_runs, sublinear_runs):
    ests = [e for e, _ in optimism_runs.values()]
    ests += [e for group, _ in sublinear_runs.values() for e in group]
    dual_bad = simplex_bad = 0
    for est in ests:
        d = est.ledger_.diagnostics
        dual_bad += d["dual_violations"]
        simplex_bad += d["simplex_violations"]
        duals = est.ledger_.column("dual")
        dual_bad += int(np.count_nonzero((duals < 0) | (duals > est.config_.chi)))
        assert np.allclose(est.policy_.sum(-1), 1.0, atol=1e-10) and np.all(est.policy_ > 0)
    passed = dual_bad == 0 and simplex_bad == 0
    record_criterion(5, passed, f"{len(ests)} runs, {dual_bad} dual and {simplex_bad} simplex violations")
    assert passed


def test_criterion_6_elliptical_potential(optimism_runs, sublinear_runs):
    ests = [optimism_runs["lstd"][0], *sublinear_runs["lstd"][0]]
    ratio = max(max(e.ledger_.diagnostics["elliptical_potential"]) / e.ledger_.diagnostics["elliptical_bound"]
                for e in ests)
    passed = all(e.ledger_.diagnostics["elliptical_ok"] for e in ests)
    record_criterion(6, passed, f"{len(ests)} runs, max potential/bound {ratio:.3f}")
    assert passed


def test_criterion_7_tabular_linear_consistency():
    gen = np.random.default_rng(99)
    err = 0.0
    for _ in range(20):
        m = random_model(gen, S=int(gen.integers(2, 6)), A=int(gen.integers(2, 4)), H=int(gen.integers(1, 5)))
        H, S, A = m.horizon, m.num_states, m.num_actions
        pi = gen.dirichlet(np.ones(A), size=(H, S))
        est = evaluate_tabular(EmpiricalModel(m.transitions, m.reward, m.utility, np.zeros((H, S, A))), pi)
        exact = evaluate_policy_exact(m, pi)
        for a, b in ((est.q_reward, exact.q_reward), (est.q_utility, exact.q_utility),
                     (est.v_reward, exact.v_reward), (est.v_utility, exact.v_utility)):
            err = max(err, float(np.abs(a - b).max()))
        canonical_features(m).check(m, tol=1e-10)
    passed = err <= 1e-10
    record_criterion(7, passed, f"20 models, max injection error {err:.1e}, feature bounds hold")
    assert passed


def derived_examples():
    # softmax steps
    u = np.array([0.5, 0.5])
    np.testing.assert_allclose(policy_improve(u, np.array([1.0, 0.0]), np.zeros(2), 0.0, math.log(2)),
                               [2 / 3, 1 / 3], atol=1e-15)
    np.testing.assert_allclose(policy_improve(u, np.zeros(2), np.array([1.0, 0.0]), 1.0, math.log(3)),
                               [3 / 4, 1 / 4], atol=1e-15)
    np.testing.assert_allclose(mix_policy(np.array([1.0, 0.0]), 0.5), [0.75, 0.25])
    assert dual_update(DualState(), 1.0, 0.0, 0.5, 10.0).value == 0.5

    # one Bellman backup
    m = CmdpModel(np.full((1, 2, 1, 2), 0.5), np.full((1, 2, 1), 0.25), np.zeros((1, 2, 1)), 0.5)
    assert bellman_apply(m, 0, np.array([2.0, 4.0]))[0, 0] == 3.25

    # one-dimensional LP and Slater gap
    lp = CmdpModel(np.ones((1, 1, 2, 1)), np.array([[[1.0, 0.0]]]), np.array([[[0.0, 1.0]]]), 0.5)
    sol = solve_hindsight(lp)
    assert abs(sol.optimal_value - 0.5) <= 1e-10
    np.testing.assert_allclose(sol.optimal_policy[0, 0], [0.5, 0.5], atol=1e-10)
    gamma, slater = estimate_slater_gap(lp.with_offset(0.4))
    assert abs(gamma - 0.6) <= 1e-10 and slater[0, 0, 1] == 1.0

    # ridge solves and bonus decay
    maps = canonical_features(random_model(np.random.default_rng(0), S=1, A=2, H=1, b=0.5))
    state = LstdState(maps, 1, beta=2.0)
    e1 = np.array([1.0, 0.0])
    state.value_grams[0].update(e1)
    state.value_rhs[REWARD][0] += e1
    np.testing.assert_allclose(ridge_solve(state, 0, REWARD)[1], [0.5, 0.0], atol=1e-15)
    for _ in range(99):
        state.value_grams[0].update(e1)
    reg = np.eye(maps.d1)[0]
    assert abs(ucb_bonus(state, 0, REWARD, e1, reg)[0] - 2.0 / math.sqrt(101)) <= 1e-9
    gen = np.random.default_rng(1)
    X, y = gen.normal(size=(50, 4)), gen.normal(size=50)
    gram = CholeskyGram(4, 1.0)
    for row in X:
        gram.update(row)
    np.testing.assert_allclose(gram.solve(X.T @ y), np.linalg.solve(X.T @ X + np.eye(4), X.T @ y), atol=1e-9)

    # tabular estimates
    counters = VisitCounters(1, 2, 1)
    for n in range(1, 4):
        update_counters(counters, Trajectory(n, np.array([0, 1]), np.array([0]), np.array([0.7]), np.zeros(1)))
        assert estimate_model(counters).reward[0, 0, 0] == pytest.approx(0.7 * n / (n + 1), abs=1e-15)
    assert estimate_model(counters).transitions[0, 0, 0, 1] == 0.75

    # violation clamp and the hand-enumerated gridworld path
    lg = RegretLedger(1.0, 1.0)
    score_episode(lg, (1.0, 2.0), (0.0, 0.0), 0.0)
    score_episode(lg, (1.0, -1.0), (0.0, 0.0), 0.0)
    assert lg.violation == 1.0
    grid = make_hazard_gridworld(2, 2, 5, (), b=1.0, goal=(1, 0), slip=0.0, walls=[((0, 0), (1, 0))])
    assert abs(solve_hindsight(grid).optimal_value - 2.0) <= 1e-10


def test_criterion_8_hand_derived_examples():
    start = time.perf_counter()
    try:
        derived_examples()
        ok, note = True, "all hand examples match"
    except AssertionError as exc:
        ok, note = False, f"mismatch: {exc}"
    elapsed = time.perf_counter() - start
    passed = ok and elapsed < 5
    record_criterion(8, passed, f"{note}, {elapsed:.2f}s")
    assert passed
