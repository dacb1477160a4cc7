import numpy as np
import pytest

from opdop.cmdp import CmdpModel, evaluate_policy_exact, optimal_values, uniform_policy
from opdop.envs import make_tabular_random
from opdop.hindsight import solve_hindsight

CRITERIA_RESULTS: dict = {}


def random_model(rng, S=4, A=3, H=3, b=None, x1=0):
    """Independent generator used by oracle tests (no rejection step)."""
    P = rng.dirichlet(np.ones(S), size=(H, S, A))
    P /= P.sum(axis=-1, keepdims=True)
    r = rng.random((H, S, A))
    g = rng.random((H, S, A))
    if b is None:
        b = 0.3 * H
    return CmdpModel(P, r, g, b, x1)


def acceptance_model():
    """5 states, 3 actions, H = 5, with a constraint that binds.

    Seed 0 of the random generator; ``b`` sits halfway between the larger of
    the uniform and reward-greedy utility values and ``max V_g - 0.05``, so
    early play violates the constraint and the optimum must trade reward for
    utility.
    """
    base = make_tabular_random(5, 3, 5, 1.0, seed=0)
    _, greedy = optimal_values(base)
    v_greedy = evaluate_policy_exact(base, greedy).initial(0)[1]
    v_uniform = evaluate_policy_exact(base, uniform_policy(5, 5, 3)).initial(0)[1]
    max_g = solve_hindsight(base).max_utility
    lo, hi = max(v_greedy, v_uniform), max_g - 0.05
    assert hi > lo
    return base.with_offset(0.5 * (lo + hi))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def acceptance_instance():
    return acceptance_model()


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})"
    CRITERIA_RESULTS[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA_RESULTS):
        terminalreporter.write_line(CRITERIA_RESULTS[number])
