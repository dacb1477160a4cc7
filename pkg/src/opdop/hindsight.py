"""Optimal policy in hindsight via the occupancy-measure linear program."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .cmdp import CmdpModel, evaluate_policy_exact, optimal_values
from .exceptions import InfeasibleConstraint, NumericError
from .simplex import INFEASIBLE, revised_simplex

GAP_TOL = 1e-8
FEASIBILITY_TOL = 1e-9


@dataclass(frozen=True)
class HindsightSolution:
    optimal_policy: np.ndarray
    optimal_value: float
    optimal_dual: float
    slater_gap: float
    dual_cap: float
    occupancy: np.ndarray
    slater_policy: np.ndarray
    max_utility: float
    duality_gap: float

    def to_dict(self) -> dict:
        return {
            "optimal_value": self.optimal_value,
            "optimal_dual": self.optimal_dual,
            "slater_gap": self.slater_gap,
            "dual_cap": self.dual_cap,
            "max_utility": self.max_utility,
            "duality_gap": self.duality_gap,
            "optimal_policy": self.optimal_policy.tolist(),
        }


def flow_constraints(model: CmdpModel) -> tuple[np.ndarray, np.ndarray]:
    """Equality system ``F @ mu = f`` for occupancy measures mu of shape (H, S, A).

    Row ``h * S + y`` states that the mass entering state ``y`` at step ``h``
    equals the mass leaving it.
    """
    H, S, A = model.horizon, model.num_states, model.num_actions
    n = H * S * A
    F = np.zeros((H * S, n))
    f = np.zeros(H * S)
    f[model.initial_state] = 1.0
    for h in range(H):
        for y in range(S):
            row = h * S + y
            F[row, (h * S + y) * A:(h * S + y + 1) * A] = 1.0
            if h > 0:
                # -P_{h-1}(y | x, a) over the previous step's block
                F[row, (h - 1) * S * A:h * S * A] = -model.transitions[h - 1, :, :, y].ravel()
    return F, f


def policy_from_occupancy(mu: np.ndarray) -> np.ndarray:
    """``pi_h(a|x) = mu_h(x,a) / sum_a mu_h(x,a)``; uniform where the mass is zero."""
    mass = mu.sum(axis=-1, keepdims=True)
    A = mu.shape[-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        pi = np.where(mass > 0.0, mu / np.where(mass > 0.0, mass, 1.0), 1.0 / A)
    return pi / pi.sum(axis=-1, keepdims=True)


def occupancy_of(model: CmdpModel, policy) -> np.ndarray:
    """Forward recursion for the occupancy measure of a policy."""
    pi = np.asarray(policy, dtype=float)
    H, S, _ = pi.shape
    mu = np.zeros(pi.shape)
    d = np.zeros(S)
    d[model.initial_state] = 1.0
    for h in range(H):
        mu[h] = d[:, None] * pi[h]
        d = np.einsum("xa,xay->y", mu[h], model.transitions[h])
    return mu


def _solve_max(model: CmdpModel, objective: np.ndarray, utility_floor: float | None):
    F, f = flow_constraints(model)
    n = F.shape[1]
    if utility_floor is None:
        return revised_simplex(-objective.ravel(), F, f), n
    # slack column turns sum(g * mu) >= b into an equality
    A = np.zeros((F.shape[0] + 1, n + 1))
    A[:-1, :n] = F
    A[-1, :n] = model.utility.ravel()
    A[-1, n] = -1.0
    b = np.append(f, utility_floor)
    c = np.append(-objective.ravel(), 0.0)
    return revised_simplex(c, A, b), n


def estimate_slater_gap(model: CmdpModel) -> tuple[float, np.ndarray]:
    """Largest utility slack ``max_pi V_g(x_1) - b`` (clamped at 0) and its policy."""
    res, n = _solve_max(model, model.utility, None)
    if not res.success:
        raise NumericError(f"utility maximization LP ended with status {res.status}")
    mu = res.x[:n].reshape(model.utility.shape)
    return max(-res.objective - model.constraint_offset, 0.0), policy_from_occupancy(mu)


def dual_function(model: CmdpModel, dual: float) -> float:
    """``D(Y) = max_pi V_{r + Y g}(x_1) - Y b`` by unconstrained backward induction."""
    V, _ = optimal_values(model, model.reward + dual * model.utility)
    return float(V[0, model.initial_state] - dual * model.constraint_offset)


def solve_hindsight(model: CmdpModel) -> HindsightSolution:
    """Solve ``max V_r(x_1) s.t. V_g(x_1) >= b`` exactly over occupancy measures.

    Raises
    ------
    InfeasibleConstraint
        If ``b`` exceeds the largest achievable utility value.
    """
    b = model.constraint_offset
    res_g, n = _solve_max(model, model.utility, None)
    if not res_g.success:
        raise NumericError(f"utility maximization LP ended with status {res_g.status}")
    max_utility = -res_g.objective
    if max_utility < b - FEASIBILITY_TOL:
        raise InfeasibleConstraint(max_utility, b)
    slater_policy = policy_from_occupancy(res_g.x[:n].reshape(model.utility.shape))
    gamma = max(max_utility - b, 0.0)

    res, n = _solve_max(model, model.reward, b)
    if res.status == INFEASIBLE:
        raise InfeasibleConstraint(max_utility, b)
    if not res.success:
        raise NumericError(f"hindsight LP ended with status {res.status}")

    duals = res.duals
    gap = abs(res.objective - float(np.append(flow_constraints(model)[1], b) @ duals))
    if gap > GAP_TOL:
        raise NumericError(f"duality gap {gap:.3g} exceeds {GAP_TOL}")

    mu = res.x[:n].reshape(model.reward.shape)
    policy = policy_from_occupancy(mu)
    vals = evaluate_policy_exact(model, policy)
    _, v_g = vals.initial(model.initial_state)
    if v_g < b - FEASIBILITY_TOL:
        raise NumericError(f"extracted policy violates the constraint: V_g={v_g:.12g} < b={b:.12g}")
    return HindsightSolution(
        optimal_policy=policy,
        optimal_value=-res.objective,
        optimal_dual=max(float(duals[-1]), 0.0) + 0.0,
        slater_gap=gamma,
        dual_cap=2.0 * model.horizon / gamma if gamma > 0.0 else np.inf,
        occupancy=mu,
        slater_policy=slater_policy,
        max_utility=max_utility,
        duality_gap=gap,
    )


class HindsightLP(BaseEstimator):
    """Estimator-style wrapper around :func:`solve_hindsight`.

    After ``fit(model)`` the solution is exposed as ``policy_``, ``value_``,
    ``dual_``, ``slater_gap_``, ``dual_cap_`` and ``solution_``.
    """

    def fit(self, model: CmdpModel, y=None):
        sol = solve_hindsight(model)
        self.solution_ = sol
        self.policy_ = sol.optimal_policy
        self.value_ = sol.optimal_value
        self.dual_ = sol.optimal_dual
        self.slater_gap_ = sol.slater_gap
        self.dual_cap_ = sol.dual_cap
        self.occupancy_ = sol.occupancy
        return self

    def predict_proba(self, X):
        """Action distributions of the hindsight policy at (step, state) rows."""
        X = np.asarray(X, dtype=int).reshape(-1, 2)
        return self.policy_[X[:, 0], X[:, 1]]

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)
