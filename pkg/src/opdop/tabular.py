"""Counter-based optimistic policy evaluation for tabular CMDPs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cmdp import REWARD, UTILITY, Trajectory
from .evaluation import EvalEstimates, truncate
from .exceptions import StructuralError


class VisitCounters:
    """``n_h(x, a)`` and ``n_h(x, a, y)`` accumulated over completed episodes.

    Also keeps the last observed reward/utility per (h, x, a); with deterministic
    signals this plus the count reproduces the sums in the reward estimator.
    """

    def __init__(self, horizon: int, num_states: int, num_actions: int):
        self.pairs = np.zeros((horizon, num_states, num_actions), dtype=np.int64)
        self.transitions = np.zeros((horizon, num_states, num_actions, num_states), dtype=np.int64)
        self.last_reward = np.zeros((horizon, num_states, num_actions))
        self.last_utility = np.zeros((horizon, num_states, num_actions))
        self.episodes = 0

    @property
    def shape(self):
        return self.pairs.shape


def update_counters(counters: VisitCounters, traj: Trajectory) -> VisitCounters:
    """Add one trajectory's visits in place and return the counters."""
    H, S, A = counters.shape
    if len(traj) != H:
        raise StructuralError(f"trajectory length {len(traj)} does not match horizon {H}")
    x, a, y = traj.states[:-1], traj.actions, traj.states[1:]
    if x.max(initial=0) >= S or y.max(initial=0) >= S or a.max(initial=0) >= A or min(
        x.min(initial=0), y.min(initial=0), a.min(initial=0)
    ) < 0:
        raise StructuralError("trajectory indices out of range for the counters")
    steps = np.arange(H)
    counters.pairs[steps, x, a] += 1
    counters.transitions[steps, x, a, y] += 1
    counters.last_reward[steps, x, a] = traj.rewards
    counters.last_utility[steps, x, a] = traj.utilities
    counters.episodes += 1
    return counters


@dataclass
class EmpiricalModel:
    """Shrunk empirical kernel, signals and counter bonus (all with ``n + lam`` denominators)."""

    transitions: np.ndarray
    reward: np.ndarray
    utility: np.ndarray
    bonus: np.ndarray


def estimate_model(counters: VisitCounters, lam: float = 1.0, beta: float = 0.0) -> EmpiricalModel:
    denom = counters.pairs + lam
    return EmpiricalModel(
        transitions=counters.transitions / denom[..., None],
        reward=counters.pairs * counters.last_reward / denom,
        utility=counters.pairs * counters.last_utility / denom,
        bonus=beta / np.sqrt(denom),
    )


def evaluate_tabular(emp: EmpiricalModel, policy: np.ndarray) -> EvalEstimates:
    """Backward pass ``Q = clip(signal_hat + P_hat V + 2 Gamma, 0, H - h + 1)``."""
    H, S, A = emp.reward.shape
    est = EvalEstimates.zeros(H, S, A, backend="tabular")
    bonus = 2.0 * emp.bonus
    for which, signal in ((REWARD, emp.reward), (UTILITY, emp.utility)):
        q_all, v_all = est.q(which), est.v(which)
        for h in range(H - 1, -1, -1):
            raw = signal[h] + emp.transitions[h] @ v_all[h + 1] + bonus[h]
            q_all[h] = truncate(raw, h, H)
            v_all[h] = np.einsum("xa,xa->x", q_all[h], policy[h])
    est.bonus_reward = bonus.copy()
    est.bonus_utility = bonus.copy()
    est.band_reward = 2.0 * bonus
    est.band_utility = 2.0 * bonus
    return est


class TabularOpe:
    """Stateful counter backend used by the OPDOP loop."""

    backend = "tabular"

    def __init__(self, horizon: int, num_states: int, num_actions: int, beta: float, lam: float = 1.0):
        self.counters = VisitCounters(horizon, num_states, num_actions)
        self.beta = beta
        self.lam = lam

    def evaluate(self, policy: np.ndarray, trajectory: Trajectory | None = None) -> EvalEstimates:
        est = evaluate_tabular(estimate_model(self.counters, self.lam, self.beta), policy)
        if trajectory is not None:
            update_counters(self.counters, trajectory)
        return est

    def diagnostics(self) -> dict:
        return {"episodes_counted": self.counters.episodes}
