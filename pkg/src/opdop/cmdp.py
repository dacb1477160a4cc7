"""Finite episodic constrained MDPs: model container, exact evaluation, simulation.

Steps are zero-indexed internally: ``h = 0 .. H-1`` for the decision steps
and ``h = H`` for the terminal boundary where all values vanish.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import InfeasibleConstraint, StructuralError

SIMPLEX_TOL = 1e-12
RENORMALIZE_TOL = 1e-9

REWARD = "reward"
UTILITY = "utility"


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def _max_utility(P, g, x1) -> float:
    v = np.zeros(P.shape[1])
    for h in range(P.shape[0] - 1, -1, -1):
        v = (g[h] + P[h] @ v).max(axis=1)
    return float(v[x1]) if 0 <= x1 < len(v) else float("nan")


@dataclass(frozen=True, eq=False)
class CmdpModel:
    """Ground-truth episodic CMDP.

    Parameters
    ----------
    transitions : array of shape (H, S, A, S)
        ``transitions[h, x, a, y]`` is ``P_h(y | x, a)``.
    reward, utility : arrays of shape (H, S, A)
        Deterministic per-step signals in ``[0, 1]``.
    constraint_offset : float
        The offset ``b`` in ``V_g(x_1) >= b``; must lie in ``(0, H]``.
    initial_state : int
        The fixed start state ``x_1``.
    """

    transitions: np.ndarray
    reward: np.ndarray
    utility: np.ndarray
    constraint_offset: float
    initial_state: int = 0
    _cdf: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        P = _frozen(self.transitions)
        r = _frozen(self.reward)
        g = _frozen(self.utility)
        if P.ndim != 4 or P.shape[1] != P.shape[3]:
            raise StructuralError(f"transitions must have shape (H, S, A, S), got {P.shape}")
        H, S, A, _ = P.shape
        if H < 1 or S < 1 or A < 1:
            raise StructuralError("horizon, num_states and num_actions must be positive")
        for name, arr in (("reward", r), ("utility", g)):
            if arr.shape != (H, S, A):
                raise StructuralError(f"{name} must have shape {(H, S, A)}, got {arr.shape}")
            if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
                raise ValueError(f"{name} entries must lie in [0, 1]")
        if not np.all(np.isfinite(P)) or P.min() < 0.0:
            raise ValueError("transition probabilities must be finite and nonnegative")
        dev = np.abs(P.sum(axis=-1) - 1.0).max()
        if dev > SIMPLEX_TOL:
            raise ValueError(f"transition rows must sum to 1 (max deviation {dev:.3g})")
        b = float(self.constraint_offset)
        if b > H:
            raise InfeasibleConstraint(_max_utility(P, g, int(self.initial_state)), b)
        if not b > 0.0:
            raise ValueError(f"constraint offset b={b} must lie in (0, H={H}]")
        x1 = int(self.initial_state)
        if not 0 <= x1 < S:
            raise StructuralError(f"initial_state {x1} out of range for {S} states")
        object.__setattr__(self, "transitions", P)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "utility", g)
        object.__setattr__(self, "constraint_offset", b)
        object.__setattr__(self, "initial_state", x1)
        object.__setattr__(self, "_cdf", _frozen(np.cumsum(P, axis=-1)))

    @property
    def horizon(self) -> int:
        return self.transitions.shape[0]

    @property
    def num_states(self) -> int:
        return self.transitions.shape[1]

    @property
    def num_actions(self) -> int:
        return self.transitions.shape[2]

    def signal(self, which: str) -> np.ndarray:
        if which in (REWARD, "r"):
            return self.reward
        if which in (UTILITY, "g"):
            return self.utility
        raise ValueError(f"unknown signal {which!r}; expected 'reward' or 'utility'")

    def with_offset(self, b: float) -> CmdpModel:
        """Copy of the model with a different constraint offset."""
        return CmdpModel(self.transitions, self.reward, self.utility, b, self.initial_state)

    # -- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "horizon": self.horizon,
            "b": self.constraint_offset,
            "initial_state": self.initial_state,
            "transitions": self.transitions.tolist(),
            "reward": self.reward.tolist(),
            "utility": self.utility.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> CmdpModel:
        P = np.asarray(data["transitions"], dtype=float)
        expected = (data["horizon"], data["num_states"], data["num_actions"], data["num_states"])
        if P.shape != tuple(expected):
            raise StructuralError(f"transitions shape {P.shape} does not match header {expected}")
        if P.size and P.min() < 0.0:
            raise ValueError("transition probabilities must be nonnegative")
        sums = P.sum(axis=-1, keepdims=True)
        dev = np.abs(sums - 1.0).max()
        if dev > RENORMALIZE_TOL:
            raise ValueError(f"transition rows deviate from 1 by {dev:.3g} (> {RENORMALIZE_TOL})")
        if dev > SIMPLEX_TOL:
            P = P / sums
        return cls(P, data["reward"], data["utility"], data["b"], data.get("initial_state", 0))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> CmdpModel:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Trajectory:
    """One episode of bandit feedback.

    ``states`` has length H+1 (the last entry is the terminal state);
    ``actions``, ``rewards`` and ``utilities`` have length H.
    """

    episode: int
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    utilities: np.ndarray

    def __len__(self):
        return len(self.actions)


@dataclass(frozen=True)
class ValueFunctions:
    """Q tables of shape (H, S, A) and V tables of shape (H+1, S)."""

    q_reward: np.ndarray
    q_utility: np.ndarray
    v_reward: np.ndarray
    v_utility: np.ndarray

    def initial(self, x1: int) -> tuple[float, float]:
        return float(self.v_reward[0, x1]), float(self.v_utility[0, x1])


# -- policies ----------------------------------------------------------


def uniform_policy(horizon: int, num_states: int, num_actions: int) -> np.ndarray:
    return np.full((horizon, num_states, num_actions), 1.0 / num_actions)


def check_policy(policy, model: CmdpModel | None = None, tol: float = SIMPLEX_TOL) -> np.ndarray:
    """Validate a policy slate and return it as a dense (H, S, A) array.

    Accepts a dense array or any object exposing ``table()``.
    """
    if hasattr(policy, "table"):
        policy = policy.table()
    pi = np.asarray(policy, dtype=float)
    if pi.ndim != 3:
        raise StructuralError(f"policy must have shape (H, S, A), got {pi.shape}")
    if model is not None:
        expected = (model.horizon, model.num_states, model.num_actions)
        if pi.shape != expected:
            raise StructuralError(f"policy shape {pi.shape} does not match model {expected}")
    if not np.all(np.isfinite(pi)) or pi.min() < 0.0:
        raise ValueError("policy entries must be finite and nonnegative")
    dev = np.abs(pi.sum(axis=-1) - 1.0).max()
    if dev > tol:
        raise ValueError(f"policy rows must sum to 1 (max deviation {dev:.3g})")
    return pi


# -- dynamic programming -----------------------------------------------


def bellman_apply(model: CmdpModel, h: int, v_next, which: str = REWARD) -> np.ndarray:
    """``signal_h(x, a) + sum_y P_h(y | x, a) v_next(y)`` as an (S, A) table."""
    v_next = np.asarray(v_next, dtype=float)
    if v_next.shape != (model.num_states,):
        raise StructuralError(f"v_next must have shape ({model.num_states},), got {v_next.shape}")
    return model.signal(which)[h] + model.transitions[h] @ v_next


def evaluate_policy_exact(model: CmdpModel, policy) -> ValueFunctions:
    """Exact reward and utility values of ``policy`` by backward induction."""
    pi = check_policy(policy, model)
    H, S, A = pi.shape
    out = {}
    for which in (REWARD, UTILITY):
        Q = np.zeros((H, S, A))
        V = np.zeros((H + 1, S))
        for h in range(H - 1, -1, -1):
            Q[h] = bellman_apply(model, h, V[h + 1], which)
            V[h] = np.einsum("xa,xa->x", Q[h], pi[h])
        out[which] = (Q, V)
    return ValueFunctions(out[REWARD][0], out[UTILITY][0], out[REWARD][1], out[UTILITY][1])


def optimal_values(model: CmdpModel, reward=None) -> tuple[np.ndarray, np.ndarray]:
    """Unconstrained optimal (V, greedy policy) for a per-step reward table.

    ``reward`` defaults to the model reward; any (H, S, A) table may be passed
    (e.g. a Lagrangian combination).
    """
    R = model.reward if reward is None else np.asarray(reward, dtype=float)
    H, S, A = R.shape
    V = np.zeros((H + 1, S))
    pi = np.zeros((H, S, A))
    for h in range(H - 1, -1, -1):
        Q = R[h] + model.transitions[h] @ V[h + 1]
        best = Q.argmax(axis=1)
        V[h] = Q[np.arange(S), best]
        pi[h, np.arange(S), best] = 1.0
    return V, pi


# -- simulation ----------------------------------------------------------


def _sample(cdf_row: np.ndarray, u: float) -> int:
    # guards against cdf_row[-1] landing a hair below u after rounding
    return min(int(np.searchsorted(cdf_row, u, side="right")), len(cdf_row) - 1)


def run_episode(model: CmdpModel, policy, rng_seed=None, episode: int = 0) -> Trajectory:
    """Roll out one episode; deterministic for a fixed integer seed.

    ``rng_seed`` may also be a ``numpy.random.Generator``, in which case the
    stream is advanced in place (the pattern used inside a learning run).
    """
    pi = check_policy(policy, model, tol=1e-9)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    H = model.horizon
    pi_cdf = np.cumsum(pi, axis=-1)
    states = np.empty(H + 1, dtype=np.int64)
    actions = np.empty(H, dtype=np.int64)
    states[0] = model.initial_state
    u = rng.random(2 * H)
    for h in range(H):
        x = states[h]
        a = _sample(pi_cdf[h, x], u[2 * h])
        actions[h] = a
        states[h + 1] = _sample(model._cdf[h, x, a], u[2 * h + 1])
    steps = np.arange(H)
    return Trajectory(
        episode=episode,
        states=states,
        actions=actions,
        rewards=model.reward[steps, states[:-1], actions].copy(),
        utilities=model.utility[steps, states[:-1], actions].copy(),
    )
