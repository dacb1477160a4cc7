"""Container for optimistic value estimates shared by both evaluation backends."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cmdp import CmdpModel


@dataclass
class EvalEstimates:
    """Optimistic estimates produced at one episode.

    ``q_*`` have shape (H, S, A); ``v_*`` have shape (H+1, S) with a zero last
    row. ``bonus_*`` is the total exploration bonus added inside each Q table
    before truncation, and ``band_*`` the width of the lower optimism band
    (``iota >= -band``). ``backend`` is ``"lstd"`` or ``"tabular"``.
    """

    q_reward: np.ndarray
    q_utility: np.ndarray
    v_reward: np.ndarray
    v_utility: np.ndarray
    bonus_reward: np.ndarray
    bonus_utility: np.ndarray
    band_reward: np.ndarray
    band_utility: np.ndarray
    backend: str

    @classmethod
    def zeros(cls, horizon: int, num_states: int, num_actions: int, backend: str = "none"):
        q = np.zeros((horizon, num_states, num_actions))
        v = np.zeros((horizon + 1, num_states))
        return cls(q, q.copy(), v, v.copy(), q.copy(), q.copy(), q.copy(), q.copy(), backend)

    def q(self, which: str) -> np.ndarray:
        return self.q_reward if which in ("reward", "r") else self.q_utility

    def v(self, which: str) -> np.ndarray:
        return self.v_reward if which in ("reward", "r") else self.v_utility

    def band(self, which: str) -> np.ndarray:
        return self.band_reward if which in ("reward", "r") else self.band_utility


def prediction_error(model: CmdpModel, est: EvalEstimates, which: str) -> np.ndarray:
    """Bellman residual ``signal_h + P_h V^k_{h+1} - Q^k_h`` under the true model."""
    v = est.v(which)
    return model.signal(which) + np.einsum("hxay,hy->hxa", model.transitions, v[1:]) - est.q(which)


def truncate(q: np.ndarray, h: int, horizon: int) -> np.ndarray:
    """Clip a raw estimate at step ``h`` (zero-indexed) to ``[0, H - h]``."""
    return np.clip(q, 0.0, horizon - h)
