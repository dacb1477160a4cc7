"""Least-squares temporal-difference evaluation with UCB bonuses (linear kernel CMDPs)."""

from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.sparse as sp
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular

from .cmdp import REWARD, UTILITY, CmdpModel, Trajectory
from .evaluation import EvalEstimates, truncate
from .exceptions import NumericError, StructuralError

SIGNALS = (REWARD, UTILITY)
# sparse feature maps are densified for integration when at most this many entries
DENSE_LIMIT = 4_000_000


@numba.njit(cache=True)
def _cholesky_rank1_update(L, x):
    # in place: L L^T + x x^T; x is overwritten
    n = L.shape[0]
    for k in range(n):
        if x[k] == 0.0:
            continue
        r = math.sqrt(L[k, k] * L[k, k] + x[k] * x[k])
        c = r / L[k, k]
        s = x[k] / L[k, k]
        L[k, k] = r
        for i in range(k + 1, n):
            L[i, k] = (L[i, k] + s * x[i]) / c
            x[i] = c * x[i] - s * L[i, k]


class CholeskyGram:
    """Regularized Gram matrix ``lam I + sum v v^T`` with its lower Cholesky factor."""

    def __init__(self, dim: int, lam: float):
        self.dim = dim
        self.lam = lam
        self.gram = lam * np.eye(dim)
        self.factor = math.sqrt(lam) * np.eye(dim)
        self.count = 0

    def update(self, v: np.ndarray) -> None:
        v = np.asarray(v, dtype=float)
        self.gram += np.outer(v, v)
        _cholesky_rank1_update(self.factor, v.copy())
        self.count += 1

    def rebuild(self) -> None:
        self.factor = cholesky(self.gram, lower=True)

    def reset(self, outer_sum: np.ndarray) -> None:
        """Set the Gram to ``lam I + outer_sum`` and refactor from scratch."""
        self.gram = self.lam * np.eye(self.dim) + outer_sum
        self.rebuild()

    def drift(self) -> float:
        """Largest entry gap between the maintained factor and a fresh one, relative to scale."""
        fresh = cholesky(self.gram, lower=True)
        return float(np.abs(fresh - self.factor).max() / max(1.0, np.abs(fresh).max()))

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if not np.all(np.diag(self.factor) > 0.0):
            raise LinAlgError("Cholesky factor lost positive definiteness")
        return cho_solve((self.factor, True), rhs, check_finite=False)

    def inverse_quadratic(self, rows: np.ndarray) -> np.ndarray:
        """``v^T Gram^{-1} v`` for each row ``v``."""
        z = solve_triangular(self.factor, np.atleast_2d(rows).T, lower=True, check_finite=False)
        return (z * z).sum(axis=0)


def _as_dense(m) -> np.ndarray:
    return m.toarray() if sp.issparse(m) else np.asarray(m, dtype=float)


@dataclass(frozen=True, eq=False)
class FeatureMaps:
    """Kernel feature ``psi(x, a, y)`` and value feature ``phi(x, a)`` with their parameters.

    ``psi`` has shape (S*A*S, d1) with rows ordered by (x, a, y); ``phi`` has
    shape (S*A, d2). Either may be a scipy sparse matrix. ``theta`` is (H, d1),
    ``theta_reward`` and ``theta_utility`` are (H, d2).
    """

    psi: object
    phi: object
    theta: np.ndarray
    theta_reward: np.ndarray
    theta_utility: np.ndarray
    num_states: int
    num_actions: int
    _group: sp.csr_matrix = field(init=False, repr=False)
    _blocks: np.ndarray | None = field(init=False, repr=False)
    _phi_dense: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        S, A = self.num_states, self.num_actions
        psi = sp.csr_matrix(self.psi) if sp.issparse(self.psi) else np.asarray(self.psi, dtype=float)
        if psi.shape[0] != S * A * S:
            raise StructuralError(f"psi must have {S * A * S} rows, got {psi.shape[0]}")
        if self.phi.shape[0] != S * A:
            raise StructuralError(f"phi must have {S * A} rows, got {self.phi.shape[0]}")
        object.__setattr__(self, "psi", psi)
        # sums each block of S consecutive psi rows: one block per (x, a)
        n = S * A
        group = sp.csr_matrix(
            (np.ones(n * S), np.arange(n * S), np.arange(0, n * S + 1, S)), shape=(n, n * S)
        )
        object.__setattr__(self, "_group", group)
        blocks = None
        if not sp.issparse(psi) or psi.shape[0] * psi.shape[1] <= DENSE_LIMIT:
            blocks = _as_dense(psi).reshape(n, S, -1)
        object.__setattr__(self, "_blocks", blocks)
        object.__setattr__(self, "_phi_dense", _as_dense(self.phi))

    @property
    def d1(self) -> int:
        return self.psi.shape[1]

    @property
    def d2(self) -> int:
        return self.phi.shape[1]

    @property
    def d(self) -> int:
        return max(self.d1, self.d2)

    def value_features(self) -> np.ndarray:
        return self._phi_dense

    def integrate(self, v_next: np.ndarray) -> np.ndarray:
        """``sum_y psi(x, a, y) v_next(y)`` for every (x, a); shape (S*A, d1)."""
        S, A = self.num_states, self.num_actions
        if self._blocks is not None:
            return np.einsum("y,nyd->nd", v_next, self._blocks)
        g = self._group
        weighted = sp.csr_matrix((np.tile(v_next, S * A), g.indices, g.indptr), shape=g.shape)
        return _as_dense(weighted @ self.psi)

    def kernel(self) -> np.ndarray:
        """Transition tensor ``<psi, theta_h>`` of shape (H, S, A, S)."""
        S, A = self.num_states, self.num_actions
        return np.stack([(self.psi @ t).reshape(S, A, S) for t in self.theta])

    def signal(self, which: str) -> np.ndarray:
        theta = self.theta_reward if which == REWARD else self.theta_utility
        S, A = self.num_states, self.num_actions
        return np.stack([np.asarray(self.phi @ t).reshape(S, A) for t in theta])

    def check(self, model: CmdpModel, tol: float = 1e-10) -> None:
        """Raise ``ValueError`` unless the maps reproduce ``model`` and satisfy the norm bounds."""
        if (model.num_states, model.num_actions) != (self.num_states, self.num_actions):
            raise StructuralError("feature maps and model disagree on dimensions")
        if self.theta.shape[0] != model.horizon:
            raise StructuralError("theta must have one row per step")
        err = np.abs(self.kernel() - model.transitions).max()
        if err > tol:
            raise ValueError(f"<psi, theta_h> misses the kernel by {err:.3g}")
        for which in SIGNALS:
            err = np.abs(self.signal(which) - model.signal(which)).max()
            if err > tol:
                raise ValueError(f"<phi, theta_{which}> misses the {which} by {err:.3g}")
        if np.linalg.norm(self.theta, axis=1).max() > math.sqrt(self.d1) + tol:
            raise ValueError("||theta_h|| exceeds sqrt(d1)")
        for t in (self.theta_reward, self.theta_utility):
            if np.linalg.norm(t, axis=1).max() > math.sqrt(self.d2) + tol:
                raise ValueError("||theta_{r,g}|| exceeds sqrt(d2)")
        H = model.horizon
        worst = np.linalg.norm(self.integrate(np.full(self.num_states, float(H))), axis=1).max()
        if worst > math.sqrt(self.d1) * H + tol:
            raise ValueError("integrated feature norm exceeds sqrt(d1) H")


def integrate_value_feature(maps: FeatureMaps, h: int, v_next: np.ndarray,
                            integrator: Callable | None = None) -> np.ndarray:
    """Regression feature table ``phi_h(x, a) = sum_y psi(x, a, y) v_next(y)``, shape (S, A, d1).

    ``integrator(maps, v_next)`` may replace the exact finite sum, e.g. with a
    Monte Carlo estimate; it must return an (S*A, d1) array.
    """
    v_next = np.asarray(v_next, dtype=float)
    if v_next.shape != (maps.num_states,):
        raise StructuralError(f"v_next must have shape ({maps.num_states},)")
    H = maps.theta.shape[0]
    if v_next.min(initial=0.0) < -1e-9 or v_next.max(initial=0.0) > H + 1e-9:
        raise ValueError(f"v_next must lie in [0, {H}]")
    flat = (integrator or FeatureMaps.integrate)(maps, v_next)
    return flat.reshape(maps.num_states, maps.num_actions, -1)


class LstdState:
    """Grams, right-hand sides and the regression archive for every step and signal.

    ``value_grams[h]`` is built from ``phi(x_h, a_h)``; ``regression_grams[which][h]``
    from the frozen regression features ``phi_{which,h}^tau(x_h, a_h)``.
    """

    def __init__(self, maps: FeatureMaps, horizon: int, beta: float, lam: float = 1.0):
        self.maps = maps
        self.horizon = horizon
        self.beta = beta
        self.lam = lam
        d1, d2 = maps.d1, maps.d2
        self.value_grams = [CholeskyGram(d2, lam) for _ in range(horizon)]
        self.regression_grams = {w: [CholeskyGram(d1, lam) for _ in range(horizon)] for w in SIGNALS}
        self.value_rhs = {w: np.zeros((horizon, d2)) for w in SIGNALS}
        self.regression_rhs = {w: np.zeros((horizon, d1)) for w in SIGNALS}
        self.archive = {
            "value": [[] for _ in range(horizon)],
            REWARD: [[] for _ in range(horizon)],
            UTILITY: [[] for _ in range(horizon)],
        }
        self.episodes_seen = 0
        # sum over episodes of min(1, phi^T Lambda_h^{-1} phi) at the visited pair, per step
        self.potential = np.zeros(horizon)

    def rebuild_from_archive(self) -> None:
        """Recompute every Gram, factor and right-hand side from the stored samples, in place."""
        for h in range(self.horizon):
            samples = self.archive["value"][h]
            phis = np.array([s[0] for s in samples]).reshape(len(samples), self.maps.d2)
            self.value_grams[h].reset(phis.T @ phis)
            self.value_rhs[REWARD][h] = phis.T @ np.array([s[1] for s in samples], dtype=float)
            self.value_rhs[UTILITY][h] = phis.T @ np.array([s[2] for s in samples], dtype=float)
            for w in SIGNALS:
                pairs = self.archive[w][h]
                feats = np.array([p[0] for p in pairs]).reshape(len(pairs), self.maps.d1)
                self.regression_grams[w][h].reset(feats.T @ feats)
                self.regression_rhs[w][h] = feats.T @ np.array([p[1] for p in pairs], dtype=float)

    def grams(self):
        yield from self.value_grams
        for w in SIGNALS:
            yield from self.regression_grams[w]


def _solve_with_retry(state: LstdState, gram: CholeskyGram, rhs: np.ndarray) -> np.ndarray:
    try:
        return gram.solve(rhs)
    except LinAlgError:
        state.rebuild_from_archive()
    try:
        return gram.solve(rhs)
    except LinAlgError as exc:
        raise NumericError("Gram matrix is not positive definite after rebuild") from exc


def ridge_solve(state: LstdState, h: int, which: str) -> tuple[np.ndarray, np.ndarray]:
    """Ridge weights ``(w, u)``: next-value regression and immediate-signal regression."""
    w = _solve_with_retry(state, state.regression_grams[which][h], state.regression_rhs[which][h])
    u = _solve_with_retry(state, state.value_grams[h], state.value_rhs[which][h])
    return w, u


def ucb_bonus(state: LstdState, h: int, which: str, value_feature, regression_feature):
    """Bonuses ``(beta ||phi||_{Lambda_h^-1}, beta ||phi_which||_{Lambda_which,h^-1})``.

    Features may be single vectors or stacked rows; results broadcast accordingly.
    """
    vq = state.value_grams[h].inverse_quadratic(value_feature)
    rq = state.regression_grams[which][h].inverse_quadratic(regression_feature)
    g_val = state.beta * np.sqrt(np.maximum(vq, 0.0))
    g_reg = state.beta * np.sqrt(np.maximum(rq, 0.0))
    if np.ndim(value_feature) == 1:
        return float(g_val[0]), float(g_reg[0])
    return g_val, g_reg


def evaluate_lstd(state: LstdState, policy: np.ndarray, trajectory: Trajectory | None = None,
                  integrator: Callable | None = None, check_every: int = 64) -> EvalEstimates:
    """One optimistic backward pass with data from earlier episodes.

    Estimates use only samples archived before this call. When ``trajectory``
    is given, its regression pairs are archived afterwards, with the features
    frozen at this episode's value estimates.
    """
    maps = state.maps
    H, S, A = state.horizon, maps.num_states, maps.num_actions
    phi = maps.value_features()
    est = EvalEstimates.zeros(H, S, A, backend="lstd")
    reg_features = {w: [None] * H for w in SIGNALS}
    for h in range(H - 1, -1, -1):
        for which in SIGNALS:
            w, u = ridge_solve(state, h, which)
            feat = integrate_value_feature(maps, h, est.v(which)[h + 1], integrator)
            flat = feat.reshape(S * A, -1)
            reg_features[which][h] = feat
            g_val, g_reg = ucb_bonus(state, h, which, phi, flat)
            bonus = (g_val + g_reg).reshape(S, A)
            raw = (phi @ u + flat @ w).reshape(S, A) + bonus
            q = truncate(raw, h, H)
            est.q(which)[h] = q
            est.v(which)[h] = np.einsum("xa,xa->x", q, policy[h])
            if which == REWARD:
                est.bonus_reward[h] = bonus
            else:
                est.bonus_utility[h] = bonus
    est.band_reward = 2.0 * est.bonus_reward
    est.band_utility = 2.0 * est.bonus_utility
    if trajectory is not None:
        archive_episode(state, trajectory, est, reg_features, phi)
        if check_every and state.episodes_seen % check_every == 0:
            check_factors(state)
    return est


def archive_episode(state: LstdState, traj: Trajectory, est: EvalEstimates, reg_features, phi) -> None:
    maps = state.maps
    A = maps.num_actions
    for h in range(state.horizon):
        x, a, y = traj.states[h], traj.actions[h], traj.states[h + 1]
        v_feat = phi[x * A + a]
        gram = state.value_grams[h]
        state.potential[h] += min(1.0, float(gram.inverse_quadratic(v_feat)[0]))
        gram.update(v_feat)
        state.value_rhs[REWARD][h] += v_feat * traj.rewards[h]
        state.value_rhs[UTILITY][h] += v_feat * traj.utilities[h]
        state.archive["value"][h].append((v_feat, traj.rewards[h], traj.utilities[h]))
        for which in SIGNALS:
            feat = reg_features[which][h][x, a].copy()
            target = est.v(which)[h + 1][y]
            state.regression_grams[which][h].update(feat)
            state.regression_rhs[which][h] += feat * target
            state.archive[which][h].append((feat, target))
    state.episodes_seen += 1


def check_factors(state: LstdState, tol: float = 1e-8) -> float:
    """Compare every maintained factor with a from-scratch Cholesky; rebuild on drift."""
    worst = max(g.drift() for g in state.grams())
    if worst > tol:
        state.rebuild_from_archive()
        worst = max(g.drift() for g in state.grams())
        if worst > tol:
            raise NumericError(f"Cholesky factors drift by {worst:.3g} even after rebuild")
    return worst


def elliptical_potential_bound(d: int, episodes: int, lam: float) -> float:
    """``2 d log((d K + lam) / lam)``."""
    return 2.0 * d * math.log((d * episodes + lam) / lam)


class LstdUcb:
    """Stateful least-squares backend used by the OPDOP loop."""

    backend = "lstd"

    def __init__(self, maps: FeatureMaps, horizon: int, beta: float, lam: float = 1.0,
                 integrator: Callable | None = None, check_every: int = 64):
        self.state = LstdState(maps, horizon, beta, lam)
        self.integrator = integrator
        self.check_every = check_every

    def evaluate(self, policy: np.ndarray, trajectory: Trajectory | None = None) -> EvalEstimates:
        return evaluate_lstd(self.state, policy, trajectory, self.integrator, self.check_every)

    def diagnostics(self) -> dict:
        st = self.state
        return {
            "elliptical_potential": st.potential.tolist(),
            "elliptical_bound": elliptical_potential_bound(st.maps.d, st.episodes_seen, st.lam),
        }
