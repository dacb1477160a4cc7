"""The OPDOP episode loop and its estimator wrapper."""

from __future__ import annotations

import math
import time

import numpy as np
from sklearn.base import BaseEstimator

from .cmdp import REWARD, UTILITY, CmdpModel, evaluate_policy_exact, run_episode, uniform_policy
from .envs import canonical_features
from .evaluation import prediction_error
from .exceptions import ConfigurationError, NumericError
from .hindsight import HindsightSolution, solve_hindsight
from .ledger import RegretLedger, score_episode
from .lstd import FeatureMaps, LstdUcb, elliptical_potential_bound
from .primal_dual import DualState, OpdopConfig, default_schedule, dual_update, mix_policy, policy_improve
from .tabular import TabularOpe

BACKENDS = ("lstd", "tabular")
BAND_TOL = 1e-9


def make_backend(model: CmdpModel, config: OpdopConfig, backend: str, features: FeatureMaps | None = None):
    if backend == "tabular":
        return TabularOpe(model.horizon, model.num_states, model.num_actions, config.beta, config.lam)
    if backend == "lstd":
        return LstdUcb(features if features is not None else canonical_features(model),
                       model.horizon, config.beta, config.lam)
    raise ConfigurationError(f"backend must be one of {BACKENDS}, got {backend!r}")


def _simplex_violations(pi: np.ndarray, tol: float = 1e-10) -> int:
    bad_sum = np.abs(pi.sum(axis=-1) - 1.0) > tol
    bad_entry = ~np.all(pi > 0.0, axis=-1)
    return int(np.count_nonzero(bad_sum | bad_entry))


def run_opdop(model: CmdpModel, config: OpdopConfig, backend: str = "tabular", seed: int = 0,
              hindsight: HindsightSolution | None = None, features: FeatureMaps | None = None
              ) -> RegretLedger:
    """Run ``K = config.episodes`` episodes of optimistic primal-dual policy optimization.

    Each episode mixes and improves the policy with the previous estimates and
    multiplier, plays it, moves the multiplier with the previous utility
    estimate, then re-evaluates with data from earlier episodes. One extra
    round after episode K closes the bookkeeping and is not scored.

    The returned ledger carries diagnostics: optimism-band hit counts for the
    visited triples, multiplier and simplex violation counts, and for the
    least-squares backend the elliptical-potential sums and their bound.
    """
    hindsight = hindsight if hindsight is not None else solve_hindsight(model)
    H, S, A = model.horizon, model.num_states, model.num_actions
    x1, b, K = model.initial_state, model.constraint_offset, config.episodes
    evaluator = make_backend(model, config, backend, features)
    rng = np.random.default_rng(seed)

    pi = uniform_policy(H, S, A)
    q_r = np.zeros((H, S, A))
    q_g = np.zeros((H, S, A))
    v_g1 = b
    dual = DualState()
    ledger = RegretLedger(hindsight.optimal_value, b)
    band_hits = {REWARD: 0, UTILITY: 0}
    band_total = 0
    dual_violations = simplex_violations = 0
    steps = np.arange(H)
    start = time.perf_counter()

    for k in range(1, K + 2):
        pi = policy_improve(mix_policy(pi, config.theta), q_r, q_g, dual.value, config.alpha)
        simplex_violations += _simplex_violations(pi)
        dual = dual_update(dual, b, v_g1, config.eta, config.chi, episode=k)
        if not 0.0 <= dual.value <= config.chi:
            dual_violations += 1
        if k > K:
            est = evaluator.evaluate(pi)
        else:
            traj = run_episode(model, pi, rng, episode=k)
            est = evaluator.evaluate(pi, traj)
            xs, acts = traj.states[:-1], traj.actions
            for which in (REWARD, UTILITY):
                iota = prediction_error(model, est, which)[steps, xs, acts]
                band = est.band(which)[steps, xs, acts]
                band_hits[which] += int(np.count_nonzero((iota <= BAND_TOL) & (iota >= -band - BAND_TOL)))
            band_total += H
            true = evaluate_policy_exact(model, pi).initial(x1)
            bonus_sum = float((est.bonus_reward + est.bonus_utility)[steps, xs, acts].sum())
            score_episode(ledger, true, (est.v_reward[0, x1], est.v_utility[0, x1]), dual.value,
                          bonus_sum, k)
            ledger.policy = pi
        q_r, q_g = est.q_reward, est.q_utility
        v_g1 = float(est.v_utility[0, x1])

    diag = {
        "backend": backend,
        "seed": seed,
        "episodes": K,
        "band_hits": band_hits,
        "band_total": band_total,
        "band_fraction": {w: (band_hits[w] / band_total if band_total else 1.0) for w in band_hits},
        "dual_violations": dual_violations,
        "simplex_violations": simplex_violations,
        "dual_history_len": len(dual.history),
        "final_dual": dual.value,
        "seconds": time.perf_counter() - start,
    }
    if backend == "lstd":
        st = evaluator.state
        bound = elliptical_potential_bound(st.maps.d, K, st.lam) if K else 0.0
        diag["elliptical_potential"] = st.potential.tolist()
        diag["elliptical_bound"] = bound
        diag["elliptical_ok"] = bool(np.all(st.potential <= bound + 1e-9))
    ledger.diagnostics = diag
    return ledger


class LazyPolicy:
    """Policy defined by the multiplicative-weights recursion, evaluated on demand.

    ``pi^k_h(.|x) ∝ mix(pi^{k-1}_h(.|x)) * exp(alpha (Q_r^{k-1} + Y^{k-1} Q_g^{k-1})(h, x, .))``
    starting from the uniform policy. Each appended round stores a callable
    ``q_source(h, x) -> (q_r, q_g)`` and its multiplier; rows are computed by
    unrolling through all rounds and memoized per (round, h, x).
    """

    def __init__(self, horizon: int, num_states: int, num_actions: int, alpha: float, theta: float):
        self.horizon = horizon
        self.num_states = num_states
        self.num_actions = num_actions
        self.alpha = alpha
        self.theta = theta
        self.rounds: list[tuple] = []
        self._memo: dict = {}

    @property
    def k(self) -> int:
        return len(self.rounds)

    def append(self, q_source, dual: float) -> None:
        self.rounds.append((q_source, float(dual)))

    def row(self, h: int, x: int, k: int | None = None) -> np.ndarray:
        k = self.k if k is None else k
        start, dist = 0, np.full(self.num_actions, 1.0 / self.num_actions)
        for j in range(k, 0, -1):
            hit = self._memo.get((j, h, x))
            if hit is not None:
                start, dist = j, hit
                break
        for j in range(start + 1, k + 1):
            q_source, dual = self.rounds[j - 1]
            q_r, q_g = q_source(h, x)
            dist = policy_improve(mix_policy(dist, self.theta), q_r, q_g, dual, self.alpha)
            self._memo[(j, h, x)] = dist
        return dist

    def table(self) -> np.ndarray:
        return np.array([[self.row(h, x) for x in range(self.num_states)] for h in range(self.horizon)])


class OPDOP(BaseEstimator):
    """Estimator wrapper: ``fit(model)`` runs the learner and records the ledger.

    Parameters left as ``None`` follow the default schedule for the chosen
    backend (``c1`` scales the bonus, ``alpha_rate`` picks the policy step rate).
    """

    def __init__(self, backend="tabular", n_episodes=1000, c1=1.0, p=0.1, alpha_rate="theorem",
                 alpha=None, beta=None, eta=None, theta=None, chi=None, features=None,
                 random_state=0):
        self.backend = backend
        self.n_episodes = n_episodes
        self.c1 = c1
        self.p = p
        self.alpha_rate = alpha_rate
        self.alpha = alpha
        self.beta = beta
        self.eta = eta
        self.theta = theta
        self.chi = chi
        self.features = features
        self.random_state = random_state

    def make_config(self, model: CmdpModel, hindsight: HindsightSolution) -> OpdopConfig:
        feats = self.features
        if self.backend == "lstd" and feats is None:
            feats = canonical_features(model)
        cfg = default_schedule(
            model.num_actions, model.horizon, self.n_episodes,
            d=feats.d if feats is not None else None,
            failure_prob=self.p, slater_gap=hindsight.slater_gap,
            num_states=model.num_states, backend=self.backend, c1=self.c1,
            chi=self.chi, alpha_rate=self.alpha_rate,
        )
        overrides = {k: getattr(self, k) for k in ("alpha", "beta", "eta", "theta") if getattr(self, k) is not None}
        return OpdopConfig(**{**cfg.to_dict(), **overrides})

    def fit(self, model: CmdpModel, y=None):
        if self.backend not in BACKENDS:
            raise ConfigurationError(f"backend must be one of {BACKENDS}")
        self.hindsight_ = solve_hindsight(model)
        self.config_ = self.make_config(model, self.hindsight_)
        self.ledger_ = run_opdop(model, self.config_, self.backend, self.random_state,
                                 self.hindsight_, self.features)
        self.policy_ = self.ledger_.policy if self.ledger_.policy is not None else uniform_policy(
            model.horizon, model.num_states, model.num_actions)
        self.regret_ = self.ledger_.regret
        self.violation_ = self.ledger_.violation
        if not math.isfinite(self.regret_):
            raise NumericError("non-finite regret")
        return self

    def predict_proba(self, X):
        """Action distributions of the last played policy at (step, state) rows."""
        X = np.asarray(X, dtype=int).reshape(-1, 2)
        return self.policy_[X[:, 0], X[:, 1]]

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)
