"""Policy mixing, exponentiated policy improvement, projected dual ascent."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import logsumexp

from .exceptions import ConfigurationError, NumericError

ALPHA_RATES = ("theorem", "lemma")


@dataclass
class OpdopConfig:
    """Step sizes and constants of one OPDOP run.

    ``alpha`` policy step, ``beta`` bonus scale, ``eta`` dual step,
    ``theta`` mixing weight, ``lam`` ridge, ``chi`` dual cap, ``episodes`` K,
    ``failure_prob`` p.
    """

    alpha: float
    beta: float
    eta: float
    theta: float
    lam: float
    chi: float
    episodes: int
    failure_prob: float = 0.1

    def __post_init__(self):
        checks = [
            ("alpha", self.alpha > 0),
            ("beta", self.beta >= 0),
            ("eta", self.eta > 0),
            ("theta", 0 < self.theta <= 1),
            ("lam", self.lam > 0),
            ("chi", self.chi > 0),
            ("episodes", self.episodes >= 0 and int(self.episodes) == self.episodes),
            ("failure_prob", 0 < self.failure_prob < 1),
        ]
        for name, ok in checks:
            value = getattr(self, name)
            if not ok or (isinstance(value, float) and math.isnan(value)):
                raise ConfigurationError(f"invalid {name}={value!r}")
        self.episodes = int(self.episodes)

    def to_dict(self) -> dict:
        return asdict(self)


def linear_beta(d: int, horizon: int, episodes: int, failure_prob: float, c1: float = 1.0) -> float:
    """Bonus scale ``c1 * sqrt(d H^2 log(d T / p))`` for the least-squares backend."""
    T = horizon * max(episodes, 1)
    return c1 * math.sqrt(d * horizon**2 * math.log(d * T / failure_prob))


def tabular_beta(num_states: int, num_actions: int, horizon: int, episodes: int,
                 failure_prob: float, c1: float = 1.0) -> float:
    """Bonus scale ``c1 * H * sqrt(|S| log(|S||A| T / p))`` for the counter backend."""
    T = horizon * max(episodes, 1)
    return c1 * horizon * math.sqrt(num_states * math.log(num_states * num_actions * T / failure_prob))


def default_schedule(num_actions: int, horizon: int, episodes: int, d: int | None = None,
                     failure_prob: float = 0.1, slater_gap: float = 0.0, *,
                     num_states: int | None = None, backend: str = "lstd",
                     c1: float = 1.0, chi: float | None = None,
                     alpha_rate: str = "theorem") -> OpdopConfig:
    """Parameter schedule with ``lam = 1`` and ``chi = 2H / gamma``.

    ``alpha_rate="theorem"`` uses ``sqrt(log|A|) / (H^2 K)``; ``"lemma"`` uses
    ``sqrt(log|A|) / (H^2 sqrt(K))``, the rate under which the mirror-descent
    term ``H log|A| / alpha`` stays sublinear.
    """
    if alpha_rate not in ALPHA_RATES:
        raise ConfigurationError(f"alpha_rate must be one of {ALPHA_RATES}")
    K = max(int(episodes), 1)
    H = int(horizon)
    if chi is None:
        if not slater_gap > 0:
            raise ConfigurationError("Slater gap is zero; pass an explicit dual cap chi")
        chi = 2.0 * H / slater_gap
    log_a = math.log(num_actions)
    if log_a == 0.0:
        # a single action makes every policy identical; any positive step works
        log_a = 1.0
    denom = H**2 * (K if alpha_rate == "theorem" else math.sqrt(K))
    if backend == "tabular":
        if num_states is None:
            raise ConfigurationError("tabular schedule needs num_states")
        beta = tabular_beta(num_states, num_actions, H, K, failure_prob, c1)
    else:
        if d is None:
            raise ConfigurationError("least-squares schedule needs the feature dimension d")
        beta = linear_beta(d, H, K, failure_prob, c1)
    return OpdopConfig(
        alpha=math.sqrt(log_a) / denom,
        beta=beta,
        eta=1.0 / math.sqrt(K),
        theta=1.0 / K,
        lam=1.0,
        chi=chi,
        episodes=int(episodes),
        failure_prob=failure_prob,
    )


def mix_policy(policy: np.ndarray, theta: float) -> np.ndarray:
    """``(1 - theta) * pi + theta * Unif(A)`` at every step and state."""
    if not 0 < theta <= 1:
        raise ConfigurationError(f"mixing weight theta={theta} must lie in (0, 1]")
    pi = np.asarray(policy, dtype=float)
    return (1.0 - theta) * pi + theta / pi.shape[-1]


def policy_improve(mixed: np.ndarray, q_reward: np.ndarray, q_utility: np.ndarray,
                   dual: float, alpha: float) -> np.ndarray:
    """Closed-form KL-proximal step ``pi ∝ mixed * exp(alpha (Q_r + Y Q_g))``.

    Works on any trailing action axis; normalization is done in log space.
    """
    q_r = np.asarray(q_reward, dtype=float)
    q_g = np.asarray(q_utility, dtype=float)
    if not (np.all(np.isfinite(q_r)) and np.all(np.isfinite(q_g))):
        raise NumericError("non-finite action-value estimate passed to the policy update")
    with np.errstate(divide="ignore"):
        logits = np.log(mixed) + alpha * (q_r + dual * q_g)
    logits = logits - logsumexp(logits, axis=-1, keepdims=True)
    return np.exp(logits)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """KL(p | q) along the last axis, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(axis=-1)


@dataclass
class DualState:
    """Current multiplier and the history of ``(k, Y_k, b - V_g^{k-1}(x_1))``."""

    value: float = 0.0
    history: list = field(default_factory=list)


def dual_update(state: DualState, b: float, v_g1: float, eta: float, chi: float,
                episode: int | None = None) -> DualState:
    """Projected ascent ``Y <- clip(Y + eta (b - V_g1), 0, chi)``; appends to history."""
    if not chi > 0:
        raise ConfigurationError(f"dual cap chi={chi} must be positive")
    signal = b - v_g1
    if not math.isfinite(signal):
        raise NumericError("non-finite utility estimate in dual update")
    new = min(max(state.value + eta * signal, 0.0), chi)
    k = len(state.history) + 1 if episode is None else episode
    # the history list is carried over, not copied; runs are sequential
    state.history.append((k, new, signal))
    return DualState(new, state.history)
