"""Environment generators: random tabular CMDPs, a hazard gridworld, linear mixtures."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .cmdp import CmdpModel, optimal_values
from .exceptions import ConfigurationError, GenerationError, InfeasibleConstraint
from .hindsight import FEASIBILITY_TOL, estimate_slater_gap
from .lstd import FeatureMaps

MIN_SLATER_GAP = 0.05
MAX_REJECTIONS = 100

# (d_row, d_col) for up, right, down, left
MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))


def _check_dims(**dims):
    for name, value in dims.items():
        if int(value) != value or value < 1:
            raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")


def _dirichlet_rows(rng: np.random.Generator, shape: tuple, size: int) -> np.ndarray:
    p = rng.dirichlet(np.ones(size), size=shape)
    return p / p.sum(axis=-1, keepdims=True)


def _accept_or_retry(build, b: float, what: str):
    """Call ``build(attempt)`` until the Slater gap reaches the floor."""
    best = 0.0
    for attempt in range(MAX_REJECTIONS):
        out = build(attempt)
        model = out[0] if isinstance(out, tuple) else out
        gamma, _ = estimate_slater_gap(model)
        if gamma >= MIN_SLATER_GAP:
            return out
        best = max(best, gamma)
    raise GenerationError(
        f"{what}: no sample reached Slater gap {MIN_SLATER_GAP} in {MAX_REJECTIONS} tries "
        f"(best {best:.3g} at b={b}); try a smaller b"
    )


def make_tabular_random(num_states: int, num_actions: int, horizon: int, b: float,
                        seed: int | None = 0) -> CmdpModel:
    """Dirichlet(1) transition rows with uniform [0, 1] reward and utility tables.

    Samples are redrawn until the utility slack ``max V_g - b`` is at least 0.05.
    """
    _check_dims(num_states=num_states, num_actions=num_actions, horizon=horizon)
    if not 0.0 < b <= horizon:
        raise ConfigurationError(f"b={b} must lie in (0, {horizon}]")
    rng = np.random.default_rng(seed)
    H, S, A = horizon, num_states, num_actions

    def build(_):
        P = _dirichlet_rows(rng, (H, S, A), S)
        r = rng.random((H, S, A))
        g = rng.random((H, S, A))
        return CmdpModel(P, r, g, b, 0)

    return _accept_or_retry(build, b, "make_tabular_random")


def _cell(where, width: int, height: int) -> int:
    if isinstance(where, (int, np.integer)):
        idx = int(where)
    else:
        row, col = where
        if not (0 <= row < height and 0 <= col < width):
            raise ConfigurationError(f"cell {where} lies outside a {height}x{width} grid")
        idx = row * width + col
    if not 0 <= idx < width * height:
        raise ConfigurationError(f"cell index {idx} outside the grid")
    return idx


def make_hazard_gridworld(width: int, height: int, horizon: int, hazards=(), b: float = 1.0,
                          seed: int | None = 0, *, goal=None, start=(0, 0), slip: float = 0.1,
                          walls=()) -> CmdpModel:
    """Grid navigation with an absorbing goal and hazard cells.

    States are cells ``row * width + col``; actions are up, right, down, left.
    With probability ``slip`` the move goes in one of the three other
    directions, uniformly. Moves off the grid or across a wall leave the agent
    in place. Reward is 1 at the goal; utility is 0 on hazards and 1 elsewhere.

    ``hazards`` is a list of cells (``(row, col)`` or flat index) or an integer
    count, in which case that many hazard cells are drawn with ``seed``.
    ``walls`` is a list of cell pairs whose shared edge is blocked. ``goal``
    defaults to the bottom-right cell.

    Raises
    ------
    InfeasibleConstraint
        If no policy reaches ``V_g >= b``; carries the best achievable value.
    """
    _check_dims(width=width, height=height, horizon=horizon)
    if not 0.0 <= slip <= 1.0:
        raise ConfigurationError(f"slip={slip} must lie in [0, 1]")
    S, A, H = width * height, len(MOVES), horizon
    goal_idx = _cell((height - 1, width - 1) if goal is None else goal, width, height)
    start_idx = _cell(start, width, height)
    if isinstance(hazards, (int, np.integer)):
        free = [c for c in range(S) if c not in (goal_idx, start_idx)]
        if hazards > len(free):
            raise ConfigurationError(f"cannot place {hazards} hazards on {len(free)} free cells")
        rng = np.random.default_rng(seed)
        hazard_set = {int(c) for c in rng.choice(free, size=int(hazards), replace=False)}
    else:
        hazard_set = {_cell(c, width, height) for c in hazards}
    if goal_idx in hazard_set:
        raise ConfigurationError("goal and hazard cells must be disjoint")
    blocked = set()
    for c1, c2 in walls:
        i, j = _cell(c1, width, height), _cell(c2, width, height)
        blocked.update({(i, j), (j, i)})

    def step(cell: int, move: int) -> int:
        row, col = divmod(cell, width)
        dr, dc = MOVES[move]
        nr, nc = row + dr, col + dc
        if not (0 <= nr < height and 0 <= nc < width):
            return cell
        nxt = nr * width + nc
        return cell if (cell, nxt) in blocked else nxt

    P1 = np.zeros((S, A, S))
    for x in range(S):
        for a in range(A):
            if x == goal_idx:
                P1[x, a, x] = 1.0
                continue
            P1[x, a, step(x, a)] += 1.0 - slip
            for other in range(A):
                if other != a:
                    P1[x, a, step(x, other)] += slip / (A - 1)
    r1 = np.zeros((S, A))
    r1[goal_idx] = 1.0
    g1 = np.ones((S, A))
    for c in hazard_set:
        g1[c] = 0.0
    P = np.broadcast_to(P1, (H, S, A, S))
    r = np.broadcast_to(r1, (H, S, A))
    g = np.broadcast_to(g1, (H, S, A))
    probe = CmdpModel(P, r, g, float(H), start_idx)
    V, _ = optimal_values(probe, probe.utility)
    max_utility = float(V[0, start_idx])
    if b > max_utility + FEASIBILITY_TOL:
        raise InfeasibleConstraint(max_utility, b)
    return probe.with_offset(b)


def make_linear_mixture(d1: int, d2: int, num_states: int, num_actions: int, horizon: int,
                        num_base_models: int, b: float, seed: int | None = 0
                        ) -> tuple[CmdpModel, FeatureMaps]:
    """Linear-kernel CMDP built as a mixture of random base kernels.

    ``psi(x, a, y) = [P^1(y|x,a), ..., P^m(y|x,a)]`` with ``m = d1`` base kernels
    and simplex weights ``theta_h``, so ``P_h = <psi, theta_h>`` exactly. The
    value feature ``phi(x, a)`` lies on the simplex of ``R^{d2}`` and the signal
    parameters in ``[0, 1]^{d2}``, which keeps reward and utility in ``[0, 1]``.
    """
    _check_dims(d1=d1, d2=d2, num_states=num_states, num_actions=num_actions,
                horizon=horizon, num_base_models=num_base_models)
    if d1 != num_base_models:
        raise ConfigurationError(f"this layout needs d1 == num_base_models, got {d1} and {num_base_models}")
    if not 0.0 < b <= horizon:
        raise ConfigurationError(f"b={b} must lie in (0, {horizon}]")
    rng = np.random.default_rng(seed)
    H, S, A, m = horizon, num_states, num_actions, num_base_models

    def build(_):
        base = _dirichlet_rows(rng, (m, S, A), S)
        psi = np.moveaxis(base, 0, -1).reshape(S * A * S, m)
        theta = rng.dirichlet(np.ones(m), size=H)
        phi = rng.dirichlet(np.ones(d2), size=S * A)
        theta_r = rng.random((H, d2))
        theta_g = rng.random((H, d2))
        maps = FeatureMaps(psi, phi, theta, theta_r, theta_g, S, A)
        P = maps.kernel()
        P = np.clip(P, 0.0, None)
        P /= P.sum(axis=-1, keepdims=True)
        r = np.clip(maps.signal("reward"), 0.0, 1.0)
        g = np.clip(maps.signal("utility"), 0.0, 1.0)
        return CmdpModel(P, r, g, b, 0), maps

    return _accept_or_retry(build, b, "make_linear_mixture")


def canonical_features(model: CmdpModel) -> FeatureMaps:
    """Tabular embedding ``psi(x, a, y) = e_(x,a,y)``, ``phi(x, a) = e_(x,a)`` (sparse)."""
    H, S, A = model.horizon, model.num_states, model.num_actions
    return FeatureMaps(
        psi=sp.identity(S * A * S, format="csr"),
        phi=sp.identity(S * A, format="csr"),
        theta=model.transitions.reshape(H, -1).copy(),
        theta_reward=model.reward.reshape(H, -1).copy(),
        theta_utility=model.utility.reshape(H, -1).copy(),
        num_states=S,
        num_actions=A,
    )
