"""Dense two-phase revised simplex with Bland's anti-cycling rule.

Solves ``min c @ x  s.t.  A @ x = b, x >= 0``. Problems here are small
(a few hundred columns), so the basis is refactored from scratch with an LU
decomposition at every pivot instead of maintaining product-form updates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, lu_factor, lu_solve

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"


@dataclass
class SimplexResult:
    status: str
    x: np.ndarray | None = None
    duals: np.ndarray | None = None
    objective: float = np.nan
    basis: np.ndarray | None = None
    iterations: int = 0
    infeasibility: float = 0.0

    @property
    def success(self) -> bool:
        return self.status == OPTIMAL


class _Tableau:
    def __init__(self, A, b, c, basis, tol):
        self.A, self.b, self.c = A, b, c
        self.basis = list(basis)
        self.tol = tol
        self.refactor()

    def refactor(self):
        self.lu = lu_factor(self.A[:, self.basis])
        self.xB = lu_solve(self.lu, self.b)

    def duals(self):
        return lu_solve(self.lu, self.c[self.basis], trans=1)

    def run(self, max_iter, allowed=None):
        """Pivot to optimality. Returns (status, iterations)."""
        n = self.A.shape[1]
        allowed = np.ones(n, dtype=bool) if allowed is None else allowed
        for it in range(max_iter):
            y = self.duals()
            reduced = self.c - self.A.T @ y
            reduced[self.basis] = 0.0
            candidates = np.flatnonzero((reduced < -self.tol) & allowed)
            if candidates.size == 0:
                return OPTIMAL, it
            j = int(candidates[0])  # Bland: lowest index enters
            d = lu_solve(self.lu, self.A[:, j])
            rows = np.flatnonzero(d > self.tol)
            if rows.size == 0:
                return UNBOUNDED, it
            ratios = np.maximum(self.xB[rows], 0.0) / d[rows]
            best = ratios.min()
            tied = rows[ratios <= best + self.tol * max(1.0, abs(best))]
            # Bland: among ties, the basic variable with the lowest index leaves
            leave = int(min(tied, key=lambda i: self.basis[i]))
            self.basis[leave] = j
            self.refactor()
        raise RuntimeError(f"simplex did not converge in {max_iter} iterations")


def revised_simplex(c, A_eq, b_eq, tol: float = 1e-10, max_iter: int = 100_000) -> SimplexResult:
    """Minimize ``c @ x`` subject to ``A_eq @ x = b_eq`` and ``x >= 0``.

    Returns primal ``x`` and equality duals ``y`` (so that ``c - A.T @ y >= 0``
    at optimality and ``c @ x == b_eq @ y``). Redundant equality rows found
    after phase one get a zero dual.
    """
    A = np.array(A_eq, dtype=float)
    b = np.array(b_eq, dtype=float)
    c = np.asarray(c, dtype=float)
    m, n = A.shape
    sign = np.where(b < 0, -1.0, 1.0)
    A *= sign[:, None]
    b *= sign

    # phase one: artificial identity basis
    A1 = np.hstack([A, np.eye(m)])
    c1 = np.concatenate([np.zeros(n), np.ones(m)])
    tab = _Tableau(A1, b, c1, range(n, n + m), tol)
    status, it1 = tab.run(max_iter)
    infeas = float(np.maximum(tab.xB, 0.0)[np.array(tab.basis) >= n].sum())
    if infeas > max(1e-9, 1e-9 * np.abs(b).max(initial=1.0)):
        return SimplexResult(INFEASIBLE, iterations=it1, infeasibility=infeas)

    # drive remaining artificials out of the basis; drop rows that are redundant
    keep_rows = list(range(m))
    basis = list(tab.basis)
    i = 0
    while i < len(basis):
        if basis[i] < n:
            i += 1
            continue
        B = A1[np.ix_(keep_rows, basis)]
        row = np.linalg.solve(B.T, np.eye(len(basis))[i]) @ A[keep_rows]
        row[[j for j in basis if j < n]] = 0.0
        nz = np.flatnonzero(np.abs(row) > 1e-9)
        if nz.size:
            basis[i] = int(nz[0])
            i += 1
        else:
            del keep_rows[i]
            del basis[i]

    Ar, br = A[keep_rows], b[keep_rows]
    try:
        tab = _Tableau(Ar, br, c, basis, tol)
    except LinAlgError as exc:  # pragma: no cover - defensive
        raise RuntimeError("singular basis after phase one") from exc
    status, it2 = tab.run(max_iter)
    if status != OPTIMAL:
        return SimplexResult(status, iterations=it1 + it2)

    x = np.zeros(n)
    x[tab.basis] = np.maximum(tab.xB, 0.0)
    y = np.zeros(m)
    y[keep_rows] = tab.duals()
    y *= sign
    return SimplexResult(
        OPTIMAL,
        x=x,
        duals=y,
        objective=float(c @ x),
        basis=np.array(tab.basis),
        iterations=it1 + it2,
    )
