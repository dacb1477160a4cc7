"""Per-episode regret and constraint-violation bookkeeping."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, NumericError

CSV_COLUMNS = ("k", "v_r_true", "v_g_true", "v_r_est", "v_g_est", "dual", "bonus_sum",
               "regret_cum", "violation_cum")
REGRET_FLOOR = 1e-12


@dataclass
class RegretLedger:
    """Rows of true and estimated initial values per episode plus running totals.

    ``optimal_value`` is the hindsight value ``V_r(x_1)`` of the best feasible
    policy; regret always uses true values of the played policy. Violation is
    the positive part of the running signed sum of ``b - V_g``.
    """

    optimal_value: float
    offset: float
    rows: list = field(default_factory=list)
    regret_sum: float = 0.0
    signed_violation_sum: float = 0.0
    diagnostics: dict = field(default_factory=dict)
    policy: np.ndarray | None = None

    def __len__(self):
        return len(self.rows)

    @property
    def regret(self) -> float:
        return self.regret_sum

    @property
    def violation(self) -> float:
        return max(self.signed_violation_sum, 0.0)

    def column(self, name: str) -> np.ndarray:
        idx = CSV_COLUMNS.index(name)
        return np.array([row[idx] for row in self.rows], dtype=float)

    def recompute(self) -> tuple[np.ndarray, np.ndarray]:
        """Cumulative regret and violation rebuilt from the per-episode true values."""
        regret = np.cumsum(self.optimal_value - self.column("v_r_true"))
        violation = np.maximum(np.cumsum(self.offset - self.column("v_g_true")), 0.0)
        return regret, violation

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for row in self.rows:
                writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])

    @classmethod
    def read_csv(cls, path, optimal_value: float, offset: float) -> RegretLedger:
        ledger = cls(optimal_value, offset)
        with Path(path).open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != CSV_COLUMNS:
                raise ValueError(f"unexpected ledger header {header}")
            for rec in reader:
                ledger.rows.append((int(rec[0]), *map(float, rec[1:])))
        if ledger.rows:
            ledger.regret_sum = ledger.rows[-1][7]
            ledger.signed_violation_sum = float(np.sum(offset - ledger.column("v_g_true")))
        return ledger


def score_episode(ledger: RegretLedger, v_true: tuple[float, float], v_est: tuple[float, float],
                  dual: float, bonus_sum: float = 0.0, k: int | None = None) -> RegretLedger:
    """Append one episode with true ``(V_r, V_g)`` and estimated values; update totals."""
    values = (*v_true, *v_est, dual, bonus_sum)
    if not all(math.isfinite(v) for v in values):
        raise NumericError(f"non-finite metric in episode {len(ledger) + 1}: {values}")
    ledger.regret_sum += ledger.optimal_value - v_true[0]
    ledger.signed_violation_sum += ledger.offset - v_true[1]
    k = len(ledger.rows) + 1 if k is None else k
    ledger.rows.append((k, *values, ledger.regret_sum, ledger.violation))
    return ledger


def fit_regret_slope(ledgers, column: str = "regret_cum") -> float:
    """Log-log least-squares slope of the seed-averaged cumulative curve over ``[K/10, K]``."""
    curves = [np.asarray(lg.column(column) if isinstance(lg, RegretLedger) else lg, dtype=float)
              for lg in ledgers]
    if not curves:
        raise ConfigurationError("need at least one ledger")
    K = min(len(c) for c in curves)
    if K < 100:
        raise ConfigurationError(f"slope fit needs K >= 100 episodes, got {K}")
    mean = np.mean([c[:K] for c in curves], axis=0)
    k = np.arange(1, K + 1)
    sel = k >= K / 10
    y = np.log(np.maximum(mean[sel], REGRET_FLOOR))
    slope, _ = np.polyfit(np.log(k[sel]), y, 1)
    return float(slope)
