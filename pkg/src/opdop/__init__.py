"""Optimistic primal-dual proximal policy optimization for episodic CMDPs."""

from .agent import OPDOP, run_opdop
from .cmdp import CmdpModel
from .hindsight import HindsightLP, solve_hindsight

__version__ = "0.1.0"
__all__ = ["OPDOP", "HindsightLP", "CmdpModel", "run_opdop", "solve_hindsight"]
