"""
Small dense linear programs solved with a two-phase tableau simplex.

    minimize    c . z
    subject to  A_ub z <= b_ub,  A_eq z = b_eq,  lower <= z <= upper

Pivoting follows Bland's rule (lowest eligible column, then lowest basic
index among tied ratios) so the method cannot cycle.
"""

import sys
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from src.config.constants import LP_PIVOT_TOLERANCE
from src.exceptions import NumericError, ShapeError


@dataclass
class LpProblem:
    objective: np.ndarray
    a_ub: Optional[np.ndarray] = None
    b_ub: Optional[np.ndarray] = None
    a_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def __post_init__(self):
        self.objective = np.asarray(self.objective, dtype=np.float64).ravel()
        m = self.objective.shape[0]
        self.a_ub, self.b_ub = self._rows(self.a_ub, self.b_ub, m, "inequality")
        self.a_eq, self.b_eq = self._rows(self.a_eq, self.b_eq, m, "equality")
        self.lower = np.zeros(m) if self.lower is None else np.asarray(self.lower, dtype=np.float64).ravel()
        self.upper = np.full(m, np.inf) if self.upper is None else np.asarray(self.upper, dtype=np.float64).ravel()
        if self.lower.shape[0] != m or self.upper.shape[0] != m:
            raise ShapeError("variable bounds must match the number of variables", sys)
        if np.any(self.lower > self.upper):
            raise NumericError("a lower bound exceeds its upper bound", sys)
        for name, arr in (("objective", self.objective), ("A_ub", self.a_ub), ("b_ub", self.b_ub),
                          ("A_eq", self.a_eq), ("b_eq", self.b_eq)):
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"{name} has non-finite entries", sys)

    @staticmethod
    def _rows(a, b, m: int, kind: str) -> Tuple[np.ndarray, np.ndarray]:
        if a is None:
            return np.zeros((0, m)), np.zeros(0)
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        b = np.asarray(b, dtype=np.float64).ravel()
        if a.shape[1] != m or a.shape[0] != b.shape[0]:
            raise ShapeError(f"{kind} constraints have shape {a.shape} with {b.shape[0]} right-hand sides", sys)
        return a, b

    @property
    def n_variables(self) -> int:
        return self.objective.shape[0]


@dataclass
class LpResult:
    x: np.ndarray
    objective: float
    iterations: int


class _Tableau:
    """Rows are constraints, the last row holds reduced costs, the last column the right-hand side."""

    def __init__(self, table: np.ndarray, basis: List[int], tol: float):
        self.table = table
        self.basis = basis
        self.tol = tol
        self.iterations = 0

    def set_costs(self, costs: np.ndarray) -> None:
        row = np.zeros(self.table.shape[1])
        row[: costs.shape[0]] = costs
        for r, var in enumerate(self.basis):
            if row[var] != 0.0:
                row -= row[var] * self.table[r]
        self.table[-1] = row

    def pivot(self, row: int, col: int) -> None:
        t = self.table
        t[row] /= t[row, col]
        factors = t[:, col].copy()
        factors[row] = 0.0
        t -= np.outer(factors, t[row])
        t[:, col] = 0.0
        t[row, col] = 1.0
        self.basis[row] = col
        self.iterations += 1

    def run(self, allowed: int, max_iters: int) -> None:
        t = self.table
        for _ in range(max_iters):
            costs = t[-1, :allowed]
            entering = np.flatnonzero(costs < -self.tol)
            if entering.size == 0:
                return
            col = int(entering[0])
            column = t[:-1, col]
            eligible = np.flatnonzero(column > self.tol)
            if eligible.size == 0:
                raise NumericError("linear program is unbounded", sys)
            ratios = t[eligible, -1] / column[eligible]
            best = ratios.min()
            tied = eligible[ratios <= best + self.tol * max(1.0, abs(best))]
            row = int(min(tied, key=lambda r: self.basis[r]))
            self.pivot(row, col)
        raise NumericError(f"simplex did not terminate within {max_iters} pivots", sys)


def _standard_form(problem: LpProblem):
    """
    Shift to y = z - lower >= 0 (free variables split into y+ - y-), turn finite
    upper bounds into rows and return the constraint blocks, costs and a map back to z.
    """
    m = problem.n_variables
    free = ~np.isfinite(problem.lower)
    shift = np.where(free, 0.0, problem.lower)
    cols = [np.eye(m)[:, k] for k in range(m)] + [-np.eye(m)[:, k] for k in np.flatnonzero(free)]
    expand = np.column_stack(cols) if cols else np.zeros((m, 0))

    a_ub = problem.a_ub @ expand
    b_ub = problem.b_ub - problem.a_ub @ shift
    bounded = np.flatnonzero(np.isfinite(problem.upper))
    if bounded.size:
        a_ub = np.vstack([a_ub, expand[bounded]])
        b_ub = np.concatenate([b_ub, problem.upper[bounded] - shift[bounded]])
    a_eq = problem.a_eq @ expand
    b_eq = problem.b_eq - problem.a_eq @ shift
    costs = problem.objective @ expand

    def recover(y: np.ndarray) -> np.ndarray:
        return shift + expand @ y

    return a_ub, b_ub, a_eq, b_eq, costs, recover


def solve_lp(problem: LpProblem, tol: float = LP_PIVOT_TOLERANCE, max_iters: Optional[int] = None) -> LpResult:
    a_ub, b_ub, a_eq, b_eq, costs, recover = _standard_form(problem)
    n_struct = costs.shape[0]
    n_ub, n_eq = a_ub.shape[0], a_eq.shape[0]
    n_rows = n_ub + n_eq

    # slack columns follow the structural ones, artificials come last
    rows = np.zeros((n_rows, n_struct + n_ub))
    rhs = np.concatenate([b_ub, b_eq])
    rows[:n_ub, :n_struct] = a_ub
    rows[:n_ub, n_struct:] = np.eye(n_ub)
    rows[n_ub:, :n_struct] = a_eq
    negative = rhs < 0
    rows[negative] *= -1.0
    rhs = np.abs(rhs)

    basis: List[int] = [-1] * n_rows
    for r in range(n_ub):
        if not negative[r]:
            basis[r] = n_struct + r
    needs_artificial = [r for r in range(n_rows) if basis[r] < 0]
    n_real = n_struct + n_ub
    n_total = n_real + len(needs_artificial)

    table = np.zeros((n_rows + 1, n_total + 1))
    table[:n_rows, :n_real] = rows
    table[:n_rows, -1] = rhs
    for offset_index, r in enumerate(needs_artificial):
        table[r, n_real + offset_index] = 1.0
        basis[r] = n_real + offset_index

    limit = max_iters or 50 * (n_total + n_rows + 1)
    tableau = _Tableau(table, basis, tol)

    if needs_artificial:
        phase_one = np.zeros(n_total)
        phase_one[n_real:] = 1.0
        tableau.set_costs(phase_one)
        tableau.run(n_total, limit)
        infeasibility = -tableau.table[-1, -1]
        if infeasibility > tol * max(1.0, float(np.abs(rhs).max(initial=0.0))):
            raise NumericError(f"linear program is infeasible (phase one residual {infeasibility:.3e})", sys)
        redundant = []
        for r, var in enumerate(tableau.basis):
            if var < n_real:
                continue
            candidates = np.flatnonzero(np.abs(tableau.table[r, :n_real]) > tol)
            if candidates.size:
                tableau.pivot(r, int(candidates[0]))
            else:
                redundant.append(r)
        if redundant:
            keep = [r for r in range(n_rows) if r not in redundant]
            tableau.table = np.vstack([tableau.table[keep], tableau.table[-1:]])
            tableau.basis = [tableau.basis[r] for r in keep]
        tableau.table = np.hstack([tableau.table[:, :n_real], tableau.table[:, -1:]])

    tableau.set_costs(np.concatenate([costs, np.zeros(n_ub)]))
    tableau.run(n_real, limit)

    y = np.zeros(n_real)
    for r, var in enumerate(tableau.basis):
        y[var] = tableau.table[r, -1]
    x = recover(y[:n_struct])
    return LpResult(x=x, objective=float(problem.objective @ x), iterations=tableau.iterations)
