"""Linear and mixed-integer programming kernel with exact dual extraction.

Thin, deterministic layer over the HiGHS solvers shipped with scipy. The
clearing models need basic optimal solutions whose row duals feed marginal
prices directly, so pure LPs run through the dual simplex and solutions
carry duals and reduced costs next to the primal point. Mixed-integer
problems (binary commitment variables only) return primal values alone.

Dual sign convention: inequality rows report the nonnegative Lagrange
multiplier, so a binding >= row in a minimization has a positive dual equal
to the objective increase per unit of right-hand side, and a binding <= row
has a positive dual equal to the objective decrease per unit of relaxation.
Equality rows report the signed sensitivity d(objective)/d(rhs).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import Bounds, LinearConstraint, linprog, milp

__all__ = [
    "LpProblem",
    "LpSolution",
    "solve_lp",
    "solve_milp",
    "primal_residual",
    "duality_gap",
    "complementary_slackness",
    "write_lp",
]

_SENSES = ("<=", "==", ">=")


@dataclass
class _Row:
    name: str
    coeffs: dict
    sense: str
    rhs: float


class LpProblem:
    """Sparse minimization problem built column by column and row by row.

    Variables carry bounds, an objective coefficient and an optional binary
    mark; rows carry a sense and right-hand side. Both are addressable by
    unique names, which the solution keeps for dual and value lookup.
    """

    def __init__(self, name: str = "lp"):
        self.name = name
        self.obj: list[float] = []
        self.lower: list[float] = []
        self.upper: list[float] = []
        self.binaries: set[int] = set()
        self.rows: list[_Row] = []
        self.col_index: dict[str, int] = {}
        self.row_index: dict[str, int] = {}

    @property
    def n_vars(self) -> int:
        return len(self.obj)

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    def add_var(self, name, lo=0.0, hi=math.inf, cost=0.0, binary=False) -> int:
        if name in self.col_index:
            raise ValueError(f"duplicate variable name {name!r}")
        if not (math.isfinite(cost) and not math.isnan(lo) and not math.isnan(hi)):
            raise ValueError(f"variable {name!r} has a non-finite cost or NaN bound")
        if lo > hi:
            raise ValueError(f"variable {name!r} has bounds lo={lo} > hi={hi}")
        if binary and not (0.0 <= lo and hi <= 1.0):
            raise ValueError(f"binary variable {name!r} needs bounds inside [0, 1]")
        j = len(self.obj)
        self.col_index[name] = j
        self.obj.append(float(cost))
        self.lower.append(float(lo))
        self.upper.append(float(hi))
        if binary:
            self.binaries.add(j)
        return j

    def add_row(self, name, coeffs, sense, rhs) -> int:
        """Add a constraint; coeffs maps variable index or name to coefficient."""
        if name in self.row_index:
            raise ValueError(f"duplicate row name {name!r}")
        if sense not in _SENSES:
            raise ValueError(f"row {name!r} sense must be one of {_SENSES}")
        if not math.isfinite(rhs):
            raise ValueError(f"row {name!r} has a non-finite right-hand side")
        clean = {}
        for key, c in coeffs.items():
            j = self.col_index[key] if isinstance(key, str) else int(key)
            if not 0 <= j < self.n_vars:
                raise ValueError(f"row {name!r} references unknown column {key!r}")
            if not math.isfinite(c):
                raise ValueError(f"row {name!r} has a non-finite coefficient on column {key!r}")
            if c != 0.0:
                clean[j] = clean.get(j, 0.0) + float(c)
        i = len(self.rows)
        self.row_index[name] = i
        self.rows.append(_Row(str(name), clean, sense, float(rhs)))
        return i

    def matrix(self):
        """Constraint matrix in CSR form, rows in insertion order."""
        rows, cols, vals = [], [], []
        for i, row in enumerate(self.rows):
            for j, c in row.coeffs.items():
                rows.append(i)
                cols.append(j)
                vals.append(c)
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.n_rows, self.n_vars))


@dataclass(frozen=True)
class LpSolution:
    """Solver outcome with primal values and, for pure LPs, exact duals.

    duals follow the row order of the problem; reduced_costs follow the
    column order. Both are None for mixed-integer solves and non-optimal
    statuses. Lookups by name go through value() and dual().
    """

    status: str
    objective: float | None
    x: np.ndarray | None
    duals: np.ndarray | None
    reduced_costs: np.ndarray | None
    col_index: dict = field(repr=False, default_factory=dict)
    row_index: dict = field(repr=False, default_factory=dict)

    def value(self, name) -> float:
        return float(self.x[self.col_index[name]])

    def dual(self, name) -> float:
        return float(self.duals[self.row_index[name]])


def _split_rows(problem):
    """Partition rows into <= (with >= flipped) and == blocks for HiGHS."""
    a = problem.matrix()
    senses = [r.sense for r in problem.rows]
    rhs = np.array([r.rhs for r in problem.rows])
    ub_rows = [i for i, s in enumerate(senses) if s != "=="]
    eq_rows = [i for i, s in enumerate(senses) if s == "=="]
    flip = np.array([-1.0 if senses[i] == ">=" else 1.0 for i in ub_rows])
    a_ub = sp.diags(flip) @ a[ub_rows] if ub_rows else None
    b_ub = flip * rhs[ub_rows] if ub_rows else None
    a_eq = a[eq_rows] if eq_rows else None
    b_eq = rhs[eq_rows] if eq_rows else None
    return a_ub, b_ub, a_eq, b_eq, ub_rows, eq_rows


_LP_STATUS = {0: "optimal", 2: "infeasible", 3: "unbounded"}


def solve_lp(problem) -> LpSolution:
    """Solve a pure LP with the dual simplex and extract duals.

    Deterministic: HiGHS runs single threaded with fixed pivoting, so
    identical problems return identical bases, duals and reduced costs.
    Raises on integrality marks and on numerical failure inside the solver.
    """
    if problem.binaries:
        raise ValueError("problem has binary marks; use solve_milp")
    a_ub, b_ub, a_eq, b_eq, ub_rows, eq_rows = _split_rows(problem)
    res = linprog(
        np.array(problem.obj),
        A_ub=a_ub,
        b_ub=b_ub,
        A_eq=a_eq,
        b_eq=b_eq,
        bounds=list(zip(problem.lower, problem.upper)),
        method="highs-ds",
    )
    if res.status not in _LP_STATUS:
        raise RuntimeError(f"LP solve failed: {res.message}")
    status = _LP_STATUS[res.status]
    if status != "optimal":
        return LpSolution(status, None, None, None, None,
                          dict(problem.col_index), dict(problem.row_index))
    duals = np.zeros(problem.n_rows)
    if ub_rows:
        # nonnegative multiplier for both senses: the flip used to encode
        # >= rows also flips the sensitivity back
        duals[ub_rows] = -res.ineqlin.marginals
    if eq_rows:
        duals[eq_rows] = res.eqlin.marginals
    reduced = res.lower.marginals + res.upper.marginals
    return LpSolution("optimal", float(res.fun), res.x, duals, reduced,
                      dict(problem.col_index), dict(problem.row_index))


def solve_milp(problem, rel_gap=1e-9) -> LpSolution:
    """Solve a problem with binary marks by branch and bound; primal only.

    LP relaxations are solved to optimality at every node, so the returned
    objective can never beat the root relaxation bound. Raises if the
    solver stops on a limit instead of proving optimality.
    """
    for j in problem.binaries:
        if problem.lower[j] < 0.0 or problem.upper[j] > 1.0:
            raise ValueError("integrality marks are only supported on binary variables")
    a = problem.matrix()
    lo = np.array([r.rhs if r.sense in (">=", "==") else -np.inf for r in problem.rows])
    hi = np.array([r.rhs if r.sense in ("<=", "==") else np.inf for r in problem.rows])
    integrality = np.zeros(problem.n_vars)
    integrality[list(problem.binaries)] = 1
    res = milp(
        np.array(problem.obj),
        constraints=LinearConstraint(a, lo, hi) if problem.n_rows else None,
        integrality=integrality,
        bounds=Bounds(np.array(problem.lower), np.array(problem.upper)),
        options={"mip_rel_gap": rel_gap},
    )
    if res.status == 1:
        raise RuntimeError(f"MILP stopped on a limit with gap {res.mip_gap}: {res.message}")
    if res.status not in _LP_STATUS:
        raise RuntimeError(f"MILP solve failed: {res.message}")
    status = _LP_STATUS[res.status]
    if status != "optimal":
        return LpSolution(status, None, None, None, None,
                          dict(problem.col_index), dict(problem.row_index))
    return LpSolution("optimal", float(res.fun), res.x, None, None,
                      dict(problem.col_index), dict(problem.row_index))


def primal_residual(problem, x) -> float:
    """Worst constraint violation of a primal point, bounds included."""
    ax = problem.matrix() @ np.asarray(x, dtype=float)
    worst = 0.0
    for i, row in enumerate(problem.rows):
        if row.sense == "<=":
            worst = max(worst, ax[i] - row.rhs)
        elif row.sense == ">=":
            worst = max(worst, row.rhs - ax[i])
        else:
            worst = max(worst, abs(ax[i] - row.rhs))
    worst = max(worst, float(np.max(np.array(problem.lower) - x, initial=0.0)))
    worst = max(worst, float(np.max(x - np.array(problem.upper), initial=0.0)))
    return worst


def duality_gap(problem, solution) -> float:
    """Relative gap between primal objective and the dual bound it implies."""
    dual_obj = 0.0
    for i, row in enumerate(problem.rows):
        y = solution.duals[i]
        if row.sense == "<=":
            dual_obj -= y * row.rhs
        elif row.sense == ">=":
            dual_obj += y * row.rhs
        else:
            dual_obj += y * row.rhs
    z = solution.reduced_costs
    for j in range(problem.n_vars):
        zl, zu = max(z[j], 0.0), min(z[j], 0.0)
        if math.isfinite(problem.lower[j]):
            dual_obj += zl * problem.lower[j]
        if math.isfinite(problem.upper[j]):
            dual_obj += zu * problem.upper[j]
    return abs(solution.objective - dual_obj) / (1.0 + abs(solution.objective))


def complementary_slackness(problem, solution) -> float:
    """Largest dual-times-slack product across rows and variable bounds."""
    ax = problem.matrix() @ solution.x
    worst = 0.0
    for i, row in enumerate(problem.rows):
        slack = abs(ax[i] - row.rhs)
        if row.sense != "==":
            worst = max(worst, abs(solution.duals[i]) * slack)
    z = solution.reduced_costs
    for j in range(problem.n_vars):
        if math.isfinite(problem.lower[j]):
            worst = max(worst, max(z[j], 0.0) * abs(solution.x[j] - problem.lower[j]))
        if math.isfinite(problem.upper[j]):
            worst = max(worst, -min(z[j], 0.0) * abs(problem.upper[j] - solution.x[j]))
    return worst


def write_lp(problem, path):
    """Dump the problem in CPLEX LP text format for external cross-checks."""
    names = {j: n for n, j in problem.col_index.items()}
    sense_txt = {"<=": "<=", ">=": ">=", "==": "="}

    def term(j, c, lead):
        s = "+" if c >= 0 else "-"
        head = f"{s} " if not lead or s == "-" else ""
        return f"{head}{abs(c):.12g} {names[j]}"

    with open(path, "w") as fh:
        fh.write(f"\\ {problem.name}\nMinimize\n obj:")
        lead = True
        for j, c in enumerate(problem.obj):
            if c != 0.0:
                fh.write(" " + term(j, c, lead))
                lead = False
        if lead:
            fh.write(" 0 " + names[0] if problem.n_vars else " 0")
        fh.write("\nSubject To\n")
        for row in problem.rows:
            fh.write(f" {row.name}:")
            lead = True
            for j in sorted(row.coeffs):
                fh.write(" " + term(j, row.coeffs[j], lead))
                lead = False
            fh.write(f" {sense_txt[row.sense]} {row.rhs:.12g}\n")
        fh.write("Bounds\n")
        for j in range(problem.n_vars):
            lo, hi = problem.lower[j], problem.upper[j]
            hi_txt = f"{hi:.12g}" if math.isfinite(hi) else "+inf"
            fh.write(f" {lo:.12g} <= {names[j]} <= {hi_txt}\n")
        if problem.binaries:
            fh.write("Binaries\n")
            for j in sorted(problem.binaries):
                fh.write(f" {names[j]}\n")
        fh.write("End\n")
