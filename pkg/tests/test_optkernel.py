"""LP/MILP kernel: duals, duality certificates, determinism, validation."""

import itertools
import math

import numpy as np
import pytest

from vppfreq.optkernel import (
    LpProblem,
    complementary_slackness,
    duality_gap,
    primal_residual,
    solve_lp,
    solve_milp,
    write_lp,
)


def test_min_x_with_floor():
    p = LpProblem()
    p.add_var("x", lo=-10.0, cost=1.0)
    p.add_row("floor", {"x": 1.0}, ">=", 1.0)
    s = solve_lp(p)
    assert s.status == "optimal"
    assert s.objective == pytest.approx(1.0, abs=1e-12)
    assert s.value("x") == pytest.approx(1.0, abs=1e-12)
    assert s.dual("floor") == pytest.approx(1.0, abs=1e-12)


def test_capacity_row_dual_is_positive_multiplier():
    # vertex enumeration oracle: feasible vertices (0,0), (1,0), (0,1)
    # give objectives 0, -1, -1, so the optimum is -1
    best = min(-x - y for x, y in [(0, 0), (1, 0), (0, 1)])
    p = LpProblem()
    p.add_var("x", cost=-1.0)
    p.add_var("y", cost=-1.0)
    p.add_row("cap", {"x": 1.0, "y": 1.0}, "<=", 1.0)
    s = solve_lp(p)
    assert s.objective == pytest.approx(best, abs=1e-12)
    assert s.dual("cap") == pytest.approx(1.0, abs=1e-12)


def test_contradictory_rows_are_infeasible():
    p = LpProblem()
    p.add_var("x", cost=1.0)
    p.add_row("a", {"x": 1.0}, ">=", 2.0)
    p.add_row("b", {"x": 1.0}, "<=", 1.0)
    s = solve_lp(p)
    assert s.status == "infeasible"
    assert s.x is None and s.duals is None


def test_unbounded_status():
    p = LpProblem()
    p.add_var("x", cost=-1.0)
    assert solve_lp(p).status == "unbounded"


def test_equality_dual_matches_finite_difference():
    def solve_at(rhs):
        p = LpProblem()
        p.add_var("x", lo=-100.0, cost=2.0)
        p.add_var("y", lo=0.0, hi=10.0, cost=1.0)
        p.add_row("pin", {"x": 1.0, "y": 1.0}, "==", rhs)
        return p, solve_lp(p)

    p, s = solve_at(3.0)
    bumped = solve_at(3.0 + 1e-3)[1]
    fd = (bumped.objective - s.objective) / 1e-3
    assert s.dual("pin") == pytest.approx(fd, abs=1e-9)


def _random_feasible_lp(rng, n=8, m_ub=5, m_eq=2):
    p = LpProblem()
    for j in range(n):
        p.add_var(f"x{j}", lo=0.0, hi=10.0, cost=float(rng.normal()))
    a = rng.normal(size=(m_ub + m_eq, n))
    x0 = rng.uniform(0.0, 10.0, size=n)
    for i in range(m_ub):
        coeffs = {j: float(a[i, j]) for j in range(n)}
        p.add_row(f"ub{i}", coeffs, "<=", float(a[i] @ x0 + rng.uniform(0.1, 2.0)))
    for i in range(m_eq):
        coeffs = {j: float(a[m_ub + i, j]) for j in range(n)}
        p.add_row(f"eq{i}", coeffs, "==", float(a[m_ub + i] @ x0))
    return p


def test_strong_duality_and_slackness_on_random_lps():
    rng = np.random.default_rng(5)
    for _ in range(20):
        p = _random_feasible_lp(rng)
        s = solve_lp(p)
        assert s.status == "optimal"
        assert primal_residual(p, s.x) <= 1e-8
        assert duality_gap(p, s) <= 1e-8
        assert complementary_slackness(p, s) <= 1e-8


def test_identical_problems_identical_bases():
    rng = np.random.default_rng(9)
    p = _random_feasible_lp(rng)
    rng = np.random.default_rng(9)
    q = _random_feasible_lp(rng)
    a, b = solve_lp(p), solve_lp(q)
    assert np.array_equal(a.x, b.x)
    assert np.array_equal(a.duals, b.duals)
    assert np.array_equal(a.reduced_costs, b.reduced_costs)
    assert a.objective == b.objective


def test_degenerate_optimum_duals_are_reproducible():
    # redundant rows make the optimal basis degenerate; the kernel must
    # still return one fixed dual vector
    def build():
        p = LpProblem()
        p.add_var("x", cost=1.0)
        p.add_var("y", cost=1.0)
        p.add_row("r1", {"x": 1.0, "y": 1.0}, ">=", 1.0)
        p.add_row("r2", {"x": 1.0, "y": 1.0}, ">=", 1.0)
        p.add_row("r3", {"x": 2.0, "y": 2.0}, ">=", 2.0)
        return p

    a = solve_lp(build())
    b = solve_lp(build())
    assert np.array_equal(a.duals, b.duals)
    assert a.objective == pytest.approx(1.0, abs=1e-12)


def test_milp_knapsack_matches_enumeration():
    # oracle: enumerate all four binary points of max 3x + 2y, x + y <= 1
    points = [(x, y) for x, y in itertools.product((0, 1), repeat=2) if x + y <= 1]
    best = min(-3 * x - 2 * y for x, y in points)
    p = LpProblem()
    p.add_var("x", hi=1.0, cost=-3.0, binary=True)
    p.add_var("y", hi=1.0, cost=-2.0, binary=True)
    p.add_row("cap", {"x": 1.0, "y": 1.0}, "<=", 1.0)
    s = solve_milp(p)
    assert s.status == "optimal"
    assert s.objective == pytest.approx(best, abs=1e-9)
    assert s.value("x") == pytest.approx(1.0, abs=1e-9)
    assert s.duals is None and s.reduced_costs is None


def test_integral_relaxation_needs_no_branching():
    # the relaxation optimum already sits on a binary vertex, so the MILP
    # must reproduce it exactly
    def build(binary):
        p = LpProblem()
        p.add_var("x", hi=1.0, cost=-1.0, binary=binary)
        p.add_var("y", hi=1.0, cost=-0.5, binary=binary)
        p.add_row("cap", {"x": 1.0}, "<=", 1.0)
        return p

    relax = solve_lp(build(False))
    s = solve_milp(build(True))
    assert s.objective == pytest.approx(relax.objective, abs=1e-9)
    assert np.allclose(s.x, relax.x, atol=1e-9)


def test_milp_never_beats_its_relaxation():
    rng = np.random.default_rng(17)
    solved = 0
    for _ in range(10):
        p = LpProblem()
        scale = np.array([1.0, 1.0, 1.0, 10.0, 10.0, 10.0])
        for j in range(6):
            p.add_var(f"x{j}", hi=scale[j], cost=float(rng.normal()))
        x0 = rng.uniform(0.0, 1.0, 6) * scale
        for i in range(4):
            a = rng.normal(size=6)
            p.add_row(f"r{i}", {j: float(a[j]) for j in range(6)}, "<=", float(a @ x0 + 0.5))
        relax = solve_lp(p)
        for j in range(3):
            p.binaries.add(j)
        mip = solve_milp(p)
        if mip.status == "optimal":
            solved += 1
            assert mip.objective >= relax.objective - 1e-9
    assert solved >= 5


def test_milp_infeasible_status():
    p = LpProblem()
    p.add_var("x", hi=1.0, cost=1.0, binary=True)
    p.add_row("need", {"x": 1.0}, ">=", 2.0)
    assert solve_milp(p).status == "infeasible"


def test_milp_without_marks_matches_lp():
    rng = np.random.default_rng(3)
    p = _random_feasible_lp(rng)
    assert solve_milp(p).objective == pytest.approx(solve_lp(p).objective, rel=1e-9)


def test_lp_rejects_binary_marks():
    p = LpProblem()
    p.add_var("x", hi=1.0, binary=True)
    with pytest.raises(ValueError):
        solve_lp(p)


def test_problem_validation():
    p = LpProblem()
    p.add_var("x")
    with pytest.raises(ValueError):
        p.add_var("x")
    with pytest.raises(ValueError):
        p.add_var("bad", lo=2.0, hi=1.0)
    with pytest.raises(ValueError):
        p.add_var("nan", cost=math.nan)
    with pytest.raises(ValueError):
        p.add_var("b", lo=-1.0, hi=1.0, binary=True)
    p.add_row("r", {"x": 1.0}, "<=", 1.0)
    with pytest.raises(ValueError):
        p.add_row("r", {"x": 1.0}, "<=", 2.0)
    with pytest.raises(ValueError):
        p.add_row("s", {"x": 1.0}, "<", 1.0)
    with pytest.raises(ValueError):
        p.add_row("t", {"x": math.inf}, "<=", 1.0)
    with pytest.raises(ValueError):
        p.add_row("u", {"x": 1.0}, "<=", math.nan)
    with pytest.raises(KeyError):
        p.add_row("v", {"missing": 1.0}, "<=", 1.0)
    with pytest.raises(ValueError):
        p.add_row("w", {99: 1.0}, "<=", 1.0)


def test_lp_text_dump(tmp_path):
    p = LpProblem("demo")
    p.add_var("gen", hi=5.0, cost=3.0)
    p.add_var("on", hi=1.0, binary=True)
    p.add_row("serve", {"gen": 1.0}, ">=", 2.0)
    p.add_row("link", {"gen": 1.0, "on": -5.0}, "<=", 0.0)
    path = tmp_path / "demo.lp"
    write_lp(p, path)
    text = path.read_text()
    for token in ("Minimize", "Subject To", "serve:", "link:", "Bounds", "Binaries", "on", "End"):
        assert token in text
