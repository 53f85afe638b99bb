"""Market clearing: constraint assembly, the three-stage pipeline, pricing,
settlement accounting and the post-clearing frequency audit."""

import numpy as np
import pytest

from vppfreq.market import (
    Boundaries,
    Ess,
    InfeasibleMarketError,
    Line,
    OfferBook,
    Reg,
    Scenario,
    Sg,
    Vpp,
    build_clearing_problem,
    build_period_surfaces,
    frequency_audit,
    scenario_without_vpps,
    settle,
    solve_pipeline,
)
from vppfreq.aggregation import AggregateVpp
from vppfreq.market import scenario_from_system
from vppfreq.models import (
    EssUnit,
    GfmEquipment,
    RegUnit,
    SgUnit,
    SmallSg,
    SystemScenario,
    TransferFunction,
    VppPortfolio,
    VppStation,
    validate_scenario,
)
from vppfreq.models import Boundaries as SysBoundaries
from vppfreq.models import Line as SysLine
from vppfreq.optkernel import complementary_slackness, duality_gap, primal_residual, solve_lp, solve_milp
from vppfreq.security import SurfaceDomain

WIDE_DOMAIN = SurfaceDomain(h_to=(10.0, 500.0), k_g=(1.0, 150.0), k_fm=(0.5, 150.0), k_vpp=(0.5, 100.0))


def base_scenario(**tweaks):
    """Two buses, two SGs, wind, storage and one aggregate over four periods."""
    T = 4
    load = (100.0, 140.0, 180.0, 120.0)
    fields = dict(
        name="toy",
        periods=T,
        dt=1.0,
        buses=(1, 2),
        ref_bus=1,
        lines=(Line(1, 2, 500.0),),
        loads={1: tuple(0.6 * l for l in load), 2: tuple(0.4 * l for l in load)},
        sgs=(
            Sg("g1", 1, 10.0, 120.0, 80.0, 40.0, 30.0),
            Sg("g2", 2, 5.0, 80.0, 60.0, 25.0, 20.0),
        ),
        regs=(Reg("w1", 2, (40.0, 35.0, 50.0, 45.0)),),
        esss=(Ess("b1", 1, 30.0, 120.0),),
        vpps=(Vpp("v1", 2, 60.0, 0.0, 0.4, 40.0, 12.0, 25.0, 30.0),),
        boundaries=Boundaries(rocof_max=0.125, f_nadir_max=0.4, qss_ref=0.25,
                              tau2=1.5, t_gv=6.0, dd_share=0.08),
        offers=OfferBook(
            energy={"g1": [32.0] * T, "g2": [35.0] * T, "w1": [5.0] * T, "b1": [14.0] * T,
                    "v1.sg": [33.0] * T, "v1.flex": [12.0] * T},
            inertia={"w1": [3.0] * T, "b1": [3.0] * T, "v1": [2.5] * T},
            droop={"w1": [4.0] * T, "b1": [4.0] * T, "v1": [3.5] * T},
        ),
        surface_domain=SurfaceDomain(h_to=(40.0, 140.0), k_g=(5.0, 60.0),
                                     k_fm=(1.0, 60.0), k_vpp=(1.0, 40.0)),
    )
    fields.update(tweaks)
    return Scenario(**fields)


@pytest.fixture(scope="module")
def base():
    scn = base_scenario()
    surfs = build_period_surfaces(scn, n_planes=12, density=4)
    return scn, surfs


@pytest.fixture(scope="module")
def base_run(base):
    scn, surfs = base
    solution, prices = solve_pipeline(scn, surfs)
    return scn, surfs, solution, prices


def test_single_unit_single_period_reduces_to_dispatch():
    scn = base_scenario(
        periods=1,
        buses=(1,),
        lines=(),
        loads={1: (80.0,)},
        sgs=(Sg("g1", 1, 10.0, 120.0, 80.0, 40.0, 30.0),),
        regs=(),
        esss=(),
        vpps=(),
        boundaries=Boundaries(0.125, 0.4, 0.25, 1.5, 6.0, 0.0),
        offers=OfferBook(energy={"g1": [32.0]}, inertia={}, droop={}),
    )
    surfs = build_period_surfaces(scn, n_planes=6, density=3)
    solution, prices = solve_pipeline(scn, surfs)
    assert solution.p_sg["g1"][0] == pytest.approx(80.0, abs=1e-8)
    assert prices.energy[1][0] == pytest.approx(32.0, abs=1e-8)
    # zero disturbance leaves every security row slack: no service value
    assert prices.sg_inertia["g1"][0] == 0.0
    assert prices.vpp_inertia[0] == 0.0
    assert prices.fm_droop[0] == 0.0
    assert solution.objective == pytest.approx(80.0 * 32.0, rel=1e-12)


def test_row_and_column_counts_match_documented_formula(base):
    scn, surfs = base
    B, G, J, K, L = len(scn.buses), len(scn.sgs), len(scn.regs), len(scn.esss), len(scn.vpps)
    P = len(surfs[0].planes)
    T = scn.periods

    def expected_rows(sced):
        total = 0
        for t in range(T):
            ramp = 2 if t > 0 else 0
            sg = (2 if sced else 4) + ramp
            total += B + 3 + P + G * sg + J + 2 * K + L * (6 + ramp)
        return total

    scuc = build_clearing_problem(scn, surfs, "scuc")
    relax = build_clearing_problem(scn, surfs, "continuous_scuc")
    assert scuc.n_rows == relax.n_rows == expected_rows(sced=False)
    assert scuc.n_vars == relax.n_vars == T * (B + 4 * G + 3 * J + 4 * K + 5 * L)

    uc = solve_pipeline(scn, surfs)[0].uc
    sced = build_clearing_problem(scn, surfs, "sced", fixed_uc=uc)
    assert sced.n_rows == expected_rows(sced=True)
    assert sced.n_vars == T * (B + 2 * G + 3 * J + 4 * K + 5 * L)


def test_relaxation_objective_never_above_commitment(base):
    scn, surfs = base
    mip = solve_milp(build_clearing_problem(scn, surfs, "scuc"))
    lp = solve_lp(build_clearing_problem(scn, surfs, "continuous_scuc"))
    assert lp.status == mip.status == "optimal"
    assert lp.objective <= mip.objective + 1e-9 * (1.0 + abs(mip.objective))


def test_dispatch_with_fixed_commitment_matches_commitment_objective(base, base_run):
    scn, surfs = base
    _, _, solution, _ = base_run
    mip = solve_milp(build_clearing_problem(scn, surfs, "scuc"))
    assert solution.objective == pytest.approx(mip.objective, abs=1e-6)


def test_clearing_lps_carry_tight_optimality_certificates(base, base_run):
    scn, surfs = base
    _, _, solution, _ = base_run
    for problem in (
        build_clearing_problem(scn, surfs, "continuous_scuc"),
        build_clearing_problem(scn, surfs, "sced", fixed_uc=solution.uc),
    ):
        sol = solve_lp(problem)
        assert sol.status == "optimal"
        assert duality_gap(problem, sol) <= 1e-8
        assert complementary_slackness(problem, sol) <= 1e-8
        assert primal_residual(problem, sol.x) <= 1e-8


def test_nodal_balance_residual_below_microwatt(base_run):
    scn, _, solution, _ = base_run
    flows = {n: np.zeros(scn.periods) for n in scn.buses}
    for ln in scn.lines:
        f = ln.susceptance * (solution.theta[ln.from_bus] - solution.theta[ln.to_bus])
        flows[ln.from_bus] += f
        flows[ln.to_bus] -= f
    for n in scn.buses:
        inj = np.zeros(scn.periods)
        for g in scn.sgs:
            if g.bus == n:
                inj += solution.p_sg[g.name]
        for r in scn.regs:
            if r.bus == n:
                inj += solution.p_reg[r.name]
        for e in scn.esss:
            if e.bus == n:
                inj += solution.p_ess[e.name]
        for v in scn.vpps:
            if v.bus == n:
                inj += solution.p_vppg[v.name] + solution.p_vppr[v.name]
        residual = inj - np.asarray(scn.loads[n]) - flows[n]
        assert np.max(np.abs(residual)) <= 1e-6


def test_settlement_reproduces_system_cost_exactly(base_run):
    scn, _, solution, prices = base_run
    report = settle(solution, prices, scn)
    assert sum(ln.cost for ln in report.lines) == pytest.approx(report.system_cost, abs=1e-6)
    assert report.system_cost == pytest.approx(solution.objective, abs=1e-9)
    for ln in report.lines:
        if ln.quantity == 0.0:
            assert ln.cost == 0.0 and ln.revenue == 0.0


def test_marginal_unit_earns_zero_energy_profit():
    scn = base_scenario(
        periods=2,
        buses=(1,),
        lines=(),
        loads={1: (80.0, 90.0)},
        sgs=(Sg("g1", 1, 10.0, 120.0, 80.0, 40.0, 30.0),),
        regs=(),
        esss=(),
        vpps=(),
        boundaries=Boundaries(0.125, 0.4, 0.25, 1.5, 6.0, 0.0),
        offers=OfferBook(energy={"g1": [32.0, 32.0]}, inertia={}, droop={}),
    )
    surfs = build_period_surfaces(scn, n_planes=6, density=3)
    solution, prices = solve_pipeline(scn, surfs)
    report = settle(solution, prices, scn)
    energy_line = next(ln for ln in report.lines if ln.provider == "g1" and ln.service == "energy")
    assert energy_line.profit == pytest.approx(0.0, abs=1e-7)


def test_abundant_capacity_zeroes_every_service_price():
    scn = base_scenario(boundaries=Boundaries(rocof_max=10.0, f_nadir_max=50.0, qss_ref=30.0,
                                              tau2=1.5, t_gv=6.0, dd_share=0.001))
    surfs = build_period_surfaces(scn, n_planes=8, density=3)
    _, prices = solve_pipeline(scn, surfs)
    for g in ("g1", "g2"):
        assert np.all(prices.sg_inertia[g] == 0.0)
        assert np.all(prices.sg_droop[g] == 0.0)
    assert np.all(prices.vpp_inertia == 0.0)
    assert np.all(prices.vpp_droop == 0.0)
    assert np.all(prices.fm_inertia == 0.0)
    assert np.all(prices.fm_droop == 0.0)


def scarcity_scenario(pure_slope=False):
    """Single bus where covering the initial-slope bound needs an expensive unit.

    g1 carries the load cheaply but has little inertia; g2 is costly with a
    large machine, so the relaxation commits just enough of it to cover the
    slope bound and the bound prices out positive. With pure_slope the nadir
    and settling boundaries are slack by construction, isolating the slope
    bound as the only reason to commit g2.
    """
    T = 3
    bounds = Boundaries(rocof_max=0.125, f_nadir_max=30.0, qss_ref=2.0,
                        tau2=1.5, t_gv=6.0, dd_share=0.5) if pure_slope else \
        Boundaries(rocof_max=0.125, f_nadir_max=1.5, qss_ref=0.6,
                   tau2=1.5, t_gv=6.0, dd_share=0.5)
    return base_scenario(
        periods=T,
        buses=(1,),
        lines=(),
        loads={1: (80.0, 85.0, 75.0)},
        sgs=(
            Sg("g1", 1, 5.0, 120.0, 120.0, 20.0, 60.0),
            Sg("g2", 1, 10.0, 50.0, 50.0, 200.0, 30.0),
        ),
        regs=(Reg("w1", 1, (30.0, 30.0, 30.0)),),
        esss=(),
        vpps=(Vpp("v1", 1, 40.0, 0.0, 0.1, 40.0, 1.0, 20.0, 25.0),),
        boundaries=bounds,
        offers=OfferBook(
            energy={"g1": [30.0] * T, "g2": [100.0] * T, "w1": [5.0] * T,
                    "v1.sg": [33.0] * T, "v1.flex": [12.0] * T},
            inertia={"w1": [3.0] * T, "v1": [2.5] * T},
            droop={"w1": [4.0] * T, "v1": [3.5] * T},
        ),
        surface_domain=WIDE_DOMAIN,
    )


def test_inertia_scarcity_prices_the_slope_bound():
    scn = scarcity_scenario(pure_slope=True)
    surfs = build_period_surfaces(scn, n_planes=10, density=4)
    solution, prices = solve_pipeline(scn, surfs)
    relax = solve_lp(build_clearing_problem(scn, surfs, "continuous_scuc"))
    for t in range(scn.periods):
        lam_in = relax.dual(f"rocof[{t}]")
        assert lam_in > 1e-6
        assert prices.vpp_inertia[t] >= lam_in - 1e-9
        # the bound itself is tight in the relaxation
        h_gv = sum(relax.value(f"x[{g.name},{t}]") * g.inertia for g in scn.sgs)
        h_gv += sum(relax.value(f"xv[{v.name},{t}]") * v.h_sg for v in scn.vpps)
        assert h_gv == pytest.approx(scn.dd(t) / (2.0 * scn.boundaries.rocof_max), abs=1e-6)
    assert frequency_audit(solution, scn).passed


def test_positive_aggregate_inertia_price_implies_binding_row():
    scn = scarcity_scenario()
    surfs = build_period_surfaces(scn, n_planes=10, density=4)
    _, prices = solve_pipeline(scn, surfs)
    relax = solve_lp(build_clearing_problem(scn, surfs, "continuous_scuc"))
    for t in range(scn.periods):
        if prices.vpp_inertia[t] <= 1e-9:
            continue
        binding = relax.dual(f"rocof[{t}]") > 1e-9
        binding = binding or any(
            relax.dual(f"nadir[{hp},{t}]") > 1e-9 for hp in range(len(surfs[t].planes))
        )
        assert binding


def test_offline_unit_inertia_price_is_masked_to_zero():
    scn = scarcity_scenario()
    # a third machine nobody needs: tiny, expensive, with a must-run floor
    scn.sgs = scn.sgs + (Sg("g3", 1, 20.0, 30.0, 30.0, 5.0, 5.0),)
    scn.offers.energy["g3"] = [500.0] * scn.periods
    surfs = build_period_surfaces(scn, n_planes=10, density=4)
    solution, prices = solve_pipeline(scn, surfs)
    assert np.all(solution.uc.x["g3"] == 0.0)
    assert np.all(prices.sg_inertia["g3"] == 0.0)
    assert np.all(prices.sg_droop["g3"] == 0.0)
    # while the scarce system still prices inertia for the committed units
    assert np.any(prices.sg_inertia["g1"] > 1e-6)


def test_binding_settling_row_reproduces_reference_offset():
    T = 3
    scn = base_scenario(
        periods=T,
        buses=(1,),
        lines=(),
        loads={1: (100.0, 110.0, 95.0)},
        sgs=(Sg("g1", 1, 5.0, 150.0, 120.0, 60.0, 10.0),),
        regs=(Reg("w1", 1, (200.0, 200.0, 200.0)),),
        esss=(Ess("b1", 1, 60.0, 240.0),),
        vpps=(Vpp("v1", 1, 40.0, 0.0, 0.1, 40.0, 1.0, 20.0, 200.0),),
        boundaries=Boundaries(rocof_max=0.5, f_nadir_max=5.0, qss_ref=0.25,
                              tau2=1.5, t_gv=6.0, dd_share=0.1),
        offers=OfferBook(
            energy={"g1": [30.0] * T, "w1": [5.0] * T, "b1": [14.0] * T,
                    "v1.sg": [33.0] * T, "v1.flex": [12.0] * T},
            inertia={"w1": [3.0] * T, "b1": [3.0] * T, "v1": [2.5] * T},
            droop={"w1": [4.0] * T, "b1": [4.0] * T, "v1": [3.5] * T},
        ),
        surface_domain=WIDE_DOMAIN,
    )
    surfs = build_period_surfaces(scn, n_planes=8, density=4)
    solution, _ = solve_pipeline(scn, surfs)
    report = frequency_audit(solution, scn, ode_check=True)
    assert report.passed
    for rec in report.records:
        total_droop = (solution.k_g[rec.period] + solution.k_fm[rec.period]
                       + solution.k_vpp_total[rec.period])
        if abs(total_droop - rec.dd / scn.boundaries.qss_ref) <= 1e-6:
            assert rec.qss == pytest.approx(scn.boundaries.qss_ref, abs=1e-6)
    # droop is costly, so the settling row binds somewhere in this setup
    assert any(
        abs(solution.k_g[t] + solution.k_fm[t] + solution.k_vpp_total[t]
            - scn.dd(t) / scn.boundaries.qss_ref) <= 1e-6
        for t in range(scn.periods)
    )


def test_audit_uses_cleared_mix_and_ode_twin_agrees(base_run):
    scn, _, solution, _ = base_run
    report = frequency_audit(solution, scn, ode_check=True)
    assert report.passed and not report.violations
    for rec in report.records:
        assert rec.ode_nadir == pytest.approx(rec.nadir, abs=2e-3)
        assert rec.rocof <= scn.boundaries.rocof_max + 1e-9
        assert rec.qss <= scn.boundaries.qss_ref + 1e-9


def test_zero_disturbance_period_trivially_passes_audit():
    scn = base_scenario(boundaries=Boundaries(0.125, 0.4, 0.25, 1.5, 6.0, 0.0))
    surfs = build_period_surfaces(scn, n_planes=6, density=3)
    solution, _ = solve_pipeline(scn, surfs)
    report = frequency_audit(solution, scn)
    assert report.passed
    assert all(r.dd == 0.0 for r in report.records)


def test_commitment_schedule_is_flip_consistent():
    T = 4
    scn = base_scenario(
        periods=T,
        buses=(1,),
        lines=(),
        loads={1: (200.0, 90.0, 200.0, 200.0)},
        sgs=(
            Sg("g1", 1, 10.0, 120.0, 200.0, 40.0, 30.0),
            Sg("g2", 1, 20.0, 100.0, 200.0, 30.0, 25.0),
        ),
        regs=(),
        esss=(),
        vpps=(),
        boundaries=Boundaries(0.125, 0.4, 0.25, 1.5, 6.0, 0.02),
        offers=OfferBook(energy={"g1": [30.0] * T, "g2": [80.0] * T}, inertia={}, droop={}),
        surface_domain=WIDE_DOMAIN,
    )
    surfs = build_period_surfaces(scn, n_planes=6, density=3)
    solution, _ = solve_pipeline(scn, surfs)
    uc = solution.uc
    flips = 0
    for g in scn.sgs:
        prev = 0.0
        for t in range(T):
            delta = uc.x[g.name][t] - prev
            assert delta == pytest.approx(uc.y_su[g.name][t] - uc.y_sd[g.name][t], abs=1e-9)
            assert uc.y_su[g.name][t] * uc.y_sd[g.name][t] == 0.0
            flips += int(uc.y_su[g.name][t] + uc.y_sd[g.name][t] > 0 and t > 0)
            prev = uc.x[g.name][t]
    assert flips >= 2  # the load dip forces the expensive unit off and back on


def test_doubled_offers_double_prices_but_not_dispatch(base):
    scn, surfs = base
    sol1, pr1 = solve_pipeline(scn, surfs)
    doubled = base_scenario(offers=OfferBook(
        energy={k: [2.0 * c for c in v] for k, v in scn.offers.energy.items()},
        inertia={k: [2.0 * c for c in v] for k, v in scn.offers.inertia.items()},
        droop={k: [2.0 * c for c in v] for k, v in scn.offers.droop.items()},
    ))
    sol2, pr2 = solve_pipeline(doubled, surfs)
    assert sol2.objective == pytest.approx(2.0 * sol1.objective, rel=1e-9)
    for g in ("g1", "g2"):
        np.testing.assert_allclose(sol2.p_sg[g], sol1.p_sg[g], atol=1e-7)
        np.testing.assert_allclose(pr2.sg_inertia[g], 2.0 * pr1.sg_inertia[g], atol=1e-7)
    np.testing.assert_allclose(sol2.p_vppg["v1"], sol1.p_vppg["v1"], atol=1e-7)
    for n in scn.buses:
        np.testing.assert_allclose(pr2.energy[n], 2.0 * pr1.energy[n], atol=1e-7)
    np.testing.assert_allclose(pr2.vpp_droop, 2.0 * pr1.vpp_droop, atol=1e-7)
    np.testing.assert_allclose(pr2.fm_inertia, 2.0 * pr1.fm_inertia, atol=1e-7)


def test_pipeline_is_deterministic(base):
    scn, surfs = base
    sol1, pr1 = solve_pipeline(scn, surfs)
    sol2, pr2 = solve_pipeline(scn, surfs)
    assert sol1.objective == sol2.objective
    for name in sol1.p_sg:
        assert np.array_equal(sol1.p_sg[name], sol2.p_sg[name])
    for name in sol1.k_vpp:
        assert np.array_equal(sol1.k_vpp[name], sol2.k_vpp[name])
    for n in pr1.energy:
        assert np.array_equal(pr1.energy[n], pr2.energy[n])
    assert np.array_equal(pr1.vpp_inertia, pr2.vpp_inertia)


def test_overload_names_first_period_and_family():
    scn = base_scenario(loads={1: (60.0, 84.0, 600.0, 72.0), 2: (40.0, 56.0, 400.0, 48.0)})
    surfs = build_period_surfaces(scn, n_planes=6, density=3)
    with pytest.raises(InfeasibleMarketError) as err:
        solve_pipeline(scn, surfs)
    assert err.value.period == 2
    assert err.value.family == "bal"
    assert "period 2" in str(err.value)


def test_counterfactual_removes_aggregates_but_keeps_capacity(base):
    scn, _ = base
    cf = scenario_without_vpps(scn)
    cf.validate()
    assert cf.vpps == ()
    before = sum(g.p_max for g in scn.sgs) + sum(v.p_max for v in scn.vpps)
    assert sum(g.p_max for g in cf.sgs) == pytest.approx(before)
    # scaled machines keep their inertia and droop per MW
    for old, new in zip(scn.sgs, cf.sgs):
        assert new.inertia / new.p_max == pytest.approx(old.inertia / old.p_max)
        assert new.p_min == old.p_min
    assert all("." not in k for k in cf.offers.energy)
    assert "v1" not in cf.offers.inertia and "v1" not in cf.offers.droop


def test_scenario_validation_rejects_bad_inputs():
    with pytest.raises(ValueError, match="missing the energy row"):
        base_scenario(offers=OfferBook(energy={}, inertia={}, droop={})).validate()
    bad = base_scenario()
    bad.offers.energy["g1"] = [-1.0] * bad.periods
    with pytest.raises(ValueError, match="nonnegative"):
        bad.validate()
    with pytest.raises(ValueError, match="unknown bus"):
        base_scenario(loads={1: (1.0,) * 4, 9: (1.0,) * 4}).validate()
    with pytest.raises(ValueError, match="reference bus"):
        base_scenario(ref_bus=7).validate()
    with pytest.raises(ValueError, match="p_min <= p_max"):
        base_scenario(sgs=(Sg("g1", 1, 50.0, 20.0, 10.0, 5.0, 5.0),)).validate()


def test_mismatched_surfaces_are_rejected(base):
    scn, surfs = base
    with pytest.raises(ValueError, match="one surface per period"):
        build_clearing_problem(scn, surfs[:-1], "scuc")
    shifted = base_scenario(boundaries=Boundaries(0.125, 0.4, 0.25, 1.5, 6.0, 0.16))
    with pytest.raises(ValueError, match="disturbance"):
        build_clearing_problem(shifted, surfs, "scuc")
    with pytest.raises(ValueError, match="mode"):
        build_clearing_problem(scn, surfs, "dispatch")
    with pytest.raises(ValueError, match="fixed commitment"):
        build_clearing_problem(scn, surfs, "sced")


def _single_bus_pair(loads, g2, T):
    return base_scenario(
        periods=T,
        buses=(1,),
        lines=(),
        loads={1: loads},
        sgs=(Sg("g1", 1, 10.0, 120.0, 200.0, 40.0, 30.0), g2),
        regs=(),
        esss=(),
        vpps=(),
        boundaries=Boundaries(0.125, 0.4, 0.25, 1.5, 6.0, 0.0),
        offers=OfferBook(energy={"g1": [30.0] * T, "g2": [100.0] * T}, inertia={}, droop={}),
    )


def test_min_up_rule_keeps_started_unit_online():
    # one expensive period needs g2; the rule then holds it on at p_min
    loads = (100.0, 140.0, 100.0, 100.0, 100.0, 100.0)
    free_scn = _single_bus_pair(loads, Sg("g2", 1, 10.0, 50.0, 50.0, 30.0, 25.0), T=6)
    scn = _single_bus_pair(loads, Sg("g2", 1, 10.0, 50.0, 50.0, 30.0, 25.0, min_up=3), T=6)
    surfs = build_period_surfaces(scn, n_planes=6, density=3)
    free, _ = solve_pipeline(free_scn, surfs)
    assert np.sum(free.uc.x["g2"]) == 1.0  # without the rule: on for the spike only
    solution, _ = solve_pipeline(scn, surfs)
    x = solution.uc.x["g2"]
    assert x[1] == 1.0 and np.sum(x) == 3.0
    on = np.flatnonzero(x)
    assert on[-1] - on[0] == 2  # one contiguous three-period block
    # the extra held periods run at the minimum output
    assert all(solution.p_sg["g2"][t] == pytest.approx(10.0, abs=1e-7) for t in on if t != 1)
    problem = build_clearing_problem(scn, surfs, "scuc")
    assert any(r.name.startswith("minup[") for r in problem.rows)
    sced = build_clearing_problem(scn, surfs, "sced", fixed_uc=solution.uc)
    assert not any(r.name.startswith("minup[") for r in sced.rows)


def test_min_down_rule_blocks_shutdown_through_a_dip():
    loads = (140.0, 100.0, 140.0)
    unruly = _single_bus_pair(loads, Sg("g2", 1, 10.0, 50.0, 50.0, 30.0, 25.0), T=3)
    ruled = _single_bus_pair(loads, Sg("g2", 1, 10.0, 50.0, 50.0, 30.0, 25.0, min_down=3), T=3)
    surfs = build_period_surfaces(unruly, n_planes=6, density=3)
    free, _ = solve_pipeline(unruly, surfs)
    held, _ = solve_pipeline(ruled, surfs)
    np.testing.assert_array_equal(free.uc.x["g2"], [1, 0, 1])
    # restarting at t=2 would break the rule, so the dip cannot shed the unit
    np.testing.assert_array_equal(held.uc.x["g2"], [1, 1, 1])
    assert held.objective > free.objective


def test_reserve_caps_bound_grid_forming_allocations():
    T = 2
    def scn_with(k_max):
        return base_scenario(
            periods=T,
            buses=(1,),
            lines=(),
            loads={1: (100.0, 100.0)},
            sgs=(Sg("g1", 1, 5.0, 150.0, 120.0, 60.0, 10.0),),
            regs=(Reg("w1", 1, (200.0, 200.0), h_max=5.0, k_max=k_max),),
            esss=(),
            vpps=(Vpp("v1", 1, 40.0, 0.0, 0.1, 40.0, 1.0, 20.0, 400.0),),
            boundaries=Boundaries(rocof_max=0.5, f_nadir_max=5.0, qss_ref=0.25,
                                  tau2=1.5, t_gv=6.0, dd_share=0.1),
            offers=OfferBook(
                energy={"g1": [30.0] * T, "w1": [5.0] * T, "v1.sg": [33.0] * T,
                        "v1.flex": [12.0] * T},
                inertia={"w1": [3.0] * T, "v1": [2.5] * T},
                droop={"w1": [4.0] * T, "v1": [30.0] * T},
            ),
            surface_domain=WIDE_DOMAIN,
        )

    open_scn = scn_with(k_max=np.inf)
    surfs = build_period_surfaces(open_scn, n_planes=8, density=4)
    free, _ = solve_pipeline(open_scn, surfs)
    assert np.all(free.k_reg["w1"] > 2.0)  # cheap droop does the settling work

    capped_scn = scn_with(k_max=2.0)
    problem = build_clearing_problem(capped_scn, surfs, "scuc")
    assert problem.upper[problem.col_index["hr[w1,0]"]] == 5.0
    assert problem.upper[problem.col_index["kr[w1,1]"]] == 2.0
    capped, _ = solve_pipeline(capped_scn, surfs)
    assert np.all(capped.k_reg["w1"] <= 2.0 + 1e-9)
    # the shortfall moves to the aggregate, which still meets the boundary
    assert np.all(capped.k_vpp["v1"] >= free.k_vpp["v1"] - 1e-9)
    assert frequency_audit(capped, capped_scn).passed


def small_system(**tweaks):
    """Three-bus system description with one station, for normalization tests."""
    portfolio = VppPortfolio(
        name="vpp1",
        units=[
            SmallSg(10.0, 6.0, 6.0, 8.0, 0.3, 0.3, 3.0),
            GfmEquipment(8.0, 5.0, 0.05, 2.5),
        ],
        s_sys=25.0,
        p_in_max=4.0,
        p_df_max=10.0,
        ramp_small_sg=10.0,
    )
    fields = dict(
        name="mini",
        f0=50.0,
        dt_hours=1.0,
        n_buses=3,
        ref_bus=0,
        lines=[SysLine(0, 1, 400.0), SysLine(1, 2, 350.0)],
        load=np.array([
            [30.0, 36.0, 33.0],
            [40.0, 48.0, 44.0],
            [30.0, 36.0, 33.0],
        ]),
        sgs=[
            SgUnit("sg1", 0, 10.0, 90.0, 60.0, 45.0, 30.0, 6.0, 31.0),
            SgUnit("sg2", 1, 5.0, 60.0, 40.0, 30.0, 20.0, 6.0, 34.0, min_up=2),
        ],
        regs=[RegUnit("w1", 2, "wind", 40.0, 6.0, 9.0, 5.0, 3.0, 4.0)],
        reg_avail=np.array([[30.0, 25.0, 35.0]]),
        esss=[EssUnit("b1", 1, 25.0, 100.0, 0.5, 0.1, 0.9, 0.95, 5.0, 8.0, 14.0, 3.0, 4.0)],
        vpps=[VppStation(portfolio, 2, 33.0, 12.0, 2.5, 3.5)],
        tau1=0.5,
        tau2=1.5,
        boundaries=SysBoundaries(0.125, 0.4, 0.25),
        surface_domain={"h_to": [40.0, 160.0], "k_g": [5.0, 60.0],
                        "k_fm": [1.0, 60.0], "k_vpp": [1.0, 40.0]},
    )
    fields.update(tweaks)
    return SystemScenario(**fields)


def small_aggregates():
    return {"vpp1": AggregateVpp("vpp1", h_vppg=1.2, h_vppr=0.8,
                                 g_vpp=TransferFunction((9.0,), (1.0, 0.8)),
                                 delayed_droop_share=0.45, tau1=0.5, tau2=1.5)}


def test_system_layer_normalizes_into_clearing_scenario():
    system = small_system()
    assert validate_scenario(system) == []
    scn = scenario_from_system(system, small_aggregates())
    scn.validate()

    assert scn.buses == (0, 1, 2) and scn.ref_bus == 0
    assert scn.loads[1] == (40.0, 48.0, 44.0)
    assert [ln.susceptance for ln in scn.lines] == [400.0, 350.0]
    # scalar unit costs broadcast to one offer row per period
    assert scn.offers.energy["sg1"] == (31.0, 31.0, 31.0)
    assert scn.offers.energy["vpp1.sg"] == (33.0,) * 3
    assert scn.offers.energy["vpp1.flex"] == (12.0,) * 3
    assert scn.offers.inertia["vpp1"] == (2.5,) * 3
    assert scn.offers.droop["b1"] == (4.0,) * 3
    # unit capabilities and rules carry over
    g2 = next(g for g in scn.sgs if g.name == "sg2")
    assert (g2.min_up, g2.min_down) == (2, 1)
    w1 = scn.regs[0]
    assert w1.availability == (30.0, 25.0, 35.0)
    assert (w1.h_max, w1.k_max) == (6.0, 9.0)
    # the station inherits the portfolio boxes and the fitted governed inertia
    v1 = scn.vpps[0]
    assert v1.sg_share == pytest.approx(10.0 / 18.0)
    assert v1.p_max == pytest.approx(18.0)  # defaults to summed unit ratings
    assert v1.h_sg == 1.2
    assert (v1.p_inertia_max, v1.p_droop_max) == (4.0, 10.0)
    assert v1.ramp == 10.0
    b = scn.boundaries
    assert (b.f_nadir_max, b.tau2, b.t_gv, b.dd_share) == (0.4, 1.5, 6.0, 0.08)
    assert scn.surface_domain.h_to == (40.0, 160.0)

    surfs = build_period_surfaces(scn, n_planes=8, density=3)
    solution, prices = solve_pipeline(scn, surfs)
    assert frequency_audit(solution, scn).passed
    report = settle(solution, prices, scn)
    assert report.system_cost == pytest.approx(solution.objective, abs=1e-9)


def test_system_normalization_rejects_inconsistent_inputs():
    aggs = small_aggregates()
    with pytest.raises(ValueError, match="governor time"):
        scenario_from_system(small_system(sgs=[
            SgUnit("sg1", 0, 10.0, 90.0, 60.0, 45.0, 30.0, 6.0, 31.0),
            SgUnit("sg2", 1, 5.0, 60.0, 40.0, 30.0, 20.0, 7.0, 34.0),
        ]), aggs)
    with pytest.raises(ValueError, match="at least one independent generator"):
        scenario_from_system(small_system(sgs=[]), aggs)
    with pytest.raises(ValueError, match="no fitted aggregate"):
        scenario_from_system(small_system(), {})
    with pytest.raises(ValueError, match="missing the 'k_vpp' range"):
        scenario_from_system(small_system(surface_domain={
            "h_to": [40.0, 160.0], "k_g": [5.0, 60.0], "k_fm": [1.0, 60.0]}), aggs)
    bare = scenario_from_system(small_system(surface_domain={}), aggs)
    assert bare.surface_domain is None
