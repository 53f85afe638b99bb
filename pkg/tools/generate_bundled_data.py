#!/usr/bin/env python3
"""Generate the bundled 30-bus dataset: scenario, profiles and fitted aggregates.

Deterministic end to end (fixed seeds) and self-checking: artifacts are only
written after the scenario validates, the fitted reduced models meet the
accuracy gates, the clearing pipeline solves, the post-clearing frequency
audit passes, and the published 20-plane nadir surface is conservative with
a small worst-case gap. The published surface domain is sized from measured
operating envelopes (two sizing passes), with the droop axes extending to
zero so low-procurement periods stay inside the validated box.

Run from the repository root:

    python3 tools/generate_bundled_data.py [--out src/vppfreq/data/ieee30]
"""

import argparse
import math
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from vppfreq.aggregation import (
    FitConfig,
    assemble_heterogeneous,
    evaluate_mape,
    fit_reduced_model,
)
from vppfreq.io import load_aggregates, load_scenario, save_aggregates, save_scenario
from vppfreq.market import (
    build_period_surfaces,
    frequency_audit,
    scenario_from_system,
    scenario_without_vpps,
    settle,
    solve_pipeline,
)
from vppfreq.models import (
    Boundaries,
    EssUnit,
    EvCluster,
    FlexibleLoad,
    GfmEquipment,
    Line,
    RegUnit,
    SgUnit,
    SmallSg,
    SystemScenario,
    VppPortfolio,
    VppStation,
    validate_scenario,
)
from vppfreq.security import closed_form_nadir

SEED = 30
N_PLANES = 20
GAP_LIMIT = 0.01  # Hz, published-surface tightness gate
BASE_MVA = 100.0

# 30-bus network: branch list as (from, to, series reactance in p.u.);
# DC susceptance is BASE_MVA / x in MW per radian. Bus numbers are 1-based
# here and shifted to 0-based when the scenario is assembled.
BRANCHES = [
    (1, 2, 0.0575), (1, 3, 0.1652), (2, 4, 0.1737), (3, 4, 0.0379),
    (2, 5, 0.1983), (2, 6, 0.1763), (4, 6, 0.0414), (5, 7, 0.1160),
    (6, 7, 0.0820), (6, 8, 0.0420), (6, 9, 0.2080), (6, 10, 0.5560),
    (9, 11, 0.2080), (9, 10, 0.1100), (4, 12, 0.2560), (12, 13, 0.1400),
    (12, 14, 0.2559), (12, 15, 0.1304), (12, 16, 0.1987), (14, 15, 0.1997),
    (16, 17, 0.1923), (15, 18, 0.2185), (18, 19, 0.1292), (19, 20, 0.0680),
    (10, 20, 0.2090), (10, 17, 0.0845), (10, 21, 0.0749), (10, 22, 0.1499),
    (21, 22, 0.0236), (15, 23, 0.2020), (22, 24, 0.1790), (23, 24, 0.2700),
    (24, 25, 0.3292), (25, 26, 0.3800), (25, 27, 0.2087), (28, 27, 0.3960),
    (27, 29, 0.4153), (27, 30, 0.6027), (29, 30, 0.4533), (8, 28, 0.2000),
    (6, 28, 0.0599),
]

# nominal bus demand (MW) distributed over the 21 load buses; the hourly
# profile scales this pattern so every bus keeps its share of system load
BUS_DEMAND = {
    2: 21.7, 3: 2.4, 4: 7.6, 5: 94.2, 7: 22.8, 8: 30.0, 10: 5.8, 12: 11.2,
    14: 6.2, 15: 8.2, 16: 3.5, 17: 9.0, 18: 3.2, 19: 9.5, 20: 2.2, 21: 17.5,
    23: 3.2, 24: 8.7, 26: 3.5, 29: 2.4, 30: 10.6,
}

# station mixes in MW per DER kind: (small_sg, gfm, ev, flex_load)
VPP_MIXES = {
    "vpp1": (30.0, 35.0, 5.0, 10.0),
    "vpp2": (26.0, 18.0, 10.0, 8.0),
    "vpp3": (32.0, 23.0, 5.0, 10.0),
}
VPP_BUSES = {"vpp1": 7, "vpp2": 15, "vpp3": 21}  # 1-based


def hourly_profiles(rng):
    """System load (two evening-heavy peaks), wind and solar capacity factors."""
    t = np.arange(24, dtype=float)
    load = (260.0
            + 90.0 * np.exp(-(((t - 8.5) / 2.5) ** 2))
            + 160.0 * np.exp(-(((t - 18.5) / 2.2) ** 2)))
    wind_cf = 0.45 + 0.3 * np.sin(2.0 * np.pi * (t + 2.0) / 24.0)
    wind_cf = np.clip(wind_cf + rng.uniform(-0.06, 0.06, 24), 0.12, 0.8)
    pv_cf = np.exp(-(((t - 12.75) / 3.4) ** 2))
    pv_cf[pv_cf < 0.02] = 0.0
    return load, wind_cf, pv_cf


def split_block(total, pieces, rng):
    """Split a MW block into unequal unit ratings summing exactly to total."""
    if pieces == 1:
        return [total]
    w = rng.uniform(0.8, 1.2, pieces)
    parts = total * w / w.sum()
    parts[-1] = total - parts[:-1].sum()
    return [float(p) for p in parts]


def build_portfolio(name, mix, rng):
    sg_mw, gfm_mw, ev_mw, fl_mw = mix
    units = []
    for s in split_block(sg_mw, 2, rng):
        units.append(SmallSg(
            s_rated=s,
            k_g=float(rng.uniform(0.5, 0.8) * s),
            t_g=float(rng.uniform(4.0, 8.0)),
            t_r=float(rng.uniform(6.0, 10.0)),
            t_c=float(rng.uniform(0.3, 0.5)),
            f_h=float(rng.uniform(0.25, 0.35)),
            h_g=float(rng.uniform(0.25, 0.45) * s),
        ))
    for s in split_block(gfm_mw, 2, rng):
        units.append(GfmEquipment(
            s_rated=s,
            k_fm=float(rng.uniform(0.5, 0.7) * s),
            t_fm=float(rng.uniform(0.03, 0.08)),
            h_fm=float(rng.uniform(0.2, 0.4) * s),
            tau1=0.5,
        ))
    units.append(EvCluster(
        s_rated=ev_mw,
        k_ev=float(rng.uniform(0.4, 0.6) * ev_mw),
        t_ev=float(rng.uniform(0.25, 0.45)),
    ))
    units.append(FlexibleLoad(
        s_rated=fl_mw,
        k_fl=float(rng.uniform(0.4, 0.6) * fl_mw),
        t_fl=float(rng.uniform(0.08, 0.15)),
        t_a=float(rng.uniform(40.0, 80.0)),
        phi_a=float(rng.uniform(0.7, 0.9)),
        c_factor=float(rng.uniform(0.8, 1.0)),
    ))
    s_sys = float(sum(u.s_rated for u in units))
    return VppPortfolio(name=name, units=units, s_sys=s_sys,
                        ramp_small_sg=float(sg_mw))


def build_system(domain):
    rng = np.random.default_rng(SEED)
    load_profile, wind_cf, pv_cf = hourly_profiles(rng)

    weights = np.zeros(30)
    for bus, mw in BUS_DEMAND.items():
        weights[bus - 1] = mw
    weights /= weights.sum()
    load = np.outer(weights, load_profile)

    sg_spec = [  # bus (1-based), p_min, p_max, ramp, H, k
        ("sg1", 1, 20.0, 90.0, 45.0, 50.0, 34.0),
        ("sg2", 2, 15.0, 70.0, 35.0, 40.0, 28.0),
        ("sg3", 22, 12.0, 60.0, 30.0, 32.0, 22.0),
        ("sg4", 27, 8.0, 40.0, 25.0, 22.0, 16.0),
    ]
    sgs = [
        SgUnit(name, bus - 1, p_min, p_max, ramp, h, k, t_g=6.0,
               cost_energy=float(rng.uniform(30.0, 35.0)),
               min_up=2 if name == "sg1" else 1,
               min_down=2 if name == "sg1" else 1)
        for name, bus, p_min, p_max, ramp, h, k in sg_spec
    ]

    regs = [
        RegUnit("wind1", 4, "wind", 110.0, h_max=55.0, k_max=66.0,
                cost_energy=float(rng.uniform(4.0, 6.0)),
                cost_inertia=float(rng.uniform(2.0, 4.0)),
                cost_droop=float(rng.uniform(3.0, 5.0))),
        RegUnit("pv1", 9, "pv", 160.0, h_max=80.0, k_max=96.0,
                cost_energy=float(rng.uniform(4.0, 6.0)),
                cost_inertia=float(rng.uniform(2.0, 4.0)),
                cost_droop=float(rng.uniform(3.0, 5.0))),
        RegUnit("pv2", 23, "pv", 160.0, h_max=80.0, k_max=96.0,
                cost_energy=float(rng.uniform(4.0, 6.0)),
                cost_inertia=float(rng.uniform(2.0, 4.0)),
                cost_droop=float(rng.uniform(3.0, 5.0))),
    ]
    reg_avail = np.vstack([110.0 * wind_cf, 160.0 * pv_cf, 160.0 * pv_cf])

    esss = [EssUnit("ess1", 7, p_max=50.0, e_cap=200.0, soc0=0.5, soc_min=0.1,
                    soc_max=0.9, eta=0.95, h_max=25.0, k_max=30.0,
                    cost_energy=float(rng.uniform(12.0, 16.0)),
                    cost_inertia=float(rng.uniform(2.0, 4.0)),
                    cost_droop=float(rng.uniform(3.0, 5.0)))]

    vpps = []
    for name, mix in VPP_MIXES.items():
        vpps.append(VppStation(
            portfolio=build_portfolio(name, mix, rng),
            bus=VPP_BUSES[name] - 1,
            cost_energy_sg=float(rng.uniform(32.0, 36.0)),
            cost_energy_rest=float(rng.uniform(10.0, 15.0)),
            cost_inertia=float(rng.uniform(2.0, 4.0)),
            cost_droop=float(rng.uniform(3.0, 5.0)),
        ))

    return SystemScenario(
        name="ieee30-vpp",
        f0=50.0,
        dt_hours=1.0,
        n_buses=30,
        ref_bus=0,
        lines=[Line(a - 1, b - 1, BASE_MVA / x) for a, b, x in BRANCHES],
        load=load,
        sgs=sgs,
        regs=regs,
        reg_avail=reg_avail,
        esss=esss,
        vpps=vpps,
        tau1=0.5,
        tau2=1.5,
        boundaries=Boundaries(rocof_max=0.125, nadir_max=0.4, qss_ref=0.25),
        disturbance_fraction=0.08,
        disturbance_mean=80.0,
        disturbance_std=12.0,
        surface_dd_ref=float(0.08 * load_profile.max()),
        surface_domain=domain,
    )


def fit_station_aggregates(system):
    """Order-2 reduced fits for every station, gated on held-out accuracy."""
    aggregates = []
    rng = np.random.default_rng(1234)
    for station in system.vpps:
        t0 = time.perf_counter()
        full = assemble_heterogeneous(station.portfolio, tau2=system.tau2)
        agg = fit_reduced_model(
            full,
            FitConfig(order=2, seed=0,
                      disturbance_mean=system.disturbance_mean,
                      disturbance_std=system.disturbance_std),
            name=station.portfolio.name,
        )
        dds = rng.normal(system.disturbance_mean, system.disturbance_std, 200)
        check = evaluate_mape(full, agg, np.clip(dds, 1.0, None))
        print(f"  {agg.name}: fit {time.perf_counter() - t0:.1f}s"
              f"  nadir {check.nadir_mape:.3f}%  qss {check.qss_mape:.3f}%"
              f"  k_vpp {agg.k_vpp:.2f}  h_vppg {agg.h_vppg:.2f}  h_vppr {agg.h_vppr:.2f}")
        if check.nadir_mape > 0.3 or check.qss_mape > 0.3:
            raise SystemExit(f"{agg.name}: order-2 fit misses the 0.3% gate")
        aggregates.append(agg)
    return aggregates


def seal_reserve_boxes(system, aggregates):
    """Cap each station's reserve boxes at what its fitted model can deliver."""
    by_name = {a.name: a for a in aggregates}
    b = system.boundaries
    for station in system.vpps:
        agg = by_name[station.portfolio.name]
        station.portfolio.p_in_max = round(2.0 * b.rocof_max * agg.h_vppr, 6)
        station.portfolio.p_df_max = round(b.nadir_max * agg.k_vpp, 6)


def cleared_envelope(solution, mask=None):
    pts = np.column_stack([solution.h_to, solution.k_g,
                           solution.k_fm, solution.k_vpp_total])
    if mask is not None:
        pts = pts[mask]
    return pts.min(axis=0), pts.max(axis=0)


def conservativeness_at_cleared(scn, surfaces, solution):
    """Worst plane optimism (plane estimate minus true nadir) over all periods.

    Positive values mean a plane claimed a shallower nadir than the closed
    form at the actually cleared mix; anything beyond 1e-4 Hz would let the
    clearing accept a schedule the audit then rejects.
    """
    b = scn.boundaries
    worst = -math.inf
    for t in range(scn.periods):
        est = surfaces[t].evaluate(solution.h_to[t], solution.k_g[t],
                                   solution.k_fm[t], solution.k_vpp_total[t])
        truth = closed_form_nadir(solution.h_to[t], solution.k_g[t],
                                  solution.k_fm[t], solution.k_vpp_total[t],
                                  scn.dd(t), b.tau2, b.t_gv)
        worst = max(worst, est - truth)
    return worst


def run_once(system, aggregates, label):
    scn = scenario_from_system(system, {a.name: a for a in aggregates})
    t0 = time.perf_counter()
    surfaces = build_period_surfaces(scn, n_planes=N_PLANES, density=5)
    solution, prices = solve_pipeline(scn, surfaces)
    elapsed = time.perf_counter() - t0
    audit = frequency_audit(solution, scn, ode_check=True)
    worst = min(r.nadir for r in audit.records)
    print(f"  {label}: cost {solution.objective:,.0f} $  wall {elapsed:.1f}s"
          f"  audit {'pass' if audit.passed else 'FAIL'}  worst nadir {worst:.3f} Hz")
    if not audit.passed:
        raise SystemExit(f"{label}: cleared schedule violates a frequency boundary")
    return scn, surfaces, solution, prices, elapsed


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="src/vppfreq/data/ieee30", type=Path)
    ap.add_argument("--fit-cache", type=Path, default=None,
                    help="reuse fitted aggregates from this JSON if it exists")
    args = ap.parse_args()

    pilot_domain = {"h_to": (80.0, 400.0), "k_g": (15.0, 130.0),
                    "k_fm": (0.0, 140.0), "k_vpp": (0.0, 35.0)}
    system = build_system(pilot_domain)
    if args.fit_cache and args.fit_cache.exists():
        print(f"reusing fitted aggregates from {args.fit_cache}")
        aggregates = list(load_aggregates(args.fit_cache).values())
    else:
        print("fitting station aggregates (order 2)")
        aggregates = fit_station_aggregates(system)
        if args.fit_cache:
            save_aggregates(aggregates, args.fit_cache, seed=0, order=2)
    seal_reserve_boxes(system, aggregates)
    problems = validate_scenario(system)
    if problems:
        raise SystemExit("scenario does not validate: " + "; ".join(problems))

    print("sizing the surface domain from the cleared envelope")
    _, _, solution, _, _ = run_once(system, aggregates, "pilot")
    lo, hi = cleared_envelope(solution)
    print(f"  cleared envelope: h_to [{lo[0]:.1f}, {hi[0]:.1f}]"
          f"  k_g [{lo[1]:.1f}, {hi[1]:.1f}]  k_fm [{lo[2]:.1f}, {hi[2]:.1f}]"
          f"  k_vpp [{lo[3]:.1f}, {hi[3]:.1f}]")
    domain = {
        "h_to": (round(0.96 * lo[0], 1), round(1.06 * hi[0], 1)),
        "k_g": (round(0.93 * lo[1], 1), round(1.07 * hi[1], 1)),
        "k_fm": (round(max(0.0, lo[2] - 2.0), 1), round(1.1 * hi[2], 1)),
        "k_vpp": (round(max(0.0, lo[3] - 2.0), 1), round(1.1 * hi[3], 1)),
    }
    print(f"  domain: {domain}")
    system = build_system(domain)
    seal_reserve_boxes(system, aggregates)

    print("verifying the published configuration")
    scn, surfaces, solution, prices, elapsed = run_once(system, aggregates, "final")
    lo, hi = cleared_envelope(solution)
    for axis, (a, b), lo_v, hi_v in zip(("h_to", "k_g", "k_fm", "k_vpp"),
                                        domain.values(), lo, hi):
        if lo_v < a - 1e-9 or hi_v > b + 1e-9:
            raise SystemExit(f"cleared {axis} range [{lo_v:.2f}, {hi_v:.2f}] "
                             f"escapes the published domain [{a}, {b}]")
    ref = surfaces[int(np.argmax([scn.dd(t) for t in range(scn.periods)]))]
    print(f"  20-plane surface: max gap {ref.stats.max_gap * 1e3:.2f} mHz,"
          f" overestimate {ref.stats.max_overestimate * 1e3:.3f} mHz")
    if ref.stats.max_gap > GAP_LIMIT:
        raise SystemExit(f"surface gap {ref.stats.max_gap:.4f} Hz exceeds {GAP_LIMIT}")
    if ref.stats.max_overestimate > 1e-12:
        raise SystemExit("published surface is not conservative")
    if elapsed > 45.0:
        raise SystemExit(f"pipeline took {elapsed:.0f}s; the dataset must clear quickly")

    report = settle(solution, prices, scn)
    for station in scn.vpps:
        profit = report.provider_profit(station.name)
        print(f"  {station.name}: profit {profit:,.0f} $")
        if profit < -1e-6:
            raise SystemExit(f"{station.name} loses money at the cleared prices")

    print("checking the paired counterfactual")
    counter = scenario_without_vpps(scn)
    surfaces_cf = build_period_surfaces(counter, n_planes=N_PLANES, density=5)
    solution_cf, _ = solve_pipeline(counter, surfaces_cf)
    audit_cf = frequency_audit(solution_cf, counter)
    print(f"  without stations: cost {solution_cf.objective:,.0f} $"
          f"  audit {'pass' if audit_cf.passed else 'FAIL'}")
    if solution.objective >= solution_cf.objective:
        raise SystemExit("aggregates do not lower the system cost; dataset is miscalibrated")
    if not audit_cf.passed:
        raise SystemExit("counterfactual schedule violates a frequency boundary")

    args.out.mkdir(parents=True, exist_ok=True)
    scenario_path, profile_path = save_scenario(system, args.out / "scenario.yaml")
    agg_path = save_aggregates(aggregates, args.out / "aggregates.json",
                               subcommand="aggregate", seed=0, order=2)
    reloaded = load_scenario(scenario_path)
    if validate_scenario(reloaded):
        raise SystemExit("reloaded scenario fails validation")
    if not np.array_equal(reloaded.load, system.load):
        raise SystemExit("profile round trip is not exact")
    back = load_aggregates(agg_path)
    for a in aggregates:
        twin = back[a.name]
        if (twin.h_vppg, twin.h_vppr, twin.g_vpp.num, twin.g_vpp.den) != \
                (a.h_vppg, a.h_vppr, a.g_vpp.num, a.g_vpp.den):
            raise SystemExit(f"aggregate round trip drifted for {a.name}")
    print(f"wrote {scenario_path}, {profile_path.name}, {agg_path.name}")


if __name__ == "__main__":
    main()
