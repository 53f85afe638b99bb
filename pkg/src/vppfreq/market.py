"""Joint energy, inertia and primary-frequency-response market clearing.

Three linked problems share one constraint set: a commitment run with
binary generator states, its continuous relaxation, and a dispatch run
with the commitment fixed. The relaxation's duals price inertia for
generators and aggregates; the dispatch duals price energy and droop.
Every frequency-security requirement enters as a linear row: the RoCoF
and quasi-steady-state bounds exactly, the nadir bound through the
under-estimating plane set built by the security module, so a cleared
point can only be conservative against the true staged response.

Units: power MW, inertia MW*s/Hz, droop MW/Hz, angles rad, prices $ per
MWh, $ per (MW*s/Hz)*h and $ per (MW/Hz)*h; period length dt in hours.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import nadir, simulate_staged, stage_coefficients
from .optkernel import LpProblem, solve_lp, solve_milp
from .security import PwlNadirSurface, SurfaceDomain, build_pwl_surface, qss_bound, rocof_bound, scale_surface

__all__ = [
    "Sg",
    "Reg",
    "Ess",
    "Vpp",
    "Line",
    "Boundaries",
    "OfferBook",
    "Scenario",
    "UcSchedule",
    "ClearingSolution",
    "PriceSchedule",
    "Settlement",
    "SettlementLine",
    "AuditRecord",
    "AuditReport",
    "InfeasibleMarketError",
    "build_period_surfaces",
    "build_clearing_problem",
    "solve_pipeline",
    "settle",
    "frequency_audit",
    "scenario_without_vpps",
    "scenario_from_system",
]

logger = logging.getLogger(__name__)

MODES = ("scuc", "continuous_scuc", "sced")


@dataclass(frozen=True)
class Sg:
    """Independent synchronous generator with physical inertia and governor droop."""

    name: str
    bus: int
    p_min: float  # MW
    p_max: float  # MW
    ramp: float  # MW per period
    inertia: float  # MW*s/Hz
    droop: float  # MW/Hz
    min_up: int = 1  # periods
    min_down: int = 1


@dataclass(frozen=True)
class Reg:
    """Grid-forming renewable block; output capped by an availability profile."""

    name: str
    bus: int
    availability: tuple  # MW per period
    h_max: float = math.inf  # MW*s/Hz, virtual-inertia cap
    k_max: float = math.inf  # MW/Hz, droop cap


@dataclass(frozen=True)
class Ess:
    """Grid-forming storage, discharge only, with a state-of-charge ledger."""

    name: str
    bus: int
    p_max: float  # MW
    energy: float  # MWh
    soc0: float = 0.5
    eff: float = 0.95
    soc_min: float = 0.1
    soc_max: float = 0.9
    h_max: float = math.inf
    k_max: float = math.inf


@dataclass(frozen=True)
class Vpp:
    """Aggregated virtual power plant split into a small-SG block and GFM rest.

    sg_share is the small-SG fraction of rated power; the block's energy
    scales with the continuous commitment state, the rest offers energy
    plus reserve boxes for virtual inertia and droop.
    """

    name: str
    bus: int
    p_max: float  # MW, whole aggregate
    p_min: float  # MW, whole aggregate at full commitment
    sg_share: float
    ramp: float  # MW per period, small-SG block
    h_sg: float  # MW*s/Hz, small-SG block inertia at full commitment
    p_inertia_max: float  # MW reserve headroom for virtual inertia
    p_droop_max: float  # MW reserve headroom for droop response
    p_inertia_min: float = 0.0
    p_droop_min: float = 0.0


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    susceptance: float  # MW/rad


@dataclass(frozen=True)
class Boundaries:
    """Frequency-security limits and staged-response timing shared by all periods."""

    rocof_max: float  # Hz/s
    f_nadir_max: float  # Hz
    qss_ref: float  # Hz
    tau2: float  # s, governor activation delay
    t_gv: float  # s, governor time constant
    dd_share: float  # disturbance as a fraction of total load


@dataclass
class OfferBook:
    """Per-provider, per-period service prices.

    energy holds $/MWh rows keyed by provider name; a VPP appears twice,
    as "<name>.sg" for its small-SG block and "<name>.flex" for the rest.
    inertia and droop hold $ per unit-hour rows for REG, ESS and VPP names.
    """

    energy: dict
    inertia: dict
    droop: dict

    def validate(self, scenario):
        need_energy = [g.name for g in scenario.sgs] + [r.name for r in scenario.regs]
        need_energy += [e.name for e in scenario.esss]
        need_energy += [f"{v.name}.sg" for v in scenario.vpps] + [f"{v.name}.flex" for v in scenario.vpps]
        need_service = [r.name for r in scenario.regs] + [e.name for e in scenario.esss]
        need_service += [v.name for v in scenario.vpps]
        for key in need_energy:
            self._check_row(self.energy, key, scenario.periods, "energy")
        for key in need_service:
            self._check_row(self.inertia, key, scenario.periods, "inertia")
            self._check_row(self.droop, key, scenario.periods, "droop")

    @staticmethod
    def _check_row(table, key, periods, kind):
        if key not in table:
            raise ValueError(f"offer book is missing the {kind} row for {key!r}")
        row = np.asarray(table[key], dtype=float)
        if row.shape != (periods,):
            raise ValueError(f"{kind} offer row for {key!r} must have one price per period")
        if not np.all(np.isfinite(row)) or np.any(row < 0.0):
            raise ValueError(f"{kind} offer row for {key!r} must be finite and nonnegative")


@dataclass
class Scenario:
    """Network, providers, load, security boundaries and offers for one day."""

    name: str
    periods: int
    dt: float  # h
    buses: tuple
    ref_bus: int
    lines: tuple
    loads: dict  # bus -> MW per period
    sgs: tuple
    regs: tuple
    esss: tuple
    vpps: tuple
    boundaries: Boundaries
    offers: OfferBook
    surface_domain: SurfaceDomain | None = None
    seed: int | None = None

    def total_load(self, t) -> float:
        return float(sum(self.loads[n][t] for n in self.loads))

    def dd(self, t) -> float:
        """Disturbance size for period t (MW)."""
        return self.boundaries.dd_share * self.total_load(t)

    def validate(self):
        if self.periods < 1 or self.dt <= 0:
            raise ValueError("scenario needs at least one period of positive length")
        bus_set = set(self.buses)
        if len(bus_set) != len(self.buses):
            raise ValueError("bus labels must be unique")
        if self.ref_bus not in bus_set:
            raise ValueError(f"reference bus {self.ref_bus} is not in the bus list")
        for ln in self.lines:
            if ln.from_bus not in bus_set or ln.to_bus not in bus_set:
                raise ValueError(f"line {ln.from_bus}-{ln.to_bus} references an unknown bus")
            if ln.susceptance <= 0:
                raise ValueError("line susceptance must be positive")
        for n, row in self.loads.items():
            if n not in bus_set:
                raise ValueError(f"load at unknown bus {n}")
            if len(row) != self.periods:
                raise ValueError(f"load profile at bus {n} must cover every period")
        units = [u.name for u in (*self.sgs, *self.regs, *self.esss, *self.vpps)]
        if len(set(units)) != len(units):
            raise ValueError("provider names must be unique")
        for u in (*self.sgs, *self.regs, *self.esss, *self.vpps):
            if u.bus not in bus_set:
                raise ValueError(f"provider {u.name} sits at unknown bus {u.bus}")
        for g in self.sgs:
            if not 0 <= g.p_min <= g.p_max:
                raise ValueError(f"{g.name}: need 0 <= p_min <= p_max")
            if g.inertia < 0 or g.droop < 0 or g.ramp < 0:
                raise ValueError(f"{g.name}: inertia, droop and ramp must be nonnegative")
            if g.min_up < 1 or g.min_down < 1:
                raise ValueError(f"{g.name}: min up/down times must cover at least one period")
        for r in self.regs:
            if len(r.availability) != self.periods:
                raise ValueError(f"{r.name}: availability must cover every period")
            if min(r.availability) < 0:
                raise ValueError(f"{r.name}: availability must be nonnegative")
            if r.h_max < 0 or r.k_max < 0:
                raise ValueError(f"{r.name}: reserve caps must be nonnegative")
        for e in self.esss:
            if e.p_max < 0 or e.energy <= 0 or not 0 < e.eff <= 1:
                raise ValueError(f"{e.name}: bad storage ratings")
            if not 0 <= e.soc_min <= e.soc0 <= e.soc_max <= 1:
                raise ValueError(f"{e.name}: state of charge limits out of order")
            if e.h_max < 0 or e.k_max < 0:
                raise ValueError(f"{e.name}: reserve caps must be nonnegative")
        for v in self.vpps:
            if not 0 <= v.p_min <= v.p_max or not 0 <= v.sg_share <= 1:
                raise ValueError(f"{v.name}: bad aggregate ratings")
            if min(v.h_sg, v.ramp, v.p_inertia_max, v.p_droop_max) < 0:
                raise ValueError(f"{v.name}: reserve boxes must be nonnegative")
            if v.p_inertia_min > v.p_inertia_max or v.p_droop_min > v.p_droop_max:
                raise ValueError(f"{v.name}: reserve box bounds out of order")
        b = self.boundaries
        if min(b.rocof_max, b.f_nadir_max, b.qss_ref, b.t_gv) <= 0 or b.tau2 < 0 or b.dd_share < 0:
            raise ValueError("security boundaries must be positive (dd_share nonnegative)")
        self.offers.validate(self)


@dataclass(frozen=True)
class UcSchedule:
    """Commitment states: binary for independent SGs, continuous for VPP blocks."""

    x: dict  # sg name -> 0/1 per period
    y_su: dict
    y_sd: dict
    x_vpp: dict  # vpp name -> [0, 1] per period


@dataclass(frozen=True)
class ClearingSolution:
    """Final dispatch with the commitment, system mixes and dispatch-run duals."""

    objective: float
    uc: UcSchedule
    p_sg: dict
    p_reg: dict
    p_ess: dict
    p_vppg: dict
    p_vppr: dict
    h_reg: dict
    h_ess: dict
    h_vppr: dict
    k_reg: dict
    k_ess: dict
    k_vpp: dict
    soc: dict
    theta: dict
    h_gv: np.ndarray
    h_to: np.ndarray
    k_g: np.ndarray
    k_fm: np.ndarray
    k_vpp_total: np.ndarray
    duals: dict = field(repr=False, default_factory=dict)


@dataclass(frozen=True)
class PriceSchedule:
    """Marginal prices: nodal energy plus the six service price families."""

    energy: dict  # bus -> $/MWh per period
    sg_inertia: dict  # sg name -> price per period, commitment masked
    sg_droop: dict
    vpp_inertia: np.ndarray  # per period, common to all aggregates
    vpp_droop: np.ndarray
    fm_inertia: np.ndarray  # per period, GFM equipment
    fm_droop: np.ndarray


@dataclass(frozen=True)
class SettlementLine:
    provider: str
    kind: str  # sg | reg | ess | vpp
    service: str  # energy | energy_flex | inertia | droop
    quantity: float
    cost: float
    revenue: float

    @property
    def profit(self) -> float:
        return self.revenue - self.cost


@dataclass(frozen=True)
class Settlement:
    lines: tuple
    system_cost: float

    def provider_profit(self, name) -> float:
        return sum(ln.profit for ln in self.lines if ln.provider == name)

    def provider_cost(self, name) -> float:
        return sum(ln.cost for ln in self.lines if ln.provider == name)

    def kind_totals(self) -> dict:
        out = {}
        for ln in self.lines:
            cost, rev = out.get(ln.kind, (0.0, 0.0))
            out[ln.kind] = (cost + ln.cost, rev + ln.revenue)
        return out


class InfeasibleMarketError(RuntimeError):
    """Clearing failed; carries the first infeasible period and row family."""

    def __init__(self, stage, period, family, detail=""):
        self.stage = stage
        self.period = period
        self.family = family
        msg = f"{stage} infeasible: first conflict in period {period}, constraint family {family!r}"
        super().__init__(msg + (f" ({detail})" if detail else ""))


def build_period_surfaces(scenario, n_planes=20, density=5):
    """One nadir surface per period, built once and rescaled exactly.

    The staged response is linear in the disturbance, so a single surface
    at the largest per-period disturbance is rescaled to every other one;
    periods with zero disturbance get an all-zero surface the nadir rows
    treat as vacuous.
    """
    if scenario.surface_domain is None:
        raise ValueError("scenario has no nadir-surface domain")
    b = scenario.boundaries
    dds = [scenario.dd(t) for t in range(scenario.periods)]
    dd_ref = max(dds) if max(dds) > 0 else 1.0
    ref = build_pwl_surface(scenario.surface_domain, dd_ref, b.tau2, b.t_gv,
                            n_planes=n_planes, density=density)
    return [scale_surface(ref, dd) for dd in dds]


def _check_surfaces(scenario, surfaces):
    if len(surfaces) != scenario.periods:
        raise ValueError(f"need one surface per period, got {len(surfaces)} for {scenario.periods}")
    b = scenario.boundaries
    for t, s in enumerate(surfaces):
        if abs(s.dd - scenario.dd(t)) > 1e-6 * (1.0 + scenario.dd(t)):
            raise ValueError(f"surface for period {t} was built for disturbance {s.dd}, "
                             f"scenario needs {scenario.dd(t)}")
        if abs(s.tau2 - b.tau2) > 1e-9 or abs(s.t_gv - b.t_gv) > 1e-9:
            raise ValueError(f"surface for period {t} uses different staged-response timing")


def build_clearing_problem(scenario, surfaces, mode, fixed_uc=None):
    """Assemble the clearing LP/MILP for one of the three models.

    Row families, each indexed with the period last:
      bal[n,t]     nodal balance with DC flows, one per bus and period
      ref[t]       reference-bus angle pin
      rocof[t]     governed inertia covers the initial slope bound
      qss[t]       total droop covers the settling bound
      nadir[hp,t]  one row per surface plane
      sgbox lo/hi, sgramp up/dn, uclogic/ucflip, minup/mindown  scheduling
      vppbox lo/hi, vppramp up/dn, vin lo/hi, vdf lo/hi  aggregates
      regcap[j,t], esscap[k,t], soc[k,t]  GFM capacity shares and storage

    Exact counts with B buses, G generators, J renewables, K storages,
    L aggregates, P planes per period and T periods:
      rows(t) = B + 3 + P + G*(4 + 2*[t>0]) + J + 2*K + L*(6 + 2*[t>0])
                + one row per generator with min_up > 1 and per generator
                with min_down > 1 (sced drops these and the UC logic rows)
      cols(t) = B + 4*G + 3*J + 4*K + 5*L
                (sced drops the start/stop columns: B + 2*G + ...)
    """
    scenario.validate()
    _check_surfaces(scenario, surfaces)
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if mode == "sced" and fixed_uc is None:
        raise ValueError("sced mode needs the fixed commitment schedule")
    b = scenario.boundaries
    T = range(scenario.periods)
    dt = scenario.dt
    p = LpProblem(f"{scenario.name}:{mode}")
    en, inr, dr = scenario.offers.energy, scenario.offers.inertia, scenario.offers.droop

    for t in T:
        for n in scenario.buses:
            p.add_var(f"th[{n},{t}]", lo=-math.inf, hi=math.inf)
        for g in scenario.sgs:
            p.add_var(f"pg[{g.name},{t}]", hi=g.p_max, cost=en[g.name][t] * dt)
            if mode == "sced":
                xv = float(fixed_uc.x[g.name][t])
                p.add_var(f"x[{g.name},{t}]", lo=xv, hi=xv)
            else:
                p.add_var(f"x[{g.name},{t}]", hi=1.0, binary=mode == "scuc")
                p.add_var(f"su[{g.name},{t}]", hi=1.0, binary=mode == "scuc")
                p.add_var(f"sd[{g.name},{t}]", hi=1.0, binary=mode == "scuc")
        for r in scenario.regs:
            p.add_var(f"pr[{r.name},{t}]", cost=en[r.name][t] * dt)
            p.add_var(f"hr[{r.name},{t}]", hi=r.h_max, cost=inr[r.name][t] * dt)
            p.add_var(f"kr[{r.name},{t}]", hi=r.k_max, cost=dr[r.name][t] * dt)
        for e in scenario.esss:
            p.add_var(f"pe[{e.name},{t}]", cost=en[e.name][t] * dt)
            p.add_var(f"he[{e.name},{t}]", hi=e.h_max, cost=inr[e.name][t] * dt)
            p.add_var(f"ke[{e.name},{t}]", hi=e.k_max, cost=dr[e.name][t] * dt)
            p.add_var(f"soc[{e.name},{t}]", lo=e.soc_min * e.energy, hi=e.soc_max * e.energy)
        for v in scenario.vpps:
            p.add_var(f"xv[{v.name},{t}]", hi=1.0)
            p.add_var(f"pvg[{v.name},{t}]", cost=en[f"{v.name}.sg"][t] * dt)
            p.add_var(f"pvr[{v.name},{t}]", hi=(1.0 - v.sg_share) * v.p_max,
                      cost=en[f"{v.name}.flex"][t] * dt)
            p.add_var(f"hv[{v.name},{t}]", cost=inr[v.name][t] * dt)
            p.add_var(f"kv[{v.name},{t}]", cost=dr[v.name][t] * dt)

    neighbors = {}
    for ln in scenario.lines:
        neighbors.setdefault(ln.from_bus, []).append((ln.to_bus, ln.susceptance))
        neighbors.setdefault(ln.to_bus, []).append((ln.from_bus, ln.susceptance))

    for t in T:
        # nodal balance (generation minus outgoing DC flow equals load)
        for n in scenario.buses:
            coeffs = {}
            for m, sus in neighbors.get(n, ()):  # flow n -> m is B*(th_n - th_m)
                coeffs[f"th[{n},{t}]"] = coeffs.get(f"th[{n},{t}]", 0.0) - sus
                coeffs[f"th[{m},{t}]"] = coeffs.get(f"th[{m},{t}]", 0.0) + sus
            for g in scenario.sgs:
                if g.bus == n:
                    coeffs[f"pg[{g.name},{t}]"] = 1.0
            for r in scenario.regs:
                if r.bus == n:
                    coeffs[f"pr[{r.name},{t}]"] = 1.0
            for e in scenario.esss:
                if e.bus == n:
                    coeffs[f"pe[{e.name},{t}]"] = 1.0
            for v in scenario.vpps:
                if v.bus == n:
                    coeffs[f"pvg[{v.name},{t}]"] = 1.0
                    coeffs[f"pvr[{v.name},{t}]"] = 1.0
            p.add_row(f"bal[{n},{t}]", coeffs, "==", float(scenario.loads.get(n, [0.0] * scenario.periods)[t]))
        p.add_row(f"ref[{t}]", {f"th[{scenario.ref_bus},{t}]": 1.0}, "==", 0.0)

        # frequency security: initial slope, settling offset, nadir planes
        dd = scenario.dd(t)
        gv = {f"x[{g.name},{t}]": g.inertia for g in scenario.sgs}
        for v in scenario.vpps:
            gv[f"xv[{v.name},{t}]"] = v.h_sg
        p.add_row(f"rocof[{t}]", gv, ">=", rocof_bound(dd, b.rocof_max) if dd > 0 else 0.0)
        droop_all = {f"x[{g.name},{t}]": g.droop for g in scenario.sgs}
        for r in scenario.regs:
            droop_all[f"kr[{r.name},{t}]"] = 1.0
        for e in scenario.esss:
            droop_all[f"ke[{e.name},{t}]"] = 1.0
        for v in scenario.vpps:
            droop_all[f"kv[{v.name},{t}]"] = 1.0
        p.add_row(f"qss[{t}]", droop_all, ">=", qss_bound(dd, b.qss_ref) if dd > 0 else 0.0)
        for hp, plane in enumerate(surfaces[t].planes):
            coeffs = {}
            for g in scenario.sgs:
                coeffs[f"x[{g.name},{t}]"] = plane.k1 * g.inertia + plane.k2 * g.droop
            for v in scenario.vpps:
                coeffs[f"xv[{v.name},{t}]"] = plane.k1 * v.h_sg
                coeffs[f"hv[{v.name},{t}]"] = plane.k1
                coeffs[f"kv[{v.name},{t}]"] = plane.k4
            for r in scenario.regs:
                coeffs[f"hr[{r.name},{t}]"] = plane.k1
                coeffs[f"kr[{r.name},{t}]"] = plane.k3
            for e in scenario.esss:
                coeffs[f"he[{e.name},{t}]"] = plane.k1
                coeffs[f"ke[{e.name},{t}]"] = plane.k3
            p.add_row(f"nadir[{hp},{t}]", coeffs, ">=", -b.f_nadir_max - plane.k5)

        # generator scheduling
        for g in scenario.sgs:
            p.add_row(f"sgbox_lo[{g.name},{t}]",
                      {f"pg[{g.name},{t}]": 1.0, f"x[{g.name},{t}]": -g.p_min}, ">=", 0.0)
            p.add_row(f"sgbox_hi[{g.name},{t}]",
                      {f"pg[{g.name},{t}]": 1.0, f"x[{g.name},{t}]": -g.p_max}, "<=", 0.0)
            if t > 0:
                p.add_row(f"sgramp_up[{g.name},{t}]",
                          {f"pg[{g.name},{t}]": 1.0, f"pg[{g.name},{t - 1}]": -1.0}, "<=", g.ramp)
                p.add_row(f"sgramp_dn[{g.name},{t}]",
                          {f"pg[{g.name},{t - 1}]": 1.0, f"pg[{g.name},{t}]": -1.0}, "<=", g.ramp)
            if mode != "sced":
                # state transition (cold start before the horizon) and no
                # simultaneous start/stop
                prev_x = {f"x[{g.name},{t - 1}]": -1.0} if t > 0 else {}
                p.add_row(f"uclogic[{g.name},{t}]",
                          {f"x[{g.name},{t}]": 1.0, f"su[{g.name},{t}]": -1.0,
                           f"sd[{g.name},{t}]": 1.0, **prev_x}, "==", 0.0)
                p.add_row(f"ucflip[{g.name},{t}]",
                          {f"su[{g.name},{t}]": 1.0, f"sd[{g.name},{t}]": 1.0}, "<=", 1.0)
                # a recent start keeps the unit on; a recent stop keeps it off
                if g.min_up > 1:
                    window = {f"su[{g.name},{s}]": 1.0
                              for s in range(max(0, t - g.min_up + 1), t + 1)}
                    p.add_row(f"minup[{g.name},{t}]",
                              {**window, f"x[{g.name},{t}]": -1.0}, "<=", 0.0)
                if g.min_down > 1:
                    window = {f"sd[{g.name},{s}]": 1.0
                              for s in range(max(0, t - g.min_down + 1), t + 1)}
                    p.add_row(f"mindown[{g.name},{t}]",
                              {**window, f"x[{g.name},{t}]": 1.0}, "<=", 1.0)

        # aggregate operating boxes
        for v in scenario.vpps:
            p.add_row(f"vppbox_lo[{v.name},{t}]",
                      {f"pvg[{v.name},{t}]": 1.0, f"xv[{v.name},{t}]": -v.sg_share * v.p_min}, ">=", 0.0)
            p.add_row(f"vppbox_hi[{v.name},{t}]",
                      {f"pvg[{v.name},{t}]": 1.0, f"xv[{v.name},{t}]": -v.sg_share * v.p_max}, "<=", 0.0)
            if t > 0:
                p.add_row(f"vppramp_up[{v.name},{t}]",
                          {f"pvg[{v.name},{t}]": 1.0, f"pvg[{v.name},{t - 1}]": -1.0}, "<=", v.ramp)
                p.add_row(f"vppramp_dn[{v.name},{t}]",
                          {f"pvg[{v.name},{t - 1}]": 1.0, f"pvg[{v.name},{t}]": -1.0}, "<=", v.ramp)
            p.add_row(f"vin_lo[{v.name},{t}]", {f"hv[{v.name},{t}]": 2.0 * b.rocof_max},
                      ">=", v.p_inertia_min)
            p.add_row(f"vin_hi[{v.name},{t}]", {f"hv[{v.name},{t}]": 2.0 * b.rocof_max},
                      "<=", v.p_inertia_max)
            p.add_row(f"vdf_lo[{v.name},{t}]", {f"kv[{v.name},{t}]": b.f_nadir_max},
                      ">=", v.p_droop_min)
            p.add_row(f"vdf_hi[{v.name},{t}]", {f"kv[{v.name},{t}]": b.f_nadir_max},
                      "<=", v.p_droop_max)

        # GFM equipment: energy plus reserve conversions share the rating
        for r in scenario.regs:
            p.add_row(f"regcap[{r.name},{t}]",
                      {f"pr[{r.name},{t}]": 1.0, f"hr[{r.name},{t}]": 2.0 * b.rocof_max,
                       f"kr[{r.name},{t}]": b.f_nadir_max}, "<=", float(r.availability[t]))
        for e in scenario.esss:
            p.add_row(f"esscap[{e.name},{t}]",
                      {f"pe[{e.name},{t}]": 1.0, f"he[{e.name},{t}]": 2.0 * b.rocof_max,
                       f"ke[{e.name},{t}]": b.f_nadir_max}, "<=", e.p_max)
            prev = {f"soc[{e.name},{t - 1}]": -1.0} if t > 0 else {}
            rhs = e.soc0 * e.energy if t == 0 else 0.0
            p.add_row(f"soc[{e.name},{t}]",
                      {f"soc[{e.name},{t}]": 1.0, f"pe[{e.name},{t}]": dt / e.eff, **prev}, "==", rhs)

    used = set()
    for row in p.rows:
        used.update(row.coeffs)
    for name, j in p.col_index.items():
        if j not in used and not (math.isfinite(p.lower[j]) or math.isfinite(p.upper[j])):
            raise ValueError(f"variable {name!r} is unbounded and appears in no constraint")
    return p


def _per_period(sol, pattern, periods):
    return np.array([sol.value(pattern.format(t=t)) for t in range(periods)])


def _decode(scenario, surfaces, sol, uc):
    T = scenario.periods
    p_sg = {g.name: _per_period(sol, f"pg[{g.name},{{t}}]", T) for g in scenario.sgs}
    out = ClearingSolution(
        objective=sol.objective,
        uc=uc,
        p_sg=p_sg,
        p_reg={r.name: _per_period(sol, f"pr[{r.name},{{t}}]", T) for r in scenario.regs},
        p_ess={e.name: _per_period(sol, f"pe[{e.name},{{t}}]", T) for e in scenario.esss},
        p_vppg={v.name: _per_period(sol, f"pvg[{v.name},{{t}}]", T) for v in scenario.vpps},
        p_vppr={v.name: _per_period(sol, f"pvr[{v.name},{{t}}]", T) for v in scenario.vpps},
        h_reg={r.name: _per_period(sol, f"hr[{r.name},{{t}}]", T) for r in scenario.regs},
        h_ess={e.name: _per_period(sol, f"he[{e.name},{{t}}]", T) for e in scenario.esss},
        h_vppr={v.name: _per_period(sol, f"hv[{v.name},{{t}}]", T) for v in scenario.vpps},
        k_reg={r.name: _per_period(sol, f"kr[{r.name},{{t}}]", T) for r in scenario.regs},
        k_ess={e.name: _per_period(sol, f"ke[{e.name},{{t}}]", T) for e in scenario.esss},
        k_vpp={v.name: _per_period(sol, f"kv[{v.name},{{t}}]", T) for v in scenario.vpps},
        soc={e.name: _per_period(sol, f"soc[{e.name},{{t}}]", T) for e in scenario.esss},
        theta={n: _per_period(sol, f"th[{n},{{t}}]", T) for n in scenario.buses},
        h_gv=np.zeros(T),
        h_to=np.zeros(T),
        k_g=np.zeros(T),
        k_fm=np.zeros(T),
        k_vpp_total=np.zeros(T),
        duals={
            "balance": {n: np.array([sol.dual(f"bal[{n},{t}]") for t in range(T)])
                        for n in scenario.buses} if sol.duals is not None else {},
            "rocof": np.array([sol.dual(f"rocof[{t}]") for t in range(T)])
            if sol.duals is not None else np.zeros(T),
            "qss": np.array([sol.dual(f"qss[{t}]") for t in range(T)])
            if sol.duals is not None else np.zeros(T),
            "nadir": [np.array([sol.dual(f"nadir[{hp},{t}]") for hp in range(len(surfaces[t].planes))])
                      for t in range(T)] if sol.duals is not None else [],
        },
    )
    xv = {v.name: _per_period(sol, f"xv[{v.name},{{t}}]", T) for v in scenario.vpps}
    for t in range(T):
        x_t = {g.name: uc.x[g.name][t] for g in scenario.sgs}
        out.h_gv[t] = sum(x_t[g.name] * g.inertia for g in scenario.sgs)
        out.h_gv[t] += sum(xv[v.name][t] * v.h_sg for v in scenario.vpps)
        out.h_to[t] = out.h_gv[t]
        out.h_to[t] += sum(out.h_reg[r.name][t] for r in scenario.regs)
        out.h_to[t] += sum(out.h_ess[e.name][t] for e in scenario.esss)
        out.h_to[t] += sum(out.h_vppr[v.name][t] for v in scenario.vpps)
        out.k_g[t] = sum(x_t[g.name] * g.droop for g in scenario.sgs)
        out.k_fm[t] = sum(out.k_reg[r.name][t] for r in scenario.regs)
        out.k_fm[t] += sum(out.k_ess[e.name][t] for e in scenario.esss)
        out.k_vpp_total[t] = sum(out.k_vpp[v.name][t] for v in scenario.vpps)
    return out, xv


def _decode_uc(scenario, sol):
    T = scenario.periods
    rnd = lambda a: np.rint(np.clip(a, 0.0, 1.0))
    return UcSchedule(
        x={g.name: rnd(_per_period(sol, f"x[{g.name},{{t}}]", T)) for g in scenario.sgs},
        y_su={g.name: rnd(_per_period(sol, f"su[{g.name},{{t}}]", T)) for g in scenario.sgs},
        y_sd={g.name: rnd(_per_period(sol, f"sd[{g.name},{{t}}]", T)) for g in scenario.sgs},
        x_vpp={v.name: _per_period(sol, f"xv[{v.name},{{t}}]", T) for v in scenario.vpps},
    )


def _first_conflict(problem, stage):
    """Elastic re-solve: slack every row, find the first period that needs it."""
    elastic = problem
    elastic.binaries = set()
    penalty = 1e6
    for i, row in enumerate(list(elastic.rows)):
        if row.sense in (">=", "=="):
            j = elastic.add_var(f"_pos[{i}]", cost=penalty)
            row.coeffs[j] = 1.0
        if row.sense in ("<=", "=="):
            j = elastic.add_var(f"_neg[{i}]", cost=penalty)
            row.coeffs[j] = -1.0
    res = solve_lp(elastic)
    if res.status != "optimal":
        return InfeasibleMarketError(stage, -1, "unknown", "elastic relaxation failed too")
    worst = []
    for name, j in elastic.col_index.items():
        if name.startswith("_") and res.x[j] > 1e-6:
            row = elastic.rows[int(name[5:-1])]
            family = row.name.split("[")[0]
            period = int(row.name.rstrip("]").rsplit(",", 1)[-1]) if "," in row.name \
                else int(row.name.split("[")[1].rstrip("]"))
            worst.append((period, family, res.x[j]))
    if not worst:
        return InfeasibleMarketError(stage, -1, "unknown", "no slack used; numerical failure")
    worst.sort()
    period, family, amount = worst[0]
    return InfeasibleMarketError(stage, period, family, f"violated by about {amount:.3g}")


def solve_pipeline(scenario, surfaces):
    """Commitment, relaxation and dispatch in sequence; returns solution and prices.

    The commitment run fixes generator states; the relaxation's duals give
    the inertia prices (commitment masked for generators); the dispatch
    run's duals give nodal energy and droop prices. Infeasibility at any
    stage raises InfeasibleMarketError naming the first conflicting period
    and row family.
    """
    scuc = build_clearing_problem(scenario, surfaces, "scuc")
    mip = solve_milp(scuc)
    if mip.status != "optimal":
        raise _first_conflict(scuc, "scuc")
    uc = _decode_uc(scenario, mip)

    relax = build_clearing_problem(scenario, surfaces, "continuous_scuc")
    rel = solve_lp(relax)
    if rel.status != "optimal":
        raise _first_conflict(relax, "continuous_scuc")
    if rel.objective > mip.objective + 1e-6 * (1.0 + abs(mip.objective)):
        logger.warning("relaxation objective %.6f above commitment objective %.6f",
                       rel.objective, mip.objective)

    sced = build_clearing_problem(scenario, surfaces, "sced", fixed_uc=uc)
    disp = solve_lp(sced)
    if disp.status != "optimal":
        raise _first_conflict(sced, "sced")

    solution, xv = _decode(scenario, surfaces, disp, uc)
    T = scenario.periods

    lam_in = np.array([rel.dual(f"rocof[{t}]") for t in range(T)])
    lam_dr2 = np.array([rel.dual(f"qss[{t}]") for t in range(T)])
    lam_dr3 = np.array([disp.dual(f"qss[{t}]") for t in range(T)])
    k1_2 = np.zeros(T)
    k2_2 = np.zeros(T)
    k1_3 = np.zeros(T)
    k3_3 = np.zeros(T)
    k4_3 = np.zeros(T)
    for t in range(T):
        for hp, plane in enumerate(surfaces[t].planes):
            mu2 = rel.dual(f"nadir[{hp},{t}]")
            mu3 = disp.dual(f"nadir[{hp},{t}]")
            k1_2[t] += plane.k1 * mu2
            k2_2[t] += plane.k2 * mu2
            k1_3[t] += plane.k1 * mu3
            k3_3[t] += plane.k3 * mu3
            k4_3[t] += plane.k4 * mu3

    def clip(a, what):
        if np.min(a, initial=0.0) < -1e-7:
            raise RuntimeError(f"negative {what} price from the dual extraction: {np.min(a)}")
        return np.maximum(a, 0.0)

    prices = PriceSchedule(
        energy={n: np.array([disp.dual(f"bal[{n},{t}]") for t in range(T)]) for n in scenario.buses},
        sg_inertia={g.name: clip(uc.x[g.name] * (lam_in + k1_2), "generator inertia")
                    for g in scenario.sgs},
        sg_droop={g.name: clip(uc.x[g.name] * (lam_dr2 + k2_2), "generator droop")
                  for g in scenario.sgs},
        vpp_inertia=clip(lam_in + k1_2, "aggregate inertia"),
        vpp_droop=clip(lam_dr3 + k4_3, "aggregate droop"),
        fm_inertia=clip(k1_3, "grid-forming inertia"),
        fm_droop=clip(lam_dr3 + k3_3, "grid-forming droop"),
    )
    return solution, prices


def settle(solution, prices, scenario):
    """Per-provider accounting: as-bid cost, marginal revenue, profit.

    The sum of provider costs reproduces the dispatch objective exactly,
    because the objective is built from the same offer terms.
    """
    en, inr, dr = scenario.offers.energy, scenario.offers.inertia, scenario.offers.droop
    dt = scenario.dt
    lines = []

    def add(provider, kind, service, qty, offer, price):
        q = float(np.sum(qty) * dt)
        lines.append(SettlementLine(provider, kind, service, q,
                                    float(np.sum(np.asarray(offer) * qty) * dt),
                                    float(np.sum(np.asarray(price) * qty) * dt)))

    for g in scenario.sgs:
        nodal = prices.energy[g.bus]
        add(g.name, "sg", "energy", solution.p_sg[g.name], en[g.name], nodal)
        add(g.name, "sg", "inertia", solution.uc.x[g.name] * g.inertia, 0.0,
            prices.sg_inertia[g.name])
        add(g.name, "sg", "droop", solution.uc.x[g.name] * g.droop, 0.0,
            prices.sg_droop[g.name])
    for r in scenario.regs:
        nodal = prices.energy[r.bus]
        add(r.name, "reg", "energy", solution.p_reg[r.name], en[r.name], nodal)
        add(r.name, "reg", "inertia", solution.h_reg[r.name], inr[r.name], prices.fm_inertia)
        add(r.name, "reg", "droop", solution.k_reg[r.name], dr[r.name], prices.fm_droop)
    for e in scenario.esss:
        nodal = prices.energy[e.bus]
        add(e.name, "ess", "energy", solution.p_ess[e.name], en[e.name], nodal)
        add(e.name, "ess", "inertia", solution.h_ess[e.name], inr[e.name], prices.fm_inertia)
        add(e.name, "ess", "droop", solution.k_ess[e.name], dr[e.name], prices.fm_droop)
    for v in scenario.vpps:
        nodal = prices.energy[v.bus]
        add(v.name, "vpp", "energy", solution.p_vppg[v.name], en[f"{v.name}.sg"], nodal)
        add(v.name, "vpp", "energy_flex", solution.p_vppr[v.name], en[f"{v.name}.flex"], nodal)
        add(v.name, "vpp", "inertia", solution.h_vppr[v.name], inr[v.name], prices.vpp_inertia)
        add(v.name, "vpp", "droop", solution.k_vpp[v.name], dr[v.name], prices.vpp_droop)
    return Settlement(tuple(lines), solution.objective)


@dataclass(frozen=True)
class AuditRecord:
    period: int
    dd: float
    rocof: float
    nadir: float
    qss: float
    rocof_ok: bool
    nadir_ok: bool
    qss_ok: bool
    ode_nadir: float | None = None


@dataclass(frozen=True)
class AuditReport:
    records: tuple
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(r.rocof_ok and r.nadir_ok and r.qss_ok for r in self.records)

    @property
    def violations(self) -> tuple:
        return tuple(r for r in self.records
                     if not (r.rocof_ok and r.nadir_ok and r.qss_ok))


def frequency_audit(solution, scenario, ode_check=False, tolerance=1e-4):
    """Replay each period's cleared mix through the staged dynamics.

    Uses the actual governed and total inertia from the dispatch (not the
    conservative pinning the planes were fitted with), so a pass here means
    the physical staged model respects every boundary. With ode_check the
    closed form is cross-checked against its numerical twin.
    """
    b = scenario.boundaries
    records = []
    for t in range(scenario.periods):
        dd = scenario.dd(t)
        if dd <= 0.0:
            records.append(AuditRecord(t, dd, 0.0, 0.0, 0.0, True, True, True))
            continue
        h_gv = float(solution.h_gv[t])
        h_to = float(solution.h_to[t])
        k_g = float(solution.k_g[t])
        k_fm = float(solution.k_fm[t])
        k_vpp = float(solution.k_vpp_total[t])
        rocof = dd / (2.0 * h_gv) if h_gv > 0 else math.inf
        qss = dd / (k_g + k_fm + k_vpp)  # settling bound convention: full disturbance
        coeffs = stage_coefficients(h_gv, h_to, k_g, k_fm, k_vpp, 0.0,
                                    b.t_gv, dd, b.tau2, allow_overdamped=True)
        res = nadir(coeffs)
        ode_val = None
        if ode_check:
            traj = simulate_staged(coeffs, horizon=max(40.0, 4.0 * b.tau2), dt=0.002)
            ode_val = float(traj.delta_f_nadir)
        records.append(AuditRecord(
            t, dd, rocof, float(res.delta_f_nadir), qss,
            rocof <= b.rocof_max + 1e-9,
            res.delta_f_nadir >= -(b.f_nadir_max + tolerance),
            qss <= b.qss_ref + 1e-9,
            ode_val,
        ))
    report = AuditReport(tuple(records), tolerance)
    for r in report.violations:
        logger.warning("period %d violates a frequency boundary: rocof %.4f nadir %.4f qss %.4f",
                       r.period, r.rocof, r.nadir, r.qss)
    return report


def scenario_without_vpps(scenario):
    """Counterfactual: drop the aggregates, grow the generators to compensate.

    Every independent generator's rating, ramp, inertia and governor droop
    scale by the same factor so total installed capacity is unchanged;
    minimum outputs stay fixed so the counterfactual is never infeasible
    where the original was feasible at low load.
    """
    lost = sum(v.p_max for v in scenario.vpps)
    base = sum(g.p_max for g in scenario.sgs)
    if base <= 0 and lost > 0:
        raise ValueError("cannot reassign aggregate capacity without generators")
    scale = 1.0 + (lost / base if base > 0 else 0.0)
    sgs = tuple(replace(g, p_max=g.p_max * scale, ramp=g.ramp * scale,
                        inertia=g.inertia * scale, droop=g.droop * scale)
                for g in scenario.sgs)
    offers = OfferBook(
        energy={k: v for k, v in scenario.offers.energy.items() if "." not in k},
        inertia={k: v for k, v in scenario.offers.inertia.items()
                 if k not in {x.name for x in scenario.vpps}},
        droop={k: v for k, v in scenario.offers.droop.items()
               if k not in {x.name for x in scenario.vpps}},
    )
    return replace(scenario, name=f"{scenario.name}-novpp", sgs=sgs, vpps=(), offers=offers)


def scenario_from_system(system, aggregates):
    """Normalize a full system description into a clearing scenario.

    system carries unit objects with embedded scalar costs and array
    profiles (the shape the scenario files load into); aggregates maps
    each station name to its fitted reduced model, whose non-delayed
    inertia becomes the station's governed-block contribution. Scalar
    costs broadcast to one offer row per period. The staged response
    carries a single governor lag, so all independent generators must
    share one t_g; a station with no ramp limit gets a full-swing limit
    so its energy block is unconstrained between periods.
    """
    if not system.sgs:
        raise ValueError("the staged model needs at least one independent "
                         "generator to anchor the governor time constant")
    t_gs = [g.t_g for g in system.sgs]
    if max(t_gs) - min(t_gs) > 1e-9:
        raise ValueError("independent generators must share one governor time "
                         "constant; the staged response carries a single lag")
    missing = [v.name for v in system.vpps if v.name not in aggregates]
    if missing:
        raise ValueError(f"no fitted aggregate for station(s): {', '.join(missing)}")

    T = system.n_periods

    def row(cost):
        return (float(cost),) * T

    energy, inertia, droop = {}, {}, {}
    for g in system.sgs:
        energy[g.name] = row(g.cost_energy)
    for r in system.regs:
        energy[r.name] = row(r.cost_energy)
        inertia[r.name] = row(r.cost_inertia)
        droop[r.name] = row(r.cost_droop)
    for e in system.esss:
        energy[e.name] = row(e.cost_energy)
        inertia[e.name] = row(e.cost_inertia)
        droop[e.name] = row(e.cost_droop)
    vpps = []
    for v in system.vpps:
        pf = v.portfolio
        energy[f"{v.name}.sg"] = row(v.cost_energy_sg)
        energy[f"{v.name}.flex"] = row(v.cost_energy_rest)
        inertia[v.name] = row(v.cost_inertia)
        droop[v.name] = row(v.cost_droop)
        ramp = pf.ramp_small_sg if pf.ramp_small_sg > 0 else pf.k_g_fraction * pf.p_en_max
        vpps.append(Vpp(
            name=v.name, bus=v.bus, p_max=pf.p_en_max, p_min=pf.p_en_min,
            sg_share=pf.k_g_fraction, ramp=ramp,
            h_sg=aggregates[v.name].h_vppg,
            p_inertia_max=pf.p_in_max, p_droop_max=pf.p_df_max,
            p_inertia_min=pf.p_in_min, p_droop_min=pf.p_df_min,
        ))

    domain = None
    if system.surface_domain:
        d = system.surface_domain
        try:
            domain = SurfaceDomain(h_to=tuple(d["h_to"]), k_g=tuple(d["k_g"]),
                                   k_fm=tuple(d["k_fm"]), k_vpp=tuple(d["k_vpp"]))
        except KeyError as exc:
            raise ValueError(f"surface domain is missing the {exc.args[0]!r} range") from None

    b = system.boundaries
    return Scenario(
        name=system.name,
        periods=T,
        dt=system.dt_hours,
        buses=tuple(range(system.n_buses)),
        ref_bus=system.ref_bus,
        lines=tuple(Line(ln.from_bus, ln.to_bus, ln.susceptance) for ln in system.lines),
        loads={n: tuple(float(x) for x in system.load[n]) for n in range(system.n_buses)},
        sgs=tuple(Sg(g.name, g.bus, g.p_min, g.p_max, g.ramp, g.h, g.k,
                     min_up=g.min_up, min_down=g.min_down) for g in system.sgs),
        regs=tuple(Reg(r.name, r.bus, tuple(float(x) for x in system.reg_avail[i]),
                       h_max=r.h_max, k_max=r.k_max)
                   for i, r in enumerate(system.regs)),
        esss=tuple(Ess(e.name, e.bus, e.p_max, e.e_cap, soc0=e.soc0, eff=e.eta,
                       soc_min=e.soc_min, soc_max=e.soc_max, h_max=e.h_max, k_max=e.k_max)
                   for e in system.esss),
        vpps=tuple(vpps),
        boundaries=Boundaries(b.rocof_max, b.nadir_max, b.qss_ref,
                              system.tau2, t_gs[0], system.disturbance_fraction),
        offers=OfferBook(energy=energy, inertia=inertia, droop=droop),
        surface_domain=domain,
    )
