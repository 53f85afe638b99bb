"""DER unit models, portfolios and system scenario containers.

Conventions used across the package:

* transfer-function coefficients are stored in ascending powers of s, so
  ``den=[1.0, 0.5]`` means ``1 + 0.5 s``; denominators are normalized so the
  constant term is exactly 1
* frequency deviations are in Hz and are negative for a generation-loss event
* power in MW, inertia in MW*s/Hz (2H multiplies d(delta f)/dt), droop in MW/Hz
* activation delays are in seconds; a branch contributes nothing before its
  activation instant
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import polynomial as npoly

__all__ = [
    "TransferFunction",
    "SmallSg",
    "GfmEquipment",
    "EvCluster",
    "FlexibleLoad",
    "VppPortfolio",
    "SgUnit",
    "RegUnit",
    "EssUnit",
    "VppStation",
    "Line",
    "Boundaries",
    "SystemScenario",
    "build_der_tf",
    "capacity_share",
    "validate_scenario",
]

DEFAULT_TAU1 = 0.5  # s, converter-interfaced (GFM) response delay
DEFAULT_TAU2 = 1.5  # s, governor (mechanical) response delay


@dataclass(frozen=True)
class TransferFunction:
    """Proper rational transfer function with an activation delay.

    ``num`` and ``den`` are ascending-power coefficient tuples. The response
    is zero until ``delay`` seconds after the disturbance, then follows the
    rational dynamics driven by the frequency deviation.
    """

    num: tuple
    den: tuple
    delay: float = 0.0

    def __post_init__(self):
        num = np.atleast_1d(np.asarray(self.num, dtype=float))
        den = np.atleast_1d(np.asarray(self.den, dtype=float))
        num = np.trim_zeros(num, "b")
        den = np.trim_zeros(den, "b")
        if den.size == 0 or den[0] == 0.0:
            raise ValueError("denominator constant term must be nonzero")
        if num.size == 0:
            num = np.zeros(1)
        # normalize the constant denominator term to 1
        num = num / den[0]
        den = den / den[0]
        if num.size > den.size:
            raise ValueError("transfer function must be proper (num order <= den order)")
        if self.delay < 0:
            raise ValueError("activation delay must be nonnegative")
        object.__setattr__(self, "num", tuple(num.tolist()))
        object.__setattr__(self, "den", tuple(den.tolist()))
        object.__setattr__(self, "delay", float(self.delay))

    @property
    def order(self):
        return len(self.den) - 1

    def dc_gain(self):
        return self.num[0]

    def at(self, s):
        """Evaluate the rational part at complex frequency s (delay ignored)."""
        return npoly.polyval(s, np.asarray(self.num)) / npoly.polyval(s, np.asarray(self.den))

    def scaled(self, factor):
        return TransferFunction(tuple(factor * c for c in self.num), self.den, self.delay)

    def state_space(self):
        """Controllable-canonical realization (A, b, c, d) of the rational part.

        Zero-order functions (pure gains) return empty state matrices and the
        gain in d.
        """
        n = self.order
        den = np.asarray(self.den)
        num = np.zeros(n + 1)
        num[: len(self.num)] = self.num
        if n == 0:
            return np.zeros((0, 0)), np.zeros(0), np.zeros(0), float(num[0])
        # monic form in descending powers: s^n + a_{n-1} s^{n-1} + ... + a_0
        lead = den[n]
        a = den[:n] / lead
        b_coef = num / lead
        d = float(b_coef[n])
        c = b_coef[:n] - d * a
        A = np.zeros((n, n))
        A[:-1, 1:] = np.eye(n - 1)
        A[-1, :] = -a
        b = np.zeros(n)
        b[-1] = 1.0
        return A, b, c, d


def _cascade(*pairs):
    """Multiply first-order factors given as (gain_poly ascending) arrays."""
    out = np.array([1.0])
    for p in pairs:
        out = npoly.polymul(out, np.asarray(p, dtype=float))
    return out


# ---------------------------------------------------------------------------
# DER unit types


@dataclass(frozen=True)
class SmallSg:
    """Small synchronous generator inside a VPP.

    Governor + reheat turbine response k_g (1 + f_h t_r s) /
    ((1 + t_g s)(1 + t_r s)(1 + t_c s)). The mechanical damping d_g is an
    optional additive droop-like term handled at assembly time so the
    governor path keeps DC gain k_g exactly.
    """

    s_rated: float  # MW
    k_g: float  # MW/Hz
    t_g: float  # s, governor servo lag
    t_r: float  # s, reheat time constant
    t_c: float  # s, crossover / steam chest lag
    f_h: float  # fraction of HP turbine power
    h_g: float  # MW*s/Hz
    d_g: float = 0.0  # MW/Hz, optional damping

    kind = "small_sg"

    @property
    def droop(self):
        return self.k_g

    @property
    def inertia(self):
        return self.h_g


@dataclass(frozen=True)
class GfmEquipment:
    """Grid-forming converter source (renewable or storage) inside a VPP."""

    s_rated: float  # MW
    k_fm: float  # MW/Hz
    t_fm: float  # s, converter control lag
    h_fm: float  # MW*s/Hz, virtual inertia
    tau1: float = DEFAULT_TAU1  # s, GFM response delay

    kind = "gfm"

    @property
    def droop(self):
        return self.k_fm

    @property
    def inertia(self):
        return self.h_fm


@dataclass(frozen=True)
class EvCluster:
    """Aggregated electric-vehicle charging cluster."""

    s_rated: float  # MW
    k_ev: float  # MW/Hz
    t_ev: float  # s

    kind = "ev"

    @property
    def droop(self):
        return self.k_ev

    @property
    def inertia(self):
        return 0.0


@dataclass(frozen=True)
class FlexibleLoad:
    """Controllable flexible load block.

    The deliverable droop is k_fl * phi_a * c_factor: only the available
    (phi_a) and compensated (c_factor) share of the nominal gain reaches the
    grid, through the load lag t_fl and the actuation lag t_a.
    """

    s_rated: float  # MW
    k_fl: float  # MW/Hz nominal gain
    t_fl: float  # s
    t_a: float  # s
    phi_a: float  # availability factor in [0, 1]
    c_factor: float  # compensation factor in [0, 1]

    kind = "flex_load"

    @property
    def droop(self):
        return self.k_fl * self.phi_a * self.c_factor

    @property
    def inertia(self):
        return 0.0


DER_KINDS = ("small_sg", "gfm", "ev", "flex_load")


def build_der_tf(unit):
    """Small-signal response of one DER unit as a TransferFunction.

    DC gain equals the unit's deliverable droop. GFM units carry their tau1
    activation delay; the governor delay tau2 of small SG units is a system
    parameter and is attached at model-assembly time, so their delay here
    is 0.
    """
    if isinstance(unit, SmallSg):
        num = np.array([unit.k_g, unit.k_g * unit.f_h * unit.t_r])
        den = _cascade([1.0, unit.t_g], [1.0, unit.t_r], [1.0, unit.t_c])
        return TransferFunction(tuple(num), tuple(den), 0.0)
    if isinstance(unit, GfmEquipment):
        return TransferFunction((unit.k_fm,), (1.0, unit.t_fm), unit.tau1)
    if isinstance(unit, EvCluster):
        return TransferFunction((unit.k_ev,), (1.0, unit.t_ev), 0.0)
    if isinstance(unit, FlexibleLoad):
        gain = unit.k_fl * unit.phi_a * unit.c_factor
        den = _cascade([1.0, unit.t_fl], [1.0, unit.t_a])
        return TransferFunction((gain,), tuple(den), 0.0)
    raise TypeError(f"unknown DER unit type: {type(unit).__name__}")


def capacity_share(unit, s_sys):
    """Rated-power share of one unit against the base power s_sys (MW)."""
    if s_sys <= 0:
        raise ValueError("base power must be positive")
    return unit.s_rated / s_sys


# ---------------------------------------------------------------------------
# VPP portfolio


@dataclass
class VppPortfolio:
    """Heterogeneous DER portfolio operated as one VPP.

    Reserve offer boxes are stated in deliverable MW: p_in_min/max bound
    2 * rocof_max * H_vppr and p_df_min/max bound nadir_limit * k_vpp at
    clearing time.
    """

    name: str
    units: list
    s_sys: float  # MW, base power for capacity shares
    rated_capacity: float = 0.0  # MW, defaults to sum of unit ratings
    p_en_min: float = 0.0  # MW, small-SG energy block lower bound (scaled by K_G)
    p_en_max: float = 0.0  # MW, energy offer cap, defaults to rated capacity
    p_in_min: float = 0.0  # MW, delayed-inertia reserve box
    p_in_max: float = 0.0
    p_df_min: float = 0.0  # MW, droop reserve box
    p_df_max: float = 0.0
    ramp_small_sg: float = 0.0  # MW per period, small-SG block ramp

    def __post_init__(self):
        if not self.units:
            raise ValueError(f"portfolio {self.name!r} has no units")
        total = sum(u.s_rated for u in self.units)
        if self.rated_capacity == 0.0:
            self.rated_capacity = total
        if total > self.rated_capacity + 1e-9:
            raise ValueError(
                f"portfolio {self.name!r}: unit ratings {total:.3f} MW exceed "
                f"rated capacity {self.rated_capacity:.3f} MW"
            )
        if self.p_en_max == 0.0:
            self.p_en_max = self.rated_capacity

    @property
    def total_unit_capacity(self):
        return sum(u.s_rated for u in self.units)

    def shares(self):
        return np.array([capacity_share(u, self.s_sys) for u in self.units])

    @property
    def k_g_fraction(self):
        """Small-SG share of the portfolio capacity (K_G in the energy box)."""
        small = sum(u.s_rated for u in self.units if u.kind == "small_sg")
        return small / self.total_unit_capacity

    def units_of(self, kind):
        return [u for u in self.units if u.kind == kind]

    def structural_droop(self):
        """Capacity-share weighted droop of the whole portfolio (MW/Hz)."""
        return float(sum(capacity_share(u, self.s_sys) * u.droop for u in self.units))

    def delayed_droop_share(self):
        """Fraction of structural droop served by delayed (GFM) units."""
        total = self.structural_droop()
        if total == 0.0:
            return 0.0
        gfm = sum(capacity_share(u, self.s_sys) * u.droop for u in self.units_of("gfm"))
        return float(gfm / total)


# ---------------------------------------------------------------------------
# System-level participants


@dataclass
class SgUnit:
    """Independent (transmission-level) synchronous generator."""

    name: str
    bus: int
    p_min: float  # MW
    p_max: float  # MW
    ramp: float  # MW per period
    h: float  # MW*s/Hz
    k: float  # MW/Hz, governor droop delivered whenever committed
    t_g: float  # s, governor lag
    cost_energy: float  # $/MWh
    min_up: int = 1  # periods
    min_down: int = 1

    @property
    def cost_droop(self):
        return 0.0  # SG droop is an obligation of commitment, not an offer


@dataclass
class RegUnit:
    """Grid-forming renewable plant (wind or PV) with an availability profile."""

    name: str
    bus: int
    source: str  # "wind" | "pv"
    p_max: float  # MW nameplate
    h_max: float  # MW*s/Hz virtual-inertia cap
    k_max: float  # MW/Hz droop cap
    cost_energy: float  # $/MWh
    cost_inertia: float  # $/(MW*s/Hz) per period
    cost_droop: float  # $/(MW/Hz) per period


@dataclass
class EssUnit:
    """Grid-forming energy-storage plant (discharge-side market model)."""

    name: str
    bus: int
    p_max: float  # MW
    e_cap: float  # MWh
    soc0: float  # initial state of charge, fraction
    soc_min: float
    soc_max: float
    eta: float  # discharge efficiency
    h_max: float  # MW*s/Hz
    k_max: float  # MW/Hz
    cost_energy: float
    cost_inertia: float
    cost_droop: float


@dataclass
class VppStation:
    """A VPP portfolio placed at a bus with its service offers."""

    portfolio: VppPortfolio
    bus: int
    cost_energy_sg: float  # $/MWh for the small-SG block
    cost_energy_rest: float  # $/MWh for the converter/EV/load block
    cost_inertia: float  # $/(MW*s/Hz) per period, delayed inertia
    cost_droop: float  # $/(MW/Hz) per period

    @property
    def name(self):
        return self.portfolio.name


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    susceptance: float  # MW/rad, DC model


@dataclass(frozen=True)
class Boundaries:
    """Frequency-security limits for a generation-loss event."""

    rocof_max: float  # Hz/s
    nadir_max: float  # Hz, largest tolerated |deviation| at the nadir
    qss_ref: float  # Hz, largest tolerated quasi-steady-state |deviation|


@dataclass
class SystemScenario:
    """Full market + dynamics case: network, fleets, profiles and limits."""

    name: str
    f0: float  # Hz nominal frequency
    dt_hours: float  # market period length
    n_buses: int
    ref_bus: int
    lines: list  # of Line
    load: np.ndarray  # (n_buses, n_periods) MW
    sgs: list  # of SgUnit
    regs: list  # of RegUnit
    reg_avail: np.ndarray  # (n_regs, n_periods) MW available
    esss: list  # of EssUnit
    vpps: list  # of VppStation
    tau1: float = DEFAULT_TAU1
    tau2: float = DEFAULT_TAU2
    boundaries: Boundaries = dataclasses.field(
        default_factory=lambda: Boundaries(0.125, 0.4, 0.25)
    )
    disturbance_fraction: float = 0.08  # dD_t as a share of total load
    disturbance_mean: float = 80.0  # MW, stochastic event size for fitting
    disturbance_std: float = 12.0
    surface_dd_ref: float = 30.0  # MW, reference event for the nadir surface
    surface_domain: dict = field(default_factory=dict)
    schema_version: int = 1

    @property
    def n_periods(self):
        return self.load.shape[1]

    def total_load(self):
        return self.load.sum(axis=0)

    def disturbance(self):
        """Per-period design event dD_t (MW)."""
        return self.disturbance_fraction * self.total_load()


def validate_scenario(sc):
    """Structural checks; returns a list of 'field: problem' strings."""
    problems = []

    def bad(path, msg):
        problems.append(f"{path}: {msg}")

    if sc.f0 <= 0:
        bad("f0", "nominal frequency must be positive")
    if sc.dt_hours <= 0:
        bad("dt_hours", "period length must be positive")
    if sc.load.shape[0] != sc.n_buses:
        bad("load", f"expected {sc.n_buses} bus rows, got {sc.load.shape[0]}")
    if np.any(sc.load < 0):
        bad("load", "negative load entries")
    if not (0 <= sc.ref_bus < sc.n_buses):
        bad("ref_bus", "outside bus range")
    for i, ln in enumerate(sc.lines):
        for end, b in (("from_bus", ln.from_bus), ("to_bus", ln.to_bus)):
            if not (0 <= b < sc.n_buses):
                bad(f"lines[{i}].{end}", "outside bus range")
        if ln.susceptance <= 0:
            bad(f"lines[{i}].susceptance", "must be positive")
    if sc.lines:
        seen = set()
        stack = [sc.ref_bus]
        adj = {}
        for ln in sc.lines:
            adj.setdefault(ln.from_bus, []).append(ln.to_bus)
            adj.setdefault(ln.to_bus, []).append(ln.from_bus)
        while stack:
            b = stack.pop()
            if b in seen:
                continue
            seen.add(b)
            stack.extend(adj.get(b, []))
        if len(seen) < sc.n_buses:
            bad("lines", f"network not connected ({sc.n_buses - len(seen)} isolated buses)")
    for i, g in enumerate(sc.sgs):
        if not (0 <= g.bus < sc.n_buses):
            bad(f"sgs[{i}].bus", "outside bus range")
        if g.p_min < 0 or g.p_max < g.p_min:
            bad(f"sgs[{i}]", "needs 0 <= p_min <= p_max")
        if g.h <= 0 or g.k < 0 or g.t_g <= 0:
            bad(f"sgs[{i}]", "inertia/droop/lag out of range")
        if g.min_up < 1 or g.min_down < 1:
            bad(f"sgs[{i}]", "min up/down must be >= 1 period")
    if sc.reg_avail.shape != (len(sc.regs), sc.n_periods):
        bad("reg_avail", f"expected shape {(len(sc.regs), sc.n_periods)}, got {sc.reg_avail.shape}")
    elif np.any(sc.reg_avail < -1e-12):
        bad("reg_avail", "negative availability")
    for i, r in enumerate(sc.regs):
        if not (0 <= r.bus < sc.n_buses):
            bad(f"regs[{i}].bus", "outside bus range")
        if min(r.p_max, r.h_max, r.k_max) < 0:
            bad(f"regs[{i}]", "negative capability")
    for i, e in enumerate(sc.esss):
        if not (0 <= e.bus < sc.n_buses):
            bad(f"esss[{i}].bus", "outside bus range")
        if not (0 <= e.soc_min <= e.soc0 <= e.soc_max <= 1):
            bad(f"esss[{i}]", "needs 0 <= soc_min <= soc0 <= soc_max <= 1")
        if not (0 < e.eta <= 1):
            bad(f"esss[{i}].eta", "efficiency must be in (0, 1]")
        if e.e_cap <= 0 or e.p_max < 0:
            bad(f"esss[{i}]", "capacity out of range")
    for i, v in enumerate(sc.vpps):
        if not (0 <= v.bus < sc.n_buses):
            bad(f"vpps[{i}].bus", "outside bus range")
        p = v.portfolio
        if p.s_sys <= 0:
            bad(f"vpps[{i}].portfolio.s_sys", "base power must be positive")
        if not (p.p_in_min <= p.p_in_max and p.p_df_min <= p.p_df_max):
            bad(f"vpps[{i}].portfolio", "reserve boxes must have min <= max")
        if p.p_en_min < 0 or p.p_en_max < p.p_en_min:
            bad(f"vpps[{i}].portfolio", "energy box must have 0 <= min <= max")
        for j, u in enumerate(p.units):
            if u.s_rated <= 0:
                bad(f"vpps[{i}].units[{j}].s_rated", "must be positive")
            if u.droop < 0:
                bad(f"vpps[{i}].units[{j}]", "negative droop")
            if isinstance(u, FlexibleLoad) and not (0 <= u.phi_a <= 1 and 0 <= u.c_factor <= 1):
                bad(f"vpps[{i}].units[{j}]", "phi_a and c_factor must be in [0, 1]")
    if sc.tau1 < 0 or sc.tau2 <= sc.tau1:
        bad("tau1/tau2", "need 0 <= tau1 < tau2")
    b = sc.boundaries
    if min(b.rocof_max, b.nadir_max, b.qss_ref) <= 0:
        bad("boundaries", "all limits must be positive")
    if not (0 < sc.disturbance_fraction < 1):
        bad("disturbance_fraction", "must be in (0, 1)")
    if sc.disturbance_std < 0 or sc.disturbance_mean <= 0:
        bad("disturbance", "mean must be positive, std nonnegative")
    return problems
