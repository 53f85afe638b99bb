"""Post-contingency frequency dynamics.

Two complementary routes are implemented and kept independent of each other:

* ``simulate_full_order`` integrates the closed-loop state space assembled
  from individual response branches, each activated at its own delay, with
  the full disturbance as forcing. This is the reference for aggregation
  quality and for long-horizon QSS values.
* ``stage_coefficients`` / ``closed_form_frequency`` evaluate the staged
  analytic solution of the reduced system frequency model: a ramp at the
  first instant (inertia H_gv only), an exponential arrest once the fast
  (converter) droop is active, and a damped second-order tail once governor
  response arrives at tau2. ``simulate_staged`` numerically integrates the
  same staged ordinary differential equations and is the oracle used to
  check the closed-form algebra.

Sign convention: delta_f <= 0 for a generation-loss event of size dd > 0.
The staged model collapses the small converter delay tau1 to the first
instant, so its arrest stage runs on the total inertia h_to from t = 0+;
the initial-instant slope -dd/(2 h_gv) is exposed separately for RoCoF.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "FrequencyModel",
    "FrequencyTrajectory",
    "StageCoefficients",
    "UnstableSimulationError",
    "OverdampedError",
    "simulate_full_order",
    "simulate_many",
    "stage_coefficients",
    "closed_form_frequency",
    "simulate_staged",
    "simulate_staged_batch",
    "nadir",
    "NadirResult",
    "rocof_max",
    "qss_deviation",
]

NADIR_HORIZON = 30.0  # s, primary response settles within this window
QSS_HORIZON = 120.0  # s
DEFAULT_STEP = 1e-3  # s
GUARD_BAND = 5.0  # Hz, divergence guard


class UnstableSimulationError(RuntimeError):
    pass


class OverdampedError(ValueError):
    """Raised when the stage-3 characteristic roots are real.

    Carries the discriminant so callers can report it or fall back to the
    staged numerical integration.
    """

    def __init__(self, discriminant):
        super().__init__(
            f"stage-3 dynamics are not underdamped (discriminant {discriminant:.6g} >= 0)"
        )
        self.discriminant = discriminant


# ---------------------------------------------------------------------------
# Branch-level model and simulation


@dataclass
class FrequencyModel:
    """Closed-loop frequency model: inertia blocks plus response branches.

    inertia_blocks: list of (H in MW*s/Hz, activation delay s). Delayed
    inertia adds to the swing term from its activation instant on.
    branches: TransferFunction objects mapping delta_f to counteracting
    power (a branch with DC gain k injects -k * delta_f at steady state);
    each starts from rest at its activation delay.
    """

    inertia_blocks: list
    branches: list
    label: str = ""

    def __post_init__(self):
        if not self.inertia_blocks:
            raise ValueError("model needs at least one inertia block")
        for h, d in self.inertia_blocks:
            if h < 0 or d < 0:
                raise ValueError("inertia blocks need H >= 0 and delay >= 0")

    def inertia_at(self, t):
        return sum(h for h, d in self.inertia_blocks if d <= t + 1e-12)

    @property
    def initial_inertia(self):
        return self.inertia_at(0.0)

    @property
    def total_inertia(self):
        return sum(h for h, _ in self.inertia_blocks)

    def dc_droop(self):
        return sum(tf.dc_gain() for tf in self.branches)

    def activation_times(self, horizon):
        times = {0.0}
        times.update(d for _, d in self.inertia_blocks if 0 < d < horizon)
        times.update(tf.delay for tf in self.branches if 0 < tf.delay < horizon)
        return sorted(times)


@dataclass
class FrequencyTrajectory:
    """Sampled frequency-deviation response with extracted metrics."""

    t: np.ndarray
    delta_f: np.ndarray
    derivative: np.ndarray
    rocof_max: float = field(init=False)
    t_nadir: float = field(init=False)
    delta_f_nadir: float = field(init=False)
    delta_f_qss: float = field(init=False)

    def __post_init__(self):
        self.rocof_max = float(np.max(np.abs(self.derivative)))
        self.t_nadir, self.delta_f_nadir = _refine_minimum(self.t, self.delta_f)
        self.delta_f_qss = float(self.delta_f[-1])


def _refine_minimum(t, f):
    """Discrete argmin with one parabolic refinement step."""
    i = int(np.argmin(f))
    if i == 0 or i == len(f) - 1:
        return float(t[i]), float(f[i])
    t0, t1, t2 = t[i - 1], t[i], t[i + 1]
    f0, f1, f2 = f[i - 1], f[i], f[i + 1]
    num = (t1 - t0) ** 2 * (f1 - f2) - (t1 - t2) ** 2 * (f1 - f0)
    den = (t1 - t0) * (f1 - f2) - (t1 - t2) * (f1 - f0)
    if abs(den) < 1e-300:
        return float(t1), float(f1)
    ts = t1 - 0.5 * num / den
    # parabola value at the vertex through the three samples
    la = (ts - t1) * (ts - t2) / ((t0 - t1) * (t0 - t2))
    lb = (ts - t0) * (ts - t2) / ((t1 - t0) * (t1 - t2))
    lc = (ts - t0) * (ts - t1) / ((t2 - t0) * (t2 - t1))
    fs = la * f0 + lb * f1 + lc * f2
    if not (t0 <= ts <= t2) or fs > f1:
        return float(t1), float(f1)
    return float(ts), float(fs)


def _assemble_segment(model, branch_ss, offsets, n_states, t):
    """System matrix for the activation segment containing time t."""
    h = model.inertia_at(t)
    if h <= 0:
        raise UnstableSimulationError(
            f"no online inertia at t={t:.3f} s; initial RoCoF is unbounded"
        )
    A = np.zeros((n_states, n_states))
    d_total = 0.0
    for tf, (Ab, bb, cb, db), off in zip(model.branches, branch_ss, offsets):
        if tf.delay > t + 1e-12:
            continue
        nb = Ab.shape[0]
        if nb:
            sl = slice(off, off + nb)
            A[sl, sl] = Ab
            A[sl, 0] = bb
            A[0, sl] = -cb
        d_total += db
    A[0, 0] = -d_total
    A[0, :] /= 2.0 * h
    return A, h


def _integrate(model, dds, horizon, dt, guard=GUARD_BAND):
    """Batched RK4 over activation-aligned segments.

    Returns (t_grid, delta_f (batch, n), derivative (batch, n)). guard is
    the divergence threshold in Hz; callers simulating deliberately large
    events against small models may widen it.
    """
    dds = np.atleast_1d(np.asarray(dds, dtype=float))
    branch_ss = [tf.state_space() for tf in model.branches]
    offsets = []
    off = 1
    for Ab, _, _, _ in branch_ss:
        offsets.append(off)
        off += Ab.shape[0]
    n_states = off
    batch = dds.shape[0]

    x = np.zeros((batch, n_states))
    events = model.activation_times(horizon) + [horizon]
    t_out = [np.array([0.0])]
    f_out = [np.zeros((batch, 1))]
    A0, h0 = _assemble_segment(model, branch_ss, offsets, n_states, 0.0)
    d_out = [np.full((batch, 1), 0.0) - dds[:, None] / (2.0 * h0)]

    t_now = 0.0
    guard_every = 200
    for seg_start, seg_end in zip(events[:-1], events[1:]):
        A, h = _assemble_segment(model, branch_ss, offsets, n_states, seg_start)
        u = np.zeros((batch, n_states))
        u[:, 0] = -dds / (2.0 * h)
        n_steps = max(1, int(round((seg_end - seg_start) / dt)))
        hstep = (seg_end - seg_start) / n_steps
        At = A.T
        seg_t = seg_start + hstep * np.arange(1, n_steps + 1)
        seg_f = np.empty((batch, n_steps))
        seg_d = np.empty((batch, n_steps))
        for i in range(n_steps):
            k1 = x @ At + u
            k2 = (x + 0.5 * hstep * k1) @ At + u
            k3 = (x + 0.5 * hstep * k2) @ At + u
            k4 = (x + hstep * k3) @ At + u
            x = x + (hstep / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            seg_f[:, i] = x[:, 0]
            seg_d[:, i] = (x @ At + u)[:, 0]
            if i % guard_every == 0 and np.max(np.abs(x[:, 0])) > guard:
                raise UnstableSimulationError(
                    f"|delta_f| exceeded {guard} Hz near t={seg_start + (i + 1) * hstep:.2f} s"
                )
        t_out.append(seg_t)
        f_out.append(seg_f)
        d_out.append(seg_d)
        t_now = seg_end
    if np.max(np.abs(x[:, 0])) > guard:
        raise UnstableSimulationError(f"|delta_f| exceeded {guard} Hz at t={t_now:.2f} s")
    return np.concatenate(t_out), np.concatenate(f_out, axis=1), np.concatenate(d_out, axis=1)


def simulate_full_order(model, dd, horizon=NADIR_HORIZON, dt=DEFAULT_STEP, guard_band=None):
    """Integrate the branch model for one generation-loss event of dd MW.

    Fixed-step RK4 on segments aligned with every activation instant, so
    delays land exactly on step boundaries. Use horizon=QSS_HORIZON when the
    settled value matters.
    """
    if dd < 0:
        raise ValueError("disturbance must be nonnegative (generation loss)")
    t, f, d = _integrate(model, [dd], horizon, dt, guard=guard_band or GUARD_BAND)
    return FrequencyTrajectory(t, f[0], d[0])


def simulate_many(model, dds, horizon=NADIR_HORIZON, dt=DEFAULT_STEP, guard_band=None):
    """Batched variant of simulate_full_order; one trajectory per event size."""
    dds = np.asarray(dds, dtype=float)
    if np.any(dds < 0):
        raise ValueError("disturbances must be nonnegative")
    t, f, d = _integrate(model, dds, horizon, dt, guard=guard_band or GUARD_BAND)
    return [FrequencyTrajectory(t, f[i], d[i]) for i in range(f.shape[0])]


# ---------------------------------------------------------------------------
# Staged analytic solution


@dataclass(frozen=True)
class StageCoefficients:
    """Everything needed to evaluate the staged closed-form response.

    h_gv is the non-delayed inertia (online SGs plus VPP small-SG blocks),
    h_to the total including delayed converter inertia. k_vppr is the
    delayed share of the VPP droop (active in the arrest stage); k_vpp the
    full VPP droop entering the governed stage. dd_prime is the residual
    power deficiency handed to the governed stage at tau2. c1/c2 scale the
    damped sinusoid relative to dd_prime, phi/phi_prime are its phase and
    the derivative phase shift. For an overdamped tail (underdamped=False)
    r1/r2/a1/a2 describe the two real modes instead and omega, c1, c2, phi,
    phi_prime are zero.
    """

    h_gv: float
    h_to: float
    k_g: float
    k_fm: float
    k_vpp: float
    k_vppr: float
    t_gv: float
    dd: float
    tau2: float
    dd_prime: float
    alpha: float
    omega: float
    c1: float
    c2: float
    phi: float
    phi_prime: float
    underdamped: bool = True
    r1: float = 0.0
    r2: float = 0.0
    a1: float = 0.0
    a2: float = 0.0

    @property
    def k_arrest(self):
        """Droop active during the arrest stage (fast converter response)."""
        return self.k_fm + self.k_vppr

    @property
    def k_total(self):
        """Droop active once governors respond."""
        return self.k_g + self.k_fm + self.k_vpp

    @property
    def initial_rocof(self):
        """First-instant slope magnitude dd / (2 h_gv) in Hz/s."""
        return self.dd / (2.0 * self.h_gv)

    @property
    def qss_offset(self):
        """Settled value of the staged solution (Hz, <= 0)."""
        return -self.dd_prime / self.k_total


def _stage2_value(dd, k2, h_to, t):
    t = np.asarray(t, dtype=float)
    if k2 > 0.0:
        return (dd / k2) * np.expm1(-k2 * t / (2.0 * h_to))
    return -dd * t / (2.0 * h_to)


def _stage2_slope(dd, k2, h_to, t):
    t = np.asarray(t, dtype=float)
    return -(dd / (2.0 * h_to)) * np.exp(-k2 * t / (2.0 * h_to))


def stage_coefficients(
    h_gv,
    h_to,
    k_g,
    k_fm,
    k_vpp,
    k_vppr,
    t_gv,
    dd,
    tau2,
    allow_overdamped=False,
):
    """Coefficients of the staged closed-form response.

    Raises OverdampedError when the governed-stage roots are real, unless
    allow_overdamped is set, in which case the real-mode tail is returned
    with underdamped=False.
    """
    if h_gv <= 0 or h_to <= 0:
        raise ValueError("inertia must be positive")
    if h_to + 1e-12 < h_gv:
        raise ValueError("total inertia h_to cannot be below non-delayed h_gv")
    if min(k_g, k_fm, k_vpp, k_vppr) < 0:
        raise ValueError("droop contributions must be nonnegative")
    if k_vppr > k_vpp + 1e-9:
        raise ValueError("delayed VPP droop cannot exceed the full VPP droop")
    if t_gv <= 0:
        raise ValueError("governor equivalent lag must be positive")
    if tau2 <= 0:
        raise ValueError("governor delay tau2 must be positive")
    if dd < 0:
        raise ValueError("disturbance must be nonnegative")
    k3 = k_g + k_fm + k_vpp
    if k3 <= 0:
        raise ValueError("total droop must be positive for a settled response")

    ks = k_fm + k_vpp
    k2 = k_fm + k_vppr
    dd_prime = dd * (h_gv / h_to) * math.exp(-k2 * tau2 / (2.0 * h_to))
    alpha = (2.0 * h_to + ks * t_gv) / (4.0 * t_gv * h_to)
    disc = alpha * alpha - k3 / (2.0 * h_to * t_gv)

    f2 = float(_stage2_value(dd, k2, h_to, tau2))
    f2p = float(_stage2_slope(dd, k2, h_to, tau2))
    base = dict(
        h_gv=h_gv, h_to=h_to, k_g=k_g, k_fm=k_fm, k_vpp=k_vpp, k_vppr=k_vppr,
        t_gv=t_gv, dd=dd, tau2=tau2, dd_prime=dd_prime, alpha=alpha,
    )

    if disc < 0.0:
        omega = math.sqrt(-disc)
        s, c = math.sin(omega * tau2), math.cos(omega * tau2)
        scale = dd_prime * math.exp(-alpha * tau2)
        if scale > 0.0:
            rhs = np.array([(f2 + dd_prime / k3) / scale, f2p / scale])
            M = np.array([[s, c], [omega * c - alpha * s, -(omega * s + alpha * c)]])
            c1, c2 = np.linalg.solve(M, rhs)
        else:
            c1 = c2 = 0.0
        phi = math.atan2(c2, c1) if (c1 != 0.0 or c2 != 0.0) else 0.0
        phi_prime = math.atan2(omega, -alpha)
        return StageCoefficients(
            omega=omega, c1=float(c1), c2=float(c2), phi=phi, phi_prime=phi_prime,
            underdamped=True, **base,
        )

    if not allow_overdamped:
        raise OverdampedError(disc)
    root = math.sqrt(disc)
    r1, r2 = -alpha - root, -alpha + root
    # amplitudes of dd_prime-scaled real modes, continuity at tau2
    if dd_prime > 0.0:
        g0 = (f2 + dd_prime / k3) / dd_prime
        g1 = f2p / dd_prime
        if r1 == r2:  # critically damped, treat as repeated root
            a1 = g0
            a2 = g1 - r1 * g0
        else:
            a2 = (g1 - r1 * g0) / (r2 - r1)
            a1 = g0 - a2
    else:
        a1 = a2 = 0.0
    return StageCoefficients(
        omega=0.0, c1=0.0, c2=0.0, phi=0.0, phi_prime=0.0,
        underdamped=False, r1=r1, r2=r2, a1=float(a1), a2=float(a2), **base,
    )


def closed_form_frequency(coeffs, t):
    """Evaluate the staged solution at times t (scalar or array), in Hz.

    Piecewise: 0 at t = 0, the exponential arrest on (0, tau2], then the
    governed damped tail. Negative times are rejected.
    """
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise ValueError("times must be nonnegative")
    out = np.zeros_like(t_arr, dtype=float)
    early = (t_arr > 0) & (t_arr <= coeffs.tau2)
    late = t_arr > coeffs.tau2
    out[early] = _stage2_value(coeffs.dd, coeffs.k_arrest, coeffs.h_to, t_arr[early])
    if np.any(late):
        tl = t_arr[late]
        if coeffs.underdamped:
            env = coeffs.dd_prime * np.exp(-coeffs.alpha * tl)
            out[late] = env * (
                coeffs.c1 * np.sin(coeffs.omega * tl) + coeffs.c2 * np.cos(coeffs.omega * tl)
            ) + coeffs.qss_offset
        else:
            dt2 = tl - coeffs.tau2
            if coeffs.r1 == coeffs.r2:
                modes = (coeffs.a1 + coeffs.a2 * dt2) * np.exp(coeffs.r1 * dt2)
            else:
                modes = coeffs.a1 * np.exp(coeffs.r1 * dt2) + coeffs.a2 * np.exp(coeffs.r2 * dt2)
            out[late] = coeffs.dd_prime * modes + coeffs.qss_offset
    if np.isscalar(t) or np.ndim(t) == 0:
        return float(out)
    return out


def _stage3_slope(coeffs, t):
    t = np.asarray(t, dtype=float)
    if coeffs.underdamped:
        env = coeffs.dd_prime * np.exp(-coeffs.alpha * t)
        s, c = np.sin(coeffs.omega * t), np.cos(coeffs.omega * t)
        return env * (
            coeffs.c1 * (coeffs.omega * c - coeffs.alpha * s)
            - coeffs.c2 * (coeffs.omega * s + coeffs.alpha * c)
        )
    dt2 = t - coeffs.tau2
    if coeffs.r1 == coeffs.r2:
        return coeffs.dd_prime * np.exp(coeffs.r1 * dt2) * (
            coeffs.a2 + coeffs.r1 * (coeffs.a1 + coeffs.a2 * dt2)
        )
    return coeffs.dd_prime * (
        coeffs.a1 * coeffs.r1 * np.exp(coeffs.r1 * dt2)
        + coeffs.a2 * coeffs.r2 * np.exp(coeffs.r2 * dt2)
    )


@dataclass(frozen=True)
class NadirResult:
    t_nadir: float
    delta_f_nadir: float  # Hz, <= 0
    monotone: bool = False  # True when the tail has no interior extremum


def nadir(coeffs):
    """Deepest frequency deviation of the staged solution.

    The arrest stage decreases monotonically, so the nadir lies in the
    governed stage: the first stationary point after tau2. A tail without
    an interior minimum returns the settled value with monotone=True.
    """
    if coeffs.dd == 0.0:
        return NadirResult(coeffs.tau2, 0.0, monotone=True)
    if coeffs.underdamped:
        r_amp = math.hypot(coeffs.c1, coeffs.c2)
        if r_amp < 1e-15:
            return NadirResult(coeffs.tau2, coeffs.qss_offset, monotone=True)
        theta2 = coeffs.omega * coeffs.tau2 + coeffs.phi + coeffs.phi_prime
        m = math.floor(theta2 / math.pi) + 1
        # minima sit on even multiples of pi for a positive-amplitude mode
        for _ in range(4):
            t_n = (m * math.pi - coeffs.phi - coeffs.phi_prime) / coeffs.omega
            if t_n > coeffs.tau2 + 1e-12 and math.cos(m * math.pi) > 0:
                break
            m += 1
        else:
            return NadirResult(coeffs.tau2, coeffs.qss_offset, monotone=True)
        return NadirResult(t_n, float(closed_form_frequency(coeffs, t_n)))
    # overdamped: single possible stationary point
    a1r1 = coeffs.a1 * coeffs.r1
    a2r2 = coeffs.a2 * coeffs.r2
    if coeffs.r1 == coeffs.r2:
        if coeffs.a2 == 0.0:
            return NadirResult(coeffs.tau2, coeffs.qss_offset, monotone=True)
        dt2 = -(coeffs.a2 + coeffs.r1 * coeffs.a1) / (coeffs.r1 * coeffs.a2)
    else:
        if a1r1 == 0.0 or a2r2 / a1r1 >= 0.0:
            # both modes pull the same way: no interior zero of the slope
            if a1r1 == 0.0 and a2r2 == 0.0:
                return NadirResult(coeffs.tau2, coeffs.qss_offset, monotone=True)
            return NadirResult(coeffs.tau2, coeffs.qss_offset, monotone=True)
        dt2 = math.log(-a2r2 / a1r1) / (coeffs.r1 - coeffs.r2)
    if dt2 <= 0.0 or not math.isfinite(dt2):
        return NadirResult(coeffs.tau2, coeffs.qss_offset, monotone=True)
    t_n = coeffs.tau2 + dt2
    f_n = float(closed_form_frequency(coeffs, t_n))
    if f_n > coeffs.qss_offset:  # stationary point is a maximum; tail sinks to QSS
        return NadirResult(t_n, coeffs.qss_offset, monotone=True)
    return NadirResult(t_n, f_n)


def rocof_max(dd, h_gv):
    """Largest rate of change of frequency, dd / (2 h_gv), in Hz/s."""
    if h_gv <= 0:
        raise ValueError("non-delayed inertia must be positive")
    if dd < 0:
        raise ValueError("disturbance must be nonnegative")
    return dd / (2.0 * h_gv)


def qss_deviation(dd, k_total):
    """Quasi-steady-state deviation magnitude dd / k_total in Hz."""
    if k_total <= 0:
        raise ValueError("total droop must be positive")
    if dd < 0:
        raise ValueError("disturbance must be nonnegative")
    return dd / k_total


# ---------------------------------------------------------------------------
# Staged numerical twin


def simulate_staged_batch(coeff_list, horizon=NADIR_HORIZON, dt=DEFAULT_STEP):
    """RK4 integration of the staged ODEs for several coefficient sets.

    Every set gets its own grid: the arrest stage [0, tau2] and the governed
    stage (tau2, horizon] are integrated with per-set steps chosen <= dt so
    stage boundaries land exactly on grid points. Returns (times, values)
    arrays of shape (n_sets, n_samples).
    """
    cl = list(coeff_list)
    n = len(cl)
    if n == 0:
        raise ValueError("need at least one coefficient set")
    tau2 = np.array([c.tau2 for c in cl])
    if np.any(tau2 >= horizon):
        raise ValueError("horizon must exceed every tau2")
    dd = np.array([c.dd for c in cl])
    h_to = np.array([c.h_to for c in cl])
    k2 = np.array([c.k_arrest for c in cl])
    ks = np.array([c.k_fm + c.k_vpp for c in cl])
    k3 = np.array([c.k_total for c in cl])
    t_gv = np.array([c.t_gv for c in cl])
    ddp = np.array([c.dd_prime for c in cl])

    n2 = int(np.ceil(np.max(tau2) / dt))
    h2 = tau2 / n2
    n3 = int(np.ceil(np.max(horizon - tau2) / dt))
    h3 = (horizon - tau2) / n3

    times = np.empty((n, n2 + n3 + 1))
    values = np.empty((n, n2 + n3 + 1))
    times[:, 0] = 0.0
    values[:, 0] = 0.0

    # arrest stage: 2 h_to f' = -dd - k2 f
    f = np.zeros(n)
    coef = -k2 / (2.0 * h_to)
    force = -dd / (2.0 * h_to)

    def rhs2(y):
        return coef * y + force

    for i in range(n2):
        k_1 = rhs2(f)
        k_2 = rhs2(f + 0.5 * h2 * k_1)
        k_3 = rhs2(f + 0.5 * h2 * k_2)
        k_4 = rhs2(f + h2 * k_3)
        f = f + (h2 / 6.0) * (k_1 + 2.0 * k_2 + 2.0 * k_3 + k_4)
        times[:, 1 + i] = (i + 1) * h2
        values[:, 1 + i] = f

    # governed stage: 2 h_to t_gv f'' + (2 h_to + ks t_gv) f' + k3 f = -dd'
    g = rhs2(f)  # slope continuity at tau2
    a_det = 2.0 * h_to * t_gv
    damp = 2.0 * h_to + ks * t_gv

    def rhs3(y, yp):
        return yp, (-ddp - damp * yp - k3 * y) / a_det

    for i in range(n3):
        k1f, k1g = rhs3(f, g)
        k2f, k2g = rhs3(f + 0.5 * h3 * k1f, g + 0.5 * h3 * k1g)
        k3f, k3g = rhs3(f + 0.5 * h3 * k2f, g + 0.5 * h3 * k2g)
        k4f, k4g = rhs3(f + h3 * k3f, g + h3 * k3g)
        f = f + (h3 / 6.0) * (k1f + 2.0 * k2f + 2.0 * k3f + k4f)
        g = g + (h3 / 6.0) * (k1g + 2.0 * k2g + 2.0 * k3g + k4g)
        times[:, 1 + n2 + i] = tau2 + (i + 1) * h3
        values[:, 1 + n2 + i] = f
    return times, values


def simulate_staged(coeffs, horizon=NADIR_HORIZON, dt=DEFAULT_STEP):
    """Numerical twin of the staged closed form, as a FrequencyTrajectory."""
    t, v = simulate_staged_batch([coeffs], horizon=horizon, dt=dt)
    deriv = np.gradient(v[0], t[0])
    return FrequencyTrajectory(t[0], v[0], deriv)
