"""Reduction of a heterogeneous DER portfolio to a compact VPP model.

The pipeline is: capacity-share aggregation of inertia, per-kind homogeneous
aggregation of droop sources, assembly of the full (per-kind) closed-loop
model, then a stochastic-gradient fit of a low-order transfer function whose
standalone frequency response reproduces the full model's nadir and settled
deviation over a population of event sizes.

The fitted objective per sampled event dd is

    ((f_red(t_n) - f_full(t_n))^2 + (f_red_qss - f_full_qss)^2
     + lambda_nadir * (f_red'(t_n) * 1s)^2
     + lambda_qss * ((f_red'(T_q) - f_full'(T_q)) * 1s)^2) / nadir_scale^2

with t_n the full model's nadir time, precomputed once and held fixed, and
the settled values evaluated analytically from DC gains. Both models are
linear in dd, so each term scales with dd^2; minibatches therefore rescale
the deterministic unit-response gradient by the mean squared event size of
the batch, which keeps the stochastic-approximation character while every
gradient stays exact.

Gradients are analytic for every order: the staged response is a product of
matrix exponentials and the derivative of each factor comes from the
augmented block-matrix identity expm([[M, dM], [0, M]] t) -> upper-right
block equals the directional derivative of expm(M t).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .dynamics import (
    DEFAULT_STEP,
    GUARD_BAND,
    NADIR_HORIZON,
    FrequencyModel,
    UnstableSimulationError,
    simulate_full_order,
    simulate_many,
)
from .models import DEFAULT_TAU1, DEFAULT_TAU2, TransferFunction, build_der_tf

__all__ = [
    "KindAggregate",
    "AggregateVpp",
    "FitConfig",
    "FitReport",
    "MapeReport",
    "aggregate_inertia",
    "aggregate_homogeneous",
    "assemble_heterogeneous",
    "fit_reduced_model",
    "evaluate_mape",
]

_EPS = 1e-8  # positivity floor for fitted coefficients
# fastest closed-loop mode a fitted aggregate may carry (rad/s); physical
# DER responses have no sub-10-ms dynamics, and the cap keeps every model
# integrable by the explicit fixed-step oracle at its default step
STIFF_LIMIT = 150.0

# lag parameters aggregated per kind (weighted by normalized droop share)
_KIND_PARAMS = {
    "small_sg": ("t_g", "t_r", "t_c", "f_h"),
    "gfm": ("t_fm", "tau1"),
    "ev": ("t_ev",),
    "flex_load": ("t_fl", "t_a"),
}


def aggregate_inertia(portfolio):
    """Capacity-share weighted inertia split (non-delayed, delayed) MW*s/Hz.

    Small synchronous machines contribute from the first instant; grid
    forming converters only after their response delay.
    """
    h_g = 0.0
    h_r = 0.0
    for u in portfolio.units:
        share = u.s_rated / portfolio.s_sys
        if u.kind == "small_sg":
            h_g += share * u.inertia
        elif u.kind == "gfm":
            h_r += share * u.inertia
    return h_g, h_r


@dataclass(frozen=True)
class KindAggregate:
    kind: str
    droop: float  # MW/Hz, capacity-share weighted sum
    params: dict  # equivalent lag parameters
    tf: TransferFunction


def aggregate_homogeneous(units, s_sys):
    """Collapse same-kind units into one equivalent droop source.

    The equivalent droop is the share-weighted sum of unit droops; every lag
    parameter is averaged with weights proportional to each unit's droop
    contribution, which preserves the DC gain exactly and the dominant lag
    to first order.
    """
    units = list(units)
    if not units:
        raise ValueError("cannot aggregate an empty unit list")
    kind = units[0].kind
    if any(u.kind != kind for u in units):
        raise ValueError("aggregate_homogeneous needs units of a single kind")
    kappa = np.array([u.s_rated / s_sys * u.droop for u in units])
    k_eq = float(kappa.sum())
    if k_eq <= 0:
        raise ValueError(f"aggregated {kind} droop must be positive")
    lam = kappa / k_eq
    params = {
        name: float(sum(l * getattr(u, name) for l, u in zip(lam, units)))
        for name in _KIND_PARAMS[kind]
    }
    tf = _kind_tf(kind, k_eq, params)
    return KindAggregate(kind, k_eq, params, tf)


def _kind_tf(kind, k_eq, params):
    from numpy.polynomial import polynomial as npoly

    if kind == "small_sg":
        num = (k_eq, k_eq * params["f_h"] * params["t_r"])
        den = npoly.polymul(
            npoly.polymul([1.0, params["t_g"]], [1.0, params["t_r"]]), [1.0, params["t_c"]]
        )
        return TransferFunction(num, tuple(den), 0.0)
    if kind == "gfm":
        return TransferFunction((k_eq,), (1.0, params["t_fm"]), params["tau1"])
    if kind == "ev":
        return TransferFunction((k_eq,), (1.0, params["t_ev"]), 0.0)
    if kind == "flex_load":
        den = npoly.polymul([1.0, params["t_fl"]], [1.0, params["t_a"]])
        return TransferFunction((k_eq,), tuple(den), 0.0)
    raise ValueError(f"unknown kind {kind!r}")


def assemble_heterogeneous(portfolio, tau2=DEFAULT_TAU2):
    """Full standalone VPP model: one branch per kind present.

    Small-SG governors activate at the system governor delay tau2, grid
    forming converters at their own tau1, EV clusters and flexible loads
    immediately. Machine damping of small SGs, when configured, enters as a
    static parallel branch so the governor transfer function keeps its pure
    droop DC gain. Kinds whose aggregate droop is zero contribute inertia
    and damping only.
    """
    branches = []
    d_static = 0.0
    for kind in ("small_sg", "gfm", "ev", "flex_load"):
        units = portfolio.units_of(kind)
        if not units:
            continue
        if kind == "small_sg":
            d_static = sum(u.s_rated / portfolio.s_sys * u.d_g for u in units)
        if sum(u.s_rated / portfolio.s_sys * u.droop for u in units) <= 0:
            continue
        agg = aggregate_homogeneous(units, portfolio.s_sys)
        delay = tau2 if kind == "small_sg" else agg.tf.delay
        branches.append(TransferFunction(agg.tf.num, agg.tf.den, delay))
    if d_static > 0.0:
        branches.append(TransferFunction((d_static,), (1.0,), 0.0))
    h_g, h_r = aggregate_inertia(portfolio)
    if h_g + h_r <= 0 and not branches:
        raise ValueError(f"portfolio {portfolio.name!r} has neither inertia nor droop")
    tau1_eff = _effective_tau1(portfolio)
    return FrequencyModel(
        [(h_g, 0.0), (h_r, tau1_eff)], branches, label=f"{portfolio.name}:full"
    )


def _effective_tau1(portfolio):
    gfm = portfolio.units_of("gfm")
    if not gfm:
        return DEFAULT_TAU1
    kappa = np.array([u.s_rated / portfolio.s_sys * u.droop for u in gfm])
    if kappa.sum() <= 0:
        return float(np.mean([u.tau1 for u in gfm]))
    return float(np.sum(kappa * np.array([u.tau1 for u in gfm])) / kappa.sum())


# ---------------------------------------------------------------------------
# Reduced model container


@dataclass
class AggregateVpp:
    """Reduced-order VPP frequency model plus market-relevant metadata."""

    name: str
    h_vppg: float  # MW*s/Hz, non-delayed inertia
    h_vppr: float  # MW*s/Hz, delayed (converter) inertia
    g_vpp: TransferFunction  # reduced droop response, DC gain = k_vpp
    delayed_droop_share: float  # fraction of DC droop activating at tau1
    tau1: float
    tau2: float
    fit: "FitReport | None" = None

    @property
    def k_vpp(self):
        return self.g_vpp.dc_gain()

    @property
    def t_vpp(self):
        """Dominant lag: first-moment time constant of the reduced response."""
        num = np.asarray(self.g_vpp.num, dtype=float)
        den = np.asarray(self.g_vpp.den, dtype=float)
        t_num = num[1] / num[0] if len(num) > 1 and num[0] != 0 else 0.0
        t_den = den[1] if len(den) > 1 else 0.0
        return float(t_den - t_num)

    def reduced_frequency_model(self):
        gamma = self.delayed_droop_share
        branches = []
        if gamma < 1.0:
            branches.append(
                TransferFunction(
                    tuple((1.0 - gamma) * c for c in self.g_vpp.num), self.g_vpp.den, 0.0
                )
            )
        if gamma > 0.0:
            branches.append(
                TransferFunction(
                    tuple(gamma * c for c in self.g_vpp.num), self.g_vpp.den, self.tau1
                )
            )
        return FrequencyModel(
            [(self.h_vppg, 0.0), (self.h_vppr, self.tau1)],
            branches,
            label=f"{self.name}:reduced",
        )


# ---------------------------------------------------------------------------
# Fit machinery


@dataclass
class FitConfig:
    order: int = 1  # reduced denominator degree (1, 2 or 3)
    disturbance_mean: float = 80.0  # MW
    disturbance_std: float = 12.0
    n_scenarios: int = 500
    lambda_nadir: float = 10.0  # weight on the slope at the frozen nadir time
    lambda_qss: float = 10.0  # weight on the slope mismatch at the settling probe
    eta0: float = 1.0  # initial step size
    decay: float = 0.002  # step schedule eta0 / (1 + decay * iter)
    batch_size: int = 32
    max_iter: int = 2500
    tol: float = 1e-9  # relative objective improvement treated as converged
    seed: int = 0
    nadir_scale: float = 0.4  # Hz, response normalization
    qss_slope_time: float = 30.0  # s, settling probe for the slope penalty
    eval_every: int = 10
    patience: int = 12


@dataclass
class FitReport:
    """Optimization record of one reduced-model fit.

    final_objective is the loss at the last iterate of the winning run and
    best_objective the lowest loss seen in it; for orders above one the
    returned parameters are the best validation-scored iterate of that run,
    whose own loss may sit slightly above best_objective.
    """

    order: int
    converged: bool
    iterations: int
    final_objective: float
    best_objective: float
    objective_trace: list
    seed: int
    lambda_nadir: float = 10.0
    lambda_qss: float = 10.0
    n_scenarios: int = 0
    mape_nadir: float = float("nan")  # percent, vs the full model
    mape_qss: float = float("nan")
    message: str = ""


@dataclass
class MapeReport:
    nadir_mape: float  # percent
    qss_mape: float  # percent
    n_scenarios: int
    failures: list  # (scenario index, reason)


def _realization(theta, r):
    """Controllable-canonical matrices for N(s)/D(s) and their derivatives.

    theta = [n_0 .. n_{r-1}, h_1 .. h_r], D(s) = 1 + h_1 s + ... + h_r s^r,
    N(s) = n_0 + ... + n_{r-1} s^{r-1}. Returns (A, b, c, dA_list, dc_list)
    with one derivative pair per theta entry.
    """
    n = np.asarray(theta[:r], dtype=float)
    h = np.concatenate([[1.0], np.asarray(theta[r:], dtype=float)])
    hr = h[r]
    a = h[:r] / hr
    A = np.zeros((r, r))
    if r > 1:
        A[:-1, 1:] = np.eye(r - 1)
    A[-1, :] = -a
    b = np.zeros(r)
    b[-1] = 1.0
    c = n / hr
    dA, dc = [], []
    for j in range(r):  # numerator coefficients
        dA.append(np.zeros((r, r)))
        e = np.zeros(r)
        e[j] = 1.0 / hr
        dc.append(e)
    for j in range(1, r):  # h_1 .. h_{r-1}
        m = np.zeros((r, r))
        m[-1, j] = -1.0 / hr
        dA.append(m)
        dc.append(np.zeros(r))
    # h_r: every monic coefficient and c entry rescales
    m = np.zeros((r, r))
    m[-1, :] = h[:r] / hr**2
    dA.append(m)
    dc.append(-n / hr**2)
    return A, b, c, dA, dc


class _ReducedEvaluator:
    """Unit-event response, slope and analytic gradients of a reduced model.

    States are [delta_f, x_immediate, x_delayed, 1]; the immediate copy
    carries (1 - gamma) of the droop response, the delayed copy gamma of it
    starting at tau1. Propagation multiplies stage matrix exponentials.
    """

    def __init__(self, r, h_g, h_r, gamma, tau1):
        if h_g <= 0:
            raise ValueError("reduced standalone model needs non-delayed inertia")
        self.r = r
        self.h_g = h_g
        self.h_r = h_r
        self.gamma = gamma
        self.tau1 = tau1
        self.copies = []
        if gamma < 1.0:
            self.copies.append((1.0 - gamma, 0.0))
        if gamma > 0.0:
            self.copies.append((gamma, tau1))
        self.n_states = 1 + r * len(self.copies) + 1  # + constant forcing state

    def _stage_matrices(self, theta, t):
        r = self.r
        A, b, c, dA, dc = _realization(theta, r)
        n_par = len(dA)
        sz = self.n_states
        h_now = self.h_g + (self.h_r if t >= self.tau1 else 0.0)
        M = np.zeros((sz, sz))
        dMs = [np.zeros((sz, sz)) for _ in range(n_par)]
        M[0, sz - 1] = -1.0 / (2.0 * h_now)  # unit event forcing
        off = 1
        for scale, delay in self.copies:
            sl = slice(off, off + r)
            if delay <= t + 1e-12:
                M[sl, sl] = A
                M[sl, 0] = b
                M[0, sl] = -scale * c / (2.0 * h_now)
                for j in range(n_par):
                    dMs[j][sl, sl] = dA[j]
                    dMs[j][0, sl] = -scale * dc[j] / (2.0 * h_now)
            off += r
        return M, dMs

    def stage_a_unstable(self, theta):
        M, _ = self._stage_matrices(theta, 0.0)
        core = M[:-1, :-1]
        return np.any(np.linalg.eigvals(core).real > 1e-9)

    def tail_unstable(self, theta):
        M, _ = self._stage_matrices(theta, self.tau1)
        core = M[:-1, :-1]
        return np.any(np.linalg.eigvals(core).real > -1e-12)

    def invalid(self, theta):
        """Unstable in either stage, or carrying modes too stiff for the
        fixed-step trajectory oracle."""
        for t_probe in (0.0, self.tau1):
            M, _ = self._stage_matrices(theta, t_probe)
            eig = np.linalg.eigvals(M[:-1, :-1])
            threshold = 1e-9 if t_probe < self.tau1 else -1e-12
            if np.any(eig.real > threshold) or np.any(np.abs(eig.real) > STIFF_LIMIT):
                return True
        return False

    def response(self, theta, times, want_grad=True):
        """f, f' and their theta-gradients at the requested times.

        Returns (f, fp, df, dfp) with df/dfp of shape (n_times, n_par);
        gradient arrays are None when want_grad is False.
        """
        times = np.asarray(times, dtype=float)
        order = np.argsort(times)
        sz = self.n_states
        n_par = 2 * self.r
        v = np.zeros(sz)
        v[-1] = 1.0
        dv = np.zeros((n_par, sz))
        f = np.zeros(len(times))
        fp = np.zeros(len(times))
        df = np.zeros((len(times), n_par)) if want_grad else None
        dfp = np.zeros((len(times), n_par)) if want_grad else None

        boundaries = [b for b in (self.tau1,) if b > 0]
        t_now = 0.0
        M, dMs = self._stage_matrices(theta, t_now)
        for idx in order:
            t = times[idx]
            while boundaries and boundaries[0] <= t:
                bnd = boundaries.pop(0)
                v, dv = self._advance(M, dMs, v, dv, bnd - t_now, want_grad)
                t_now = bnd
                M, dMs = self._stage_matrices(theta, t_now)
            w, dw = self._advance(M, dMs, v, dv, t - t_now, want_grad)
            f[idx] = w[0]
            fp[idx] = (M @ w)[0]
            if want_grad:
                df[idx] = dw[:, 0]
                dfp[idx] = np.array(
                    [(dMs[j] @ w + M @ dw[j])[0] for j in range(n_par)]
                )
            v, dv, t_now = w, dw, t
        return f, fp, df, dfp

    @staticmethod
    def _advance(M, dMs, v, dv, dt, want_grad):
        if dt == 0.0:
            return v, dv
        sz = M.shape[0]
        Phi = expm(M * dt)
        w = Phi @ v
        if not want_grad:
            return w, dv
        dw = np.empty_like(dv)
        aug = np.zeros((2 * sz, 2 * sz))
        aug[:sz, :sz] = M
        aug[sz:, sz:] = M
        for j, dM in enumerate(dMs):
            aug[:sz, sz:] = dM
            dPhi = expm(aug * dt)[:sz, sz:]
            dw[j] = dPhi @ v + Phi @ dv[j]
        return w, dw


def _model_split(full):
    """(h_g, h_r, tau1, gamma): activation structure of a full VPP model.

    Non-delayed inertia is active from t=0; any delayed inertia defines
    tau1. gamma is the DC-droop share of branches activating exactly at
    tau1 (the converter share), which the reduced model reproduces with a
    delayed copy. Branches with other delays (governor activation) are
    folded into the immediate copy.
    """
    h_g = sum(h for h, d in full.inertia_blocks if d <= 0)
    h_r = sum(h for h, d in full.inertia_blocks if d > 0)
    delayed = [d for h, d in full.inertia_blocks if d > 0 and h > 0]
    tau1 = delayed[0] if delayed else DEFAULT_TAU1
    k_total = full.dc_droop()
    if k_total <= 0:
        raise ValueError("full model has no DC droop to fit")
    k_tau1 = sum(tf.dc_gain() for tf in full.branches if abs(tf.delay - tau1) < 1e-12)
    return h_g, h_r, tau1, k_tau1 / k_total


def _moment_lag(tf, tau1):
    """First-moment lag of a branch, counting its delay unless the delayed
    reduced copy already reproduces it."""
    num = tf.num
    den = tf.den
    m = (den[1] if len(den) > 1 else 0.0) - (num[1] / num[0] if len(num) > 1 else 0.0)
    if abs(tf.delay - tau1) >= 1e-12:
        m += tf.delay
    return m


def _initial_theta(full, order, tau1, eps=1.0):
    """Moment-matching start: exact DC droop, first-moment composite lag.

    eps in (0, 1] scales the secondary poles and zeros toward a dominant
    single-pole shape: eps -> 0 approaches k0/(1 + t0 s), whose closed loop
    with a positive inertia is second order with positive coefficients and
    therefore always stable.
    """
    from numpy.polynomial import polynomial as npoly

    k0 = full.dc_droop()
    t0 = sum(tf.dc_gain() * _moment_lag(tf, tau1) for tf in full.branches) / k0
    t0 = max(t0, 0.05)
    if order == 1:
        num = [k0]
        den_tail = [t0]
    elif order == 2:
        den = npoly.polymul([1.0, t0], [1.0, eps * t0 / 4.0])
        num = [k0, eps * k0 * t0 / 8.0]
        den_tail = list(den[1:])
    elif order == 3:
        den = npoly.polymul(
            npoly.polymul([1.0, t0], [1.0, eps * t0 / 5.0]), [1.0, eps * t0 / 25.0]
        )
        num = [k0, eps * k0 * t0 / 8.0, eps**2 * k0 * t0 * t0 / 256.0]
        den_tail = list(den[1:])
    else:
        raise ValueError("reduced order must be 1, 2 or 3")
    return np.maximum(np.array(num + den_tail, dtype=float), _EPS)


def _stable_init(full, order, tau1, ev, eps):
    """Initial parameters at the requested eps, retreating toward the
    dominant-pole shape until the staged closed loop is stable."""
    for _ in range(12):
        theta = _initial_theta(full, order, tau1, eps)
        if not ev.invalid(theta):
            return theta
        eps *= 0.35
    return None


def _ladder(order):
    return (1.0,) if order == 1 else (1.0, 0.3)


def _warm_start(full, cfg, tau2, name, ev):
    """Embed the order r-1 fit as an order r start.

    The lower-order solution is padded with a nearly cancelling far
    pole-zero pair, so the start already reproduces a validated trajectory
    and the descent only has to absorb the new degrees of freedom.
    """
    from dataclasses import replace
    from numpy.polynomial import polynomial as npoly

    sub_cfg = replace(cfg, order=cfg.order - 1)
    try:
        sub = fit_reduced_model(full, sub_cfg, tau2=tau2, name=name, _with_report_mape=False)
    except (ValueError, UnstableSimulationError):
        return None
    t_dom = sub.g_vpp.den[1] if len(sub.g_vpp.den) > 1 else 1.0
    # the pad pair must be fast and nearly cancelling so the embedded
    # response stays within a fraction of a percent of the validated one
    t_pole = max(t_dom / 400.0, 1.5 / STIFF_LIMIT)
    num = npoly.polymul(sub.g_vpp.num, [1.0, 0.9 * t_pole])
    den = npoly.polymul(sub.g_vpp.den, [1.0, t_pole])
    theta = np.maximum(np.concatenate([num, den[1:]]), _EPS)
    if ev.invalid(theta):
        return None
    return theta


def fit_reduced_model(full, config=None, tau2=DEFAULT_TAU2, name=None, _with_report_mape=True):
    """Fit a reduced transfer function to a full VPP model.

    `full` may be either the assembled FrequencyModel or a VppPortfolio
    (assembled here with the given tau2). The optimizer is projected
    stochastic gradient descent under an adaptively damped Gauss-Newton
    step metric: minibatches rescale the exact unit-response gradient,
    unstable or ascending candidates are rejected with increased damping,
    and iterates stay inside a positivity box around the moment-matching
    start. Identical configs (including the seed) produce bit-identical
    results.
    """
    cfg = config or FitConfig()
    if cfg.order not in (1, 2, 3):
        raise ValueError("reduced order must be 1, 2 or 3")
    if cfg.n_scenarios < 1:
        raise ValueError("scenario count must be at least 1")
    if cfg.lambda_nadir < 0 or cfg.lambda_qss < 0:
        raise ValueError("penalty weights must be nonnegative")
    if cfg.eta0 <= 0:
        raise ValueError("step size must be positive")
    rng = np.random.default_rng(cfg.seed)

    if hasattr(full, "units"):  # a portfolio
        if name is None:
            name = full.name
        full = assemble_heterogeneous(full, tau2=tau2)
    if name is None:
        name = (full.label or "vpp").split(":")[0]
    h_g, h_r, tau1_eff, gamma = _model_split(full)
    if h_g <= 0:
        raise ValueError(
            f"model {name!r} has no non-delayed inertia; its standalone "
            "response is unbounded at the first instant"
        )

    dds = rng.normal(cfg.disturbance_mean, cfg.disturbance_std, cfg.n_scenarios)
    dds = np.clip(dds, 1e-6, None)
    # the unit response doubles as a stability screen: instability of a
    # linear model is independent of the event size
    unit = simulate_full_order(full, 1.0, horizon=max(NADIR_HORIZON, cfg.qss_slope_time))
    t_n = unit.t_nadir
    u_n = unit.delta_f_nadir
    u_q = -1.0 / full.dc_droop()
    # settled-slope target: the full model's own residual slope at the
    # probe time, so an in-class reduced model can reach zero loss exactly
    u_qs = float(np.interp(cfg.qss_slope_time, unit.t, unit.derivative))

    ev = _ReducedEvaluator(cfg.order, h_g, h_r, gamma, tau1_eff)
    times = np.array([t_n, cfg.qss_slope_time])
    s2_all = float(np.mean(dds**2))
    inv_f = 1.0 / cfg.nadir_scale
    sqrt_ln = math.sqrt(cfg.lambda_nadir)
    sqrt_lq = math.sqrt(cfg.lambda_qss)

    def residuals(th, want_grad=True):
        """Normalized residual vector and its Jacobian (4 x n_par)."""
        f, fp, df, dfp = ev.response(th, times, want_grad=want_grad)
        qss = -1.0 / th[0]
        res = np.array(
            [
                (f[0] - u_n) * inv_f,
                (qss - u_q) * inv_f,
                sqrt_ln * fp[0] * inv_f,
                sqrt_lq * (fp[1] - u_qs) * inv_f,
            ]
        )
        if not want_grad:
            return res, None
        jac = np.zeros((4, th.size))
        jac[0] = df[0] * inv_f
        jac[1, 0] = inv_f / th[0] ** 2
        jac[2] = sqrt_ln * dfp[0] * inv_f
        jac[3] = sqrt_lq * dfp[1] * inv_f
        return res, jac

    def unit_loss_grad(th, want_grad=True):
        res, jac = residuals(th, want_grad=want_grad)
        loss = float(res @ res)
        if not want_grad:
            return loss, None
        return loss, 2.0 * (jac.T @ res)

    def gn_metric(th, mu):
        """Inverse damped Gauss-Newton matrix: the step metric.

        Large mu recovers a (diagonally scaled) plain gradient step, small
        mu a Gauss-Newton step; mu adapts to keep every update a descent
        step of the unit loss.
        """
        _, jac = residuals(th)
        a = jac.T @ jac
        d = np.diag(a).copy()
        d = np.maximum(d, 1e-12 * max(float(d.max()), 1e-300))
        return np.linalg.inv(a + mu * np.diag(d))

    def run_fit(theta0):
        """One projected stochastic descent run from theta0.

        For orders above one the objective pins the response only at the
        nadir time and at steady state, so its minimizers form a manifold
        on which trajectory quality varies; iterates are therefore scored
        periodically on the validation probe and the best-scored iterate
        (the start included) is the run's result.
        """
        theta = theta0.copy()
        cur_loss = unit_loss_grad(theta, want_grad=False)[0]
        obj0 = s2_all * cur_loss
        # global search box: two orders of magnitude around the start; the
        # projection keeps iterates positive and excludes the degenerate
        # near-cancellation corners of the zero-residual manifold
        lo_box = theta / 64.0
        hi_box = theta * 64.0
        mu = 1.0  # damping of the step metric, adapted on rejection
        best_theta = theta.copy()
        best_obj = obj0
        trace = [(0, obj0)]
        converged = False
        iterations = 0
        stall = 0
        last_best = best_obj
        track = cfg.order > 1
        probe_every = 5 * cfg.eval_every
        sel = (probe_mape(theta) if track else math.inf, obj0, theta.copy())

        for it in range(1, cfg.max_iter + 1):
            iterations = it
            batch = rng.integers(0, cfg.n_scenarios, size=cfg.batch_size)
            scale = float(np.mean(dds[batch] ** 2)) / s2_all
            _, grad = unit_loss_grad(theta)
            step = scale * cfg.eta0 / (1.0 + cfg.decay * it)
            for _ in range(15):
                d = gn_metric(theta, mu) @ grad
                # direction-preserving trust scaling: no coordinate moves
                # by more than a factor of 3 in one update
                move = step * d
                cap = np.where(move > 0, 0.75 * theta, 3.0 * theta)
                nonzero = np.abs(move) > 0
                fac = float(
                    np.min(np.where(nonzero, cap / np.maximum(np.abs(move), 1e-300), 1.0))
                )
                cand = np.clip(theta - min(1.0, fac) * move, lo_box, hi_box)
                cand = np.maximum(cand, _EPS)
                if not ev.invalid(cand):
                    cand_loss = unit_loss_grad(cand, want_grad=False)[0]
                    if cand_loss <= cur_loss * 1.001 + 1e-300:
                        theta = cand
                        cur_loss = cand_loss
                        mu = max(mu * 0.5, 1e-6)
                        break
                mu = min(mu * 8.0, 1e9)
            if it % cfg.eval_every == 0 or it == cfg.max_iter:
                obj = s2_all * cur_loss
                trace.append((it, obj))
                if obj < best_obj:
                    best_obj = obj
                    best_theta = theta.copy()
                if track and it % probe_every == 0:
                    cand = (probe_mape(theta), obj, theta.copy())
                    if cand[:2] < sel[:2]:
                        sel = cand
                if last_best - best_obj <= cfg.tol * max(best_obj, 1e-300):
                    stall += 1
                    if stall >= cfg.patience:
                        converged = True
                        break
                else:
                    stall = 0
                last_best = best_obj

        final_obj = s2_all * unit_loss_grad(theta, want_grad=False)[0]
        if final_obj < best_obj:
            best_obj = final_obj
            best_theta = theta.copy()
        if track:
            cand = (probe_mape(theta), final_obj, theta.copy())
            if cand[:2] < sel[:2]:
                sel = cand
            sel_theta, sel_score = sel[2], sel[0]
        else:
            sel_theta, sel_score = best_theta, None
        return sel_theta, sel_score, best_obj, final_obj, trace, converged, iterations

    def to_aggregate(th, report=None):
        r = cfg.order
        return AggregateVpp(
            name=name,
            h_vppg=h_g,
            h_vppr=h_r,
            g_vpp=TransferFunction(tuple(th[:r]), (1.0, *th[r:]), 0.0),
            delayed_droop_share=gamma,
            tau1=tau1_eff,
            tau2=tau2,
            fit=report,
        )

    # validation probe: per-scenario metrics on a fixed scenario subset at a
    # coarser step, with the full model's side computed once per fit
    sel_dds = dds[: min(120, len(dds))]
    probe_dt = 2.0 * DEFAULT_STEP
    nad_ref, qss_ref, fail_ref = _batch_metrics(full, sel_dds, NADIR_HORIZON, probe_dt)
    probe_bad = {i for i, _ in fail_ref}

    def probe_mape(th):
        """Trajectory score of a candidate: nadir MAPE + qss MAPE, percent."""
        try:
            reduced_model = to_aggregate(th).reduced_frequency_model()
            nad, qss, fails = _batch_metrics(reduced_model, sel_dds, NADIR_HORIZON, probe_dt)
        except UnstableSimulationError:
            return math.inf
        bad = probe_bad | {i for i, _ in fails}
        keep = np.array([i for i in range(len(sel_dds)) if i not in bad], dtype=int)
        if keep.size == 0:
            return math.inf
        nm = float(np.mean(np.abs(nad[keep] - nad_ref[keep]) / np.abs(nad_ref[keep])))
        qm = float(np.mean(np.abs(qss[keep] - qss_ref[keep]) / np.abs(qss_ref[keep])))
        return 100.0 * (nm + qm)

    # deterministic restart ladder: runs start from moment-matched shapes
    # plus a warm start embedding the order r-1 fit, and the candidate with
    # the best validation score wins
    starts = [(sc, _stable_init(full, cfg.order, tau1_eff, ev, sc)) for sc in _ladder(cfg.order)]
    if cfg.order > 1:
        theta_w = _warm_start(full, cfg, tau2, name, ev)
        if theta_w is not None:
            starts.append((-1.0, theta_w))
    candidates = []
    for sc, theta0 in starts:
        if theta0 is None:
            continue
        result = run_fit(theta0)
        score = probe_mape(result[0]) if result[1] is None else result[1]
        candidates.append((score, result[3], sc, result))
    if not candidates:
        raise UnstableSimulationError("no stable starting point found for the fit")
    candidates.sort(key=lambda c: (c[0], c[1], c[2]))
    _, _, sc_win, (best_theta, _, best_obj, final_obj, trace, converged, iterations) = candidates[0]

    note = "" if converged else "max iterations reached; best iterate returned"
    if len(starts) > 1:
        which = "warm start" if sc_win < 0 else f"start scale {sc_win:g}"
        tag = f"selected {which} of {len(candidates)} runs"
        note = f"{note}; {tag}" if note else tag
    report = FitReport(
        order=cfg.order,
        converged=converged,
        iterations=iterations,
        final_objective=final_obj,
        best_objective=best_obj,
        objective_trace=trace,
        seed=cfg.seed,
        lambda_nadir=cfg.lambda_nadir,
        lambda_qss=cfg.lambda_qss,
        n_scenarios=cfg.n_scenarios,
        message=note,
    )
    agg = to_aggregate(best_theta, report)
    if _with_report_mape:
        mape = evaluate_mape(full, agg, dds)
        report.mape_nadir = mape.nadir_mape
        report.mape_qss = mape.qss_mape
    return agg


def _divergence_guard(model, dds, horizon):
    """Amplitude-aware divergence threshold for deliberately large events.

    A stable staged linear response is bounded by the inertial ramp up to
    the last activation plus a few settled deviations; genuine divergence
    grows exponentially and crosses any fixed multiple of that envelope.
    """
    dd_max = float(np.max(np.abs(dds)))
    h0 = model.initial_inertia
    t_act = max([t for _, t in model.inertia_blocks] + [tf.delay for tf in model.branches] + [0.0])
    k_dc = model.dc_droop()
    tail = 2.0 / k_dc if k_dc > 0 else horizon / (2.0 * h0)
    envelope = dd_max * (t_act / (2.0 * h0) + tail)
    return max(GUARD_BAND, 12.0 * envelope)


def _batch_metrics(model, dds, horizon, dt):
    """Per-scenario (nadir, qss) with per-scenario failure capture."""
    n = len(dds)
    nadirs = np.full(n, np.nan)
    failures = []
    guard = _divergence_guard(model, dds, horizon)
    try:
        trajs = simulate_many(model, dds, horizon=horizon, dt=dt, guard_band=guard)
        for i, tr in enumerate(trajs):
            nadirs[i] = tr.delta_f_nadir
    except UnstableSimulationError:
        for i, dd in enumerate(dds):
            try:
                tr = simulate_full_order(model, float(dd), horizon=horizon, dt=dt, guard_band=guard)
                nadirs[i] = tr.delta_f_nadir
            except UnstableSimulationError as exc:
                failures.append((i, str(exc)))
    qss = -np.asarray(dds) / model.dc_droop()
    return nadirs, qss, failures


def evaluate_mape(full_model, reduced, dds, horizon=NADIR_HORIZON, dt=DEFAULT_STEP):
    """Mean absolute percentage errors of the reduced model vs the full one.

    Nadirs come from simulated trajectories of both models; settled values
    are analytic from DC gains. Scenarios that fail either simulation are
    excluded from the averages and reported.
    """
    if isinstance(reduced, AggregateVpp):
        reduced = reduced.reduced_frequency_model()
    dds = np.asarray(dds, dtype=float)
    nad_f, qss_f, fail_f = _batch_metrics(full_model, dds, horizon, dt)
    nad_r, qss_r, fail_r = _batch_metrics(reduced, dds, horizon, dt)
    failures = sorted(set(fail_f) | set(fail_r))
    bad = {i for i, _ in failures}
    keep = np.array([i for i in range(len(dds)) if i not in bad], dtype=int)
    if keep.size == 0:
        raise UnstableSimulationError("every scenario failed simulation")
    nadir_mape = float(np.mean(np.abs(nad_r[keep] - nad_f[keep]) / np.abs(nad_f[keep]))) * 100.0
    qss_mape = float(np.mean(np.abs(qss_r[keep] - qss_f[keep]) / np.abs(qss_f[keep]))) * 100.0
    return MapeReport(nadir_mape, qss_mape, int(keep.size), failures)
