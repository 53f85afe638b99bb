import math

import numpy as np
import pytest
from scipy.linalg import expm
from scipy.optimize import curve_fit

from conftest import draw_stage_coeffs, draw_stage_params
from vppfreq import dynamics
from vppfreq.dynamics import (
    FrequencyModel,
    OverdampedError,
    UnstableSimulationError,
    closed_form_frequency,
    nadir,
    qss_deviation,
    rocof_max,
    simulate_full_order,
    simulate_many,
    simulate_staged,
    simulate_staged_batch,
    stage_coefficients,
)
from vppfreq.models import TransferFunction


# ---------------------------------------------------------------------------
# full-order branch simulation


def test_inertia_only_ramp():
    # 2 * 400 * df/dt = -80  ->  slope -0.1 Hz/s
    m = FrequencyModel([(400.0, 0.0)], [])
    traj = simulate_full_order(m, 80.0, horizon=2.0)
    assert traj.rocof_max == pytest.approx(0.1, rel=1e-12)
    assert traj.delta_f[-1] == pytest.approx(-0.2, rel=1e-9)
    assert rocof_max(80.0, 400.0) == pytest.approx(0.1)


def test_pure_droop_reaches_qss():
    m = FrequencyModel([(400.0, 0.0)], [TransferFunction((1600.0,), (1.0,))])
    traj = simulate_full_order(m, 80.0, horizon=10.0)
    assert traj.delta_f_qss == pytest.approx(-0.05, abs=1e-9)
    assert qss_deviation(80.0, 1600.0) == pytest.approx(0.05)


def _exact_piecewise(model, dd, times):
    """Independent oracle: exact LTI propagation via the matrix exponential."""
    branch_ss = [tf.state_space() for tf in model.branches]
    offsets = []
    off = 1
    for Ab, _, _, _ in branch_ss:
        offsets.append(off)
        off += Ab.shape[0]
    n = off
    events = model.activation_times(times[-1]) + [times[-1] + 1.0]
    x = np.zeros(n)
    out = np.zeros_like(times)
    for lo, hi in zip(events[:-1], events[1:]):
        A = np.zeros((n, n))
        d_tot = 0.0
        h = model.inertia_at(lo)
        for tf, (Ab, bb, cb, db), o in zip(model.branches, branch_ss, offsets):
            if tf.delay > lo + 1e-12:
                continue
            k = Ab.shape[0]
            if k:
                A[o : o + k, o : o + k] = Ab
                A[o : o + k, 0] = bb
                A[0, o : o + k] = -cb
            d_tot += db
        A[0, 0] = -d_tot
        A[0] /= 2 * h
        u = np.zeros(n)
        u[0] = -dd / (2 * h)
        aug = np.zeros((n + 1, n + 1))
        aug[:n, :n] = A
        aug[:n, n] = u
        mask = (times >= lo - 1e-12) & (times <= hi + 1e-12)
        for idx in np.nonzero(mask)[0]:
            ph = expm(aug * (times[idx] - lo))
            out[idx] = (ph[:n, :n] @ x + ph[:n, n])[0]
        ph = expm(aug * (hi - lo))
        x = ph[:n, :n] @ x + ph[:n, n]
    return out


def test_rk4_matches_exact_lti_solution_with_delays():
    m = FrequencyModel(
        [(150.0, 0.0), (50.0, 0.5)],
        [
            TransferFunction((60.0,), (1.0, 6.0), delay=1.5),  # governor lag
            TransferFunction((12.0,), (1.0,), delay=0.5),  # fast droop
            TransferFunction((8.0,), (1.0, 0.4), delay=0.0),  # EV-style lag
        ],
    )
    traj = simulate_full_order(m, 60.0, horizon=12.0)
    probe = np.array([0.25, 0.5, 1.0, 1.5, 2.5, 5.0, 9.0, 12.0])
    exact = _exact_piecewise(m, 60.0, probe)
    got = np.interp(probe, traj.t, traj.delta_f)
    assert np.max(np.abs(got - exact)) < 5e-8


def test_simulate_many_matches_scalar_runs():
    m = FrequencyModel(
        [(120.0, 0.0)],
        [TransferFunction((40.0,), (1.0, 4.0), delay=1.0), TransferFunction((15.0,), (1.0,))],
    )
    trajs = simulate_many(m, [30.0, 60.0, 90.0], horizon=8.0)
    single = simulate_full_order(m, 60.0, horizon=8.0)
    assert np.array_equal(trajs[1].delta_f, single.delta_f)
    # linear system: response scales with the event size
    assert np.allclose(trajs[2].delta_f, 1.5 * trajs[1].delta_f, atol=1e-12)


def test_zero_online_inertia_raises():
    m = FrequencyModel([(0.0, 0.0), (50.0, 0.5)], [])
    with pytest.raises(UnstableSimulationError, match="inertia"):
        simulate_full_order(m, 10.0, horizon=2.0)


def test_divergence_guard():
    m = FrequencyModel([(50.0, 0.0)], [TransferFunction((-900.0,), (1.0,))])
    with pytest.raises(UnstableSimulationError, match="exceeded"):
        simulate_full_order(m, 50.0, horizon=30.0)


def test_negative_disturbance_rejected():
    m = FrequencyModel([(100.0, 0.0)], [])
    with pytest.raises(ValueError):
        simulate_full_order(m, -5.0)


# ---------------------------------------------------------------------------
# staged closed form


def reference_coeffs(**over):
    base = dict(
        h_gv=200.0, h_to=400.0, k_g=80.0, k_fm=20.0, k_vpp=40.0, k_vppr=10.0,
        t_gv=6.0, dd=80.0, tau2=1.5,
    )
    base.update(over)
    return stage_coefficients(**base)


def test_arrest_stage_hand_values():
    c = reference_coeffs()
    # k2 = 30: f2(1.5) = (80/30) (exp(-30*1.5/800) - 1) = -0.1458597 Hz
    assert closed_form_frequency(c, 1.5) == pytest.approx(-0.1458597, abs=2e-6)
    # dd' = 80 * (200/400) * exp(-0.05625) = 37.8121 MW
    assert c.dd_prime == pytest.approx(37.8121, abs=2e-3)
    assert c.initial_rocof == pytest.approx(80.0 / 400.0)
    assert c.qss_offset == pytest.approx(-37.8121 / 140.0, abs=1e-4)


def test_alpha_omega_formula():
    c = reference_coeffs()
    # alpha = (2 h_to + (k_fm + k_vpp) t_gv) / (4 t_gv h_to)
    assert c.alpha == pytest.approx((800.0 + 60.0 * 6.0) / (4.0 * 6.0 * 400.0))
    assert c.omega == pytest.approx(math.sqrt(140.0 / (2 * 400.0 * 6.0) - c.alpha**2))


def test_stage_boundary_continuity_random(rng):
    for c in draw_stage_coeffs(rng, 60):
        left = closed_form_frequency(c, c.tau2)
        right = closed_form_frequency(c, np.nextafter(c.tau2, np.inf))
        assert abs(left - right) < 1e-9
        # slope continuity
        eps = 1e-7
        num_left = (closed_form_frequency(c, c.tau2) - closed_form_frequency(c, c.tau2 - eps)) / eps
        num_right = (
            closed_form_frequency(c, c.tau2 + eps) - closed_form_frequency(c, c.tau2 + 1e-15)
        ) / eps
        assert num_left == pytest.approx(num_right, rel=5e-4, abs=5e-6)


def test_closed_form_matches_staged_ode(rng):
    coeffs = draw_stage_coeffs(rng, 25)
    times, values = simulate_staged_batch(coeffs, horizon=30.0, dt=1e-3)
    for i, c in enumerate(coeffs):
        analytic = closed_form_frequency(c, times[i])
        assert np.max(np.abs(analytic - values[i])) < 2e-3


def test_zero_arrest_droop_degenerates_to_inertial_ramp():
    c = reference_coeffs(k_fm=0.0, k_vppr=0.0, k_vpp=40.0)
    t = np.array([0.3, 0.9, 1.5])
    assert closed_form_frequency(c, t) == pytest.approx(-80.0 * t / 800.0, rel=1e-12)
    assert c.dd_prime == pytest.approx(80.0 * 200.0 / 400.0)


def test_qss_offset_is_limit():
    c = reference_coeffs()
    assert closed_form_frequency(c, 4000.0) == pytest.approx(c.qss_offset, abs=1e-12)


def test_invalid_parameters_raise():
    with pytest.raises(ValueError):
        reference_coeffs(h_gv=0.0)
    with pytest.raises(ValueError):
        reference_coeffs(h_to=100.0)  # below h_gv
    with pytest.raises(ValueError):
        reference_coeffs(k_g=0.0, k_fm=0.0, k_vpp=0.0, k_vppr=0.0)
    with pytest.raises(ValueError):
        reference_coeffs(k_vppr=50.0)  # exceeds k_vpp
    with pytest.raises(ValueError):
        reference_coeffs(t_gv=0.0)


def test_overdamped_raises_with_discriminant():
    with pytest.raises(OverdampedError) as exc:
        reference_coeffs(h_gv=700.0, h_to=800.0, k_g=10.0, k_fm=2.0, k_vpp=2.0,
                         k_vppr=1.0, t_gv=10.0)
    assert exc.value.discriminant >= 0.0


def test_overdamped_closed_form_matches_ode():
    c = stage_coefficients(
        h_gv=700.0, h_to=800.0, k_g=10.0, k_fm=2.0, k_vpp=2.0, k_vppr=1.0,
        t_gv=10.0, dd=60.0, tau2=1.5, allow_overdamped=True,
    )
    assert not c.underdamped
    times, values = simulate_staged_batch([c], horizon=60.0, dt=1e-3)
    analytic = closed_form_frequency(c, times[0])
    assert np.max(np.abs(analytic - values[0])) < 2e-3


def test_nadir_matches_ode_argmin(rng):
    picked = []
    for _ in range(30):
        params = draw_stage_params(rng)
        try:
            c = stage_coefficients(**params)
        except OverdampedError:
            continue
        if not nadir(c).monotone:
            picked.append(c)
    assert len(picked) >= 10
    results = [nadir(c) for c in picked]
    # slow tails can dip after the default window; keep every argmin interior
    horizon = max(30.0, 1.3 * max(r.t_nadir for r in results))
    times, values = simulate_staged_batch(picked, horizon=horizon, dt=1e-3)
    for c, res, t, f in zip(picked, results, times, values):
        t_ode, f_ode = dynamics._refine_minimum(t, f)
        assert res.t_nadir == pytest.approx(t_ode, abs=1e-3)
        assert res.delta_f_nadir == pytest.approx(f_ode, abs=1e-4)
        # stationary point of the analytic tail
        eps = 1e-6
        slope = (
            closed_form_frequency(c, res.t_nadir + eps)
            - closed_form_frequency(c, res.t_nadir - eps)
        ) / (2 * eps)
        assert abs(slope) < 1e-8
        assert res.t_nadir > c.tau2


def test_nadir_deeper_than_qss(rng):
    for c in draw_stage_coeffs(rng, 40):
        res = nadir(c)
        assert res.delta_f_nadir <= c.qss_offset + 1e-12


def test_tail_fit_recovers_alpha_omega():
    c = reference_coeffs()
    traj = simulate_staged(c, horizon=30.0, dt=1e-3)
    tail = traj.t > c.tau2 + 0.5
    t, f = traj.t[tail], traj.delta_f[tail]

    def damped(t, a, w, s1, s2, off):
        return np.exp(-a * t) * (s1 * np.sin(w * t) + s2 * np.cos(w * t)) + off

    # crude initialization from the sampled tail: decay from peak envelope,
    # frequency from the spacing of slope sign changes
    p0 = (0.1, 0.2, f.min(), f.max(), f[-1])
    popt, _ = curve_fit(damped, t, f, p0=p0, maxfev=20000)
    assert abs(popt[0]) == pytest.approx(c.alpha, rel=1e-4)
    assert abs(popt[1]) == pytest.approx(c.omega, rel=1e-4)


def test_staged_batch_grid_alignment(rng):
    coeffs = draw_stage_coeffs(rng, 5)
    times, _ = simulate_staged_batch(coeffs, horizon=10.0, dt=1e-3)
    for i, c in enumerate(coeffs):
        # tau2 lies exactly on the grid of its own draw
        assert np.min(np.abs(times[i] - c.tau2)) < 1e-12
        assert times[i, 0] == 0.0
        assert times[i, -1] == pytest.approx(10.0)
        assert np.all(np.diff(times[i]) > 0)
        assert np.all(np.diff(times[i]) <= 1e-3 + 1e-12)


def test_metric_guards():
    with pytest.raises(ValueError):
        rocof_max(10.0, 0.0)
    with pytest.raises(ValueError):
        qss_deviation(10.0, 0.0)
    with pytest.raises(ValueError):
        qss_deviation(-1.0, 10.0)
