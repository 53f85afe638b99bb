"""Linear frequency-security constraints from the staged closed form.

The RoCoF and quasi-steady-state bounds are exact linear inequalities in
system quantities. The nadir bound is nonlinear in the four quantities a
clearing problem controls (total inertia and the three droop families), so
it is replaced by a set of affine planes that under-estimate the sampled
closed-form nadir: satisfying every plane can never hide a true violation
beyond a validated tolerance, and the approximation gap shrinks as planes
are added.

Plane construction is an outer linearization. The sampled nadir is concave
along its curved directions (diminishing returns of droop and inertia), so
tangent planes are placed greedily at the sample where the current plane
set over-estimates most, which is exactly where a new tangent tightens the
pointwise minimum. The whole set is then shifted down by the worst
over-estimation found on the build grid and again by any residual breach
found on a held-out midpoint grid and low-discrepancy cloud, plus a small
curvature buffer, making the binding plane conservative at every checked
point; the achieved statistics are stored on the surface instead of
failing silently.

The closed form also depends on two split parameters the planes do not
carry (the non-delayed inertia share and the delayed droop share); samples
pin both at their deepest-nadir values, so a surface pass never relies on
an optimistic hidden split.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import qmc

from .dynamics import nadir, stage_coefficients

__all__ = [
    "NadirPlane",
    "SurfaceDomain",
    "SurfaceStats",
    "PwlNadirSurface",
    "CheckResult",
    "rocof_bound",
    "qss_bound",
    "closed_form_nadir",
    "build_pwl_surface",
    "check_point",
    "scale_surface",
    "surface_to_dict",
    "surface_from_dict",
    "export_surface",
    "import_surface",
]

logger = logging.getLogger(__name__)

_AXES = ("h_to", "k_g", "k_fm", "k_vpp")
_FORMAT = "pwl-nadir-surface/1"


def rocof_bound(dd, rocof_max):
    """Minimum non-delayed inertia (MW*s/Hz) keeping |RoCoF| within bound.

    The worst rate of change occurs at the first instant, where only the
    non-delayed inertia resists: |df/dt| = dd / (2 h_gv).
    """
    if rocof_max <= 0:
        raise ValueError("rocof_max must be positive")
    return dd / (2.0 * rocof_max)


def qss_bound(dd, qss_ref):
    """Minimum total droop (MW/Hz) keeping the settled deviation within bound."""
    if qss_ref <= 0:
        raise ValueError("qss_ref must be positive")
    return dd / qss_ref


def closed_form_nadir(h_to, k_g, k_fm, k_vpp, dd, tau2, t_gv):
    """Worst-case nadir deviation (Hz, <= 0) at one surface point.

    The split parameters not carried by the planes are pinned at their
    deepest-nadir values: all inertia non-delayed (h_gv = h_to, maximizing
    the residual deficiency handed to the governed stage) and no delayed
    droop (k_vppr = 0, minimizing the arrest). Overdamped corners are
    evaluated with the real-mode tail of the same closed form.
    """
    co = stage_coefficients(
        h_gv=h_to,
        h_to=h_to,
        k_g=k_g,
        k_fm=k_fm,
        k_vpp=k_vpp,
        k_vppr=0.0,
        t_gv=t_gv,
        dd=dd,
        tau2=tau2,
        allow_overdamped=True,
    )
    return nadir(co).delta_f_nadir


@dataclass(frozen=True)
class NadirPlane:
    """Affine under-estimator of the nadir deviation (Hz)."""

    k1: float  # per MW*s/Hz, multiplies total inertia
    k2: float  # per MW/Hz, multiplies SG droop
    k3: float  # per MW/Hz, multiplies GFM droop
    k4: float  # per MW/Hz, multiplies VPP droop
    k5: float  # Hz, constant term

    def value(self, h_to, k_g, k_fm, k_vpp):
        return self.k1 * h_to + self.k2 * k_g + self.k3 * k_fm + self.k4 * k_vpp + self.k5


@dataclass(frozen=True)
class SurfaceDomain:
    """Box bounds of the sampled region, one (lo, hi) pair per quantity."""

    h_to: tuple  # MW*s/Hz
    k_g: tuple  # MW/Hz
    k_fm: tuple  # MW/Hz
    k_vpp: tuple  # MW/Hz

    def bounds(self):
        return np.array([self.h_to, self.k_g, self.k_fm, self.k_vpp], dtype=float)

    def contains(self, point, tol=1e-9):
        b = self.bounds()
        p = np.asarray(point, dtype=float)
        return bool(np.all(p >= b[:, 0] - tol) and np.all(p <= b[:, 1] + tol))


@dataclass(frozen=True)
class SurfaceStats:
    n_build: int
    n_validation: int
    max_gap: float  # Hz, worst under-estimation on the validation grid
    mean_gap: float  # Hz
    max_overestimate: float  # Hz, residual conservativeness breach (<= 0 after correction)
    monotone_violations: dict  # axis name -> count of decreasing steps in the samples


@dataclass(frozen=True)
class PwlNadirSurface:
    """Conservative piecewise-linear nadir model over a parameter box.

    The implied nadir at a point is the most binding (lowest) plane value;
    requiring every plane to stay above -f_nadir_max is therefore at least
    as strict as the sampled closed form, up to the validated tolerance
    recorded in stats.max_overestimate.
    """

    planes: tuple
    domain: SurfaceDomain
    dd: float  # MW, disturbance the planes were built for
    tau2: float  # s
    t_gv: float  # s, governor lag used for the samples
    stats: SurfaceStats

    def plane_values(self, h_to, k_g, k_fm, k_vpp):
        return np.array([p.value(h_to, k_g, k_fm, k_vpp) for p in self.planes])

    def evaluate(self, h_to, k_g, k_fm, k_vpp):
        """Conservative nadir estimate (Hz): the lowest plane value."""
        return float(self.plane_values(h_to, k_g, k_fm, k_vpp).min())


@dataclass(frozen=True)
class CheckResult:
    passed: bool
    worst_plane: int
    worst_value: float  # Hz, the most binding plane value
    margin: float  # Hz, worst_value + f_nadir_max (negative when failing)
    extrapolated: bool


def _grid_axes(domain, density):
    axes = []
    for lo, hi in domain.bounds():
        if hi < lo:
            raise ValueError("domain bounds must satisfy lo <= hi")
        axes.append(np.array([lo]) if hi == lo else np.linspace(lo, hi, density))
    return axes


def _midpoint_axes(axes):
    return [a if a.size == 1 else 0.5 * (a[:-1] + a[1:]) for a in axes]


def _sample_grid(axes, dd, tau2, t_gv):
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.column_stack([m.ravel() for m in mesh])
    y = np.array([closed_form_nadir(*p, dd=dd, tau2=tau2, t_gv=t_gv) for p in pts])
    return pts, y


def _tangent_plane(x0, bounds, dd, tau2, t_gv):
    """First-order expansion of the sampled nadir around one anchor point.

    The nadir is concave along its curved directions, so the tangent stays
    at or above the truth away from the anchor and exact at it; the minimum
    over tangents therefore never digs spurious holes, and any residual
    over-estimation is removed by the caller's uniform shift.
    """
    y0 = closed_form_nadir(*x0, dd=dd, tau2=tau2, t_gv=t_gv)
    grad = np.zeros(4)
    for ax in range(4):
        lo, hi = bounds[ax]
        step = max(1e-4 * (hi - lo), 1e-6 * max(abs(x0[ax]), 1.0))
        a, b = x0.copy(), x0.copy()
        a[ax] -= step
        b[ax] += step
        if a[ax] <= 0.0:  # keep inertia positive and droops nonnegative
            a[ax] = x0[ax]
        f_a = closed_form_nadir(*a, dd=dd, tau2=tau2, t_gv=t_gv)
        f_b = closed_form_nadir(*b, dd=dd, tau2=tau2, t_gv=t_gv)
        grad[ax] = (f_b - f_a) / (b[ax] - a[ax])
    return np.append(grad, y0 - grad @ x0)


def _plane_values(coefs, pts):
    return pts @ np.array(coefs)[:, :4].T + np.array(coefs)[:, 4]


def _monotone_check(y, shape):
    grid = y.reshape(shape)
    report = {}
    for ax, name in enumerate(_AXES):
        report[name] = int((np.diff(grid, axis=ax) < -1e-9).sum())
        if report[name]:
            logger.warning(
                "sampled nadir decreases %d time(s) along %s; an overdamped "
                "regime crossing is the usual cause",
                report[name],
                name,
            )
    return report


def build_pwl_surface(domain, dd, tau2, t_gv, n_planes=20, density=5):
    """Sample the closed-form nadir on a grid and fit under-estimator planes.

    Outer linearization: tangent planes are anchored greedily at the build
    sample where the current minimum over planes over-estimates the truth
    most, starting from the sample nearest the box center, until n_planes
    planes exist or no over-estimation remains. The plane set is then
    shifted down by the worst over-estimation left on the build grid, so
    the binding plane is conservative at every build sample, and again by
    any residual breach found on a held-out midpoint grid and seeded
    low-discrepancy cloud plus a small curvature buffer; the achieved gap
    statistics are stored on the surface.
    """
    if n_planes < 1:
        raise ValueError("n_planes must be at least 1")
    if density < 2:
        raise ValueError("density must be at least 2")
    if dd < 0:
        raise ValueError("disturbance must be nonnegative")
    axes = _grid_axes(domain, density)
    pts, y = _sample_grid(axes, dd, tau2, t_gv)
    shape = tuple(a.size for a in axes)
    monotone = _monotone_check(y, shape)

    bounds = domain.bounds()
    widths = np.where(bounds[:, 1] > bounds[:, 0], bounds[:, 1] - bounds[:, 0], 1.0)
    center = 0.5 * (bounds[:, 0] + bounds[:, 1])
    start = int(np.argmin((((pts - center) / widths) ** 2).sum(axis=1)))
    used = {start}
    coefs = [_tangent_plane(pts[start], bounds, dd, tau2, t_gv)]

    while len(coefs) < n_planes:
        over = _plane_values(coefs, pts).min(axis=1) - y
        nxt = next((int(i) for i in np.argsort(-over, kind="stable") if int(i) not in used), None)
        if nxt is None or over[nxt] <= 1e-12:
            break
        used.add(nxt)
        coefs.append(_tangent_plane(pts[nxt], bounds, dd, tau2, t_gv))

    # drop planes that never support the surface at a build sample
    vals = _plane_values(coefs, pts)
    col_min = vals.min(axis=1)
    active = [p for p in range(len(coefs)) if np.any(vals[:, p] <= col_min + 1e-12)]
    coefs = [coefs[p] for p in active]

    # conservativeness at build samples via a uniform downward shift
    est = _plane_values(coefs, pts).min(axis=1)
    slack = max(float((est - y).max()), 0.0)
    if slack > 0.0:
        for c in coefs:
            c[4] -= slack

    # held-out conservativeness check between build samples: a midpoint
    # grid plus a seeded low-discrepancy cloud, then one downward shift
    # covering the worst breach plus a small buffer for residual curvature
    v_axes = _midpoint_axes(axes)
    v_pts, v_y = _sample_grid(v_axes, dd, tau2, t_gv)
    buffer = 0.0
    if np.any(bounds[:, 1] > bounds[:, 0]):
        cloud = qmc.scale(qmc.Sobol(d=4, seed=7).random(2048), bounds[:, 0], bounds[:, 1])
        c_y = np.array([closed_form_nadir(*p, dd=dd, tau2=tau2, t_gv=t_gv) for p in cloud])
        v_pts = np.vstack([v_pts, cloud])
        v_y = np.concatenate([v_y, c_y])
        buffer = 1e-4
    v_est = _plane_values(coefs, v_pts).min(axis=1)
    shift = max(float((v_est - v_y).max()), 0.0) + buffer
    if shift > 0.0:
        for c in coefs:
            c[4] -= shift
        v_est = v_est - shift
    gaps = v_y - v_est
    stats = SurfaceStats(
        n_build=len(pts),
        n_validation=len(v_pts),
        max_gap=float(gaps.max()),
        mean_gap=float(gaps.mean()),
        max_overestimate=float((v_est - v_y).max()),
        monotone_violations=monotone,
    )
    planes = tuple(NadirPlane(*map(float, c)) for c in coefs)
    return PwlNadirSurface(planes, domain, float(dd), float(tau2), float(t_gv), stats)


def check_point(surface, h_to, k_g, k_fm, k_vpp, f_nadir_max):
    """Evaluate every plane at a point against the nadir bound.

    Passes iff each plane value stays at or above -f_nadir_max; the result
    carries the most binding plane and its margin. Points outside the
    sampled box are still evaluated but flagged, with a warning, because
    conservativeness was only validated inside.
    """
    point = (h_to, k_g, k_fm, k_vpp)
    extrapolated = not surface.domain.contains(point)
    if extrapolated:
        warnings.warn(
            f"point {point} lies outside the surface domain; the "
            "conservativeness guarantee does not extend there",
            stacklevel=2,
        )
    vals = surface.plane_values(*point)
    worst = int(np.argmin(vals))
    worst_value = float(vals[worst])
    margin = worst_value + f_nadir_max
    return CheckResult(margin >= 0.0, worst, worst_value, float(margin), extrapolated)


def scale_surface(surface, dd_new):
    """Rescale a surface to a new disturbance size.

    The staged response is exactly linear in the disturbance at fixed
    inertia and droop, so every plane coefficient scales by dd_new / dd;
    positive scaling preserves the under-estimation property, and the gap
    statistics scale by the same ratio.
    """
    if dd_new < 0:
        raise ValueError("disturbance must be nonnegative")
    if surface.dd <= 0:
        raise ValueError("reference surface was built for a zero disturbance")
    r = dd_new / surface.dd
    planes = tuple(
        NadirPlane(p.k1 * r, p.k2 * r, p.k3 * r, p.k4 * r, p.k5 * r) for p in surface.planes
    )
    s = surface.stats
    stats = SurfaceStats(
        n_build=s.n_build,
        n_validation=s.n_validation,
        max_gap=s.max_gap * r,
        mean_gap=s.mean_gap * r,
        max_overestimate=s.max_overestimate * r,
        monotone_violations=dict(s.monotone_violations),
    )
    return PwlNadirSurface(planes, surface.domain, float(dd_new), surface.tau2, surface.t_gv, stats)


def surface_to_dict(surface):
    return {
        "format": _FORMAT,
        "planes": [[p.k1, p.k2, p.k3, p.k4, p.k5] for p in surface.planes],
        "domain": {name: list(getattr(surface.domain, name)) for name in _AXES},
        "dd": surface.dd,
        "tau2": surface.tau2,
        "t_gv": surface.t_gv,
        "stats": asdict(surface.stats),
    }


def surface_from_dict(doc):
    if doc.get("format") != _FORMAT:
        raise ValueError(f"unsupported surface document format {doc.get('format')!r}")
    planes = tuple(NadirPlane(*map(float, row)) for row in doc["planes"])
    domain = SurfaceDomain(**{name: tuple(doc["domain"][name]) for name in _AXES})
    stats = SurfaceStats(**doc["stats"])
    return PwlNadirSurface(planes, domain, float(doc["dd"]), float(doc["tau2"]), float(doc["t_gv"]), stats)


def export_surface(surface, path):
    """Write a surface as a structured text document (planes, domain, stats)."""
    with open(path, "w") as fh:
        json.dump(surface_to_dict(surface), fh, indent=1)
        fh.write("\n")


def import_surface(path):
    with open(path) as fh:
        return surface_from_dict(json.load(fh))
