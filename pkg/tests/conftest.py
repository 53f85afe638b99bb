import numpy as np
import pytest

from vppfreq import dynamics


# Documented parameter box for randomized staged-dynamics draws. Spans the
# operating range of the bundled case with margin; some corners are
# overdamped on purpose so fallback paths get exercised.
STAGE_BOX = {
    "h_gv": (50.0, 400.0),
    "h_ratio": (1.05, 2.0),  # h_to / h_gv
    "k_g": (20.0, 150.0),
    "k_fm": (5.0, 60.0),
    "k_vpp": (5.0, 60.0),
    "vppr_share": (0.0, 1.0),
    "t_gv": (2.0, 10.0),
    "tau2": (0.5, 3.0),
    "dd": (20.0, 100.0),
}


def draw_stage_params(rng):
    u = lambda key: rng.uniform(*STAGE_BOX[key])
    h_gv = u("h_gv")
    k_vpp = u("k_vpp")
    return dict(
        h_gv=h_gv,
        h_to=h_gv * u("h_ratio"),
        k_g=u("k_g"),
        k_fm=u("k_fm"),
        k_vpp=k_vpp,
        k_vppr=k_vpp * u("vppr_share"),
        t_gv=u("t_gv"),
        tau2=u("tau2"),
        dd=u("dd"),
    )


def draw_stage_coeffs(rng, n):
    return [
        dynamics.stage_coefficients(allow_overdamped=True, **draw_stage_params(rng))
        for _ in range(n)
    ]


@pytest.fixture
def rng():
    return np.random.default_rng(2024)
