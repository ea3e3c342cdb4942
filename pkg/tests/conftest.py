import numpy as np
import pytest

from softcal import PopulationFrame, mask_unselected


def make_frame(
    rng,
    n_total=80,
    p=3,
    q=4,
    select=0.6,
    q_scale=None,
    u_scale=0.3,
    noise=1.0,
):
    """Random valid frame with an intercept and a linear outcome."""
    x1 = np.column_stack([np.ones(n_total), rng.normal(size=(n_total, p - 1))])
    x2 = rng.normal(size=(n_total, q))
    delta = rng.random(n_total) < select
    if not delta.any():
        delta[0] = True
    beta = rng.normal(size=p)
    u = u_scale * rng.normal(size=q)
    y = x1 @ beta + x2 @ u + noise * rng.normal(size=n_total)
    return PopulationFrame(
        x1=x1,
        x2=x2,
        delta=delta,
        y=mask_unselected(y, delta),
        q_scale=q_scale,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
