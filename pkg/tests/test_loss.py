import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from softcal import DomainError, LossSpec
from softcal.loss import (
    conjugate_domain_grid,
    conjugate_grad,
    conjugate_hess,
    conjugate_value,
    in_conjugate_domain,
    loss_curvature,
    loss_value,
    weight_map,
    weight_map_deriv,
)

ALL_SPECS = [
    LossSpec("square"),
    LossSpec("entropy_divergence"),
    LossSpec("empirical_likelihood"),
    LossSpec("maximum_entropy"),
    LossSpec("bounded_logistic", lower=0.0, upper=10.0),
    LossSpec("truncated_linear", lower=0.0, upper=3.0),
]
IDS = [s.family for s in ALL_SPECS]

# families whose weight map is normalized to w(0)=1, w'(0)=1 at unit scale;
# maximum entropy has w(0) = 1 + exp(0) = 2 by construction
NORMALIZED = [s for s in ALL_SPECS if s.family != "maximum_entropy"]


class TestSpotValues:
    def test_square_loss_values(self):
        assert loss_value(LossSpec("sq"), 1.0, 1.0) == 0.0
        assert loss_value(LossSpec("sq"), 3.0, 2.0) == pytest.approx(1.0)

    def test_entropy_divergence_zero_at_one(self):
        assert loss_value(LossSpec("ent"), 1.0, 5.0) == pytest.approx(0.0)

    def test_truncated_linear_infinite_outside(self):
        spec = LossSpec("trunc", lower=0.0, upper=2.0)
        assert loss_value(spec, 3.0, 1.0) == np.inf
        assert np.isfinite(loss_value(spec, 2.0, 1.0))

    def test_weight_map_values(self):
        assert weight_map(LossSpec("sq"), 0.0, 1.0) == pytest.approx(1.0)
        assert weight_map(LossSpec("me"), 0.0, 1.0) == pytest.approx(2.0)
        assert weight_map(LossSpec("el"), 0.5, 1.0) == pytest.approx(2.0)

    def test_bounded_logistic_saturates(self):
        spec = LossSpec("logit", lower=0.0, upper=10.0)
        assert weight_map(spec, 1e3, 1.0) == pytest.approx(10.0, abs=1e-9)
        assert weight_map(spec, -1e3, 1.0) == pytest.approx(0.0, abs=1e-9)

    def test_conjugate_values(self):
        assert conjugate_value(LossSpec("sq"), 2.0, 1.0) == pytest.approx(4.0)
        assert conjugate_value(LossSpec("ent"), 0.0, 3.0) == pytest.approx(0.0)


@pytest.mark.parametrize("spec", ALL_SPECS, ids=IDS)
def test_conjugate_grad_is_weight_map(spec):
    for z in (-1.0, 0.0, 0.3):
        q = 1.0
        assert conjugate_grad(spec, z, q) == pytest.approx(
            weight_map(spec, z, q), abs=1e-12
        )


@pytest.mark.parametrize("spec", ALL_SPECS, ids=IDS)
@pytest.mark.parametrize("q", [1.0, 0.7, 2.5])
def test_conjugate_curvature_identity(spec, q):
    # g''(z) * Q''(w(z)) = 1 on a grid interior to the conjugate domain
    z = conjugate_domain_grid(spec, q=q, num=100)
    w = weight_map(spec, z, q)
    product = conjugate_hess(spec, z, q) * loss_curvature(spec, w, q)
    np.testing.assert_allclose(product, 1.0, atol=1e-9)


@pytest.mark.parametrize("spec", ALL_SPECS, ids=IDS)
def test_weight_map_strictly_increasing(spec):
    z = conjugate_domain_grid(spec, num=200)
    w = weight_map(spec, z, 1.0)
    assert np.all(np.diff(w) > 0)


@pytest.mark.parametrize("spec", NORMALIZED, ids=[s.family for s in NORMALIZED])
@pytest.mark.parametrize("q", [1.0])
def test_normalization_at_zero(spec, q):
    assert weight_map(spec, 0.0, q) == pytest.approx(1.0, abs=1e-12)
    assert weight_map_deriv(spec, 0.0, q) == pytest.approx(1.0, abs=1e-12)


def test_maximum_entropy_weight_at_zero_is_two():
    assert weight_map(LossSpec("me"), 0.0, 1.0) == pytest.approx(2.0)


@pytest.mark.parametrize("spec", ALL_SPECS, ids=IDS)
@pytest.mark.parametrize("q", [1.0, 1.8])
def test_finite_difference_gradient(spec, q):
    h = 1e-5
    z = conjugate_domain_grid(spec, q=q, num=40)
    z = z[(z + h < np.max(z)) & (z - h > np.min(z))]
    fd = (conjugate_value(spec, z + h, q) - conjugate_value(spec, z - h, q)) / (2 * h)
    grad = conjugate_grad(spec, z, q)
    assert np.all(np.abs(grad - fd) <= 1e-6 * np.maximum(1.0, np.abs(grad)))


@pytest.mark.parametrize("spec", ALL_SPECS, ids=IDS)
def test_convexity(spec):
    z = conjugate_domain_grid(spec, num=100)
    assert np.all(conjugate_hess(spec, z, 1.0) > 0)


class TestDomains:
    def test_empirical_likelihood_conjugate_domain(self):
        spec = LossSpec("el")
        assert in_conjugate_domain(spec, 0.5, 1.0)
        assert not in_conjugate_domain(spec, 1.0, 1.0)
        assert not in_conjugate_domain(spec, 0.6, 2.0)
        with pytest.raises(DomainError):
            weight_map(spec, 1.2, 1.0)
        with pytest.raises(DomainError):
            conjugate_value(spec, np.array([0.1, 0.9]), 2.0)

    def test_loss_domain_violations_raise(self):
        with pytest.raises(DomainError):
            loss_value(LossSpec("ent"), -0.5, 1.0)
        with pytest.raises(DomainError):
            loss_value(LossSpec("el"), 0.0, 1.0)
        with pytest.raises(DomainError):
            loss_value(LossSpec("me"), 1.0, 1.0)
        with pytest.raises(DomainError):
            loss_value(LossSpec("logit", lower=0.0, upper=2.0), 2.0, 1.0)


class TestSpecValidation:
    def test_bounds_only_for_bounded_families(self):
        with pytest.raises(ValueError):
            LossSpec("square", lower=0.0, upper=2.0)
        with pytest.raises(ValueError):
            LossSpec("bounded_logistic")
        with pytest.raises(ValueError):
            LossSpec("truncated_linear", lower=1.5, upper=2.0)
        with pytest.raises(ValueError):
            LossSpec("nonsense")

    def test_aliases_resolve(self):
        assert LossSpec("sq").family == "square"
        assert LossSpec("trunc", lower=0.0, upper=2.0).family == "truncated_linear"


@settings(max_examples=50, deadline=None)
@given(
    lower=st.floats(0.0, 0.9),
    upper=st.floats(1.1, 50.0),
    z=st.floats(-30.0, 30.0),
    q=st.floats(0.2, 4.0),
)
def test_bounded_logistic_stays_inside_band(lower, upper, z, q):
    spec = LossSpec("bounded_logistic", lower=lower, upper=upper)
    # the map is strictly interior in exact arithmetic; skip arguments so
    # extreme that the sigmoid saturates in float64
    a = q * (upper - lower) / ((1 - lower) * (upper - 1))
    b = np.log((1 - lower) / (upper - 1))
    assume(abs(a * z + b) < 30)
    w = weight_map(spec, z, q)
    assert lower < w < upper


@settings(max_examples=50, deadline=None)
@given(
    lower=st.floats(0.0, 0.9),
    upper=st.floats(1.1, 50.0),
    z=st.floats(-100.0, 100.0),
    q=st.floats(0.2, 4.0),
)
def test_truncated_linear_stays_in_closed_band(lower, upper, z, q):
    spec = LossSpec("truncated_linear", lower=lower, upper=upper)
    w = weight_map(spec, z, q)
    assert lower <= w <= upper
