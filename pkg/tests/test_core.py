import numpy as np
import numpy.ma as ma
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from softcal import (
    InvalidFrameError,
    MixedEffectsSpec,
    PopulationFrame,
    mask_unselected,
    restrict_frame,
    sample_view,
    validate_frame,
)
from conftest import make_frame


def test_valid_frame_passes(rng):
    frame = make_frame(rng, n_total=100, select=0.1)
    report = validate_frame(frame)
    assert report.passed
    assert str(report) == "frame valid"


def test_missing_y_where_selected_fails():
    y = ma.masked_array(np.zeros(5), mask=[False, False, False, True, False])
    frame = PopulationFrame(
        x1=np.ones((5, 1)), x2=np.zeros((5, 0)), delta=[1, 0, 0, 1, 0], y=y
    )
    report = validate_frame(frame)
    assert not report.passed
    issue = [i for i in report.issues if "y missing" in i.invariant]
    assert issue and issue[0].index == 3


def test_nonpositive_q_scale_fails():
    frame = PopulationFrame(
        x1=np.ones((4, 1)),
        x2=np.zeros((4, 0)),
        delta=[1, 1, 0, 0],
        y=[1.0, 2.0, np.nan, np.nan],
        q_scale=[1.0, 0.0, 1.0, 1.0],
    )
    report = validate_frame(frame)
    assert any("q_scale nonpositive" in i.invariant for i in report.issues)
    assert [i.index for i in report.issues if "q_scale" in i.invariant] == [1]


def test_intercept_required():
    frame = PopulationFrame(
        x1=np.arange(4.0).reshape(-1, 1), x2=np.zeros((4, 0)), delta=[1, 1, 1, 1]
    )
    assert not validate_frame(frame).passed


def test_sample_view_full_selection(rng):
    frame = make_frame(rng, select=2.0)  # every unit selected
    view = sample_view(frame)
    np.testing.assert_array_equal(view.x1, frame.x1)
    np.testing.assert_array_equal(view.x2, frame.x2)


def test_sample_view_empty_sample_errors():
    frame = PopulationFrame(x1=np.ones((3, 1)), x2=np.zeros((3, 0)), delta=[0, 0, 0])
    with pytest.raises(InvalidFrameError):
        sample_view(frame)


def test_sample_view_picks_selected_rows():
    x1 = np.column_stack([np.ones(5), np.arange(5.0)])
    frame = PopulationFrame(
        x1=x1,
        x2=np.zeros((5, 0)),
        delta=[1, 0, 1, 0, 0],
        y=[10.0, np.nan, 30.0, np.nan, np.nan],
    )
    view = sample_view(frame)
    assert view.x1.shape == (2, 2)
    np.testing.assert_array_equal(view.x1[:, 1], [0.0, 2.0])
    np.testing.assert_array_equal(view.y, [10.0, 30.0])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(2, 40))
def test_sample_roundtrip_property(seed, n):
    rng = np.random.default_rng(seed)
    frame = make_frame(rng, n_total=n, p=2, q=1, select=0.5)
    view = sample_view(frame)
    assert view.x1.shape[0] == frame.delta.sum()
    # scattering back to population indices reproduces the selected rows
    scattered = np.zeros_like(frame.x1)
    scattered[frame.delta] = view.x1
    np.testing.assert_array_equal(scattered[frame.delta], frame.x1[frame.delta])


def test_restrict_frame_keeps_alignment(rng):
    frame = make_frame(rng, n_total=50)
    keep = rng.random(50) < 0.7
    keep[np.flatnonzero(frame.delta)[0]] = True  # keep the sample nonempty
    sub = restrict_frame(frame, keep)
    assert sub.n_total == keep.sum()
    np.testing.assert_array_equal(sub.x1, frame.x1[keep])
    np.testing.assert_array_equal(sub.delta, frame.delta[keep])


def test_frames_are_immutable(rng):
    frame = make_frame(rng)
    with pytest.raises(ValueError):
        frame.x1[0, 0] = 2.0
    with pytest.raises(ValueError):
        frame.delta[0] = False


def test_masked_outcome_never_leaks():
    y = mask_unselected([1.0, 2.0, 3.0], [True, False, True])
    assert ma.is_masked(y[1])
    frame = PopulationFrame(
        x1=np.ones((3, 1)), x2=np.zeros((3, 0)), delta=[1, 0, 1], y=y
    )
    view = sample_view(frame)
    np.testing.assert_array_equal(view.y, [1.0, 3.0])


def test_mixed_effects_spec_validation():
    with pytest.raises(ValueError):
        MixedEffectsSpec(gamma=-1.0)
    with pytest.raises(ValueError):
        MixedEffectsSpec(d_q=np.array([[1.0, 0.5], [0.4, 1.0]]))  # asymmetric
    with pytest.raises(ValueError):
        MixedEffectsSpec(d_q=np.array([[1.0, 2.0], [2.0, 1.0]]))  # indefinite
    spec = MixedEffectsSpec(d_q=np.array([[2.0, 0.2], [0.2, 1.0]]), gamma=0.5)
    assert spec.d_q_for(2).shape == (2, 2)
    with pytest.raises(ValueError):
        spec.d_q_for(3)
    assert np.array_equal(MixedEffectsSpec().d_q_for(3), np.eye(3))
