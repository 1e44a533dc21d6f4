import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from modecascade.coefficients import (
    CoefficientField,
    ConstantSegment,
    FeedbackSegment,
    ZeroSegment,
    segment_from_dict,
    stage1_feedback,
    step_count,
)


def test_stage1_feedback():
    """Test the feedback law on hand-computed states."""
    # constant kick first
    assert stage1_feedback(1.0, 0.0, 0.0) == 256
    assert stage1_feedback(1.0, 0.0, 2.0**-11, gain=8.0) == 8
    # then -i g conj(z0)|z1| / (conj(z1)|z0|)
    assert stage1_feedback(1.0, 1j, 0.5) == pytest.approx(256)
    assert stage1_feedback(1.0, 1.0, 0.5) == pytest.approx(-256j)
    # zero once either amplitude is negligible
    assert stage1_feedback(1e-10, 0.3, 0.5) == 0
    assert stage1_feedback(0.3, 0.0, 0.5) == 0
    with pytest.raises(ValueError):
        stage1_feedback(1.0, 1.0, -1.0)


@given(
    st.complex_numbers(min_magnitude=1e-6, max_magnitude=1.0),
    st.complex_numbers(min_magnitude=1e-6, max_magnitude=1.0),
    st.floats(min_value=2.0**-10, max_value=1.0),
)
def test_stage1_feedback_magnitude(z0: complex, z1: complex, t: float):
    """Test that the feedback has magnitude gain and drains mode 0.

    Parameters
    ----------
    z0 : complex
        Amplitude of mode 0.
    z1 : complex
        Amplitude of mode 1.
    t : float
        Time after the kick.
    """
    a = stage1_feedback(z0, z1, t)
    assert abs(a) == pytest.approx(256.0)
    # the v^{-1} z^1 term of the mode-0 equation decreases |z^0|²
    flow = 2 * (1j * (a.conjugate() * z1) * z0.conjugate()).real
    assert flow < 0 or math.isclose(flow, 0.0, abs_tol=1e-9)


def test_constant_segment():
    """Test the conjugate symmetry of constant segments."""
    segment = ConstantSegment(0.0, 1.0, {-2: 1 + 1j, 3: 0})
    assert segment.values == {2: 1 - 1j}
    assert segment.coefficient(-2) == 1 + 1j
    assert segment.coefficient(0) == 0
    assert segment.reach == 2
    reach, full = segment.modes()
    assert reach == 2
    assert full[4] == 1 - 1j and full[0] == 1 + 1j
    assert segment.total_variation() == pytest.approx(2 * math.sqrt(2))
    assert segment.sup_norms() == {2: pytest.approx(math.sqrt(2)), -2: pytest.approx(math.sqrt(2))}
    with pytest.raises(ValueError):
        ConstantSegment(0.0, 1.0, {0: 1.0})
    with pytest.raises(ValueError):
        ConstantSegment(0.0, 1.0, {1: 1.0, -1: 2.0})


def test_coefficient_field():
    """Test tiling, lookup and serialization of coefficient fields."""
    feedback = FeedbackSegment(0.0, 1.0, gain=16.0)
    constant = ConstantSegment(1.0, 1.5, {1: 0.5j})
    field = CoefficientField((feedback, constant)).then(ZeroSegment(1.5, 2.0))
    assert len(field) == 3
    assert field.duration == 2.0
    assert not field.is_realized
    assert field.segment_at(1.0) is constant
    assert field.segment_at(2.0).kind == "zero"
    assert field.evaluate(1.2) == {1: 0.5j, -1: -0.5j}
    assert field.evaluate(1.7) == {}
    with pytest.raises(ValueError):
        field.evaluate(0.5)
    with pytest.raises(ValueError):
        field.segment_at(2.5)
    with pytest.raises(ValueError):
        CoefficientField((ZeroSegment(0.0, 1.0), ZeroSegment(1.1, 2.0)))
    with pytest.raises(ValueError):
        CoefficientField((ZeroSegment(1.0, 1.0),))

    rebuilt = CoefficientField.from_dict(field.to_dict())
    assert rebuilt == field
    assert segment_from_dict(feedback.to_dict()) == feedback
    with pytest.raises(ValueError):
        segment_from_dict({"kind": "ramp", "t0": 0.0, "t1": 1.0})


def test_step_count():
    """Test step counts covering an interval."""
    assert step_count(1.0, 0.25) == 4
    assert step_count(1.0 + 1e-15, 0.25) == 4
    assert step_count(1.0, 0.3) == 4
    assert step_count(1e-9, 0.25) == 1
