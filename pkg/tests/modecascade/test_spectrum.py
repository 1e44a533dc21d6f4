from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from modecascade.errors import NegativeCoefficient, ParallelVectors, WrongDirection, ZeroNormalization
from modecascade.spectrum import (
    DiffusionSpectrum,
    Direction,
    as_lattice_vector,
    build_line_spectrum,
    check_assumptions,
    quadratic_growth_constant,
)


def test_uphill_normalization(spectrum_r5: DiffusionSpectrum):
    """Test the exact coefficients of the line (5, 0) -> (0, 6).

    Parameters
    ----------
    spectrum_r5 : DiffusionSpectrum
        The uphill spectrum with a = (5, 0) and b = (-5, 6).
    """
    assert spectrum_r5.L == 11
    assert spectrum_r5.A == Fraction(25, 11)
    assert spectrum_r5[0] == 0
    assert spectrum_r5[1] == 1
    assert spectrum_r5[-1] == Fraction(111, 11)
    assert spectrum_r5[2] == Fraction(144, 11)
    assert spectrum_r5.window == (-48, 49)
    assert spectrum_r5.size == 98
    # float view is ordered by k
    assert spectrum_r5.d_array[spectrum_r5.index(-1)] == pytest.approx(111 / 11)
    assert spectrum_r5.site_norms[spectrum_r5.index(1)] == 36.0


def test_downhill_normalization(downhill_spectrum: DiffusionSpectrum):
    """Test that downhill lines give d_0 = 1 and d_1 = 0.

    Parameters
    ----------
    downhill_spectrum : DiffusionSpectrum
        A downhill 4D spectrum.
    """
    assert downhill_spectrum.direction is Direction.DOWNHILL
    assert downhill_spectrum.L == 20
    assert downhill_spectrum[0] == 1
    assert downhill_spectrum[1] == 0
    assert all(value >= 0 for value in downhill_spectrum.d.values())


def test_construction_errors():
    """Test the errors raised for unusable lines."""
    with pytest.raises(WrongDirection):
        build_line_spectrum((5, 0), (-5, 6), "downhill")
    with pytest.raises(ParallelVectors):
        build_line_spectrum((2, 0), (1, 0), "uphill")
    with pytest.raises(ZeroNormalization):
        build_line_spectrum((5, 0), (-5, 5), "uphill")
    with pytest.raises(NegativeCoefficient):
        build_line_spectrum((10, 1), (-3, 1), "downhill")
    with pytest.raises(ValueError):
        build_line_spectrum((5, 0), (-5, 6), "uphill", window=(-1, 4))
    with pytest.raises(ValueError):
        as_lattice_vector((1.5, 2))


def test_assumptions_r5(spectrum_r5: DiffusionSpectrum):
    """Test the exact margins of the r = 5 line.

    Parameters
    ----------
    spectrum_r5 : DiffusionSpectrum
        The uphill spectrum with a = (5, 0) and b = (-5, 6).
    """
    report = check_assumptions(spectrum_r5)
    assert report.M == Fraction(111, 11)
    assert report.M_at == -1
    # d_{k+1} - d_{1-k} = 144k/11
    assert report.spacing_at == 1
    assert report.spacing_margin == Fraction(133, 11)
    assert Fraction(3, 2) < report.S < 6
    assert report.passed
    assert report.failures() == []

    # a stricter threshold fails with a readable message
    strict = check_assumptions(spectrum_r5, m_min=11)
    assert not strict.passed
    assert strict.failures()[0].startswith("M = ")
    assert strict.thresholds_used["m_min"] == 11


def test_round_trip(spectrum_r5: DiffusionSpectrum):
    """Test that a spectrum survives its dictionary form.

    Parameters
    ----------
    spectrum_r5 : DiffusionSpectrum
        The uphill spectrum with a = (5, 0) and b = (-5, 6).
    """
    data = spectrum_r5.to_dict()
    assert data["L"] == [11, 1]
    rebuilt = DiffusionSpectrum.from_dict(data)
    assert rebuilt.d == spectrum_r5.d
    data["d"][0][1] += 1
    with pytest.raises(ValueError):
        DiffusionSpectrum.from_dict(data)


@given(st.integers(min_value=2, max_value=40), st.integers(min_value=-60, max_value=60))
def test_two_dimensional_lines(r: int, k: int):
    """Test the normalization and the generic formula on the lines (r, 0) -> (0, r+1).

    Parameters
    ----------
    r : int
        Source wavenumber.
    k : int
        Any line index, inside the window or not.
    """
    spectrum = build_line_spectrum((r, 0), (-r, r + 1), Direction.UPHILL)
    assert spectrum[0] == 0 and spectrum[1] == 1
    assert spectrum.L == 2 * r + 1
    assert spectrum.coefficient(k) >= 0
    if spectrum.k_min <= k <= spectrum.k_max:
        assert spectrum.coefficient(k) == spectrum[k]
    assert quadratic_growth_constant(spectrum) > 0
