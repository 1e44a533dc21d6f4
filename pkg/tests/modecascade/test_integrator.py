import math
from dataclasses import replace
from fractions import Fraction
from pathlib import Path
from tempfile import TemporaryDirectory

import numpy as np
import pytest
from numpy.typing import NDArray
from scipy.linalg import expm

from modecascade.coefficients import CoefficientField, ConstantSegment, FeedbackSegment, ZeroSegment, stage1_feedback
from modecascade.config import Config
from modecascade.controller import newton_step_controls
from modecascade.errors import LeakExceeded, ZeroMass
from modecascade.integrator import (
    ConvergencePoint,
    Sample,
    StateVector,
    TrajectoryRecord,
    convergence_study,
    integrate,
    line_advection,
    mass_and_ratio,
    observed_orders,
)
from modecascade.spectrum import DiffusionSpectrum


def _generator(spectrum: DiffusionSpectrum, segment: ConstantSegment) -> NDArray[np.complex128]:
    """Dense matrix of ż = −d z + i Σ_j v^j z^{k−j} on the spectrum's window."""
    size = spectrum.size
    matrix = np.diag(-spectrum.d_array).astype(np.complex128)
    reach = segment.reach
    for i in range(size):
        for j in range(-reach, reach + 1):
            if j != 0 and 0 <= i - j < size:
                matrix[i, i - j] += 1j * segment.coefficient(j)
    return matrix


def test_state_vector():
    """Test the state container."""
    z = StateVector.delta((-2, 3), 1, t=0.5, value=2j)
    assert z[1] == 2j
    assert z[7] == 0
    assert z.mass() == pytest.approx(4.0)
    assert list(z.ks) == [-2, -1, 0, 1, 2, 3]
    assert z.boundary_mass() == 0
    copy = StateVector.from_dict(z.to_dict())
    assert copy.t == 0.5 and copy[1] == 2j
    with pytest.raises(ValueError):
        StateVector((-2, 3), np.zeros(4))


def test_mass_and_ratio():
    """Test the off-mode ratio of a two-mode state."""
    amp = np.array([0, 0, 0.6, 0.8, 0], dtype=np.complex128)
    mass, ratio = mass_and_ratio(StateVector((-2, 2), amp))
    assert mass == pytest.approx(1.0)
    assert ratio == pytest.approx(0.6)
    _, ratio = mass_and_ratio(StateVector.delta((-2, 2), 1))
    assert ratio == 0
    with pytest.raises(ZeroMass):
        mass_and_ratio(StateVector((-2, 2), np.zeros(5)))


def test_free_decay_is_exact(spectrum_r5: DiffusionSpectrum, config: Config):
    """Test zero segments against the closed form e^{−d_k t}.

    Parameters
    ----------
    spectrum_r5 : DiffusionSpectrum
        The uphill spectrum with a = (5, 0) and b = (-5, 6).
    config : Config
        Default configuration.
    """
    z0 = StateVector.delta(spectrum_r5.window, 2)
    record = integrate(z0, CoefficientField.zero(0.0, 0.75), spectrum_r5, config=config)
    final = record.final_state
    assert final.t == 0.75
    d2 = 144 / 11
    assert final[2] == pytest.approx(math.exp(-d2 * 0.75), rel=1e-12)
    last = record.samples[-1]
    assert last.mass + last.dissipated == pytest.approx(1.0, rel=1e-12)
    # a single mode at |(-5, 12)|² = 169 keeps a constant Dirichlet ratio
    assert last.dirichlet_integral == pytest.approx(169 * 0.75, rel=1e-12)
    assert record.realized_field.segments == (ZeroSegment(0.0, 0.75),)


def test_constant_segment_matches_expm(config: Config):
    """Test the ETD integrator against the matrix exponential on a short window.

    Parameters
    ----------
    config : Config
        Default configuration.
    """
    from modecascade.spectrum import build_line_spectrum

    spectrum = build_line_spectrum((5, 0), (-5, 6), "uphill", window=(-4, 5))
    segment = ConstantSegment(0.0, 0.25, {1: 0.8, 2: 0.3j})
    z0 = StateVector.delta(spectrum.window, 0)
    exact = expm(_generator(spectrum, segment) * 0.25) @ z0.amp
    for scheme, tolerance in (("etdrk4", 1e-10), ("etd2rk", 1e-5)):
        settings = config.replace(leak_tolerance=1.0, dt_safety=1 / 1024, scheme=scheme)
        record = integrate(z0, CoefficientField((segment,)), spectrum, config=settings)
        error = np.linalg.norm(record.final_state.amp - exact) / np.linalg.norm(exact)
        assert error < tolerance
        assert record.dissipation_residual() < 1e-6


def test_advection_paths_agree():
    """Test the banded and dense advection operators against a dense matrix."""
    size = 41
    sparse = ConstantSegment(0.0, 1.0, {1: 0.7, 2: 0.3j})
    dense = ConstantSegment(0.0, 1.0, {1: 0.7, 2: 0.3j, 3: -0.1})
    rng = np.random.default_rng(0)
    vector = rng.normal(size=size) + 1j * rng.normal(size=size)
    for segment in (sparse, dense):
        matrix = np.zeros((size, size), dtype=np.complex128)
        for i in range(size):
            for j in range(-segment.reach, segment.reach + 1):
                if j != 0 and 0 <= i - j < size:
                    matrix[i, i - j] = 1j * segment.coefficient(j)
        np.testing.assert_allclose(line_advection(segment, size)(vector), matrix @ vector, atol=1e-13)


def test_advection_conserves_mass(spectrum_r5: DiffusionSpectrum, config: Config):
    """Test that a Hermitian field without diffusion keeps the mass over unit time.

    Parameters
    ----------
    spectrum_r5 : DiffusionSpectrum
        The uphill spectrum with a = (5, 0) and b = (-5, 6).
    config : Config
        Default configuration.
    """
    window = (-20, 21)
    flat = replace(spectrum_r5.with_window(window), d={k: Fraction(0) for k in range(window[0], window[1] + 1)})
    assert not flat.d_array.any()
    field = CoefficientField((ConstantSegment(0.0, 0.5, {1: 0.7, 2: 0.3j}), ConstantSegment(0.5, 1.0, {1: -0.4j})))
    z0 = StateVector.delta(window, 0)
    record = integrate(z0, field, flat, config=config)
    assert record.final_state.t == 1.0
    assert record.final_state.mass() == pytest.approx(1.0, abs=1e-8)
    assert all(abs(s.mass - 1.0) < 1e-8 for s in record.samples)
    assert record.samples[-1].dissipated == 0.0
    # the field did move mass off mode 0
    assert abs(record.final_state[0]) < 0.99


def test_leak_is_detected(config: Config):
    """Test that mass reaching the window edge stops the integration.

    Parameters
    ----------
    config : Config
        Default configuration.
    """
    from modecascade.spectrum import build_line_spectrum

    spectrum = build_line_spectrum((5, 0), (-5, 6), "uphill", window=(-2, 3))
    z0 = StateVector.delta(spectrum.window, 0)
    field = CoefficientField((ConstantSegment(0.0, 0.5, {1: 5.0}),))
    with pytest.raises(LeakExceeded):
        integrate(z0, field, spectrum, config=config)


def test_integrate_checks_inputs(spectrum_r5: DiffusionSpectrum):
    """Test the argument checks of integrate.

    Parameters
    ----------
    spectrum_r5 : DiffusionSpectrum
        The uphill spectrum with a = (5, 0) and b = (-5, 6).
    """
    field = CoefficientField.zero(0.0, 1.0)
    with pytest.raises(ValueError):
        integrate(StateVector.delta((-2, 2), 0), field, spectrum_r5)
    with pytest.raises(ValueError):
        integrate(StateVector.delta(spectrum_r5.window, 0), field, spectrum_r5, t1=2.0)
    with pytest.raises(ValueError):
        integrate(StateVector.delta(spectrum_r5.window, 0, t=1.0), field, spectrum_r5)


def test_checkpoints_store_snapshots(spectrum_r5: DiffusionSpectrum, config: Config):
    """Test that checkpoints end a step and keep the state.

    Parameters
    ----------
    spectrum_r5 : DiffusionSpectrum
        The uphill spectrum with a = (5, 0) and b = (-5, 6).
    config : Config
        Default configuration.
    """
    field = CoefficientField((ConstantSegment(0.0, 0.5, {1: 0.5}), ZeroSegment(0.5, 1.0)))
    z0 = StateVector.delta(spectrum_r5.window, 0)
    record = integrate(z0, field, spectrum_r5, config=config, checkpoints=(0.3, 0.75))
    snapshots = {s.t: s.snapshot for s in record.samples if s.snapshot is not None}
    assert {0.0, 0.3, 0.75, 1.0} <= set(snapshots)
    assert snapshots[1.0][0] == record.final_state[0]
    assert record.max_mass_increase() <= config.blowup_tolerance
    # the realized field splits at the checkpoints but still tiles [0, 1]
    assert record.realized_field.t_start == 0.0 and record.realized_field.t_end == 1.0
    times = record.times()
    assert np.all(np.diff(times) >= 0)


def test_feedback_empties_mode_zero(spectrum_r5: DiffusionSpectrum, config: Config):
    """Test the sampled-data stage-1 feedback on an uphill line.

    Parameters
    ----------
    spectrum_r5 : DiffusionSpectrum
        The uphill spectrum with a = (5, 0) and b = (-5, 6).
    config : Config
        Default configuration.
    """
    z0 = StateVector.delta(spectrum_r5.window, 0)
    feedback = FeedbackSegment(0.0, 1.0)
    record = integrate(z0, CoefficientField((feedback,)), spectrum_r5, config=config)
    final = record.final_state
    assert abs(final[0]) < config.stage1_tolerance
    assert abs(final[1]) > 0.1
    realized = record.realized_field
    assert realized.is_realized
    assert realized.t_start == 0.0 and realized.t_end == 1.0
    assert max(s.reach for s in realized if isinstance(s, ConstantSegment)) == 1
    assert any(label == "feedback-latched" for _, label in record.phase_marks)


def test_record_extend():
    """Test that extending a record continues its running integrals."""
    first = TrajectoryRecord(samples=[Sample(0.0, 1.0, 0.5, 30.0), Sample(1.0, 0.5, 0.1, 30.0, 0.5, 30.0)])
    second = TrajectoryRecord(samples=[Sample(1.0, 0.5, 0.1, 30.0), Sample(2.0, 0.25, 0.0, 30.0, 0.25, 30.0)])
    first.extend(second)
    assert [s.t for s in first.samples] == [0.0, 1.0, 2.0]
    assert first.samples[-1].dissipated == pytest.approx(0.75)
    assert first.samples[-1].dirichlet_integral == pytest.approx(60.0)
    assert first.dissipation_residual() == pytest.approx(0.0)
    with TemporaryDirectory() as tmp_dir:
        path = Path(tmp_dir) / "trajectory.csv"
        first.to_csv(path)
        assert path.read_text().splitlines()[0] == "t,mass,off_mode_ratio"


def test_convergence_order(config: Config):
    """Test the self-convergence order of ETDRK4.

    Parameters
    ----------
    config : Config
        Default configuration.
    """
    from modecascade.spectrum import build_line_spectrum

    spectrum = build_line_spectrum((5, 0), (-5, 6), "uphill", window=(-3, 4))
    field = CoefficientField((ConstantSegment(0.0, 0.5, {1: 2.0, 2: 1.0j}),))
    z0 = StateVector.delta(spectrum.window, 0)
    settings = config.replace(leak_tolerance=1.0, num_cpus=1)
    points = convergence_study(z0, field, spectrum, 0.0, 0.5, [1 / 16, 1 / 32, 1 / 64, 1 / 128], settings)
    errors = [p.error for p in points]
    assert all(left > right for left, right in zip(errors, errors[1:]))
    assert observed_orders(points)[-2] > 2.5
    assert observed_orders([ConvergencePoint(0.1, 1e-4), ConvergencePoint(0.05, 6.25e-6)]) == [pytest.approx(4.0)]
    with pytest.raises(ValueError):
        convergence_study(z0, field, spectrum, 0.0, 0.5, [1 / 16], settings)


def test_integrate_tolerates_clock_rounding(spectrum_r5: DiffusionSpectrum, config: Config):
    """Test that fields off the state's clock by rounding only are accepted.

    Parameters
    ----------
    spectrum_r5 : DiffusionSpectrum
        The uphill spectrum with a = (5, 0) and b = (-5, 6).
    config : Config
        Default configuration.
    """
    t0 = 0.1
    shifted = (t0 + 1) - 1
    assert shifted != t0
    field = CoefficientField((ConstantSegment(shifted, 0.6, {1: 0.5}),))
    z0 = StateVector.delta(spectrum_r5.window, 0, t=t0)
    record = integrate(z0, field, spectrum_r5, config=config)
    assert record.final_state.t == 0.6
    assert record.realized_field.t_start == t0
    assert record.realized_field.t_end == 0.6

    # asking for a hair past the end stops at the end of the field
    record = integrate(z0, field, spectrum_r5, t1=math.nextafter(0.6, 1.0), config=config)
    assert record.final_state.t == 0.6

    with pytest.raises(ValueError):
        integrate(z0, CoefficientField((ConstantSegment(t0 + 1e-6, 0.6, {1: 0.5}),)), spectrum_r5, config=config)


def test_snapshot_all(spectrum_r5: DiffusionSpectrum, config: Config):
    """Test that every sample can carry its state.

    Parameters
    ----------
    spectrum_r5 : DiffusionSpectrum
        The uphill spectrum with a = (5, 0) and b = (-5, 6).
    config : Config
        Default configuration.
    """
    z0 = StateVector.delta(spectrum_r5.window, 2)
    field = CoefficientField.zero(0.0, 0.5)
    sparse = integrate(z0, field, spectrum_r5, config=config)
    assert any(s.snapshot is None for s in sparse.samples)
    dense = integrate(z0, field, spectrum_r5, config=config, snapshot_all=True)
    assert len(dense.samples) == len(sparse.samples)
    assert all(s.snapshot is not None and s.snapshot.t == s.t for s in dense.samples)


def test_convergence_order_stage1(spectrum_r5: DiffusionSpectrum, config: Config):
    """Test the self-convergence order under the stage-1 kick.

    Parameters
    ----------
    spectrum_r5 : DiffusionSpectrum
        The uphill spectrum with a = (5, 0) and b = (-5, 6).
    config : Config
        Default configuration.
    """
    spectrum = spectrum_r5.with_window((-6, 7))
    kick = stage1_feedback(1.0 + 0j, 0j, 0.0, config.feedback_gain, config.switch_time, config.zero_tolerance)
    assert abs(kick) == pytest.approx(config.feedback_gain)
    field = CoefficientField((ConstantSegment(0.0, 2.0**-8, {1: kick}),))
    z0 = StateVector.delta(spectrum.window, 0)
    settings = config.replace(leak_tolerance=1.0, num_cpus=1)
    points = convergence_study(z0, field, spectrum, 0.0, 2.0**-8, [2.0**-12, 2.0**-13, 2.0**-14, 2.0**-15], settings)
    errors = [p.error for p in points]
    assert all(left > right for left, right in zip(errors, errors[1:]))
    assert min(observed_orders(points)) >= 2.0


def test_convergence_order_newton(spectrum_r5: DiffusionSpectrum, config: Config):
    """Test the self-convergence order over the two halves of a Newton step.

    Parameters
    ----------
    spectrum_r5 : DiffusionSpectrum
        The uphill spectrum with a = (5, 0) and b = (-5, 6).
    config : Config
        Default configuration.
    """
    spectrum = spectrum_r5.with_window((-6, 7))
    z0 = StateVector.delta(spectrum.window, 1, value=0.95)
    z0.amp[spectrum.index(0)] = 0.05j
    z0.amp[spectrum.index(2)] = 0.05
    z0.amp[spectrum.index(-1)] = 0.02 - 0.01j
    controls = newton_step_controls(z0, 0.5, spectrum, k_max=2)
    field = CoefficientField(controls.segments(0.0))
    settings = config.replace(leak_tolerance=1.0, num_cpus=1)
    points = convergence_study(z0, field, spectrum, 0.0, 0.5, [1 / 16, 1 / 32, 1 / 64, 1 / 128], settings)
    errors = [p.error for p in points]
    assert all(left > right for left, right in zip(errors, errors[1:]))
    assert min(observed_orders(points)) >= 2.0
