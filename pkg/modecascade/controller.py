"""Synthesis of the coefficient fields that move mass from mode 0 to mode 1 of a line."""

import logging
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.typing import NDArray
from scipy.integrate import quad
from scipy.optimize import brentq

from .coefficients import (
    CoefficientField,
    ConstantSegment,
    FeedbackSegment,
    Segment,
    ZeroSegment,
    stage1_feedback,
)
from .config import Config
from .errors import (
    DegenerateSpacing,
    NoContraction,
    NoPush,
    Stage1Fail,
    WaitTimeout,
    WrongDirection,
    ZeroMass,
)
from .geometry import angle_factor_squared
from .integrator import StateVector, TrajectoryRecord, integrate, mass_and_ratio
from .spectrum import DiffusionSpectrum, Direction, norm2

__all__ = [
    "CoefficientField",
    "ConstantSegment",
    "ContractionLog",
    "DyadicRun",
    "FeedbackSegment",
    "LinearResponse",
    "NewtonControls",
    "ProtocolRun",
    "ZeroSegment",
    "choose_wait",
    "default_eta",
    "downhill_protocol",
    "dyadic_schedule",
    "field_sup_norms",
    "linearized_response",
    "newton_matrix",
    "newton_step_controls",
    "select_k_max",
    "stage1_feedback",
    "system_matrix",
    "uphill_protocol",
]

logger = logging.getLogger(__name__)


def inverse_half_integral(x: float, T: float, series_cutoff: float = 1e-4) -> float:
    """1 / ∫₀^{T/2} e^{xs} ds, without overflow for large x T."""
    y = x * T / 2
    if abs(x) * T < series_cutoff:
        return (2.0 / T) * (1.0 - y / 2.0 + y * y / 12.0)
    if y > 30.0:
        return x * math.exp(-y) / -math.expm1(-y)
    return x / math.expm1(y)


@dataclass(frozen=True)
class NewtonControls:
    """Piecewise constant controls v^k = a_k on [0, T/2], b_k on (T/2, T].

    Parameters
    ----------
    T : float
        Duration of the step.
    per_k : dict[int, tuple[complex, complex]]
        (a_k, b_k) for k = 1..k_max.
    k_max : int
        Largest controlled mode.
    """

    T: float
    per_k: dict[int, tuple[complex, complex]]
    k_max: int

    def first_half(self) -> dict[int, complex]:
        """a_k, held on the first half of the interval."""
        return {k: ab[0] for k, ab in self.per_k.items()}

    def second_half(self) -> dict[int, complex]:
        """b_k, held on the second half of the interval."""
        return {k: ab[1] for k, ab in self.per_k.items()}

    def segments(self, t0: float, t_mid: float | None = None, t1: float | None = None) -> tuple[Segment, Segment]:
        """The two constant segments starting at t0."""
        t_mid = t0 + self.T / 2 if t_mid is None else t_mid
        t1 = t0 + self.T if t1 is None else t1
        return ConstantSegment(t0, t_mid, self.first_half()), ConstantSegment(t_mid, t1, self.second_half())

    def max_amplitude(self) -> float:
        """Largest control amplitude of both halves."""
        return max((max(abs(a), abs(b)) for a, b in self.per_k.values()), default=0.0)


def _exponent_gaps(spectrum: DiffusionSpectrum, k: int) -> tuple[float, float]:
    d1 = spectrum[1]
    upper, lower = spectrum[k + 1], spectrum[1 - k]
    if upper == lower:
        raise DegenerateSpacing(f"d_{k + 1} = d_{1 - k} = {upper}, the Newton system for k = {k} is singular.")
    return float(upper - d1), float(lower - d1)


def system_matrix(T: float, spectrum: DiffusionSpectrum, k: int) -> NDArray[np.complex128]:
    """The matrix −i[[1, E₊], [1, E₋]] mapping (a_k, b_k) to the scaled targets."""
    dp, dm = _exponent_gaps(spectrum, k)
    e_plus, e_minus = math.exp(dp * T / 2), math.exp(dm * T / 2)
    return -1j * np.array([[1.0, e_plus], [1.0, e_minus]], dtype=np.complex128)


def newton_matrix(T: float, spectrum: DiffusionSpectrum, k: int) -> NDArray[np.complex128]:
    """B^k = −i/(E₋ − E₊) [[E₋, −E₊], [−1, 1]], so that system_matrix @ B^k = −I."""
    dp, dm = _exponent_gaps(spectrum, k)
    e_plus, e_minus = math.exp(dp * T / 2), math.exp(dm * T / 2)
    return -1j / (e_minus - e_plus) * np.array([[e_minus, -e_plus], [-1.0, 1.0]], dtype=np.complex128)


def select_k_max(z: StateVector, spectrum: DiffusionSpectrum, config: Config | None = None) -> int:
    """Smallest k whose uncontrolled tail Σ_{|1−k'|>k}|z^{k'}|² is negligible.

    The tail must stay below ``newton_tail_fraction`` times ε⁴ of the mass, so the
    untreated modes do not spoil quadratic contraction. The result is capped by
    ``newton_k_cap`` and by the window, keeping the controlled modes off its edges.
    """
    config = config or Config()
    cap = max(1, min(config.newton_k_cap, spectrum.k_max - 2, -spectrum.k_min))
    power = np.abs(z.amp) ** 2
    mass = float(power.sum())
    if mass == 0.0:
        raise ZeroMass("Cannot choose Newton modes for a state of zero mass.")
    _, eps = mass_and_ratio(z)
    allowed = config.newton_tail_fraction * eps**4 * mass
    distance = np.abs(1 - z.ks)
    for k in range(1, cap + 1):
        if float(power[distance > k].sum()) <= allowed:
            return k
    return cap


def newton_step_controls(
    z_snapshot: StateVector,
    T: float,
    spectrum: DiffusionSpectrum,
    k_max: int | None = None,
    config: Config | None = None,
) -> NewtonControls:
    """Controls cancelling the off-mode amplitudes of a snapshot over a step of length T.

    To first order, mode k+1 receives i z¹ e^{−d_{k+1}T} I₊ (a + E₊ b) and mode 1−k
    the conjugate analogue, where I± = ∫₀^{T/2} e^{(d − d_1)s} ds and
    E± = e^{(d − d_1)T/2}. The pair (a_k, b_k) makes both responses equal the
    negated free evolution of the snapshot.

    Parameters
    ----------
    z_snapshot : StateVector
        State at the start of the step; z¹ must be nonzero.
    T : float
        Step length in (0, 1].
    spectrum : DiffusionSpectrum
        Diffusion coefficients of the line.
    k_max : int, optional
        Largest controlled mode, chosen by :func:`select_k_max` when omitted.
    config : Config, optional
        Supplies the series cutoff and the k_max rule.

    Returns
    -------
    NewtonControls
        (a_k, b_k) for k = 1..k_max.
    """
    config = config or Config()
    if not 0 < T <= 1:
        raise ValueError(f"Newton step length must lie in (0, 1], got {T}.")
    z1 = z_snapshot[1]
    if z1 == 0:
        raise ZeroMass("Mode 1 is empty, there is nothing to steer against.")
    if k_max is None:
        k_max = select_k_max(z_snapshot, spectrum, config)
    per_k: dict[int, tuple[complex, complex]] = {}
    for k in range(1, k_max + 1):
        dp, dm = _exponent_gaps(spectrum, k)
        w_plus = z_snapshot[k + 1] / z1
        w_minus = z_snapshot[1 - k] / z1
        if w_plus == 0 and w_minus == 0:
            per_k[k] = (0j, 0j)
            continue
        inv_plus = inverse_half_integral(dp, T, config.series_cutoff)
        inv_minus = inverse_half_integral(dm, T, config.series_cutoff)
        # everything is divided by E₊ so nothing overflows when d_{k+1} T is large
        rho_m1 = math.expm1((dm - dp) * T / 2)
        rho = 1.0 + rho_m1
        r1 = 1j * w_plus * inv_plus
        r2 = -1j * w_minus.conjugate() * inv_minus
        a = (rho * r1 - r2) / rho_m1
        b = (r2 - r1) * math.exp(-dp * T / 2) / rho_m1
        per_k[k] = (complex(a), complex(b))
    return NewtonControls(T, per_k, k_max)


@dataclass(frozen=True)
class LinearResponse:
    """Quadrature of the linearized response of modes k+1 and 1−k to the controls of mode k."""

    k: int
    plus: complex
    minus: complex
    target_plus: complex
    target_minus: complex
    scale_plus: float
    scale_minus: float

    def relative_error(self) -> float:
        """Worst mismatch, relative to the target or to the size of the cancelling halves."""
        errors = []
        for got, target, scale in (
            (self.plus, self.target_plus, self.scale_plus),
            (self.minus, self.target_minus, self.scale_minus),
        ):
            reference = max(abs(target), scale)
            errors.append(abs(got - target) / reference if reference > 0 else abs(got - target))
        return max(errors)


def _half_integrals(d_target: float, d1: float, T: float) -> tuple[float, float]:
    def integrand(s: float) -> float:
        """Integrand of the response at time s."""
        return math.exp(-d_target * (T - s) - d1 * s)

    first, _ = quad(integrand, 0.0, T / 2, epsabs=0.0, epsrel=1e-13, limit=200)
    second, _ = quad(integrand, T / 2, T, epsabs=0.0, epsrel=1e-13, limit=200)
    return first, second


def linearized_response(
    controls: NewtonControls, spectrum: DiffusionSpectrum, z: StateVector, k: int
) -> LinearResponse:
    """γ^{k+1}_T and γ^{1−k}_T of the Duhamel formula, by numerical quadrature.

    Parameters
    ----------
    controls : NewtonControls
        Controls of one Newton step.
    spectrum : DiffusionSpectrum
        Diffusion coefficients.
    z : StateVector
        Snapshot the controls were built from.
    k : int
        Controlled mode.

    Returns
    -------
    LinearResponse
        Responses, their targets −e^{−d T} z₀ and the size of the two half contributions.
    """
    T = controls.T
    a, b = controls.per_k[k]
    z1 = z[1]
    d1 = float(spectrum[1])
    d_plus, d_minus = float(spectrum[k + 1]), float(spectrum[1 - k])
    first_plus, second_plus = _half_integrals(d_plus, d1, T)
    first_minus, second_minus = _half_integrals(d_minus, d1, T)
    plus = 1j * z1 * (a * first_plus + b * second_plus)
    minus = 1j * z1 * (a.conjugate() * first_minus + b.conjugate() * second_minus)
    return LinearResponse(
        k=k,
        plus=complex(plus),
        minus=complex(minus),
        target_plus=complex(-math.exp(-d_plus * T) * z[k + 1]),
        target_minus=complex(-math.exp(-d_minus * T) * z[1 - k]),
        scale_plus=abs(z1) * (abs(a) * first_plus + abs(b) * second_plus),
        scale_minus=abs(z1) * (abs(a) * first_minus + abs(b) * second_minus),
    )


@dataclass
class ContractionLog:
    """Off-mode ratio at the start of every dyadic step.

    ``entries`` holds (j, T_j, eps_j); the last entry is the ratio after the final step.
    """

    entries: list[tuple[int, float, float]] = field(default_factory=list)
    contraction_floor: float = 1e-13

    @property
    def eps(self) -> list[float]:
        """ε_j of every dyadic step."""
        return [e for _, _, e in self.entries]

    @property
    def D_fit(self) -> float:
        """Smallest D with ε_{j+1} ≤ D 2^{3j} ε_j² over pairs above the round-off floor."""
        ratios = [
            e_next / (2.0 ** (3 * j) * e**2)
            for (j, _, e), (_, _, e_next) in zip(self.entries, self.entries[1:])
            if e > 0 and e_next > self.contraction_floor
        ]
        return max(ratios, default=0.0)

    @property
    def final_eps(self) -> float:
        """Last ε, or 0 before any step."""
        return self.entries[-1][2] if self.entries else 0.0

    def to_dict(self) -> dict[str, Any]:
        """JSON friendly view."""
        return {
            "entries": [list(entry) for entry in self.entries],
            "D_fit": self.D_fit,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ContractionLog":
        """Inverse of :meth:`to_dict`."""
        return cls([(int(j), float(T), float(e)) for j, T, e in data["entries"]])


@dataclass
class DyadicRun:
    """Outcome of a dyadic Newton iteration over one unit of rescaled time."""

    field: CoefficientField
    log: ContractionLog
    state: StateVector
    record: TrajectoryRecord


def dyadic_schedule(
    z_handoff: StateVector,
    spectrum: DiffusionSpectrum,
    config: Config | None = None,
) -> DyadicRun:
    """Iterated Newton steps on [t0 + 1 − 2^{−j}, t0 + 1 − 2^{−j−1}], j = 0, 1, …

    Parameters
    ----------
    z_handoff : StateVector
        Starting state, its time t0 is the origin of the schedule.
    spectrum : DiffusionSpectrum
        Diffusion coefficients.
    config : Config, optional
        Stop thresholds and integrator settings.

    Returns
    -------
    DyadicRun
        Realized field over [t0, t0 + 1], contraction log, final state and trajectory.
    """
    config = config or Config()
    t0 = z_handoff.t
    log = ContractionLog(contraction_floor=config.contraction_floor)
    record = TrajectoryRecord()
    _, eps = mass_and_ratio(z_handoff)
    if eps == 0.0:
        record = integrate(z_handoff, CoefficientField.zero(t0, t0 + 1), spectrum, config=config)
        assert record.final_state is not None
        return DyadicRun(record.realized_field, log, record.final_state, record)
    if eps > config.eps_start_max:
        logger.warning(f"Dyadic iteration starts at ε = {eps:.3e}, above eps_start_max = {config.eps_start_max:.1e}")

    boundaries = [t0 + 1 - 2.0**-j for j in range(config.max_dyadic_steps + 2)]
    state = z_handoff
    increases = 0
    previous = math.inf
    j = 0
    while True:
        T = 2.0 ** -(j + 1)
        log.entries.append((j, T, eps))
        logger.info(f"Dyadic step {j}: ε = {eps:.3e}")
        if eps < config.eps_converged:
            break
        if eps >= previous and eps < config.eps_accept:
            logger.info(f"Off-mode ratio stagnated at {eps:.3e}, accepting")
            break
        increases = increases + 1 if eps > previous else 0
        if increases >= 2:
            raise NoContraction(
                f"Off-mode ratio grew twice in a row to {eps:.3e}; lower eps_start_max or check the spectrum."
            )
        if j >= config.max_dyadic_steps:
            if eps < config.eps_accept:
                break
            raise NoContraction(f"No convergence after {j} dyadic steps, ε = {eps:.3e}.")
        controls = newton_step_controls(state, T, spectrum, config=config)
        # the state clock may sit a few ulp off the dyadic grid
        start, end = state.t, boundaries[j + 1]
        segments = controls.segments(start, start + (end - start) / 2, end)
        step_record = integrate(state, CoefficientField(segments), spectrum, config=config)
        record.extend(step_record)
        assert step_record.final_state is not None
        state = step_record.final_state
        previous = eps
        _, eps = mass_and_ratio(state)
        j += 1

    if state.t < t0 + 1:
        tail = integrate(state, CoefficientField.zero(state.t, t0 + 1), spectrum, config=config)
        record.extend(tail)
        assert tail.final_state is not None
        state = tail.final_state
    return DyadicRun(record.realized_field, log, state, record)


def free_decay_ratio(z: StateVector, spectrum: DiffusionSpectrum, tau: float | NDArray[np.float64]) -> Any:
    """Off-mode ratio after free decay for time tau, computed relative to mode 1."""
    power = np.abs(z.amp) ** 2
    one = spectrum.index(1)
    gaps = spectrum.d_array - spectrum.d_array[one]
    off = np.ones(power.size, dtype=bool)
    off[one] = False
    taus = np.atleast_1d(np.asarray(tau, dtype=np.float64))
    with np.errstate(under="ignore"):
        scaled = power[off] * np.exp(-2.0 * np.outer(taus, gaps[off]))
    off_mass = scaled.sum(axis=1)
    ratio = np.sqrt(off_mass / (off_mass + power[one]))
    return ratio if np.ndim(tau) else float(ratio[0])


def choose_wait(
    z: StateVector, spectrum: DiffusionSpectrum, target: float, tau_max: float, grid: int = 512
) -> tuple[float, float]:
    """First free-decay time at which the off-mode ratio reaches target.

    Parameters
    ----------
    z : StateVector
        State at the start of the wait.
    spectrum : DiffusionSpectrum
        Diffusion coefficients.
    target : float
        Ratio to reach.
    tau_max : float
        Longest admissible wait.
    grid : int, optional
        Number of scan points, by default 512.

    Returns
    -------
    tuple[float, float]
        The wait and the ratio it reaches. When the target is unreachable, the wait
        minimizing the ratio on [0, tau_max].
    """
    taus = np.linspace(0.0, tau_max, grid + 1)
    ratios = free_decay_ratio(z, spectrum, taus)
    if ratios[0] <= target:
        return 0.0, float(ratios[0])
    below = np.nonzero(ratios <= target)[0]
    if below.size == 0:
        best = int(np.argmin(ratios))
        return float(taus[best]), float(ratios[best])
    i = int(below[0])
    tau = float(brentq(lambda s: free_decay_ratio(z, spectrum, s) - target, taus[i - 1], taus[i], xtol=1e-12))
    # the root may land a rounding error above target; step right until it is not
    for candidate in (tau, tau + 1e-12 * (1 + tau), tau + 1e-9 * (1 + tau)):
        ratio = float(free_decay_ratio(z, spectrum, candidate))
        if ratio <= target and candidate <= taus[i]:
            return candidate, ratio
    return float(taus[i]), float(ratios[i])


@dataclass
class ProtocolRun:
    """A synthesized and integrated transfer protocol.

    ``field`` is the realized coefficient field, ``beta`` the amplitude left on
    mode 1 and ``residual`` its final off-mode ratio.
    """

    direction: Direction
    field: CoefficientField
    record: TrajectoryRecord
    contraction: ContractionLog
    state: StateVector
    beta: complex
    residual: float
    waits: dict[str, float] = field(default_factory=dict)

    @property
    def duration(self) -> float:
        """Rescaled length of the protocol."""
        return self.field.duration


def _wait(
    state: StateVector,
    spectrum: DiffusionSpectrum,
    config: Config,
    tau_max: float,
    record: TrajectoryRecord,
    label: str,
) -> tuple[StateVector, float]:
    tau, ratio = choose_wait(state, spectrum, config.eps_start_max, tau_max)
    if ratio > config.eps_start_max:
        raise WaitTimeout(
            f"Waiting at most {tau_max:.3g} only reaches an off-mode ratio of {ratio:.3e} > {config.eps_start_max:.1e}."
        )
    logger.info(f"Waiting {tau:.4g} for off-mode ratio {ratio:.3e}")
    if tau == 0.0:
        return state, tau
    record.mark(state.t, label)
    wait = integrate(state, CoefficientField.zero(state.t, state.t + tau), spectrum, config=config)
    record.extend(wait)
    assert wait.final_state is not None
    return wait.final_state, tau


def _finish(
    direction: Direction,
    record: TrajectoryRecord,
    state: StateVector,
    spectrum: DiffusionSpectrum,
    config: Config,
    waits: dict[str, float],
) -> ProtocolRun:
    record.mark(state.t, "dyadic")
    dyadic = dyadic_schedule(state, spectrum, config)
    record.extend(dyadic.record)
    final = dyadic.state
    _, residual = mass_and_ratio(final)
    beta = final[1]
    logger.info(f"Transfer done: |β| = {abs(beta):.6e}, residual {residual:.3e}")
    return ProtocolRun(
        direction=direction,
        field=record.realized_field,
        record=record,
        contraction=dyadic.log,
        state=final,
        beta=beta,
        residual=residual,
        waits=waits,
    )


def uphill_protocol(spectrum: DiffusionSpectrum, config: Config | None = None) -> ProtocolRun:
    """Move δ_{k,0} to β δ_{k,1} on an uphill line.

    Feedback on [0, 1] empties mode 0, free decay for τ removes the rest of the
    off-mode mass down to ``eps_start_max`` and the dyadic iteration finishes on
    [1 + τ, 2 + τ].

    Parameters
    ----------
    spectrum : DiffusionSpectrum
        Uphill spectrum passing the assumption checks.
    config : Config, optional
        Protocol and integrator settings.

    Returns
    -------
    ProtocolRun
        Realized field, trajectory, contraction log and final amplitude.
    """
    config = config or Config()
    if spectrum.direction is not Direction.UPHILL:
        raise WrongDirection("uphill_protocol needs an uphill spectrum.")
    state = StateVector.delta(spectrum.window, 0)
    feedback = FeedbackSegment(
        0.0,
        1.0,
        gain=config.feedback_gain,
        switch_time=config.switch_time,
        zero_tolerance=config.zero_tolerance,
        period=config.feedback_period,
        approach=config.feedback_approach,
    )
    record = integrate(state, CoefficientField((feedback,)), spectrum, config=config)
    record.phase_marks.insert(0, (0.0, "feedback"))
    assert record.final_state is not None
    state = record.final_state
    z0, z1 = abs(state[0]), abs(state[1])
    logger.info(f"Stage 1 done: |z0| = {z0:.3e}, |z1| = {z1:.4f}")
    if z0 > config.stage1_tolerance:
        raise Stage1Fail(f"|z0| = {z0:.3e} after feedback exceeds stage1_tolerance = {config.stage1_tolerance:.1e}.")
    tau_max = config.tau_max_factor / _min_off_coefficient(spectrum)
    state, tau = _wait(state, spectrum, config, tau_max, record, "wait")
    return _finish(Direction.UPHILL, record, state, spectrum, config, {"tau": tau})


def _min_off_coefficient(spectrum: DiffusionSpectrum) -> float:
    return float(min(d for k, d in spectrum.d.items() if k not in (0, 1)))


def default_eta(spectrum: DiffusionSpectrum) -> float:
    """Push amplitude e^{−|a|} α of a downhill line."""
    alpha = math.sqrt(angle_factor_squared(spectrum.a, spectrum.b))
    return math.exp(-math.sqrt(norm2(spectrum.a))) * alpha


def downhill_protocol(
    spectrum: DiffusionSpectrum, eta: float | None = None, config: Config | None = None
) -> ProtocolRun:
    """Move δ_{k,0} to β δ_{k,1} on a downhill line.

    A constant push v^{±1} = η seeds mode 1, free decay for σ lets mode 0 fall
    behind it and the dyadic iteration finishes on one unit of time.

    Parameters
    ----------
    spectrum : DiffusionSpectrum
        Downhill spectrum passing the assumption checks.
    eta : float, optional
        Push amplitude, by default ``config.eta`` or e^{−|a|} α.
    config : Config, optional
        Protocol and integrator settings.

    Returns
    -------
    ProtocolRun
        Realized field, trajectory, contraction log and final amplitude.
    """
    config = config or Config()
    if spectrum.direction is not Direction.DOWNHILL:
        raise WrongDirection("downhill_protocol needs a downhill spectrum.")
    eta = eta if eta is not None else config.eta if config.eta is not None else default_eta(spectrum)
    if not eta > 0:
        raise ValueError(f"Push amplitude must be positive, got {eta}.")
    tau = min(config.push_budget / eta, config.push_cap)
    state = StateVector.delta(spectrum.window, 0)
    record = integrate(state, CoefficientField((ConstantSegment(0.0, tau, {1: eta}),)), spectrum, config=config)
    record.phase_marks.insert(0, (0.0, "push"))
    assert record.final_state is not None
    state = record.final_state
    rho = abs(state[1])
    logger.info(f"Push of η = {eta:.3e} for {tau:.3g}: |z1| = {rho:.3e}")
    if rho < config.rho_min:
        raise NoPush(
            f"|z1| = {rho:.3e} after the push is below rho_min = {config.rho_min:.1e}; raise eta or the push time."
        )
    state, sigma = _wait(state, spectrum, config, config.sigma_max, record, "wait")
    return _finish(Direction.DOWNHILL, record, state, spectrum, config, {"push": tau, "sigma": sigma, "eta": eta})


def field_sup_norms(field: CoefficientField) -> dict[int, float]:
    """sup_t |v^k_t| per mode k, both signs; feedback segments count with their gain on ±1."""
    norms: dict[int, float] = {}
    for segment in field:
        for k, value in segment.sup_norms().items():
            norms[k] = max(norms.get(k, 0.0), value)
    return dict(sorted(norms.items()))
