"""Exponential time differencing for the truncated line system ż^k = −d_k z^k + i Σ_j v^j z^{k−j}.

Diffusion is applied exactly through e^{−d h}; advection is advanced with the
Cox–Matthews ETDRK4 rule (or its second-order sibling) whose coefficients are
computed by contour averaging, so they stay accurate as d h → 0.
"""

import csv
import logging
import math
from collections.abc import Callable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import NDArray
from rich.progress import track

from .coefficients import (
    CoefficientField,
    ConstantSegment,
    FeedbackSegment,
    Segment,
    ZeroSegment,
    step_count,
)
from .config import Config
from .errors import BlowUp, LeakExceeded, ZeroMass
from .spectrum import DiffusionSpectrum

logger = logging.getLogger(__name__)

# Gauss-Legendre nodes for quadrature over free-decay intervals
_GAUSS_NODES, _GAUSS_WEIGHTS = np.polynomial.legendre.leggauss(8)


@dataclass
class StateVector:
    """Complex amplitudes z^k on an integer window of line indices.

    Parameters
    ----------
    window : tuple[int, int]
        Inclusive range [k_min, k_max].
    amp : NDArray[np.complex128]
        Amplitudes ordered by k.
    t : float
        Rescaled time of the state.
    """

    window: tuple[int, int]
    amp: NDArray[np.complex128]
    t: float = 0.0

    def __post_init__(self):
        self.window = (int(self.window[0]), int(self.window[1]))
        self.amp = np.asarray(self.amp, dtype=np.complex128)
        if self.amp.shape != (self.window[1] - self.window[0] + 1,):
            raise ValueError(f"Amplitude array of shape {self.amp.shape} does not fit window {self.window}.")

    @classmethod
    def delta(cls, window: tuple[int, int], k: int = 0, t: float = 0.0, value: complex = 1.0) -> "StateVector":
        """Pure mode k."""
        amp = np.zeros(window[1] - window[0] + 1, dtype=np.complex128)
        amp[k - window[0]] = value
        return cls(window, amp, t)

    @property
    def ks(self) -> NDArray[np.int64]:
        """Line indices of the window."""
        return np.arange(self.window[0], self.window[1] + 1, dtype=np.int64)

    def __getitem__(self, k: int) -> complex:
        if not self.window[0] <= k <= self.window[1]:
            return 0j
        return complex(self.amp[k - self.window[0]])

    def copy(self) -> "StateVector":
        """Independent copy."""
        return StateVector(self.window, self.amp.copy(), self.t)

    def mass(self) -> float:
        """Σ_k |z^k|²."""
        return float(np.vdot(self.amp, self.amp).real)

    def boundary_mass(self) -> float:
        """Mass on the two outermost modes of the window."""
        return float(abs(self.amp[0]) ** 2 + abs(self.amp[-1]) ** 2)

    def to_dict(self) -> dict[str, Any]:
        """JSON friendly view."""
        return {
            "window": list(self.window),
            "t": self.t,
            "amp": [[v.real, v.imag] for v in self.amp.tolist()],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "StateVector":
        """Inverse of :meth:`to_dict`."""
        amp = np.array([complex(re, im) for re, im in data["amp"]], dtype=np.complex128)
        return cls(tuple(data["window"]), amp, float(data.get("t", 0.0)))


def mass_and_ratio(z: StateVector) -> tuple[float, float]:
    """Total mass and off-mode ratio √(Σ_{k≠1}|z^k|² / Σ_k|z^k|²).

    Parameters
    ----------
    z : StateVector
        The state.

    Returns
    -------
    tuple[float, float]
        (mass, off_mode_ratio).
    """
    power = np.abs(z.amp) ** 2
    mass = float(power.sum())
    if mass == 0.0:
        raise ZeroMass("The state has zero mass, the off-mode ratio is undefined.")
    one = 1 - z.window[0]
    if 0 <= one < power.size:
        off = float(power[:one].sum() + power[one + 1 :].sum())
    else:
        off = mass
    return mass, math.sqrt(max(off, 0.0) / mass)


@dataclass
class Sample:
    """One point of a trajectory.

    ``dissipated`` is the running integral of 2Σd_k|z^k|² and
    ``dirichlet_integral`` the running integral of the lattice Dirichlet ratio,
    both in rescaled time from the start of the record.
    """

    t: float
    mass: float
    off_mode_ratio: float
    dirichlet_ratio: float
    dissipated: float = 0.0
    dirichlet_integral: float = 0.0
    snapshot: StateVector | None = None


@dataclass
class TrajectoryRecord:
    """Samples, phase marks and the realized field of one integration."""

    samples: list[Sample] = field(default_factory=list)
    phase_marks: list[tuple[float, str]] = field(default_factory=list)
    dt_used: float = 0.0
    steps: int = 0
    realized: list[Segment] = field(default_factory=list)
    final_state: StateVector | None = None

    @property
    def realized_field(self) -> CoefficientField:
        """Recorded segments as a replayable field."""
        return CoefficientField(tuple(self.realized))

    def times(self) -> NDArray[np.float64]:
        """Sample times."""
        return np.array([s.t for s in self.samples])

    def masses(self) -> NDArray[np.float64]:
        """Sample masses."""
        return np.array([s.mass for s in self.samples])

    def ratios(self) -> NDArray[np.float64]:
        """Sample off-mode ratios."""
        return np.array([s.off_mode_ratio for s in self.samples])

    def mark(self, t: float, label: str) -> None:
        """Label the phase starting at t."""
        self.phase_marks.append((t, label))

    def extend(self, other: "TrajectoryRecord") -> "TrajectoryRecord":
        """Append a later record, continuing the running integrals."""
        dissipated = self.samples[-1].dissipated if self.samples else 0.0
        dirichlet = self.samples[-1].dirichlet_integral if self.samples else 0.0
        start = 1 if self.samples and other.samples and other.samples[0].t == self.samples[-1].t else 0
        for sample in other.samples[start:]:
            self.samples.append(
                replace(
                    sample,
                    dissipated=sample.dissipated + dissipated,
                    dirichlet_integral=sample.dirichlet_integral + dirichlet,
                )
            )
        self.phase_marks.extend(other.phase_marks)
        self.dt_used = max(self.dt_used, other.dt_used)
        self.steps += other.steps
        self.realized.extend(other.realized)
        self.final_state = other.final_state
        return self

    def dissipation_residual(self) -> float:
        """Worst |Δmass + Δ∫2Σd|z|²| over sample intervals, relative to the mass at the interval start."""
        worst = 0.0
        for left, right in zip(self.samples, self.samples[1:]):
            change = (right.mass - left.mass) + (right.dissipated - left.dissipated)
            worst = max(worst, abs(change) / left.mass)
        return worst

    def max_mass_increase(self) -> float:
        """Largest relative mass increase between consecutive samples."""
        masses = self.masses()
        if masses.size < 2:
            return 0.0
        return float(np.max((masses[1:] - masses[:-1]) / masses[:-1], initial=0.0))

    def to_csv(self, path: Path | str, per_mode: bool = False) -> None:
        """Write t, mass, off_mode_ratio and optionally |z^k| of stored snapshots."""
        path = Path(path)
        snapshots = [s.snapshot for s in self.samples if s.snapshot is not None]
        ks = list(snapshots[0].ks) if per_mode and snapshots else []
        with path.open("w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["t", "mass", "off_mode_ratio", *[f"abs_z{k}" for k in ks]])
            for sample in self.samples:
                row: list[Any] = [sample.t, sample.mass, sample.off_mode_ratio]
                if ks:
                    row += list(np.abs(sample.snapshot.amp)) if sample.snapshot is not None else [""] * len(ks)
                writer.writerow(row)


class EtdCoefficients:
    """ETD step coefficients for a diagonal linear part, one step size.

    Parameters
    ----------
    rates : NDArray[np.float64]
        Decay rates λ ≥ 0 of the linear part −λ.
    h : float
        Step size.
    scheme : str
        "etdrk4" or "etd2rk".
    points : int
        Contour points on the upper half circle.
    """

    def __init__(self, rates: NDArray[np.float64], h: float, scheme: str = "etdrk4", points: int = 32):
        self.h = h
        self.scheme = scheme
        x = -h * rates
        self.exp_full = np.exp(x)
        self.exp_half = np.exp(x / 2)
        # contour averages around each x keep the divided differences accurate near 0
        roots = np.exp(1j * np.pi * (np.arange(points) + 0.5) / points)
        lr = x.reshape(x.shape + (1,)) + roots
        exp_lr = np.exp(lr)
        if scheme == "etdrk4":
            lr2, lr3 = lr**2, lr**3
            self.q = h * ((np.exp(lr / 2) - 1) / lr).mean(-1).real
            self.f1 = h * ((-4 - lr + exp_lr * (4 - 3 * lr + lr2)) / lr3).mean(-1).real
            self.f2 = h * ((2 + lr + exp_lr * (lr - 2)) / lr3).mean(-1).real
            self.f3 = h * ((-4 - 3 * lr - lr2 + exp_lr * (4 - lr)) / lr3).mean(-1).real
        elif scheme == "etd2rk":
            self.phi1 = h * ((exp_lr - 1) / lr).mean(-1).real
            self.phi2 = h * ((exp_lr - 1 - lr) / lr**2).mean(-1).real
        else:
            raise ValueError(f"Unknown scheme {scheme!r}.")

    def step(
        self, z: NDArray[np.complex128], advect: Callable[[NDArray[np.complex128]], NDArray[np.complex128]]
    ) -> tuple[NDArray[np.complex128], list[tuple[float, NDArray[np.complex128]]]]:
        """Advance one step.

        Returns
        -------
        tuple
            The new state and the weighted stage values (weight, stage) whose
            weighted sum of any smooth functional integrates it over the step.
        """
        if self.scheme == "etdrk4":
            n0 = advect(z)
            a = self.exp_half * z + self.q * n0
            na = advect(a)
            b = self.exp_half * z + self.q * na
            nb = advect(b)
            c = self.exp_half * a + self.q * (2 * nb - n0)
            nc = advect(c)
            new = self.exp_full * z + self.f1 * n0 + 2 * self.f2 * (na + nb) + self.f3 * nc
            sixth = self.h / 6
            return new, [(sixth, z), (2 * sixth, a), (2 * sixth, b), (sixth, c)]
        n0 = advect(z)
        a = self.exp_full * z + self.phi1 * n0
        new = a + self.phi2 * (advect(a) - n0)
        half = self.h / 2
        return new, [(half, z), (half, new)]


def line_advection(values: dict[int, complex] | ConstantSegment, size: int) -> Callable:
    """Advection operator z ↦ i Σ_j v^j z^{k−j} truncated to the window.

    Parameters
    ----------
    values : ConstantSegment
        Coefficients, k ≥ 1 stored.
    size : int
        Window length.

    Returns
    -------
    Callable
        Function mapping an amplitude array to its advection term.
    """
    segment = values if isinstance(values, ConstantSegment) else ConstantSegment(0.0, 1.0, values)
    reach, full = segment.modes()
    if reach == 0:
        return lambda z: np.zeros_like(z)
    pairs = [(j - reach, full[j]) for j in range(full.size) if full[j] != 0]
    if len(pairs) <= 4:

        def advect(z: NDArray[np.complex128]) -> NDArray[np.complex128]:
            """Advection term on the window."""
            out = np.zeros_like(z)
            for j, vj in pairs:
                if j >= size or -j >= size:
                    continue
                if j > 0:
                    out[j:] += vj * z[:-j]
                else:
                    out[:j] += vj * z[-j:]
            return 1j * out

        return advect

    def advect_conv(z: NDArray[np.complex128]) -> NDArray[np.complex128]:
        """Advection term by full convolution."""
        return 1j * np.convolve(z, full)[reach : reach + size]

    return advect_conv


class _Stepper:
    """Mutable integration state shared by the segment handlers."""

    def __init__(
        self,
        z0: StateVector,
        spectrum: DiffusionSpectrum,
        config: Config,
        weights: NDArray[np.float64],
        snapshot_all: bool,
    ):
        self.z = z0.amp.copy()
        self.t = z0.t
        self.window = spectrum.window
        self.d = spectrum.d_array
        self.weights = weights
        self.config = config
        self.snapshot_all = snapshot_all
        self.index0 = spectrum.index(0)
        self.index1 = spectrum.index(1)
        self.cache: dict[float, EtdCoefficients] = {}
        self.record = TrajectoryRecord()
        self.dissipated = 0.0
        self.dirichlet = 0.0
        self.running_min = math.inf
        self.since_sample = 0
        self.sample(force_snapshot=True)

    # functionals integrated alongside the state
    def dissipation_rate(self, z: NDArray[np.complex128]) -> float:
        """2 Σ d_k |z^k|²."""
        return float(2.0 * np.dot(self.d, np.abs(z) ** 2))

    def dirichlet_ratio(self, z: NDArray[np.complex128]) -> float:
        """Σ |a+kb|² |z^k|² / Σ |z^k|²."""
        power = np.abs(z) ** 2
        total = power.sum()
        return float(np.dot(self.weights, power) / total) if total > 0 else 0.0

    def coefficients(self, h: float) -> EtdCoefficients:
        """Cached exponential weights for step h."""
        coefficients = self.cache.get(h)
        if coefficients is None:
            if len(self.cache) > 512:
                self.cache.clear()
            coefficients = EtdCoefficients(self.d, h, self.config.scheme, self.config.contour_points)
            self.cache[h] = coefficients
        return coefficients

    def state(self) -> StateVector:
        """Current state as a StateVector."""
        return StateVector(self.window, self.z.copy(), self.t)

    def sample(self, force_snapshot: bool = False) -> None:
        """Append a sample, with a snapshot when due."""
        power = np.abs(self.z) ** 2
        mass = float(power.sum())
        if mass == 0.0:
            raise ZeroMass(f"All mass vanished at t = {self.t}.")
        if mass > self.running_min * (1 + self.config.blowup_tolerance):
            raise BlowUp(
                f"Mass grew to {mass:.6e} above its running minimum {self.running_min:.6e} at t = {self.t:.6g}; "
                "lower dt_safety."
            )
        self.running_min = min(self.running_min, mass)
        leak = float(power[0] + power[-1]) / mass
        if leak > self.config.leak_tolerance:
            raise LeakExceeded(
                f"Boundary mass fraction {leak:.3e} exceeds {self.config.leak_tolerance:.1e} at t = {self.t:.6g}; "
                "enlarge the window."
            )
        off = float(mass - power[self.index1])
        if off < 1e-8 * mass:
            off = float(power[: self.index1].sum() + power[self.index1 + 1 :].sum())
        snapshot = self.state() if force_snapshot or self.snapshot_all else None
        self.record.samples.append(
            Sample(
                t=self.t,
                mass=mass,
                off_mode_ratio=math.sqrt(max(off, 0.0) / mass),
                dirichlet_ratio=float(np.dot(self.weights, power) / mass),
                dissipated=self.dissipated,
                dirichlet_integral=self.dirichlet,
                snapshot=snapshot,
            )
        )
        self.since_sample = 0

    def flush_underflow(self) -> None:
        """Zero amplitudes below the underflow threshold."""
        self.z[np.abs(self.z) < self.config.underflow] = 0

    def zero(self, t_end: float) -> None:
        """Exact pure diffusion to t_end, with Gauss quadrature for the Dirichlet integral."""
        length = t_end - self.t
        if length <= 0:
            return
        origin, t_start, dissipated = self.z.copy(), self.t, self.dissipated
        start_power = np.abs(origin) ** 2
        live = start_power > 1e-30 * start_power.sum()
        fastest = float(self.d[live].max(initial=0.0))
        pieces = max(8, min(4096, math.ceil(2 * fastest * length)))
        edges = np.linspace(0.0, length, pieces + 1)
        every = max(1, pieces // self.config.sample_every)
        for i, (left, right) in enumerate(zip(edges[:-1], edges[1:])):
            nodes = left + (right - left) * (_GAUSS_NODES + 1) / 2
            node_power = np.exp(-2.0 * np.outer(nodes, self.d)) * start_power
            totals = node_power.sum(axis=1)
            ratios = np.divide(node_power @ self.weights, totals, out=np.zeros_like(totals), where=totals > 0)
            self.dirichlet += float((right - left) / 2 * np.dot(_GAUSS_WEIGHTS, ratios))
            if i % every == every - 1 or i == pieces - 1:
                self.z = np.exp(-self.d * right) * origin
                self.t = t_start + right
                self.dissipated = dissipated + float(np.dot(start_power, -np.expm1(-2 * self.d * right)))
                if i < pieces - 1:
                    self.sample()
        self.t = t_end
        self.flush_underflow()

    def constant(self, segment: ConstantSegment, t_end: float) -> None:
        """ETD steps with fixed coefficients up to t_end, aligned to t_end."""
        length = t_end - self.t
        if length <= 0:
            return
        h_max = min(self.config.dt_max, self.config.dt_safety / (1.0 + segment.total_variation()))
        n = step_count(length, h_max)
        h = length / n
        coefficients = self.coefficients(h)
        advect = line_advection(segment, self.z.size)
        t_start = self.t
        for i in range(n):
            self.z, stages = coefficients.step(self.z, advect)
            self.dissipated += sum(w * self.dissipation_rate(s) for w, s in stages)
            self.dirichlet += sum(w * self.dirichlet_ratio(s) for w, s in stages)
            self.t = t_start + (i + 1) * h
            self.since_sample += 1
            if self.since_sample >= self.config.sample_every:
                self.flush_underflow()
                self.sample()
        self.t = t_end
        self.record.steps += n
        self.record.dt_used = max(self.record.dt_used, h)

    def feedback(self, segment: FeedbackSegment, t_end: float) -> None:
        """Sampled-data feedback: constant amplitude per control period."""
        latched = False
        while self.t < t_end:
            t_rel = self.t - segment.t0
            z0, z1 = complex(self.z[self.index0]), complex(self.z[self.index1])
            a = segment.value(z0, z1, self.t)
            if t_rel >= segment.switch_time and a == 0:
                latched = True
                break
            if t_rel < segment.switch_time:
                # constant kick on the regular grid, ending exactly at the switch
                periods_done = math.floor(t_rel / segment.period + 1e-9)
                period_end = segment.t0 + min((periods_done + 1) * segment.period, segment.switch_time)
            else:
                period = min(segment.period, segment.approach * abs(z0) / (segment.gain * abs(z1)))
                period_end = self.t + max(period, 1e-12)
            period_end = min(period_end, t_end)
            piece = ConstantSegment(self.t, period_end, {1: a})
            self.record.realized.append(piece)
            self.constant(piece, period_end)
        if latched and self.t < t_end:
            logger.debug(f"Feedback latched to zero at t = {self.t:.6g}")
            self.record.mark(self.t, "feedback-latched")
            self.record.realized.append(ZeroSegment(self.t, t_end))
            self.zero(t_end)


def integrate(
    z0: StateVector,
    field: CoefficientField,
    spectrum: DiffusionSpectrum,
    t0: float | None = None,
    t1: float | None = None,
    config: Config | None = None,
    weights: NDArray[np.float64] | None = None,
    checkpoints: Sequence[float] = (),
    snapshot_all: bool = False,
) -> TrajectoryRecord:
    """Integrate the truncated line system under a coefficient field.

    Parameters
    ----------
    z0 : StateVector
        Initial state, on the spectrum's window.
    field : CoefficientField
        Coefficients covering [t0, t1].
    spectrum : DiffusionSpectrum
        Diffusion coefficients.
    t0 : float, optional
        Start time, by default z0.t.
    t1 : float, optional
        End time, by default the end of the field.
    config : Config, optional
        Step bounds and tolerances.
    weights : NDArray[np.float64], optional
        Per-mode weights of the sampled Dirichlet ratio, by default |a+kb|².
    checkpoints : Sequence[float], optional
        Extra times where a step ends and a snapshot is stored.
    snapshot_all : bool, optional
        Store a snapshot with every sample, not only at checkpoints and the end.

    Returns
    -------
    TrajectoryRecord
        Samples, realized field and final state.
    """
    config = config or Config()
    t0 = z0.t if t0 is None else t0
    t1 = field.t_end if t1 is None else t1
    if not t1 > t0:
        raise ValueError(f"Need t1 > t0, got [{t0}, {t1}].")
    if z0.window != spectrum.window:
        raise ValueError(f"State window {z0.window} does not match spectrum window {spectrum.window}.")
    # field ends may differ from the interval by rounding of the caller's clock
    slack = 1e-12 * max(1.0, abs(t0), abs(t1))
    if field.t_start > t0 + slack or field.t_end < t1 - slack:
        raise ValueError(f"Field [{field.t_start}, {field.t_end}] does not cover [{t0}, {t1}].")
    t1 = min(t1, field.t_end)
    weights = spectrum.site_norms if weights is None else weights

    start = StateVector(z0.window, z0.amp, t0)
    stepper = _Stepper(start, spectrum, config, weights, snapshot_all)
    stops = sorted(t for t in checkpoints if t0 < t < t1)
    for segment in field:
        if segment.t1 <= t0 or segment.t0 >= t1:
            continue
        end = min(segment.t1, t1)
        inner = [t for t in stops if stepper.t < t < end] + [end]
        for target in inner:
            if isinstance(segment, ZeroSegment):
                stepper.record.realized.append(ZeroSegment(stepper.t, target))
                stepper.zero(target)
            elif isinstance(segment, ConstantSegment):
                stepper.record.realized.append(ConstantSegment(stepper.t, target, segment.values))
                stepper.constant(segment, target)
            else:
                stepper.feedback(segment, target)
            stepper.flush_underflow()
            stepper.sample(force_snapshot=target in stops or target == t1)
    stepper.record.final_state = stepper.state()
    logger.debug(
        f"Integrated [{t0:.6g}, {t1:.6g}] in {stepper.record.steps} steps, max dt {stepper.record.dt_used:.3g}"
    )
    return stepper.record


@dataclass(frozen=True)
class ConvergencePoint:
    """Error of one step size against the finest run."""

    dt: float
    error: float


def _final_state(args: tuple) -> NDArray[np.complex128]:
    z0, field, spectrum, t0, t1, config = args
    record = integrate(z0, field, spectrum, t0, t1, config)
    assert record.final_state is not None
    return record.final_state.amp


def convergence_study(
    z0: StateVector,
    field: CoefficientField,
    spectrum: DiffusionSpectrum,
    t0: float,
    t1: float,
    dt_list: Sequence[float],
    config: Config | None = None,
) -> list[ConvergencePoint]:
    """Self-convergence of the scheme against a Richardson reference.

    Parameters
    ----------
    z0 : StateVector
        Initial state.
    field : CoefficientField
        Coefficients on [t0, t1].
    spectrum : DiffusionSpectrum
        Diffusion coefficients.
    t0, t1 : float
        Time interval.
    dt_list : Sequence[float]
        Maximal step sizes, descending, at least two.
    config : Config, optional
        Scheme and worker count.

    Returns
    -------
    list[ConvergencePoint]
        Relative ℓ² error of each run against the extrapolated reference.
    """
    config = config or Config()
    dt_list = list(dt_list)
    if len(dt_list) < 2 or any(b >= a for a, b in zip(dt_list, dt_list[1:])):
        raise ValueError("dt_list must hold at least two strictly descending step sizes.")
    jobs = [(z0, field, spectrum, t0, t1, config.replace(dt_max=dt, dt_safety=1e12)) for dt in dt_list]
    with ProcessPoolExecutor(max_workers=config.num_cpus) as executor:
        if config.num_cpus == 1:
            map_func = map
        else:
            map_func = executor.map
        finals = list(track(map_func(_final_state, jobs), description="Convergence study...", total=len(jobs)))

    # Richardson extrapolation from the two finest runs
    order = 4 if config.scheme == "etdrk4" else 2
    ratio = dt_list[-2] / dt_list[-1]
    reference = finals[-1] + (finals[-1] - finals[-2]) / (ratio**order - 1)
    scale = float(np.linalg.norm(reference)) or 1.0
    points = [
        ConvergencePoint(dt, float(np.linalg.norm(final - reference)) / scale) for dt, final in zip(dt_list, finals)
    ]
    for point in points:
        logger.info(f"dt = {point.dt:.3e}: relative error {point.error:.3e}")
    return points


def observed_orders(points: Sequence[ConvergencePoint]) -> list[float]:
    """log(e_i/e_{i+1}) / log(dt_i/dt_{i+1}) for consecutive points with nonzero error."""
    orders = []
    for left, right in zip(points, points[1:]):
        if left.error > 0 and right.error > 0:
            orders.append(math.log(left.error / right.error) / math.log(left.dt / right.dt))
    return orders
