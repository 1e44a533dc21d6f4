"""Lift of the line system to the torus and an independent full-lattice Galerkin check.

A transfer step with line {a + kb} and coefficients v^k_s is realized by the shear
velocity w(t, x) = (L/(α|a|)) ℓ v(Lt, b·x), v(s, y) = Σ_k v^k_s e^{iky}, and the
scalar θ_{s/L} = e^{−As} Σ_k z^k_s f_{a+kb}.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any

import numpy as np
import scipy.fft
from numpy.typing import NDArray
from rich.progress import track

from .coefficients import CoefficientField, ConstantSegment, FeedbackSegment, ZeroSegment, step_count
from .config import Config
from .controller import ProtocolRun, field_sup_norms
from .errors import LeakExceeded
from .geometry import shear_geometry, shear_normal
from .integrator import StateVector, integrate
from .planner import TransferStep
from .spectrum import LatticeVector, dot, norm2

__all__ = [
    "LatticeField",
    "OracleComparison",
    "OracleTrajectory",
    "VelocityField",
    "divergence_check",
    "full_lattice_simulate",
    "full_lattice_trajectory",
    "grid_sample_norms",
    "lift_state",
    "oracle_compare",
    "realize_in_lab",
    "shear_geometry",
    "sobolev_norm_bound",
]

logger = logging.getLogger(__name__)


def realize_in_lab(step: TransferStep) -> tuple[tuple[float, ...], LatticeVector]:
    """Shear direction ℓ and line step b of a step, in lab coordinates."""
    return step.lab_ell, step.lab_b


@dataclass(frozen=True)
class VelocityField:
    """Shear velocity realizing a coefficient field on the torus.

    Parameters
    ----------
    step : TransferStep
        The step whose line the field acts on.
    field : CoefficientField
        Realized coefficients in rescaled time.
    L : Fraction
        Time rescaling of the step.
    """

    step: TransferStep
    field: CoefficientField
    L: Fraction

    @classmethod
    def from_run(cls, step: TransferStep, run: ProtocolRun) -> "VelocityField":
        """Velocity field of a synthesized step."""
        return cls(step, run.field, step.spectrum.L)

    @property
    def amplitude(self) -> float:
        """L / (α|a|)."""
        return float(self.L) / (self.step.alpha * math.sqrt(norm2(self.step.a)))

    @property
    def physical_duration(self) -> float:
        """Duration in physical time."""
        return self.field.duration / float(self.L)


@dataclass
class LatticeField:
    """Fourier coefficients of θ on lattice sites, scaled by e^{log_scale}.

    Parameters
    ----------
    dimension : int
        Torus dimension.
    coeffs : dict[LatticeVector, complex]
        Unscaled coefficients; absent sites are zero.
    box : int
        L∞ radius of the sites considered.
    log_scale : float
        Common logarithmic factor, keeps tiny amplitudes representable.
    """

    dimension: int
    coeffs: dict[LatticeVector, complex]
    box: int
    log_scale: float = 0.0

    def value(self, m: LatticeVector) -> complex:
        """Scaled coefficient at site m."""
        return self.coeffs.get(tuple(m), 0j) * math.exp(self.log_scale)

    def mass(self) -> float:
        """‖θ‖²."""
        return math.exp(self.log_mass()) if self.coeffs else 0.0

    def log_mass(self) -> float:
        """log ‖θ‖², finite for tiny masses."""
        raw = sum(abs(c) ** 2 for c in self.coeffs.values())
        return math.log(raw) + 2 * self.log_scale if raw > 0 else -math.inf

    def dirichlet_ratio(self) -> float:
        """‖∇θ‖² / ‖θ‖²."""
        raw = sum(abs(c) ** 2 for c in self.coeffs.values())
        return sum(norm2(m) * abs(c) ** 2 for m, c in self.coeffs.items()) / raw

    def support_min_norm2(self, threshold: float = 1e-12) -> int:
        """Smallest |m|² among sites holding more than threshold of the mass."""
        raw = sum(abs(c) ** 2 for c in self.coeffs.values())
        return min(norm2(m) for m, c in self.coeffs.items() if abs(c) ** 2 > threshold * raw)

    def to_dense(self, box: int | None = None) -> NDArray[np.complex128]:
        """Array over [−box, box]^d indexed by m + box, scaled coefficients."""
        box = self.box if box is None else box
        dense = np.zeros((2 * box + 1,) * self.dimension, dtype=np.complex128)
        scale = math.exp(self.log_scale)
        for m, c in self.coeffs.items():
            if max(abs(x) for x in m) <= box:
                dense[tuple(x + box for x in m)] = c * scale
        return dense

    @classmethod
    def from_dense(cls, dense: NDArray[np.complex128], cutoff: float = 0.0) -> "LatticeField":
        """Sites of a dense box array above cutoff."""
        box = (dense.shape[0] - 1) // 2
        sites = np.argwhere(np.abs(dense) > cutoff)
        coeffs = {tuple(int(i) - box for i in site): complex(dense[tuple(site)]) for site in sites}
        return cls(dense.ndim, coeffs, box)

    def to_csv(self, path: Path | str) -> None:
        """One row per site: coordinates, real and imaginary parts."""
        scale = math.exp(self.log_scale)
        with Path(path).open("w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow([f"m{i}" for i in range(self.dimension)] + ["re", "im"])
            for m in sorted(self.coeffs):
                c = self.coeffs[m] * scale
                writer.writerow([*m, c.real, c.imag])


def lift_state(z: StateVector, t: float, step: TransferStep) -> LatticeField:
    """θ at physical time t/L: e^{−At} z^k placed at lab(a + kb).

    Parameters
    ----------
    z : StateVector
        State of a run on ``step.spectrum``.
    t : float
        Rescaled time of the state.
    step : TransferStep
        Step giving the line and its frame.

    Returns
    -------
    LatticeField
        Coefficients on the lab lattice, with the shift e^{−At} kept as log scale.
    """
    spectrum = step.spectrum
    coeffs = {}
    for k, amplitude in zip(z.ks, z.amp):
        if amplitude != 0:
            coeffs[step.frame.to_lab(spectrum.site(int(k)))] = complex(amplitude)
    box = max((max(abs(x) for x in m) for m in coeffs), default=0)
    return LatticeField(spectrum.dimension, coeffs, box, log_scale=-float(spectrum.A) * t)


def sobolev_norm_bound(vf: VelocityField, n: int) -> float:
    """(|b|ⁿ L/(α|a|)) Σ_k |k|ⁿ sup_t |v^k_t|, a bound on sup_t ‖w‖_{W^{n,∞}}."""
    if n < 0:
        raise ValueError(f"Derivative order must be nonnegative, got {n}.")
    norms = field_sup_norms(vf.field)
    series = sum(abs(k) ** n * value for k, value in norms.items())
    return math.sqrt(norm2(vf.step.b)) ** n * vf.amplitude * series


def _profile_derivative(values: dict[int, complex], n: int, grid_res: int) -> NDArray[np.complex128]:
    """∂_yⁿ v on y_j = 2πj/grid_res from v(y) = Σ_k v^k e^{iky}."""
    spectrum = np.zeros(grid_res, dtype=np.complex128)
    for k, value in values.items():
        if abs(k) >= grid_res // 2:
            raise ValueError(f"grid_res = {grid_res} cannot resolve mode {k}.")
        spectrum[k % grid_res] = (1j * k) ** n * value
    return scipy.fft.ifft(spectrum) * grid_res


def _check_grid(grid_res: int) -> None:
    if grid_res < 64 or grid_res & (grid_res - 1):
        raise ValueError(f"grid_res must be a power of two of at least 64, got {grid_res}.")


def grid_sample_norms(vf: VelocityField, t: float, n: int, grid_res: int = 256) -> float:
    """max_x |∇ⁿ w(t, x)| on a grid, by exact differentiation of the Fourier series.

    Parameters
    ----------
    vf : VelocityField
        Velocity field.
    t : float
        Rescaled time at which the coefficients are read.
    n : int
        Derivative order.
    grid_res : int, optional
        Grid points along y = b·x, a power of two ≥ 64.

    Returns
    -------
    float
        Sampled W^{n,∞} seminorm, which never exceeds :func:`sobolev_norm_bound`.
    """
    _check_grid(grid_res)
    values = vf.field.evaluate(t)
    if not values:
        return 0.0
    derivative = _profile_derivative(values, n, grid_res)
    return math.sqrt(norm2(vf.step.b)) ** n * vf.amplitude * float(np.abs(derivative).max())


def divergence_check(vf: VelocityField, grid_res: int = 256) -> float:
    """max |∇·w| over the grid and all segments; b·ℓ = 0 is first checked exactly.

    ∇·w = (L/(α|a|)) (ℓ·b) ∂_y v(b·x), with ℓ·b evaluated from the float ℓ.
    """
    _check_grid(grid_res)
    a, b = vf.step.a, vf.step.b
    if dot(b, shear_normal(a, b)) != 0:
        raise ValueError(f"Shear direction of a={a}, b={b} is not orthogonal to b.")
    ell, b_lab = realize_in_lab(vf.step)
    ell_dot_b = sum(x * y for x, y in zip(ell, b_lab))
    worst = 0.0
    for segment in vf.field:
        if isinstance(segment, ConstantSegment) and segment.values:
            values = vf.field.evaluate(segment.t0)
            slope = np.abs(_profile_derivative(values, 1, grid_res)).max()
            worst = max(worst, vf.amplitude * abs(ell_dot_b) * float(slope))
    return worst


def _etd_table(max_rate: int, h: float, points: int = 32) -> tuple[NDArray[np.float64], ...]:
    """ETDRK4 weights for every integer rate 0..max_rate of the linear part −|m|²."""
    x = -h * np.arange(max_rate + 1, dtype=np.float64)
    circle = np.exp(2j * np.pi * (np.arange(points) + 0.5) / points)
    shifted = x[:, None] + circle[None, :]
    e = np.exp(shifted)
    cube = shifted**3
    half = h * np.real(np.mean((np.exp(shifted / 2) - 1) / shifted, axis=1))
    alpha = h * np.real(np.mean((-4 - shifted + e * (4 - 3 * shifted + shifted**2)) / cube, axis=1))
    beta = h * np.real(np.mean((2 + shifted + e * (shifted - 2)) / cube, axis=1))
    gamma = h * np.real(np.mean((-4 - 3 * shifted - shifted**2 + e * (4 - shifted)) / cube, axis=1))
    return np.exp(x), np.exp(x / 2), half, alpha, beta, gamma


def _shifted(theta: NDArray[np.complex128], offset: LatticeVector) -> NDArray[np.complex128] | None:
    """out[m] = theta[m − offset], zero where m − offset leaves the box."""
    out = np.zeros_like(theta)
    target, source = [], []
    for s, size in zip(offset, theta.shape):
        if abs(s) >= size:
            return None
        target.append(slice(s, None) if s >= 0 else slice(None, s))
        source.append(slice(None, size - s) if s >= 0 else slice(-s, None))
    out[tuple(target)] = theta[tuple(source)]
    return out


@dataclass
class OracleTrajectory:
    """Snapshots and energy bookkeeping of a full-lattice run, in physical time."""

    box: int
    snapshots: list[tuple[float, LatticeField]] = field(default_factory=list)
    log_mass: list[tuple[float, float]] = field(default_factory=list)
    dirichlet_integral: list[tuple[float, float]] = field(default_factory=list)
    shell_fraction: float = 0.0

    @property
    def final(self) -> LatticeField:
        """Last snapshot."""
        return self.snapshots[-1][1]

    def energy_residual(self) -> float:
        """|Δ log‖θ‖² + 2∫‖∇θ‖²/‖θ‖² dt| relative to |Δ log‖θ‖²|."""
        if len(self.log_mass) < 2:
            return 0.0
        drop = self.log_mass[-1][1] - self.log_mass[0][1]
        integral = self.dirichlet_integral[-1][1] - self.dirichlet_integral[0][1]
        return abs(drop + 2 * integral) / max(abs(drop), 1e-300)


def full_lattice_trajectory(
    theta0: LatticeField,
    vf: VelocityField,
    box: int,
    t0: float,
    t1: float,
    dt: float | None = None,
    config: Config | None = None,
    checkpoints: tuple[float, ...] = (),
) -> OracleTrajectory:
    """Galerkin truncation of θ̇ = Δθ + w·∇θ to the box [−box, box]^d.

    In Fourier variables mode m receives i (L/(α|a|)) (ℓ·m) Σ_j v^j θ̂(m − jb) from
    advection, and −|m|²θ̂(m) from diffusion, which is applied exactly. Steps end on
    every segment boundary and checkpoint.

    Parameters
    ----------
    theta0 : LatticeField
        Initial scalar, supported in the box.
    vf : VelocityField
        Shear velocity; its segments must all be realized.
    box : int
        L∞ radius of the truncation.
    t0, t1 : float
        Physical time interval, inside the field's span divided by L.
    dt : float, optional
        Largest physical step, by default the reduced integrator's bound divided by L.
    config : Config, optional
        Step bounds and leak tolerance.
    checkpoints : tuple[float, ...], optional
        Physical times at which snapshots are kept.

    Returns
    -------
    OracleTrajectory
        Snapshots at checkpoints and at t1 with the logged energy.
    """
    config = config or Config()
    if not vf.field.is_realized:
        raise ValueError("The oracle needs a realized field; replay the run's recorded segments.")
    if not t1 > t0:
        raise ValueError(f"Need t1 > t0, got [{t0}, {t1}].")
    scale = float(vf.L)
    dimension = theta0.dimension
    axis = np.arange(-box, box + 1)
    grids = np.meshgrid(*([axis] * dimension), indexing="ij")
    rates = sum(g.astype(np.int64) ** 2 for g in grids)
    ell, b_lab = realize_in_lab(vf.step)
    ell_m = sum(e * g for e, g in zip(ell, grids))
    coupling = 1j * vf.amplitude * ell_m
    shell = np.zeros(rates.shape, dtype=bool)
    for g in grids:
        shell |= np.abs(g) == box
    max_rate = int(rates.max())

    theta = theta0.to_dense(box)
    if np.abs(theta).sum() != np.abs(theta0.to_dense(max(box, theta0.box))).sum():
        raise ValueError(f"Initial data does not fit in the box of radius {box}.")
    norm_rates = rates.astype(np.float64)
    trajectory = OracleTrajectory(box)

    def log_and_ratio(values: NDArray[np.complex128]) -> tuple[float, float]:
        """log mass and Dirichlet ratio of a box array."""
        power = np.abs(values) ** 2
        total = float(power.sum())
        return math.log(total), float((norm_rates * power).sum() / total)

    t = t0
    integral = 0.0
    current_log, _ = log_and_ratio(theta)
    trajectory.log_mass.append((t, current_log))
    trajectory.dirichlet_integral.append((t, 0.0))
    stops = sorted({c for c in checkpoints if t0 < c < t1} | {t1})
    tables: dict[float, tuple[NDArray[np.float64], ...]] = {}

    for segment in vf.field:
        seg_start, seg_end = segment.t0 / scale, segment.t1 / scale
        if seg_end <= t0 or seg_start >= t1:
            continue
        if isinstance(segment, FeedbackSegment):
            raise ValueError("Feedback segments cannot be replayed by the oracle.")
        pairs: list[tuple[LatticeVector, complex]] = []
        total_variation = 0.0
        if isinstance(segment, ConstantSegment):
            for k in segment.values:
                for j in (k, -k):
                    pairs.append((tuple(j * x for x in b_lab), segment.coefficient(j)))
            total_variation = segment.total_variation()

        def advect(values: NDArray[np.complex128]) -> NDArray[np.complex128]:
            """Advection term on the box."""
            out = np.zeros_like(values)
            for offset, vj in pairs:
                moved = _shifted(values, offset)
                if moved is not None:
                    out += vj * moved
            return coupling * out

        targets = [c for c in stops if t < c <= seg_end]
        if seg_end < t1 and (not targets or targets[-1] != seg_end):
            targets.append(min(seg_end, t1))
        h_max = dt if dt is not None else min(config.dt_max, config.dt_safety / (1.0 + total_variation)) / scale
        for target in targets:
            length = target - t
            if length <= 0:
                continue
            if isinstance(segment, ZeroSegment):
                # pure heat flow, energy integral by Gauss-Legendre
                nodes, weights = np.polynomial.legendre.leggauss(16)
                power = np.abs(theta) ** 2
                pieces = max(4, min(1024, math.ceil(2 * max_rate * length / 64)))
                edges = np.linspace(0.0, length, pieces + 1)
                for left, right in zip(edges[:-1], edges[1:]):
                    s = left + (right - left) * (nodes + 1) / 2
                    ratios = []
                    for si in s:
                        decayed = power * np.exp(-2 * norm_rates * si)
                        ratios.append(float((norm_rates * decayed).sum() / decayed.sum()))
                    integral += (right - left) / 2 * float(np.dot(weights, ratios))
                theta = np.exp(-norm_rates * length) * theta
            else:
                n = step_count(length, h_max)
                h = length / n
                table = tables.get(h)
                if table is None:
                    table = tables[h] = tuple(c[rates] for c in _etd_table(max_rate, h, config.contour_points))
                e_full, e_half, half, f1, f2, f3 = table
                for _ in range(n):
                    n0 = advect(theta)
                    a = e_half * theta + half * n0
                    na = advect(a)
                    b = e_half * theta + half * na
                    nb = advect(b)
                    c = e_half * a + half * (2 * nb - n0)
                    nc = advect(c)
                    ratios = [log_and_ratio(stage)[1] for stage in (theta, a, b, c)]
                    integral += h / 6 * (ratios[0] + 2 * ratios[1] + 2 * ratios[2] + ratios[3])
                    theta = e_full * theta + f1 * n0 + 2 * f2 * (na + nb) + f3 * nc
            t = target
            power = np.abs(theta) ** 2
            fraction = float(power[shell].sum() / power.sum())
            trajectory.shell_fraction = max(trajectory.shell_fraction, fraction)
            if fraction > config.leak_tolerance:
                raise LeakExceeded(
                    f"Mass fraction {fraction:.3e} reached the boundary shell of the box {box} at t = {t:.6g}; "
                    "enlarge the box."
                )
            current_log, _ = log_and_ratio(theta)
            trajectory.log_mass.append((t, current_log))
            trajectory.dirichlet_integral.append((t, integral))
            if target in stops:
                trajectory.snapshots.append((t, LatticeField.from_dense(theta)))
        if t >= t1:
            break
    return trajectory


def full_lattice_simulate(
    theta0: LatticeField,
    vf: VelocityField,
    box: int,
    t0: float,
    t1: float,
    dt: float | None = None,
    config: Config | None = None,
) -> LatticeField:
    """Final scalar of :func:`full_lattice_trajectory`."""
    return full_lattice_trajectory(theta0, vf, box, t0, t1, dt, config).final


@dataclass
class OracleComparison:
    """Agreement between the lifted reduced run and the full-lattice run of one step."""

    box: int
    window: tuple[int, int]
    errors: list[tuple[float, float]]
    off_line_fraction: float
    support_min_norm2: int
    support_radius2: int
    energy_residual: float
    shell_fraction: float

    @property
    def max_error(self) -> float:
        """Largest checkpoint error."""
        return max((e for _, e in self.errors), default=0.0)

    @property
    def support_ok(self) -> bool:
        """True when the support stayed outside the step's ball."""
        return self.support_min_norm2 >= self.support_radius2

    def to_dict(self) -> dict[str, Any]:
        """JSON friendly view."""
        return {
            "box": self.box,
            "window": list(self.window),
            "errors": [list(e) for e in self.errors],
            "max_error": self.max_error,
            "off_line_fraction": self.off_line_fraction,
            "support_min_norm2": self.support_min_norm2,
            "support_radius2": self.support_radius2,
            "energy_residual": self.energy_residual,
            "shell_fraction": self.shell_fraction,
        }


def _window_in_box(step: TransferStep, box: int) -> tuple[int, int]:
    def fits(k: int) -> bool:
        """True when site k lies in the box."""
        return max(abs(x) for x in step.spectrum.site(k)) <= box

    low, high = 0, 1
    if not (fits(-2) and fits(2)):
        raise ValueError(f"Box {box} does not hold the sites k in [-2, 2] of the line through {step.a}.")
    while low - 1 >= step.spectrum.k_min and fits(low - 1):
        low -= 1
    while high + 1 <= step.spectrum.k_max and fits(high + 1):
        high += 1
    return low, high


def oracle_compare(step: TransferStep, run: ProtocolRun, config: Config | None = None) -> OracleComparison:
    """Replay a step on the full lattice and compare against the lifted reduced run.

    The reduced side is rerun on the window of line indices whose sites lie in the box,
    so both sides truncate the line identically.

    Parameters
    ----------
    step : TransferStep
        The step.
    run : ProtocolRun
        Its synthesized protocol.
    config : Config, optional
        Box size, checkpoint count and integrator settings.

    Returns
    -------
    OracleComparison
        Relative ℓ² errors at the checkpoints and the oracle's diagnostics.
    """
    config = config or Config()
    box = config.oracle_box
    window = _window_in_box(step, box)
    spectrum = step.spectrum.with_window(window)
    replay_config = config.replace(leak_tolerance=1.0)
    vf = VelocityField.from_run(step, run)
    scale = float(step.spectrum.L)
    duration = run.field.duration
    rescaled = [duration * (i + 1) / config.oracle_checkpoints for i in range(config.oracle_checkpoints)]
    physical = tuple(s / scale for s in rescaled)

    z0 = StateVector.delta(window, 0)
    reduced = integrate(z0, run.field, spectrum, config=replay_config, checkpoints=rescaled[:-1])
    lifted = {}
    for sample in reduced.samples:
        if sample.snapshot is not None:
            lifted[sample.t] = lift_state(sample.snapshot, sample.t, step)

    theta0 = lift_state(z0, 0.0, step)
    trajectory = full_lattice_trajectory(theta0, vf, box, 0.0, physical[-1], config=config, checkpoints=physical)

    errors = []
    off_line = 0.0
    support = math.inf
    line = {step.frame.to_lab(spectrum.site(k)) for k in range(window[0], window[1] + 1)}
    for (t, oracle_field), s in track(
        list(zip(trajectory.snapshots, rescaled)), description="Comparing checkpoints...", transient=True
    ):
        reference = lifted[s]
        difference = 0.0
        for m in set(oracle_field.coeffs) | set(reference.coeffs):
            difference += abs(oracle_field.value(m) - reference.value(m)) ** 2
        errors.append((t, math.sqrt(difference / reference.mass())))
        total = sum(abs(c) ** 2 for c in oracle_field.coeffs.values())
        outside = sum(abs(c) ** 2 for m, c in oracle_field.coeffs.items() if m not in line)
        off_line = max(off_line, outside / total)
        support = min(support, oracle_field.support_min_norm2())
    comparison = OracleComparison(
        box=box,
        window=window,
        errors=errors,
        off_line_fraction=off_line,
        support_min_norm2=int(support),
        support_radius2=step.support_radius2,
        energy_residual=trajectory.energy_residual(),
        shell_fraction=trajectory.shell_fraction,
    )
    logger.info(
        f"Oracle {step.label or step.a}: max error {comparison.max_error:.3e}, off-line {off_line:.1e}, "
        f"energy residual {comparison.energy_residual:.1e}"
    )
    return comparison
