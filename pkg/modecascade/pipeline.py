"""Run cascades of transfer steps, stitch them in physical time and measure the decay."""

import json
import logging
import math
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np
from rich.progress import track

from .config import Config
from .controller import ProtocolRun, downhill_protocol, uphill_protocol
from .errors import CascadeError, InsufficientData, ResidualTooLarge
from .pde_bridge import VelocityField, oracle_compare, sobolev_norm_bound
from .planner import CascadePlan, TransferStep
from .spectrum import Direction

logger = logging.getLogger(__name__)

SOBOLEV_ORDERS = (0, 1, 2, 3)


class DecayModel(str, Enum):
    """Models for log(−log ‖θ_t‖²) against t."""

    DOUBLE_EXP = "double-exp"
    T_SQUARED = "t2"
    EXP = "exp"


@dataclass
class StepLog:
    """Bookkeeping of one cascade step."""

    index: int
    label: str
    direction: str
    block: int
    t_start: float
    duration: float
    physical_duration: float
    beta: complex
    residual: float
    log_mass_start: float
    A: float
    support_radius2: int
    margins: dict[str, Any]
    sobolev_bounds: dict[int, float]
    waits: dict[str, float]
    contraction: list[float]
    D_fit: float
    oracle: dict[str, Any] | None = None

    def to_dict(self) -> dict[str, Any]:
        """JSON friendly view."""
        data = asdict(self)
        data["beta"] = [self.beta.real, self.beta.imag]
        data["sobolev_bounds"] = {str(n): value for n, value in self.sobolev_bounds.items()}
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "StepLog":
        """Inverse of :meth:`to_dict`."""
        data = dict(data)
        data["beta"] = complex(*data["beta"])
        data["sobolev_bounds"] = {int(n): float(v) for n, v in data["sobolev_bounds"].items()}
        return cls(**data)


@dataclass
class DecaySample:
    """One stitched sample of the lifted scalar, in physical time."""

    t: float
    log_mass: float
    dirichlet_ratio: float
    dirichlet_integral: float
    step_index: int
    phase_label: str

    @property
    def mass(self) -> float:
        """‖θ_t‖²."""
        return math.exp(self.log_mass)


@dataclass
class FitResult:
    """A fitted decay model."""

    model: DecayModel
    params: dict[str, float]
    residual: float
    n_samples: int

    def to_dict(self) -> dict[str, Any]:
        """JSON friendly view."""
        return {
            "model": self.model.value,
            "params": self.params,
            "residual": self.residual,
            "n_samples": self.n_samples,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "FitResult":
        """Inverse of :meth:`to_dict`."""
        return cls(DecayModel(data["model"]), dict(data["params"]), float(data["residual"]), int(data["n_samples"]))


@dataclass
class DecayReport:
    """Everything a cascade run produced.

    Parameters
    ----------
    plan : CascadePlan
        The plan that was run.
    config : Config
        Resolved configuration of the run.
    phase_log : list[StepLog]
        Per-step bookkeeping.
    decay_samples : list[DecaySample]
        Stitched samples of the lifted scalar.
    fits : dict[str, FitResult]
        Decay fits by model name.
    """

    plan: CascadePlan
    config: Config
    phase_log: list[StepLog] = field(default_factory=list)
    decay_samples: list[DecaySample] = field(default_factory=list)
    fits: dict[str, FitResult] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        """JSON friendly view."""
        return {
            "config": self.config.to_dict(),
            "plan": self.plan.to_dict(),
            "phase_log": [entry.to_dict() for entry in self.phase_log],
            "decay_samples": [asdict(sample) for sample in self.decay_samples],
            "fits": {name: fit.to_dict() for name, fit in self.fits.items()},
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "DecayReport":
        """Inverse of :meth:`to_dict`."""
        config = Config.from_dict(data["config"])
        return cls(
            plan=CascadePlan.from_dict(data["plan"], config),
            config=config,
            phase_log=[StepLog.from_dict(entry) for entry in data["phase_log"]],
            decay_samples=[DecaySample(**sample) for sample in data["decay_samples"]],
            fits={name: FitResult.from_dict(fit) for name, fit in data.get("fits", {}).items()},
        )


def report_to_json(report: DecayReport, path: Path | str) -> None:
    """Write a report as indented JSON."""
    Path(path).write_text(json.dumps(report.to_dict(), indent=2))


def report_from_json(path: Path | str) -> DecayReport:
    """Read a report written by :func:`report_to_json`."""
    return DecayReport.from_dict(json.loads(Path(path).read_text()))


def synthesize_step(args: tuple[TransferStep, Config]) -> ProtocolRun:
    """Protocol of one step starting from δ_{k,0}."""
    step, config = args
    if step.direction is Direction.UPHILL:
        return uphill_protocol(step.spectrum, config)
    return downhill_protocol(step.spectrum, config.eta, config)


def synthesize_plan(plan: CascadePlan, config: Config | None = None) -> list[ProtocolRun]:
    """Synthesize every step of a plan, in parallel when ``num_cpus`` > 1.

    Steps start from pure modes, so they do not depend on each other.
    """
    config = config or Config()
    jobs = [(step, config) for step in plan.steps]
    runs: list[ProtocolRun] = []
    with ProcessPoolExecutor(max_workers=config.num_cpus) as executor:
        if config.num_cpus == 1:
            map_func = map
        else:
            map_func = executor.map
        try:
            for run in track(map_func(synthesize_step, jobs), description="Synthesizing steps...", total=len(jobs)):
                label = plan.steps[len(runs)].label
                logger.info(f"Step {len(runs)} ({label}): |β| = {abs(run.beta):.6e}, residual {run.residual:.2e}")
                runs.append(run)
        except CascadeError as error:
            raise error.at_step(len(runs))
    return runs


def _phase_at(marks: Sequence[tuple[float, str]], s: float) -> str:
    label = marks[0][1] if marks else ""
    for t, name in marks:
        if t <= s:
            label = name
    return label


def run_cascade(
    plan: CascadePlan,
    config: Config | None = None,
    runs: Sequence[ProtocolRun] | None = None,
    oracle: bool = False,
) -> DecayReport:
    """Run every step of a plan and stitch the lifted decay in physical time.

    Each step starts from an exact pure mode carrying the log-mass accumulated so
    far; its off-mode residual goes to the step log rather than into the next step.

    Parameters
    ----------
    plan : CascadePlan
        Plan to run.
    config : Config, optional
        Resolved configuration.
    runs : Sequence[ProtocolRun], optional
        Previously synthesized protocols, one per step.
    oracle : bool, optional
        Also compare each step against the full-lattice oracle.

    Returns
    -------
    DecayReport
        Step logs and stitched decay samples.
    """
    config = config or Config()
    report = DecayReport(plan=plan, config=config)
    if not plan.steps:
        ratio = float(sum(x * x for x in plan.mode_trace[0])) if plan.mode_trace else 0.0
        report.decay_samples.append(DecaySample(0.0, 0.0, ratio, 0.0, 0, "start"))
        return report
    runs = list(runs) if runs is not None else synthesize_plan(plan, config)
    if len(runs) != len(plan.steps):
        raise ValueError(f"Got {len(runs)} protocol runs for {len(plan.steps)} steps.")

    log_offset = 0.0
    t_global = 0.0
    integral = 0.0
    for index, (step, run) in enumerate(zip(plan.steps, runs)):
        if run.residual > config.residual_max:
            raise ResidualTooLarge(
                f"Off-mode residual {run.residual:.3e} exceeds {config.residual_max:.1e}.", step_index=index
            )
        scale = float(step.spectrum.L)
        shift = float(step.spectrum.A)
        for sample in run.record.samples:
            report.decay_samples.append(
                DecaySample(
                    t=t_global + sample.t / scale,
                    log_mass=log_offset + math.log(sample.mass) - 2 * shift * sample.t,
                    dirichlet_ratio=sample.dirichlet_ratio,
                    dirichlet_integral=integral + sample.dirichlet_integral / scale,
                    step_index=index,
                    phase_label=_phase_at(run.record.phase_marks, sample.t),
                )
            )
        vf = VelocityField.from_run(step, run)
        comparison = oracle_compare(step, run, config).to_dict() if oracle else None
        report.phase_log.append(
            StepLog(
                index=index,
                label=step.label,
                direction=step.direction.value,
                block=plan.blocks[index],
                t_start=t_global,
                duration=run.duration,
                physical_duration=run.duration / scale,
                beta=run.beta,
                residual=run.residual,
                log_mass_start=log_offset,
                A=shift,
                support_radius2=step.support_radius2,
                margins=step.assumptions.to_dict(),
                sobolev_bounds={n: sobolev_norm_bound(vf, n) for n in SOBOLEV_ORDERS},
                waits=dict(run.waits),
                contraction=run.contraction.eps,
                D_fit=run.contraction.D_fit,
                oracle=comparison,
            )
        )
        integral = report.decay_samples[-1].dirichlet_integral
        log_offset += math.log(abs(run.beta) ** 2) - 2 * shift * run.duration
        t_global += run.duration / scale
    logger.info(
        f"Cascade of {len(plan.steps)} steps: physical time {t_global:.6g}, final log-mass {log_offset:.6g}"
    )
    return report


def fit_decay(report: DecayReport, model: DecayModel | str) -> FitResult:
    """Least-squares fit of y = log(−log‖θ_t‖²) past the first step.

    DoubleExp fits y = c + r t, TSquared fits y = c + 2 log t and Exp fits
    y = c + log t. The residual is the root mean square of the fit error in y.

    Parameters
    ----------
    report : DecayReport
        Report with stitched samples.
    model : DecayModel | str
        Model to fit.

    Returns
    -------
    FitResult
        Parameters (c and, for DoubleExp, r) and the residual.
    """
    model = DecayModel(model)
    samples = [s for s in report.decay_samples if s.step_index >= 1 and s.log_mass < 0 and s.t > 0]
    if len(samples) < 10:
        raise InsufficientData(f"Need at least 10 samples past the first step, got {len(samples)}.")
    t = np.array([s.t for s in samples])
    y = np.log(-np.array([s.log_mass for s in samples]))
    if model is DecayModel.DOUBLE_EXP:
        design = np.column_stack([np.ones_like(t), t])
        solution, *_ = np.linalg.lstsq(design, y, rcond=None)
        params = {"c": float(solution[0]), "rate": float(solution[1])}
        predicted = design @ solution
    else:
        power = 2.0 if model is DecayModel.T_SQUARED else 1.0
        c = float(np.mean(y - power * np.log(t)))
        params = {"c": c}
        predicted = c + power * np.log(t)
    residual = float(np.sqrt(np.mean((y - predicted) ** 2)))
    result = FitResult(model, params, residual, len(samples))
    report.fits[model.value] = result
    return result


def energy_identity_check(report: DecayReport) -> float:
    """Worst per-step relative mismatch of Δ log‖θ‖² and −2∫‖∇θ‖²/‖θ‖² dt."""
    worst = 0.0
    for index in range(len(report.phase_log)):
        samples = [s for s in report.decay_samples if s.step_index == index]
        if len(samples) < 2:
            continue
        drop = samples[-1].log_mass - samples[0].log_mass
        integral = samples[-1].dirichlet_integral - samples[0].dirichlet_integral
        worst = max(worst, abs(drop + 2 * integral) / max(abs(drop), 1e-300))
    return worst


def time_ledger(report: DecayReport) -> list[float]:
    """Cumulative physical time at the end of each block."""
    ends: dict[int, float] = {}
    for entry in report.phase_log:
        ends[entry.block] = entry.t_start + entry.physical_duration
    return [ends[block] for block in sorted(ends)]


def block_rates(report: DecayReport) -> list[float]:
    """Mean exponential decay rate −Δ log‖θ‖² / (2Δt) of every block."""
    rates = []
    blocks = sorted({entry.block for entry in report.phase_log})
    for block in blocks:
        steps = {entry.index for entry in report.phase_log if entry.block == block}
        samples = [s for s in report.decay_samples if s.step_index in steps]
        span = samples[-1].t - samples[0].t
        rates.append(-(samples[-1].log_mass - samples[0].log_mass) / (2 * span) if span > 0 else 0.0)
    return rates


def mass_ledger_error(report: DecayReport) -> float:
    """Relative gap between Π|β|²e^{−2A T} and the last stitched mass."""
    if not report.phase_log:
        return 0.0
    predicted = sum(math.log(abs(e.beta) ** 2) - 2 * e.A * e.duration for e in report.phase_log)
    return abs(math.expm1(report.decay_samples[-1].log_mass - predicted))


def verify_report(report: DecayReport, energy_tolerance: float = 1e-6, ledger_tolerance: float = 1e-8) -> list[str]:
    """Run the invariant suite; returns one message per failure."""
    failures = []
    samples = report.decay_samples
    for left, right in zip(samples, samples[1:]):
        if right.t < left.t:
            failures.append(f"samples out of order at t = {right.t:.6g}")
            break
    for left, right in zip(samples, samples[1:]):
        if right.log_mass > left.log_mass + 1e-9:
            failures.append(f"log-mass increases at t = {right.t:.6g} by {right.log_mass - left.log_mass:.3e}")
            break
    floors = {entry.index: entry.support_radius2 for entry in report.phase_log}
    for sample in samples:
        floor = floors.get(sample.step_index)
        if floor is not None and sample.dirichlet_ratio < floor * (1 - 1e-9):
            failures.append(
                f"Dirichlet ratio {sample.dirichlet_ratio:.6g} below the support floor {floor} "
                f"in step {sample.step_index} at t = {sample.t:.6g}"
            )
            break
    for entry in report.phase_log:
        if entry.residual > report.config.residual_max:
            failures.append(f"step {entry.index}: residual {entry.residual:.3e} > {report.config.residual_max:.1e}")
        if entry.oracle is not None and entry.oracle["max_error"] > 1e-6:
            failures.append(f"step {entry.index}: oracle mismatch {entry.oracle['max_error']:.3e}")
        if entry.oracle is not None and entry.oracle["off_line_fraction"] > 1e-10:
            failures.append(f"step {entry.index}: off-line mass {entry.oracle['off_line_fraction']:.3e}")
    ledger = mass_ledger_error(report)
    if ledger > ledger_tolerance:
        failures.append(f"mass ledger off by {ledger:.3e}")
    energy = energy_identity_check(report)
    if energy > energy_tolerance:
        failures.append(f"energy identity residual {energy:.3e} > {energy_tolerance:.1e}")
    for failure in failures:
        logger.warning(failure)
    return failures
