"""Tables, CSV files and SVG plots of plans and decay reports."""

import csv
import logging
from pathlib import Path

import numpy as np
from matplotlib.figure import Figure
from rich.console import Console
from rich.table import Table

from .pde_bridge import LatticeField
from .pipeline import DecayReport
from .planner import CascadePlan
from .spectrum import AssumptionReport

logger = logging.getLogger(__name__)


def plan_table(plan: CascadePlan) -> Table:
    """Steps of a plan with their margins."""
    table = Table(title=f"{plan.dimension}D cascade, {plan.n_blocks} blocks")
    for column in ("step", "block", "direction", "a (lab)", "c (lab)", "|c|²", "M", "S", "spacing", "passed"):
        table.add_column(column, justify="right" if column not in ("direction", "a (lab)", "c (lab)") else "left")
    for index, step in enumerate(plan.steps):
        report = step.assumptions
        table.add_row(
            str(index),
            str(plan.blocks[index]),
            step.direction.value,
            str(step.lab_a),
            str(step.lab_c),
            str(sum(x * x for x in step.c)),
            f"{float(report.M):.4g}",
            f"{float(report.S):.4g}",
            f"{float(report.spacing_margin):.4g}",
            "yes" if report.passed else "[red]no[/red]",
        )
    return table


def assumption_table(reports: list[AssumptionReport]) -> Table:
    """Margins of assumption reports, one row per step."""
    table = Table(title="Assumption checks")
    for column in ("step", "M", "M_min", "S", "S_max", "spacing margin", "growth c", "result"):
        table.add_column(column, justify="right")
    for index, report in enumerate(reports):
        table.add_row(
            str(index),
            f"{float(report.M):.6g}",
            str(report.m_min),
            f"{float(report.S):.6g}",
            str(report.s_max),
            f"{float(report.spacing_margin):.6g}",
            f"{float(report.growth_constant):.4g}",
            "pass" if report.passed else "[red]" + "; ".join(report.failures()) + "[/red]",
        )
    return table


def print_table(table: Table) -> None:
    """Print a table to the console."""
    Console().print(table)


def write_decay_csv(report: DecayReport, path: Path | str) -> None:
    """Columns t, mass, log_mass, dirichlet_ratio, step_index, phase_label."""
    with Path(path).open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["t", "mass", "log_mass", "dirichlet_ratio", "step_index", "phase_label"])
        for sample in report.decay_samples:
            writer.writerow(
                [sample.t, sample.mass, sample.log_mass, sample.dirichlet_ratio, sample.step_index, sample.phase_label]
            )
    logger.info(f"Wrote {len(report.decay_samples)} samples to {path}")


def write_decay_svg(report: DecayReport, path: Path | str, fit: str | None = None) -> None:
    """Plot log‖θ_t‖² and the Dirichlet ratio against physical time."""
    t = np.array([s.t for s in report.decay_samples])
    log_mass = np.array([s.log_mass for s in report.decay_samples])
    ratio = np.array([s.dirichlet_ratio for s in report.decay_samples])

    figure = Figure(figsize=(7, 6))
    top, bottom = figure.subplots(2, 1, sharex=True)
    top.plot(t, log_mass, lw=1.2, label="log ‖θ‖²")
    if fit is not None and fit in report.fits:
        result = report.fits[fit]
        positive = t[t > 0]
        c = result.params["c"]
        if fit == "double-exp":
            model = -np.exp(c + result.params["rate"] * positive)
        else:
            model = -np.exp(c) * positive ** (2.0 if fit == "t2" else 1.0)
        top.plot(positive, model, "--", lw=1.0, label=f"{fit} fit (residual {result.residual:.2g})")
    top.set_ylabel("log mass")
    top.legend(loc="lower left")
    bottom.semilogy(t, ratio, lw=1.2)
    bottom.set_ylabel("‖∇θ‖² / ‖θ‖²")
    bottom.set_xlabel("t")
    for entry in report.phase_log:
        for axis in (top, bottom):
            axis.axvline(entry.t_start, color="0.85", lw=0.6, zorder=0)
    figure.tight_layout()
    figure.savefig(path, format="svg")
    logger.info(f"Wrote decay plot to {path}")


def lattice_heatmap_svg(field: LatticeField, path: Path | str, axes: tuple[int, int] = (0, 1)) -> None:
    """log10 |θ̂| on a 2D slice through the origin of the remaining axes."""
    box = field.box
    image = np.full((2 * box + 1, 2 * box + 1), np.nan)
    for m in field.coeffs:
        if all(x == 0 for i, x in enumerate(m) if i not in axes):
            magnitude = abs(field.value(m))
            if magnitude > 0:
                image[m[axes[1]] + box, m[axes[0]] + box] = np.log10(magnitude)
    figure = Figure(figsize=(5, 5))
    axis = figure.subplots()
    shown = axis.imshow(image, origin="lower", extent=(-box - 0.5, box + 0.5, -box - 0.5, box + 0.5), cmap="magma")
    figure.colorbar(shown, ax=axis, label="log10 |θ̂|")
    axis.set_xlabel(f"m{axes[0]}")
    axis.set_ylabel(f"m{axes[1]}")
    figure.tight_layout()
    figure.savefig(path, format="svg")
