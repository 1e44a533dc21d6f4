import json
import logging
from argparse import ArgumentParser, Namespace
from fractions import Fraction
from multiprocessing import freeze_support
from pathlib import Path

from ._version import __version__
from .config import Config
from .errors import CascadeError
from .logging import log_phase, setup_logging
from .pipeline import (
    DecayModel,
    fit_decay,
    report_from_json,
    report_to_json,
    run_cascade,
    synthesize_plan,
    verify_report,
)
from .planner import CascadePlan, build_cascade
from .report import assumption_table, plan_table, print_table, write_decay_csv, write_decay_svg
from .spectrum import check_assumptions

# needed for pyinstaller
freeze_support()

logger = logging.getLogger(__name__)


def _int_list(raw: str) -> tuple[int, ...]:
    return tuple(int(x) for x in raw.split(",") if x.strip())


def _load_plan(path: str, config: Config) -> CascadePlan:
    return CascadePlan.from_dict(json.loads(Path(path).read_text()), config)


def _resolve_config(args: Namespace) -> Config:
    config = Config.from_file(args.config) if args.config else Config()
    return config.replace(
        num_cpus=args.num_cpus,
        p=getattr(args, "p", None),
        dt_safety=getattr(args, "dt_safety", None),
        m_min=getattr(args, "m_min", None),
        s_max=getattr(args, "s_max", None),
    )


def plan_command(args: Namespace, config: Config) -> int:
    """Plan a cascade, print its table and write it as JSON to a file or stdout."""
    plan = build_cascade(args.dim, args.start, args.steps, config)
    print_table(plan_table(plan))
    text = json.dumps(plan.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(text)
        logger.info(f"Wrote plan to {args.out}")
    else:
        print(text)
    return 0


def check_command(args: Namespace, config: Config) -> int:
    """Check every step of a plan; 1 if any step fails."""
    plan = _load_plan(args.plan, config)
    reports = [
        check_assumptions(step.spectrum, config.m_min, config.s_max, config.spacing_min) for step in plan.steps
    ]
    print_table(assumption_table(reports))
    return 0 if all(report.passed for report in reports) else 1


def synth_command(args: Namespace, config: Config) -> int:
    """Synthesize the coefficient fields of a plan and write them as JSON."""
    plan = _load_plan(args.plan, config)
    with log_phase("Synthesis"):
        runs = synthesize_plan(plan, config)
    data = {
        "config": config.to_dict(),
        "steps": [
            {
                "label": step.label,
                "field": run.field.to_dict(),
                "beta": [run.beta.real, run.beta.imag],
                "residual": run.residual,
                "waits": run.waits,
                "contraction": run.contraction.to_dict(),
            }
            for step, run in zip(plan.steps, runs)
        ],
    }
    Path(args.out).write_text(json.dumps(data, indent=2))
    logger.info(f"Wrote {len(runs)} coefficient fields to {args.out}")
    return 0


def run_command(args: Namespace, config: Config) -> int:
    """Run a plan, fit the decay models that have enough data and write the report."""
    plan = _load_plan(args.plan, config)
    with log_phase("Cascade run"):
        report = run_cascade(plan, config, oracle=args.oracle)
    for model in DecayModel:
        try:
            fit_decay(report, model)
        except CascadeError as error:
            logger.warning(f"No {model.value} fit: {error}")
            break
    report_to_json(report, args.out)
    if args.csv:
        write_decay_csv(report, args.csv)
    return 0


def verify_command(args: Namespace, config: Config) -> int:
    """Check the invariants of a report; the exit code counts failures."""
    report = report_from_json(args.report)
    failures = verify_report(report)
    if not failures:
        logger.info("All invariants hold")
    return len(failures)


def report_command(args: Namespace, config: Config) -> int:
    """Fit and plot a stored report."""
    report = report_from_json(args.input)
    fit = None
    if args.fit:
        fit = fit_decay(report, args.fit).model.value
        logger.info(f"{fit} fit: {report.fits[fit].params}, residual {report.fits[fit].residual:.3e}")
    if args.svg:
        write_decay_svg(report, args.svg, fit)
    if args.csv:
        write_decay_csv(report, args.csv)
    return 0


def main():
    """Main function for the mode_cascade CLI."""

    # create the argument parser
    parser = ArgumentParser(description="Plan, synthesize and verify mode cascades of advection-diffusion on a torus.")
    parser.add_argument("-v", "--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", type=str, help="Flat key = value configuration file.")
    parser.add_argument("--log-file", type=str, help="Also write the log to this file.")
    parser.add_argument("--num-cpus", type=int, help="The number of CPUs to use for processing.")
    subparsers = parser.add_subparsers(dest="command", required=True)

    plan = subparsers.add_parser("plan", help="Plan a cascade and print its steps.")
    plan.add_argument("--dim", type=int, choices=(2, 3, 4), required=True, help="Torus dimension.")
    plan.add_argument("--start", type=_int_list, required=True, help="Starting mode, e.g. 8,0.")
    plan.add_argument("--steps", type=int, required=True, help="Number of blocks.")
    plan.add_argument("--p", type=int, help="Fourth coordinate of 4D cascades. By default, 10.")
    plan.add_argument("--out", type=str, help="Write the plan as JSON. By default, print it.")
    plan.set_defaults(func=plan_command)

    check = subparsers.add_parser("check", help="Check the spectral assumptions of every step.")
    check.add_argument("--plan", type=str, required=True, help="Plan JSON file.")
    check.add_argument("--m-min", type=Fraction, help="Lower threshold for M. By default, 8.")
    check.add_argument("--s-max", type=Fraction, help="Upper threshold for S. By default, 6.")
    check.set_defaults(func=check_command)

    synth = subparsers.add_parser("synth", help="Synthesize the coefficient field of every step.")
    synth.add_argument("--plan", type=str, required=True, help="Plan JSON file.")
    synth.add_argument("--out", type=str, required=True, help="Output JSON file for the fields.")
    synth.set_defaults(func=synth_command)

    run = subparsers.add_parser("run", help="Run a cascade and write its decay report.")
    run.add_argument("--plan", type=str, required=True, help="Plan JSON file.")
    run.add_argument("--oracle", action="store_true", help="Compare every step with the full-lattice oracle.")
    run.add_argument("--dt-safety", type=float, help="Step size safety factor. By default, 1/64.")
    run.add_argument("--out", type=str, required=True, help="Output JSON report.")
    run.add_argument("--csv", type=str, help="Output CSV of the decay samples.")
    run.set_defaults(func=run_command)

    verify = subparsers.add_parser("verify", help="Check the invariants of a report; exit code counts failures.")
    verify.add_argument("--report", type=str, required=True, help="Report JSON file.")
    verify.set_defaults(func=verify_command)

    report = subparsers.add_parser("report", help="Fit and plot a decay report.")
    report.add_argument("--in", dest="input", type=str, required=True, help="Report JSON file.")
    report.add_argument("--svg", type=str, help="Output SVG plot.")
    report.add_argument("--csv", type=str, help="Output CSV of the decay samples.")
    report.add_argument("--fit", choices=[m.value for m in DecayModel], help="Decay model to fit.")
    report.set_defaults(func=report_command)

    args = parser.parse_args()

    # setup logging
    setup_logging(args.log_file)

    try:
        config = _resolve_config(args)
        status = args.func(args, config)
    except (CascadeError, ValueError) as error:
        parser.exit(1, f"{parser.prog}: error: {error}\n")
    parser.exit(min(status, 255))


if __name__ == "__main__":
    main()
