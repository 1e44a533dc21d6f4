"""Transfer steps a → a + b and their chaining into 2D, 3D and 4D cascades."""

import logging
import math
from collections.abc import Iterable
from dataclasses import dataclass, field
from typing import Any

from .config import Config
from .errors import AssumptionFail, CascadeError, DownhillNotDown, LiftNotFound
from .geometry import SignedPermutation, shear_geometry, shear_normal, sorted_frame
from .spectrum import (
    AssumptionReport,
    DiffusionSpectrum,
    Direction,
    LatticeVector,
    as_lattice_vector,
    build_line_spectrum,
    check_assumptions,
    dot,
    norm2,
    sub,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TransferStep:
    """One mode-to-mode move, stored in its working frame.

    Parameters
    ----------
    a : LatticeVector
        Source mode.
    b : LatticeVector
        Line step.
    c : LatticeVector
        Target mode a + b.
    direction : Direction
        Uphill or downhill.
    ell : tuple[float, ...]
        Unit shear direction, orthogonal to b.
    alpha : float
        Angle factor of a and b.
    spectrum : DiffusionSpectrum
        Line spectrum of the step.
    assumptions : AssumptionReport
        Margins at the thresholds the step was planned with.
    frame : SignedPermutation
        Map from the working frame to the lab frame.
    label : str
        Short description used in logs and tables.
    """

    a: LatticeVector
    b: LatticeVector
    c: LatticeVector
    direction: Direction
    ell: tuple[float, ...]
    alpha: float
    spectrum: DiffusionSpectrum
    assumptions: AssumptionReport
    frame: SignedPermutation
    label: str = ""

    @property
    def lab_a(self) -> LatticeVector:
        """Source mode in the lab frame."""
        return self.frame.to_lab(self.a)

    @property
    def lab_b(self) -> LatticeVector:
        """Line step in the lab frame."""
        return self.frame.to_lab(self.b)

    @property
    def lab_c(self) -> LatticeVector:
        """Target mode in the lab frame."""
        return self.frame.to_lab(self.c)

    @property
    def lab_ell(self) -> tuple[float, ...]:
        """Shear direction in the lab frame."""
        return self.frame.to_lab(self.ell)

    @property
    def support_radius2(self) -> int:
        """Squared radius of the ball the step's support stays outside of."""
        return norm2(self.a) if self.direction is Direction.UPHILL else norm2(self.c)

    def to_dict(self) -> dict[str, Any]:
        """JSON friendly view."""
        return {
            "label": self.label,
            "a": list(self.a),
            "b": list(self.b),
            "c": list(self.c),
            "direction": self.direction.value,
            "frame": self.frame.to_dict(),
            "lab_a": list(self.lab_a),
            "lab_c": list(self.lab_c),
            "ell": list(self.ell),
            "alpha": self.alpha,
            "L": str(self.spectrum.L),
            "A": str(self.spectrum.A),
            "window": list(self.spectrum.window),
            "assumptions": self.assumptions.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any], config: Config | None = None) -> "TransferStep":
        """Rebuild a step, recomputing spectrum and margins without enforcing thresholds."""
        config = config or Config()
        window = tuple(data["window"]) if "window" in data else config.window
        return make_step(
            as_lattice_vector(data["a"]),
            as_lattice_vector(data["c"]),
            Direction(data["direction"]),
            frame=SignedPermutation.from_dict(data["frame"]),
            config=config.replace(window_k=-int(window[0])),
            label=data.get("label", ""),
            enforce=False,
        )


def make_step(
    a: LatticeVector,
    c: LatticeVector,
    direction: Direction,
    frame: SignedPermutation | None = None,
    config: Config | None = None,
    label: str = "",
    enforce: bool = True,
) -> TransferStep:
    """Build and check the step a → c.

    Parameters
    ----------
    a : LatticeVector
        Source mode in the working frame.
    c : LatticeVector
        Target mode in the working frame.
    direction : Direction
        Uphill or downhill.
    frame : SignedPermutation, optional
        Working-to-lab map, by default the identity.
    config : Config, optional
        Thresholds and window, by default the defaults.
    label : str, optional
        Description for logs.
    enforce : bool, optional
        Raise AssumptionFail when the margins fail, by default True.

    Returns
    -------
    TransferStep
        The checked step.
    """
    config = config or Config()
    frame = frame or SignedPermutation.identity(len(a))
    b = sub(c, a)
    spectrum = build_line_spectrum(a, b, direction, config.window)
    ell, alpha = shear_geometry(a, b)
    report = check_assumptions(spectrum, config.m_min, config.s_max, config.spacing_min)
    if enforce and not report.passed:
        hint = "raise p" if len(a) == 4 else "start from a larger mode or lower m_min"
        raise AssumptionFail(f"step {label or (a, c)} fails: {'; '.join(report.failures())}; {hint}.")
    return TransferStep(
        a=a,
        b=b,
        c=c,
        direction=direction,
        ell=ell,
        alpha=alpha,
        spectrum=spectrum,
        assumptions=report,
        frame=frame,
        label=label,
    )


def plan_2d(r: int, config: Config | None = None, frame: SignedPermutation | None = None) -> TransferStep:
    """Uphill step (r, 0) → (0, r+1).

    Parameters
    ----------
    r : int
        Source wavenumber, at least 2.
    config : Config, optional
        Thresholds and window.
    frame : SignedPermutation, optional
        Lab frame of the step, the swap frame for the second step of a block.

    Returns
    -------
    TransferStep
        The checked step with a = (r, 0), b = (-r, r+1).
    """
    if r < 2:
        raise ValueError(f"2D steps need r >= 2, got {r}.")
    return make_step((r, 0), (0, r + 1), Direction.UPHILL, frame, config, label=f"2d r={r}")


def is_sum_of_three_squares(n: int) -> bool:
    """Legendre: n ≥ 0 is a sum of three squares unless n = 4^a(8b+7)."""
    if n < 0:
        return False
    while n and n % 4 == 0:
        n //= 4
    return n % 8 != 7


def three_square_lift(n: int) -> tuple[tuple[int, int, int], int]:
    """Smallest m in (n, n+8] that is a sum of three squares.

    Parameters
    ----------
    n : int
        Current squared norm, at least 1.

    Returns
    -------
    tuple[tuple[int, int, int], int]
        The lexicographically smallest sorted triple 0 ≤ x ≤ y ≤ z with x²+y²+z² = m, and m.
    """
    if n < 1:
        raise ValueError(f"three_square_lift needs n >= 1, got {n}.")
    for m in range(n + 1, n + 9):
        if not is_sum_of_three_squares(m):
            continue
        for x in range(math.isqrt(m // 3) + 1):
            rest = m - x * x
            for y in range(x, math.isqrt(rest // 2) + 1):
                z2 = rest - y * y
                z = math.isqrt(z2)
                if z * z == z2:
                    return (x, y, z), m
    raise LiftNotFound(f"No sum of three squares in ({n}, {n + 8}].")


def plan_3d(source: Iterable[int], config: Config | None = None) -> TransferStep:
    """Uphill step from a 3D mode to the three-square lift of its squared norm.

    Parameters
    ----------
    source : Iterable[int]
        Lab-frame source (m, n, l), nonzero.
    config : Config, optional
        Thresholds and window.

    Returns
    -------
    TransferStep
        Step from the sorted nonnegative source to c = (x, -z, y).
    """
    source = as_lattice_vector(source)
    if len(source) != 3 or not any(source):
        raise ValueError(f"3D steps need a nonzero 3-vector, got {source}.")
    a, frame = sorted_frame(source)
    (x, y, z), _ = three_square_lift(norm2(a))
    c = (x, -z, y)
    return make_step(a, c, Direction.UPHILL, frame, config, label=f"3d {source}")


def plan_4d(
    source: Iterable[int], p: int, config: Config | None = None
) -> tuple[TransferStep, TransferStep]:
    """Two-step 4D block: up along the fourth axis, then down onto the lifted 3D mode.

    Parameters
    ----------
    source : Iterable[int]
        Lab-frame (m, n, l), nonzero.
    p : int
        Fourth coordinate, at least 10.
    config : Config, optional
        Thresholds and window.

    Returns
    -------
    tuple[TransferStep, TransferStep]
        The uphill step (m,n,l,p) → (m,n,l,-p-1) and the downhill step
        (m,n,l,-p-1) → (x,-z,y,p).
    """
    source = as_lattice_vector(source)
    if len(source) != 3 or not any(source):
        raise ValueError(f"4D blocks need a nonzero 3-vector source, got {source}.")
    if p < 10:
        raise ValueError(f"4D blocks need p >= 10, got {p}.")
    head, frame3 = sorted_frame(source)
    frame = SignedPermutation(frame3.perm + (3,), frame3.signs + (1,))
    label = f"4d {source} p={p}"

    uphill = make_step((*head, p), (*head, -p - 1), Direction.UPHILL, frame, config, label=f"{label} up")

    (x, y, z), _ = three_square_lift(norm2(head))
    a = (*head, -p - 1)
    c = (x, -z, y, p)
    if norm2(c) >= norm2(a):
        raise DownhillNotDown(f"{label}: target {c} is not below source {a}.")
    downhill = make_step(a, c, Direction.DOWNHILL, frame, config, label=f"{label} down")
    return uphill, downhill


@dataclass(frozen=True)
class GeometryItem:
    """One named check of the sphere geometry."""

    ok: bool
    margin: float


@dataclass(frozen=True)
class GeometryCheck:
    """Per-instance verification of the uniform sphere geometry items.

    ``K`` is the smallest constant for which every item holds; ``delta`` is the
    relative distance of the target from the source sphere.
    """

    K: float
    delta: float
    k_range: tuple[int, int]
    items: dict[str, GeometryItem] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        """True when every item passed."""
        return all(item.ok for item in self.items.values())

    def to_dict(self) -> dict[str, Any]:
        """JSON friendly view."""
        return {
            "K": self.K,
            "delta": self.delta,
            "k_range": list(self.k_range),
            "items": {name: {"ok": item.ok, "margin": item.margin} for name, item in self.items.items()},
        }


def separation_gap(step: TransferStep, k: int) -> int:
    """Exact |a+(k+1)b|² − |a+(1−k)b|², equal to 4k(|c|² − c·a)."""
    return norm2(step.spectrum.site(k + 1)) - norm2(step.spectrum.site(1 - k))


def sphere_geometry_check(
    step: TransferStep, k_range: tuple[int, int] | None = None, config: Config | None = None
) -> GeometryCheck:
    """Measure the angle, growth and separation margins of a step.

    Parameters
    ----------
    step : TransferStep
        The step to check.
    k_range : tuple[int, int], optional
        Inclusive range of line indices, by default [-geometry_k, geometry_k + 1].
    config : Config, optional
        Supplies ``geometry_k``.

    Returns
    -------
    GeometryCheck
        Margins of each item and the constant K making all of them hold.
    """
    config = config or Config()
    k_min, k_max = k_range or (-config.geometry_k, config.geometry_k + 1)
    norm_a = math.sqrt(norm2(step.a))

    # item 1: target differs from source
    difference = math.sqrt(norm2(step.b)) / norm_a

    # item 2: angle factor bounded below
    angle = step.alpha

    # item 3: |a+kb| ≥ K⁻¹|a||k| + |a| away from k = 0, 1
    growth = min(
        (math.sqrt(norm2(step.spectrum.site(k))) - norm_a) / (norm_a * abs(k))
        for k in range(k_min, k_max + 1)
        if k not in (0, 1)
    )

    # item 4: |a+(k+1)b|² − |a+(1−k)b|² ≥ K⁻¹|a|k for k ≥ 1
    separation = min(
        separation_gap(step, k) / (norm_a * k) for k in range(1, min(k_max - 1, 1 - k_min) + 1)
    )

    items = {
        "difference_nonzero": GeometryItem(difference > 0, difference),
        "angle": GeometryItem(angle > 0, angle),
        "growth": GeometryItem(growth > 0, growth),
        "separation": GeometryItem(separation > 0, separation),
    }
    inverse = [angle, growth, separation]
    K = max(1.0 / value if value > 0 else math.inf for value in inverse)
    delta = abs(math.sqrt(norm2(step.c)) - norm_a) / norm_a
    return GeometryCheck(K=K, delta=delta, k_range=(k_min, k_max), items=items)


@dataclass(frozen=True)
class CascadePlan:
    """Chained transfer steps with the pure modes visited at block ends.

    Parameters
    ----------
    dimension : int
        2, 3 or 4.
    steps : tuple[TransferStep, ...]
        Steps in order.
    mode_trace : tuple[LatticeVector, ...]
        Lab-frame pure modes at the start and after each block.
    blocks : tuple[int, ...]
        Block index of every step.
    p : int | None
        Fourth coordinate for 4D plans.
    """

    dimension: int
    steps: tuple[TransferStep, ...]
    mode_trace: tuple[LatticeVector, ...]
    blocks: tuple[int, ...]
    p: int | None = None

    @property
    def n_blocks(self) -> int:
        """Number of blocks."""
        return len(self.mode_trace) - 1

    def to_dict(self) -> dict[str, Any]:
        """JSON friendly view."""
        return {
            "dimension": self.dimension,
            "p": self.p,
            "mode_trace": [list(m) for m in self.mode_trace],
            "blocks": list(self.blocks),
            "steps": [step.to_dict() for step in self.steps],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any], config: Config | None = None) -> "CascadePlan":
        """Inverse of :meth:`to_dict`."""
        steps = tuple(TransferStep.from_dict(s, config) for s in data["steps"])
        return cls(
            dimension=int(data["dimension"]),
            steps=steps,
            mode_trace=tuple(as_lattice_vector(m) for m in data["mode_trace"]),
            blocks=tuple(int(b) for b in data["blocks"]),
            p=data.get("p"),
        )


def build_cascade(
    dimension: int, start: Iterable[int], n_steps: int, config: Config | None = None
) -> CascadePlan:
    """Chain transfer steps from a starting mode.

    In 2D and 4D each block is two steps, in 3D a block is one step.

    Parameters
    ----------
    dimension : int
        2, 3 or 4.
    start : Iterable[int]
        2D: (r, 0). 3D: any nonzero vector. 4D: (m, n, l, p) or (m, n, l) with p from the config.
    n_steps : int
        Number of blocks.
    config : Config, optional
        Thresholds, window and default p.

    Returns
    -------
    CascadePlan
        The chained plan.
    """
    config = config or Config()
    start = as_lattice_vector(start)
    if n_steps < 0:
        raise ValueError(f"n_steps must be nonnegative, got {n_steps}.")
    steps: list[TransferStep] = []
    blocks: list[int] = []
    trace: list[LatticeVector] = []
    p = None

    def add(step: TransferStep, block: int) -> None:
        """Append a step that starts where the last one ended."""
        if steps and steps[-1].lab_c != step.lab_a:
            raise RuntimeError(f"Steps do not chain: {steps[-1].lab_c} then {step.lab_a}.")
        steps.append(step)
        blocks.append(block)

    try:
        if dimension == 2:
            if len(start) != 2 or start[1] != 0 or start[0] < 2:
                raise ValueError(f"2D cascades start at (r, 0) with r >= 2, got {start}.")
            r = start[0]
            trace.append(start)
            for block in range(n_steps):
                add(plan_2d(r, config), block)
                add(plan_2d(r + 1, config, frame=SignedPermutation.swap(2)), block)
                r += 2
                trace.append((r, 0))
        elif dimension == 3:
            if len(start) != 3 or not any(start):
                raise ValueError(f"3D cascades start at a nonzero 3-vector, got {start}.")
            mode = start
            trace.append(mode)
            for block in range(n_steps):
                step = plan_3d(mode, config)
                add(step, block)
                mode = step.lab_c
                trace.append(mode)
        elif dimension == 4:
            if len(start) == 3:
                start = (*start, config.p)
            if len(start) != 4:
                raise ValueError(f"4D cascades start at (m, n, l, p), got {start}.")
            p = start[3]
            mode = start
            trace.append(mode)
            for block in range(n_steps):
                uphill, downhill = plan_4d(mode[:3], p, config)
                add(uphill, block)
                add(downhill, block)
                mode = downhill.lab_c
                trace.append(mode)
        else:
            raise ValueError(f"Cascades exist in dimension 2, 3 or 4, got {dimension}.")
    except CascadeError as error:
        raise error.at_step(len(steps))

    plan = CascadePlan(dimension=dimension, steps=tuple(steps), mode_trace=tuple(trace), blocks=tuple(blocks), p=p)
    logger.info(f"Planned {dimension}D cascade from {trace[0]}: {len(steps)} steps, trace ends at {trace[-1]}")
    return plan


def trace_norms(plan: CascadePlan) -> list[int]:
    """Squared norms of the visited modes."""
    return [norm2(m) for m in plan.mode_trace]


def chain_ok(plan: CascadePlan) -> bool:
    """Every step ends where the next one starts, in the lab frame."""
    return all(s.lab_c == t.lab_a for s, t in zip(plan.steps, plan.steps[1:]))


def ell_orthogonal(step: TransferStep) -> bool:
    """ℓ·b = 0 exactly, checked on the integer vector ℓ is built from."""
    return dot(shear_normal(step.a, step.b), step.b) == 0
