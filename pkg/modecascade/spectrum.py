"""Diffusion coefficients d_k on a Fourier line {a + kb} and the checks they must pass."""

import logging
from collections.abc import Iterable
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from functools import cached_property
from typing import Any

import numpy as np
from numpy.typing import NDArray

from .errors import (
    NegativeCoefficient,
    ParallelVectors,
    WindowTooSmall,
    WrongDirection,
    ZeroNormalization,
)

logger = logging.getLogger(__name__)

LatticeVector = tuple[int, ...]


class Direction(str, Enum):
    """Which way mass moves along the line."""

    UPHILL = "uphill"
    DOWNHILL = "downhill"


def as_lattice_vector(coords: Iterable[Any]) -> LatticeVector:
    """Validate and convert coordinates to a lattice vector.

    Parameters
    ----------
    coords : Iterable
        Integer coordinates, 2 to 4 of them.

    Returns
    -------
    LatticeVector
        The coordinates as a tuple of python ints.
    """
    values = list(coords)
    if any(int(c) != c for c in values):
        raise ValueError(f"Lattice coordinates must be integers, got {values}.")
    vector = tuple(int(c) for c in values)
    if len(vector) not in (2, 3, 4):
        raise ValueError(f"Lattice vectors have 2, 3 or 4 coordinates, got {len(vector)}.")
    return vector


def dot(u: LatticeVector, v: LatticeVector) -> int:
    """Exact integer dot product."""
    return sum(x * y for x, y in zip(u, v, strict=True))


def norm2(v: LatticeVector) -> int:
    """Exact squared length."""
    return dot(v, v)


def add(u: LatticeVector, v: LatticeVector) -> LatticeVector:
    """u + v."""
    return tuple(x + y for x, y in zip(u, v, strict=True))


def sub(u: LatticeVector, v: LatticeVector) -> LatticeVector:
    """u − v."""
    return tuple(x - y for x, y in zip(u, v, strict=True))


def line_site(a: LatticeVector, b: LatticeVector, k: int) -> LatticeVector:
    """The lattice site a + kb."""
    return tuple(x + k * y for x, y in zip(a, b, strict=True))


def fraction_pair(value: Fraction) -> list[int]:
    """[numerator, denominator] of a fraction."""
    return [value.numerator, value.denominator]


@dataclass(frozen=True)
class DiffusionSpectrum:
    """Exact diffusion coefficients d_k = |a+kb|²/L − A on an integer window of k.

    Parameters
    ----------
    a : LatticeVector
        Source mode of the line.
    b : LatticeVector
        Step along the line.
    direction : Direction
        Normalization convention, uphill gives (d_0, d_1) = (0, 1), downhill (1, 0).
    L : Fraction
        Normalization, |a+b|² − |a|² uphill and |a|² − |a+b|² downhill.
    A : Fraction
        Spectral shift.
    window : tuple[int, int]
        Inclusive range [k_min, k_max] of line indices kept.
    d : dict[int, Fraction]
        The coefficients on the window.
    """

    a: LatticeVector
    b: LatticeVector
    direction: Direction
    L: Fraction
    A: Fraction
    window: tuple[int, int]
    d: dict[int, Fraction]

    @property
    def k_min(self) -> int:
        """Lowest line index of the window."""
        return self.window[0]

    @property
    def k_max(self) -> int:
        """Highest line index of the window."""
        return self.window[1]

    @property
    def size(self) -> int:
        """Number of modes in the window."""
        return self.k_max - self.k_min + 1

    @property
    def dimension(self) -> int:
        """Torus dimension."""
        return len(self.a)

    def __getitem__(self, k: int) -> Fraction:
        return self.d[k]

    def index(self, k: int) -> int:
        """Array position of line index k."""
        if not self.k_min <= k <= self.k_max:
            raise IndexError(f"Line index {k} outside window {self.window}.")
        return k - self.k_min

    def site(self, k: int) -> LatticeVector:
        """Lattice site a + kb."""
        return line_site(self.a, self.b, k)

    def coefficient(self, k: int) -> Fraction:
        """d_k from the generic formula, valid for any k, inside the window or not."""
        return Fraction(norm2(self.site(k))) / self.L - self.A

    @cached_property
    def ks(self) -> NDArray[np.int64]:
        """Line indices of the window."""
        return np.arange(self.k_min, self.k_max + 1, dtype=np.int64)

    @cached_property
    def d_array(self) -> NDArray[np.float64]:
        """The coefficients as floats, ordered by k."""
        return np.array([float(self.d[int(k)]) for k in self.ks], dtype=np.float64)

    @cached_property
    def site_norms(self) -> NDArray[np.float64]:
        """|a+kb|² for every k of the window, the torus Laplacian eigenvalues on the line."""
        return np.array([float(norm2(self.site(int(k)))) for k in self.ks], dtype=np.float64)

    def with_window(self, window: tuple[int, int]) -> "DiffusionSpectrum":
        """The same line on another window."""
        return build_line_spectrum(self.a, self.b, self.direction, window)

    def to_dict(self) -> dict[str, Any]:
        """JSON friendly form with exact rationals as [numerator, denominator]."""
        return {
            "a": list(self.a),
            "b": list(self.b),
            "direction": self.direction.value,
            "L": fraction_pair(self.L),
            "A": fraction_pair(self.A),
            "window": list(self.window),
            "d": [[k, *fraction_pair(self.d[k])] for k in range(self.k_min, self.k_max + 1)],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "DiffusionSpectrum":
        """Rebuild a spectrum and check the stored coefficients against it."""
        spectrum = build_line_spectrum(
            as_lattice_vector(data["a"]),
            as_lattice_vector(data["b"]),
            Direction(data["direction"]),
            (int(data["window"][0]), int(data["window"][1])),
        )
        for k, num, den in data.get("d", []):
            if spectrum.d[int(k)] != Fraction(num, den):
                raise ValueError(f"Stored d_{k} = {num}/{den} does not match the line, expected {spectrum.d[int(k)]}.")
        return spectrum


def build_line_spectrum(
    a: Iterable[int],
    b: Iterable[int],
    direction: Direction | str,
    window: tuple[int, int] | None = None,
) -> DiffusionSpectrum:
    """Build the exact spectrum of the line {a + kb}.

    Parameters
    ----------
    a : Iterable[int]
        Source mode.
    b : Iterable[int]
        Line step, the target mode is a + b.
    direction : Direction | str
        Uphill (|a+b| > |a|) or downhill (|a+b| < |a|).
    window : tuple[int, int], optional
        Inclusive range of k, by default [-48, 49].

    Returns
    -------
    DiffusionSpectrum
        The normalized spectrum.
    """
    a = as_lattice_vector(a)
    b = as_lattice_vector(b)
    direction = Direction(direction)
    if len(a) != len(b):
        raise ValueError(f"a and b must have the same dimension, got {a} and {b}.")
    if not any(a) or not any(b):
        raise ValueError(f"a and b must be nonzero, got a={a}, b={b}.")
    if dot(a, b) ** 2 >= norm2(a) * norm2(b):
        raise ParallelVectors(f"a={a} and b={b} are parallel, the line has no shear direction.")

    window = window if window is not None else (-48, 49)
    if window[0] > -2 or window[1] < 2:
        raise ValueError(f"The window {window} must contain [-2, 2].")

    # normalization from the first step of the line
    c = add(a, b)
    gap = norm2(c) - norm2(a)
    if gap == 0:
        raise ZeroNormalization(f"|a+b|² = |a|² = {norm2(a)} for a={a}, b={b}.")
    if direction is Direction.UPHILL:
        if gap < 0:
            raise WrongDirection(f"a={a} to a+b={c} goes down by {-gap}, use a downhill step.")
        L = Fraction(gap)
        A = Fraction(norm2(a)) / L
    else:
        if gap > 0:
            raise WrongDirection(f"a={a} to a+b={c} goes up by {gap}, use an uphill step.")
        L = Fraction(-gap)
        A = Fraction(norm2(c)) / L

    d = {k: Fraction(norm2(line_site(a, b, k))) / L - A for k in range(window[0], window[1] + 1)}
    negative = {k: v for k, v in d.items() if v < 0}
    if negative:
        k = min(negative, key=lambda j: negative[j])
        raise NegativeCoefficient(
            f"d_{k} = {negative[k]} < 0 on the line a={a}, b={b}: |a+kb| is below min(|a|, |a+b|)."
        )

    spectrum = DiffusionSpectrum(a=a, b=b, direction=direction, L=L, A=A, window=window, d=d)
    logger.debug(f"Built {direction.value} spectrum a={a} b={b} L={L} A={A} window={window}")
    return spectrum


@dataclass(frozen=True)
class AssumptionReport:
    """Exact margins of a spectrum against the configured thresholds.

    ``S`` is the window sum plus the certified tail bound. ``spacing_margin`` is the
    worst value of d_{k+1} − d_{1−k} − spacing_min over the checked k.
    """

    M: Fraction
    M_at: int
    S: Fraction
    S_window: Fraction
    S_tail: Fraction
    spacing_ok: bool
    spacing_margin: Fraction
    spacing_at: int
    growth_constant: Fraction
    m_min: Fraction
    s_max: Fraction
    spacing_min: Fraction
    passed: bool

    @property
    def m_margin(self) -> Fraction:
        """M − M_min."""
        return self.M - self.m_min

    @property
    def s_margin(self) -> Fraction:
        """S_max − S."""
        return self.s_max - self.S

    @property
    def thresholds_used(self) -> dict[str, Fraction]:
        """Thresholds the report was made with."""
        return {"m_min": self.m_min, "s_max": self.s_max, "spacing_min": self.spacing_min}

    def failures(self) -> list[str]:
        """Names of the failing items with their margins."""
        failed = []
        if self.M < self.m_min:
            failed.append(f"M = {float(self.M):.6g} < M_min = {float(self.m_min):.6g}")
        if self.S > self.s_max:
            failed.append(f"S = {float(self.S):.6g} > S_max = {float(self.s_max):.6g}")
        if not self.spacing_ok:
            failed.append(f"spacing margin {float(self.spacing_margin):.6g} < 0 at k = {self.spacing_at}")
        return failed

    def to_dict(self) -> dict[str, Any]:
        """JSON friendly view."""
        return {
            "M": float(self.M),
            "M_exact": str(self.M),
            "M_at": self.M_at,
            "S": float(self.S),
            "S_tail": float(self.S_tail),
            "spacing_ok": self.spacing_ok,
            "spacing_margin": float(self.spacing_margin),
            "spacing_at": self.spacing_at,
            "growth_constant": float(self.growth_constant),
            "m_min": str(self.m_min),
            "s_max": str(self.s_max),
            "spacing_min": str(self.spacing_min),
            "passed": self.passed,
        }


def tail_constants(spec: DiffusionSpectrum) -> tuple[Fraction, Fraction]:
    """Constants c₊, c₋ with d_k ≥ c k² for k beyond the right and left window edges.

    Parameters
    ----------
    spec : DiffusionSpectrum
        The spectrum.

    Returns
    -------
    tuple[Fraction, Fraction]
        (c₊, c₋), either may be nonpositive when the window is too short.
    """
    bb = norm2(spec.b)
    ab = abs(dot(spec.a, spec.b))
    k_right = spec.k_max + 1
    k_left = 1 - spec.k_min
    c_right = (Fraction(bb) - Fraction(2 * ab, k_right)) / spec.L
    c_left = (Fraction(bb) - Fraction(2 * ab, k_left)) / spec.L
    return c_right, c_left


def quadratic_growth_constant(spec: DiffusionSpectrum) -> Fraction:
    """Window-certified c > 0 with d_k ≥ c k² for every |k| ≥ 2."""
    c_right, c_left = tail_constants(spec)
    inside = min(spec.d[k] / (k * k) for k in range(spec.k_min, spec.k_max + 1) if abs(k) >= 2)
    return min(inside, c_right, c_left)


def check_assumptions(
    spec: DiffusionSpectrum,
    m_min: Fraction | int = Fraction(8),
    s_max: Fraction | int = Fraction(6),
    spacing_min: Fraction | int = Fraction(1),
) -> AssumptionReport:
    """Certify M, S and the spacing item of a spectrum.

    Parameters
    ----------
    spec : DiffusionSpectrum
        The spectrum to check.
    m_min : Fraction, optional
        Lower threshold for M, by default 8.
    s_max : Fraction, optional
        Upper threshold for S, by default 6.
    spacing_min : Fraction, optional
        Lower threshold for d_{k+1} − d_{1−k}, by default 1.

    Returns
    -------
    AssumptionReport
        Exact values and margins, ``passed`` is True when all items hold.
    """
    m_min, s_max, spacing_min = Fraction(m_min), Fraction(s_max), Fraction(spacing_min)
    d = spec.d

    # the window must reach the increasing part on both sides
    if not (d[spec.k_max] > d[spec.k_max - 1] and d[spec.k_min] > d[spec.k_min + 1]):
        raise WindowTooSmall(
            f"d_k is not increasing at the edges of window {spec.window} for a={spec.a}, b={spec.b}; "
            "enlarge the window."
        )

    # minimum away from the two special modes
    M_at = min((k for k in d if k not in (0, 1)), key=lambda k: (d[k], abs(k)))
    M = d[M_at]

    # the tail beyond the window must stay above M and be summable
    c_right, c_left = tail_constants(spec)
    k_right, k_left = spec.k_max + 1, 1 - spec.k_min
    if c_right <= 0 or c_left <= 0 or c_right * k_right**2 < M or c_left * k_left**2 < M:
        raise WindowTooSmall(
            f"Quadratic growth beyond window {spec.window} does not certify M = {M}; enlarge the window."
        )
    S_window = sum((1 / (1 + value) for value in d.values()), Fraction(0))
    S_tail = 1 / (c_right * (k_right - 1)) + 1 / (c_left * (k_left - 1))
    S = S_window + S_tail
    if S <= Fraction(3, 2):
        raise RuntimeError(f"S = {S} cannot be below 3/2, the k = 0, 1 terms alone give 3/2.")

    # spacing item for every k whose pair (k+1, 1-k) lies in the window
    spacing_range = range(1, min(spec.k_max - 1, 1 - spec.k_min) + 1)
    margins = {k: d[k + 1] - d[1 - k] - spacing_min for k in spacing_range}
    spacing_at = min(margins, key=lambda k: margins[k])
    spacing_margin = margins[spacing_at]
    spacing_ok = spacing_margin >= 0

    growth = quadratic_growth_constant(spec)
    passed = M >= m_min and S <= s_max and spacing_ok
    report = AssumptionReport(
        M=M,
        M_at=M_at,
        S=S,
        S_window=S_window,
        S_tail=S_tail,
        spacing_ok=spacing_ok,
        spacing_margin=spacing_margin,
        spacing_at=spacing_at,
        growth_constant=growth,
        m_min=m_min,
        s_max=s_max,
        spacing_min=spacing_min,
        passed=passed,
    )
    logger.debug(
        f"Assumptions for a={spec.a} b={spec.b}: M={float(M):.4g} at k={M_at}, S={float(S):.4g}, "
        f"spacing margin={float(spacing_margin):.4g}, passed={passed}"
    )
    return report
