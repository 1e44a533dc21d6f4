"""Lattice geometry shared by the planner and the torus lift."""

import math
from collections.abc import Sequence
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, TypeVar

from .errors import ParallelVectors
from .spectrum import LatticeVector, dot, norm2

Number = TypeVar("Number", int, float)


@dataclass(frozen=True)
class SignedPermutation:
    """Map between a step's working frame and the lab frame.

    Working coordinate ``i`` lives on lab axis ``perm[i]`` with sign ``signs[i]``.

    Parameters
    ----------
    perm : tuple[int, ...]
        Lab axis of each working axis.
    signs : tuple[int, ...]
        Sign (+1 or -1) applied to each working axis.
    """

    perm: tuple[int, ...]
    signs: tuple[int, ...]

    def __post_init__(self):
        if sorted(self.perm) != list(range(len(self.perm))):
            raise ValueError(f"{self.perm} is not a permutation.")
        if len(self.signs) != len(self.perm) or any(s not in (-1, 1) for s in self.signs):
            raise ValueError(f"Signs must be ±1, one per axis, got {self.signs}.")

    @classmethod
    def identity(cls, dimension: int) -> "SignedPermutation":
        """The lab frame itself."""
        return cls(tuple(range(dimension)), (1,) * dimension)

    @classmethod
    def swap(cls, dimension: int, i: int = 0, j: int = 1) -> "SignedPermutation":
        """Relabel axes i and j."""
        perm = list(range(dimension))
        perm[i], perm[j] = perm[j], perm[i]
        return cls(tuple(perm), (1,) * dimension)

    @property
    def is_identity(self) -> bool:
        """True when no axis is moved or flipped."""
        return self.perm == tuple(range(len(self.perm))) and all(s == 1 for s in self.signs)

    def to_lab(self, v: Sequence[Number]) -> tuple[Number, ...]:
        """Working-frame vector to lab frame."""
        out: list[Any] = [0] * len(self.perm)
        for value, axis, sign in zip(v, self.perm, self.signs, strict=True):
            out[axis] = sign * value
        return tuple(out)

    def from_lab(self, v: Sequence[Number]) -> tuple[Number, ...]:
        """Lab-frame vector to working frame."""
        return tuple(sign * v[axis] for axis, sign in zip(self.perm, self.signs, strict=True))

    def to_dict(self) -> dict[str, list[int]]:
        """JSON friendly view."""
        return {"perm": list(self.perm), "signs": list(self.signs)}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SignedPermutation":
        """Inverse of :meth:`to_dict`."""
        return cls(tuple(int(p) for p in data["perm"]), tuple(int(s) for s in data["signs"]))


def sorted_frame(v: LatticeVector, keep_last: int = 0) -> tuple[LatticeVector, SignedPermutation]:
    """Sort |coordinates| ascending and make them nonnegative.

    Parameters
    ----------
    v : LatticeVector
        Lab-frame vector.
    keep_last : int, optional
        Number of trailing coordinates left in place, by default 0.

    Returns
    -------
    tuple[LatticeVector, SignedPermutation]
        The normalized vector and the frame mapping it back to ``v``.
    """
    head = len(v) - keep_last
    order = sorted(range(head), key=lambda i: (abs(v[i]), i))
    perm = tuple(order) + tuple(range(head, len(v)))
    signs = tuple(-1 if v[i] < 0 else 1 for i in order) + (1,) * keep_last
    frame = SignedPermutation(perm, signs)
    normalized = frame.from_lab(v)
    return tuple(int(x) for x in normalized), frame


def shear_normal(a: LatticeVector, b: LatticeVector) -> LatticeVector:
    """Integer vector |b|²a − (a·b)b, orthogonal to b and parallel to the shear direction."""
    bb, ab = norm2(b), dot(a, b)
    return tuple(bb * x - ab * y for x, y in zip(a, b, strict=True))


def angle_factor_squared(a: LatticeVector, b: LatticeVector) -> Fraction:
    """Exact α² = 1 − (a·b)²/(|a|²|b|²)."""
    aa, bb = norm2(a), norm2(b)
    return Fraction(aa * bb - dot(a, b) ** 2, aa * bb)


def shear_geometry(a: LatticeVector, b: LatticeVector) -> tuple[tuple[float, ...], float]:
    """Shear direction ℓ and angle factor α of the step a → a + b.

    Parameters
    ----------
    a : LatticeVector
        Source mode.
    b : LatticeVector
        Line step.

    Returns
    -------
    tuple[tuple[float, ...], float]
        Unit vector ℓ orthogonal to b, and α in (0, 1].
    """
    if not any(a) or not any(b):
        raise ValueError(f"a and b must be nonzero, got a={a}, b={b}.")
    alpha2 = angle_factor_squared(a, b)
    if alpha2 <= 0:
        raise ParallelVectors(f"a={a} and b={b} are parallel.")
    normal = shear_normal(a, b)
    length = math.sqrt(norm2(normal))
    ell = tuple(x / length for x in normal)
    return ell, math.sqrt(alpha2)
