"""Piecewise coefficient fields v^k_t driving the line system."""

import math
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.typing import NDArray


def stage1_feedback(
    z0: complex,
    z1: complex,
    t: float,
    gain: float = 256.0,
    switch_time: float = 2.0**-10,
    zero_tolerance: float = 1e-9,
) -> complex:
    """Feedback amplitude a_t on modes ±1 that empties mode 0.

    Parameters
    ----------
    z0 : complex
        Current amplitude of mode 0.
    z1 : complex
        Current amplitude of mode 1.
    t : float
        Time since the start of the feedback segment.
    gain : float, optional
        Magnitude of the control, by default 2⁸.
    switch_time : float, optional
        Length of the initial constant kick, by default 2⁻¹⁰.
    zero_tolerance : float, optional
        Amplitudes at or below this count as zero, by default 1e-9.

    Returns
    -------
    complex
        a_t, with |a_t| ≤ gain; 0 once either amplitude is zero after the kick.
    """
    if t < 0:
        raise ValueError(f"Feedback time must be nonnegative, got {t}.")
    if t < switch_time:
        return complex(gain)
    r0, r1 = abs(z0), abs(z1)
    if r0 <= zero_tolerance or r1 <= zero_tolerance:
        return 0j
    return -1j * gain * (z0.conjugate() * r1) / (z1.conjugate() * r0)


@dataclass(frozen=True)
class FeedbackSegment:
    """Stage-1 feedback on modes ±1, realized on a control period grid.

    The period shrinks near |z⁰| → 0 so that one period removes at most
    ``approach`` of the remaining |z⁰|.
    """

    t0: float
    t1: float
    gain: float = 256.0
    switch_time: float = 2.0**-10
    zero_tolerance: float = 1e-9
    period: float = 2.0**-14
    approach: float = 0.5

    kind = "feedback"

    def value(self, z0: complex, z1: complex, t: float) -> complex:
        """Feedback amplitude at absolute time t."""
        return stage1_feedback(z0, z1, t - self.t0, self.gain, self.switch_time, self.zero_tolerance)

    def sup_norms(self) -> dict[int, float]:
        """sup_t |v^k_t| per mode on this segment."""
        return {1: self.gain, -1: self.gain}

    def to_dict(self) -> dict[str, Any]:
        """JSON friendly view."""
        return {
            "kind": self.kind,
            "t0": self.t0,
            "t1": self.t1,
            "gain": self.gain,
            "switch_time": self.switch_time,
            "zero_tolerance": self.zero_tolerance,
            "period": self.period,
            "approach": self.approach,
        }


@dataclass(frozen=True)
class ConstantSegment:
    """Constant coefficients on [t0, t1].

    Only k ≥ 1 is stored; v^{-k} = conj(v^k) and v^0 = 0 hold by construction.
    """

    t0: float
    t1: float
    values: Mapping[int, complex] = field(default_factory=dict)

    kind = "constant"

    def __post_init__(self):
        folded: dict[int, complex] = {}
        for k, value in self.values.items():
            k, value = int(k), complex(value)
            if k == 0:
                if value != 0:
                    raise ValueError("v^0 must vanish.")
                continue
            if k < 0:
                k, value = -k, value.conjugate()
                if k in self.values and complex(self.values[k]) != value:
                    raise ValueError(f"v^{-k} is not the conjugate of v^{k}.")
            folded[k] = value
        object.__setattr__(self, "values", {k: folded[k] for k in sorted(folded) if folded[k] != 0})

    @property
    def reach(self) -> int:
        """Largest |k| with nonzero coefficient."""
        return max(self.values, default=0)

    def coefficient(self, k: int) -> complex:
        """v^k with v^{−k} = conj(v^k)."""
        if k == 0:
            return 0j
        if k < 0:
            return complex(self.values.get(-k, 0j)).conjugate()
        return complex(self.values.get(k, 0j))

    def modes(self) -> tuple[int, NDArray[np.complex128]]:
        """Symmetric coefficient array for j in [-J, J], index j + J."""
        reach = self.reach
        full = np.zeros(2 * reach + 1, dtype=np.complex128)
        for k, value in self.values.items():
            full[reach + k] = value
            full[reach - k] = value.conjugate()
        return reach, full

    def total_variation(self) -> float:
        """Σ_j |v^j| over both signs of j."""
        return 2.0 * sum(abs(v) for v in self.values.values())

    def sup_norms(self) -> dict[int, float]:
        """sup_t |v^k_t| per mode on this segment."""
        norms = {}
        for k, value in self.values.items():
            norms[k] = abs(value)
            norms[-k] = abs(value)
        return norms

    def to_dict(self) -> dict[str, Any]:
        """JSON friendly view."""
        return {
            "kind": self.kind,
            "t0": self.t0,
            "t1": self.t1,
            "values": {str(k): [v.real, v.imag] for k, v in self.values.items()},
        }


@dataclass(frozen=True)
class ZeroSegment:
    """No advection on [t0, t1]."""

    t0: float
    t1: float

    kind = "zero"

    def sup_norms(self) -> dict[int, float]:
        """sup_t |v^k_t| per mode on this segment."""
        return {}

    def to_dict(self) -> dict[str, Any]:
        """JSON friendly view."""
        return {"kind": self.kind, "t0": self.t0, "t1": self.t1}


Segment = FeedbackSegment | ConstantSegment | ZeroSegment


def segment_from_dict(data: dict[str, Any]) -> Segment:
    """Rebuild a segment from its ``kind`` tag."""
    kind = data["kind"]
    if kind == "zero":
        return ZeroSegment(float(data["t0"]), float(data["t1"]))
    if kind == "constant":
        values = {int(k): complex(re, im) for k, (re, im) in data["values"].items()}
        return ConstantSegment(float(data["t0"]), float(data["t1"]), values)
    if kind == "feedback":
        options = {key: float(data[key]) for key in ("gain", "switch_time", "zero_tolerance", "period", "approach")}
        return FeedbackSegment(float(data["t0"]), float(data["t1"]), **options)
    raise ValueError(f"Unknown segment kind {kind!r}.")


@dataclass(frozen=True)
class CoefficientField:
    """Segments tiling [t_start, t_end] without gaps or overlaps."""

    segments: tuple[Segment, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        for segment in self.segments:
            if not segment.t1 > segment.t0:
                raise ValueError(f"Empty or reversed segment [{segment.t0}, {segment.t1}].")
        for left, right in zip(self.segments, self.segments[1:]):
            if left.t1 != right.t0:
                raise ValueError(f"Segments do not tile: [{left.t0}, {left.t1}] then [{right.t0}, {right.t1}].")

    def __iter__(self) -> Iterator[Segment]:
        return iter(self.segments)

    def __len__(self) -> int:
        return len(self.segments)

    @property
    def t_start(self) -> float:
        """Start of the first segment."""
        return self.segments[0].t0 if self.segments else 0.0

    @property
    def t_end(self) -> float:
        """End of the last segment."""
        return self.segments[-1].t1 if self.segments else 0.0

    @property
    def duration(self) -> float:
        """Length of the covered interval."""
        return self.t_end - self.t_start

    @property
    def is_realized(self) -> bool:
        """True when no segment depends on the state."""
        return not any(isinstance(s, FeedbackSegment) for s in self.segments)

    def then(self, *segments: Segment) -> "CoefficientField":
        """Field with more segments appended."""
        return CoefficientField(self.segments + tuple(segments))

    def concat(self, other: "CoefficientField") -> "CoefficientField":
        """Field followed by another."""
        return CoefficientField(self.segments + other.segments)

    def segment_at(self, t: float) -> Segment:
        """Segment containing t; right-continuous except at the final endpoint."""
        for segment in self.segments:
            if segment.t0 <= t < segment.t1:
                return segment
        if self.segments and t == self.t_end:
            return self.segments[-1]
        raise ValueError(f"t = {t} outside the field [{self.t_start}, {self.t_end}].")

    def evaluate(self, t: float) -> dict[int, complex]:
        """All nonzero v^k_t for both signs of k."""
        segment = self.segment_at(t)
        if isinstance(segment, FeedbackSegment):
            raise ValueError("Feedback segments depend on the state; evaluate the realized field instead.")
        if isinstance(segment, ZeroSegment):
            return {}
        values = {}
        for k in segment.values:
            values[k] = segment.coefficient(k)
            values[-k] = segment.coefficient(-k)
        return values

    def to_dict(self) -> dict[str, Any]:
        """JSON friendly view."""
        return {"segments": [s.to_dict() for s in self.segments]}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "CoefficientField":
        """Inverse of :meth:`to_dict`."""
        return cls(tuple(segment_from_dict(s) for s in data["segments"]))

    @classmethod
    def zero(cls, t0: float, t1: float) -> "CoefficientField":
        """A single zero segment on [t0, t1]."""
        return cls((ZeroSegment(t0, t1),))


def step_count(length: float, h_max: float) -> int:
    """Number of equal steps of size at most h_max covering length."""
    return max(1, math.ceil(length / h_max * (1 - 1e-12)))
