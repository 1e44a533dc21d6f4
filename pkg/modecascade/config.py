"""Run configuration: every tunable threshold, tolerance and size in one place."""

import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path
from typing import Any

logger = logging.getLogger(__name__)

# number of worker processes when not given explicitly
DEFAULT_NUM_CPUS = int(os.environ.get("MODECASCADE_NUM_CPUS", 1))


def _parse_bool(raw: str) -> bool:
    value = raw.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"Cannot interpret {raw!r} as a boolean.")


def _parse_optional_float(raw: str) -> float | None:
    if raw.strip().lower() in ("none", "auto", ""):
        return None
    return float(raw)


@dataclass(frozen=True)
class Config:
    """Resolved configuration of a run.

    Defaults are the desk-scale values; every field may be overridden from a flat
    ``key = value`` file or from the command line.
    """

    # spectrum
    window_k: int = 48
    m_min: Fraction = Fraction(8)
    s_max: Fraction = Fraction(6)
    spacing_min: Fraction = Fraction(1)

    # planner
    p: int = 10
    geometry_k: int = 48

    # stage-1 feedback
    feedback_gain: float = 256.0
    switch_time: float = 2.0**-10
    feedback_period: float = 2.0**-14
    feedback_approach: float = 0.5
    zero_tolerance: float = 1e-9
    stage1_tolerance: float = 1e-3

    # waits
    eps_start_max: float = 1e-4
    tau_max_factor: float = 64.0
    sigma_max: float = 200.0

    # dyadic newton iteration
    eps_converged: float = 1e-12
    eps_accept: float = 1e-10
    contraction_floor: float = 1e-13
    max_dyadic_steps: int = 10
    newton_k_cap: int = 48
    newton_tail_fraction: float = 1e-3
    series_cutoff: float = 1e-4

    # downhill push
    push_budget: float = 0.01
    push_cap: float = 0.1
    rho_min: float = 1e-14
    eta: float | None = field(default=None, metadata={"parse": _parse_optional_float})

    # integrator
    scheme: str = "etdrk4"
    dt_safety: float = 1.0 / 64.0
    dt_max: float = 1.0 / 128.0
    contour_points: int = 32
    leak_tolerance: float = 1e-10
    blowup_tolerance: float = 1e-8
    underflow: float = 1e-280
    sample_every: int = 8

    # full lattice oracle
    oracle_box: int = 96
    oracle_checkpoints: int = 8
    grid_res: int = 256

    # pipeline
    residual_max: float = 1e-8
    num_cpus: int = DEFAULT_NUM_CPUS

    def __post_init__(self):
        if self.scheme not in ("etdrk4", "etd2rk"):
            raise ValueError(f"Unknown integration scheme {self.scheme!r}, use 'etdrk4' or 'etd2rk'.")
        if self.window_k < 2:
            raise ValueError("window_k must be at least 2 so the window contains [-2, 2].")
        if self.dt_safety <= 0 or self.dt_max <= 0:
            raise ValueError("dt_safety and dt_max must be positive.")
        if self.num_cpus < 1:
            raise ValueError("num_cpus must be at least 1.")

    @property
    def window(self) -> tuple[int, int]:
        """Default line window [-K, K+1]."""
        return (-self.window_k, self.window_k + 1)

    def replace(self, **overrides: Any) -> "Config":
        """Return a copy with the given (non-None) overrides applied."""
        overrides = {key: value for key, value in overrides.items() if value is not None}
        unknown = set(overrides) - {f.name for f in fields(self)}
        if unknown:
            raise ValueError(f"Unknown configuration keys: {sorted(unknown)}")
        coerced = {key: _coerce(self, key, value) for key, value in overrides.items()}
        return replace(self, **coerced)

    def to_dict(self) -> dict[str, Any]:
        """JSON friendly view, fractions written as strings."""
        return {key: (str(value) if isinstance(value, Fraction) else value) for key, value in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Config":
        """Inverse of :meth:`to_dict`."""
        return cls().replace(**{key: value for key, value in data.items() if value is not None})

    @classmethod
    def from_file(cls, path: Path | str) -> "Config":
        """Load a flat ``key = value`` configuration file.

        Parameters
        ----------
        path : Path | str
            Path to the file. Blank lines and ``#`` comments are ignored.

        Returns
        -------
        Config
            Defaults with the file's values applied.
        """
        path = Path(path)
        values: dict[str, str] = {}
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, raw = (part.strip() for part in line.split("=", 1))
            values[key] = raw
        logger.info(f"Loaded {len(values)} configuration values from {path}")
        config = cls()
        unknown = set(values) - {f.name for f in fields(config)}
        if unknown:
            raise ValueError(f"{path}: unknown configuration keys {sorted(unknown)}")
        return replace(config, **{key: _coerce(config, key, raw) for key, raw in values.items()})


def _coerce(config: Config, key: str, value: Any) -> Any:
    """Convert a raw value to the type of the field's default."""
    spec = next(f for f in fields(config) if f.name == key)
    parser = spec.metadata.get("parse")
    if parser is not None:
        return parser(value) if isinstance(value, str) else value
    default = spec.default
    if isinstance(default, bool):
        return _parse_bool(value) if isinstance(value, str) else bool(value)
    if isinstance(default, Fraction):
        return Fraction(value) if not isinstance(value, float) else Fraction(str(value))
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return str(value)
