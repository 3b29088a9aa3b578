"""Trial-structure domain types: design specification, recruitment schedule,
stopping-boundary shape families and recruitment-time conversion.

Arms are indexed ``k = 0..K-1`` in code (arm ``k`` enters at control stage
``entry[k]``); the control arm is handled separately through the schedule.
Stage indices ``j`` are 1-based in formulas and names, 0-based in arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "Boundaries",
    "CalibratedDesign",
    "DesignSpec",
    "EffectConfig",
    "Schedule",
    "ScheduleError",
    "ShapeError",
    "SHAPES",
    "control_schedule",
    "duration",
    "shape_bounds",
]

SHAPES = ("triangular", "pocock", "obf")


class ShapeError(ValueError):
    """Invalid boundary-shape inputs."""


class ScheduleError(ValueError):
    """Recruitment schedule cannot be constructed or is inconsistent."""


def shape_bounds(shape: str, a: float, r) -> tuple[np.ndarray, np.ndarray]:
    """Lower/upper stopping boundaries for one arm from a shape family.

    ``r`` is the arm's cumulative stage-ratio vector (strictly increasing,
    ``r[0] > 0``); ``a`` the scalar the calibration solves for.  The final
    lower bound always equals the final upper bound so the last analysis
    forces a decision.

    Families (J analyses, ``f = r/r[J-1]``):

    * triangular: ``u = a (1 + f) / sqrt(r)``, ``l = -a (1 - 3 f) / sqrt(r)``
    * pocock:     ``u = a`` at every analysis, ``l = 0`` before the last
    * obf:        ``u = a sqrt(r[J-1] / r)`` (so ``u[J-1] = a``), ``l = 0``
      before the last
    """
    r = np.asarray(r, dtype=float)
    if r.ndim != 1 or r.size < 1:
        raise ShapeError("stage ratios must be a non-empty vector")
    if r[0] <= 0.0 or np.any(np.diff(r) <= 0.0):
        raise ShapeError("stage ratios must be positive and strictly increasing")
    if a <= 0.0:
        raise ShapeError("shape scalar must be positive")
    frac = r / r[-1]
    rr = r / r[0]
    if shape == "triangular":
        upper = a * (1.0 + frac) / np.sqrt(rr)
        lower = -a * (1.0 - 3.0 * frac) / np.sqrt(rr)
    elif shape == "pocock":
        upper = np.full(r.size, a)
        lower = np.zeros(r.size)
        lower[-1] = a
    elif shape == "obf":
        upper = a * np.sqrt(r[-1] / r)
        lower = np.zeros(r.size)
        lower[-1] = upper[-1]
    else:
        raise ShapeError(f"unknown boundary shape {shape!r}")
    if np.any(lower > upper + 1e-12):
        raise ShapeError("shape produced lower bounds above upper bounds")
    return lower, upper


@dataclass(frozen=True)
class DesignSpec:
    """Pre-planned platform trial: arm count, adding schedule, targets.

    ``adding_stages[k]`` is the control stage at which arm ``k`` enters
    (0 for the initial arms); ``stages_per_arm[k]`` its number of analyses.
    ``theta_interesting``/``theta_null`` are the clinically interesting and
    the largest uninteresting mean differences against control.
    """

    n_arms: int
    n_initial_arms: int
    adding_stages: tuple[int, ...]
    stages_per_arm: tuple[int, ...]
    theta_interesting: float
    theta_null: float
    sigma: float = 1.0
    alpha: float = 0.025
    beta: float = 0.2
    recruitment_rate: float = 21.0
    shapes: tuple[str, ...] = ()
    stage_ratios: tuple[tuple[float, ...], ...] = ()

    def __post_init__(self):
        k = self.n_arms
        if k < 1 or self.n_initial_arms < 1 or self.n_initial_arms > k:
            raise ValueError("need 1 <= n_initial_arms <= n_arms")
        if len(self.adding_stages) != k or len(self.stages_per_arm) != k:
            raise ValueError("adding_stages and stages_per_arm must have one entry per arm")
        if any(s < 0 for s in self.adding_stages) or any(j < 1 for j in self.stages_per_arm):
            raise ValueError("adding stages must be >= 0 and stages per arm >= 1")
        if any(self.adding_stages[i] != 0 for i in range(self.n_initial_arms)):
            raise ValueError("initial arms must have adding stage 0")
        if any(
            self.adding_stages[i] == 0 for i in range(self.n_initial_arms, k)
        ):
            raise ValueError("added arms must have adding stage >= 1")
        if list(self.adding_stages) != sorted(self.adding_stages):
            raise ValueError("arms must be listed in order of addition")
        if not self.theta_null < self.theta_interesting:
            raise ValueError("theta_null must be below theta_interesting")
        if not (0.0 < self.alpha < 1.0 and 0.0 < self.beta < 1.0):
            raise ValueError("alpha and beta must lie in (0, 1)")
        if self.sigma <= 0.0 or self.recruitment_rate <= 0.0:
            raise ValueError("sigma and recruitment_rate must be positive")
        if not self.shapes:
            object.__setattr__(self, "shapes", ("triangular",) * k)
        if len(self.shapes) != k or any(s not in SHAPES for s in self.shapes):
            raise ValueError(f"shapes must be one of {SHAPES} per arm")
        if not self.stage_ratios:
            object.__setattr__(
                self,
                "stage_ratios",
                tuple(tuple(float(j) for j in range(1, jk + 1)) for jk in self.stages_per_arm),
            )
        for k_i, (r, jk) in enumerate(zip(self.stage_ratios, self.stages_per_arm)):
            r = np.asarray(r, float)
            if r.size != jk or r[0] <= 0 or np.any(np.diff(r) <= 0):
                raise ValueError(f"stage ratios for arm {k_i} must be increasing, length {jk}")

    @property
    def control_stages(self) -> int:
        return max(s + j for s, j in zip(self.adding_stages, self.stages_per_arm))

    def ratios(self, k: int) -> np.ndarray:
        return np.asarray(self.stage_ratios[k], dtype=float)


@dataclass(frozen=True)
class Schedule:
    """Patient-count bookkeeping: per-arm cumulative counts and the control.

    ``arm_cum[k][j-1]`` is the cumulative count on arm ``k`` through its
    analysis ``j``; ``control_cum[j-1]`` the cumulative control count through
    control stage ``j``.  The concurrent controls for arm ``k`` at its
    analysis ``j`` are ``control_cum[s+j-1] - (control_cum[s-1] if s else 0)``.
    """

    stage1_sizes: tuple[float, ...]
    arm_cum: tuple[tuple[float, ...], ...]
    control_cum: tuple[float, ...]
    entry: tuple[int, ...]

    @property
    def n_arms(self) -> int:
        return len(self.arm_cum)

    @property
    def control_stages(self) -> int:
        return len(self.control_cum)

    def control_increments(self) -> np.ndarray:
        return np.diff(np.concatenate(([0.0], np.asarray(self.control_cum))))

    def concurrent_controls(self, k: int, j: int) -> float:
        """Concurrent control count for arm ``k`` through its analysis ``j``."""
        s = self.entry[k]
        start = self.control_cum[s - 1] if s > 0 else 0.0
        return self.control_cum[s + j - 1] - start

    @property
    def max_n(self) -> float:
        return sum(c[-1] for c in self.arm_cum) + self.control_cum[-1]


def control_schedule(spec: DesignSpec, stage1_sizes) -> Schedule:
    """Build the control schedule from per-arm stage-1 sizes.

    Each control period's increment is the largest per-stage size among the
    arms recruiting in that period, which keeps the control at least as
    large as any concurrent comparison requires.
    """
    n1 = np.asarray(stage1_sizes, dtype=float)
    if n1.size != spec.n_arms or np.any(n1 <= 0.0):
        raise ScheduleError("need one positive stage-1 size per arm")
    arm_cum = []
    arm_inc = []
    for k in range(spec.n_arms):
        r = spec.ratios(k)
        cum = n1[k] * r / r[0]
        arm_cum.append(tuple(float(v) for v in cum))
        arm_inc.append(np.diff(np.concatenate(([0.0], cum))))
    j0 = spec.control_stages
    inc0 = np.zeros(j0)
    for period in range(1, j0 + 1):
        sizes = [
            arm_inc[k][period - 1 - spec.adding_stages[k]]
            for k in range(spec.n_arms)
            if spec.adding_stages[k] < period <= spec.adding_stages[k] + spec.stages_per_arm[k]
        ]
        if not sizes:
            raise ScheduleError(f"no arm recruits during control period {period}")
        inc0[period - 1] = max(sizes)
    return Schedule(
        stage1_sizes=tuple(float(v) for v in n1),
        arm_cum=tuple(arm_cum),
        control_cum=tuple(float(v) for v in np.cumsum(inc0)),
        entry=tuple(spec.adding_stages),
    )


@dataclass(frozen=True)
class Boundaries:
    """Per-arm stopping boundaries plus the shape provenance that generated
    them.  ``scales[k]`` is NaN for explicitly supplied bounds (comparator
    constructions); otherwise the bounds regenerate exactly from
    ``shape_bounds(shapes[k], scales[k], ratios[k])``.
    """

    lower: tuple[tuple[float, ...], ...]
    upper: tuple[tuple[float, ...], ...]
    shapes: tuple[str, ...]
    scales: tuple[float, ...]

    def __post_init__(self):
        for lo, hi in zip(self.lower, self.upper):
            if len(lo) != len(hi):
                raise ValueError("boundary vectors must have equal lengths")
            if any(l > u + 1e-12 for l, u in zip(lo, hi)):
                raise ValueError("lower bounds must not exceed upper bounds")
            if abs(lo[-1] - hi[-1]) > 1e-9:
                raise ValueError("final lower and upper bounds must coincide")

    @classmethod
    def from_scales(cls, spec: DesignSpec, scales) -> "Boundaries":
        lows, highs = [], []
        for k in range(spec.n_arms):
            lo, hi = shape_bounds(spec.shapes[k], float(scales[k]), spec.ratios(k))
            lows.append(tuple(lo))
            highs.append(tuple(hi))
        return cls(tuple(lows), tuple(highs), tuple(spec.shapes), tuple(float(a) for a in scales))

    def arm_lower(self, k: int) -> np.ndarray:
        return np.asarray(self.lower[k], dtype=float)

    def arm_upper(self, k: int) -> np.ndarray:
        return np.asarray(self.upper[k], dtype=float)


@dataclass(frozen=True)
class EffectConfig:
    """True mean differences against control, one entry per arm."""

    theta: tuple[float, ...]

    @classmethod
    def global_null(cls, n_arms: int) -> "EffectConfig":
        return cls((0.0,) * n_arms)

    @classmethod
    def lfc(cls, spec: DesignSpec, k: int) -> "EffectConfig":
        """Least favourable configuration for arm ``k``: that arm at the
        interesting effect, every other arm at the largest uninteresting one."""
        vals = [spec.theta_null] * spec.n_arms
        vals[k] = spec.theta_interesting
        return cls(tuple(vals))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.theta, dtype=float)


@dataclass(frozen=True)
class CalibratedDesign:
    """A fully determined trial: spec, integer schedule and boundaries."""

    spec: DesignSpec
    schedule: Schedule
    boundaries: Boundaries

    @property
    def max_n(self) -> float:
        return self.schedule.max_n

    def max_duration(self) -> float:
        return duration(self.schedule.max_n, self.spec.recruitment_rate)


def duration(n_patients: float, rate: float) -> float:
    """Months needed to recruit ``n_patients`` at ``rate`` patients/month."""
    if rate <= 0.0:
        raise ValueError("recruitment rate must be positive")
    return n_patients / rate
