"""Power under the least favourable configuration and the iterative
sample-size search that brings every arm to the target power.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from . import engine
from .design import (
    Boundaries,
    CalibratedDesign,
    DesignSpec,
    EffectConfig,
    Schedule,
    control_schedule,
)
from .engine import TrialFrame, frame_from_parts, frame_of
from .errors import calibrate_boundaries
from .kernels import QuadratureGrid, chain_weights

__all__ = [
    "PowerDecomposition",
    "SizingError",
    "arm_power",
    "competitor_block",
    "power_term",
    "size_for_power",
]


class SizingError(RuntimeError):
    """Target power unattainable or the sizing iteration failed to settle."""


@dataclass(frozen=True)
class PowerDecomposition:
    """Per-analysis rejection-and-recommendation probabilities for one arm."""

    arm: int
    terms: tuple[float, ...]

    @property
    def total(self) -> float:
        return float(sum(self.terms))


def _nodes_of(grid) -> int:
    return grid.nodes_per_dim if isinstance(grid, QuadratureGrid) else int(grid)


def power_term(design: CalibratedDesign, k: int, analysis: int,
               grid: QuadratureGrid | int = 32) -> float:
    """P(under LFC_k: nothing rejected earlier, arm k never dropped, and it
    rejects at ``analysis`` with the largest statistic)."""
    effects = EffectConfig.lfc(design.spec, k)
    return engine.power_term_frame(
        frame_of(design), k, analysis, effects.as_array(), _nodes_of(grid)
    )


def arm_power(design: CalibratedDesign, k: int,
              grid: QuadratureGrid | int = 32) -> PowerDecomposition:
    frame = frame_of(design)
    effects = EffectConfig.lfc(design.spec, k).as_array()
    nodes = _nodes_of(grid)
    terms = tuple(
        engine.power_term_frame(frame, k, jp, effects, nodes)
        for jp in range(1, frame.stages(k) + 1)
    )
    return PowerDecomposition(arm=k, terms=terms)


def competitor_block(design: CalibratedDesign, k: int, focal: int, analysis: int,
                     v: float, t) -> float:
    """P(arm ``k`` neither rejects before ``analysis`` of ``focal`` nor
    beats it on rejection at the shared analysis), given the standardised
    control increments ``t`` and the focal arm's final-mean variable ``v``.

    Scalar reference path, independent of the lattice batching; the focal
    configuration is the LFC for ``focal``.
    """
    if k == focal:
        raise ValueError("competitor must differ from the focal arm")
    from .errors import shifted_limits

    spec = design.spec
    sched = design.schedule
    effects = EffectConfig.lfc(spec, focal)
    d_k = spec.adding_stages[focal] + analysis - spec.adding_stages[k]
    if d_k <= 0:
        return 1.0
    j_k = spec.stages_per_arm[k]
    n_k = np.asarray(sched.arm_cum[k])
    lam = np.sqrt(n_k)
    total = 0.0
    theta_k = effects.theta[k]
    for j in range(1, min(j_k, d_k) + 1):
        lims = [
            shifted_limits(sched, design.boundaries, k, i, theta_k, t, spec.sigma)
            for i in range(1, j + 1)
        ]
        lo = np.array([sl.lower for sl in lims[:-1]] + [-np.inf])
        if j < d_k:
            hi = np.array([sl.upper for sl in lims[:-1]] + [lims[-1].lower])
        else:
            n_f = sched.arm_cum[focal][analysis - 1]
            beat = math.sqrt(n_k[j - 1] / n_f) * v + math.sqrt(n_k[j - 1]) * (
                effects.theta[focal] - theta_k
            ) / spec.sigma
            hi = np.array([sl.upper for sl in lims[:-1]] + [max(lims[-1].upper, beat)])
        total += chain_weights(lam[:j], lo, hi)
    return total


def _zscore_pair_size(spec: DesignSpec) -> float:
    """Fixed two-arm z-test size per group at the spec's alpha/beta/effect."""
    z = ndtri(1.0 - spec.alpha) + ndtri(1.0 - spec.beta)
    return 2.0 * (spec.sigma * z / spec.theta_interesting) ** 2


def size_for_power(spec: DesignSpec, eps: float = 0.05, nodes: int = 32,
                   max_iter: int = 50, eps_boundary: float = 1e-5) -> CalibratedDesign:
    """Iterative sample-size search: per-arm stage-1 sizes giving every arm
    power 1 - beta under its LFC, with boundaries recalibrated to the
    evolving schedule; final sizes are rounded up and the boundaries
    recalibrated once more.
    """
    from .errors import _SOLVE_NODES, _solve

    k_arms = spec.n_arms
    solve_nodes = min(_SOLVE_NODES, nodes)
    target = 1.0 - spec.beta
    n_hi = 10.0 * _zscore_pair_size(spec)

    def power_of(frame: TrialFrame, k: int) -> float:
        effects = EffectConfig.lfc(spec, k).as_array()
        return sum(
            engine.power_term_frame(frame, k, jp, effects, solve_nodes)
            for jp in range(1, frame.stages(k) + 1)
        )

    n = np.ones(k_arms)
    schedule = control_schedule(spec, n)
    bounds = calibrate_boundaries(spec, schedule, eps_boundary, nodes=solve_nodes)
    scale_seed = bounds.scales[0]

    # Common scaling leaves every ratio (hence the calibration) unchanged.
    def common_power(c: float) -> float:
        sched = control_schedule(spec, np.full(k_arms, c))
        return power_of(frame_from_parts(spec.sigma, sched, bounds), 0)

    common = _solve(lambda c: common_power(c) - target, 2.0, n_hi,
                    what="common stage size", xtol=0.01, lo_min=1.0, hi_max=50.0 * n_hi)
    n = np.full(k_arms, common)
    schedule = control_schedule(spec, n)

    def frame_at(sizes: np.ndarray, sched: Schedule) -> TrialFrame:
        arm_cum = tuple(
            sizes[k] * spec.ratios(k) / spec.ratios(k)[0] for k in range(k_arms)
        )
        return TrialFrame(
            sigma=spec.sigma,
            control_cum=np.asarray(sched.control_cum),
            entry=tuple(spec.adding_stages),
            arm_cum=arm_cum,
            lower=tuple(np.asarray(lo) for lo in bounds.lower),
            upper=tuple(np.asarray(hi) for hi in bounds.upper),
        )

    for _ in range(max_iter):
        prev = n.copy()
        for k in range(k_arms):

            def arm_power_at(n_k: float, k: int = k) -> float:
                sizes = n.copy()
                sizes[k] = n_k
                return power_of(frame_at(sizes, schedule), k)

            n[k] = _solve(lambda x, k=k: arm_power_at(x, k) - target,
                          max(n[k] / 2.0, 1.0), n[k] * 2.0,
                          what=f"arm {k} stage size", xtol=0.01,
                          lo_min=1.0, hi_max=50.0 * n_hi)
        schedule = control_schedule(spec, n)
        bounds = calibrate_boundaries(spec, schedule, eps_boundary,
                                      nodes=solve_nodes, initial=scale_seed)
        scale_seed = bounds.scales[0]
        if np.max(np.abs(n - prev)) < eps:
            break
    else:
        raise SizingError(f"sample-size iteration did not settle in {max_iter} rounds")

    n_int = np.ceil(n - 1e-9)
    schedule = control_schedule(spec, n_int)
    bounds = calibrate_boundaries(spec, schedule, eps_boundary, nodes=nodes,
                                  initial=scale_seed)
    return CalibratedDesign(spec=spec, schedule=schedule, boundaries=bounds)
