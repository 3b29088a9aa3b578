"""Shared conditional-probability engine.

Conditional on the standardised control increments ``t_1..t_{J0}``, each
arm's sequence of standardised treatment means ``Y_{k,1..J_k}`` is an
independent Gaussian Markov chain with correlation
``sqrt(n_{k,i}/n_{k,j})``, and every stopping event becomes a band event
with limits that are fixed-width intervals translated by a linear function
of the increments.  All analytic quantities therefore reduce to

    integral over the control lattice of  prod_k (band/exit probability),

which this module evaluates by propagating each arm's banded density
forward on Gauss-Legendre panels, batched over the whole control lattice
at once.  The fixed-width translation structure lets the transition kernel
factor into a single G x G matrix product plus rank-one exponential
corrections, with a direct fallback when the correction exponents would
be too large for float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from numpy.polynomial.legendre import leggauss
from scipy.special import ndtr

from .design import Boundaries, CalibratedDesign, Schedule

_SQRT_2PI = math.sqrt(2.0 * math.pi)
_TAIL = 8.5
_BAND_NODES = 48
_CHUNK = 4096
# Exponent budget for the factorised transition; beyond it the direct
# kernel is evaluated instead (float64 overflows near e**709).
_EXP_BUDGET = 620.0


@dataclass(frozen=True)
class TrialFrame:
    """Engine view of a trial: counts, windows and boundaries as arrays.

    Arm ``k`` enters at control stage ``entry[k]``; its analysis ``j``
    (1-based) coincides with control stage ``entry[k] + j``.
    """

    sigma: float
    control_cum: np.ndarray
    entry: tuple[int, ...]
    arm_cum: tuple[np.ndarray, ...]
    lower: tuple[np.ndarray, ...]
    upper: tuple[np.ndarray, ...]

    @property
    def n_arms(self) -> int:
        return len(self.arm_cum)

    @property
    def j0(self) -> int:
        return self.control_cum.size

    @cached_property
    def control_inc(self) -> np.ndarray:
        return np.diff(np.concatenate(([0.0], self.control_cum)))

    def stages(self, k: int) -> int:
        return self.arm_cum[k].size

    def window(self, k: int) -> np.ndarray:
        """Concurrent control counts for arm ``k`` at each of its analyses."""
        s = self.entry[k]
        start = self.control_cum[s - 1] if s > 0 else 0.0
        end = s + self.stages(k)
        return self.control_cum[s:end] - start


def frame_of(design: CalibratedDesign) -> TrialFrame:
    return frame_from_parts(design.spec.sigma, design.schedule, design.boundaries)


def frame_from_parts(sigma: float, schedule: Schedule, boundaries: Boundaries) -> TrialFrame:
    return TrialFrame(
        sigma=sigma,
        control_cum=np.asarray(schedule.control_cum, dtype=float),
        entry=tuple(schedule.entry),
        arm_cum=tuple(np.asarray(c, dtype=float) for c in schedule.arm_cum),
        lower=tuple(boundaries.arm_lower(k) for k in range(len(schedule.arm_cum))),
        upper=tuple(boundaries.arm_upper(k) for k in range(len(schedule.arm_cum))),
    )


class Lattice:
    """One-dimensional Gauss-Hermite rule shared by every control dimension."""

    def __init__(self, nodes_per_dim: int):
        x, w = hermegauss(nodes_per_dim)
        self.g0 = nodes_per_dim
        self.nodes = x
        self.weights = w / w.sum()


def _gl01(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def _phi(x: np.ndarray) -> np.ndarray:
    return np.exp(-0.5 * x * x) / _SQRT_2PI


class ArmWalk:
    """Band-survival recursion for one arm over the control lattice.

    Emits, for each analysis ``j`` (1-based), exit and survival
    probabilities conditional on the control increments in the arm's
    window, as flat arrays over the window's lattice points in C order.
    """

    def __init__(self, frame: TrialFrame, k: int, theta: float, lat: Lattice,
                 band_nodes: int = _BAND_NODES):
        self.lat = lat
        self.k = k
        s = frame.entry[k]
        n = frame.arm_cum[k]
        m = frame.window(k)
        self.J = n.size
        if np.any(m <= 0.0):
            raise ValueError(f"arm {k} has a non-positive concurrent control count")
        scale = np.sqrt(1.0 + n / m)
        shift = theta * np.sqrt(n) / frame.sigma
        self.blo = frame.lower[k] * scale - shift
        self.bhi = frame.upper[k] * scale - shift
        self.width = self.bhi - self.blo
        self.lam = np.sqrt(n)
        self.coef = np.sqrt(n) / m
        sqrt_inc = np.sqrt(frame.control_inc[s : s + self.J])
        # Cumulative translated shifts d_j over the arm's own lattice dims.
        taus = [lat.nodes * sqrt_inc[0]]
        for j in range(1, self.J):
            taus.append((taus[-1][:, None] + lat.nodes[None, :] * sqrt_inc[j]).ravel())
        self.d = [self.coef[j] * taus[j] for j in range(self.J)]
        self.xi, self.om = _gl01(band_nodes)
        self._states: list[np.ndarray | None] = [None] * self.J

    # -- internal ---------------------------------------------------------

    def _nodes_at(self, i: int) -> np.ndarray:
        """Band node positions at analysis ``i`` (0-based), shape (P_i, G)."""
        return self.blo[i] + self.d[i][:, None] + self.width[i] * self.xi[None, :]

    def _state(self, count: int) -> np.ndarray:
        """Banded density after analyses 1..count (1-based count >= 1)."""
        if count < 1 or count > self.J - 1:
            raise ValueError("band count out of range")
        if self._states[count - 1] is not None:
            return self._states[count - 1]
        if count == 1:
            y = self._nodes_at(0)
            state = self.width[0] * self.om[None, :] * _phi(y)
        else:
            state = self._transition(self._state(count - 1), count - 1)
        self._states[count - 1] = state
        return state

    def _transition(self, state: np.ndarray, i: int) -> np.ndarray:
        """Restrict to the band at analysis ``i`` (0-based) from state at i-1."""
        g0 = self.lat.g0
        rho = self.lam[i - 1] / self.lam[i]
        s2 = 1.0 - rho * rho
        s = math.sqrt(s2)
        w_new, w_old = self.width[i], self.width[i - 1]
        a0 = self.blo[i] + 0.5 * w_new
        b0 = rho * (self.blo[i - 1] + 0.5 * w_old)
        alpha_c = self.blo[i] + w_new * self.xi - a0
        beta_c = rho * (self.blo[i - 1] + w_old * self.xi) - b0
        eta = self.d[i] - rho * np.repeat(self.d[i - 1], g0) + (a0 - b0)
        cut = 0.5 * w_new + 0.5 * rho * w_old + 12.0 * s
        prefac = self.width[i] * self.om / (s * _SQRT_2PI)
        budget = (np.abs(alpha_c).max() + np.abs(beta_c).max()) * cut / s2
        if budget <= _EXP_BUDGET:
            mask = np.abs(eta) <= cut
            eta_m = np.where(mask, eta, 0.0)
            kern = np.exp(-0.5 * ((alpha_c[:, None] - beta_c[None, :]) / s) ** 2)
            v = np.exp(beta_c[None, :] * (eta_m[:, None] / s2)) * np.repeat(state, g0, axis=0)
            out = v @ kern.T
            out *= np.exp(-alpha_c[None, :] * (eta_m[:, None] / s2))
            out *= np.where(mask, np.exp(-0.5 * eta_m * eta_m / s2), 0.0)[:, None]
            return out * prefac[None, :]
        # Direct evaluation, chunked over lattice points.
        p_new = eta.size
        g = self.xi.size
        out = np.empty((p_new, g))
        y_new_base = self.blo[i] + w_new * self.xi
        y_old_base = self.blo[i - 1] + w_old * self.xi
        d_old = np.repeat(self.d[i - 1], g0)
        state_par = np.repeat(state, g0, axis=0)
        for lo in range(0, p_new, _CHUNK):
            hi = min(lo + _CHUNK, p_new)
            shift = (self.d[i][lo:hi] - rho * d_old[lo:hi])[:, None, None]
            arg = (y_new_base[None, :, None] - rho * y_old_base[None, None, :] + shift) / s
            kern = np.exp(-0.5 * arg * arg)
            out[lo:hi] = np.einsum("phg,pg->ph", kern, state_par[lo:hi])
        return out * prefac[None, :]

    def _finish(self, j: int, climit: np.ndarray, rows: np.ndarray | None, kind: str) -> np.ndarray:
        """Weighted finish at analysis ``j`` (1-based) from the banded state.

        ``climit`` has shape ``(R, *extra)`` where row ``r`` corresponds to
        the arm-window lattice point ``rows[r]`` (identity when None).
        kind: 'below' -> P(Y_j < climit), 'density' -> joint density at climit.
        """
        if j == 1:
            if kind == "below":
                return ndtr(climit)
            return _phi(climit)
        state = self._state(j - 1)
        g0 = self.lat.g0
        y_prev = self._nodes_at(j - 2)
        rho = self.lam[j - 2] / self.lam[j - 1]
        s = math.sqrt(1.0 - rho * rho)
        parent = (rows // g0) if rows is not None else np.repeat(
            np.arange(state.shape[0]), g0
        )
        out = np.empty(climit.shape)
        extra = climit.ndim - 1
        exp_prev = (slice(None),) + (None,) * extra + (slice(None),)
        for lo in range(0, climit.shape[0], _CHUNK):
            hi = min(lo + _CHUNK, climit.shape[0])
            idx = parent[lo:hi]
            arg = (climit[lo:hi, ..., None] - rho * y_prev[idx][exp_prev]) / s
            if kind == "below":
                vals = ndtr(arg)
            else:
                vals = _phi(arg) / s
            out[lo:hi] = np.einsum("p...g,pg->p...", vals, state[idx])
        return out

    # -- public finishes (analysis j is 1-based) ---------------------------

    def exit_below(self, j: int) -> np.ndarray:
        """P(bands 1..j-1, Y_j < lower_j) over the window lattice."""
        return self._finish(j, self.blo[j - 1] + self.d[j - 1], None, "below")

    def exit_above(self, j: int) -> np.ndarray:
        below = self._finish(j, self.bhi[j - 1] + self.d[j - 1], None, "below")
        return self.survive_before(j) - below

    def below_upper(self, j: int) -> np.ndarray:
        return self._finish(j, self.bhi[j - 1] + self.d[j - 1], None, "below")

    def below_at(self, j: int, climit: np.ndarray, rows: np.ndarray | None = None) -> np.ndarray:
        return self._finish(j, climit, rows, "below")

    def density_at(self, j: int, v: np.ndarray, rows: np.ndarray | None = None) -> np.ndarray:
        return self._finish(j, v, rows, "density")

    def survive(self, count: int) -> np.ndarray:
        """P(bands 1..count) over the window lattice (count >= 1)."""
        return self._state(count).sum(axis=1)

    def survive_before(self, j: int) -> np.ndarray:
        """P(bands 1..j-1) expanded to the analysis-j lattice."""
        if j == 1:
            return np.ones(self.d[0].size)
        return np.repeat(self.survive(j - 1), self.lat.g0)


# -- lattice table assembly -------------------------------------------------


def _lift(flat: np.ndarray, start: int, ndims: int, d_total: int, g0: int) -> np.ndarray:
    """Reshape a window-flat table to broadcast over the global lattice.

    ``flat`` covers lattice dims ``start+1 .. start+ndims`` (1-based); the
    result has ``d_total`` axes sized ``g0`` on those dims and 1 elsewhere.
    """
    shape = [1] * d_total
    for d in range(start, start + ndims):
        shape[d] = g0
    return flat.reshape(shape)


def _contract(arr: np.ndarray, weights: np.ndarray) -> float:
    out = arr
    while out.ndim:
        if out.shape[-1] == 1:
            out = out[..., 0]
        else:
            out = out @ weights
    return float(out)


def _accumulated_exits(walk: ArmWalk, upto: int, g0: int) -> np.ndarray:
    """Sum of futility exits at analyses 1..upto, over (g0,)*upto dims."""
    acc = np.zeros((g0,) * upto)
    for j in range(1, upto + 1):
        acc += walk.exit_below(j).reshape((g0,) * j + (1,) * (upto - j))
    return acc


def no_rejection_prob_frame(frame: TrialFrame, theta: np.ndarray, nodes: int) -> float:
    """P(no null hypothesis is ever rejected | theta) via the control lattice."""
    lat = Lattice(nodes)
    d_total = frame.j0
    prod = None
    for k in range(frame.n_arms):
        walk = ArmWalk(frame, k, float(theta[k]), lat)
        acc = _accumulated_exits(walk, walk.J, lat.g0)
        table = _lift(acc.reshape(-1), frame.entry[k], walk.J, d_total, lat.g0)
        prod = table if prod is None else prod * table
    return _contract(prod, lat.weights)


def pwer_frame(frame: TrialFrame, k: int, band_nodes: int = _BAND_NODES) -> float:
    """Pairwise error rate: P(arm k's null is rejected) with no other arm
    able to stop the trial.  Closed MVN form on the unconditional Z scale."""
    from .kernels import chain_weights

    n = frame.arm_cum[k]
    m = frame.window(k)
    lam = 1.0 / np.sqrt(1.0 / n + 1.0 / m)
    lo = frame.lower[k]
    hi = frame.upper[k]
    total = 0.0
    for j in range(1, n.size + 1):
        rect_lo = np.concatenate((lo[: j - 1], [-np.inf]))
        rect_hi = np.concatenate((hi[: j - 1], [lo[j - 1]]))
        total += chain_weights(lam[:j], rect_lo, rect_hi, band_nodes)
    return 1.0 - total


def power_term_frame(frame: TrialFrame, focal: int, analysis: int, theta: np.ndarray,
                     nodes: int, v_nodes_per_panel: int = 24) -> float:
    """P(no rejection before ``analysis`` of arm ``focal``; the focal arm is
    never dropped; it rejects at ``analysis`` with the largest statistic).

    The final-mean variable is integrated by Gauss-Legendre over the exact
    rejection region, with panel splits at each competitor's comparison
    kink so the integrand is smooth on every panel.
    """
    lat = Lattice(nodes)
    g0 = lat.g0
    s_f = frame.entry[focal]
    d_total = s_f + analysis
    walk_f = ArmWalk(frame, focal, float(theta[focal]), lat)
    p_own = g0**analysis
    p_full = g0**d_total
    full_idx = np.arange(p_full)
    own_rows = full_idx % p_own

    c_own = walk_f.bhi[analysis - 1] + walk_f.d[analysis - 1]
    lo_edge = np.clip(c_own[own_rows], -_TAIL, _TAIL)

    t_factors = []
    sim_comps = []
    for k in range(frame.n_arms):
        if k == focal:
            continue
        d_k = s_f + analysis - frame.entry[k]
        if d_k <= 0:
            continue
        walk_k = ArmWalk(frame, k, float(theta[k]), lat)
        if d_k > walk_k.J:
            acc = _accumulated_exits(walk_k, walk_k.J, g0)
            t_factors.append(_lift(acc.reshape(-1), frame.entry[k], walk_k.J, d_total, g0))
        else:
            p_k = g0**d_k
            acc = np.zeros((g0,) * d_k)
            for j in range(1, d_k):
                acc += walk_k.exit_below(j).reshape((g0,) * j + (1,) * (d_k - j))
            nf = frame.arm_cum[focal][analysis - 1]
            nk = frame.arm_cum[k][d_k - 1]
            slope = math.sqrt(nk / nf)
            offset = math.sqrt(nk) * (theta[focal] - theta[k]) / frame.sigma
            ulim = walk_k.bhi[d_k - 1] + walk_k.d[d_k - 1]
            sim_comps.append((walk_k, d_k, acc.reshape(-1), slope, offset, ulim, full_idx % p_k))

    # v panels: edges at the clipped comparison kinks, end at the tail.
    edge_list = [lo_edge]
    for walk_k, d_k, fut, slope, offset, ulim, rows_k in sim_comps:
        v_star = (ulim[rows_k] - offset) / slope
        edge_list.append(np.clip(v_star, lo_edge, _TAIL))
    edges = np.sort(np.stack(edge_list, axis=0), axis=0) if len(edge_list) > 1 else lo_edge[None, :]
    edges = np.concatenate((edges, np.full((1, p_full), _TAIL)), axis=0)
    xi, om = _gl01(v_nodes_per_panel)
    vnodes, vweights = [], []
    for q in range(edges.shape[0] - 1):
        a, b = edges[q], edges[q + 1]
        w = np.maximum(b - a, 0.0)
        vnodes.append(a[:, None] + w[:, None] * xi[None, :])
        vweights.append(w[:, None] * om[None, :])
    vnodes = np.concatenate(vnodes, axis=1)
    vweights = np.concatenate(vweights, axis=1)

    integrand = walk_f.density_at(analysis, vnodes, rows=own_rows)
    for walk_k, d_k, fut, slope, offset, ulim, rows_k in sim_comps:
        climit = np.maximum(ulim[rows_k][:, None], slope * vnodes + offset)
        gamma = fut[rows_k][:, None] + walk_k.below_at(d_k, climit, rows=rows_k)
        integrand *= gamma

    vals = (integrand * vweights).sum(axis=1).reshape((g0,) * d_total)
    for tf in t_factors:
        vals = vals * tf
    return _contract(vals, lat.weights)


# -- outcome enumeration and efficient expected size ------------------------


def exit_tables_frame(frame: TrialFrame, theta: np.ndarray, nodes: int):
    """Per-arm futility/efficacy exit tables lifted to the global lattice."""
    lat = Lattice(nodes)
    d_total = frame.j0
    fut, eff = [], []
    for k in range(frame.n_arms):
        walk = ArmWalk(frame, k, float(theta[k]), lat)
        fk, ek = [], []
        for j in range(1, walk.J + 1):
            fk.append(_lift(walk.exit_below(j), frame.entry[k], j, d_total, lat.g0))
            ek.append(_lift(walk.exit_above(j), frame.entry[k], j, d_total, lat.g0))
        fut.append(fk)
        eff.append(ek)
    return fut, eff, lat


def cell_probability(tables, lat: Lattice) -> float:
    prod = tables[0]
    for t in tables[1:]:
        prod = prod * t
    return _contract(prod, lat.weights)


def expected_n_efficient_frame(frame: TrialFrame, theta: np.ndarray, nodes: int) -> float:
    """Expected total sample size by the four-part decomposition
    (all-futility control stops, rejection control stops, competitor-caused
    arm stops, own-exit arm stops)."""
    lat = Lattice(nodes)
    g0 = lat.g0
    d_total = frame.j0
    walks = [ArmWalk(frame, k, float(theta[k]), lat) for k in range(frame.n_arms)]
    fut = [[_lift(w.exit_below(j), frame.entry[k], j, d_total, g0)
            for j in range(1, w.J + 1)] for k, w in enumerate(walks)]
    eff = [[_lift(w.exit_above(j), frame.entry[k], j, d_total, g0)
            for j in range(1, w.J + 1)] for k, w in enumerate(walks)]
    below_u = [[_lift(w.below_upper(j), frame.entry[k], j, d_total, g0)
                for j in range(1, w.J + 1)] for k, w in enumerate(walks)]
    surv = [[_lift(w.survive(c), frame.entry[k], c, d_total, g0)
             for c in range(1, w.J)] for k, w in enumerate(walks)]

    def futility_factor(k: int, j0: int):
        """Sum of futility exits of arm k by control stage j0 (0 if none)."""
        upto = min(walks[k].J, j0 - frame.entry[k])
        if upto < 1:
            return None
        out = fut[k][0]
        for j in range(2, upto + 1):
            out = out + fut[k][j - 1]
        return out

    def no_reject_factor(k: int, j0: int):
        """P(arm k has not crossed its upper bound by control stage j0)."""
        d_k = j0 - frame.entry[k]
        if d_k <= 0:
            return 1.0
        parts = []
        upto = min(walks[k].J, d_k - 1)
        for j in range(1, upto + 1):
            parts.append(fut[k][j - 1])
        if d_k <= walks[k].J:
            parts.append(below_u[k][d_k - 1])
        out = parts[0]
        for p in parts[1:]:
            out = out + p
        return out

    def product_over(ks, factor_fn, j0):
        out = None
        for k in ks:
            f = factor_fn(k, j0)
            if isinstance(f, float):
                continue
            if f is None:
                return None
            out = f if out is None else out * f
        return 1.0 if out is None else out

    arms = list(range(frame.n_arms))
    s_star = max(frame.entry)
    psi = np.zeros(frame.j0 + 1)
    ups = np.zeros(frame.j0 + 1)
    for j0 in range(1, frame.j0 + 1):
        if j0 > s_star:
            prod = product_over(arms, lambda k, t: futility_factor(k, t), j0)
            psi[j0] = 0.0 if prod is None else (
                prod if isinstance(prod, float) else _contract(prod, lat.weights)
            )
        prod = product_over(arms, lambda k, t: no_reject_factor(k, t), j0)
        no_rej = prod if isinstance(prod, float) else _contract(prod, lat.weights)
        ups[j0] = 1.0 - no_rej

    total = 0.0
    for j0 in range(1, frame.j0 + 1):
        p_stop = psi[j0] - psi[j0 - 1] + ups[j0] - ups[j0 - 1]
        total += p_stop * frame.control_cum[j0 - 1]

    def _integral(a, b):
        """Lattice integral of a*b where either may be a plain float."""
        if isinstance(a, float) and isinstance(b, float):
            return a * b
        if isinstance(a, float):
            return a * _contract(b, lat.weights)
        if isinstance(b, float):
            return b * _contract(a, lat.weights)
        return _contract(a * b, lat.weights)

    for kf in arms:
        s_f = frame.entry[kf]
        others = [k for k in arms if k != kf]
        for jp in range(1, walks[kf].J + 1):
            j0 = s_f + jp
            own_surv = 1.0 if jp == 1 else surv[kf][jp - 2]
            prev = product_over(others, lambda k, t: no_reject_factor(k, t), j0 - 1)
            cur = product_over(others, lambda k, t: no_reject_factor(k, t), j0)
            lam_term = _integral(prev, own_surv) - _integral(cur, own_surv)
            own_exit = fut[kf][jp - 1] + eff[kf][jp - 1]
            xi_term = _integral(cur, own_exit)
            total += (lam_term + xi_term) * frame.arm_cum[kf][jp - 1]
    return total
