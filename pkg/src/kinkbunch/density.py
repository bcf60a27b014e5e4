"""Counterfactual density, excess bunching and the marginal buncher's response.

Shifters observed above the diffuse window are moved back to their
counterfactual positions by the factor ``(z* + dz) / z*``; a polynomial fitted
to the bins outside the excluded window then predicts the counterfactual
counts inside it.  The excess mass ``B`` implied by that fit is converted into
an updated response, and the guess is bisected until guess and update agree.

Bins are indexed relative to the threshold: bin ``m`` covers
``(z* + (m-1) w, z* + m w]``, so ``m = 0`` is the threshold bin.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from .model_core import (
    EDGE_SLACK,
    BinnedDistribution,
    BunchingError,
    EstimationConfig,
    IdentificationError,
    InputError,
    InsufficientMassError,
    KinkPolicy,
    RankDeficientError,
    Samples,
)


class SortedSample:
    """Agents sorted by position with a running sum of weights.

    Counting the weight inside any interval then costs two binary searches,
    which keeps each bisection step independent of the sample size.
    """

    def __init__(self, z: NDArray, y: NDArray, w: NDArray, order: Optional[NDArray] = None):
        if order is None:
            order = np.argsort(z, kind="stable")
        self.order = order
        self.z = np.ascontiguousarray(z[order])
        self.y = np.ascontiguousarray(y[order])
        self.w = np.ascontiguousarray(w[order])
        self.cw = np.concatenate(([0.0], np.cumsum(self.w)))

    @classmethod
    def from_samples(cls, samples: Samples, sign: float = 1.0) -> "SortedSample":
        return cls(sign * samples.z, samples.y, samples.weight)

    def reweighted(self, w_sorted: NDArray) -> "SortedSample":
        """Same positions with new weights (already in sorted order)."""
        out = object.__new__(SortedSample)
        out.order, out.z, out.y = self.order, self.z, self.y
        out.w = w_sorted
        out.cw = np.concatenate(([0.0], np.cumsum(w_sorted)))
        return out

    @property
    def total(self) -> float:
        return float(self.cw[-1])

    def mass_le(self, x) -> NDArray:
        """Total weight of agents with position ``<= x``."""
        return self.cw[np.searchsorted(self.z, x, side="right")]

    def mass_at_or_below(self, edge, width: float) -> NDArray:
        """Weight up to a bin edge, with the same rounding slack as :func:`bin_index`."""
        return self.mass_le(np.asarray(edge) + EDGE_SLACK * width)


@dataclass(frozen=True)
class Geometry:
    """Threshold-aligned bin layout shared by every step of one estimation.

    ``n_left`` counts the excluded bins at and below the threshold (at least
    the threshold bin); ``n_right`` counts the diffuse bins above it.
    ``m_lo``..``m_hi`` is the fit window in counterfactual units.
    """

    z_star: float
    width: float
    n_left: int
    n_right: int
    m_lo: int
    m_hi: int

    def right_edge(self, m) -> NDArray:
        return self.z_star + np.asarray(m, dtype=float) * self.width

    def center(self, m) -> NDArray:
        return self.z_star + (np.asarray(m, dtype=float) - 0.5) * self.width

    @property
    def diffuse_upper(self) -> float:
        """Upper end of the snapped diffuse window above the threshold."""
        return self.z_star + self.n_right * self.width

    @property
    def diffuse_lower(self) -> float:
        return self.z_star - self.n_left * self.width

    def bin_of(self, x: float) -> int:
        return int(math.ceil((x - self.z_star) / self.width - 1e-9))


def snap_widths(u1: float, u2: float, width: float) -> tuple[int, int]:
    """Whole-bin counts for the diffuse window: left includes the threshold bin."""
    n_left = max(1, int(math.ceil(u1 / width - 1e-9)))
    n_right = int(math.ceil(u2 / width - 1e-9)) if u2 > 0 else 0
    return n_left, n_right


def make_geometry(
    z_star: float, u1: float, u2: float, width: float, lower: float, upper: float
) -> Geometry:
    n_left, n_right = snap_widths(u1, u2, width)
    m_lo = int(math.ceil((lower - z_star) / width - 1e-9)) + 1
    m_hi = int(math.floor((upper - z_star) / width + 1e-9))
    return Geometry(z_star, width, n_left, n_right, m_lo, m_hi)


def default_window(policy: KinkPolicy, config: EstimationConfig, z_min: float, z_max: float):
    """Fit window ``(lower, upper)``: config values, else ``[0.5 z*, 2 z*]`` clipped to the data."""
    lower = config.fit_lower if config.fit_lower is not None else max(0.5 * policy.z_star, z_min)
    upper = config.fit_upper if config.fit_upper is not None else min(2.0 * policy.z_star, z_max)
    if not lower < policy.z_star < upper:
        raise InputError(f"fit window ({lower}, {upper}) must straddle z* = {policy.z_star}")
    return lower, upper


def reference_columns(centers: NDArray, multiples: Sequence[float], width: float) -> NDArray:
    """Indicators for bins whose center lies within half a bin of a multiple of each ``r``."""
    if not multiples:
        return np.zeros((centers.size, 0))
    c = np.abs(centers)
    cols = []
    for r in multiples:
        off = np.abs(c - r * np.round(c / r))
        cols.append(((off <= width / 2 + 1e-12) & (c > width / 2)).astype(float))
    return np.column_stack(cols)


@dataclass(frozen=True)
class PolyFit:
    """Least-squares polynomial in bin units ``u = (center - z*) / w``, scaled by ``scale``."""

    coef: NDArray[np.float64]
    ref_coef: NDArray[np.float64]
    scale: float
    width: float
    multiples: tuple
    z_star: float

    def predict(self, m: NDArray) -> NDArray:
        u = (np.asarray(m, dtype=float) - 0.5) / self.scale
        out = np.polynomial.polynomial.polyval(u, self.coef)
        if self.ref_coef.size:
            out = out + reference_columns(self.z_star + (np.asarray(m) - 0.5) * self.width,
                                          self.multiples, self.width) @ self.ref_coef
        return out

    @property
    def currency_coeffs(self) -> NDArray[np.float64]:
        """Coefficients on powers of ``(z - z*)`` in currency units."""
        k = np.arange(self.coef.size)
        return self.coef / (self.scale * self.width) ** k


def fit_poly_bins(
    m: NDArray,
    values: NDArray,
    order: int,
    width: float,
    z_star: float,
    multiples: Sequence[float] = (),
    extra: Optional[NDArray] = None,
    weights: Optional[NDArray] = None,
) -> tuple[PolyFit, NDArray]:
    """Fit ``values`` on bins ``m`` by (weighted) least squares.

    ``extra`` appends further columns (dummies); their coefficients are
    returned separately.  Raises :class:`RankDeficientError` when the design
    cannot support the requested order.
    """
    m = np.asarray(m, dtype=float)
    u = m - 0.5
    scale = max(1.0, float(np.max(np.abs(u)))) if u.size else 1.0
    X = np.vander(u / scale, order + 1, increasing=True)
    R = reference_columns(z_star + u * width, multiples, width)
    blocks = [X, R]
    if extra is not None:
        blocks.append(extra)
    A = np.hstack(blocks)
    b = np.asarray(values, dtype=float)
    if weights is not None:
        sw = np.sqrt(weights)
        A_w, b_w = A * sw[:, None], b * sw
    else:
        A_w, b_w = A, b
    if A.shape[0] < A.shape[1]:
        raise RankDeficientError(
            f"{A.shape[0]} bins cannot identify {A.shape[1]} coefficients "
            f"(polynomial order {order}, {R.shape[1]} reference columns)"
        )
    sol, _, rank, _ = np.linalg.lstsq(A_w, b_w, rcond=None)
    if rank < A.shape[1]:
        raise RankDeficientError(
            f"design matrix has rank {rank} < {A.shape[1]} columns "
            f"(polynomial order {order} on {A.shape[0]} bins, {R.shape[1]} reference columns)"
        )
    p1 = order + 1
    fit = PolyFit(sol[:p1], sol[p1:p1 + R.shape[1]], scale, width, tuple(multiples), z_star)
    return fit, sol[p1 + R.shape[1]:]


def update_delta_z(excess: float, counterfactual_above: NDArray, bin_width: float) -> float:
    """Smallest response whose counterfactual mass above the threshold reaches ``excess``.

    ``counterfactual_above[i]`` is the counterfactual count in the bin
    ``(z* + i w, z* + (i+1) w]``.  The final bin is inverted by linear
    interpolation.
    """
    if excess <= 0:
        return 0.0
    h = np.maximum(np.asarray(counterfactual_above, dtype=float), 0.0)
    cum = np.cumsum(h)
    if cum.size == 0 or cum[-1] < excess:
        total = float(cum[-1]) if cum.size else 0.0
        raise InsufficientMassError(
            f"excess mass {excess:.6g} exceeds counterfactual mass {total:.6g} above the threshold"
        )
    i = int(np.searchsorted(cum, excess, side="left"))
    before = cum[i - 1] if i > 0 else 0.0
    return bin_width * (i + (excess - before) / h[i])


def calibrate_elasticity(delta_z_star: float, policy: KinkPolicy) -> float:
    """Elasticity implied by the marginal buncher's response."""
    if delta_z_star < 0:
        raise InputError("delta_z_star must be nonnegative")
    if policy.t + policy.delta_t >= 1.0:
        raise IdentificationError("elasticity unidentified at 100% marginal rate")
    if policy.delta_t == 0:
        raise IdentificationError("elasticity unidentified without a kink (delta_t = 0)")
    return math.log1p(delta_z_star / policy.z_star) / math.log(
        (1.0 - policy.t) / (1.0 - policy.t - policy.delta_t)
    )


# ---------------------------------------------------------------------------
# step functions on explicit agents and bins


@dataclass(frozen=True)
class Relocation:
    samples: Samples
    bunching_region: NDArray[np.bool_]
    shifted: NDArray[np.bool_]


def relocate_shifters(samples: Samples, delta_z_guess: float, policy: KinkPolicy) -> Relocation:
    """Move agents above ``z* + u2`` to ``z (z* + dz) / z*``; flag the bunching window."""
    if delta_z_guess < 0:
        raise InputError("delta_z_guess must be nonnegative")
    k = (policy.z_star + delta_z_guess) / policy.z_star
    z = samples.z
    shifted = z > policy.z_star + policy.u2
    region = (z >= policy.z_star - policy.u1) & ~shifted
    return Relocation(samples.with_z(np.where(shifted, z * k, z)), region, shifted)


def _bin_offsets(bins: BinnedDistribution, z_star: float) -> NDArray[np.int64]:
    m = (bins.right_edges - z_star) / bins.bin_width
    mi = np.round(m).astype(np.int64)
    if np.max(np.abs(m - mi), initial=0.0) > 1e-6:
        raise InputError("bins must be aligned so that z* is a bin edge")
    return mi


@dataclass(frozen=True)
class CounterfactualFit:
    poly_coeffs: NDArray[np.float64]
    reference_effects: dict
    predicted: NDArray[np.float64]
    excluded: NDArray[np.bool_]
    fit: PolyFit


def fit_counterfactual_density(
    relocated: BinnedDistribution,
    policy: KinkPolicy,
    config: EstimationConfig,
    delta_z_guess: float,
) -> CounterfactualFit:
    """Polynomial fit to relocated bin counts outside the excluded window.

    ``predicted`` covers every input bin and is clamped at zero.  Bins in the
    fit window are those fully inside ``config.fit_lower``..``fit_upper`` (all
    bins when unset).
    """
    m = _bin_offsets(relocated, policy.z_star)
    w = relocated.bin_width
    lower = config.fit_lower if config.fit_lower is not None else relocated.origin
    upper = config.fit_upper if config.fit_upper is not None else relocated.right_edges[-1]
    geo = make_geometry(policy.z_star, policy.u1, policy.u2, w, lower, upper)
    k = (policy.z_star + delta_z_guess) / policy.z_star
    first_clean = int(math.ceil((geo.diffuse_upper * k - policy.z_star) / w - 1e-9)) + 1
    excluded = (m > -geo.n_left) & (m < first_clean)
    use = ~excluded & (m >= geo.m_lo) & (m <= geo.m_hi)
    fit, _ = fit_poly_bins(m[use], relocated.counts[use], config.poly_order_density, w,
                           policy.z_star, config.reference_multiples)
    pred = fit.predict(m)
    return CounterfactualFit(
        poly_coeffs=fit.currency_coeffs,
        reference_effects=dict(zip(config.reference_multiples, fit.ref_coef.tolist())),
        predicted=np.maximum(pred, 0.0),
        excluded=excluded,
        fit=fit,
    )


def excess_bunching(
    observed: BinnedDistribution,
    predicted: NDArray,
    shifter_extrapolation: NDArray,
    policy: KinkPolicy,
) -> float:
    """Observed minus counterfactual mass over the diffuse window.

    Left of the threshold the comparison is with the counterfactual fit;
    right of it with the extrapolated shifter counts.
    """
    m = _bin_offsets(observed, policy.z_star)
    n_left, n_right = snap_widths(policy.u1, policy.u2, observed.bin_width)
    left = (m > -n_left) & (m <= 0)
    out = float(np.sum(observed.counts[left] - np.asarray(predicted)[left]))
    if n_right:
        right = (m >= 1) & (m <= n_right)
        ext = np.asarray(shifter_extrapolation, dtype=float)
        out += float(np.sum(observed.counts[right]) - np.sum(ext[: int(right.sum())]))
    return out


def shifter_diffuse_extrapolation(
    observed: BinnedDistribution, policy: KinkPolicy, config: EstimationConfig
) -> NDArray[np.float64]:
    """Continue the observed shifter density into the diffuse bins above the threshold."""
    n_left, n_right = snap_widths(policy.u1, policy.u2, observed.bin_width)
    if n_right == 0:
        return np.zeros(0)
    m = _bin_offsets(observed, policy.z_star)
    upper = config.fit_upper if config.fit_upper is not None else observed.right_edges[-1]
    m_hi = int(math.floor((upper - policy.z_star) / observed.bin_width + 1e-9))
    use = (m > n_right) & (m <= m_hi)
    fit, _ = fit_poly_bins(m[use], observed.counts[use], config.poly_order_density,
                           observed.bin_width, policy.z_star)
    return np.maximum(fit.predict(np.arange(1, n_right + 1)), 0.0)


# ---------------------------------------------------------------------------
# fast estimation path


@dataclass
class DensityEstimate:
    """Converged counterfactual density on a threshold-aligned grid.

    Arrays are indexed by bin offset ``m`` from ``m_min`` upward; use
    :meth:`offsets` for the matching ``m`` values.
    """

    delta_z_star: float
    excess_bunching: float
    poly_coeffs: NDArray[np.float64]
    reference_effects: dict
    counterfactual_counts: NDArray[np.float64]
    observed_counts: NDArray[np.float64]
    predicted_counts: NDArray[np.float64]
    shifter_diffuse_counts: NDArray[np.float64]
    geometry: Geometry
    m_min: int
    iterations_used: int
    converged: bool
    residual: float
    no_bunching: bool = False
    method: str = "relocation"
    fit: Optional[PolyFit] = None
    warnings: list = field(default_factory=list)

    @property
    def bin_width(self) -> float:
        return self.geometry.width

    @property
    def z_star(self) -> float:
        return self.geometry.z_star

    def offsets(self) -> NDArray[np.int64]:
        return self.m_min + np.arange(self.counterfactual_counts.size)

    @property
    def bin_centers(self) -> NDArray[np.float64]:
        return self.geometry.center(self.offsets())

    @property
    def relocation_factor(self) -> float:
        return (self.z_star + self.delta_z_star) / self.z_star

    @property
    def excluded_upper(self) -> float:
        return self.geometry.diffuse_upper * self.relocation_factor

    def at(self, m: int) -> int:
        """Array index of bin offset ``m``."""
        return int(m - self.m_min)

    def counterfactual_above(self, n_bins: Optional[int] = None) -> NDArray:
        """Counterfactual counts in bins ``m = 1, 2, ...``."""
        start = self.at(1)
        arr = self.counterfactual_counts[start:]
        return arr if n_bins is None else arr[:n_bins]

    def buncher_window_weights(self) -> tuple[NDArray, NDArray]:
        """Offsets and counterfactual weights over ``(z*, z* + dz]``, last bin fractional."""
        if self.delta_z_star <= 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        full = self.delta_z_star / self.bin_width
        n = int(math.ceil(full - 1e-12))
        ms = np.arange(1, n + 1)
        frac = np.clip(full - (ms - 1), 0.0, 1.0)
        h = np.array([self.counterfactual_counts[self.at(m)] if 0 <= self.at(m) < self.counterfactual_counts.size else 0.0 for m in ms])
        return ms, h * frac


class _Engine:
    """One estimation problem: sorted agents, geometry and cached pieces."""

    def __init__(self, frame: SortedSample, geo: Geometry, order: int, multiples: Sequence[float]):
        self.frame = frame
        self.geo = geo
        self.order = order
        self.multiples = tuple(multiples)
        g = geo
        self.left_m = np.arange(g.m_lo, -g.n_left + 1)
        self.left_counts = self.observed(self.left_m)
        self.region_m = np.arange(-g.n_left + 1, 1)
        self.region_counts = self.observed(self.region_m)
        self.shift_base = float(frame.mass_at_or_below(g.diffuse_upper, g.width))
        self.shift_ext = np.zeros(0)
        self.diffuse_counts = np.zeros(0)
        if g.n_right:
            dm = np.arange(1, g.n_right + 1)
            self.diffuse_counts = self.observed(dm)
            om = np.arange(g.n_right + 1, g.m_hi + 1)
            fit, _ = fit_poly_bins(om, self.observed(om), order, g.width, g.z_star)
            self.shift_ext = np.maximum(fit.predict(dm), 0.0)
        self.above_m = np.arange(1, g.m_hi + 1)
        self.warnings: list[str] = []

    def observed(self, m: NDArray) -> NDArray:
        hi = self.geo.right_edge(m)
        w = self.geo.width
        return self.frame.mass_at_or_below(hi, w) - self.frame.mass_at_or_below(hi - w, w)

    def relocated(self, m: NDArray, k: float) -> NDArray:
        hi = self.geo.right_edge(m)
        lo = hi - self.geo.width
        a = np.maximum(self.frame.mass_le(lo / k), self.shift_base)
        b = np.maximum(self.frame.mass_le(hi / k), self.shift_base)
        return b - a

    def first_clean(self, k: float) -> int:
        g = self.geo
        return int(math.ceil((g.diffuse_upper * k - g.z_star) / g.width - 1e-9)) + 1

    def fit(self, delta: float) -> PolyFit:
        g = self.geo
        k = (g.z_star + delta) / g.z_star
        right_m = np.arange(max(self.first_clean(k), 1), g.m_hi + 1)
        m = np.concatenate([self.left_m, right_m])
        counts = np.concatenate([self.left_counts, self.relocated(right_m, k)])
        fit, _ = fit_poly_bins(m, counts, self.order, g.width, g.z_star, self.multiples)
        return fit

    def excess(self, fit: PolyFit) -> float:
        b = float(np.sum(self.region_counts - fit.predict(self.region_m)))
        if self.geo.n_right:
            b += float(np.sum(self.diffuse_counts - self.shift_ext))
        return b

    def step(self, delta: float) -> tuple[float, float, PolyFit]:
        """Updated response, excess mass and fit at a guess."""
        fit = self.fit(delta)
        b = self.excess(fit)
        pred = np.maximum(fit.predict(self.above_m), 0.0)
        return update_delta_z(b, pred, self.geo.width), b, fit

    def gap(self, delta: float) -> float:
        try:
            new, _, _ = self.step(delta)
        except InsufficientMassError:
            # the excess cannot be placed: the guess is too small to be a fixed point
            return math.inf
        return new - delta


def bisect_fixed_point(
    gap, upper: float, tol: float, max_iter: int, guess: Optional[float] = None, n_scan: int = 12
) -> tuple[float, float, int, bool]:
    """Root of ``gap(d) = update(d) - d`` on ``[0, upper]`` by bisection.

    A positive gap means the guess is too small, the self-correcting direction
    of the update.  The bracket is the first sign change found by scanning
    ``n_scan`` evenly spaced guesses, since far-out guesses leave so few
    shifter bins that the gap can turn positive again.  ``guess``, when inside
    the bracket, is the first split point.

    Returns ``(delta, residual, evaluations, converged)``.
    """
    evals = 1
    g0 = gap(0.0)
    if g0 <= 0:
        return 0.0, g0, evals, True
    lo, g_lo = 0.0, g0
    hi = g_hi = None
    for x in np.linspace(0.0, upper, n_scan + 1)[1:]:
        g = gap(float(x))
        evals += 1
        if g <= 0:
            hi, g_hi = float(x), g
            break
        lo, g_lo = float(x), g
    if hi is None:
        return lo, g_lo, evals, False
    if guess is not None and lo < guess < hi:
        g = gap(guess)
        evals += 1
        if g > 0:
            lo, g_lo = guess, g
        else:
            hi, g_hi = guess, g
    while hi - lo > tol and evals < max_iter:
        mid = 0.5 * (lo + hi)
        g = gap(mid)
        evals += 1
        if g > 0:
            lo, g_lo = mid, g
        else:
            hi, g_hi = mid, g
    mid = 0.5 * (lo + hi)
    g_mid = gap(mid)
    evals += 1
    cands = [(abs(g_mid), mid, g_mid), (abs(g_lo), lo, g_lo), (abs(g_hi), hi, g_hi)]
    _, best, resid = min(cands, key=lambda c: c[0])
    return best, resid, evals, abs(resid) <= tol and hi - lo <= tol


def _assemble(engine: _Engine, delta: float, fit: PolyFit, excess: float, no_bunching: bool):
    """Full-grid observed and counterfactual counts with exact mass closure."""
    g = engine.geo
    frame = engine.frame
    k = (g.z_star + delta) / g.z_star
    x_min, x_max = float(frame.z[0]), float(frame.z[-1])
    top = max(x_max, x_max * k) if frame.z[-1] > g.diffuse_upper else x_max
    m_min = min(g.bin_of(x_min), g.m_lo, -g.n_left)
    m_max = max(g.bin_of(top), g.m_hi, 1)
    ms = np.arange(m_min, m_max + 1)
    obs = engine.observed(ms)
    pred = fit.predict(ms)
    pred_c = np.maximum(pred, 0.0)

    hct = obs.copy()
    left = (ms > -g.n_left) & (ms <= 0)
    above = ms >= 1
    upper_excl = g.diffuse_upper * k
    cover = np.clip((upper_excl - g.right_edge(ms - 1)) / g.width, 0.0, 1.0)
    part_above = np.where(above, pred_c * cover, 0.0)
    used = ((ms > -g.n_left) & (ms <= 0)) | (above & (cover > 0))
    if np.any(pred[used] < 0):
        engine.warnings.append("negative counterfactual predictions clamped to zero")
    reloc = np.zeros(ms.size)
    reloc[above] = engine.relocated(ms[above], k)
    region_obs = float(obs[left].sum() + (obs[(ms >= 1) & (ms <= g.n_right)].sum() if g.n_right else 0.0))

    if not no_bunching:
        target = excess + float(engine.shift_ext.sum())
        have = float(part_above.sum())
        if have > 0:
            part_above *= target / have
        hct[left] = pred_c[left]
        hct[above] = reloc[above] + part_above[above]
    else:
        # no excess: scale the predictions over the whole window to the observed mass
        part = np.where(left, pred_c, 0.0) + part_above
        have = float(part.sum())
        if have > 0:
            part *= region_obs / have
        hct[left] = part[left]
        hct[above] = reloc[above] + part[above]
    return ms, obs, hct, pred_c


def bracket_upper(g: Geometry, order: int) -> float:
    """Largest response that still leaves enough clean bins above the excluded window.

    Without shifter bins the fit would extrapolate from one side only, so the
    bracket stops where ``max(2 (p + 1), 10)`` bins remain.
    """
    keep = max(2 * (order + 1), 10)
    k_max = (g.z_star + (g.m_hi - keep) * g.width) / g.diffuse_upper
    upper = g.z_star * (k_max - 1.0)
    return upper if upper > g.width else max(g.m_hi * g.width, g.width)


def _run_engine(engine: _Engine, tol: float, max_iter: int, guess: Optional[float]) -> DensityEstimate:
    g = engine.geo
    upper = bracket_upper(g, engine.order)
    delta, resid, evals, ok = bisect_fixed_point(engine.gap, upper, tol, max_iter, guess)
    fit = engine.fit(delta)
    b = engine.excess(fit)
    no_bunch = b <= 0 or delta == 0.0
    if no_bunch:
        engine.warnings.append("no detectable bunching: excess mass is not positive")
    ms, obs, hct, pred = _assemble(engine, delta, fit, b, no_bunch)
    return DensityEstimate(
        delta_z_star=float(delta),
        excess_bunching=float(b),
        poly_coeffs=fit.currency_coeffs,
        reference_effects=dict(zip(engine.multiples, fit.ref_coef.tolist())),
        counterfactual_counts=hct,
        observed_counts=obs,
        predicted_counts=pred,
        shifter_diffuse_counts=engine.shift_ext.copy(),
        geometry=g,
        m_min=int(ms[0]),
        iterations_used=evals,
        converged=bool(ok),
        residual=float(resid),
        no_bunching=bool(no_bunch),
        fit=fit,
        warnings=list(engine.warnings),
    )


def build_engine(
    frame: SortedSample, policy: KinkPolicy, config: EstimationConfig
) -> _Engine:
    width = config.width_for(policy)
    lower, upper = default_window(policy, config, float(frame.z[0]), float(frame.z[-1]))
    geo = make_geometry(policy.z_star, policy.u1, policy.u2, width, lower, upper)
    return _Engine(frame, geo, config.poly_order_density, config.reference_multiples)


def estimate_density(
    samples: Samples | SortedSample,
    policy: KinkPolicy,
    config: Optional[EstimationConfig] = None,
    initial_guess: Optional[float] = None,
) -> DensityEstimate:
    """Self-correcting counterfactual density estimate.

    The fixed point ``update(dz) = dz`` is bracketed on ``[0, upper window]``
    and bisected to ``config.delta_z_tolerance`` (a tenth of a bin by
    default).  ``initial_guess`` only changes the first probe point.
    """
    config = config or EstimationConfig()
    frame = samples if isinstance(samples, SortedSample) else SortedSample.from_samples(samples)
    if frame.z.size == 0:
        raise InputError("no samples to estimate from")
    if not (frame.z[0] < policy.z_star < frame.z[-1]):
        raise InputError("samples must span both sides of z*")
    engine = build_engine(frame, policy, config)
    guess = initial_guess if initial_guess is not None else config.initial_guess
    est = _run_engine(engine, config.tolerance_for(policy), config.max_iterations, guess)
    for msg in est.warnings:
        warnings.warn(msg, stacklevel=2)
    return est


def density_update(
    samples: Samples, policy: KinkPolicy, config: EstimationConfig, delta_z_guess: float
) -> tuple[float, float]:
    """One relocate-fit-update pass: ``(updated response, excess mass)`` at a guess."""
    engine = build_engine(SortedSample.from_samples(samples), policy, config)
    new, b, _ = engine.step(delta_z_guess)
    return new, b


def parallel_shift_baseline(
    samples: Samples | SortedSample,
    policy: KinkPolicy,
    config: Optional[EstimationConfig] = None,
    max_rounds: int = 200,
) -> DensityEstimate:
    """Counterfactual from a uniform upward shift of the observed density above the kink.

    Counts above the diffuse window are scaled by ``1 + B / (mass above)``,
    where the mass runs over all agents beyond the window,
    bins in the window get their own dummies, and ``B`` (the sum of the dummy
    coefficients) is iterated to a fixed point.  The response is then read off
    the fitted polynomial above the threshold exactly as in the relocation
    estimator so the two are comparable.
    """
    config = config or EstimationConfig()
    frame = samples if isinstance(samples, SortedSample) else SortedSample.from_samples(samples)
    engine = build_engine(frame, policy, config)
    g = engine.geo
    ms = np.arange(g.m_lo, g.m_hi + 1)
    counts = engine.observed(ms)
    region = (ms > -g.n_left) & (ms <= g.n_right)
    above = ms > g.n_right
    dummies = np.zeros((ms.size, int(region.sum())))
    dummies[np.flatnonzero(region), np.arange(int(region.sum()))] = 1.0
    # The scaling mass runs over every agent beyond the diffuse window, not
    # just the fitted bins.
    mass_above = frame.total - float(frame.mass_at_or_below(g.right_edge(g.n_right), g.width))
    b = 0.0
    rounds = 0
    converged = False
    for rounds in range(1, max_rounds + 1):
        lhs = counts * (1.0 + above * (b / mass_above if mass_above > 0 else 0.0))
        fit, gam = fit_poly_bins(ms, lhs, config.poly_order_density, g.width, g.z_star,
                                 config.reference_multiples, extra=dummies)
        b_new = float(gam.sum())
        if abs(b_new - b) <= 1e-9 * max(1.0, abs(b_new)):
            b = b_new
            converged = True
            break
        b = b_new
    pred = np.maximum(fit.predict(engine.above_m), 0.0)
    warn = []
    try:
        delta = update_delta_z(b, pred, g.width)
    except InsufficientMassError as exc:
        delta, converged = float(g.m_hi * g.width), False
        warn.append(str(exc))
    no_bunch = b <= 0
    all_m = np.arange(min(g.bin_of(float(frame.z[0])), g.m_lo), max(g.bin_of(float(frame.z[-1])), g.m_hi) + 1)
    obs = engine.observed(all_m)
    full_pred = np.maximum(fit.predict(all_m), 0.0)
    hct = obs * (1.0 + (all_m > g.n_right) * (b / mass_above if mass_above > 0 else 0.0))
    reg = (all_m > -g.n_left) & (all_m <= g.n_right)
    hct[reg] = full_pred[reg]
    return DensityEstimate(
        delta_z_star=float(delta),
        excess_bunching=float(b),
        poly_coeffs=fit.currency_coeffs,
        reference_effects=dict(zip(config.reference_multiples, fit.ref_coef.tolist())),
        counterfactual_counts=hct,
        observed_counts=obs,
        predicted_counts=full_pred,
        shifter_diffuse_counts=np.zeros(0),
        geometry=g,
        m_min=int(all_m[0]),
        iterations_used=rounds,
        converged=converged,
        residual=0.0,
        no_bunching=bool(no_bunch),
        method="parallel_shift",
        fit=fit,
        warnings=warn,
    )


def excess_mass_profile(
    samples: Samples, policy: KinkPolicy, config: Optional[EstimationConfig] = None, half_width: int = 5
) -> tuple[NDArray, NDArray]:
    """Per-bin observed minus smooth fit near the threshold, to guide the diffuse widths.

    The polynomial is fitted on observed counts with ``half_width`` bins either
    side of the threshold left out; nothing is relocated.
    """
    config = config or EstimationConfig()
    frame = SortedSample.from_samples(samples)
    engine = build_engine(frame, policy, config)
    g = engine.geo
    ms = np.arange(g.m_lo, g.m_hi + 1)
    counts = engine.observed(ms)
    keep = (ms <= -half_width) | (ms > half_width)
    fit, _ = fit_poly_bins(ms[keep], counts[keep], config.poly_order_density, g.width, g.z_star)
    near = ~keep
    return g.center(ms[near]), counts[near] - fit.predict(ms[near])
