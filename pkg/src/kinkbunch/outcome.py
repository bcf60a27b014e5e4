"""Counterfactual outcomes and the sufficient statistics behind them.

Shifters' outcomes are carried back to their counterfactual positions (the
auxiliary outcome distribution).  One weighted regression over always-taker
bins and relocated shifter bins then separates a smooth counterfactual curve
from a level and slope break at the threshold, and the two breaks are solved
for the direct effect ``mu`` and the payment effect ``lambda``.

Regressors are within-bin agent means of ``(z_ct - z*)**k`` rather than powers
of the bin centre, so a counterfactual curve that is polynomial in position is
recovered exactly whatever the spread of agents inside each bin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from .density import DensityEstimate, SortedSample, calibrate_elasticity, reference_columns, snap_widths
from .model_core import (
    EDGE_SLACK,
    EstimationConfig,
    IdentificationError,
    InputError,
    KinkPolicy,
    RankDeficientError,
    Samples,
    level_share,
)


@dataclass(frozen=True)
class BinnedOutcome:
    """Weighted per-bin outcome summaries on a threshold-aligned grid.

    ``moments[:, k]`` is the count-weighted mean of ``(z - z*)**k`` over the
    agents in the bin, so column 0 is 1 wherever the bin is populated.
    """

    offsets: NDArray[np.int64]
    counts: NDArray[np.float64]
    mean_y: NDArray[np.float64]
    moments: NDArray[np.float64]
    z_star: float
    width: float

    @property
    def centers(self) -> NDArray[np.float64]:
        return self.z_star + (self.offsets - 0.5) * self.width

    @property
    def populated(self) -> NDArray[np.bool_]:
        return self.counts > 0


def bin_outcomes(
    z: NDArray, y: NDArray, w: NDArray, z_star: float, width: float, order: int,
    m_range: Optional[tuple[int, int]] = None,
) -> BinnedOutcome:
    """Summarise agents at sorted positions ``z`` into bins ``(z* + (m-1) w, z* + m w]``.

    ``m_range = (lo, hi)`` restricts the output to bins ``lo..hi``; by default
    every bin from the lowest to the highest agent is returned.
    """
    z = np.asarray(z, dtype=float)
    if m_range is None:
        if z.size == 0:
            return BinnedOutcome(np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0),
                                 np.zeros((0, order + 1)), z_star, width)
        m_range = (int(math.ceil((z[0] - z_star) / width - 1e-9)),
                   int(math.ceil((z[-1] - z_star) / width - 1e-9)))
    lo, hi = m_range
    offsets = np.arange(lo, hi + 1)
    n = offsets.size
    edges = z_star + np.arange(lo - 1, hi + 1) * width
    cut = np.searchsorted(z, edges + EDGE_SLACK * width, side="right")
    a, b = int(cut[0]), int(cut[-1])
    zs, ys, ws = z[a:b], y[a:b], w[a:b]
    starts = cut[:-1] - a
    nonempty = cut[1:] > cut[:-1]
    counts = np.zeros(n)
    sums_y = np.zeros(n)
    raw = np.zeros((n, order + 1))
    if zs.size:
        st = starts[nonempty]
        counts[nonempty] = np.add.reduceat(ws, st)
        sums_y[nonempty] = np.add.reduceat(ws * ys, st)
        x = zs - z_star
        xp = ws.copy()
        for k in range(order + 1):
            raw[nonempty, k] = np.add.reduceat(xp, st)
            xp = xp * x
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_y = sums_y / counts
        mom = raw / counts[:, None]
    empty = counts <= 0
    mean_y[empty] = np.nan
    mom[empty] = np.nan
    return BinnedOutcome(offsets, counts, mean_y, mom, z_star, width)


def _frame(samples: Samples | SortedSample) -> SortedSample:
    return samples if isinstance(samples, SortedSample) else SortedSample.from_samples(samples)


def auxiliary_outcome(
    samples: Samples | SortedSample,
    delta_z_star: float,
    policy: KinkPolicy,
    config: Optional[EstimationConfig] = None,
) -> BinnedOutcome:
    """Shifter outcomes re-binned at their counterfactual positions.

    Every agent above ``z* + u2`` is moved to ``z (z* + dz) / z*`` with its
    outcome unchanged; only those agents are returned.
    """
    if delta_z_star < 0:
        raise InputError("delta_z_star must be nonnegative")
    config = config or EstimationConfig()
    frame = _frame(samples)
    k = (policy.z_star + delta_z_star) / policy.z_star
    slack = EDGE_SLACK * config.width_for(policy)
    start = int(np.searchsorted(frame.z, policy.z_star + policy.u2 + slack, side="right"))
    return bin_outcomes(frame.z[start:] * k, frame.y[start:], frame.w[start:],
                        policy.z_star, config.width_for(policy), config.poly_order_outcome)


@dataclass
class OutcomeEstimate:
    """Counterfactual outcome curve with the level and slope breaks at the threshold.

    Per-bin arrays share the grid ``offsets``.  ``auxiliary_counts`` is the
    weight of relocated shifters in each bin (zero where there are none) and
    ``observed_outcomes`` are plain means of observed ``y`` by observed bin.
    """

    poly_coeffs: NDArray[np.float64]
    level_break: float
    slope_break: float
    reference_effects: dict
    offsets: NDArray[np.int64]
    counterfactual_outcomes: NDArray[np.float64]
    auxiliary_outcomes: NDArray[np.float64]
    auxiliary_counts: NDArray[np.float64]
    observed_outcomes: NDArray[np.float64]
    observed_counts: NDArray[np.float64]
    shifter_diffuse_outcomes: NDArray[np.float64]
    z_star: float
    bin_width: float
    delta_z_star: float
    window: tuple[float, float]
    fitted_bins: int = 0
    weighted_rss: float = 0.0
    warnings: list = field(default_factory=list)

    def at(self, m: int) -> int:
        return int(m - self.offsets[0])

    @property
    def bin_centers(self) -> NDArray[np.float64]:
        return self.z_star + (self.offsets - 0.5) * self.bin_width

    def predict(self, z_ct: NDArray) -> NDArray:
        """Counterfactual outcome at positions ``z_ct`` (reference terms excluded)."""
        x = np.asarray(z_ct, dtype=float) - self.z_star
        return np.polynomial.polynomial.polyval(x, self.poly_coeffs)


def _design_matrix(moments: NDArray, centers: NDArray, shifter: NDArray, scale: float,
                   multiples, width: float) -> NDArray:
    order = moments.shape[1] - 1
    k = np.arange(order + 1)
    poly = moments / scale ** k
    side = shifter.astype(float)
    ref = reference_columns(centers, multiples, width)
    return np.hstack([poly, ref, side[:, None], (side * moments[:, 1] / scale)[:, None]])


def fit_counterfactual_outcome(
    always: BinnedOutcome,
    auxiliary: BinnedOutcome,
    policy: KinkPolicy,
    config: EstimationConfig,
    delta_z_star: float,
    window: Optional[tuple[float, float]] = None,
) -> tuple[NDArray, float, float, NDArray, int, float]:
    """Count-weighted regression of bin outcomes on moments, breaks and reference terms.

    ``always`` holds always-taker bins and ``auxiliary`` relocated shifter
    bins.  Bins inside the excluded window ``[z* - u1, (z* + u2)(z* + dz)/z*]``
    (diffuse widths snapped to whole bins, the threshold bin always excluded) or outside ``window`` are dropped, as are empty bins.

    Returns
    -------
    coeffs : ndarray
        Polynomial coefficients on powers of ``z_ct - z*`` in currency units.
    level_break, slope_break : float
        Jump in level at ``z*`` and change in slope above it.
    ref_coef : ndarray
        Reference-point effects.
    n_bins : int
        Bins used.
    rss : float
        Weighted residual sum of squares.
    """
    q = config.poly_order_outcome
    w = always.width
    k = (policy.z_star + delta_z_star) / policy.z_star
    lower, upper = window if window is not None else (-math.inf, math.inf)
    n_left, n_right = snap_widths(policy.u1, policy.u2, w)
    excl_hi = (policy.z_star + n_right * w) * k
    a_hi = always.z_star + always.offsets * w
    keep_a = always.populated & (always.offsets <= -n_left) & (a_hi - w >= lower - 1e-9)
    s_lo = auxiliary.z_star + (auxiliary.offsets - 1) * w
    keep_s = auxiliary.populated & (s_lo >= excl_hi - w) & (s_lo + w <= upper + 1e-9)
    if not keep_a.any() or not keep_s.any():
        raise InputError("counterfactual outcome fit needs bins on both sides of the threshold")
    moments = np.vstack([always.moments[keep_a], auxiliary.moments[keep_s]])
    counts = np.concatenate([always.counts[keep_a], auxiliary.counts[keep_s]])
    yv = np.concatenate([always.mean_y[keep_a], auxiliary.mean_y[keep_s]])
    centers = np.concatenate([always.centers[keep_a], auxiliary.centers[keep_s]])
    shifter = np.concatenate([np.zeros(keep_a.sum(), bool), np.ones(keep_s.sum(), bool)])
    scale = max(w, float(np.max(np.abs(moments[:, 1])))) if q >= 1 else 1.0
    X = _design_matrix(moments, centers, shifter, scale, config.reference_multiples, w)
    if X.shape[0] < X.shape[1]:
        raise RankDeficientError(
            f"{X.shape[0]} outcome bins cannot identify {X.shape[1]} coefficients (order {q})"
        )
    sw = np.sqrt(counts)
    sol, _, rank, _ = np.linalg.lstsq(X * sw[:, None], yv * sw, rcond=None)
    if rank < X.shape[1]:
        raise RankDeficientError(
            f"outcome design has rank {rank} < {X.shape[1]} columns (order {q}, {X.shape[0]} bins)"
        )
    resid = yv - X @ sol
    coeffs = sol[: q + 1] / scale ** np.arange(q + 1)
    n_ref = len(config.reference_multiples)
    ref = sol[q + 1: q + 1 + n_ref]
    level = float(sol[q + 1 + n_ref])
    slope = float(sol[q + 2 + n_ref] / scale)
    return coeffs, level, slope, ref, int(X.shape[0]), float(np.sum(counts * resid ** 2))


def shifter_outcome_diffuse(
    observed: BinnedOutcome, policy: KinkPolicy, config: EstimationConfig,
    window_upper: Optional[float] = None,
) -> NDArray[np.float64]:
    """Extrapolate observed shifter outcomes into the diffuse bins ``(z*, z* + u2]``.

    Empty when ``u2`` is zero.  The fit uses populated observed bins wholly
    above ``z* + u2`` (and below ``window_upper``) and is evaluated at the
    diffuse bin centres.
    """
    w = observed.width
    _, n_right = snap_widths(policy.u1, policy.u2, w)
    if n_right == 0:
        return np.zeros(0)
    q = config.poly_order_outcome
    upper = window_upper if window_upper is not None else math.inf
    hi_edge = observed.z_star + observed.offsets * w
    use = observed.populated & (observed.offsets > n_right) & (hi_edge <= upper + 1e-9)
    if use.sum() < q + 1:
        raise RankDeficientError(f"{int(use.sum())} shifter bins cannot identify order {q}")
    mom = observed.moments[use]
    scale = max(w, float(np.max(np.abs(mom[:, 1])))) if q >= 1 else 1.0
    X = mom / scale ** np.arange(q + 1)
    sw = np.sqrt(observed.counts[use])
    sol, _, rank, _ = np.linalg.lstsq(X * sw[:, None], observed.mean_y[use] * sw, rcond=None)
    if rank < q + 1:
        raise RankDeficientError(f"shifter outcome design has rank {rank} < {q + 1}")
    x = (np.arange(1, n_right + 1) - 0.5) * w
    return np.polynomial.polynomial.polyval(x, sol / scale ** np.arange(q + 1))


def outcome_window(policy: KinkPolicy, config: EstimationConfig) -> tuple[float, float]:
    """Counterfactual-position window for the outcome fit, defaulting to the density window."""
    lo = config.outcome_lower if config.outcome_lower is not None else (
        config.fit_lower if config.fit_lower is not None else 0.5 * policy.z_star)
    hi = config.outcome_upper if config.outcome_upper is not None else (
        config.fit_upper if config.fit_upper is not None else 2.0 * policy.z_star)
    if not lo < policy.z_star < hi:
        raise InputError(f"outcome window ({lo}, {hi}) must straddle z* = {policy.z_star}")
    return lo, hi


def estimate_outcome(
    samples: Samples | SortedSample,
    density: DensityEstimate,
    policy: KinkPolicy,
    config: Optional[EstimationConfig] = None,
) -> OutcomeEstimate:
    """Fit the counterfactual outcome curve given a converged density estimate.

    ``counterfactual_outcomes`` covers the density grid: populated always-taker
    and shifter bins are evaluated at their own agent moments, every other bin
    at its centre.
    """
    config = config or EstimationConfig()
    frame = _frame(samples)
    q = config.poly_order_outcome
    dz = density.delta_z_star
    w = density.bin_width
    z_star = policy.z_star
    window = outcome_window(policy, config)

    split = int(np.searchsorted(frame.z, z_star + policy.u2 + EDGE_SLACK * w, side="right"))
    n_left, n_right = snap_widths(policy.u1, policy.u2, w)
    m_lo = min(int(math.ceil((window[0] - z_star) / w - 1e-9)), -n_left)
    m_hi = max(int(math.ceil((window[1] - z_star) / w - 1e-9)), n_right + q + 2)
    observed = bin_outcomes(frame.z, frame.y, frame.w, z_star, w, q, (m_lo, m_hi))
    k = (z_star + dz) / z_star
    aux = bin_outcomes(frame.z[split:] * k, frame.y[split:], frame.w[split:], z_star, w, q, (1, m_hi))
    coeffs, a0, a1, ref, n_bins, rss = fit_counterfactual_outcome(observed, aux, policy, config, dz, window)

    offsets = density.offsets()
    lo = int(min(offsets[0], observed.offsets[0] if observed.offsets.size else offsets[0],
                 aux.offsets[0] if aux.offsets.size else offsets[0]))
    hi = int(max(offsets[-1], observed.offsets[-1] if observed.offsets.size else offsets[-1],
                 aux.offsets[-1] if aux.offsets.size else offsets[-1]))
    grid = np.arange(lo, hi + 1)
    n = grid.size

    def spread(b: BinnedOutcome, arr: NDArray, fill: float) -> NDArray:
        out = np.full(n, fill)
        if b.offsets.size:
            out[b.offsets - lo] = arr
        return out

    centers = z_star + (grid - 0.5) * w
    x = centers - z_star
    # evaluate the curve on agent moments where agents sit at their counterfactual positions
    mom = np.vander(x, q + 1, increasing=True)
    obs_mom = np.full((n, q + 1), np.nan)
    aux_mom = np.full((n, q + 1), np.nan)
    if observed.offsets.size:
        obs_mom[observed.offsets - lo] = observed.moments
    if aux.offsets.size:
        aux_mom[aux.offsets - lo] = aux.moments
    always_side = grid <= -density.geometry.n_left
    use_obs = always_side & ~np.isnan(obs_mom[:, 0])
    use_aux = (grid >= 1) & ~np.isnan(aux_mom[:, 0])
    mom[use_obs] = obs_mom[use_obs]
    mom[use_aux] = aux_mom[use_aux]
    y_ct = mom @ coeffs
    if ref.size:
        y_ct = y_ct + reference_columns(centers, config.reference_multiples, w) @ ref

    diffuse = shifter_outcome_diffuse(observed, policy, config, window[1])
    return OutcomeEstimate(
        poly_coeffs=coeffs,
        level_break=a0,
        slope_break=a1,
        reference_effects=dict(zip(config.reference_multiples, ref.tolist())),
        offsets=grid,
        counterfactual_outcomes=y_ct,
        auxiliary_outcomes=spread(aux, aux.mean_y, np.nan),
        auxiliary_counts=spread(aux, aux.counts, 0.0),
        observed_outcomes=spread(observed, observed.mean_y, np.nan),
        observed_counts=spread(observed, observed.counts, 0.0),
        shifter_diffuse_outcomes=diffuse,
        z_star=z_star,
        bin_width=w,
        delta_z_star=dz,
        window=window,
        fitted_bins=n_bins,
        weighted_rss=rss,
    )


@dataclass(frozen=True)
class Calibration:
    """Sufficient statistics recovered from the breaks.

    ``mu`` is outcome units per unit of log position, ``lam`` outcome units
    per unit of payment (entering with a minus sign) and ``e`` the elasticity,
    ``None`` when the top marginal rate is 100%.
    """

    mu: float
    lam: float
    e: Optional[float]
    convention: str


def break_coefficients(delta_z_star: float, policy: KinkPolicy, convention: str) -> tuple[float, float, float]:
    """``(share, level_lambda, slope_lambda)`` so that ``a0 = mu share + lam level_lambda``
    and ``a1 = lam slope_lambda``."""
    r = policy.z_star / (policy.z_star + delta_z_star)
    top = policy.t + policy.delta_t
    return float(level_share(r, convention)), -top * policy.z_star * (r - 1.0), -(top * r - policy.t)


def breaks_from_parameters(
    mu: float, lam: float, delta_z_star: float, policy: KinkPolicy, convention: str = "log_share"
) -> tuple[float, float]:
    """Level and slope breaks implied by ``(mu, lam)``."""
    s, cl, cs = break_coefficients(delta_z_star, policy, convention)
    return mu * s + lam * cl, lam * cs


def calibrate_mu_lambda(
    a0: float, a1: float, delta_z_star: float, policy: KinkPolicy, convention: str = "log_share"
) -> Calibration:
    """Solve the level and slope break equations for ``(mu, lam)``.

    Raises
    ------
    IdentificationError
        If ``delta_z_star`` is zero (``mu`` unidentified) or the slope
        coefficient vanishes (``lam`` unidentified).
    """
    if delta_z_star <= 0:
        raise IdentificationError("mu unidentified: the marginal buncher's response is zero")
    s, cl, cs = break_coefficients(delta_z_star, policy, convention)
    if abs(cs) < 1e-12:
        raise IdentificationError("lambda unidentified: the slope-break coefficient vanishes")
    lam = a1 / cs
    mu = (a0 - lam * cl) / s
    e = None
    if policy.t + policy.delta_t < 1.0 and policy.delta_t > 0:
        e = calibrate_elasticity(delta_z_star, policy)
    return Calibration(float(mu), float(lam), e, convention)
