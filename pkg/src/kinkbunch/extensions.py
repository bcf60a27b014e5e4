"""Variants of the core estimator for frictions, heterogeneity, misreporting
and the high-rate counterfactual.

Stayers
    A share ``alpha`` of agents above the threshold ignores the kink.  Observed
    counts above the threshold mix compressed shifter mass with unmoved mass;
    ``alpha`` is chosen by least squares over a grid, with the response solved
    as a fixed point at each grid value.
Log transform
    In ``r = ln z`` every shifter moves by the same amount, so a linear
    counterfactual density only changes its intercept above the threshold
    and the average shift is the intercept change over the slope.
Relabelling
    Agents may report less than they really spend at a convex cost; the
    forward model and the adjusted level break are provided.
Bunching up
    With the high-rate schedule as the counterfactual, agents below the
    threshold move up.  The core estimator runs unchanged on mirrored
    positions ``-z``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from .density import (
    DensityEstimate,
    Geometry,
    SortedSample,
    bisect_fixed_point,
    bracket_upper,
    build_engine,
    calibrate_elasticity,
    estimate_density,
    make_geometry,
    default_window,
)
from .effects import te_bunchers_diffuse, te_bunchers_sharp, te_shifters, bunching_mode
from .model_core import (
    BunchingError,
    EstimationConfig,
    IdentificationError,
    InputError,
    InsufficientMassError,
    KinkPolicy,
    RankDeficientError,
    Samples,
    level_share,
    tax_amount,
)
from .outcome import (
    Calibration,
    OutcomeEstimate,
    bin_outcomes,
    calibrate_mu_lambda,
    estimate_outcome,
    outcome_window,
)


def _frame(samples: Samples | SortedSample) -> SortedSample:
    return samples if isinstance(samples, SortedSample) else SortedSample.from_samples(samples)


# ---------------------------------------------------------------------------
# stayers


def _integral_rows(a: NDArray, b: NDArray, order: int, scale: float) -> NDArray:
    """Rows of ``int_a^b (v / scale)**j dv`` for ``j = 0..order``."""
    j = np.arange(order + 1)
    a = np.asarray(a, dtype=float)[:, None] / scale
    b = np.asarray(b, dtype=float)[:, None] / scale
    return scale * (b ** (j + 1) - a ** (j + 1)) / (j + 1)


def _antiderivative_root(coef: NDArray, scale: float, target: float, v_max: float) -> float:
    """Smallest ``v`` in ``(0, v_max]`` with ``int_0^v P = target``."""
    j = np.arange(coef.size)
    anti = np.concatenate(([0.0], coef * scale / (j + 1)))  # in powers of v / scale
    poly = np.polynomial.Polynomial(anti)
    hi = v_max / scale
    if poly(hi) < target:
        raise InsufficientMassError(
            f"excess mass {target:.6g} exceeds counterfactual mass {poly(hi):.6g} above the threshold"
        )
    roots = (poly - target).roots()
    real = np.sort(roots[(np.abs(roots.imag) < 1e-9) & (roots.real > 0) & (roots.real <= hi + 1e-12)].real)
    # the first upward crossing is the response
    for x in real:
        if poly.deriv()(x) >= 0:
            return float(x * scale)
    return float(real[0] * scale) if real.size else float(hi * scale)


class _StayerModel:
    """Observed counts as a function of ``(alpha, response)`` for one sample.

    The counterfactual density is a polynomial ``P`` in ``v = (z - z*) / w``;
    a bin's counterfactual count is the integral of ``P`` over it.
    """

    def __init__(self, engine, order: int):
        self.engine = engine
        self.geo: Geometry = engine.geo
        self.order = order
        g = self.geo
        self.m_all = np.arange(g.m_lo, g.m_hi + 1)
        self.obs = engine.observed(self.m_all)
        self.excl = (self.m_all > -g.n_left) & (self.m_all <= g.n_right)
        self.scale = float(max(abs(g.m_lo), abs(g.m_hi), 1))

    def design(self, alpha: float, delta: float) -> NDArray:
        g = self.geo
        k = (g.z_star + delta) / g.z_star
        m = self.m_all.astype(float)
        base = _integral_rows(m - 1, m, self.order, self.scale)
        above = self.m_all >= 1
        lo = (k * (g.z_star + (m - 1) * g.width) - g.z_star) / g.width
        hi = (k * (g.z_star + m * g.width) - g.z_star) / g.width
        moved = _integral_rows(lo, hi, self.order, self.scale)
        rows = base.copy()
        rows[above] = (1 - alpha) * moved[above] + alpha * base[above]
        return rows

    def fit(self, alpha: float, delta: float) -> tuple[NDArray, NDArray, float]:
        X = self.design(alpha, delta)
        use = ~self.excl
        coef, _, rank, _ = np.linalg.lstsq(X[use], self.obs[use], rcond=None)
        if rank < X.shape[1]:
            raise RankDeficientError(f"stayer design has rank {rank} < {X.shape[1]}")
        pred = X @ coef
        b = float(np.sum(self.obs[self.excl] - pred[self.excl]))
        return coef, pred, b

    def update(self, alpha: float, delta: float) -> tuple[float, NDArray, NDArray, float]:
        coef, pred, b = self.fit(alpha, delta)
        if b <= 0 or alpha >= 1:
            return 0.0, coef, pred, b
        v_max = float(self.geo.m_hi)
        v = _antiderivative_root(coef, self.scale, b / (1 - alpha), v_max)
        return v * self.geo.width, coef, pred, b

    def solve(self, alpha: float, tol: float, max_iter: int) -> dict:
        def gap(d: float) -> float:
            try:
                return self.update(alpha, d)[0] - d
            except InsufficientMassError:
                return math.inf

        upper = bracket_upper(self.geo, self.order)
        delta, resid, evals, ok = bisect_fixed_point(gap, upper, tol, max_iter)
        try:
            _, coef, pred, b = self.update(alpha, delta)
        except InsufficientMassError:
            # no response places the excess at this share: infeasible grid point
            return {"alpha": alpha, "delta": delta, "coef": None, "pred": None, "excess": math.nan,
                    "mse": math.inf, "converged": False, "evals": evals}
        use = ~self.excl
        mse = float(np.mean((self.obs[use] - pred[use]) ** 2))
        return {"alpha": alpha, "delta": delta, "coef": coef, "pred": pred, "excess": b,
                "mse": mse, "converged": ok, "evals": evals}


@dataclass
class StayerEstimate:
    """Share of unresponsive agents and the response of the rest.

    ``beta`` is the level gap of stayers' outcomes relative to the
    counterfactual curve; ``calibration`` uses the shifter breaks only.
    """

    alpha: float
    beta: float
    delta_z_star: float
    mse: float
    mse_alpha0: float
    excess_bunching: float
    converged: bool
    alpha_grid: NDArray[np.float64]
    mse_profile: NDArray[np.float64]
    poly_coeffs: NDArray[np.float64]
    counterfactual_counts: NDArray[np.float64]
    offsets: NDArray[np.int64]
    level_break: float = math.nan
    slope_break: float = math.nan
    calibration: Optional[Calibration] = None
    weakly_identified: bool = False
    warnings: list = field(default_factory=list)


def _stayer_outcome(frame: SortedSample, model: _StayerModel, best: dict, policy: KinkPolicy,
                    config: EstimationConfig) -> tuple[float, float, float]:
    """Mixture regression for ``(a0, a1, beta)`` on observed bin means.

    Above the threshold a bin's mean outcome averages shifters, at their
    counterfactual positions with the breaks added, and stayers, at their own
    positions with the level shift ``beta``; the mixing weights come from
    the fitted density.
    """
    g = model.geo
    q = config.poly_order_outcome
    alpha, delta = best["alpha"], best["delta"]
    k = (g.z_star + delta) / g.z_star
    lo_w, hi_w = outcome_window(policy, config)
    m_lo = int(math.ceil((lo_w - g.z_star) / g.width - 1e-9)) + 1
    m_hi = int(math.floor((hi_w / k - g.z_star) / g.width + 1e-9))
    ob = bin_outcomes(frame.z, frame.y, frame.w, g.z_star, g.width, q, (m_lo, m_hi))
    m = ob.offsets.astype(float)
    base = _integral_rows(m - 1, m, model.order, model.scale) @ best["coef"]
    lo = (k * (g.z_star + (m - 1) * g.width) - g.z_star) / g.width
    hi = (k * (g.z_star + m * g.width) - g.z_star) / g.width
    moved = _integral_rows(lo, hi, model.order, model.scale) @ best["coef"]
    above = ob.offsets >= 1
    left = ob.offsets <= -g.n_left
    right = ob.offsets > g.n_right
    use = ob.populated & (left | right)
    sh = np.where(above, (1 - alpha) * moved, 0.0)
    st = np.where(above, alpha * base, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        omega = np.where(above, sh / (sh + st), 0.0)
    centers = g.center(ob.offsets) - g.z_star
    x_sh = k * (centers + g.z_star) - g.z_star
    j = np.arange(q + 1)
    scale = max(g.width, float(np.max(np.abs(x_sh[use])))) if use.any() else g.width
    left_poly = np.nan_to_num(ob.moments) / scale ** j
    mix_poly = omega[:, None] * (x_sh[:, None] / scale) ** j + (1 - omega)[:, None] * (centers[:, None] / scale) ** j
    poly = np.where(above[:, None], mix_poly, left_poly)
    X = np.hstack([poly, omega[:, None], (omega * x_sh / scale)[:, None], ((1 - omega) * above)[:, None]])
    sw = np.sqrt(ob.counts[use])
    sol, _, rank, _ = np.linalg.lstsq(X[use] * sw[:, None], ob.mean_y[use] * sw, rcond=None)
    if rank < X.shape[1]:
        raise RankDeficientError(f"stayer outcome design has rank {rank} < {X.shape[1]}")
    return float(sol[q + 1]), float(sol[q + 2] / scale), float(sol[q + 3])


def estimate_with_stayers(
    samples: Samples | SortedSample,
    policy: KinkPolicy,
    config: Optional[EstimationConfig] = None,
    alpha_grid: Optional[Sequence[float]] = None,
    refine: bool = True,
    flat_tolerance: float = 0.01,
) -> StayerEstimate:
    """Joint estimate of the stayer share and the marginal buncher's response.

    For every ``alpha`` the response is solved as a fixed point and the mean
    squared error of the predicted observed counts is recorded.  The default
    grid runs from 0 to 0.95 in steps of 0.05 and is then refined in steps
    of 0.01 around the best point (``refine=False`` keeps the given grid).
    A profile whose spread is within ``flat_tolerance`` of its minimum gets a
    weak-identification warning.
    """
    config = config or EstimationConfig()
    frame = _frame(samples)
    engine = build_engine(frame, policy, config)
    model = _StayerModel(engine, config.poly_order_density)
    tol, max_iter = config.tolerance_for(policy), config.max_iterations
    grid = np.asarray(alpha_grid if alpha_grid is not None else np.round(np.arange(0.0, 0.951, 0.05), 10), dtype=float)
    if np.any(grid < 0) or np.any(grid >= 1):
        raise InputError("alpha grid must lie in [0, 1)")
    if 0.0 not in grid:
        grid = np.concatenate(([0.0], grid))
    fits = {float(a): model.solve(float(a), tol, max_iter) for a in grid}
    if refine:
        best_a = min(fits, key=lambda a: fits[a]["mse"])
        fine = np.round(np.arange(best_a - 0.05, best_a + 0.0501, 0.01), 10)
        for a in fine:
            if 0 <= a < 1 and float(a) not in fits:
                fits[float(a)] = model.solve(float(a), tol, max_iter)
    alphas = np.array(sorted(fits))
    mses = np.array([fits[a]["mse"] for a in alphas])
    best = fits[float(alphas[int(np.argmin(mses))])]
    notes = []
    spread = (mses.max() - mses.min()) / mses.min() if mses.min() > 0 else math.inf
    weak = spread <= flat_tolerance
    if weak:
        notes.append(f"alpha weakly identified: mse varies by {spread:.2%} across the grid")
    if best["delta"] <= 0 or best["excess"] <= 0:
        notes.append("no detectable kink: excess mass is not positive")
    a0 = a1 = beta = math.nan
    cal = None
    if best["delta"] > 0:
        try:
            a0, a1, beta = _stayer_outcome(frame, model, best, policy, config)
            cal = calibrate_mu_lambda(a0, a1, best["delta"], policy, config.outcome_level_convention)
        except BunchingError as exc:
            notes.append(str(exc))
    for msg in notes:
        warnings.warn(msg, stacklevel=2)
    return StayerEstimate(
        alpha=float(best["alpha"]),
        beta=beta,
        delta_z_star=float(best["delta"]),
        mse=float(best["mse"]),
        mse_alpha0=float(fits[0.0]["mse"]),
        excess_bunching=float(best["excess"]),
        converged=bool(best["converged"]),
        alpha_grid=alphas,
        mse_profile=mses,
        poly_coeffs=best["coef"],
        counterfactual_counts=_integral_rows(model.m_all - 1.0, model.m_all.astype(float), model.order, model.scale) @ best["coef"],
        offsets=model.m_all,
        level_break=a0,
        slope_break=a1,
        calibration=cal,
        weakly_identified=weak,
        warnings=notes,
    )


# ---------------------------------------------------------------------------
# log transform


@dataclass
class LogTransformEstimate:
    """Average shift in log position recovered from a linear log-density.

    ``log_shift`` is the intercept change above the threshold divided by the
    slope; ``log_shift_from_bunching`` inverts the excess mass instead and is
    only exact for a homogeneous response.
    """

    log_shift: float
    delta_z_star: float
    elasticity: Optional[float]
    log_shift_from_bunching: float
    excess_bunching: float
    intercept: float
    slope: float
    intercept_shift: float
    outcome_slope: float
    outcome_shift: float
    te_shifter: float
    linearity_deviation: float
    linear: bool
    bin_width: float
    warnings: list = field(default_factory=list)


def log_transform_estimate(
    samples: Samples | SortedSample,
    policy: KinkPolicy,
    config: Optional[EstimationConfig] = None,
    bin_width: Optional[float] = None,
    window: Optional[tuple[float, float]] = None,
    linearity_threshold: float = 0.15,
) -> LogTransformEstimate:
    """Heterogeneity-robust response and shifter effect in ``r = ln z``.

    Parameters
    ----------
    bin_width : float, optional
        Width in log units; defaults to the currency width divided by ``z*``.
    window : (float, float), optional
        Currency range for the fit; defaults to the density fit window.
    linearity_threshold : float
        Largest tolerated deviation of binned counts from the fitted lines,
        relative to the mean fitted count, before the result is flagged.
    """
    config = config or EstimationConfig()
    frame = _frame(samples)
    if frame.z[0] <= 0:
        raise InputError("log transform needs strictly positive positions")
    wr = bin_width if bin_width is not None else config.width_for(policy) / policy.z_star
    lo_z, hi_z = window if window is not None else default_window(policy, config, float(frame.z[0]), float(frame.z[-1]))
    r_star = math.log(policy.z_star)
    n_left = max(1, int(math.ceil(-math.log1p(-policy.u1 / policy.z_star) / wr - 1e-9))) if policy.u1 else 1
    n_right = int(math.ceil(math.log1p(policy.u2 / policy.z_star) / wr - 1e-9)) if policy.u2 else 0
    m_lo = int(math.ceil((math.log(lo_z) - r_star) / wr - 1e-9)) + 1
    m_hi = int(math.floor((math.log(hi_z) - r_star) / wr + 1e-9))
    r = np.log(frame.z)
    ob = bin_outcomes(r, frame.y, frame.w, r_star, wr, 1, (m_lo, m_hi))
    m = ob.offsets
    v = (m - 0.5) * wr
    above = (m > n_right).astype(float)
    fit_rows = (m <= -n_left) | (m > n_right)
    X = np.column_stack([np.ones(m.size), v, above])
    sol, _, rank, _ = np.linalg.lstsq(X[fit_rows], ob.counts[fit_rows], rcond=None)
    if rank < 3:
        raise RankDeficientError("log-density design is rank deficient")
    b0, b1, c = (float(s) for s in sol)
    notes: list[str] = []
    if abs(b1) < 1e-12:
        raise IdentificationError("flat log-density: the shift is not identified by the intercept change")
    shift = c / b1
    fitted = X[fit_rows] @ sol
    dev = float(np.max(np.abs(ob.counts[fit_rows] - fitted)) / np.mean(fitted))
    linear = dev <= linearity_threshold
    if not linear:
        notes.append(f"log-density deviates from linear by {dev:.1%} of the mean count")
    region = (m > -n_left) & (m <= n_right)
    pred_region = b0 + b1 * v[region]
    excess = float(np.sum(ob.counts[region] - pred_region))
    # excess = int_0^D (b0 + b1 v) dv / wr
    qa, qb, qc = 0.5 * b1 / wr, b0 / wr, -excess
    if excess <= 0:
        shift_b = 0.0
    elif abs(qa) < 1e-15:
        shift_b = -qc / qb
    else:
        disc = qb * qb - 4 * qa * qc
        roots = [(-qb + s * math.sqrt(max(disc, 0.0))) / (2 * qa) for s in (1, -1)]
        pos = [x for x in roots if x > 0]
        shift_b = min(pos) if pos else math.nan
    # outcomes: linear in r with a level shift for shifters
    yw = ob.counts[fit_rows]
    Y = ob.mean_y[fit_rows]
    ok = np.isfinite(Y) & (yw > 0)
    Xo = X[fit_rows][ok]
    so, _, rank_o, _ = np.linalg.lstsq(Xo * np.sqrt(yw[ok])[:, None], Y[ok] * np.sqrt(yw[ok]), rcond=None)
    if rank_o < 3:
        raise RankDeficientError("log-outcome design is rank deficient")
    d_slope, d_shift = float(so[1]), float(so[2])
    e = None
    if 0 < policy.delta_t and policy.t + policy.delta_t < 1:
        e = shift / math.log((1 - policy.t) / (1 - policy.t - policy.delta_t))
    for msg in notes:
        warnings.warn(msg, stacklevel=2)
    return LogTransformEstimate(
        log_shift=shift,
        delta_z_star=policy.z_star * math.expm1(shift),
        elasticity=e,
        log_shift_from_bunching=float(shift_b),
        excess_bunching=excess,
        intercept=b0,
        slope=b1,
        intercept_shift=c,
        outcome_slope=d_slope,
        outcome_shift=d_shift,
        te_shifter=d_shift - d_slope * shift,
        linearity_deviation=dev,
        linear=linear,
        bin_width=wr,
        warnings=notes,
    )


# ---------------------------------------------------------------------------
# relabelling


@dataclass(frozen=True)
class RelabelCost:
    """Convex misreporting cost ``c * g(delta)``.

    ``g_prime_inv`` maps a marginal rate over ``c`` to the optimal degree.
    The default is ``g(d) = d**2 / 2``.
    """

    c: float
    g: Callable[[NDArray], NDArray] = staticmethod(lambda d: 0.5 * np.asarray(d) ** 2)
    g_prime: Callable[[NDArray], NDArray] = staticmethod(lambda d: np.asarray(d, dtype=float))
    g_prime_inv: Callable[[float], float] = staticmethod(lambda x: float(x))

    @classmethod
    def quadratic(cls, c: float) -> "RelabelCost":
        if not c > 0:
            raise InputError("relabelling cost scale must be positive")
        return cls(c)

    def degree(self, rate: float) -> float:
        if math.isinf(self.c):
            return 0.0
        return float(self.g_prime_inv(rate / self.c))

    def real_factor(self, rate: float, delta: float) -> float:
        """Net return on a unit of real position when reporting ``1 - delta`` of it."""
        if math.isinf(self.c):
            return 1.0 - rate
        return 1.0 - rate * (1.0 - delta) - self.c * float(self.g(delta))


@dataclass(frozen=True)
class RelabelSolution:
    """Optimal misreporting under a kink.

    ``delta_ct`` and ``delta_shift`` are the degrees below and above the
    threshold; ``reported_response`` is the reported-position response of
    the marginal buncher.
    """

    delta_ct: float
    delta_shift: float
    factor_ct: float
    factor_shift: float
    reported_response: float
    e: float
    z_star: float
    cost: RelabelCost

    def buncher_degree(self, n: NDArray) -> NDArray:
        """Degree that puts the reported position exactly at the threshold."""
        n = np.asarray(n, dtype=float)
        if math.isinf(self.cost.c):
            return np.zeros(n.shape)
        a = np.full(n.shape, self.delta_ct)
        b = np.full(n.shape, self.delta_shift)
        c = self.cost
        for _ in range(80):
            mid = 0.5 * (a + b)
            rate = c.c * c.g_prime(mid)
            fac = 1.0 - rate * (1.0 - mid) - c.c * c.g(mid)
            val = np.maximum(fac, 0.0) ** self.e * (1.0 - mid) * n - self.z_star
            a = np.where(val > 0, mid, a)
            b = np.where(val > 0, b, mid)
        return 0.5 * (a + b)

    def map(self, n: NDArray) -> tuple[NDArray, NDArray, NDArray]:
        """Reported and real positions under the kink, and the branch (0, 1, 2).

        Branch 0 keeps the counterfactual choice, 1 reports exactly ``z*``
        and 2 is the interior choice above the threshold.
        """
        n = np.asarray(n, dtype=float)
        rl_ct = self.factor_ct ** self.e * n
        rp_ct = rl_ct * (1 - self.delta_ct)
        rl_sh = self.factor_shift ** self.e * n
        rp_sh = rl_sh * (1 - self.delta_shift)
        branch = np.where(rp_ct <= self.z_star, 0, np.where(rp_sh > self.z_star, 2, 1))
        zb_rp = np.full(n.shape, self.z_star)
        deg = self.buncher_degree(n)
        zb_rl = self.z_star / (1 - deg)
        z_rp = np.choose(branch, [rp_ct, zb_rp, rp_sh])
        z_rl = np.choose(branch, [rl_ct, zb_rl, rl_sh])
        return z_rp, z_rl, branch


def relabel_forward(
    policy: KinkPolicy, c: float, e: float = 0.5, cost: Optional[RelabelCost] = None,
) -> RelabelSolution:
    """Optimal relabelling degrees and the implied reported response.

    Raises
    ------
    InputError
        If the degree above the threshold reaches 1 or the net return on
        real position is not positive.
    """
    cost = cost or (RelabelCost(math.inf) if math.isinf(c) else RelabelCost.quadratic(c))
    d_ct = cost.degree(policy.t)
    d_sh = cost.degree(policy.t + policy.delta_t)
    if not (0 <= d_ct <= d_sh < 1):
        raise InputError(f"relabelling degrees ({d_ct}, {d_sh}) must satisfy 0 <= below <= above < 1")
    f_ct = cost.real_factor(policy.t, d_ct)
    f_sh = cost.real_factor(policy.t + policy.delta_t, d_sh)
    if f_ct <= 0 or f_sh <= 0:
        raise InputError("net return on real position must be positive")
    ratio = (f_ct / f_sh) ** e * (1 - d_ct) / (1 - d_sh)
    return RelabelSolution(d_ct, d_sh, f_ct, f_sh, policy.z_star * (ratio - 1), e, policy.z_star, cost)


def relabel_adjusted_level_change(
    mu: float, lam: float, c: float, policy: KinkPolicy, delta_z_bar: float,
    convention: str = "linear_share", cost: Optional[RelabelCost] = None,
) -> tuple[float, float]:
    """Level and slope breaks when reported and real positions differ.

    The slope break is unchanged; the direct effect works on the real
    response ratio ``r (1 - delta_ct) / (1 - delta_shift)`` with
    ``r = z* / (z* + reported response)``.
    """
    cost = cost or (RelabelCost(math.inf) if math.isinf(c) else RelabelCost.quadratic(c))
    d_ct = cost.degree(policy.t)
    d_sh = cost.degree(policy.t + policy.delta_t)
    if d_sh >= 1:
        raise InputError("relabelling degree above the threshold must stay below 1")
    r = policy.z_star / (policy.z_star + delta_z_bar)
    real = r * (1 - d_ct) / (1 - d_sh)
    top = policy.t + policy.delta_t
    a0 = mu * level_share(real, convention) - lam * top * policy.z_star * (r - 1)
    a1 = -lam * (top * r - policy.t)
    return float(a0), float(a1)


def calibrate_relabel_cost(
    observations: Sequence[tuple[KinkPolicy, float, float, float]],
    c_bounds: tuple[float, float] = (0.5, 1e6),
    convention: str = "linear_share",
    n_grid: int = 400,
) -> tuple[float, float, float, float]:
    """Experimental: joint ``(mu, lam, c)`` from breaks at two or more thresholds.

    ``observations`` holds ``(policy, a0, a1, reported response)`` per
    threshold.  For each ``c`` on a log grid the breaks are linear in
    ``(mu, lam)``; the ``c`` with the smallest residual is refined by golden
    section.  Returns ``(mu, lam, c, residual sum of squares)``.
    """
    if len(observations) < 2:
        raise InputError("cost calibration needs at least two thresholds")

    def solve(c: float) -> tuple[float, float, float]:
        rows, rhs = [], []
        for pol, a0, a1, dz in observations:
            u = relabel_adjusted_level_change(1.0, 0.0, c, pol, dz, convention)
            v = relabel_adjusted_level_change(0.0, 1.0, c, pol, dz, convention)
            rows += [[u[0], v[0]], [u[1], v[1]]]
            rhs += [a0, a1]
        A, b = np.array(rows), np.array(rhs)
        sol, *_ = np.linalg.lstsq(A, b, rcond=None)
        return float(sol[0]), float(sol[1]), float(np.sum((A @ sol - b) ** 2))

    grid = np.geomspace(c_bounds[0], c_bounds[1], n_grid)
    vals = []
    for c in grid:
        try:
            vals.append(solve(float(c))[2])
        except InputError:
            vals.append(math.inf)
    i = int(np.argmin(vals))
    lo, hi = math.log(grid[max(i - 1, 0)]), math.log(grid[min(i + 1, n_grid - 1)])
    phi = (math.sqrt(5) - 1) / 2
    for _ in range(60):
        a, b = hi - phi * (hi - lo), lo + phi * (hi - lo)
        if solve(math.exp(a))[2] <= solve(math.exp(b))[2]:
            hi = b
        else:
            lo = a
    c = math.exp(0.5 * (lo + hi))
    mu, lam, rss = solve(c)
    return mu, lam, c, rss


# ---------------------------------------------------------------------------
# bunching up


@dataclass(frozen=True)
class _MirroredPolicy:
    """Threshold and diffuse widths on the mirrored axis ``x = -z``."""

    z_star: float
    t: float
    delta_t: float
    u1: float
    u2: float


@dataclass
class BunchUpEstimate:
    """Estimates with the high-rate schedule as the counterfactual.

    ``density`` and ``outcome`` live on the mirrored axis ``x = -z``.
    Effects are relative to the high-rate counterfactual, so the lump-sum
    gain ``lam * delta_t * z*`` of agents above the threshold is added back.
    """

    delta_z_star_act: float
    elasticity: Optional[float]
    never_taker_te: float
    calibration: Optional[Calibration]
    level_break: float
    slope_break: float
    te_shifter: float
    te_buncher: float
    excess_bunching: float
    converged: bool
    density: DensityEstimate
    outcome: OutcomeEstimate
    warnings: list = field(default_factory=list)


def calibrate_bunch_up(
    a0: float, a1: float, delta_z_act: float, policy: KinkPolicy, convention: str = "log_share"
) -> Calibration:
    """``(mu, lam)`` from breaks measured against the high-rate counterfactual.

    ``a1`` is the slope change per unit of ``z`` below the threshold and
    ``a0`` the level gap against the curve of agents above it, who carry
    the lump sum ``lam delta_t z*``.
    """
    if delta_z_act <= 0:
        raise IdentificationError("mu unidentified: the marginal buncher's response is zero")
    if delta_z_act >= policy.z_star:
        raise InputError("response below the threshold cannot exceed z*")
    k = policy.z_star / (policy.z_star - delta_z_act)
    slope = policy.t * k - policy.t - policy.delta_t
    if abs(slope) < 1e-12:
        raise IdentificationError("lambda unidentified: the slope-break coefficient vanishes")
    lam = -a1 / slope
    mu = (a0 + lam * policy.delta_t * policy.z_star + lam * policy.z_star * slope) / level_share(k, convention)
    e = None
    if 0 < policy.delta_t and policy.t + policy.delta_t < 1:
        e = math.log(k) / math.log((1 - policy.t) / (1 - policy.t - policy.delta_t))
    return Calibration(float(mu), float(lam), e, convention)


def estimate_bunch_up(
    samples: Samples | SortedSample,
    policy: KinkPolicy,
    config: Optional[EstimationConfig] = None,
) -> BunchUpEstimate:
    """Run the core pipeline on mirrored positions.

    On ``x = -z`` agents below the threshold become the movers above
    ``x* = -z*`` and the relocation ``x (x* + d) / x*`` is the upward move
    ``z z* / (z* - d)``.  Diffuse widths swap sides and the fit windows are
    mirrored; slopes change sign on the way back.
    """
    config = config or EstimationConfig()
    frame = _frame(samples)
    mirror = SortedSample(-frame.z, frame.y, frame.w)
    mp = _MirroredPolicy(-policy.z_star, policy.t, policy.delta_t, policy.u2, policy.u1)
    width = config.width_for(policy)
    lo, hi = default_window(policy, config, float(frame.z[0]), float(frame.z[-1]))
    olo, ohi = outcome_window(policy, config)
    mcfg = config.with_(
        bin_width=width, delta_z_tolerance=config.tolerance_for(policy),
        fit_lower=-hi, fit_upper=-lo, outcome_lower=-ohi, outcome_upper=-olo,
    )
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        dens = estimate_density(mirror, mp, mcfg)
    notes = [str(c.message) for c in caught]
    out = estimate_outcome(mirror, dens, mp, mcfg)
    a0, a1 = out.level_break, -out.slope_break
    cal = None
    te_s = te_b = nt = math.nan
    if dens.delta_z_star > 0 and not dens.no_bunching:
        try:
            cal = calibrate_bunch_up(a0, a1, dens.delta_z_star, policy, config.outcome_level_convention)
        except BunchingError as exc:
            notes.append(str(exc))
    if cal is not None:
        nt = cal.lam * policy.delta_t * policy.z_star
        te_s = te_shifters(dens, out) + nt
        try:
            fn = te_bunchers_sharp if bunching_mode(policy) == "sharp" else te_bunchers_diffuse
            te_b = fn(dens, out, mp, mcfg)[0] + nt
        except BunchingError as exc:
            notes.append(str(exc))
    return BunchUpEstimate(
        delta_z_star_act=dens.delta_z_star,
        elasticity=cal.e if cal else None,
        never_taker_te=nt,
        calibration=cal,
        level_break=a0,
        slope_break=a1,
        te_shifter=te_s,
        te_buncher=te_b,
        excess_bunching=dens.excess_bunching,
        converged=dens.converged,
        density=dens,
        outcome=out,
        warnings=notes,
    )


# ---------------------------------------------------------------------------
# diffusion


@dataclass(frozen=True)
class DiffusionDiagnostics:
    """Quantities that govern how much imprecise targeting biases the estimates.

    Slopes are relative: the fitted slope times ``z*`` over the mean level,
    so 0 means flat.  ``excess_spread_bins`` is the number of bins holding
    90% of the positive excess mass between ``half_width`` bins below the
    threshold and the top of the diffuse window, and
    ``excess_sd`` its standard deviation in currency.
    """

    density_slope: float
    outcome_slope: float
    excess_spread_bins: int
    excess_sd: float
    flagged: bool
    threshold: float


def _relative_slope(x: NDArray, y: NDArray, w: NDArray, z_star: float) -> float:
    ok = np.isfinite(y) & (w > 0)
    if ok.sum() < 2:
        return 0.0
    X = np.column_stack([np.ones(ok.sum()), x[ok]])
    sw = np.sqrt(w[ok])
    sol, *_ = np.linalg.lstsq(X * sw[:, None], y[ok] * sw, rcond=None)
    level = float(np.average(y[ok], weights=w[ok]))
    return float(sol[1] * abs(z_star) / level) if level != 0 else math.inf


def diffusion_diagnostics(
    samples: Samples | SortedSample,
    density: DensityEstimate,
    outcome: OutcomeEstimate,
    half_width: int = 10,
    threshold: float = 0.25,
) -> DiffusionDiagnostics:
    """Report slopes of the shifter-region density and auxiliary outcomes and the excess spread.

    Nothing is corrected; results with a relative slope above
    ``threshold`` are flagged.
    """
    g = density.geometry
    ms = density.offsets()
    lo_edge = g.z_star + (ms - 1) * g.width
    shifter = (lo_edge >= density.excluded_upper) & (ms <= g.m_hi)
    x = density.bin_centers[shifter]
    dslope = _relative_slope(x, density.counterfactual_counts[shifter], np.ones(x.size), g.z_star)
    om = outcome.offsets
    o_lo = outcome.z_star + (om - 1) * outcome.bin_width
    o_use = (outcome.auxiliary_counts > 0) & (o_lo >= density.excluded_upper) & (o_lo + outcome.bin_width <= outcome.window[1])
    oslope = _relative_slope(outcome.bin_centers[o_use], outcome.auxiliary_outcomes[o_use],
                             outcome.auxiliary_counts[o_use], g.z_star)
    # reference without bunchers: the smooth fit at and below the threshold,
    # extrapolated shifters inside the diffuse window, nothing further up
    n_right = g.n_right
    near = (ms >= -half_width) & (ms <= min(half_width, n_right))
    ref = density.predicted_counts[near].copy()
    right = ms[near] >= 1
    if right.any():
        ref[right] = density.shifter_diffuse_counts[ms[near][right] - 1]
    excess = np.clip(density.observed_counts[near] - ref, 0.0, None)
    if excess.sum() > 0:
        order = np.argsort(excess)[::-1]
        cum = np.cumsum(excess[order]) / excess.sum()
        spread = int(np.searchsorted(cum, 0.9 - 1e-12) + 1)
        c = density.bin_centers[near]
        mean = np.average(c, weights=excess)
        sd = float(np.sqrt(np.average((c - mean) ** 2, weights=excess)))
    else:
        spread, sd = 0, 0.0
    flagged = abs(dslope) > threshold or abs(oslope) > threshold
    return DiffusionDiagnostics(dslope, oslope, spread, sd, flagged, threshold)


# ---------------------------------------------------------------------------
# policy scan


@dataclass(frozen=True)
class ScenarioRow:
    """Aggregates under one policy; ``reimbursement`` is position minus payment."""

    z_star: float
    t: float
    delta_t: float
    total_z: float
    total_payment: float
    reimbursement: float
    mean_outcome: float
    sd_outcome: float
    mean_z: float
    sd_z: float
    n_agents: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def recover_types(
    samples: Samples, policy: KinkPolicy, calibration: Calibration, tol: float = 1e-9
) -> tuple[NDArray, NDArray]:
    """Ability and outcome-at-zero-effect for each agent under the structural model.

    Agents at the threshold (within ``tol``) are bunchers; their ability is
    spread evenly over the buncher bracket in order of appearance.
    """
    if calibration.e is None:
        raise IdentificationError("policy scan needs an identified elasticity")
    e = calibration.e
    z = samples.z
    lo_rate, hi_rate = 1 - policy.t, 1 - policy.t - policy.delta_t
    n_low = policy.z_star / lo_rate ** e
    n_high = policy.z_star / hi_rate ** e
    bunch = np.abs(z - policy.z_star) <= tol * max(1.0, policy.z_star)
    n = np.where(z < policy.z_star, z / lo_rate ** e, z / hi_rate ** e)
    k = int(bunch.sum())
    if k:
        n[bunch] = n_low + (n_high - n_low) * (np.arange(1, k + 1) / k)
    if calibration.convention != "log_share":
        raise InputError("policy scan uses the log-share outcome model")
    y_pre = samples.y - calibration.mu * np.log(np.maximum(z, 1e-300)) + calibration.lam * tax_amount(policy, z)
    return n, y_pre


def choices_under(policy: KinkPolicy, n: NDArray, e: float) -> NDArray:
    """Saez choices for abilities ``n`` under a kinked schedule."""
    z_lo = n * (1 - policy.t) ** e
    top = 1 - policy.t - policy.delta_t
    if top <= 0:
        return np.minimum(z_lo, policy.z_star)
    z_hi = n * top ** e
    return np.where(z_lo <= policy.z_star, z_lo, np.where(z_hi > policy.z_star, z_hi, policy.z_star))


def policy_scan(
    samples: Samples,
    policy: KinkPolicy,
    calibration: Calibration,
    alternatives: Sequence[KinkPolicy],
) -> list[ScenarioRow]:
    """Recompute choices and outcomes under alternative schedules.

    Types are recovered once from the observed data under ``policy``; the
    first row describes ``policy`` itself.
    """
    n, y_pre = recover_types(samples, policy, calibration)
    rows = []
    for pol in [policy, *alternatives]:
        z = choices_under(pol, n, calibration.e)
        pay = tax_amount(pol, z)
        y = y_pre + calibration.mu * np.log(np.maximum(z, 1e-300)) - calibration.lam * pay
        rows.append(ScenarioRow(
            z_star=pol.z_star, t=pol.t, delta_t=pol.delta_t,
            total_z=float(z.sum()), total_payment=float(pay.sum()), reimbursement=float((z - pay).sum()),
            mean_outcome=float(y.mean()) if y.size else math.nan,
            sd_outcome=float(y.std(ddof=1)) if y.size > 1 else math.nan,
            mean_z=float(z.mean()) if z.size else math.nan,
            sd_z=float(z.std(ddof=1)) if z.size > 1 else math.nan,
            n_agents=int(z.size),
        ))
    return rows
