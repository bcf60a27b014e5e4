"""Treatment effects on shifters and bunchers, and bootstrap standard errors.

The shifter effect compares relocated shifter outcomes with the
counterfactual curve at the same positions.  The buncher effect first backs
the bunchers' mean outcome out of the mixed threshold bin (or bins, when
bunching is diffuse) and then subtracts the counterfactual outcome those
agents would have had over ``(z*, z* + dz]``.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.typing import NDArray

from .density import DensityEstimate, SortedSample, estimate_density, snap_widths
from .model_core import (
    BunchingError,
    EstimationConfig,
    InputError,
    KinkPolicy,
    Samples,
    ThinMassError,
    level_share,
)
from .outcome import Calibration, OutcomeEstimate, calibrate_mu_lambda, estimate_outcome


class BootstrapError(BunchingError):
    """Too many bootstrap replicates failed."""


def te_shifters(
    density: DensityEstimate, outcome: OutcomeEstimate, window: Optional[tuple[float, float]] = None
) -> float:
    """Count-weighted mean gap between relocated shifter outcomes and the counterfactual curve.

    Only bins inside ``window`` (the outcome fit window by default) enter,
    since the curve is not trusted beyond the range it was fitted on.  Each
    bin's weight is the relocated shifter mass in it, which is the
    counterfactual count for every bin above the excluded window.
    """
    lo, hi = window if window is not None else outcome.window
    w = outcome.bin_width
    lower = outcome.z_star + (outcome.offsets - 1) * w
    use = (outcome.auxiliary_counts > 0) & (outcome.offsets >= 1) & (lower >= lo - 1e-9) & (lower + w <= hi + 1e-9)
    if not use.any():
        raise InputError("no shifter bins inside the outcome window")
    h = outcome.auxiliary_counts[use]
    gap = outcome.auxiliary_outcomes[use] - outcome.counterfactual_outcomes[use]
    return float(np.sum(h * gap) / np.sum(h))


def buncher_outcome_sharp(
    h: float, h_ct: float, y: float, y_ct: float, floor: float = 0.05
) -> float:
    """Mean outcome of the bunchers in a bin that also holds counterfactual agents.

    Parameters
    ----------
    h, h_ct : float
        Observed and counterfactual counts in the bin.
    y, y_ct : float
        Observed mean outcome and counterfactual outcome in the bin.
    floor : float
        Minimum excess ``h - h_ct`` as a share of ``h``.

    Raises
    ------
    ThinMassError
        When the excess is below ``floor * h``.
    """
    excess = h - h_ct
    if h <= 0 or excess < floor * h:
        raise ThinMassError(
            f"buncher mass too thin: observed {h:.6g}, counterfactual {h_ct:.6g}, "
            f"excess {excess:.6g} below {floor:.0%} of the observed count"
        )
    if h_ct == 0:
        return float(y)
    return float((y * h - y_ct * h_ct) / excess)


def _window_positions(density: DensityEstimate) -> tuple[NDArray, NDArray]:
    """Midpoints and counterfactual weights of the buncher window pieces."""
    ms, weights = density.buncher_window_weights()
    if ms.size == 0:
        return np.zeros(0), np.zeros(0)
    w = density.bin_width
    frac = np.clip(density.delta_z_star / w - (ms - 1), 0.0, 1.0)
    mid = density.z_star + (ms - 1) * w + 0.5 * frac * w
    return mid, weights


def counterfactual_buncher_outcome(density: DensityEstimate, outcome: OutcomeEstimate) -> float:
    """Counterfactual-count weighted mean of the outcome curve over ``(z*, z* + dz]``."""
    mid, weights = _window_positions(density)
    if weights.sum() <= 0:
        raise InputError("empty buncher window: the response is zero")
    return float(np.sum(weights * outcome.predict(mid)) / np.sum(weights))


def _bin(arr: NDArray, offsets0: int, m: int) -> float:
    i = m - offsets0
    return float(arr[i]) if 0 <= i < arr.size else 0.0


def threshold_mixture(density: DensityEstimate, outcome: OutcomeEstimate) -> tuple[float, float, float, float]:
    """``(h, h_ct, y, y_ct)`` in the threshold bin."""
    h = _bin(density.observed_counts, density.m_min, 0)
    h_ct = _bin(density.counterfactual_counts, density.m_min, 0)
    y = _bin(outcome.observed_outcomes, int(outcome.offsets[0]), 0)
    y_ct = _bin(outcome.counterfactual_outcomes, int(outcome.offsets[0]), 0)
    return h, h_ct, y, y_ct


def te_bunchers_sharp(
    density: DensityEstimate, outcome: OutcomeEstimate, policy: KinkPolicy,
    config: Optional[EstimationConfig] = None,
) -> tuple[float, float]:
    """Effect on bunchers when they all sit in the threshold bin.

    Returns ``(effect, buncher outcome at the threshold)``.  The mixture
    identity ``y h = y_b (h - h_ct) + y_ct h_ct`` is checked on the way.
    """
    config = config or EstimationConfig()
    if density.excess_bunching <= 0:
        raise InputError("no excess bunching to attribute to bunchers")
    h, h_ct, y, y_ct = threshold_mixture(density, outcome)
    y_b = buncher_outcome_sharp(h, h_ct, y, y_ct, config.excess_mass_floor)
    lhs, rhs = y * h, y_b * (h - h_ct) + y_ct * h_ct
    if not math.isclose(lhs, rhs, rel_tol=1e-9, abs_tol=1e-9 * max(1.0, abs(lhs))):
        raise BunchingError(f"mixture identity violated: {lhs!r} != {rhs!r}")
    return y_b - counterfactual_buncher_outcome(density, outcome), y_b


@dataclass(frozen=True)
class DiffuseBunchers:
    """Per-bin buncher outcomes across the diffuse window."""

    offsets: NDArray[np.int64]
    excess: NDArray[np.float64]
    buncher_outcomes: NDArray[np.float64]
    kept: NDArray[np.bool_]

    @property
    def mean_outcome(self) -> float:
        e = self.excess[self.kept]
        return float(np.sum(e * self.buncher_outcomes[self.kept]) / np.sum(e))


def diffuse_buncher_outcomes(
    density: DensityEstimate, outcome: OutcomeEstimate, policy: KinkPolicy, floor: float = 0.05
) -> DiffuseBunchers:
    """Back out buncher outcomes bin by bin over ``[z* - u1, z* + u2]``.

    At and below the threshold the bunchers share a bin with always-takers;
    above it, with shifters whose counts and outcomes are extrapolated from
    further out.  Bins whose excess is below ``floor`` of their count are
    dropped with a warning.
    """
    n_left, n_right = snap_widths(policy.u1, policy.u2, density.bin_width)
    ms = np.arange(-n_left + 1, n_right + 1)
    o0 = int(outcome.offsets[0])
    h = np.array([_bin(density.observed_counts, density.m_min, m) for m in ms])
    y = np.array([_bin(outcome.observed_outcomes, o0, m) for m in ms])
    ref_h = np.empty(ms.size)
    ref_y = np.empty(ms.size)
    for i, m in enumerate(ms):
        if m <= 0:
            ref_h[i] = _bin(density.counterfactual_counts, density.m_min, m)
            ref_y[i] = _bin(outcome.counterfactual_outcomes, o0, m)
        else:
            ref_h[i] = density.shifter_diffuse_counts[m - 1]
            ref_y[i] = outcome.shifter_diffuse_outcomes[m - 1]
    excess = h - ref_h
    kept = (h > 0) & (excess >= floor * h)
    if not kept.any():
        raise ThinMassError("buncher mass too thin in every diffuse bin")
    if not kept.all():
        warnings.warn(f"dropped {int((~kept).sum())} diffuse bins with thin buncher mass", stacklevel=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        yb = np.where(ref_h == 0, y, (y * h - ref_y * ref_h) / excess)
    return DiffuseBunchers(ms, excess, yb, kept)


def te_bunchers_diffuse(
    density: DensityEstimate, outcome: OutcomeEstimate, policy: KinkPolicy,
    config: Optional[EstimationConfig] = None,
) -> tuple[float, float]:
    """Effect on bunchers spread over the diffuse window.

    Returns ``(effect, excess-weighted buncher outcome)``.
    """
    config = config or EstimationConfig()
    if density.excess_bunching <= 0:
        raise InputError("no excess bunching to attribute to bunchers")
    parts = diffuse_buncher_outcomes(density, outcome, policy, config.excess_mass_floor)
    y_b = parts.mean_outcome
    return y_b - counterfactual_buncher_outcome(density, outcome), y_b


def structural_buncher_effect(
    mu: float, lam: float, positions: NDArray, weights: NDArray, policy: KinkPolicy,
    convention: str = "log_share",
) -> float:
    """Weighted mean of ``mu s(z*/z_ct) - lam (z* - z_ct) t`` over counterfactual positions."""
    z = np.asarray(positions, dtype=float)
    wt = np.asarray(weights, dtype=float)
    if z.size == 0 or wt.sum() <= 0:
        return 0.0
    effect = mu * level_share(policy.z_star / z, convention) - lam * (policy.z_star - z) * policy.t
    return float(np.sum(wt * effect) / np.sum(wt))


def te_buncher_structural(calibration: Calibration, density: DensityEstimate, policy: KinkPolicy) -> float:
    """Buncher effect implied by the calibrated ``(mu, lam)`` and the buncher window."""
    mid, weights = _window_positions(density)
    return structural_buncher_effect(calibration.mu, calibration.lam, mid, weights, policy,
                                     calibration.convention)


@dataclass
class PipelineResult:
    """Everything one pass of density, outcome, calibration and effects produces."""

    density: DensityEstimate
    outcome: OutcomeEstimate
    calibration: Optional[Calibration]
    te_shifter: float
    te_buncher: float
    buncher_outcome: float
    te_buncher_structural: float
    mode: str
    notes: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.density.converged


def bunching_mode(policy: KinkPolicy) -> str:
    return "sharp" if policy.u1 == 0 and policy.u2 == 0 else "diffuse"


def run_pipeline(
    samples: Samples | SortedSample,
    policy: KinkPolicy,
    config: Optional[EstimationConfig] = None,
    initial_guess: Optional[float] = None,
) -> PipelineResult:
    """Density, outcome, calibration and both treatment effects on one sample.

    With no detectable bunching (zero response, no excess or too thin an
    excess) the buncher set is empty: its effect is reported as 0 and the
    calibration as ``None``, with a note saying why.
    """
    config = config or EstimationConfig()
    frame = samples if isinstance(samples, SortedSample) else SortedSample.from_samples(samples)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        density = estimate_density(frame, policy, config, initial_guess)
    notes = [str(c.message) for c in caught]
    outcome = estimate_outcome(frame, density, policy, config)
    te_s = te_shifters(density, outcome)
    mode = bunching_mode(policy)
    calibration = None
    te_b = y_b = te_struct = 0.0
    if density.no_bunching or density.delta_z_star <= 0:
        notes.append("no bunching detected: buncher effect set to 0, calibration skipped")
    else:
        try:
            fn = te_bunchers_sharp if mode == "sharp" else te_bunchers_diffuse
            te_b, y_b = fn(density, outcome, policy, config)
        except ThinMassError as exc:
            notes.append(f"{exc}: buncher effect set to 0")
            te_b, y_b = 0.0, math.nan
        try:
            calibration = calibrate_mu_lambda(outcome.level_break, outcome.slope_break,
                                              density.delta_z_star, policy, config.outcome_level_convention)
            te_struct = te_buncher_structural(calibration, density, policy)
        except BunchingError as exc:
            notes.append(str(exc))
    return PipelineResult(density, outcome, calibration, te_s, te_b, y_b, te_struct, mode, notes)


_SE_KEYS = ("te_shifter", "te_buncher", "mu", "lam", "delta_z_star")


def _summary(res: PipelineResult) -> dict:
    cal = res.calibration
    return {
        "te_shifter": res.te_shifter,
        "te_buncher": res.te_buncher,
        "mu": cal.mu if cal else math.nan,
        "lam": cal.lam if cal else math.nan,
        "delta_z_star": res.density.delta_z_star,
    }


@dataclass
class EffectsReport:
    """Point estimates from the full sample with bootstrap standard errors."""

    te_shifter: float
    te_buncher: float
    buncher_outcome: float
    te_buncher_structural: float
    calibration: Optional[Calibration]
    delta_z_star: float
    excess_bunching: float
    converged: bool
    iterations: int
    mode: str
    se_te_shifter: float
    se_te_buncher: float
    se_mu: float
    se_lambda: float
    se_delta_z: float
    bootstrap_reps: int
    seed: int
    failures: int
    failure_rate: float
    replicates: dict = field(default_factory=dict, repr=False)
    point: Optional[PipelineResult] = field(default=None, repr=False)

    @property
    def elasticity(self) -> Optional[float]:
        return self.calibration.e if self.calibration else None


def agent_resample(rng: np.random.Generator, n: int) -> NDArray[np.int64]:
    """Indices of ``n`` agents drawn with replacement."""
    return rng.integers(0, n, size=n)


def bootstrap_pipeline(
    samples: Samples | SortedSample,
    policy: KinkPolicy,
    config: Optional[EstimationConfig] = None,
    reps: int = 200,
    seed: int = 0,
    workers: int = 1,
    resample: Callable[[np.random.Generator, int], NDArray] = agent_resample,
    max_failure_rate: float = 0.2,
) -> EffectsReport:
    """Agent-level bootstrap of the whole pipeline.

    Each replicate draws agents with replacement from its own stream spawned
    off ``seed`` and reruns density, outcome, calibration and effects.
    Replicates that raise or fail to converge are counted and left out of the
    standard deviations.  ``workers > 1`` runs replicates on a thread pool;
    results do not depend on scheduling.

    Raises
    ------
    BootstrapError
        When more than ``max_failure_rate`` of the replicates fail.
    """
    if reps < 2:
        raise InputError("bootstrap needs at least 2 replicates")
    config = config or EstimationConfig()
    frame = samples if isinstance(samples, SortedSample) else SortedSample.from_samples(samples)
    point = run_pipeline(frame, policy, config)
    n = frame.z.size
    base_w = frame.w
    children = np.random.SeedSequence(seed).spawn(reps)
    guess = point.density.delta_z_star if point.density.delta_z_star > 0 else None

    def one(child: np.random.SeedSequence) -> Optional[dict]:
        rng = np.random.default_rng(child)
        idx = resample(rng, n)
        w = np.bincount(idx, minlength=n).astype(float) * base_w
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                res = run_pipeline(frame.reweighted(w), policy, config, guess)
        except BunchingError:
            return None
        if not res.converged:
            return None
        return _summary(res)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, children))
    else:
        results = [one(c) for c in children]
    ok = [r for r in results if r is not None]
    failures = reps - len(ok)
    rate = failures / reps
    if rate > max_failure_rate:
        raise BootstrapError(f"{failures} of {reps} bootstrap replicates failed ({rate:.0%})")
    reps_arr = {k: np.array([r[k] for r in ok]) for k in _SE_KEYS}

    def sd(k: str) -> float:
        v = reps_arr[k]
        v = v[np.isfinite(v)]
        return float(np.std(v, ddof=1)) if v.size >= 2 else math.nan

    d = point.density
    return EffectsReport(
        te_shifter=point.te_shifter,
        te_buncher=point.te_buncher,
        buncher_outcome=point.buncher_outcome,
        te_buncher_structural=point.te_buncher_structural,
        calibration=point.calibration,
        delta_z_star=d.delta_z_star,
        excess_bunching=d.excess_bunching,
        converged=d.converged,
        iterations=d.iterations_used,
        mode=point.mode,
        se_te_shifter=sd("te_shifter"),
        se_te_buncher=sd("te_buncher"),
        se_mu=sd("mu"),
        se_lambda=sd("lam"),
        se_delta_z=sd("delta_z_star"),
        bootstrap_reps=reps,
        seed=seed,
        failures=failures,
        failure_rate=rate,
        replicates=reps_arr,
        point=point,
    )
