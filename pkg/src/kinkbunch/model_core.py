"""Shared domain types, policy arithmetic and binning.

Every estimator in the package consumes a :class:`Samples` bundle (parallel
arrays of agent records) and a :class:`KinkPolicy`.  Bins are equal width and
right-closed, ``(a, b]``, on a grid aligned so the threshold is a bin edge; the
bin ``(z* - w, z*]`` is the threshold bin and holds agents sitting exactly at
the kink.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray


class BunchingError(Exception):
    """Base class for estimation failures that carry a diagnostic message."""


class InputError(BunchingError, ValueError):
    """Malformed or out-of-domain input."""


class RankDeficientError(BunchingError):
    """A least-squares design matrix does not have full column rank."""


class NoBunchingError(BunchingError):
    """Excess mass at the threshold is not positive."""


class IdentificationError(BunchingError):
    """A structural parameter cannot be recovered from the estimates."""


class InsufficientMassError(BunchingError):
    """Excess mass exceeds the counterfactual mass available above the threshold."""


class ThinMassError(BunchingError):
    """Buncher mass in a bin is too small to invert the mixture identity."""


@dataclass(frozen=True)
class KinkPolicy:
    """Kinked payment schedule with an optional diffuse bunching window.

    Agents pay ``t`` per unit up to ``z_star`` and ``t + delta_t`` above it.
    ``u1`` and ``u2`` are the half-widths of the region around the threshold
    where bunchers land when they cannot target the kink exactly.

    ``delta_t = 0`` is accepted as the degenerate no-kink policy so that
    placebo runs can share the same code path.
    """

    z_star: float
    t: float
    delta_t: float
    u1: float = 0.0
    u2: float = 0.0

    def __post_init__(self) -> None:
        if not (self.z_star > 0 and math.isfinite(self.z_star)):
            raise InputError(f"z_star must be positive, got {self.z_star}")
        if not 0.0 <= self.t < 1.0:
            raise InputError(f"t must lie in [0, 1), got {self.t}")
        if self.delta_t < 0.0:
            raise InputError(f"delta_t must be nonnegative, got {self.delta_t}")
        if self.t + self.delta_t > 1.0 + 1e-12:
            raise InputError(f"t + delta_t must not exceed 1, got {self.t + self.delta_t}")
        if self.u1 < 0 or self.u2 < 0:
            raise InputError("diffuse widths u1, u2 must be nonnegative")
        if self.u1 >= self.z_star:
            raise InputError("u1 must be smaller than z_star")

    @property
    def upper_rate(self) -> float:
        return self.t + self.delta_t

    @property
    def is_sharp(self) -> bool:
        return self.u1 == 0 and self.u2 == 0

    def with_(self, **changes) -> "KinkPolicy":
        return replace(self, **changes)


def tax_amount(policy: KinkPolicy, z: ArrayLike) -> NDArray[np.float64] | float:
    """Payment owed at ``z`` under the kinked schedule.

    Continuous at the threshold, slope ``t`` below and ``t + delta_t`` above.
    Works elementwise on arrays; a scalar in gives a float back.
    """
    arr = np.asarray(z, dtype=float)
    if np.any(arr < 0):
        raise InputError("tax_amount is defined for z >= 0 only")
    out = policy.t * arr + policy.delta_t * np.maximum(arr - policy.z_star, 0.0)
    if out.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class AgentSample:
    """A single agent record."""

    z: float
    y: float = 0.0
    group: Optional[str] = None
    weight: float = 1.0

    def __post_init__(self) -> None:
        if not self.z > 0:
            raise InputError(f"z must be positive, got {self.z}")
        if not self.weight > 0:
            raise InputError(f"weight must be positive, got {self.weight}")


@dataclass(frozen=True)
class Samples:
    """Column-oriented collection of agents.

    ``group`` is an optional array of labels (strings or ints).  Validation
    checks ``z > 0`` and ``weight > 0`` unless ``validate=False`` is passed to
    :meth:`from_arrays`, which internal callers use for mirrored data.
    """

    z: NDArray[np.float64]
    y: NDArray[np.float64]
    weight: NDArray[np.float64]
    group: Optional[NDArray] = None

    @classmethod
    def from_arrays(
        cls,
        z: ArrayLike,
        y: Optional[ArrayLike] = None,
        weight: Optional[ArrayLike] = None,
        group: Optional[ArrayLike] = None,
        validate: bool = True,
    ) -> "Samples":
        z_arr = np.asarray(z, dtype=float).ravel()
        n = z_arr.size
        y_arr = np.zeros(n) if y is None else np.asarray(y, dtype=float).ravel()
        w_arr = np.ones(n) if weight is None else np.asarray(weight, dtype=float).ravel()
        g_arr = None if group is None else np.asarray(group).ravel()
        if y_arr.size != n or w_arr.size != n or (g_arr is not None and g_arr.size != n):
            raise InputError("z, y, weight and group must have equal length")
        if validate:
            if np.any(~np.isfinite(z_arr)) or np.any(z_arr <= 0):
                raise InputError("all z must be finite and positive")
            if np.any(~(w_arr > 0)):
                raise InputError("all weights must be positive")
            if np.any(~np.isfinite(y_arr)):
                raise InputError("all y must be finite")
        return cls(z=z_arr, y=y_arr, weight=w_arr, group=g_arr)

    @classmethod
    def from_records(cls, records: Iterable[AgentSample]) -> "Samples":
        recs = list(records)
        groups = [r.group for r in recs]
        return cls.from_arrays(
            [r.z for r in recs],
            [r.y for r in recs],
            [r.weight for r in recs],
            None if all(g is None for g in groups) else np.array(groups, dtype=object),
        )

    def __len__(self) -> int:
        return int(self.z.size)

    @property
    def total_weight(self) -> float:
        return float(self.weight.sum())

    def subset(self, mask: NDArray[np.bool_]) -> "Samples":
        return Samples(
            z=self.z[mask],
            y=self.y[mask],
            weight=self.weight[mask],
            group=None if self.group is None else self.group[mask],
        )

    def with_weights(self, weight: NDArray[np.float64]) -> "Samples":
        return replace(self, weight=np.asarray(weight, dtype=float))

    def with_z(self, z: NDArray[np.float64]) -> "Samples":
        return replace(self, z=np.asarray(z, dtype=float))


@dataclass(frozen=True)
class BinnedDistribution:
    """Equal-width right-closed bins with weighted counts and outcome sums.

    ``z_sums`` holds the weighted sum of positions in each bin so that the
    within-bin mean position is available to the outcome regression.
    ``below_range`` and ``above_range`` report weight that fell outside the
    grid instead of dropping it silently.
    """

    bin_width: float
    origin: float
    counts: NDArray[np.float64]
    outcome_sums: NDArray[np.float64]
    z_sums: NDArray[np.float64]
    below_range: float = 0.0
    above_range: float = 0.0

    @property
    def n_bins(self) -> int:
        return int(self.counts.size)

    @property
    def left_edges(self) -> NDArray[np.float64]:
        return self.origin + self.bin_width * np.arange(self.n_bins)

    @property
    def right_edges(self) -> NDArray[np.float64]:
        return self.left_edges + self.bin_width

    @property
    def bin_centers(self) -> NDArray[np.float64]:
        return self.left_edges + 0.5 * self.bin_width

    @property
    def mean_outcomes(self) -> NDArray[np.float64]:
        """Per-bin mean outcome; NaN where the bin is empty."""
        out = np.full(self.n_bins, np.nan)
        nz = self.counts > 0
        out[nz] = self.outcome_sums[nz] / self.counts[nz]
        return out

    @property
    def mean_positions(self) -> NDArray[np.float64]:
        """Per-bin mean position; the bin center where the bin is empty."""
        out = self.bin_centers.copy()
        nz = self.counts > 0
        out[nz] = self.z_sums[nz] / self.counts[nz]
        return out

    @property
    def in_range_weight(self) -> float:
        return float(self.counts.sum())

    def index_of(self, z: float) -> int:
        """Index of the right-closed bin containing ``z`` (may be out of range)."""
        return int(math.ceil((z - self.origin) / self.bin_width - 1e-9)) - 1


# values within this many bin widths above an edge count as on the edge
EDGE_SLACK = 1e-9


def bin_index(z: ArrayLike, origin: float, width: float) -> NDArray[np.int64]:
    """Right-closed bin index: ``z`` in ``(origin + i*w, origin + (i+1)*w]`` -> ``i``."""
    rel = (np.asarray(z, dtype=float) - origin) / width
    # the slack keeps values a rounding error above an edge in the lower bin
    return (np.ceil(rel - EDGE_SLACK) - 1).astype(np.int64)


def bin_samples(
    samples: Samples,
    bin_width: float,
    range_: Sequence[float],
) -> BinnedDistribution:
    """Bin weighted samples on right-closed bins covering ``range_``.

    ``range_ = (lo, hi)`` sets the origin at ``lo``; the number of bins is
    ``ceil((hi - lo) / bin_width)``.  Weight outside ``(lo, lo + n*w]`` is
    tallied in ``below_range`` / ``above_range``.
    """
    if not bin_width > 0:
        raise InputError("bin_width must be positive")
    lo, hi = float(range_[0]), float(range_[1])
    if not hi > lo:
        raise InputError("bin range must be nonempty")
    n_bins = int(math.ceil((hi - lo) / bin_width - 1e-9))
    idx = bin_index(samples.z, lo, bin_width)
    below = idx < 0
    above = idx >= n_bins
    ok = ~(below | above)
    w = samples.weight
    counts = np.bincount(idx[ok], weights=w[ok], minlength=n_bins)
    ysum = np.bincount(idx[ok], weights=(w * samples.y)[ok], minlength=n_bins)
    zsum = np.bincount(idx[ok], weights=(w * samples.z)[ok], minlength=n_bins)
    return BinnedDistribution(
        bin_width=float(bin_width),
        origin=lo,
        counts=counts.astype(float),
        outcome_sums=ysum.astype(float),
        z_sums=zsum.astype(float),
        below_range=float(w[below].sum()),
        above_range=float(w[above].sum()),
    )


def aligned_origin(z_min: float, z_star: float, width: float) -> float:
    """Left edge of a grid that has ``z_star`` on an edge and holds ``z_min`` strictly inside."""
    steps = math.floor((z_star - z_min) / width + 1e-9) + 1
    return z_star - steps * width


def aligned_grid(z_min: float, z_max: float, z_star: float, width: float) -> tuple[float, float]:
    """Range ``(lo, hi)`` aligned on ``z_star`` that covers ``[z_min, z_max]``."""
    lo = aligned_origin(z_min, z_star, width)
    hi = z_star + width * max(1, math.ceil((z_max - z_star) / width - 1e-9))
    if hi < z_max:
        hi += width
    return lo, hi


@dataclass(frozen=True)
class EstimationConfig:
    """Knobs shared by the density and outcome estimators.

    Window bounds are in counterfactual units.  ``None`` bounds fall back to
    data-driven defaults: ``[0.5 z*, 2 z*]`` clipped to the data for the
    density and the density window for the outcome.
    """

    poly_order_density: int = 4
    poly_order_outcome: int = 2
    max_iterations: int = 100
    delta_z_tolerance: Optional[float] = None
    reference_multiples: tuple[float, ...] = ()
    counterfactual_side: str = "low_rate"
    outcome_level_convention: str = "log_share"
    bin_width: Optional[float] = None
    fit_lower: Optional[float] = None
    fit_upper: Optional[float] = None
    outcome_lower: Optional[float] = None
    outcome_upper: Optional[float] = None
    excess_mass_floor: float = 0.05
    initial_guess: Optional[float] = None
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if self.poly_order_density < 1 or self.poly_order_outcome < 1:
            raise InputError("polynomial orders must be at least 1")
        if self.delta_z_tolerance is not None and not self.delta_z_tolerance > 0:
            raise InputError("delta_z_tolerance must be positive")
        if self.max_iterations < 1:
            raise InputError("max_iterations must be at least 1")
        if self.counterfactual_side not in ("low_rate", "high_rate"):
            raise InputError(f"unknown counterfactual_side {self.counterfactual_side!r}")
        if self.outcome_level_convention not in ("linear_share", "log_share"):
            raise InputError(
                f"unknown outcome_level_convention {self.outcome_level_convention!r}"
            )
        if self.bin_width is not None and not self.bin_width > 0:
            raise InputError("bin_width must be positive")

    def width_for(self, policy: KinkPolicy) -> float:
        return self.bin_width if self.bin_width is not None else policy.z_star / 40.0

    def tolerance_for(self, policy: KinkPolicy) -> float:
        if self.delta_z_tolerance is not None:
            return self.delta_z_tolerance
        return self.width_for(policy) / 10.0

    def with_(self, **changes) -> "EstimationConfig":
        return replace(self, **changes)


def level_share(ratio: float | NDArray, convention: str):
    """Proportional change term in the level equation: ``ratio - 1`` or ``ln(ratio)``."""
    if convention == "linear_share":
        return np.asarray(ratio) - 1.0 if np.ndim(ratio) else float(ratio) - 1.0
    if convention == "log_share":
        return np.log(ratio) if np.ndim(ratio) else math.log(ratio)
    raise InputError(f"unknown convention {convention!r}")
