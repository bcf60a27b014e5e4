"""Synthetic agent populations with known ground truth.

Agents have ability ``n`` and isoelastic choice ``z = n * (1 - rate)**e``.
The kinked schedule sorts them into always-takers, bunchers and shifters;
optional frictions add stayers, targeting noise and misreporting.  Outcomes
follow the additive model ``y = y_pre(n) + mu * ln z - lambda * T(z)`` with
the direct term optionally in linear-share form.

Every agent carries its true counterfactual position and outcome, which is
what the estimators are checked against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from .model_core import InputError, KinkPolicy, Samples, level_share, tax_amount

ROLES = ("always_taker", "buncher", "shifter", "stayer", "never_taker")
ALWAYS_TAKER, BUNCHER, SHIFTER, STAYER, NEVER_TAKER = range(5)

# fixed chunk size so the draw does not depend on how many workers run it
_CHUNK = 100_000


@dataclass(frozen=True)
class SimulationConfig:
    """Parameters of the data-generating process.

    ``ability`` is ``("lognormal", m, s)`` with ``m``, ``s`` the mean and sd of
    ``ln n``, ``("uniform", lo, hi)`` or ``("exponential", rate)``.
    ``e`` is a single elasticity or a per-group tuple paired with
    ``group_shares``.  ``relabel_cost`` of ``inf`` switches misreporting off.
    """

    n_agents: int = 200_000
    ability: tuple = ("lognormal", math.log(130.0), 0.5)
    e: float | tuple[float, ...] = 0.5
    group_shares: Optional[tuple[float, ...]] = None
    mu: float = 10.0
    lam: float = 0.05
    y_pre_coeffs: tuple[float, ...] = (5.0, 0.02, -2.0e-5)
    stayer_share: float = 0.0
    diffusion_sigma: float = 0.0
    relabel_cost: float = math.inf
    outcome_noise_sigma: float = 0.0
    outcome_form: str = "log_share"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_agents < 0:
            raise InputError("n_agents must be nonnegative")
        es = self.elasticities
        shares = self.shares
        if len(shares) != len(es):
            raise InputError("group_shares must match the number of elasticities")
        if abs(sum(shares) - 1.0) > 1e-9 or any(s < 0 for s in shares):
            raise InputError("group_shares must be nonnegative and sum to 1")
        if any(e < 0 for e in es):
            raise InputError("elasticities must be nonnegative")
        if not 0.0 <= self.stayer_share <= 1.0:
            raise InputError("stayer_share must lie in [0, 1]")
        if self.diffusion_sigma < 0 or self.outcome_noise_sigma < 0:
            raise InputError("noise scales must be nonnegative")
        if not self.relabel_cost > 0:
            raise InputError("relabel_cost must be positive")
        if self.outcome_form not in ("log_share", "linear_share"):
            raise InputError(f"unknown outcome_form {self.outcome_form!r}")
        kind = self.ability[0]
        if kind not in ("lognormal", "uniform", "exponential"):
            raise InputError(f"unknown ability distribution {kind!r}")

    @property
    def elasticities(self) -> tuple[float, ...]:
        return tuple(self.e) if isinstance(self.e, (tuple, list)) else (float(self.e),)

    @property
    def shares(self) -> tuple[float, ...]:
        if self.group_shares is not None:
            return tuple(self.group_shares)
        k = len(self.elasticities)
        return tuple([1.0 / k] * k)

    @property
    def relabelling(self) -> bool:
        return math.isfinite(self.relabel_cost)


@dataclass(frozen=True)
class TaggedSamples:
    """Simulated agents with their ground-truth tags.

    ``z`` is the observed (reported) position; ``z_real`` differs from it only
    under misreporting.  ``z_ct`` and ``y_ct`` are the reported counterfactual
    position and the counterfactual outcome under the low linear rate.
    """

    n: NDArray[np.float64]
    e: NDArray[np.float64]
    group: NDArray[np.int64]
    z: NDArray[np.float64]
    z_real: NDArray[np.float64]
    y: NDArray[np.float64]
    z_ct: NDArray[np.float64]
    z_ct_real: NDArray[np.float64]
    y_ct: NDArray[np.float64]
    role: NDArray[np.int64]
    delta: NDArray[np.float64]
    y_pre: NDArray[np.float64]
    diffusion_draw: Optional[NDArray[np.float64]] = None

    def __len__(self) -> int:
        return int(self.z.size)

    @property
    def samples(self) -> Samples:
        return Samples.from_arrays(self.z, self.y, group=self.group, validate=False)

    def role_mask(self, name: str) -> NDArray[np.bool_]:
        return self.role == ROLES.index(name)

    def role_names(self) -> NDArray:
        return np.asarray(ROLES, dtype=object)[self.role]


def marginal_response(policy: KinkPolicy, e: float) -> float:
    """Closed-form response of the marginal buncher, ``z*((1-t)/(1-t-dt))**e - z*``."""
    if policy.t + policy.delta_t >= 1.0:
        return math.inf
    ratio = (1.0 - policy.t) / (1.0 - policy.t - policy.delta_t)
    return policy.z_star * (ratio ** e - 1.0)


def marginal_response_up(policy: KinkPolicy, e: float) -> float:
    """Response of the marginal buncher when the high rate is the counterfactual."""
    d = marginal_response(policy, e)
    return policy.z_star * (1.0 - policy.z_star / (policy.z_star + d))


def relabel_degrees(t: float, delta_t: float, c: float) -> tuple[float, float]:
    """Optimal misreporting degrees below and above the kink for ``g(d) = d**2/2``."""
    if not math.isfinite(c):
        return 0.0, 0.0
    return t / c, (t + delta_t) / c


def _draw_ability(cfg: SimulationConfig, rng: np.random.Generator, size: int) -> NDArray:
    kind = cfg.ability[0]
    if kind == "lognormal":
        return np.exp(rng.normal(cfg.ability[1], cfg.ability[2], size))
    if kind == "uniform":
        return rng.uniform(cfg.ability[1], cfg.ability[2], size)
    return rng.exponential(1.0 / cfg.ability[1], size)


def _draw_chunks(cfg: SimulationConfig):
    """Per-chunk generators spawned from the root seed."""
    n_chunks = max(1, math.ceil(cfg.n_agents / _CHUNK))
    seqs = np.random.SeedSequence(cfg.seed).spawn(n_chunks)
    for i, seq in enumerate(seqs):
        size = min(_CHUNK, cfg.n_agents - i * _CHUNK)
        yield np.random.default_rng(seq), max(size, 0)


def _y_pre(cfg: SimulationConfig, n: NDArray) -> NDArray:
    out = np.zeros_like(n)
    for k, c in enumerate(cfg.y_pre_coeffs):
        out = out + c * n ** k
    return out


def _real_factor(rate: float, delta: float, c: float) -> float:
    """``1 - rate*(1 - delta) - c*g(delta)``; equals ``1 - rate`` without misreporting."""
    if not math.isfinite(c):
        return 1.0 - rate
    return 1.0 - rate * (1.0 - delta) - c * delta * delta / 2.0


def generate_counterfactual(cfg: SimulationConfig, policy: KinkPolicy) -> TaggedSamples:
    """Draw agents and their choices under the linear low-rate schedule.

    Returns tagged samples whose observed columns still equal the
    counterfactual ones; :func:`apply_kink` fills in the kinked world.
    """
    ns, gs, noise, diff = [], [], [], []
    es = np.asarray(cfg.elasticities)
    shares = np.asarray(cfg.shares)
    for rng, size in _draw_chunks(cfg):
        ns.append(_draw_ability(cfg, rng, size))
        if es.size > 1:
            gs.append(rng.choice(es.size, size=size, p=shares))
        else:
            gs.append(np.zeros(size, dtype=np.int64))
        noise.append(rng.normal(0.0, 1.0, size))
        # truncated targeting noise, used later by apply_kink
        d = rng.normal(0.0, 1.0, size)
        diff.append(np.clip(d, -3.0, 3.0))
    n = np.concatenate(ns) if ns else np.zeros(0)
    g = np.concatenate(gs).astype(np.int64) if gs else np.zeros(0, dtype=np.int64)
    eps = np.concatenate(noise) if noise else np.zeros(0)
    e = es[g]

    d_t, _ = relabel_degrees(policy.t, policy.delta_t, cfg.relabel_cost)
    a0 = _real_factor(policy.t, d_t, cfg.relabel_cost)
    z_ct_real = a0 ** e * n
    z_ct = z_ct_real * (1.0 - d_t)
    y_pre = _y_pre(cfg, n) + cfg.outcome_noise_sigma * eps
    y_ct = y_pre + cfg.mu * np.log(z_ct_real) - cfg.lam * policy.t * z_ct
    tagged = TaggedSamples(
        n=n, e=e, group=g, z=z_ct.copy(), z_real=z_ct_real.copy(), y=y_ct.copy(),
        z_ct=z_ct, z_ct_real=z_ct_real, y_ct=y_ct,
        role=np.zeros(n.size, dtype=np.int64), delta=np.full(n.size, d_t), y_pre=y_pre,
        diffusion_draw=np.concatenate(diff) if diff else np.zeros(0),
    )
    return tagged


def _buncher_degree(n: NDArray, e: NDArray, z_star: float, c: float, lo: float, hi: float) -> NDArray:
    """Solve ``z* = (1 - c*d + c*d**2/2)**e * (1 - d) * n`` for ``d`` in ``[lo, hi]``."""
    a = np.full(n.shape, lo)
    b = np.full(n.shape, hi)
    for _ in range(60):
        m = 0.5 * (a + b)
        val = (1.0 - c * m + 0.5 * c * m * m) ** e * (1.0 - m) * n - z_star
        # the left side falls as d rises, so a positive residual means d is too small
        a = np.where(val > 0, m, a)
        b = np.where(val > 0, b, m)
    return 0.5 * (a + b)


def apply_kink(ct: TaggedSamples, policy: KinkPolicy, cfg: SimulationConfig) -> TaggedSamples:
    """Move counterfactual agents to their choices under the kinked schedule."""
    t, dt, zs = policy.t, policy.delta_t, policy.z_star
    n, e = ct.n, ct.e
    c = cfg.relabel_cost
    d_t, d_h = relabel_degrees(t, dt, c)
    if d_h >= 1.0:
        raise InputError("relabelling degree above the kink must stay below 1")
    a0 = _real_factor(t, d_t, c)
    a1 = _real_factor(t + dt, d_h, c)
    if a1 <= 0:
        raise InputError("marginal rate of 100% leaves no interior choice above the kink")
    # ability brackets: reported counterfactual at z* and reported shifter choice at z*
    n_low = zs / (a0 ** e * (1.0 - d_t))
    n_high = zs / (a1 ** e * (1.0 - d_h))

    role = np.full(n.size, ALWAYS_TAKER, dtype=np.int64)
    above = n > n_low
    if dt > 0:
        role[above & (n <= n_high)] = BUNCHER
        role[n > n_high] = SHIFTER
    z = ct.z_ct.copy()
    z_real = ct.z_ct_real.copy()
    delta = np.full(n.size, d_t)

    sh = role == SHIFTER
    z_real[sh] = a1 ** e[sh] * n[sh]
    z[sh] = z_real[sh] * (1.0 - d_h)
    delta[sh] = d_h
    bu = role == BUNCHER
    z[bu] = zs
    if cfg.relabelling and bu.any():
        delta[bu] = _buncher_degree(n[bu], e[bu], zs, c, d_t, d_h)
        z_real[bu] = zs / (1.0 - delta[bu])
    else:
        z_real[bu] = zs

    if cfg.stayer_share > 0:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
        stay = (role != ALWAYS_TAKER) & (rng.random(n.size) < cfg.stayer_share)
        role[stay] = STAYER
        z[stay] = ct.z_ct[stay]
        z_real[stay] = ct.z_ct_real[stay]
        delta[stay] = d_t

    if cfg.diffusion_sigma > 0:
        moved = (role == BUNCHER) | (role == SHIFTER)
        eps = cfg.diffusion_sigma * ct.diffusion_draw
        z = np.where(moved, z + eps, z)
        z_real = np.where(moved, z_real + eps, z_real)
        z = np.maximum(z, 1e-9)
        z_real = np.maximum(z_real, 1e-9)

    direct = cfg.mu * level_share(z_real / ct.z_ct_real, cfg.outcome_form) if n.size else z
    pay = tax_amount(policy, z) - t * ct.z_ct if n.size else z
    y = ct.y_ct + direct - cfg.lam * pay
    return TaggedSamples(
        n=n, e=e, group=ct.group, z=z, z_real=z_real, y=y,
        z_ct=ct.z_ct, z_ct_real=ct.z_ct_real, y_ct=ct.y_ct,
        role=role, delta=delta, y_pre=ct.y_pre,
    )


def simulate(cfg: SimulationConfig, policy: KinkPolicy) -> TaggedSamples:
    """Counterfactual draw followed by the kinked-policy response."""
    return apply_kink(generate_counterfactual(cfg, policy), policy, cfg)


@dataclass
class GroundTruth:
    """Known quantities of a simulated population."""

    delta_z_star: float
    elasticity: float
    mu: float
    lam: float
    te_shifter: float
    te_buncher: float
    excess_bunching: float
    log_shift: float
    delta_z_star_up: float
    never_taker_te: float
    role_counts: dict = field(default_factory=dict)
    group_delta_z: tuple = ()

    def as_dict(self) -> dict:
        return {
            "delta_z_star": self.delta_z_star,
            "elasticity": self.elasticity,
            "mu": self.mu,
            "lambda": self.lam,
            "te_shifter": self.te_shifter,
            "te_buncher": self.te_buncher,
            "excess_bunching": self.excess_bunching,
            "log_shift": self.log_shift,
            "delta_z_star_up": self.delta_z_star_up,
            "never_taker_te": self.never_taker_te,
            "role_counts": dict(self.role_counts),
            "group_delta_z": list(self.group_delta_z),
        }


def _mean_or_zero(x: NDArray) -> float:
    return float(x.mean()) if x.size else 0.0


def reported_response(policy: KinkPolicy, cfg: SimulationConfig, e: float) -> float:
    """Response of the marginal buncher in reported units (equals the real one without misreporting)."""
    c = cfg.relabel_cost
    d_t, d_h = relabel_degrees(policy.t, policy.delta_t, c)
    a0 = _real_factor(policy.t, d_t, c)
    a1 = _real_factor(policy.t + policy.delta_t, d_h, c)
    if a1 <= 0:
        return math.inf
    ratio = (1.0 - d_h) / (1.0 - d_t) * (a1 / a0) ** e
    return policy.z_star * (1.0 / ratio - 1.0)


def ground_truth(
    cfg: SimulationConfig,
    policy: KinkPolicy,
    tagged: Optional[TaggedSamples] = None,
    shifter_window: Optional[Sequence[float]] = None,
) -> GroundTruth:
    """Closed-form and brute-force truth for a configuration.

    Treatment effects average ``y - y_ct`` over tagged roles.  When
    ``shifter_window = (lo, hi)`` is given, the shifter average is restricted
    to agents whose counterfactual position lies in ``(lo, hi]`` so it can be
    compared with an estimate computed over the same range.
    """
    if tagged is None:
        tagged = simulate(cfg, policy)
    es, shares = cfg.elasticities, cfg.shares
    per_group = tuple(reported_response(policy, cfg, e) for e in es)
    if len(es) == 1:
        dz = per_group[0]
    else:
        dz = float(sum(s * d for s, d in zip(shares, per_group)))
    log_shift = float(sum(s * math.log1p(d / policy.z_star) for s, d in zip(shares, per_group)))
    if policy.delta_t > 0 and policy.t + policy.delta_t < 1:
        elasticity = math.log1p(dz / policy.z_star) / math.log(
            (1 - policy.t) / (1 - policy.t - policy.delta_t)
        )
    else:
        elasticity = float(es[0]) if policy.delta_t > 0 else math.nan
    diff = tagged.y - tagged.y_ct
    sh = tagged.role == SHIFTER
    if shifter_window is not None:
        sh = sh & (tagged.z_ct > shifter_window[0]) & (tagged.z_ct <= shifter_window[1])
    bu = tagged.role == BUNCHER
    counts = {name: int((tagged.role == i).sum()) for i, name in enumerate(ROLES)}
    return GroundTruth(
        delta_z_star=float(dz),
        elasticity=float(elasticity),
        mu=cfg.mu,
        lam=cfg.lam,
        te_shifter=_mean_or_zero(diff[sh]),
        te_buncher=_mean_or_zero(diff[bu]),
        excess_bunching=float(bu.sum()),
        log_shift=log_shift,
        delta_z_star_up=marginal_response_up(policy, es[0]) if len(es) == 1 else math.nan,
        never_taker_te=cfg.lam * policy.delta_t * policy.z_star,
        role_counts=counts,
        group_delta_z=per_group,
    )
