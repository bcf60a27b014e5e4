from __future__ import annotations

import math
import warnings

import numpy as np
import pytest

from kinkbunch.density import estimate_density
from kinkbunch.effects import run_pipeline
from kinkbunch.extensions import (
    RelabelCost,
    calibrate_bunch_up,
    calibrate_relabel_cost,
    choices_under,
    diffusion_diagnostics,
    estimate_bunch_up,
    estimate_with_stayers,
    log_transform_estimate,
    policy_scan,
    recover_types,
    relabel_adjusted_level_change,
    relabel_forward,
)
from kinkbunch.model_core import IdentificationError, InputError, KinkPolicy, Samples, tax_amount
from kinkbunch.outcome import Calibration, breaks_from_parameters
from kinkbunch.simulator import SimulationConfig, simulate

K = math.sqrt(1.6)


def linear_log_population(n: int, delta_t: float, slope: float = -0.5):
    """Quantile draw whose density in ``ln z`` is exactly linear on ``[ln 40, ln 250]``.

    Shifters move down by a constant in ``ln z`` and carry an outcome effect of -0.4.
    """
    lo, hi, c = math.log(40.0), math.log(250.0), math.log(100.0)
    a, b = 1 + slope * (lo - c), 1 + slope * (hi - c)
    span = hi - lo
    u = (np.arange(n) + 0.5) / n
    curv = (b - a) / (2 * span)
    r_ct = lo + (-a + np.sqrt(a * a + 4 * curv * u * (a + b) / 2 * span)) / (2 * curv)
    shift = 0.5 * math.log(0.8 / (0.8 - delta_t)) if delta_t > 0 else 0.0
    r = np.where(r_ct <= c, r_ct, np.where(r_ct <= c + shift, c, r_ct - shift))
    moved = (r_ct > c + shift) & (delta_t > 0)
    y = 2.0 + 3.0 * r_ct - 0.4 * moved
    return Samples.from_arrays(np.exp(r), y), shift


# stayers -------------------------------------------------------------------


@pytest.fixture(scope="module")
def stayer_fit(policy):
    ts = simulate(SimulationConfig(n_agents=50_000, stayer_share=0.3, seed=0), policy)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return estimate_with_stayers(ts.samples, policy)


def test_stayer_profile_dominates_no_stayers(stayer_fit):
    assert 0.0 in stayer_fit.alpha_grid
    assert 0.0 <= stayer_fit.alpha <= 1.0
    assert 0.0 <= stayer_fit.mse <= stayer_fit.mse_alpha0
    assert stayer_fit.mse == pytest.approx(np.nanmin(stayer_fit.mse_profile))
    assert stayer_fit.delta_z_star > 0


def test_stayer_grid_must_lie_in_unit_interval(small_draw, policy):
    _, ts, _ = small_draw
    with pytest.raises(InputError):
        estimate_with_stayers(ts.samples, policy, alpha_grid=[0.0, 1.2])


def test_flat_profile_is_flagged(small_draw, policy):
    _, ts, _ = small_draw
    with pytest.warns(UserWarning, match="weakly identified"):
        est = estimate_with_stayers(ts.samples, policy, alpha_grid=[0.0, 0.1], refine=False,
                                    flat_tolerance=10.0)
    assert est.weakly_identified


def test_all_stayers_means_no_bunching(policy):
    ts = simulate(SimulationConfig(n_agents=40_000, stayer_share=1.0, seed=0), policy)
    res = run_pipeline(ts.samples, policy)
    assert res.density.no_bunching
    assert res.te_buncher == 0.0 and res.calibration is None


# log transform --------------------------------------------------------------


def test_log_transform_exact_on_linear_log_density(policy):
    samples, shift = linear_log_population(400_000, 0.3)
    lt = log_transform_estimate(samples, policy)
    assert lt.linear
    assert lt.log_shift == pytest.approx(shift, rel=1e-3)
    assert lt.te_shifter == pytest.approx(-0.4, rel=1e-3)
    assert lt.outcome_slope == pytest.approx(3.0, rel=1e-3)


def test_log_transform_matches_core_under_homogeneity(policy):
    samples, shift = linear_log_population(400_000, 0.3)
    lt = log_transform_estimate(samples, policy)
    core = estimate_density(samples, policy)
    assert lt.delta_z_star == pytest.approx(core.delta_z_star, rel=0.02)


def test_log_transform_no_kink_no_shift():
    pol = KinkPolicy(100.0, 0.2, 0.0)
    samples, _ = linear_log_population(400_000, 0.0)
    lt = log_transform_estimate(samples, pol)
    assert abs(lt.log_shift) < 1e-3


def test_log_transform_flags_curved_density(policy):
    ts = simulate(SimulationConfig(seed=0), policy)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        lt = log_transform_estimate(ts.samples, policy)
    assert not lt.linear and lt.warnings


def test_shifters_move_by_a_constant_in_logs(small_draw, policy):
    _, ts, truth = small_draw
    sh = ts.role_mask("shifter")
    gap = np.log(ts.z_ct[sh]) - np.log(ts.z[sh])
    np.testing.assert_allclose(gap, math.log1p(truth.delta_z_star / policy.z_star), rtol=1e-12)


# relabelling ----------------------------------------------------------------


def test_relabel_degrees_for_quadratic_cost(policy):
    sol = relabel_forward(policy, 2.0)
    assert sol.delta_ct == pytest.approx(0.1)
    assert sol.delta_shift == pytest.approx(0.25)
    # net returns 1 - r (1 - d) - c d^2 / 2 below and above
    f_ct, f_sh = 1 - 0.2 * 0.9 - 0.01, 1 - 0.5 * 0.75 - 0.0625
    ratio = math.sqrt(f_ct / f_sh) * 0.9 / 0.75
    assert sol.reported_response == pytest.approx(100.0 * (ratio - 1.0), rel=1e-12)
    assert sol.reported_response == pytest.approx(44.0, rel=1e-9)


def test_relabel_map_branches(policy):
    sol = relabel_forward(policy, 2.0)
    n_low = 100.0 / (sol.factor_ct ** 0.5 * 0.9)
    n_high = 100.0 / (sol.factor_shift ** 0.5 * 0.75)
    n = np.array([0.5 * n_low, 0.5 * (n_low + n_high), 2.0 * n_high])
    z_rp, z_rl, branch = sol.map(n)
    assert branch.tolist() == [0, 1, 2]
    assert z_rp[1] == 100.0
    assert z_rl[1] > 100.0 and z_rl[0] == pytest.approx(z_rp[0] / 0.9)
    assert z_rp[2] == pytest.approx(z_rl[2] * 0.75)


def test_relabel_limit_is_the_baseline(policy):
    none = relabel_forward(policy, math.inf)
    assert none.delta_ct == 0.0 and none.delta_shift == 0.0
    assert none.reported_response == pytest.approx(100.0 * (K - 1.0), rel=1e-12)
    far = relabel_forward(policy, 1e6)
    assert far.reported_response == pytest.approx(none.reported_response, rel=1e-3)


def test_relabel_rejects_degrees_at_one(policy):
    with pytest.raises(InputError):
        relabel_forward(policy, 0.4)
    with pytest.raises(InputError):
        relabel_adjusted_level_change(10.0, 0.05, 0.4, policy, 26.4911)
    with pytest.raises(InputError):
        RelabelCost.quadratic(0.0)


def test_relabel_adjusted_breaks(policy):
    dz = 100.0 * (K - 1.0)
    a0, a1 = relabel_adjusted_level_change(10.0, 0.05, 2.0, policy, dz)
    r = 1.0 / K
    exact = 10.0 * (r * 0.9 / 0.75 - 1.0) - 0.05 * 0.5 * 100.0 * (r - 1.0)
    assert a0 == pytest.approx(exact, rel=1e-12)
    # 0.010407 is the same sum with intermediates rounded to five digits
    assert a0 == pytest.approx(0.010407, abs=5e-6)
    assert a1 == pytest.approx(breaks_from_parameters(10.0, 0.05, dz, policy)[1], rel=1e-12)
    assert relabel_adjusted_level_change(0.0, 0.0, 2.0, policy, dz) == (0.0, 0.0)
    plain = breaks_from_parameters(10.0, 0.05, dz, policy, "linear_share")
    inf = relabel_adjusted_level_change(10.0, 0.05, math.inf, policy, dz)
    assert inf == pytest.approx(plain, rel=1e-12)


def test_cost_calibration_recovers_synthetic_breaks():
    mu, lam, c = 10.0, 0.05, 3.0
    obs = []
    for pol in (KinkPolicy(100.0, 0.2, 0.3), KinkPolicy(300.0, 0.1, 0.4)):
        dz = relabel_forward(pol, c).reported_response
        a0, a1 = relabel_adjusted_level_change(mu, lam, c, pol, dz)
        obs.append((pol, a0, a1, dz))
    mu_h, lam_h, c_h, rss = calibrate_relabel_cost(obs)
    assert rss < 1e-12
    assert (mu_h, lam_h, c_h) == pytest.approx((mu, lam, c), rel=1e-4)
    with pytest.raises(InputError):
        calibrate_relabel_cost(obs[:1])


# bunching up ----------------------------------------------------------------


def test_bunch_up_calibration_round_trip(policy):
    mu, lam, d = 10.0, 0.05, 100.0 * (1.0 - 1.0 / K)
    k = 100.0 / (100.0 - d)
    slope = 0.2 * k - 0.5
    a1 = -lam * slope
    a0 = mu * math.log(k) - lam * 0.3 * 100.0 - lam * 100.0 * slope
    cal = calibrate_bunch_up(a0, a1, d, policy)
    assert (cal.mu, cal.lam) == pytest.approx((mu, lam), rel=1e-12)
    assert cal.e == pytest.approx(0.5, rel=1e-12)
    with pytest.raises(IdentificationError):
        calibrate_bunch_up(a0, a1, 0.0, policy)
    with pytest.raises(InputError):
        calibrate_bunch_up(a0, a1, 100.0, policy)


def test_bunch_up_on_small_draw(small_draw, policy, outcome_config):
    _, ts, _ = small_draw
    up = estimate_bunch_up(ts.samples, policy, outcome_config)
    assert up.converged
    assert up.delta_z_star_act == pytest.approx(100.0 * (1.0 - 1.0 / K), rel=0.05)
    assert up.elasticity == pytest.approx(0.5, rel=0.05)
    assert up.never_taker_te == pytest.approx(up.calibration.lam * 30.0)


# diffusion ------------------------------------------------------------------


def _diag(policy, ability, **kw):
    cfg = SimulationConfig(n_agents=100_000, ability=ability, seed=0, **kw)
    ts = simulate(cfg, policy)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = run_pipeline(ts.samples, policy)
    return diffusion_diagnostics(ts.samples, res.density, res.outcome)


def test_flat_world_has_flat_diagnostics(policy):
    d = _diag(policy, ("uniform", 20.0, 400.0), mu=0.0, lam=0.0, y_pre_coeffs=(5.0,))
    assert abs(d.density_slope) < 0.1 and abs(d.outcome_slope) < 1e-6
    assert not d.flagged
    assert d.excess_spread_bins == 1


def test_steep_density_is_flagged(policy):
    d = _diag(policy, ("exponential", 1 / 40.0))
    assert d.density_slope < -1.0 and d.flagged


def test_diffuse_excess_spreads(policy):
    diffuse = policy.with_(u1=7.5, u2=7.5)
    d = _diag(diffuse, ("lognormal", math.log(130.0), 0.5), diffusion_sigma=2.5)
    assert d.excess_spread_bins > 1 and d.excess_sd > 1.0


# policy scan ----------------------------------------------------------------


def test_policy_scan_reproduces_the_observed_world(small_draw, policy):
    cfg, ts, truth = small_draw
    cal = Calibration(cfg.mu, cfg.lam, 0.5, "log_share")
    rows = policy_scan(ts.samples, policy, cal, [policy.with_(delta_t=0.0), policy.with_(delta_t=0.6)])
    base = rows[0]
    assert base.total_z == pytest.approx(ts.z.sum(), rel=1e-12)
    assert base.total_payment == pytest.approx(tax_amount(policy, ts.z).sum(), rel=1e-12)
    assert base.mean_outcome == pytest.approx(ts.y.mean(), rel=1e-12)
    assert rows[1].total_z == max(r.total_z for r in rows)
    assert rows[2].total_z == min(r.total_z for r in rows)


def test_recovered_types_rebuild_choices(small_draw, policy):
    cfg, ts, _ = small_draw
    cal = Calibration(cfg.mu, cfg.lam, 0.5, "log_share")
    n, y_pre = recover_types(ts.samples, policy, cal)
    np.testing.assert_allclose(choices_under(policy, n, 0.5), ts.z, rtol=1e-12)
    off = ~ts.role_mask("buncher")
    np.testing.assert_allclose(n[off], ts.n[off], rtol=1e-12)
    np.testing.assert_allclose(y_pre[off], ts.y_pre[off], rtol=1e-9, atol=1e-9)
    with pytest.raises(IdentificationError):
        recover_types(ts.samples, policy, Calibration(10.0, 0.05, None, "log_share"))
