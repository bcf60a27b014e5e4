from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from kinkbunch.density import estimate_density, density_update, update_delta_z
from kinkbunch.extensions import choices_under, relabel_forward
from kinkbunch.model_core import EstimationConfig, KinkPolicy, bin_index, level_share, tax_amount
from kinkbunch.outcome import breaks_from_parameters, calibrate_mu_lambda
from kinkbunch.simulator import BUNCHER, SHIFTER, SimulationConfig, marginal_response, simulate

rates = st.floats(0.0, 0.6)
kinks = st.floats(0.05, 0.35)


@st.composite
def policies(draw):
    return KinkPolicy(draw(st.floats(10.0, 1000.0)), draw(rates), draw(kinks))


@given(policies(), st.floats(0.0, 5000.0))
def test_payment_is_continuous_and_convex(policy, z):
    eps = 1e-6 * policy.z_star
    below = tax_amount(policy, policy.z_star - eps)
    above = tax_amount(policy, policy.z_star + eps)
    assert above - below == pytest.approx(2 * eps * policy.t + eps * policy.delta_t, abs=1e-9 * policy.z_star)
    assert tax_amount(policy, z) >= policy.t * z - 1e-9


@given(policies(), st.floats(-50.0, 50.0), st.floats(0.001, 1.0), st.floats(0.01, 0.9),
       st.sampled_from(["log_share", "linear_share"]))
def test_breaks_round_trip(policy, mu, lam, frac, convention):
    dz = frac * policy.z_star
    r = policy.z_star / (policy.z_star + dz)
    assume(abs((policy.t + policy.delta_t) * r - policy.t) > 1e-3)
    a0, a1 = breaks_from_parameters(mu, lam, dz, policy, convention)
    cal = calibrate_mu_lambda(a0, a1, dz, policy, convention)
    assert cal.mu == pytest.approx(mu, rel=1e-8, abs=1e-8)
    assert cal.lam == pytest.approx(lam, rel=1e-8)


@given(st.lists(st.floats(0.0, 1e4), min_size=1, max_size=30), st.floats(0.01, 1.0), st.floats(0.1, 10.0))
def test_update_is_monotone_in_excess(h, share, width):
    h = np.asarray(h)
    total = float(h.sum())
    assume(total > 0)
    small = update_delta_z(share * 0.5 * total, h, width)
    large = update_delta_z(share * total, h, width)
    assert 0.0 <= small <= large <= width * h.size + 1e-9


@given(st.floats(1.0, 1e4), st.integers(1, 40), st.floats(0.1, 10.0))
def test_update_on_flat_counterfactual(level, n_bins, width):
    excess = 0.5 * level * n_bins
    assert update_delta_z(excess, np.full(n_bins, level), width) == pytest.approx(0.5 * n_bins * width)


@given(st.integers(-1000, 1000), st.floats(1e-6, 1.0), st.floats(0.5, 20.0))
def test_bins_are_right_closed(i, frac, width):
    # positions within the rounding slack just above an edge belong to the bin below
    origin = 3.0
    z = origin + (i + frac) * width
    assert bin_index(z, origin, width) == i


@given(st.floats(0.01, 100.0))
def test_linear_share_dominates_log_share(x):
    assert level_share(x, "linear_share") >= level_share(x, "log_share") - 1e-12


@given(policies(), st.floats(0.05, 1.5), st.lists(st.floats(1.0, 5000.0), min_size=2, max_size=50))
def test_choices_are_monotone_in_ability(policy, e, n):
    n = np.sort(np.asarray(n))
    z = choices_under(policy, n, e)
    assert np.all(np.diff(z) >= -1e-9)
    assert np.all(z <= n * (1 - policy.t) ** e + 1e-9)


@given(policies(), st.floats(0.05, 1.5))
def test_higher_kink_means_larger_response(policy, e):
    assume(policy.t + policy.delta_t + 0.05 < 1.0)
    steeper = policy.with_(delta_t=policy.delta_t + 0.05)
    assert marginal_response(steeper, e) > marginal_response(policy, e)


@given(st.floats(0.6, 1e5))
def test_relabelling_shrinks_toward_baseline(c):
    pol = KinkPolicy(100.0, 0.2, 0.3)
    sol = relabel_forward(pol, c)
    base = relabel_forward(pol, math.inf)
    assert sol.reported_response >= base.reported_response - 1e-9
    assert relabel_forward(pol, 2 * c).reported_response <= sol.reported_response + 1e-9


@settings(max_examples=15, deadline=None)
@given(st.floats(0.1, 0.4), st.floats(0.05, 0.4), st.floats(0.2, 1.0), st.integers(0, 10_000))
def test_simulated_roles_follow_the_choice_rule(t, dt, e, seed):
    pol = KinkPolicy(100.0, t, dt)
    ts = simulate(SimulationConfig(n_agents=2_000, e=e, seed=seed), pol)
    k = 1.0 + marginal_response(pol, e) / 100.0
    sh = ts.role == SHIFTER
    bu = ts.role == BUNCHER
    np.testing.assert_allclose(ts.z_ct[sh] / ts.z[sh], k, rtol=1e-10)
    assert np.all((ts.z_ct[bu] > 100.0) & (ts.z_ct[bu] <= 100.0 * k * (1 + 1e-12)))
    assert np.all(ts.z[bu] == 100.0)


@pytest.mark.parametrize("guess", [1.0, 10.0, 50.0])
def test_starting_guess_does_not_matter(small_draw, policy, guess):
    _, ts, _ = small_draw
    cfg = EstimationConfig()
    ref = estimate_density(ts.samples, policy, cfg)
    est = estimate_density(ts.samples, policy, cfg, initial_guess=guess)
    assert abs(est.delta_z_star - ref.delta_z_star) <= cfg.tolerance_for(policy)


@pytest.mark.parametrize("scale", [0.25, 0.5, 0.8, 1.25, 1.6, 2.0])
def test_update_points_back_to_the_fixed_point(small_draw, policy, scale):
    _, ts, _ = small_draw
    cfg = EstimationConfig()
    fixed = estimate_density(ts.samples, policy, cfg).delta_z_star
    guess = scale * fixed
    new, _ = density_update(ts.samples, policy, cfg, guess)
    # the update moves toward the fixed point and does not overshoot past it
    assert (new - guess) * (fixed - guess) > 0
