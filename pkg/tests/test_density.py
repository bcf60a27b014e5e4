from __future__ import annotations

import math
import warnings

import numpy as np
import pytest

from kinkbunch.density import (
    SortedSample,
    bracket_upper,
    calibrate_elasticity,
    default_window,
    density_update,
    estimate_density,
    excess_mass_profile,
    make_geometry,
    parallel_shift_baseline,
    snap_widths,
    update_delta_z,
)
from kinkbunch.model_core import (
    EstimationConfig,
    IdentificationError,
    InputError,
    InsufficientMassError,
    KinkPolicy,
    Samples,
)
from kinkbunch.simulator import SimulationConfig, simulate

from conftest import mass_invariant_errors


def test_update_inverts_a_flat_counterfactual():
    # 10 agents per bin of width 2.5, 25 excess agents -> exactly 2.5 bins
    assert update_delta_z(25.0, np.full(20, 10.0), 2.5) == pytest.approx(6.25)
    assert update_delta_z(0.0, np.full(3, 10.0), 2.5) == 0.0
    with pytest.raises(InsufficientMassError):
        update_delta_z(100.0, np.full(3, 10.0), 2.5)


def test_update_with_sloped_counterfactual():
    h = np.array([4.0, 3.0, 2.0, 1.0])
    # 4 + 3 = 7 reaches the first two bins, one more agent is half of bin 3
    assert update_delta_z(8.0, h, 1.0) == pytest.approx(2.5)


def test_elasticity_from_response(policy):
    dz = 100.0 * (math.sqrt(0.8 / 0.5) - 1.0)
    assert dz == pytest.approx(26.4911, abs=1e-4)
    assert calibrate_elasticity(dz, policy) == pytest.approx(0.5, rel=1e-12)
    with pytest.raises(IdentificationError):
        calibrate_elasticity(10.0, KinkPolicy(100.0, 0.5, 0.5))
    with pytest.raises(IdentificationError):
        calibrate_elasticity(10.0, KinkPolicy(100.0, 0.2, 0.0))


def test_snap_and_geometry():
    assert snap_widths(0.0, 0.0, 2.5) == (1, 0)
    assert snap_widths(3.0, 5.0, 2.5) == (2, 2)
    g = make_geometry(100.0, 3.0, 5.0, 2.5, 50.0, 200.0)
    assert (g.n_left, g.n_right, g.m_lo, g.m_hi) == (2, 2, -19, 40)
    assert bracket_upper(g, 4) > 0


def test_default_window_clips_to_data(policy):
    assert default_window(policy, EstimationConfig(), 70.0, 500.0) == (70.0, 200.0)
    with pytest.raises(InputError):
        default_window(policy, EstimationConfig(fit_upper=90.0), 10.0, 500.0)


def test_sample_must_span_threshold(policy):
    with pytest.raises(InputError):
        estimate_density(Samples.from_arrays(np.linspace(110, 200, 50)), policy)


def test_recovers_response_on_small_draw(small_draw, policy):
    _, tagged, truth = small_draw
    est = estimate_density(tagged.samples, policy)
    assert est.converged
    assert est.delta_z_star == pytest.approx(truth.delta_z_star, rel=0.06)
    assert est.excess_bunching == pytest.approx(truth.excess_bunching, rel=0.1)
    assert not mass_invariant_errors(est)


def test_fixed_point_is_self_consistent(small_draw, policy):
    _, tagged, _ = small_draw
    cfg = EstimationConfig()
    est = estimate_density(tagged.samples, policy, cfg)
    new, b = density_update(tagged.samples, policy, cfg, est.delta_z_star)
    assert abs(new - est.delta_z_star) <= 2 * cfg.tolerance_for(policy)
    assert b > 0


def test_update_corrects_toward_the_fixed_point(small_draw, policy):
    _, tagged, _ = small_draw
    cfg = EstimationConfig()
    dz = estimate_density(tagged.samples, policy, cfg).delta_z_star
    low, _ = density_update(tagged.samples, policy, cfg, 0.3 * dz)
    high, _ = density_update(tagged.samples, policy, cfg, 2.0 * dz)
    assert low > 0.3 * dz
    assert high < 2.0 * dz


def test_no_kink_gives_no_bunching():
    policy = KinkPolicy(100.0, 0.2, 0.0)
    tagged = simulate(SimulationConfig(n_agents=40_000, seed=5), policy)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        est = estimate_density(tagged.samples, policy)
    assert est.delta_z_star < 2.0
    assert not mass_invariant_errors(est)


def test_baseline_closes_mass_and_counts(small_draw, policy):
    _, tagged, truth = small_draw
    base = parallel_shift_baseline(tagged.samples, policy)
    assert base.method == "parallel_shift"
    assert base.excess_bunching > 0
    assert not mass_invariant_errors(base)


def test_diffuse_window_estimate(policy):
    diffuse = policy.with_(u1=5.0, u2=5.0)
    cfg = SimulationConfig(n_agents=100_000, diffusion_sigma=2.0, seed=2)
    tagged = simulate(cfg, diffuse)
    est = estimate_density(tagged.samples, diffuse)
    assert est.converged
    assert est.geometry.n_left == 2 and est.geometry.n_right == 2
    assert est.shifter_diffuse_counts.size == 2
    assert not mass_invariant_errors(est)


def test_excess_mass_profile_peaks_at_threshold(small_draw, policy):
    _, tagged, _ = small_draw
    centers, excess = excess_mass_profile(tagged.samples, policy)
    # the threshold bin is (97.5, 100]
    assert centers[np.argmax(excess)] == pytest.approx(98.75)


def test_sorted_sample_mass():
    fr = SortedSample.from_samples(Samples.from_arrays([3.0, 1.0, 2.0], weight=[1.0, 2.0, 3.0]))
    assert fr.z.tolist() == [1.0, 2.0, 3.0]
    assert fr.total == 6.0
    np.testing.assert_allclose(fr.mass_le(np.array([0.5, 2.0, 9.0])), [0.0, 5.0, 6.0])
