from __future__ import annotations

import math
import warnings

import numpy as np
import pytest

from kinkbunch.effects import (
    BootstrapError,
    bootstrap_pipeline,
    buncher_outcome_sharp,
    run_pipeline,
    structural_buncher_effect,
)
from kinkbunch.model_core import InputError, KinkPolicy, ThinMassError
from kinkbunch.simulator import SimulationConfig, ground_truth, simulate


def test_buncher_outcome_from_mixture():
    # 30 bunchers at 2.0 share the bin with 10 counterfactual agents at 6.0
    y = (30 * 2.0 + 10 * 6.0) / 40
    assert buncher_outcome_sharp(40.0, 10.0, y, 6.0) == pytest.approx(2.0)
    assert buncher_outcome_sharp(40.0, 0.0, 3.5, 9.0) == 3.5
    with pytest.raises(ThinMassError):
        buncher_outcome_sharp(100.0, 99.0, 1.0, 1.0)


def test_structural_effect_by_hand(policy):
    z = np.array([110.0, 120.0])
    w = np.array([1.0, 3.0])
    by_hand = [10.0 * math.log(100.0 / zi) - 0.05 * (100.0 - zi) * 0.2 for zi in z]
    expected = (by_hand[0] + 3 * by_hand[1]) / 4
    assert structural_buncher_effect(10.0, 0.05, z, w, policy) == pytest.approx(expected)
    assert structural_buncher_effect(10.0, 0.05, np.zeros(0), np.zeros(0), policy) == 0.0


def test_pipeline_on_small_draw(small_draw, policy, outcome_config):
    cfg, ts, _ = small_draw
    res = run_pipeline(ts.samples, policy, outcome_config)
    assert res.converged and res.mode == "sharp"
    assert res.calibration is not None
    truth = ground_truth(cfg, policy, ts, shifter_window=res.outcome.window)
    assert res.te_shifter == pytest.approx(truth.te_shifter, rel=0.1)
    assert res.te_buncher == pytest.approx(truth.te_buncher, rel=0.1)


def test_pipeline_without_kink_reports_no_bunchers(outcome_config):
    pol = KinkPolicy(100.0, 0.2, 0.0)
    ts = simulate(SimulationConfig(n_agents=40_000, seed=8), pol)
    res = run_pipeline(ts.samples, pol, outcome_config)
    if res.density.no_bunching or res.density.delta_z_star <= 0:
        assert res.te_buncher == 0.0 and res.calibration is None
        assert any("no bunching" in n for n in res.notes)
    assert abs(res.te_shifter) < 0.1


def test_bootstrap_is_reproducible_across_workers(small_draw, policy, outcome_config):
    _, ts, _ = small_draw
    a = bootstrap_pipeline(ts.samples, policy, outcome_config, reps=8, seed=11, workers=1)
    b = bootstrap_pipeline(ts.samples, policy, outcome_config, reps=8, seed=11, workers=2)
    assert a.se_mu == b.se_mu and a.se_te_shifter == b.se_te_shifter
    assert a.bootstrap_reps == 8 and a.failures == 0
    assert a.se_delta_z > 0


def test_bootstrap_argument_checks(small_draw, policy):
    _, ts, _ = small_draw
    with pytest.raises(InputError):
        bootstrap_pipeline(ts.samples, policy, reps=1)

    def broken(rng, n):
        # every replicate holds one agent, which cannot span the threshold
        return np.zeros(n, dtype=np.int64)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(BootstrapError):
            bootstrap_pipeline(ts.samples, policy, reps=4, resample=broken)
