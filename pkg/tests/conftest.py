from __future__ import annotations

import functools
import math

import numpy as np
import pytest

from kinkbunch import density as density_mod
from kinkbunch.model_core import EstimationConfig, KinkPolicy
from kinkbunch.simulator import SimulationConfig, ground_truth, simulate

INVARIANT_RTOL = 1e-6

# every density estimate produced while the suite runs is checked and tallied here
INVARIANT_LOG: dict[str, int] = {"checked": 0, "violations": 0}
INVARIANT_FAILURES: list[str] = []


def mass_invariant_errors(est) -> list[str]:
    """Integration constraint and always-taker identity on one density estimate."""
    errs = []
    obs = np.asarray(est.observed_counts, dtype=float)
    hct = np.asarray(est.counterfactual_counts, dtype=float)
    total = float(obs.sum())
    gap = abs(float(hct.sum()) - total)
    if gap > INVARIANT_RTOL * max(total, 1.0):
        errs.append(f"{est.method}: counterfactual mass off by {gap:.3g} of {total:.6g}")
    offsets = est.m_min + np.arange(obs.size)
    low = offsets <= -est.geometry.n_left
    diff = np.abs(hct[low] - obs[low])
    tol = INVARIANT_RTOL * np.maximum(np.abs(obs[low]), 1.0)
    if np.any(diff > tol):
        errs.append(f"{est.method}: always-taker bins differ by up to {diff.max():.3g}")
    return errs


def _record(est):
    if est is None or not math.isfinite(float(est.observed_counts.sum())):
        return est
    INVARIANT_LOG["checked"] += 1
    errs = mass_invariant_errors(est)
    if errs:
        INVARIANT_LOG["violations"] += 1
        INVARIANT_FAILURES.extend(errs)
    return est


def _checked(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        return _record(fn(*args, **kwargs))

    return wrapper


@pytest.fixture(autouse=True, scope="session")
def _invariant_hook():
    """Route every relocation and baseline estimate through the mass checks."""
    import kinkbunch.cli as cli_mod

    mp = pytest.MonkeyPatch()
    mp.setattr(density_mod, "_run_engine", _checked(density_mod._run_engine))
    baseline = _checked(density_mod.parallel_shift_baseline)
    mp.setattr(density_mod, "parallel_shift_baseline", baseline)
    if hasattr(cli_mod, "parallel_shift_baseline"):
        mp.setattr(cli_mod, "parallel_shift_baseline", baseline)
    yield
    mp.undo()


@pytest.fixture(scope="session")
def policy() -> KinkPolicy:
    return KinkPolicy(z_star=100.0, t=0.2, delta_t=0.3)


@pytest.fixture(scope="session")
def outcome_config() -> EstimationConfig:
    return EstimationConfig(poly_order_outcome=6, outcome_lower=60.0, outcome_upper=170.0)


@pytest.fixture(scope="session")
def standard_draw(policy):
    cfg = SimulationConfig(seed=0)
    tagged = simulate(cfg, policy)
    return cfg, tagged, ground_truth(cfg, policy, tagged)


@pytest.fixture(scope="session")
def small_draw(policy):
    cfg = SimulationConfig(n_agents=40_000, seed=3)
    tagged = simulate(cfg, policy)
    return cfg, tagged, ground_truth(cfg, policy, tagged)


# one verdict line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def report_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
    terminalreporter.write_line(
        f"mass invariants: {INVARIANT_LOG['checked']} estimates checked, "
        f"{INVARIANT_LOG['violations']} violations"
    )
    for msg in INVARIANT_FAILURES[:20]:
        terminalreporter.write_line(f"  {msg}")


def pytest_sessionfinish(session, exitstatus):
    if INVARIANT_LOG["violations"] and exitstatus == 0:
        session.exitstatus = 1
