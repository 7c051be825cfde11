import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_backend
from leapsbounds.core import InvalidParameter, SearchParams, phase_schedule
from leapsbounds.estimator import (EbgState, EstimatorContext, StopReason, bernstein_radius,
                                   ebg_grid_advance, runtime_est, sample_gate)
from leapsbounds.oracle import CensoringError, CostLedger

RULES = ["fixed", "bernstein", "ebg"]


def test_radius_zero_variance():
    c = bernstein_radius(0.0, 10.0, 100, math.log(3000))
    assert c == pytest.approx(3 * 10 * math.log(3000) / 100)
    assert c == pytest.approx(2.4019, abs=1e-4)


def test_radius_shrinks_with_count():
    radii = [bernstein_radius(0.0, 5.0, j, 4.0) for j in (1, 10, 100, 10**4, 10**6)]
    assert all(a > b for a, b in zip(radii, radii[1:]))
    assert radii[-1] < 1e-4


@pytest.mark.parametrize("args", [(-1.0, 1.0, 5, 1.0), (0.0, 0.0, 5, 1.0), (0.0, 1.0, 0, 1.0),
                                  (0.0, 1.0, 5, 0.0)])
def test_radius_invalid(args):
    with pytest.raises(InvalidParameter):
        bernstein_radius(*args)


def test_radius_coverage_uniform(rng):
    tau, t, trials = 10.0, 50, 10_000
    x = rng.uniform(0, tau, size=(trials, t))
    means, var = x.mean(axis=1), x.var(axis=1)
    log_term = math.log(3 / 0.05)
    c = np.sqrt(2 * var * log_term / t) + 3 * tau * log_term / t
    assert np.mean(np.abs(means - tau / 2) <= c) >= 0.95


def ctx(theta, delta, instances, eps=0.2, n=1, k=1, zeta=0.1):
    return EstimatorContext(k, n, eps, delta, zeta, theta, instances)


@pytest.mark.parametrize("fast", [True, False])
def test_constant_runtime_all_samples(fast):
    est = runtime_est(ctx(10.0, 0.5, [0, 1, 2, 3]), 0, make_backend([[2, 2, 2, 2]]), fast=fast)
    assert (est.value, est.reason, est.work_charged) == (2.0, StopReason.ALL_SAMPLES, 8.0)


@pytest.mark.parametrize("fast", [True, False])
def test_budget_exhausted_on_first_run(fast):
    # T = 2, tau = 8/3: the first run consumes the whole budget
    est = runtime_est(ctx(1.0, 0.5, [0, 1]), 0, make_backend([[2, 2]]), fast=fast)
    assert (est.value, est.reason, est.work_charged, est.samples_used) == \
        (1.0, StopReason.BUDGET_EXHAUSTED, 2.0, 1)
    assert est.samples[0] == 2.0


@pytest.mark.parametrize("fast", [True, False])
def test_tau_capped_sample_with_small_mean(fast):
    est = runtime_est(ctx(10.0, 0.9, [0, 1]), 0, make_backend([[16, 1]]), fast=fast)
    tau = 40 / 2.7
    assert est.samples[0] == pytest.approx(tau)
    assert est.value == pytest.approx((tau + 1) / 2)
    assert est.value == pytest.approx(7.9074, abs=1e-4)
    assert est.reason is StopReason.ALL_SAMPLES
    assert est.timed_out.tolist() == [True, False]


def first_bernstein_stop(theta, eps, delta, n, k, zeta, value=1.0, horizon=200_000):
    """Brute-force scan of the stopping inequalities on a constant sample stream."""
    tau = 4 * theta / (3 * delta)
    for j in range(2, horizon):
        d = 4 * n * k * (k + 1) * j * (j + 1) / zeta
        c = 3 * tau * math.log(3 * d) / j
        lb = value - c
        if (1 + 3 * eps / 7) * lb >= theta and value > theta:
            return j, "lb"
        if j >= math.ceil(32 / delta * math.log(d)) and c <= eps / 3 * (value + lb):
            return j, "conv"
    return None, None


@pytest.mark.parametrize("theta", [16 / 7, 10.0])
def test_bernstein_zero_variance_stop(theta):
    p = SearchParams(0.2, 0.2, 0.1, 1.0)
    b = phase_schedule(p, 10, 1).b
    j_star, kind = first_bernstein_stop(theta, 0.2, 0.2, 10, 1, 0.1)
    be = make_backend([[1.0]])
    est = runtime_est(ctx(theta, 0.2, np.zeros(b, int), n=10), 0, be, rule="bernstein")
    if j_star < b:
        assert kind == "conv"
        assert est.reason is StopReason.BERNSTEIN_CONVERGED
        assert est.samples_used == j_star
        assert est.samples_used < b / 2
    else:
        # with theta = 10 the radius never gets small enough before b samples
        assert est.reason is StopReason.ALL_SAMPLES
        assert est.samples_used == b


def test_grid_boundary_unchanged():
    s = EbgState(2, 1, 0.1)
    assert ebg_grid_advance(s, 1) is s


def test_grid_jumps_to_first_floor_of_two():
    s = ebg_grid_advance(EbgState(2, 1, 0.1), 2)
    assert s.l == 8 and math.floor(1.1**8) == 2 and math.floor(1.1**7) == 1
    assert s.alpha == 2.0


def test_grid_literal_mode_single_step():
    s = ebg_grid_advance(EbgState(2, 1, 0.1), 2, literal=True)
    assert s.l == 1 and s.alpha == 1.0


def test_grid_d_prime():
    s = EbgState(2, 1, 0.1)
    for j in range(1, 100):
        s = ebg_grid_advance(s, j, literal=True)
        if s.l == 5:
            break
    expected = 4 * 10.5844 * 2 * 1 * 2 * 5**1.1 / 0.1
    assert s.d_prime == pytest.approx(expected)
    assert s.d_prime == pytest.approx(9947, abs=1)
    assert s.x == pytest.approx(s.alpha * math.log(3 * expected))


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 5000))
def test_grid_invariant(j):
    s = ebg_grid_advance(EbgState(3, 2, 0.1), j)
    assert math.floor(1.1 ** (s.l - 1)) < j <= math.floor(1.1**s.l) or (s.l == 0 and j == 1)


def random_case(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 60))
    kind = rng.integers(0, 4)
    if kind == 0:
        row = 1.0 + rng.lognormal(0, 1.5, m)
    elif kind == 1:
        row = np.where(rng.random(m) < 0.2, 200.0, 1.0)
    elif kind == 2:
        row = np.full(m, float(rng.uniform(1, 5)))
    else:
        row = rng.uniform(1, 40, m)
    cap = 200.0
    row = np.minimum(row, cap)
    b = int(rng.integers(1, 300))
    inst = rng.integers(0, m, b)
    c = EstimatorContext(int(rng.integers(1, 5)), int(rng.integers(1, 20)),
                         float(rng.uniform(0.05, 0.33)), float(rng.uniform(0.05, 0.95)),
                         float(rng.uniform(0.01, 0.5)), float(rng.uniform(1, 30)), inst,
                         literal_ebg=bool(rng.integers(0, 2)))
    return row, cap, c, RULES[int(rng.integers(0, 3))]


@settings(max_examples=400, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_vectorized_path_is_bit_identical(seed):
    row, cap, c, rule = random_case(seed)
    be = make_backend([row], cap=cap, censoring="clamp")
    a = runtime_est(c, 0, be, rule=rule, fast=True)
    b = runtime_est(c, 0, be, rule=rule, fast=False)
    assert (a.value, a.reason, a.samples_used, a.work_charged) == \
        (b.value, b.reason, b.samples_used, b.work_charged)
    np.testing.assert_array_equal(a.samples, b.samples)
    np.testing.assert_array_equal(a.limits, b.limits)
    np.testing.assert_array_equal(a.timed_out, b.timed_out)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_budget_and_return_invariants(seed):
    row, cap, c, rule = random_case(seed)
    be = make_backend([row], cap=cap, censoring="clamp")
    est = runtime_est(c, 0, be, rule=rule)
    budget = c.b * c.theta
    assert est.work_charged <= budget
    if est.reason is StopReason.BUDGET_EXHAUSTED:
        assert est.work_charged == budget and est.value == c.theta
    if est.reason is StopReason.LB_TOO_LARGE:
        assert est.value == c.theta
    true = np.minimum(row[est.instance_ids], c.tau)
    assert np.all(est.samples <= true)
    if est.value < c.theta:
        np.testing.assert_array_equal(est.samples, true)
        assert est.value == pytest.approx(true.mean())
    if est.reason is StopReason.BERNSTEIN_CONVERGED:
        j = est.samples_used
        assert j >= sample_gate(c.n, c.k, j, c.zeta, c.delta)


def test_ledger_charged_with_samples():
    led = CostLedger(4)
    est = runtime_est(ctx(10.0, 0.5, [0, 1, 1, 3]), 0, make_backend([[2, 3, 4, 5]]), ledger=led)
    assert led.total_no_resume == pytest.approx(est.work_charged)
    assert led.total_resume == pytest.approx(2 + 3 + 5)


@pytest.mark.parametrize("fast", [True, False])
def test_strict_censoring_names_phase(fast):
    be = make_backend([[1.0, 50.0]], cap=50.0)
    c = EstimatorContext(3, 1, 0.2, 0.1, 0.1, 40.0, [0, 1, 0])
    with pytest.raises(CensoringError) as info:
        runtime_est(c, 0, be, fast=fast)
    err = info.value
    assert (err.config_id, err.instance_id, err.phase, err.cap) == (0, 1, 3, 50.0)
    assert err.tau == pytest.approx(c.tau)
    assert "phase 3" in str(err)


def test_empty_instance_list():
    with pytest.raises(InvalidParameter):
        ctx(1.0, 0.5, [])


@pytest.mark.parametrize("rule", RULES)
def test_deterministic(rule):
    row, cap, c, _ = random_case(99)
    be = make_backend([row], cap=cap, censoring="clamp")
    a, b = runtime_est(c, 0, be, rule=rule), runtime_est(c, 0, be, rule=rule)
    assert (a.value, a.samples_used) == (b.value, b.samples_used)
