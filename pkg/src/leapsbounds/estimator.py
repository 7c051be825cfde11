"""Budgeted capped-runtime estimation with optional empirical-Bernstein stopping.

One call measures a configuration on a fixed instance list under an overall
budget ``b * theta`` and a per-run timeout ``tau = 4 theta / (3 delta)``.
It returns either the mean of the observed capped runtimes or the sentinel
``theta`` ("mean is at least theta").

Two execution paths share every formula:

* a sample-by-sample loop that works with any backend, and
* a vectorized prefix evaluation used for :class:`TableBackend`, which performs
  the same floating-point operations in the same order and therefore returns
  bit-identical estimates.
"""
from __future__ import annotations

import enum
import functools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .core import Censoring, InvalidParameter, PhaseSpec, SearchParams, StoppingRule
from .oracle import CensoringError, CostLedger, Measurement, Outcome, TableBackend

EBG_BETA = 1.1
# normalizer of the union bound over the geometric grid, sum_l l^-1.1
EBG_GRID_CONSTANT = 10.5844
_FIRST_CHUNK = 512

log = logging.getLogger(__name__)


class StopReason(str, enum.Enum):
    BUDGET_EXHAUSTED = "budget_exhausted"
    ALL_SAMPLES = "all_samples"
    LB_TOO_LARGE = "lb_too_large"
    BERNSTEIN_CONVERGED = "bernstein_converged"


def bernstein_radius(var_hat: float, range_: float, count: int, log_term: float) -> float:
    """Empirical Bernstein confidence radius around a mean of ``count`` samples in ``[0, range_]``."""
    if var_hat < 0 or not range_ > 0 or count < 1 or not log_term > 0:
        raise InvalidParameter(
            f"bad radius inputs var={var_hat} range={range_} count={count} log={log_term}"
        )
    return math.sqrt(2.0 * var_hat * log_term / count) + 3.0 * range_ * log_term / count


@dataclass(frozen=True)
class EstimatorContext:
    k: int
    n: int
    epsilon: float
    delta: float
    zeta: float
    theta: float
    instances: np.ndarray
    literal_ebg: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "instances", np.asarray(self.instances, dtype=np.int64))
        if len(self.instances) == 0:
            raise InvalidParameter("instance list is empty")
        if self.k < 1 or self.n < 1 or not self.theta > 0:
            raise InvalidParameter("need k >= 1, n >= 1 and theta > 0")

    @property
    def tau(self) -> float:
        return 4.0 * self.theta / (3.0 * self.delta)

    @property
    def b(self) -> int:
        return len(self.instances)

    @classmethod
    def for_phase(cls, phase: PhaseSpec, params: SearchParams, n: int, instances: np.ndarray,
                  literal_ebg: bool = False) -> "EstimatorContext":
        instances = np.asarray(instances)[: phase.b]
        if len(instances) != phase.b:
            raise InvalidParameter(f"phase {phase.k} needs {phase.b} instances, got {len(instances)}")
        return cls(phase.k, n, params.epsilon, params.delta, params.zeta, phase.theta,
                   instances, literal_ebg)


@dataclass(frozen=True)
class EbgState:
    """Position on the geometric grid ``floor(beta^l)`` and the log term ``x`` for it."""

    n: int
    k: int
    zeta: float
    l: int = 0
    alpha: float = math.nan
    d_prime: float = math.nan
    x: float = math.nan
    beta: float = EBG_BETA


def ebg_grid_advance(state: EbgState, j: int, literal: bool = False) -> EbgState:
    """Move to the grid cell containing sample count ``j``.

    By default advances until ``j <= floor(beta^l)``; ``literal=True`` takes at
    most one step per call, which lags where consecutive floors coincide.
    """
    if j < 1:
        raise InvalidParameter("sample count must be >= 1")
    l, alpha, d_prime, x = state.l, state.alpha, state.d_prime, state.x
    beta = state.beta
    scale = 4.0 * EBG_GRID_CONSTANT * state.n * state.k * (state.k + 1) / state.zeta
    while j > math.floor(beta**l):
        l += 1
        alpha = math.floor(beta**l) / math.floor(beta ** (l - 1))
        d_prime = scale * l**1.1
        x = alpha * math.log(3.0 * d_prime)
        if literal:
            break
    if l == state.l:
        return state
    return replace(state, l=l, alpha=alpha, d_prime=d_prime, x=x)


def union_d(n: int, k: int, j: int, zeta: float) -> float:
    return 4.0 * n * k * (k + 1) * j * (j + 1) / zeta


def sample_gate(n: int, k: int, j: int, zeta: float, delta: float) -> int:
    """Minimum sample count before the convergence rule may stop."""
    return math.ceil(32.0 / delta * math.log(union_d(n, k, j, zeta)))


@functools.lru_cache(maxsize=64)
def _log_tables(rule: StoppingRule, n: int, k: int, zeta: float, delta: float, b: int,
                literal: bool) -> tuple[np.ndarray, np.ndarray]:
    """Per-j radius log term and sample gate, index 0 unused."""
    logs = np.full(b + 1, np.nan)
    gates = np.zeros(b + 1, dtype=np.int64)
    state = EbgState(n, k, zeta)
    for j in range(1, b + 1):
        if rule is StoppingRule.EBG:
            state = ebg_grid_advance(state, j, literal)
            logs[j] = state.x
        else:
            logs[j] = math.log(3.0 * union_d(n, k, j, zeta))
        gates[j] = sample_gate(n, k, j, zeta, delta)
    logs.setflags(write=False)
    gates.setflags(write=False)
    return logs, gates


@dataclass
class Estimate:
    config_id: int
    value: float
    reason: StopReason
    samples_used: int
    work_charged: float
    theta: float
    tau: float
    samples: np.ndarray = field(repr=False)
    limits: np.ndarray = field(repr=False)
    instance_ids: np.ndarray = field(repr=False)
    timed_out: np.ndarray = field(repr=False)

    @property
    def below_theta(self) -> bool:
        return self.value < self.theta

    @property
    def measurements(self) -> list[Measurement]:
        out = []
        for q, lim, j, cut in zip(self.samples, self.limits, self.instance_ids, self.timed_out):
            outcome = Outcome.TIMED_OUT if cut else Outcome.FINISHED
            out.append(Measurement(float(q), outcome, self.config_id, int(j), float(lim)))
        return out


def runtime_est(ctx: EstimatorContext, i: int, backend, ledger: Optional[CostLedger] = None,
                rule: StoppingRule = StoppingRule.FIXED, fast: Optional[bool] = None) -> Estimate:
    rule = StoppingRule(rule)
    if fast is None:
        fast = isinstance(backend, TableBackend)
    try:
        if fast:
            est = _runtime_est_table(ctx, i, backend, rule)
        else:
            est = _runtime_est_loop(ctx, i, backend, rule)
    except CensoringError as exc:
        raise exc.with_phase(ctx.k, ctx.tau) from None
    if ledger is not None:
        ledger.charge_many(i, est.instance_ids, est.samples)
    return est


def _runtime_est_loop(ctx: EstimatorContext, i: int, backend, rule: StoppingRule) -> Estimate:
    b, theta, tau = ctx.b, ctx.theta, ctx.tau
    budget = b * theta
    adaptive = rule is not StoppingRule.FIXED
    if adaptive:
        logs, gates = _log_tables(rule, ctx.n, ctx.k, ctx.zeta, ctx.delta, b, ctx.literal_ebg)
    lb_factor = 1.0 + 3.0 * ctx.epsilon / 7.0
    conv = ctx.epsilon / 3.0

    samples, limits, cut = [], [], []
    total = 0.0
    shift = s1 = s2 = 0.0
    for j in range(1, b + 1):
        remaining = budget - total
        limit = min(remaining, tau)
        m = backend.measure(i, int(ctx.instances[j - 1]), limit)
        q = m.elapsed
        samples.append(q)
        limits.append(limit)
        cut.append(m.outcome is Outcome.TIMED_OUT)
        if q >= remaining or budget - (total + q) <= 0:
            return _finish(ctx, i, theta, StopReason.BUDGET_EXHAUSTED, budget, samples, limits, cut)
        total += q
        if j == 1:
            shift = q
        dev = q - shift
        s1 += dev
        s2 += dev * dev
        mean = total / j
        if j == b:
            return _finish(ctx, i, mean, StopReason.ALL_SAMPLES, total, samples, limits, cut)
        if not adaptive or j < 2:
            continue
        var = max((s2 - s1 * s1 / j) / j, 0.0)
        log_term = logs[j]
        c = math.sqrt(2.0 * var * log_term / j) + 3.0 * tau * log_term / j
        lb = mean - c
        if lb_factor * lb >= theta and mean > theta:
            return _finish(ctx, i, theta, StopReason.LB_TOO_LARGE, total, samples, limits, cut)
        if j >= gates[j] and c <= conv * (mean + lb):
            return _finish(ctx, i, mean, StopReason.BERNSTEIN_CONVERGED, total, samples, limits, cut)
    raise AssertionError("unreachable: loop always stops at j == b")


def _finish(ctx, i, value, reason, work, samples, limits, cut) -> Estimate:
    m = len(samples)
    return Estimate(
        config_id=i, value=float(value), reason=reason, samples_used=m, work_charged=float(work),
        theta=ctx.theta, tau=ctx.tau, samples=np.asarray(samples, dtype=np.float64),
        limits=np.asarray(limits, dtype=np.float64), instance_ids=ctx.instances[:m].copy(),
        timed_out=np.asarray(cut, dtype=bool),
    )


def _runtime_est_table(ctx: EstimatorContext, i: int, backend: TableBackend,
                       rule: StoppingRule) -> Estimate:
    b, theta, tau = ctx.b, ctx.theta, ctx.tau
    budget = b * theta
    table = backend.table
    row = table.values[i]
    adaptive = rule is not StoppingRule.FIXED
    if adaptive:
        logs, gates = _log_tables(rule, ctx.n, ctx.k, ctx.zeta, ctx.delta, b, ctx.literal_ebg)
    lb_factor = 1.0 + 3.0 * ctx.epsilon / 7.0
    conv = ctx.epsilon / 3.0

    m = min(b, _FIRST_CHUNK)
    while True:
        raw = row[ctx.instances[:m]]
        r = np.minimum(raw, tau)
        cs = np.cumsum(r)
        prev = np.concatenate(([0.0], cs[:-1]))
        remaining = budget - prev
        exhausted = (r >= remaining) | (budget - cs <= 0)

        jj = np.arange(1, m + 1, dtype=np.float64)
        mean = cs / jj
        stop = exhausted.copy()
        if m == b:
            stop[-1] = True
        if adaptive and m >= 2:
            dev = r - r[0]
            s1 = np.cumsum(dev)
            s2 = np.cumsum(dev * dev)
            var = np.maximum((s2 - s1 * s1 / jj) / jj, 0.0)
            log_term = logs[1 : m + 1]
            c = np.sqrt(2.0 * var * log_term / jj) + 3.0 * tau * log_term / jj
            lb = mean - c
            lb_stop = (lb_factor * lb >= theta) & (mean > theta)
            conv_stop = (jj >= gates[1 : m + 1]) & (c <= conv * (mean + lb))
            lb_stop[0] = conv_stop[0] = False
            stop |= lb_stop | conv_stop
        hits = np.flatnonzero(stop)
        if hits.size == 0:
            m = min(b, 2 * m)
            continue
        s = int(hits[0])
        n_used = s + 1
        limits = np.minimum(remaining[:n_used], tau)

        if backend.censoring is Censoring.STRICT:
            bad = np.flatnonzero((raw[:n_used] >= table.cap) & (limits > table.cap))
            if bad.size:
                v = int(bad[0])
                raise CensoringError(i, int(ctx.instances[v]), float(limits[v]), table.cap)
        elif np.any((raw[:n_used] >= table.cap) & (limits > table.cap)):
            count = int(np.count_nonzero((raw[:n_used] >= table.cap) & (limits > table.cap)))
            log.warning("clamped %d censored cell(s) of config %d to cap %g", count, i, table.cap)

        samples = np.minimum(raw[:n_used], limits)
        head = raw[:n_used]
        timed_out = (head > limits) | ((head >= table.cap) & (limits >= table.cap))
        if exhausted[s]:
            reason, value, work = StopReason.BUDGET_EXHAUSTED, theta, budget
        elif s == b - 1:
            reason, value, work = StopReason.ALL_SAMPLES, mean[s], cs[s]
        elif lb_stop[s]:
            reason, value, work = StopReason.LB_TOO_LARGE, theta, cs[s]
        else:
            reason, value, work = StopReason.BERNSTEIN_CONVERGED, mean[s], cs[s]
        return Estimate(
            config_id=i, value=float(value), reason=reason, samples_used=n_used,
            work_charged=float(work), theta=theta, tau=tau, samples=samples, limits=limits,
            instance_ids=ctx.instances[:n_used].copy(), timed_out=timed_out,
        )
