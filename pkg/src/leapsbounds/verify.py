"""Ground truth over full tables: OPT, (epsilon, delta)-optimality, and event frequencies.

With a table, the instance distribution is uniform over its columns, so every
expectation and tail probability below is an exact finite average.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np

from .core import ProblemSpec, RuntimeTable, SearchParams
from .driver import SearchResult, leaps_and_bounds
from .oracle import TableBackend

# slack for comparing a count against delta * m in floating point
_TAIL_SLACK = 1e-12


class QuantileCensored(RuntimeError):
    """The threshold needed for a tail bound lies at the table cap."""


class OptMean(NamedTuple):
    value: float
    config_id: int
    censoring_bias: bool


def opt_mean(table: RuntimeTable) -> OptMean:
    """Smallest row mean. Censored cells count at the cap, which biases OPT low."""
    means = table.values.mean(axis=1)
    best = int(np.argmin(means))
    return OptMean(float(means[best]), best, bool(table.censored.any()))


@dataclass(frozen=True)
class OptimalityWitness:
    is_optimal: bool
    witness_tau: Optional[float]
    capped_mean_at_tau: float
    tail_prob_at_tau: float
    opt: float
    censoring_bias: bool = False


def quantile_threshold(row: np.ndarray, delta: float) -> tuple[float, float]:
    """Smallest observed runtime ``t`` with ``P(R > t) <= delta``; returns ``(t, P(R > t))``."""
    if not 0.0 <= delta < 1.0:
        raise ValueError(f"delta must lie in [0, 1), got {delta}")
    ordered = np.sort(row)
    m = len(ordered)
    distinct = np.unique(ordered)
    exceed = m - np.searchsorted(ordered, distinct, side="right")
    ok = np.flatnonzero(exceed <= delta * m * (1 + _TAIL_SLACK))
    t = float(distinct[ok[0]])
    return t, float(exceed[ok[0]]) / m


def _threshold_checked(table: RuntimeTable, i: int, delta: float, strict: bool) -> tuple[float, float]:
    row = table.values[i]
    t, tail = quantile_threshold(row, delta)
    if t >= table.cap and strict:
        raise QuantileCensored(
            f"config {i}: the delta={delta} threshold falls on censored cells at cap {table.cap}"
        )
    return t, tail


def capped_mean_below_quantile(table: RuntimeTable, i: int, delta: float, strict: bool = True) -> float:
    t, _ = _threshold_checked(table, i, delta, strict)
    return float(np.minimum(table.values[i], t).mean())


def check_eps_delta_optimal(table: RuntimeTable, i: int, epsilon: float, delta: float,
                            strict: bool = True) -> OptimalityWitness:
    """Exact (epsilon, delta)-optimality of configuration ``i`` under the table's distribution.

    The capped mean grows and the tail shrinks with the threshold, so only the
    smallest threshold meeting the tail constraint needs checking.
    """
    opt = opt_mean(table)
    t, tail = _threshold_checked(table, i, delta, strict)
    capped = float(np.minimum(table.values[i], t).mean())
    return OptimalityWitness(
        is_optimal=capped <= (1.0 + epsilon) * opt.value,
        witness_tau=t,
        capped_mean_at_tau=capped,
        tail_prob_at_tau=tail,
        opt=opt.value,
        censoring_bias=opt.censoring_bias,
    )


def quantile_curve(table: RuntimeTable, delta: float, strict: bool = True) -> list[tuple[int, int, float]]:
    """``(rank, config_id, value)`` rows sorted by capped mean below the delta quantile."""
    values = [capped_mean_below_quantile(table, i, delta, strict) for i in range(table.n_configs)]
    order = sorted(range(table.n_configs), key=lambda i: (values[i], i))
    return [(rank, i, values[i]) for rank, i in enumerate(order)]


def capped_truth(table: RuntimeTable, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-configuration ``(P(R > tau), E[min(R, tau)])`` by a full scan."""
    v = table.values
    return (v > tau).mean(axis=1), np.minimum(v, tau).mean(axis=1)


def capped_truth_streaming(table: RuntimeTable, tau: float, chunk: int = 257) -> tuple[np.ndarray, np.ndarray]:
    """Same quantities accumulated over column blocks with exact summation."""
    n, m = table.values.shape
    exceed = np.zeros(n, dtype=np.int64)
    partial: list[list[float]] = [[] for _ in range(n)]
    for start in range(0, m, chunk):
        block = table.values[:, start : start + chunk]
        exceed += (block > tau).sum(axis=1)
        capped = np.minimum(block, tau)
        for i in range(n):
            partial[i].extend(capped[i].tolist())
    return exceed / m, np.array([math.fsum(p) / m for p in partial])


def event_radius(sigma_hat: float, tau: float, b: int, n: int, k: int, zeta: float) -> float:
    log_term = math.log(6.0 * n * k * (k + 1) / zeta)
    return sigma_hat * math.sqrt(2.0 * log_term / b) + 3.0 * tau * log_term / b


@dataclass
class EventStats:
    trials: int = 0
    pairs: int = 0
    e1_violations: int = 0
    e2_violations: int = 0
    trials_with_violation: int = 0
    radii: list[float] = field(default_factory=list, repr=False)

    @property
    def frequency(self) -> float:
        return self.trials_with_violation / self.trials if self.trials else 0.0


def trial_seed(seed: int, trial: int) -> int:
    return int(np.random.SeedSequence([seed, trial]).generate_state(1, np.uint64)[0])


def phase_events(table: RuntimeTable, result: SearchResult, stats: EventStats) -> bool:
    """Tally both events for every (configuration, phase) of one search; True if any failed."""
    params = result.params
    n = len(result.config_ids)
    failed = False
    truth_cache: dict[float, tuple[np.ndarray, np.ndarray]] = {}
    for record in result.phases:
        ph = record.phase
        if ph.tau not in truth_cache:
            truth_cache[ph.tau] = capped_truth(table, ph.tau)
        tail, capped_mean = truth_cache[ph.tau]
        ids = result.instances.prefix(ph.b)
        for est in record.estimates:
            i = est.config_id
            stats.pairs += 1
            if est.value < ph.theta and tail[i] > params.delta:
                stats.e1_violations += 1
                failed = True
            sample = np.minimum(table.values[i, ids], ph.tau)
            r_bar = float(sample.mean())
            radius = event_radius(float(sample.std()), ph.tau, ph.b, n, ph.k, params.zeta)
            stats.radii.append(radius)
            if abs(r_bar - capped_mean[i]) > radius:
                stats.e2_violations += 1
                failed = True
    return failed


def event_harness(table: RuntimeTable, params: SearchParams, trials: int, seed: int,
                  threads: int = 1) -> EventStats:
    """Run seeded searches and count failures of the tail event and the mean-deviation event."""
    stats = EventStats()
    backend = TableBackend(table)
    for t in range(trials):
        s = trial_seed(seed, t)
        trial_params = replace(params, seed=s)
        problem = ProblemSpec.from_table(table, backend, seed=s, kappa0=params.kappa0)
        result = leaps_and_bounds(problem, trial_params, threads=threads)
        stats.trials += 1
        if phase_events(table, result, stats):
            stats.trials_with_violation += 1
    return stats


def check_result(table: RuntimeTable, result: SearchResult, strict: bool = True) -> OptimalityWitness:
    p = result.params
    return check_eps_delta_optimal(table, result.chosen, p.epsilon, p.delta, strict)

