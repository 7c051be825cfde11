"""The phase loop: guess a mean-runtime bound, estimate everyone, grow the guess."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .core import (InvalidParameter, PhaseSpec, ProblemSpec, SearchParams, phase_schedule,
                   subsample_configs, subsample_size)
from .estimator import Estimate, EstimatorContext, runtime_est
from .oracle import CostLedger

log = logging.getLogger(__name__)


class PhaseLimitReached(RuntimeError):
    pass


@dataclass(frozen=True)
class InstanceList:
    """Sampled instance ids; only ever grows by appending."""

    ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.ids)

    def prefix(self, length: int) -> np.ndarray:
        return self.ids[:length]


def extend_instance_list(instances: InstanceList, sampler, target_len: int) -> InstanceList:
    missing = target_len - len(instances)
    if missing < 0:
        raise InvalidParameter(f"cannot shrink instance list from {len(instances)} to {target_len}")
    if missing == 0:
        return instances
    return InstanceList(np.concatenate([instances.ids, sampler.sample(missing)]))


@dataclass
class PhaseRecord:
    phase: PhaseSpec
    estimates: list[Estimate]
    ledger_after: dict[str, float]

    @property
    def best_index(self) -> int:
        values = [e.value for e in self.estimates]
        return int(np.argmin(values))  # first minimum, i.e. lowest index on ties


@dataclass
class SearchResult:
    chosen: int
    chosen_index: int
    final_phase: int
    theta: float
    tau: float
    phases: list[PhaseRecord]
    ledger: dict[str, float]
    seed: int
    params: SearchParams
    config_ids: list[int]
    instances: InstanceList

    @property
    def chosen_estimate(self) -> Estimate:
        return self.phases[-1].estimates[self.chosen_index]


def leaps_and_bounds(problem: ProblemSpec, params: SearchParams, *, threads: int = 1,
                     max_phases: Optional[int] = None, resume_overhead: float = 0.0,
                     literal_ebg: bool = False, ledger: Optional[CostLedger] = None) -> SearchResult:
    """Return a configuration whose capped mean is near-optimal with high probability.

    All configurations of a phase are evaluated on the same instance prefix;
    instances are sampled before fan-out and the ledger is charged in
    configuration order after the phase barrier, so results do not depend on
    ``threads``.
    """
    backend = problem.backend
    config_ids = list(problem.config_ids)
    n = len(config_ids)
    if ledger is None:
        ledger = CostLedger(backend.n_instances, resume_overhead)
    if problem.kappa0 != params.kappa0:
        params = replace(params, kappa0=problem.kappa0)
    instances = InstanceList()
    records: list[PhaseRecord] = []
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        k = 0
        while True:
            k += 1
            if max_phases is not None and k > max_phases:
                raise PhaseLimitReached(f"no configuration accepted within {max_phases} phases")
            phase = phase_schedule(params, n, k)
            instances = extend_instance_list(instances, problem.sampler, phase.b)
            ctx = EstimatorContext.for_phase(phase, params, n, instances.prefix(phase.b), literal_ebg)

            def run(i: int) -> Estimate:
                return runtime_est(ctx, i, backend, None, params.stopping_rule)

            if pool is None:
                estimates = [run(i) for i in config_ids]
            else:
                estimates = list(pool.map(run, config_ids))
            for est in estimates:
                ledger.charge_many(est.config_id, est.instance_ids, est.samples)
            record = PhaseRecord(phase, estimates, ledger.snapshot())
            records.append(record)
            best = record.best_index
            log.info("phase %d theta=%.4g b=%d best=%s value=%.4g work=%.4g", k, phase.theta,
                     phase.b, config_ids[best], estimates[best].value, ledger.total_no_resume)
            if estimates[best].value < phase.theta:
                return SearchResult(
                    chosen=config_ids[best], chosen_index=best, final_phase=k,
                    theta=phase.theta, tau=phase.tau, phases=records, ledger=ledger.snapshot(),
                    seed=params.seed, params=params, config_ids=config_ids, instances=instances,
                )
    finally:
        if pool is not None:
            pool.shutdown()


def subsample_problem(problem: ProblemSpec, gamma_fraction: float, zeta: float, seed: int) -> ProblemSpec:
    """Restrict the pool to a random draw large enough to hit the fastest ``gamma_fraction``.

    Leaves the problem unchanged when the pool is already no larger than the draw.
    """
    count = subsample_size(gamma_fraction, zeta)
    if count >= len(problem.config_ids):
        return problem
    picks = subsample_configs(problem.config_ids, count, seed)
    return replace(problem, config_ids=picks)
