"""Measurement backends and resume/no-resume cost accounting."""
from __future__ import annotations

import enum
import logging
import math
import os
import shlex
import signal
import subprocess
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import psutil

from .core import Censoring, InvalidParameter, RuntimeTable

log = logging.getLogger(__name__)

SCRATCH_ENV = "LEAPSBOUNDS_SCRATCH"


class CensoringError(RuntimeError):
    """A measurement asked for a timeout beyond a censored cell's cap."""

    def __init__(self, config_id: int, instance_id: int, limit: float, cap: float,
                 phase: int | None = None, tau: float | None = None):
        self.config_id = config_id
        self.instance_id = instance_id
        self.limit = limit
        self.cap = cap
        self.phase = phase
        self.tau = tau
        where = f"config {config_id}, instance {instance_id}"
        if phase is not None:
            where += f", phase {phase}, tau_k={tau:g}"
        super().__init__(
            f"censored cell ({where}): requested limit {limit:g} exceeds table cap {cap:g}; "
            "rerun with --censoring clamp or a table with a larger cap"
        )

    def with_phase(self, phase: int, tau: float) -> "CensoringError":
        return CensoringError(self.config_id, self.instance_id, self.limit, self.cap, phase, tau)


class SolverError(RuntimeError):
    pass


class Outcome(str, enum.Enum):
    FINISHED = "finished"
    TIMED_OUT = "timed_out"


@dataclass(frozen=True)
class Measurement:
    elapsed: float
    outcome: Outcome
    config_id: int
    instance_id: int
    limit: float


class TableBackend:
    """Simulated oracle returning ``min(R(i, j), limit)`` from a runtime table."""

    def __init__(self, table: RuntimeTable, censoring: Censoring = Censoring.STRICT):
        self.table = table
        self.censoring = Censoring(censoring)

    @property
    def n_instances(self) -> int:
        return self.table.n_instances

    def measure(self, i: int, j: int, limit: float) -> Measurement:
        if not limit > 0:
            raise InvalidParameter(f"limit must be positive, got {limit}")
        value = float(self.table.values[i, j])
        cap = self.table.cap
        if value >= cap and limit > cap:
            if self.censoring is Censoring.STRICT:
                raise CensoringError(i, j, limit, cap)
            log.warning("clamping censored cell (%d, %d): limit %g > cap %g", i, j, limit, cap)
            return Measurement(cap, Outcome.TIMED_OUT, i, j, limit)
        if value >= cap and limit == cap:
            return Measurement(limit, Outcome.TIMED_OUT, i, j, limit)
        if value <= limit:
            return Measurement(value, Outcome.FINISHED, i, j, limit)
        return Measurement(limit, Outcome.TIMED_OUT, i, j, limit)


class ExitPolicy(str, enum.Enum):
    FAIL = "fail"
    TIMEOUT = "timeout"


class SubprocessBackend:
    """Runs a real solver for each measurement and kills it at the limit.

    ``command`` is a template containing ``{instance}`` and ``{flags}``; a token
    that is exactly ``{flags}`` expands to the configuration's flag list.
    Timing is child CPU time (user + system) by default, or wall clock with
    ``wall_clock=True``. The limit is enforced by polling every
    at most ``poll_interval`` seconds (starting at 1 ms and backing off), which
    bounds the overshoot of a killed run.
    """

    def __init__(self, command: str, instances: Sequence[Union[str, Path]],
                 configs: Sequence[Sequence[str]], *, wall_clock: bool = False,
                 exit_policy: ExitPolicy = ExitPolicy.FAIL,
                 ok_exit_codes: Sequence[int] = (0, 10, 20), poll_interval: float = 0.01):
        if not instances:
            raise InvalidParameter("no instances given")
        if not configs:
            raise InvalidParameter("no configurations given")
        self.command = command
        self.instances = [str(p) for p in instances]
        self.configs = [list(c) for c in configs]
        self.wall_clock = wall_clock
        self.exit_policy = ExitPolicy(exit_policy)
        self.ok_exit_codes = frozenset(ok_exit_codes)
        self.poll_interval = poll_interval

    @classmethod
    def from_directory(cls, command: str, instances_dir: Union[str, Path],
                       configs: Sequence[Sequence[str]], **kwargs) -> "SubprocessBackend":
        files = sorted(p for p in Path(instances_dir).iterdir() if p.is_file())
        return cls(command, files, configs, **kwargs)

    @property
    def n_instances(self) -> int:
        return len(self.instances)

    def argv(self, i: int, j: int) -> list[str]:
        flags = self.configs[i]
        out = []
        for token in shlex.split(self.command):
            if token == "{flags}":
                out.extend(flags)
            else:
                out.append(token.replace("{instance}", self.instances[j]).replace("{flags}", " ".join(flags)))
        return out

    def _cpu_seconds(self, proc: psutil.Process) -> float:
        t = proc.cpu_times()
        return t.user + t.system

    def measure(self, i: int, j: int, limit: float) -> Measurement:
        if not limit > 0:
            raise InvalidParameter(f"limit must be positive, got {limit}")
        scratch = os.environ.get(SCRATCH_ENV) or None
        with tempfile.TemporaryDirectory(dir=scratch) as cwd:
            try:
                child = subprocess.Popen(self.argv(i, j), cwd=cwd, stdout=subprocess.DEVNULL,
                                         stderr=subprocess.DEVNULL)
            except OSError as exc:
                raise SolverError(f"cannot spawn solver for config {i}: {exc}") from exc
            start = time.monotonic()
            proc = psutil.Process(child.pid)
            killed = False
            delay = min(0.001, self.poll_interval)
            while True:
                pid, status, rusage = os.wait4(child.pid, os.WNOHANG)
                if pid == child.pid:
                    break
                try:
                    used = time.monotonic() - start if self.wall_clock else self._cpu_seconds(proc)
                except psutil.NoSuchProcess:
                    used = 0.0
                if used >= limit:
                    # not child.kill(): Popen polls first and may reap the pid under us
                    try:
                        os.kill(child.pid, signal.SIGKILL)
                    except OSError as exc:
                        raise SolverError(f"cannot kill solver for config {i}: {exc}") from exc
                    _, status, rusage = os.wait4(child.pid, 0)
                    killed = True
                    break
                time.sleep(delay)
                delay = min(2 * delay, self.poll_interval)
            elapsed = time.monotonic() - start
            child.returncode = os.waitstatus_to_exitcode(status)
        if killed:
            return Measurement(limit, Outcome.TIMED_OUT, i, j, limit)
        if not self.wall_clock:
            elapsed = rusage.ru_utime + rusage.ru_stime
        if elapsed >= limit:
            return Measurement(limit, Outcome.TIMED_OUT, i, j, limit)
        if child.returncode not in self.ok_exit_codes:
            if self.exit_policy is ExitPolicy.FAIL:
                raise SolverError(f"solver exited with code {child.returncode} "
                                  f"(config {i}, instance {self.instances[j]})")
            return Measurement(limit, Outcome.TIMED_OUT, i, j, limit)
        return Measurement(elapsed, Outcome.FINISHED, i, j, limit)


class CostLedger:
    """Total charged work with and without pause/resume support.

    Without resume every run is paid in full. With resume, rerunning a
    (configuration, instance) pair only costs the amount by which it exceeds
    the longest previous run of that pair, plus ``resume_overhead`` when a
    previously started run is continued.
    """

    def __init__(self, n_instances: int, resume_overhead: float = 0.0):
        if resume_overhead < 0:
            raise InvalidParameter("resume overhead must be non-negative")
        self.n_instances = n_instances
        self.resume_overhead = resume_overhead
        self.total_no_resume = 0.0
        self.total_resume = 0.0
        self.run_count = 0
        self.resume_count = 0
        self._high_water: dict[int, np.ndarray] = {}
        self._lock = threading.Lock()

    def _row(self, i: int) -> np.ndarray:
        row = self._high_water.get(i)
        if row is None:
            row = self._high_water[i] = np.zeros(self.n_instances)
        return row

    def high_water(self, i: int, j: int) -> float:
        row = self._high_water.get(i)
        return 0.0 if row is None else float(row[j])

    def high_water_sum(self) -> float:
        return math.fsum(math.fsum(row) for row in self._high_water.values())

    def charge(self, m: Measurement) -> "CostLedger":
        with self._lock:
            row = self._row(m.config_id)
            old = row[m.instance_id]
            self.total_no_resume += m.elapsed
            if m.elapsed > old:
                self.total_resume += m.elapsed - old
                if old > 0:
                    self.total_resume += self.resume_overhead
                    self.resume_count += 1
                row[m.instance_id] = m.elapsed
            self.run_count += 1
        return self

    def charge_many(self, i: int, instance_ids: np.ndarray, elapsed: np.ndarray) -> "CostLedger":
        """Charge a batch of runs of configuration ``i``; equivalent to sequential charges."""
        instance_ids = np.asarray(instance_ids, dtype=np.int64)
        elapsed = np.asarray(elapsed, dtype=np.float64)
        if len(instance_ids) == 0:
            return self
        with self._lock:
            row = self._row(i)
            uniq, inverse = np.unique(instance_ids, return_inverse=True)
            peak = np.zeros(len(uniq))
            np.maximum.at(peak, inverse, elapsed)
            old = row[uniq]
            grew = peak > old
            resumed = int(np.count_nonzero(grew & (old > 0)))
            self.total_no_resume += math.fsum(elapsed)
            self.total_resume += math.fsum(peak[grew] - old[grew]) + resumed * self.resume_overhead
            self.resume_count += resumed
            row[uniq] = np.maximum(old, peak)
            self.run_count += len(elapsed)
        return self

    def snapshot(self) -> dict[str, float]:
        return {
            "total_no_resume": self.total_no_resume,
            "total_resume": self.total_resume,
            "run_count": self.run_count,
            "resume_count": self.resume_count,
        }


@dataclass(frozen=True)
class Constant:
    mean: float


@dataclass(frozen=True)
class LogNormal:
    mu: float
    sigma: float


@dataclass(frozen=True)
class HeavyTail:
    """Runtime ``b`` with probability ``1/b``, otherwise ``kappa0``."""

    b: float


SyntheticModel = Union[Constant, LogNormal, HeavyTail]


def _draw(model: SyntheticModel, size: int, kappa0: float, rng: np.random.Generator) -> np.ndarray:
    if isinstance(model, Constant):
        if not model.mean > 0:
            raise InvalidParameter("constant runtime must be positive")
        return np.full(size, float(model.mean))
    if isinstance(model, LogNormal):
        if not model.sigma >= 0:
            raise InvalidParameter("log-normal sigma must be non-negative")
        return rng.lognormal(model.mu, model.sigma, size)
    if isinstance(model, HeavyTail):
        if not model.b > kappa0:
            raise InvalidParameter(f"heavy-tail b={model.b} must exceed kappa0={kappa0}")
        hit = rng.random(size) < 1.0 / model.b
        return np.where(hit, float(model.b), kappa0)
    raise InvalidParameter(f"unknown model {model!r}")


def gen_synthetic(models: Union[SyntheticModel, Sequence[SyntheticModel]], n_configs: int,
                  n_instances: int, cap: float, kappa0: float, seed: int) -> RuntimeTable:
    """Random table, one model per configuration (a single model is broadcast).

    Values are clipped to ``[kappa0, cap]``; anything at or above ``cap`` is censored.
    """
    if n_configs < 1 or n_instances < 1:
        raise InvalidParameter("table dimensions must be >= 1")
    if isinstance(models, (Constant, LogNormal, HeavyTail)):
        models = [models] * n_configs
    if len(models) != n_configs:
        raise InvalidParameter(f"got {len(models)} models for {n_configs} configurations")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 2])))
    rows = [_draw(m, n_instances, kappa0, rng) for m in models]
    values = np.clip(np.vstack(rows), kappa0, cap)
    return RuntimeTable(values, cap=cap, kappa0=kappa0)
