"""Problem model: search parameters, phase arithmetic, runtime tables, sampling."""
from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np


class InvalidParameter(ValueError):
    pass


class TableFormatError(ValueError):
    """Malformed CSV, ragged matrix, or missing sidecar metadata."""


class TableValidationError(ValueError):
    """A cell value lies outside [kappa0, cap]."""


class StoppingRule(str, enum.Enum):
    FIXED = "fixed"
    BERNSTEIN = "bernstein"
    EBG = "ebg"


class Censoring(str, enum.Enum):
    STRICT = "strict"
    CLAMP = "clamp"


@dataclass(frozen=True)
class SearchParams:
    epsilon: float
    delta: float
    zeta: float
    kappa0: float
    multiplier: float = 2.0
    seed: int = 0
    stopping_rule: StoppingRule = StoppingRule.FIXED

    def __post_init__(self) -> None:
        if not 0.0 < self.epsilon < 1.0 / 3.0:
            raise InvalidParameter(f"epsilon must lie in (0, 1/3), got {self.epsilon}")
        if not 0.0 < self.delta < 1.0:
            raise InvalidParameter(f"delta must lie in (0, 1), got {self.delta}")
        if not 0.0 < self.zeta < 1.0:
            raise InvalidParameter(f"zeta must lie in (0, 1), got {self.zeta}")
        if not self.kappa0 > 0.0:
            raise InvalidParameter(f"kappa0 must be positive, got {self.kappa0}")
        if not self.multiplier > 1.0:
            raise InvalidParameter(f"multiplier must exceed 1, got {self.multiplier}")
        if not 0 <= self.seed < 2**64:
            raise InvalidParameter(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        object.__setattr__(self, "stopping_rule", StoppingRule(self.stopping_rule))

    def to_dict(self) -> dict[str, Any]:
        return {
            "epsilon": self.epsilon,
            "delta": self.delta,
            "zeta": self.zeta,
            "kappa0": self.kappa0,
            "multiplier": self.multiplier,
            "seed": self.seed,
            "stopping_rule": self.stopping_rule.value,
        }


@dataclass(frozen=True)
class PhaseSpec:
    k: int
    theta: float
    tau: float
    b: int
    budget: float


def initial_theta(kappa0: float) -> float:
    return 16.0 / 7.0 * kappa0


def instance_bound(n: int, k: int, epsilon: float, delta: float, zeta: float) -> int:
    """Number of instances ``b_k`` every configuration may see in phase ``k``."""
    return math.ceil(44.0 * math.log(6.0 * n * k * (k + 1) / zeta) / (delta * epsilon**2))


def phase_schedule(params: SearchParams, n: int, k: int) -> PhaseSpec:
    if k < 1:
        raise InvalidParameter(f"phase index must be >= 1, got {k}")
    if n < 1:
        raise InvalidParameter(f"configuration count must be >= 1, got {n}")
    theta = initial_theta(params.kappa0) * params.multiplier ** (k - 1)
    tau = 4.0 * theta / (3.0 * params.delta)
    b = instance_bound(n, k, params.epsilon, params.delta, params.zeta)
    return PhaseSpec(k=k, theta=theta, tau=tau, b=b, budget=b * theta)


def subsample_size(gamma_fraction: float, zeta: float) -> int:
    """Configurations to draw so the fastest ``gamma_fraction`` is hit w.p. >= 1 - zeta.

    Uses (1 - gamma)^n <= exp(-n * gamma) with the leading constant set to 1.
    """
    if not 0.0 < gamma_fraction <= 1.0:
        raise InvalidParameter(f"gamma fraction must lie in (0, 1], got {gamma_fraction}")
    if not 0.0 < zeta < 1.0:
        raise InvalidParameter(f"zeta must lie in (0, 1), got {zeta}")
    return math.ceil(math.log(1.0 / zeta) / gamma_fraction)


@dataclass(frozen=True, eq=False)
class RuntimeTable:
    """Censored runtime matrix indexed ``values[config, instance]`` in seconds.

    A cell equal to ``cap`` is censored: the true runtime is at least ``cap``.
    """

    values: np.ndarray
    cap: float
    kappa0: float
    config_labels: tuple[str, ...] = ()
    instance_labels: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise TableFormatError(f"expected a non-empty 2-D matrix, got shape {values.shape}")
        if not (self.kappa0 > 0 and self.cap >= self.kappa0):
            raise TableValidationError(f"need 0 < kappa0 <= cap, got kappa0={self.kappa0} cap={self.cap}")
        if not np.all(np.isfinite(values)):
            raise TableValidationError("table contains non-finite values")
        bad = (values < self.kappa0) | (values > self.cap)
        if bad.any():
            i, j = (int(x) for x in np.argwhere(bad)[0])
            raise TableValidationError(
                f"cell (config {i}, instance {j}) = {values[i, j]} outside [{self.kappa0}, {self.cap}]"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        n_configs, n_instances = values.shape
        config_labels = tuple(self.config_labels) or tuple(f"c{i}" for i in range(n_configs))
        instance_labels = tuple(self.instance_labels) or tuple(f"j{j}" for j in range(n_instances))
        if len(config_labels) != n_configs or len(instance_labels) != n_instances:
            raise TableFormatError("label counts do not match the matrix shape")
        object.__setattr__(self, "config_labels", config_labels)
        object.__setattr__(self, "instance_labels", instance_labels)

    @property
    def n_configs(self) -> int:
        return self.values.shape[0]

    @property
    def n_instances(self) -> int:
        return self.values.shape[1]

    @property
    def censored(self) -> np.ndarray:
        return self.values >= self.cap

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RuntimeTable):
            return NotImplemented
        return (
            self.cap == other.cap
            and self.kappa0 == other.kappa0
            and self.config_labels == other.config_labels
            and self.instance_labels == other.instance_labels
            and np.array_equal(self.values, other.values)
        )


def meta_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name.removesuffix(".csv") + ".meta.json")


def save_runtime_table(table: RuntimeTable, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["instance_id", *table.config_labels])
        for j, label in enumerate(table.instance_labels):
            # repr() round-trips float64 exactly
            writer.writerow([label, *(repr(float(v)) for v in table.values[:, j])])
    meta = {"cap_seconds": table.cap, "kappa0_seconds": table.kappa0}
    meta_path(path).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


def load_runtime_table(path: str | Path, strictness: Censoring = Censoring.STRICT) -> RuntimeTable:
    """Read a table CSV and its ``.meta.json`` sidecar.

    In ``clamp`` mode values above the cap are clamped to it (and so become
    censored) instead of failing validation; values below kappa0 always fail.
    """
    path = Path(path)
    sidecar = meta_path(path)
    if not sidecar.exists():
        raise TableFormatError(f"missing metadata sidecar {sidecar}")
    try:
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        cap = float(meta["cap_seconds"])
        kappa0 = float(meta["kappa0_seconds"])
    except (KeyError, TypeError, ValueError) as exc:
        raise TableFormatError(f"bad metadata in {sidecar}: {exc}") from exc

    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise TableFormatError(f"{path} is empty")
    header = rows[0]
    if len(header) < 2 or header[0] != "instance_id":
        raise TableFormatError(f"{path}: header must be 'instance_id,<config labels...>'")
    n_configs = len(header) - 1
    instance_labels = []
    columns = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != n_configs + 1:
            raise TableFormatError(f"{path}:{lineno}: expected {n_configs + 1} fields, got {len(row)}")
        try:
            columns.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise TableFormatError(f"{path}:{lineno}: {exc}") from exc
        instance_labels.append(row[0])
    if not columns:
        raise TableFormatError(f"{path} has no data rows")
    values = np.array(columns, dtype=np.float64).T
    if Censoring(strictness) is Censoring.CLAMP:
        values = np.minimum(values, cap)
    return RuntimeTable(values, cap=cap, kappa0=kappa0,
                        config_labels=tuple(header[1:]), instance_labels=tuple(instance_labels))


def load_config_space(path: str | Path) -> list[list[str]]:
    """A config-space file is a JSON list of flag-string arrays."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, list) or not data:
        raise TableFormatError(f"{path}: expected a non-empty JSON list")
    for entry in data:
        if not isinstance(entry, list) or not all(isinstance(f, str) for f in entry):
            raise TableFormatError(f"{path}: every configuration must be a list of strings")
    return data


class InstanceSampler:
    """Uniform sampling with replacement over ``n_instances`` ids.

    Backed by numpy's PCG64 bit generator seeded through ``SeedSequence(seed)``;
    the seed and the sequence of requested batch sizes determine every draw.
    """

    def __init__(self, n_instances: int, seed: int):
        if n_instances < 1:
            raise InvalidParameter("need at least one instance")
        self.n_instances = n_instances
        self.seed = seed
        self._rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0])))

    def sample(self, count: int) -> np.ndarray:
        return self._rng.integers(0, self.n_instances, size=count, dtype=np.int64)


def subsample_configs(config_ids: Sequence[int], count: int, seed: int) -> list[int]:
    """Draw ``count`` configurations uniformly with replacement."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 1])))
    picks = rng.integers(0, len(config_ids), size=count)
    return [config_ids[p] for p in picks]


@dataclass
class ProblemSpec:
    backend: Any
    config_ids: list[int]
    sampler: InstanceSampler
    kappa0: float
    labels: dict[int, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.config_ids:
            raise InvalidParameter("configuration list is empty")
        if not self.kappa0 > 0:
            raise InvalidParameter("kappa0 must be positive")

    @classmethod
    def from_table(cls, table: RuntimeTable, backend: Any, seed: int,
                   kappa0: float | None = None) -> "ProblemSpec":
        return cls(
            backend=backend,
            config_ids=list(range(table.n_configs)),
            sampler=InstanceSampler(table.n_instances, seed),
            kappa0=table.kappa0 if kappa0 is None else kappa0,
            labels=dict(enumerate(table.config_labels)),
        )
