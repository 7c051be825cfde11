"""Capped-runtime search for (epsilon, delta)-optimal solver configurations."""

__version__ = "0.1.0"

from .core import (Censoring, PhaseSpec, ProblemSpec, RuntimeTable, SearchParams, StoppingRule,
                   load_runtime_table, phase_schedule, save_runtime_table, subsample_size)
from .driver import InstanceList, SearchResult, extend_instance_list, leaps_and_bounds
from .estimator import Estimate, EstimatorContext, StopReason, bernstein_radius, runtime_est
from .oracle import (Constant, CostLedger, HeavyTail, LogNormal, Measurement, Outcome,
                     SubprocessBackend, TableBackend, gen_synthetic)
from .verify import (capped_mean_below_quantile, check_eps_delta_optimal, event_harness,
                     opt_mean)
