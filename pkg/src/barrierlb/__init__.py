"""Load balancing simulator for barrier-synchronized workers with sticky assignments."""

from .engine import SimConfig, SimResult, Simulator, run, step_duration, worker_load
from .metrics import PowerModel, report
from .policies import make_policy
from .workload import (ArrivalInstance, DecodeDistribution, DriftSpec, OverloadedSource,
                       PrefillDistribution, load_trace, sample_instance)

__version__ = "0.1.0"
