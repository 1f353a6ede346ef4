"""Planner and simulator for pipelined-ring LLM inference on home clusters."""

from .errors import ConfigError, PlanningError
from .profiles import (ClusterSpec, DeviceProfile, ModelProfile,
                       load_cluster_spec, memory_budget)
from .latency import (LatencyCoefficients, PartitionPlan, SetAssignment,
                      classify_devices, device_coefficients,
                      estimate_memory_usage, evaluate_tpot, layer_counts,
                      linearized_tpot, memory_bounds, objective_terms)
from .ilp import (brute_force_solve, build_instance, check_plan,
                  optimal_gpu_layers, solve)
from .halda import run, select_devices, valid_factors
from .baselines import mem_sched, perf_sched
from .sim import SimResult, build_schedule, export_trace, simulate

__all__ = [
    "ClusterSpec", "ConfigError", "DeviceProfile", "LatencyCoefficients",
    "ModelProfile", "PartitionPlan", "PlanningError", "SetAssignment",
    "SimResult", "brute_force_solve", "build_instance", "build_schedule",
    "check_plan", "classify_devices", "device_coefficients",
    "estimate_memory_usage", "evaluate_tpot", "export_trace", "layer_counts",
    "linearized_tpot", "load_cluster_spec", "mem_sched", "memory_bounds",
    "memory_budget", "objective_terms", "optimal_gpu_layers", "perf_sched",
    "run", "select_devices", "simulate", "solve", "valid_factors",
]
