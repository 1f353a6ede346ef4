"""Heuristic scheduler baselines: memory-ratio and compute-power splits.

Both return single-round plans (k=1) and make no feasibility promises;
they exist as ablation references for the iterative planner.
"""

from __future__ import annotations

import math

from .halda import _largest_remainder
from .latency import PartitionPlan, classify_devices, evaluate_tpot, memory_bounds
from .profiles import ClusterSpec, memory_budget


def _gpu_layer_caps(spec: ClusterSpec) -> list[int]:
    """How many layers fit in each device's VRAM / shared-memory bound at k=1."""
    sets = classify_devices(spec, (spec.model.layer_count,) + (0,) * (len(spec.devices) - 1),
                            (0,) * len(spec.devices), 1)
    bounds = memory_bounds(spec, sets)
    L = spec.model.layer_count
    return [max(0, math.floor(L * bounds.z_gpu[d.id])) for d in spec.devices]


def _finish(spec: ClusterSpec, w: tuple[int, ...], n: tuple[int, ...]) -> PartitionPlan:
    sets = classify_devices(spec, w, n, 1)
    plan = PartitionPlan(w, n, 1, 0.0, sets)
    return PartitionPlan(w, n, 1, evaluate_tpot(spec, plan), sets)


def mem_sched(spec: ClusterSpec) -> PartitionPlan:
    """Split layers by RAM+VRAM budget ratio, then fill each GPU to its cap."""
    weights = [memory_budget(d) + (d.vram_available if d.backend == "cuda" else 0)
               for d in spec.devices]
    w = _largest_remainder(weights, spec.model.layer_count)
    caps = _gpu_layer_caps(spec)
    n = tuple(min(wm, cap) for wm, cap in zip(w, caps))
    return _finish(spec, w, n)


def perf_sched(spec: ClusterSpec) -> PartitionPlan:
    """Split layers by compute power, then migrate layers that overflow a
    device's GPU+RAM capacity to devices with free memory; any residue is
    spread over the CPUs by their compute power."""
    model = spec.model
    quant = "q4k" if "q4k" in model.layer_flops else next(iter(model.layer_flops))
    power = [d.gpu_flops.get(quant, 0.0) if d.backend != "none" else d.cpu_flops.get(quant, 0.0)
             for d in spec.devices]
    w = list(_largest_remainder(power, model.layer_count))

    bprime = model.layer_footprint_bytes()
    gpu_caps = _gpu_layer_caps(spec)
    ram_caps = [max(0, (memory_budget(d) - model.cpu_buffer) // bprime)
                for d in spec.devices]
    caps = [g + r for g, r in zip(gpu_caps, ram_caps)]

    overflow = 0
    for i in range(len(w)):
        if w[i] > caps[i]:
            overflow += w[i] - caps[i]
            w[i] = caps[i]
    if overflow:
        free_order = sorted(range(len(w)), key=lambda i: -(caps[i] - w[i]))
        for i in free_order:
            if overflow == 0:
                break
            take = min(overflow, caps[i] - w[i])
            w[i] += take
            overflow -= take
    if overflow:
        cpu_power = [d.cpu_flops.get(quant, 0.0) for d in spec.devices]
        spread = _largest_remainder(cpu_power, overflow)
        w = [wm + extra for wm, extra in zip(w, spread)]

    n = tuple(min(wm, cap) for wm, cap in zip(w, gpu_caps))
    return _finish(spec, tuple(w), n)
