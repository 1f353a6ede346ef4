"""Iterative TPOT-optimal layer planner with automatic device selection.

The planner alternates three phases until the device classification is
stable: classify devices at the current iterate, solve the exact fixed-k
program for every round count that divides the layer count, and calibrate
(pin the slowest-disk overloaded device into class 4 whenever some GPU
still has free memory while another device is overloaded). On top of the
calibration step, a converged assignment is probed with single-device
class flips (all flip combinations for clusters of up to four devices);
a probe is kept only when it strictly lowers the objective, so the loop
always terminates. Weak devices that end up with a single layer are then
pruned one at a time, re-planning after each removal.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import PlanningError
from .ilp import build_instance, solve
from .latency import (PartitionPlan, SetAssignment, classify_devices,
                      estimate_memory_usage, evaluate_tpot, linearized_tpot,
                      memory_bounds, objective_terms)
from .profiles import ClusterSpec, DeviceProfile, disk_read_speed, memory_budget

PROBE_EXHAUSTIVE_MAX_DEVICES = 4


def iteration_cap(device_count: int) -> int:
    return 4 * device_count + 8


@dataclass
class HaldaState:
    """Mutable loop state, exposed for tests and diagnostics."""

    w: tuple[int, ...]
    n: tuple[int, ...]
    sets: SetAssignment | None
    forced: frozenset[str]
    best: PartitionPlan | None
    iteration: int


def valid_factors(layer_count: int) -> tuple[int, ...]:
    """Divisors of the layer count usable as round counts, ascending.

    The layer count itself is excluded (single-layer windows around the
    whole ring are never worth the communication), except for the
    degenerate one-layer model where 1 is the only choice.
    """
    if layer_count < 1:
        raise ValueError("layer_count must be >= 1")
    if layer_count == 1:
        return (1,)
    return tuple(k for k in range(1, layer_count) if layer_count % k == 0)


def initial_windows(spec: ClusterSpec) -> tuple[int, ...]:
    """Window sizes proportional to memory budgets, summing to the layer count."""
    M = len(spec.devices)
    L = spec.model.layer_count
    if M > L:
        raise PlanningError(f"{M} devices cannot each receive a layer of a {L}-layer model")
    budgets = [memory_budget(d) for d in spec.devices]
    return _largest_remainder(budgets, L, minimum=1)


def _largest_remainder(weights: list[int] | list[float], total: int, minimum: int = 0) -> tuple[int, ...]:
    """Proportional integer split; ties go to the larger weight then the
    later ring position; a minimum-one clamp takes its deficit from the
    largest share."""
    denom = float(sum(weights))
    if denom <= 0:
        shares = [total / len(weights)] * len(weights)
    else:
        shares = [total * wgt / denom for wgt in weights]
    floors = [int(share) for share in shares]
    leftover = total - sum(floors)
    order = sorted(range(len(weights)),
                   key=lambda i: (-(shares[i] - floors[i]), -weights[i], -i))
    for i in order[:leftover]:
        floors[i] += 1
    if minimum:
        for i in range(len(floors)):
            while floors[i] < minimum:
                donor = max(range(len(floors)), key=lambda j: (floors[j], -j))
                if floors[donor] <= minimum:
                    raise PlanningError("not enough layers to give every device one")
                floors[donor] -= 1
                floors[i] += 1
    return tuple(floors)


def calibration_check(spec: ClusterSpec, plan: PartitionPlan) -> str | None:
    """Id of the overloaded-class device with the slowest disk, when some
    GPU has memory to spare while any device is overloaded; else None."""
    usage = estimate_memory_usage(spec, plan)
    free_gpu = False
    for d in spec.devices:
        if d.backend == "none":
            continue
        gpu_budget = d.vram_available if d.backend == "cuda" else d.metal_working_set
        if usage[d.id].gpu_demand < gpu_budget:
            free_gpu = True
            break
    if not free_gpu or not any(u.overloaded for u in usage.values()):
        return None
    candidates = [d for d in spec.devices
                  if d.id in plan.sets.overloaded_ids() and d.id not in plan.sets.m4_force]
    if not candidates:
        return None
    return min(candidates, key=lambda d: (disk_read_speed(d), spec.device_index(d.id))).id


def _sweep(spec: ClusterSpec, sets: SetAssignment, factors: tuple[int, ...],
           forced: frozenset[str]) -> tuple[PartitionPlan | None, dict[int, str]]:
    """Solve the fixed-k program for every round count; smallest k wins ties.

    Each solution is re-classified at its own (w, n) before comparison, which
    refreshes the Android swapout snapshot the solver treated as constant;
    class membership itself is reproduced because the membership constraints
    force it.
    """
    best: PartitionPlan | None = None
    reasons: dict[int, str] = {}
    coeffs = objective_terms(spec, sets)
    bounds = memory_bounds(spec, sets)
    L = spec.model.layer_count
    M = len(spec.devices)
    for k in factors:
        if L // k < M:
            reasons[k] = "window smaller than the device count"
            continue
        inst = build_instance(spec, sets, k, coeffs, bounds)
        sol = solve(inst)
        if sol is None:
            reasons[k] = ("window smaller than the device count"
                          if inst.trivially_infeasible else "memory bounds admit no assignment")
            continue
        refreshed = classify_devices(spec, sol.w, sol.n, k, forced)
        plan = PartitionPlan(sol.w, sol.n, k, 0.0, refreshed)
        same_snapshot = refreshed == sets and refreshed.swapout == sets.swapout
        objective = linearized_tpot(spec, plan, coeffs if same_snapshot else None)
        plan = PartitionPlan(sol.w, sol.n, k, objective, refreshed)
        if best is None or plan.objective < best.objective:
            best = plan
    return best, reasons


def _eligible_class(device: DeviceProfile) -> int:
    if device.os == "macos":
        return 1 if device.backend != "metal" else 2
    return 3


def _probe_assignments(spec: ClusterSpec, sets: SetAssignment,
                       worth_flipping: frozenset[str] | None = None) -> list[SetAssignment]:
    """Alternative classifications to try once the loop has settled.

    Every fast-disk device may flip between class 4 and its OS overload
    class (force-pinned ones included, which un-pins them in that probe).
    Small clusters try every flip combination, which makes the settled
    answer provably optimal over all admissible assignments; larger ones
    try one flip at a time over ``worth_flipping`` candidates.
    """
    single_flip = len(spec.devices) > PROBE_EXHAUSTIVE_MAX_DEVICES
    flippable: list[tuple[str, int]] = []
    for d in spec.devices:
        if disk_read_speed(d) <= spec.disk_speed_threshold:
            continue
        if single_flip and worth_flipping is not None and d.id not in worth_flipping:
            continue
        flippable.append((d.id, _eligible_class(d)))
    if not flippable:
        return []

    current = {d.id: sets.class_of(d.id) for d in spec.devices}

    def build(assign: dict[str, int]) -> SetAssignment:
        groups: dict[int, set[str]] = {1: set(), 2: set(), 3: set(), 4: set()}
        for dev_id, klass in assign.items():
            groups[klass].add(dev_id)
        forced = frozenset(dev_id for dev_id in sets.m4_force if assign[dev_id] == 4)
        return SetAssignment(frozenset(groups[1]), frozenset(groups[2]),
                             frozenset(groups[3]), frozenset(groups[4]),
                             forced, dict(sets.swapout))

    out: list[SetAssignment] = []
    if not single_flip:
        for mask in range(1, 1 << len(flippable)):
            assign = dict(current)
            for bit, (dev_id, klass) in enumerate(flippable):
                if mask & (1 << bit):
                    assign[dev_id] = klass if current[dev_id] == 4 else 4
            if assign != current:
                out.append(build(assign))
    else:
        for dev_id, klass in flippable:
            assign = dict(current)
            assign[dev_id] = klass if current[dev_id] == 4 else 4
            out.append(build(assign))
    return out


def run(spec: ClusterSpec) -> PartitionPlan:
    """Plan the TPOT-optimal windows and GPU splits for the whole cluster."""
    M = len(spec.devices)
    L = spec.model.layer_count
    factors = valid_factors(L)
    state = HaldaState(w=initial_windows(spec), n=(0,) * M, sets=None,
                       forced=frozenset(), best=None, iteration=0)
    last_reasons: dict[int, str] = {}
    cap = iteration_cap(M)
    converged = False

    def consider(plan: PartitionPlan) -> bool:
        if state.best is None or plan.objective < state.best.objective:
            state.best = plan
            return True
        return False

    def worth_flipping(sets: SetAssignment) -> frozenset[str] | None:
        """Single-flip candidates on big clusters: overloaded members (a
        relief flip removes their disk terms) and class-4 members within one
        layer of their budget (only a binding cap makes overloading pay)."""
        if state.best is None:
            return None
        bprime = spec.model.layer_footprint_bytes()
        ids = set(sets.overloaded_ids())
        usage = estimate_memory_usage(spec, state.best)
        for d in spec.devices:
            if d.id in sets.m4 and usage[d.id].ram_demand + bprime > memory_budget(d):
                ids.add(d.id)
        return frozenset(ids)

    probe_epochs = 0

    def probe_pass(sets: SetAssignment) -> bool:
        """Try alternative class assignments; True when the iterate moved.

        Every improvement is recorded as best-so-far; the iterate follows
        only probes that kept the forced set intact and whose classification
        reproduces itself at the solved point. Large clusters stay within
        the documented scheduling-latency budget by probing single flips,
        at the winning round count, for a bounded number of epochs.
        """
        nonlocal probe_epochs
        big = M > PROBE_EXHAUSTIVE_MAX_DEVICES
        if big and probe_epochs >= 2:
            return False
        probe_epochs += 1
        probe_factors = factors
        if big and state.best is not None:
            probe_factors = tuple(sorted({state.best.k, min(factors)}))
        for probe in _probe_assignments(spec, sets, worth_flipping(sets) if big else None):
            plan, _ = _sweep(spec, probe, probe_factors, probe.m4_force)
            if plan is None or not consider(plan):
                continue
            if probe.m4_force == state.forced and plan.sets == probe:
                state.w, state.n = plan.w, plan.n
                state.sets = None
                return True
        return False

    while state.iteration < cap:
        state.iteration += 1
        W = sum(state.w)
        k_now = L // W if W and L % W == 0 else 1
        sets = classify_devices(spec, state.w, state.n, k_now, state.forced)

        # settled only when both the classes and the lazily evaluated Android
        # swapout snapshot stopped moving (the snapshot feeds the bounds)
        if (state.sets is not None and sets == state.sets
                and sets.swapout == state.sets.swapout):
            # settled: give calibration one more look, then probe class flips
            if state.best is not None:
                forced_id = calibration_check(spec, state.best)
                if forced_id is not None and forced_id not in state.forced:
                    state.forced = state.forced | {forced_id}
                    state.sets = None
                    continue
            if probe_pass(sets):
                continue
            converged = True
            break
        state.sets = sets

        plan, reasons = _sweep(spec, sets, factors, state.forced)
        last_reasons = reasons
        if plan is None:
            # nothing feasible under this assignment: relieve the slowest disk
            candidates = [d for d in spec.devices
                          if d.id in sets.overloaded_ids() and d.id not in state.forced]
            if candidates:
                slowest = min(candidates,
                              key=lambda d: (disk_read_speed(d), spec.device_index(d.id)))
                state.forced = state.forced | {slowest.id}
                continue
            if probe_pass(sets):
                continue
            if state.best is not None:
                converged = True
                break
            detail = ", ".join(f"k={k}: {msg}" for k, msg in sorted(last_reasons.items()))
            raise PlanningError(f"no feasible layer assignment for any round count ({detail})")

        consider(plan)
        forced_id = calibration_check(spec, plan)
        if forced_id is not None and forced_id not in state.forced:
            state.forced = state.forced | {forced_id}
            continue  # keep the pre-forcing iterate; best-so-far is retained
        state.w, state.n = plan.w, plan.n

    if state.best is None:
        raise PlanningError("planner did not find a feasible assignment within its iteration cap")
    final = state.best
    return PartitionPlan(final.w, final.n, final.k,
                         evaluate_tpot(spec, final), final.sets, converged=converged)


# --- device selection --------------------------------------------------------

def _stitch(spec: ClusterSpec, compute_spec: ClusterSpec, plan: PartitionPlan,
            relay_ids: frozenset[str]) -> PartitionPlan:
    """Re-embed a compute-only plan into the ring that still carries relays."""
    w, n = [], []
    by_id = {d.id: i for i, d in enumerate(compute_spec.devices)}
    for d in spec.devices:
        if d.id in relay_ids:
            w.append(0)
            n.append(0)
        else:
            w.append(plan.w[by_id[d.id]])
            n.append(plan.n[by_id[d.id]])
    sets = classify_devices(spec, w, n, plan.k, plan.sets.m4_force)
    stitched = PartitionPlan(tuple(w), tuple(n), plan.k, plan.objective,
                             sets, plan.converged)
    return PartitionPlan(stitched.w, stitched.n, stitched.k,
                         evaluate_tpot(spec, stitched), sets, plan.converged)


def select_devices(spec: ClusterSpec, plan: PartitionPlan) -> tuple[ClusterSpec, PartitionPlan]:
    """Drop single-layer devices (keeping forced relays at zero windows) while
    doing so does not hurt the objective; replans after every removal."""
    cur_spec = spec
    cur_plan = plan
    relay_ids: frozenset[str] = frozenset()

    while True:
        compute = [d for d in cur_spec.devices if d.id not in relay_ids]
        candidate = None
        for d in compute[1:]:  # the head stays: it owns the input/output layers
            i = cur_spec.device_index(d.id)
            if cur_plan.w[i] == 1:
                candidate = d
                break
        if candidate is None:
            return cur_spec, cur_plan

        keep_as_relay = candidate.id in cur_spec.topology_relays
        next_relays = relay_ids | {candidate.id} if keep_as_relay else relay_ids
        next_devices = tuple(d for d in cur_spec.devices
                             if keep_as_relay or d.id != candidate.id)
        next_spec = ClusterSpec(next_devices, cur_spec.model,
                                cur_spec.disk_speed_threshold, cur_spec.topology_relays)
        compute_devices = tuple(d for d in next_devices if d.id not in next_relays)
        if not compute_devices:
            raise PlanningError("device selection would leave no compute devices")
        compute_spec = ClusterSpec(compute_devices, cur_spec.model,
                                   cur_spec.disk_speed_threshold, cur_spec.topology_relays)
        try:
            replanned = run(compute_spec)
        except PlanningError:
            return cur_spec, cur_plan
        stitched = _stitch(next_spec, compute_spec, replanned, next_relays)
        if stitched.objective > cur_plan.objective:
            return cur_spec, cur_plan
        cur_spec, cur_plan, relay_ids = next_spec, stitched, next_relays
