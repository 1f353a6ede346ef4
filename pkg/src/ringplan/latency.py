"""Analytical per-token latency model for pipelined-ring decode.

Everything here is a pure function of a ClusterSpec and a candidate layer
assignment. Byte quantities are kept in exact integer/Fraction arithmetic
(the input-table read of ``input_bytes / vocab_size`` is the one fractional
term); latencies are double-precision seconds.

Devices fall into four behavior classes per assignment:
  class 1: macOS without Metal, weight+KV demand above available RAM
  class 2: macOS with Metal, demand above the Metal working set
  class 3: Linux/Android, CPU-resident demand above RAM (plus Android swapout)
  class 4: demand fits, or the disk is too slow to be worth overloading
Classes 1-3 reload from disk every token; class 4 pays only the head's
input-table read.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

from .errors import ConfigError
from .profiles import ClusterSpec, DeviceProfile, ModelProfile, disk_read_speed

Frac = Fraction


# --- layer tiling ----------------------------------------------------------

@dataclass(frozen=True)
class LayerCounts:
    """Per-device totals induced by ring-order tiling of the layer windows."""

    layers: tuple[int, ...]        # layers computed per token
    gpu_layers: tuple[int, ...]    # of which on the GPU backend
    windows: tuple[int, ...]       # ring visits per token
    remainder: int                 # L mod sum(w)
    total_window: int              # sum(w)


def layer_counts(w: Sequence[int], n: Sequence[int], layer_count: int) -> LayerCounts:
    """Tile ``layer_count`` layers over the ring in windows of w (n on GPU).

    Full rounds hand every device w_m layers; the remainder round walks the
    ring once more, each device taking min(w_m, what is left).
    """
    if len(w) != len(n):
        raise ValueError(f"window and gpu-layer vectors differ in length: {len(w)} vs {len(n)}")
    total = sum(w)
    if total < 1:
        raise ValueError("at least one layer window must be positive")
    full = layer_count // total
    rem = layer_count % total
    layers, gpu, windows = [], [], []
    left = rem
    for wm, nm in zip(w, n):
        extra = max(0, left)
        layers.append(full * wm + min(wm, extra))
        gpu.append(full * nm + min(nm, extra))
        windows.append(full + min(1, extra))
        left -= min(wm, extra)
    return LayerCounts(tuple(layers), tuple(gpu), tuple(windows), rem, total)


# --- device classification ------------------------------------------------

@dataclass(frozen=True)
class SetAssignment:
    """Partition of the cluster into behavior classes 1-4.

    ``swapout`` snapshots the Android swap relief at the assignment's
    iterate; it is refreshed whenever devices are reassigned.
    """

    m1: frozenset[str]
    m2: frozenset[str]
    m3: frozenset[str]
    m4: frozenset[str]
    m4_force: frozenset[str] = frozenset()
    swapout: Mapping[str, Fraction] = field(default_factory=dict, compare=False)

    def class_of(self, device_id: str) -> int:
        for klass, members in enumerate((self.m1, self.m2, self.m3, self.m4), start=1):
            if device_id in members:
                return klass
        raise KeyError(device_id)

    def overloaded_ids(self) -> frozenset[str]:
        return self.m1 | self.m2 | self.m3


@dataclass(frozen=True)
class PartitionPlan:
    """A layer-to-device assignment plus its evaluated objective."""

    w: tuple[int, ...]             # window sizes (0 marks a relay hop)
    n: tuple[int, ...]             # GPU layers within each window
    k: int                         # rounds per token
    objective: float               # analytical seconds per output token
    sets: SetAssignment
    converged: bool = True


def b_cio_bytes(model: ModelProfile, is_head: bool) -> Fraction:
    """Constant CPU-side bytes: compute buffer, plus in/out weights on the head."""
    extra = Frac(model.input_bytes, model.vocab_size) + model.output_bytes if is_head else Frac(0)
    return extra + model.cpu_buffer


def android_swapout(device: DeviceProfile, cpu_demand: Fraction) -> Fraction:
    """Bytes Android frees by swapping cold pages, capped by config."""
    cap = min(device.bytes_can_swap, device.swap_available)
    return min(max(Frac(0), cpu_demand - device.ram_available), Frac(cap))


def _overload_state_scaled(device: DeviceProfile, model: ModelProfile,
                           is_head: bool, l_m: int, l_gpu_m: int):
    """(demand, budget, swapout, overloaded), all scaled by the vocab size.

    Scaling by V keeps the head's input-table term (input_bytes / V) exact
    in plain integer arithmetic.
    """
    V = model.vocab_size
    bprime = model.layer_footprint_bytes()
    bc = model.cpu_buffer * V + (model.input_bytes + model.output_bytes * V if is_head else 0)
    swap = 0
    if device.os == "macos" and device.backend == "metal":
        demand = (l_m * bprime + model.gpu_buffer) * V + bc
        budget = device.metal_working_set * V
    elif device.os == "macos":
        demand = l_m * bprime * V + bc
        budget = device.ram_available * V
    else:
        demand = (l_m - l_gpu_m) * bprime * V + bc
        budget = device.ram_available * V
        if device.os == "android":
            cap = min(device.bytes_can_swap, device.swap_available) * V
            swap = min(max(0, demand - budget), cap)
            budget += swap
    return demand, budget, swap, demand > budget


def _overload_state(device: DeviceProfile, model: ModelProfile, is_head: bool,
                    l_m: int, l_gpu_m: int):
    """Fraction view of the demand/budget state for one device."""
    demand, budget, swap, over = _overload_state_scaled(device, model, is_head,
                                                        l_m, l_gpu_m)
    V = model.vocab_size
    return Frac(demand, V), Frac(budget, V), Frac(swap, V), over


def classify_devices(spec: ClusterSpec, w: Sequence[int], n: Sequence[int],
                     k: int, forced: frozenset[str] | set[str] = frozenset()) -> SetAssignment:
    """Assign every device to exactly one class at the given iterate.

    Forced devices and slow-disk devices always land in class 4; the rest
    follow their OS-specific overload condition (strictly above budget).
    """
    del k  # the tiling below already encodes the round count
    counts = layer_counts(w, n, spec.model.layer_count)
    m1, m2, m3, m4, m4f = set(), set(), set(), set(), set()
    swapout: dict[str, Fraction] = {}
    for i, d in enumerate(spec.devices):
        _demand, _budget, swap, over = _overload_state_scaled(
            d, spec.model, i == 0, counts.layers[i], counts.gpu_layers[i])
        if d.os == "android":
            swapout[d.id] = Frac(swap, spec.model.vocab_size)
        if d.id in forced:
            m4.add(d.id)
            m4f.add(d.id)
            continue
        if disk_read_speed(d) <= spec.disk_speed_threshold:
            m4.add(d.id)
            continue
        if not over:
            m4.add(d.id)
        elif d.os == "macos" and d.backend != "metal":
            m1.add(d.id)
        elif d.os == "macos":
            m2.add(d.id)
        else:
            m3.add(d.id)
    return SetAssignment(frozenset(m1), frozenset(m2), frozenset(m3),
                         frozenset(m4), frozenset(m4f), swapout)


# --- per-device coefficients ------------------------------------------------

def _flops_seconds(flops: Mapping[str, float], speed: Mapping[str, float],
                   device_id: str, backend: str) -> float:
    total = 0.0
    for tag, ops in flops.items():
        if ops == 0:
            continue
        if tag not in speed or speed[tag] <= 0:
            raise ConfigError(
                [f"device {device_id}: no {backend} throughput for quant {tag!r}"])
        total += ops / speed[tag]
    return total


def device_coefficients(device: DeviceProfile, model: ModelProfile,
                        is_head: bool) -> tuple[float, float, float]:
    """(alpha, beta, xi): CPU seconds per layer, GPU-minus-CPU seconds per
    layer, and per-window overhead (host/GPU staging plus one ring hop)."""
    del is_head  # the head's extra output-layer cost lives in kappa
    bprime = model.layer_footprint_bytes()
    alpha = (_flops_seconds(model.layer_flops, device.cpu_flops, device.id, "cpu")
             + device.kv_copy_cpu + bprime / device.mem_throughput_cpu)
    if device.backend == "none":
        beta = 0.0
    else:
        gpu_cost = (_flops_seconds(model.layer_flops, device.gpu_flops, device.id, device.backend)
                    + device.kv_copy_gpu + bprime / device.mem_throughput_gpu)
        beta = gpu_cost - alpha
    xi = (device.ram_to_vram + device.vram_to_ram) * (0 if device.uma else 1) + device.comm_latency
    return alpha, beta, xi


@dataclass(frozen=True)
class LatencyCoefficients:
    """Objective vectors for one set assignment, in ring order."""

    alpha: tuple[float, ...]
    beta: tuple[float, ...]
    xi: tuple[float, ...]
    a: tuple[float, ...]           # seconds per window layer
    b: tuple[float, ...]           # seconds per GPU layer (may be negative)
    c: tuple[float, ...]           # seconds per window
    kappa: float                   # constant offset
    bprime: int                    # weight+KV bytes per layer
    b_cio: tuple[Fraction, ...]    # constant CPU bytes per device


def objective_terms(spec: ClusterSpec, sets: SetAssignment) -> LatencyCoefficients:
    """Linear objective coefficients for the given class assignment."""
    model = spec.model
    bprime = model.layer_footprint_bytes()
    alpha, beta, xi, a, b, c, bcio = [], [], [], [], [], [], []
    for i, d in enumerate(spec.devices):
        al, be, x = device_coefficients(d, model, i == 0)
        alpha.append(al)
        beta.append(be)
        xi.append(x)
        bcio.append(b_cio_bytes(model, i == 0))
        klass = sets.class_of(d.id)
        s_disk = disk_read_speed(d)
        if klass == 1:
            a.append(al + bprime / s_disk)
            b.append(0.0)
        elif klass == 2:
            a.append(al + model.layer_bytes / s_disk)
            b.append(be)
        elif klass == 3:
            a.append(al + bprime / s_disk)
            b.append(be - bprime / s_disk)
        else:
            a.append(al)
            b.append(be)
        c.append(x)

    head = spec.devices[0]
    lookup = model.input_bytes / model.vocab_size
    kappa = (_flops_seconds(model.output_flops, head.cpu_flops, head.id, "cpu")
             + (lookup + model.output_bytes) / head.mem_throughput_cpu
             + lookup / disk_read_speed(head))
    if head.id not in sets.m4:
        kappa += model.output_bytes / disk_read_speed(head)
    for i, d in enumerate(spec.devices):
        if d.id in sets.m1 or d.id in sets.m3:
            swap = float(sets.swapout.get(d.id, 0)) if d.os == "android" else 0.0
            kappa += (model.cpu_buffer - d.ram_available - swap) / disk_read_speed(d)
    return LatencyCoefficients(tuple(alpha), tuple(beta), tuple(xi), tuple(a),
                               tuple(b), tuple(c), kappa, bprime, tuple(bcio))


# --- memory bound rows -------------------------------------------------------

@dataclass(frozen=True)
class BoundRow:
    """One row of the RAM-bound system: w_coeff*w + n_coeff*n + W*z (<|<=) 0."""

    device_id: str
    block: str                     # m1 | m2 | m3 | m4_macos | m4_metal | m4_posix
    w_coeff: int
    n_coeff: int
    active: bool
    strict: bool                   # classes 1-3 must exceed their budget
    z: Fraction                    # scaled by 1/(L*bprime)


@dataclass(frozen=True)
class MemoryBounds:
    rows: tuple[BoundRow, ...]
    z_gpu: Mapping[str, Fraction]  # per-device VRAM/shared-memory bound


def memory_bounds(spec: ClusterSpec, sets: SetAssignment) -> MemoryBounds:
    """RAM/VRAM bound rows for the given class assignment.

    Class 1-3 rows keep their members above budget (strict); the three
    class-4 rows cap demand at budget, activated by the member's OS.
    Numerators are assembled in integers scaled by the vocab size so each
    row costs a single exact Fraction construction.
    """
    model = spec.model
    V = model.vocab_size
    den = model.layer_count * model.layer_footprint_bytes() * V
    bc_head = model.input_bytes + (model.output_bytes + model.cpu_buffer) * V
    bc_plain = model.cpu_buffer * V
    rows: list[BoundRow] = []
    z_gpu: dict[str, Fraction] = {}

    def budget_nums(d: DeviceProfile, i: int) -> dict[str, int]:
        bc = bc_head if i == 0 else bc_plain
        # Android swap relief enters at its capped maximum: at any
        # self-consistent operating point the relief either equals the cap
        # (overloaded) or tracks demand exactly (fitting), so the cap is the
        # one value that bounds both regimes without chasing the iterate
        swap = 0
        if d.os == "android":
            swap = min(d.bytes_can_swap, d.swap_available) * V
        return {
            "ram": d.ram_available * V - bc,
            "metal": (d.metal_working_set - model.gpu_buffer) * V - bc,
            "posix": d.ram_available * V + swap - bc,
        }

    for i, d in enumerate(spec.devices):
        klass = sets.class_of(d.id)
        t = budget_nums(d, i)
        if klass == 1:
            rows.append(BoundRow(d.id, "m1", -1, 0, True, True, Frac(t["ram"], den)))
        elif klass == 2:
            rows.append(BoundRow(d.id, "m2", -1, 0, True, True, Frac(t["metal"], den)))
        elif klass == 3:
            rows.append(BoundRow(d.id, "m3", -1, 1, True, True, Frac(t["posix"], den)))
    for i, d in enumerate(spec.devices):
        if sets.class_of(d.id) != 4:
            continue
        t = budget_nums(d, i)
        is_macos_plain = d.os == "macos" and d.backend != "metal"
        is_metal = d.os == "macos" and d.backend == "metal"
        is_posix = d.os in ("linux", "android")
        rows.append(BoundRow(d.id, "m4_macos", 1, 0, is_macos_plain, False, Frac(-t["ram"], den)))
        rows.append(BoundRow(d.id, "m4_metal", 1, 0, is_metal, False, Frac(-t["metal"], den)))
        rows.append(BoundRow(d.id, "m4_posix", 1, -1, is_posix, False, Frac(-t["posix"], den)))

    for i, d in enumerate(spec.devices):
        if d.backend == "cuda":
            z_gpu[d.id] = Frac((d.vram_available - model.gpu_buffer) * V, den)
        elif d.backend == "metal":
            head_out = model.output_bytes if i == 0 else 0
            z_gpu[d.id] = Frac((d.metal_working_set - model.gpu_buffer - head_out) * V, den)
        else:
            z_gpu[d.id] = Frac(0)
    return MemoryBounds(tuple(rows), z_gpu)


# --- full (non-linearized) objective ----------------------------------------

def evaluate_tpot(spec: ClusterSpec, plan: PartitionPlan) -> float:
    """Seconds per output token from the raw per-OS latency sums.

    Valid for any tiling (remainder rounds, zero-window relay hops); the
    disk terms keep their max() form, so overload conditions are evaluated
    directly rather than through a class assignment.
    """
    model = spec.model
    if len(plan.w) != len(spec.devices) or len(plan.n) != len(spec.devices):
        raise ValueError("plan dimensions do not match the cluster")
    counts = layer_counts(plan.w, plan.n, model.layer_count)
    bprime = model.layer_footprint_bytes()
    lookup = Frac(model.input_bytes, model.vocab_size)
    total = 0.0
    for i, d in enumerate(spec.devices):
        l_m, lg_m, wins = counts.layers[i], counts.gpu_layers[i], counts.windows[i]
        is_head = i == 0
        if plan.w[i] == 0:
            # relay hop: forwards the hidden state every round, computes nothing
            total += wins * d.comm_latency
            continue
        cpu_per_layer = (_flops_seconds(model.layer_flops, d.cpu_flops, d.id, "cpu")
                         + d.kv_copy_cpu + bprime / d.mem_throughput_cpu)
        total += (l_m - lg_m) * cpu_per_layer
        if lg_m:
            gpu_per_layer = (_flops_seconds(model.layer_flops, d.gpu_flops, d.id, d.backend)
                             + d.kv_copy_gpu + bprime / d.mem_throughput_gpu)
            total += lg_m * gpu_per_layer
        total += wins * ((d.ram_to_vram + d.vram_to_ram) * (0 if d.uma else 1)
                         + d.comm_latency)
        if is_head:
            total += (_flops_seconds(model.output_flops, d.cpu_flops, d.id, "cpu")
                      + float(lookup + model.output_bytes) / d.mem_throughput_cpu)

        bc = b_cio_bytes(model, is_head)
        floor = lookup if is_head else Frac(0)
        s_disk = disk_read_speed(d)
        if d.os == "macos" and d.backend == "metal":
            over = l_m * bprime + bc + model.gpu_buffer > d.metal_working_set
            reload_bytes = (l_m * model.layer_bytes + (lookup + model.output_bytes if is_head else Frac(0))) if over else Frac(0)
            total += float(max(reload_bytes, floor)) / s_disk
        elif d.os == "macos":
            total += float(max(l_m * bprime + bc - d.ram_available, floor)) / s_disk
        else:
            demand = (l_m - lg_m) * bprime + bc
            relief = android_swapout(d, demand) if d.os == "android" else Frac(0)
            total += float(max(demand - d.ram_available - relief, floor)) / s_disk
    return total


def linearized_tpot(spec: ClusterSpec, plan: PartitionPlan,
                    coeffs: LatencyCoefficients | None = None) -> float:
    """k*(a.w + b.n + sum(c)) + kappa for the plan's set assignment."""
    if coeffs is None:
        coeffs = objective_terms(spec, plan.sets)
    linear = sum(coeffs.a[i] * plan.w[i] + coeffs.b[i] * plan.n[i] + coeffs.c[i]
                 for i in range(len(plan.w)))
    return plan.k * linear + coeffs.kappa


# --- memory usage report ------------------------------------------------------

@dataclass(frozen=True)
class MemoryUsage:
    ram_demand: int                # bytes the CPU/shared pool must hold
    gpu_demand: int                # bytes pinned in VRAM / the shared pool
    overloaded: bool               # demand strictly above the OS budget


def estimate_memory_usage(spec: ClusterSpec, plan: PartitionPlan) -> dict[str, MemoryUsage]:
    """Per-device demand aggregates for display and calibration checks."""
    model = spec.model
    counts = layer_counts(plan.w, plan.n, model.layer_count)
    bprime = model.layer_footprint_bytes()
    out: dict[str, MemoryUsage] = {}
    for i, d in enumerate(spec.devices):
        l_m, lg_m = counts.layers[i], counts.gpu_layers[i]
        demand, _budget, _swap, over = _overload_state(d, model, i == 0, l_m, lg_m)
        gpu_demand = 0
        if d.backend != "none":
            gpu_demand = lg_m * bprime + model.gpu_buffer
            if d.backend == "metal" and i == 0:
                gpu_demand += model.output_bytes
        out[d.id] = MemoryUsage(math.ceil(demand), gpu_demand, over)
    return out


# --- plan (de)serialization ---------------------------------------------------

def plan_to_dict(spec: ClusterSpec, plan: PartitionPlan) -> dict:
    return {
        "plan": {
            "devices": [d.id for d in spec.devices],
            "w": list(plan.w),
            "n": list(plan.n),
            "k": plan.k,
            "objective": plan.objective,
            "sets": {
                "m1": sorted(plan.sets.m1),
                "m2": sorted(plan.sets.m2),
                "m3": sorted(plan.sets.m3),
                "m4": sorted(plan.sets.m4),
                "m4_force": sorted(plan.sets.m4_force),
            },
        }
    }


def plan_from_dict(spec: ClusterSpec, doc: dict) -> PartitionPlan:
    try:
        body = doc["plan"]
        ids = [str(x) for x in body["devices"]]
        w = tuple(int(x) for x in body["w"])
        n = tuple(int(x) for x in body["n"])
        k = int(body["k"])
        raw_sets = body["sets"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError([f"plan file: malformed document ({exc})"]) from exc
    if ids != [d.id for d in spec.devices]:
        raise ConfigError(["plan file: device list does not match the cluster config"])
    if len(w) != len(ids) or len(n) != len(ids):
        raise ConfigError(["plan file: w/n length does not match the device list"])
    sets = SetAssignment(
        frozenset(raw_sets.get("m1", [])), frozenset(raw_sets.get("m2", [])),
        frozenset(raw_sets.get("m3", [])), frozenset(raw_sets.get("m4", [])),
        frozenset(raw_sets.get("m4_force", [])),
    )
    plan = PartitionPlan(w, n, k, float(body.get("objective", 0.0)), sets)
    return PartitionPlan(w, n, k, evaluate_tpot(spec, plan), sets)
