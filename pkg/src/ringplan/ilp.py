"""Exact solver for the per-round-count layer assignment program.

For a fixed round count k the problem becomes: minimize
k*(a.w + b.n + sum(c)) + kappa over integer vectors (w, n) subject to
sum(w) = W, per-device memory rows, and per-device GPU capacity. Every
constraint except sum(w) = W touches a single device, so after resolving
the best GPU split for each candidate window size the problem is a
separable integer allocation of W units over the devices. ``solve`` runs
an exact dynamic program over that structure (provably optimal, no
tolerance games) and reconstructs the lexicographically smallest optimum;
``brute_force_solve`` enumerates compositions as an independent oracle.

All bound arithmetic happens in exact rationals before being tightened to
integer bounds, so strict-vs-non-strict inequalities survive intact:
overloaded classes must sit strictly above their budget, class 4 at or
below it.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import PlanningError
from .latency import (LatencyCoefficients, MemoryBounds, SetAssignment,
                      memory_bounds, objective_terms)
from .profiles import ClusterSpec

_INF = float("inf")


@dataclass(frozen=True)
class DeviceRow:
    """Integer-tightened per-device constraint data at a fixed W."""

    device_id: str
    index: int
    a: float
    b: float
    w_lo: int                    # classes 1-3 push this above the budget line
    w_hi: int                    # class-4 rows cap it at the budget line
    n_cap: int                   # floor(W * z_gpu); 0 when there is no GPU
    min_cpu_layers: int | None   # class 3: w - n >= this (stay overloaded)
    max_cpu_layers: int | None   # class-4 linux/android: w - n <= this
    gpu: bool


@dataclass(frozen=True)
class IlpInstance:
    k: int
    W: int
    coeffs: LatencyCoefficients
    bounds: MemoryBounds
    rows: tuple[DeviceRow, ...]
    device_count: int
    gpu_mask: tuple[bool, ...]
    trivially_infeasible: bool


@dataclass(frozen=True)
class IlpSolution:
    w: tuple[int, ...]
    n: tuple[int, ...]
    objective: float


def build_instance(spec: ClusterSpec, sets: SetAssignment, k: int,
                   coeffs: LatencyCoefficients | None = None,
                   bounds: MemoryBounds | None = None) -> IlpInstance:
    """Assemble the fixed-k program for one set assignment.

    ``coeffs``/``bounds`` may be supplied to share them across the per-k
    sweep; they do not depend on k.
    """
    L = spec.model.layer_count
    if k < 1 or L % k != 0:
        raise ValueError(f"round count {k} does not divide the layer count {L}")
    W = L // k
    M = len(spec.devices)
    if coeffs is None:
        coeffs = objective_terms(spec, sets)
    if bounds is None:
        bounds = memory_bounds(spec, sets)

    by_device: dict[str, dict[str, Fraction]] = {d.id: {} for d in spec.devices}
    for row in bounds.rows:
        if row.active:
            by_device[row.device_id][row.block] = row.z

    def floor_scaled(z: Fraction, scale: int) -> int:
        return (scale * z.numerator) // z.denominator

    rows: list[DeviceRow] = []
    infeasible = W < M
    for i, d in enumerate(spec.devices):
        blocks = by_device[d.id]
        w_lo, w_hi = 1, W - (M - 1)
        min_cpu = max_cpu = None
        n_cap = floor_scaled(bounds.z_gpu[d.id], W) if d.backend != "none" else 0
        if n_cap < 0:
            infeasible = True  # even the GPU compute buffer does not fit
            n_cap = 0
        # strict rows: w (or w - n) must strictly exceed W*z
        if "m1" in blocks:
            w_lo = max(w_lo, floor_scaled(blocks["m1"], W) + 1)
        if "m2" in blocks:
            w_lo = max(w_lo, floor_scaled(blocks["m2"], W) + 1)
        if "m3" in blocks:
            min_cpu = floor_scaled(blocks["m3"], W) + 1
            w_lo = max(w_lo, min_cpu)
        # non-strict class-4 rows: w (or w - n) may reach -W*z exactly
        if "m4_macos" in blocks:
            w_hi = min(w_hi, floor_scaled(blocks["m4_macos"], -W))
        if "m4_metal" in blocks:
            w_hi = min(w_hi, floor_scaled(blocks["m4_metal"], -W))
        if "m4_posix" in blocks:
            max_cpu = floor_scaled(blocks["m4_posix"], -W)
            if max_cpu < 0:
                infeasible = True  # cannot fit even with every layer on the GPU
            w_hi = min(w_hi, max_cpu + n_cap)
        if w_lo > w_hi:
            infeasible = True
        rows.append(DeviceRow(d.id, i, coeffs.a[i], coeffs.b[i], w_lo, w_hi,
                              n_cap, min_cpu, max_cpu, d.backend != "none"))
    return IlpInstance(k, W, coeffs, bounds, tuple(rows), M,
                       tuple(d.backend != "none" for d in spec.devices), infeasible)


def optimal_gpu_layers(w_m: int, row: DeviceRow) -> int | None:
    """Best GPU layer count for a fixed window size, or None if none fits.

    The feasible n form an interval; a negative per-GPU-layer coefficient
    fills it, a positive one empties it, and zero ties break toward fewer
    GPU layers.
    """
    n_lo = 0
    n_hi = min(w_m, row.n_cap)
    if row.max_cpu_layers is not None:
        n_lo = max(n_lo, w_m - row.max_cpu_layers)
    if row.min_cpu_layers is not None:
        n_hi = min(n_hi, w_m - row.min_cpu_layers)
    if n_lo > n_hi:
        return None
    return n_hi if row.b < 0 else n_lo


def _device_cost_table(row: DeviceRow, W: int) -> tuple[np.ndarray, np.ndarray]:
    """cost[w] = a*w + b*n*(w) over 0..W (+inf where infeasible), with the
    chosen n per w (-1 where infeasible). Vectorized mirror of
    optimal_gpu_layers."""
    cost = np.full(W + 1, _INF)
    best_n = np.full(W + 1, -1, dtype=np.int64)
    lo, hi = row.w_lo, min(row.w_hi, W)
    if lo > hi:
        return cost, best_n
    wv = np.arange(lo, hi + 1)
    n_lo = np.zeros(wv.shape, dtype=np.int64)
    if row.max_cpu_layers is not None:
        np.maximum(n_lo, wv - row.max_cpu_layers, out=n_lo)
    n_hi = np.minimum(wv, row.n_cap)
    if row.min_cpu_layers is not None:
        np.minimum(n_hi, wv - row.min_cpu_layers, out=n_hi)
    feasible = n_lo <= n_hi
    n_star = n_hi if row.b < 0 else n_lo
    sel = wv[feasible]
    cost[sel] = row.a * sel + row.b * n_star[feasible]
    best_n[sel] = n_star[feasible]
    return cost, best_n


def linear_objective(inst: IlpInstance, w, n) -> float:
    coeffs = inst.coeffs
    linear = sum(coeffs.a[i] * w[i] + coeffs.b[i] * n[i] + coeffs.c[i]
                 for i in range(inst.device_count))
    return inst.k * linear + coeffs.kappa


def check_solution(inst: IlpInstance, w, n) -> list[str]:
    """Re-check a candidate against the original rational constraints."""
    problems: list[str] = []
    W = inst.W
    if sum(w) != W:
        problems.append(f"sum(w)={sum(w)} != W={W}")
    for i in range(inst.device_count):
        if w[i] < 1:
            problems.append(f"device {i}: w={w[i]} < 1")
        if not 0 <= n[i] <= w[i]:
            problems.append(f"device {i}: n={n[i]} outside [0, w]")
    index_of = {r.device_id: r.index for r in inst.rows}
    for row in inst.bounds.rows:
        if not row.active:
            continue
        i = index_of[row.device_id]
        # exact integer compare of (w_coeff*w + n_coeff*n)*den + W*num vs 0
        value = ((row.w_coeff * w[i] + row.n_coeff * n[i]) * row.z.denominator
                 + W * row.z.numerator)
        ok = value < 0 if row.strict else value <= 0
        if not ok:
            problems.append(f"device {row.device_id}: {row.block} row violated "
                            f"({value / row.z.denominator:.3g})")
    for row in inst.rows:
        cap = inst.bounds.z_gpu[row.device_id]
        if row.gpu:
            if n[row.index] * cap.denominator > W * cap.numerator:
                problems.append(f"device {row.device_id}: n={n[row.index]} exceeds "
                                f"GPU bound {float(W * cap):.3g}")
        elif n[row.index] != 0:
            problems.append(f"device {row.device_id}: n must be 0 without a GPU backend")
    return problems


def solve(inst: IlpInstance) -> IlpSolution | None:
    """Exact optimum of the fixed-k program, or None when infeasible.

    Suffix-minimum tables over (device, allocated windows) give the optimal
    value; the reconstruction walks devices in ring order taking the
    smallest window size that still attains it, which yields the
    lexicographically smallest optimal (w, n).
    """
    if inst.trivially_infeasible:
        return None
    M, W = inst.device_count, inst.W
    tables = [_device_cost_table(row, W) for row in inst.rows]

    # only unit totals between the remaining lower and upper bounds are
    # reachable at each stage; everything else stays at +inf
    lows = [row.w_lo for row in inst.rows]
    highs = [min(row.w_hi, W) for row in inst.rows]
    if any(lo > hi for lo, hi in zip(lows, highs)):
        return None
    lo_sum = [0] * (M + 1)
    hi_sum = [0] * (M + 1)
    for m in range(M - 1, -1, -1):
        lo_sum[m] = lo_sum[m + 1] + lows[m]
        hi_sum[m] = min(W, hi_sum[m + 1] + highs[m])

    # suffix[m][u]: min cost of devices m.. using exactly u window units
    suffix = [None] * (M + 1)
    last = np.full(W + 1, _INF)
    last[0] = 0.0
    suffix[M] = last
    for m in range(M - 1, -1, -1):
        cost, _ = tables[m]
        u_min, u_max = lo_sum[m], hi_sum[m]
        if u_min > W:
            return None
        nxt = suffix[m + 1]
        units = np.arange(u_min, u_max + 1)
        widths = np.arange(lows[m], highs[m] + 1)
        idx = units[:, None] - widths[None, :]
        valid = (idx >= lo_sum[m + 1]) & (idx <= hi_sum[m + 1])
        cand = np.where(valid, nxt[np.clip(idx, 0, W)], _INF) + cost[widths][None, :]
        out = np.full(W + 1, _INF)
        out[u_min:u_max + 1] = cand.min(axis=1)
        suffix[m] = out
    total = suffix[0][W]
    if not np.isfinite(total):
        return None

    w_out, n_out = [], []
    remaining = W
    for m in range(M):
        cost, best_n = tables[m]
        row = inst.rows[m]
        target = suffix[m][remaining]
        tol = 1e-12 * max(1.0, abs(target))
        chosen = None
        for wv in range(row.w_lo, min(row.w_hi, remaining) + 1):
            if not np.isfinite(cost[wv]):
                continue
            rest = suffix[m + 1][remaining - wv]
            if np.isfinite(rest) and cost[wv] + rest <= target + tol:
                chosen = wv
                break
        if chosen is None:
            raise PlanningError(f"internal: reconstruction failed at device {row.device_id}")
        w_out.append(chosen)
        n_out.append(int(best_n[chosen]))
        remaining -= chosen

    problems = check_solution(inst, w_out, n_out)
    if problems:
        raise PlanningError("internal: solver produced an infeasible point: " + "; ".join(problems))
    return IlpSolution(tuple(w_out), tuple(n_out), linear_objective(inst, w_out, n_out))


def check_plan(spec: ClusterSpec, plan) -> list[str]:
    """Independent feasibility re-check of a whole plan.

    Reclassifies the devices at the plan's own (w, n, k) and verifies every
    constraint of the induced program in exact arithmetic.
    """
    from .latency import classify_devices

    problems: list[str] = []
    L = spec.model.layer_count
    if plan.k < 1 or L % plan.k != 0:
        problems.append(f"k={plan.k} does not divide L={L}")
        return problems
    if plan.k * sum(plan.w) != L:
        problems.append(f"k*sum(w)={plan.k * sum(plan.w)} != L={L}")
        return problems
    sets = classify_devices(spec, plan.w, plan.n, plan.k, plan.sets.m4_force)
    inst = build_instance(spec, sets, plan.k)
    return check_solution(inst, plan.w, plan.n)


# --- enumeration oracle -----------------------------------------------------

BRUTE_FORCE_MAX_W = 24
BRUTE_FORCE_MAX_DEVICES = 4


def brute_force_solve(inst: IlpInstance) -> IlpSolution | None:
    """Enumerate every composition of W into positive windows (testing oracle)."""
    if inst.W > BRUTE_FORCE_MAX_W or inst.device_count > BRUTE_FORCE_MAX_DEVICES:
        raise ValueError(
            f"instance too large for enumeration (W={inst.W}, M={inst.device_count})")
    if inst.trivially_infeasible:
        return None
    M, W = inst.device_count, inst.W
    best: tuple[float, tuple[int, ...], tuple[int, ...]] | None = None

    def recurse(m: int, remaining: int, w_acc: list[int], n_acc: list[int], cost: float):
        nonlocal best
        if m == M:
            if remaining != 0:
                return
            if best is None:
                best = (cost, tuple(w_acc), tuple(n_acc))
                return
            # ties are detected up to accumulation-order noise so the
            # lexicographic rule is stable across enumeration orders
            tol = 1e-12 * max(1.0, abs(best[0]))
            if cost < best[0] - tol:
                best = (cost, tuple(w_acc), tuple(n_acc))
            elif cost <= best[0] + tol:
                point = (tuple(w_acc), tuple(n_acc))
                if point < (best[1], best[2]):
                    best = (min(cost, best[0]), *point)
            return
        row = inst.rows[m]
        slack = remaining - (M - m - 1)  # every later device still needs >= 1
        for wv in range(row.w_lo, min(row.w_hi, slack) + 1):
            nv = optimal_gpu_layers(wv, row)
            if nv is None:
                continue
            w_acc.append(wv)
            n_acc.append(nv)
            recurse(m + 1, remaining - wv, w_acc, n_acc,
                    cost + row.a * wv + row.b * nv)
            w_acc.pop()
            n_acc.pop()

    recurse(0, W, [], [], 0.0)
    if best is None:
        return None
    _, w, n = best
    return IlpSolution(w, n, linear_objective(inst, w, n))
