"""Exact solver vs the enumeration oracle, plus constraint plumbing."""

import math
import random

import pytest

from conftest import GiB, MiB, make_device, make_model, make_spec, random_spec
from ringplan.ilp import (DeviceRow, brute_force_solve, build_instance,
                          check_solution, optimal_gpu_layers, solve)
from ringplan.latency import classify_devices


def _instance_for(spec, w_iter=None, n_iter=None, k=1):
    M = len(spec.devices)
    L = spec.model.layer_count
    if w_iter is None:
        w_iter = [L // M] * M
        w_iter[0] += L - sum(w_iter)
    if n_iter is None:
        n_iter = [0] * M
    sets = classify_devices(spec, w_iter, n_iter, 1)
    return build_instance(spec, sets, k)


def random_instance(rng: random.Random, max_devices=4, max_window=24):
    M = rng.randrange(1, max_devices + 1)
    k = rng.randrange(1, 5)
    W = rng.randrange(M, max_window + 1)
    spec = random_spec(rng, M, k * W)
    L = spec.model.layer_count
    w_iter = [1] * M
    for _ in range(L - M):
        w_iter[rng.randrange(M)] += 1
    n_iter = [rng.randint(0, wm) if d.backend != "none" else 0
              for wm, d in zip(w_iter, spec.devices)]
    sets = classify_devices(spec, w_iter, n_iter, 1)
    return build_instance(spec, sets, k)


def test_build_instance_window_from_rounds():
    spec = make_spec([make_device("a"), make_device("b")],
                     model=make_model(layer_count=36))
    inst = _instance_for(spec, k=3)
    assert inst.W == 12
    assert inst.k == 3


def test_build_instance_rejects_non_divisor():
    spec = make_spec([make_device("a")], model=make_model(layer_count=10))
    with pytest.raises(ValueError):
        _instance_for(spec, k=7)


def test_window_below_device_count_is_trivially_infeasible():
    spec = make_spec([make_device("a"), make_device("b"), make_device("c")],
                     model=make_model(layer_count=12))
    inst = _instance_for(spec, k=6)   # W = 2 < M = 3
    assert inst.trivially_infeasible
    assert solve(inst) is None
    assert brute_force_solve(inst) is None


def _row(b, n_cap=0, min_cpu=None, max_cpu=None, w_lo=1, w_hi=24):
    return DeviceRow("dev", 0, 1.0, b, w_lo, w_hi, n_cap, min_cpu, max_cpu,
                     gpu=n_cap > 0)


def test_negative_gpu_coefficient_fills_the_interval():
    assert optimal_gpu_layers(8, _row(-0.018, n_cap=5)) == 5


def test_positive_gpu_coefficient_empties_the_interval():
    assert optimal_gpu_layers(8, _row(0.02, n_cap=5)) == 0


def test_zero_coefficient_prefers_fewer_gpu_layers():
    assert optimal_gpu_layers(8, _row(0.0, n_cap=5)) == 0


def test_overload_floor_can_cross_the_gpu_interval():
    # staying overloaded needs w - n >= 6; with w = 4 no n fits
    assert optimal_gpu_layers(4, _row(-0.01, n_cap=4, min_cpu=6)) is None


def test_single_device_forced_window():
    model = make_model(layer_count=10, layer_bytes=50 * MiB, kv_tokens=0)
    spec = make_spec([make_device("a", ram_available=8 * GiB)], model=model)
    inst = _instance_for(spec)
    sol = solve(inst)
    assert sol is not None
    assert sol.w == (10,)
    assert sol.n == (0,)


def test_two_device_gpu_cap_matches_enumeration():
    # device a: GPU pays off (beta < 0) but VRAM caps 4 layers; device b CPU-only
    model = make_model(layer_count=12, layer_bytes=200 * MiB, kv_tokens=0,
                       gpu_buffer=100 * MiB)
    bprime = model.layer_footprint_bytes()
    gpu = make_device("a", backend="cuda", ram_available=16 * GiB,
                      vram_available=4 * bprime + model.gpu_buffer + 1 * MiB)
    cpu = make_device("b", ram_available=16 * GiB)
    spec = make_spec([gpu, cpu], model=model)
    inst = _instance_for(spec, k=2)
    got = solve(inst)
    want = brute_force_solve(inst)
    assert got is not None and want is not None
    assert got.objective == pytest.approx(want.objective, rel=1e-12)
    assert got.w == want.w and got.n == want.n
    # the cap binds: floor(W * z_gpu) layers on the GPU at W = 6
    assert got.n[0] == math.floor(6 * inst.bounds.z_gpu["a"])


def test_every_composition_infeasible_reported_by_both():
    # two devices whose class-4 caps sum below the window
    model = make_model(layer_count=12, layer_bytes=GiB, kv_tokens=0,
                       input_bytes=0, output_bytes=0, cpu_buffer=0)
    a = make_device("a", ram_available=2 * GiB)   # fits 2 layers
    b = make_device("b", ram_available=3 * GiB)   # fits 3 layers
    spec = make_spec(devices=[a, b], model=model, threshold=1e10)  # slow disks: must fit
    inst = _instance_for(spec, w_iter=[2, 10], n_iter=[0, 0], k=1)
    assert solve(inst) is None
    assert brute_force_solve(inst) is None


def test_brute_force_guard():
    spec = make_spec([make_device("a")], model=make_model(layer_count=30))
    inst = _instance_for(spec, k=1)
    with pytest.raises(ValueError):
        brute_force_solve(inst)


def test_brute_force_enumerates_all_compositions():
    # M=2, W=4: compositions (1,3), (2,2), (3,1); costs differ via alpha
    model = make_model(layer_count=4, layer_bytes=MiB, kv_tokens=0)
    fast = make_device("a", cpu_flops={"q4k": 1e11}, ram_available=8 * GiB)
    slow = make_device("b", cpu_flops={"q4k": 1e10}, ram_available=8 * GiB)
    spec = make_spec([fast, slow], model=model)
    inst = _instance_for(spec, w_iter=[2, 2])
    sol = brute_force_solve(inst)
    best = None
    for w_a in (1, 2, 3):
        w = (w_a, 4 - w_a)
        cost = inst.k * (sum(inst.coeffs.a[i] * w[i] + inst.coeffs.c[i]
                             for i in range(2))) + inst.coeffs.kappa
        if best is None or cost < best[0]:
            best = (cost, w)
    assert sol.w == best[1]
    assert sol.objective == pytest.approx(best[0], rel=1e-12)


def test_lexicographic_tie_break_on_symmetric_devices():
    model = make_model(layer_count=9, layer_bytes=MiB, kv_tokens=0)
    devices = [make_device(f"d{i}", ram_available=8 * GiB) for i in range(3)]
    spec = make_spec(devices, model=model)
    inst = _instance_for(spec, w_iter=[3, 3, 3])
    got = solve(inst)
    want = brute_force_solve(inst)
    assert got.w == want.w == (1, 1, 7)
    assert got.n == want.n == (0, 0, 0)


def test_vectorized_cost_table_matches_scalar_rule(rng):
    from ringplan.ilp import _device_cost_table

    for _ in range(200):
        W = rng.randrange(1, 30)
        n_cap = rng.randrange(0, 10)
        row = DeviceRow(
            "dev", 0, rng.uniform(0.001, 1.0), rng.uniform(-0.5, 0.5),
            rng.randrange(1, 6), rng.randrange(1, W + 4), n_cap,
            rng.choice([None, rng.randrange(0, 8)]),
            rng.choice([None, rng.randrange(0, 8)]),
            gpu=n_cap > 0)
        cost, best_n = _device_cost_table(row, W)
        for w in range(W + 1):
            if not (row.w_lo <= w <= min(row.w_hi, W)):
                assert cost[w] == float("inf")
                continue
            n = optimal_gpu_layers(w, row)
            if n is None:
                assert cost[w] == float("inf")
                assert best_n[w] == -1
            else:
                assert best_n[w] == n
                assert cost[w] == pytest.approx(row.a * w + row.b * n, rel=1e-12)


def test_solve_is_deterministic(rng):
    for _ in range(10):
        inst = random_instance(rng)
        first = solve(inst)
        again = solve(inst)
        if first is None:
            assert again is None
        else:
            assert (first.w, first.n, first.objective) == (again.w, again.n, again.objective)


def test_solve_matches_enumeration_on_random_instances(rng):
    feasible = 0
    for _ in range(200):
        inst = random_instance(rng)
        got = solve(inst)
        want = brute_force_solve(inst)
        if want is None:
            assert got is None
            continue
        feasible += 1
        assert got is not None
        assert got.objective == pytest.approx(want.objective, rel=1e-9)
        assert not check_solution(inst, got.w, got.n)
    assert feasible >= 60, f"generator produced too few feasible instances ({feasible})"


def test_returned_plans_pass_independent_recheck(rng):
    for _ in range(50):
        inst = random_instance(rng)
        sol = solve(inst)
        if sol is None:
            continue
        assert check_solution(inst, sol.w, sol.n) == []
        assert sum(sol.w) == inst.W
