"""Shared builders and randomized generators for the test suite."""

from __future__ import annotations

import random

import pytest

from ringplan.profiles import (ClusterSpec, DeviceProfile, ModelProfile,
                               validate_cluster)

GiB = 1 << 30
MiB = 1 << 20


def make_model(**over) -> ModelProfile:
    base = dict(
        name="test-model",
        layer_count=12,
        layer_flops={"q4k": 1.0e9},
        output_flops={"q4k": 1.5e9},
        layer_bytes=100_000_000,
        input_bytes=50_000_000,
        output_bytes=50_000_000,
        kv_heads=8,
        v_heads=8,
        kv_head_dim=128,
        v_head_dim=128,
        embed_dim=4096,
        vocab_size=32000,
        kv_tokens=256,
        cpu_buffer=50_000_000,
        gpu_buffer=40_000_000,
    )
    base.update(over)
    return ModelProfile(**base)


def make_device(id="d0", os="linux", backend="none", **over) -> DeviceProfile:
    base = dict(
        id=id, os=os, uma=False, backend=backend,
        cpu_flops={"q4k": 5.0e10},
        mem_throughput_cpu=2.0e10,
        kv_copy_cpu=3.0e-5,
        comm_latency=2.0e-3,
        ram_available=2 * GiB,
    )
    if os == "macos":
        base["disk_rand_read"] = 1.0e9
    else:
        base["disk_seq_read"] = 2.0e9
    if backend == "cuda":
        base.update(gpu_flops={"q4k": 8.0e11}, mem_throughput_gpu=3.0e11,
                    kv_copy_gpu=5.0e-6, ram_to_vram=1.0e-4, vram_to_ram=1.0e-4,
                    vram_available=8 * GiB)
    elif backend == "metal":
        base.update(uma=True, gpu_flops={"q4k": 4.0e11}, mem_throughput_gpu=5.0e10,
                    kv_copy_gpu=8.0e-6, metal_working_set=5 * GiB)
    base.update(over)
    return DeviceProfile(**base)


def make_spec(devices, model=None, threshold=1.0e8, relays=()) -> ClusterSpec:
    spec = ClusterSpec(tuple(devices), model or make_model(),
                       float(threshold), frozenset(relays))
    problems = validate_cluster(spec)
    assert not problems, problems
    return spec


# --- randomized generators ---------------------------------------------------

def random_model(rng: random.Random, layer_count: int) -> ModelProfile:
    layer_flops = {"q4k": rng.uniform(2e8, 4e9)}
    if rng.random() < 0.5:
        layer_flops["fp32"] = rng.uniform(1e7, 2e8)
    return make_model(
        layer_count=layer_count,
        layer_flops=layer_flops,
        output_flops={"q4k": rng.uniform(2e8, 4e9)},
        layer_bytes=rng.randrange(20_000_000, 400_000_000),
        input_bytes=rng.randrange(10_000_000, 300_000_000),
        output_bytes=rng.randrange(10_000_000, 300_000_000),
        kv_head_dim=rng.choice([64, 96, 128]),
        v_head_dim=rng.choice([64, 96, 128]),
        kv_tokens=rng.randrange(0, 2048),
        cpu_buffer=rng.randrange(0, 200_000_000),
        gpu_buffer=rng.randrange(0, 150_000_000),
    )


def random_device(rng: random.Random, idx: int, model: ModelProfile,
                  device_count: int, allow_android: bool = True,
                  allow_swap: bool = True) -> DeviceProfile:
    os_pool = ["linux", "linux", "macos"] + (["android"] if allow_android else [])
    os_tag = rng.choice(os_pool)
    if os_tag == "linux":
        backend = rng.choice(["none", "cuda"])
    elif os_tag == "macos":
        backend = rng.choice(["none", "metal"])
    else:
        backend = "none"
    total = model.layer_footprint_bytes() * model.layer_count
    share = total / device_count

    quants = sorted(set(model.layer_flops) | set(model.output_flops))
    cpu_flops = {q: rng.uniform(1e10, 5e11) for q in quants}
    over = dict(
        cpu_flops=cpu_flops,
        mem_throughput_cpu=rng.uniform(5e9, 1e11),
        kv_copy_cpu=rng.uniform(1e-6, 1e-4),
        comm_latency=rng.uniform(1e-4, 1e-2),
        ram_available=int(share * rng.uniform(0.35, 1.8)) + model.cpu_buffer + 1,
    )
    disk = rng.uniform(2e8, 4e9) if rng.random() > 0.15 else rng.uniform(1e7, 9e7)
    if os_tag == "macos":
        over["disk_rand_read"] = disk
    else:
        over["disk_seq_read"] = disk
    if backend != "none":
        over.update(
            gpu_flops={q: rng.uniform(5e10, 3e12) for q in quants},
            mem_throughput_gpu=rng.uniform(5e10, 5e11),
            kv_copy_gpu=rng.uniform(1e-6, 5e-5),
        )
        if backend == "cuda":
            over.update(ram_to_vram=rng.uniform(1e-5, 5e-4),
                        vram_to_ram=rng.uniform(1e-5, 5e-4),
                        vram_available=int(share * rng.uniform(0.2, 1.5)) + model.gpu_buffer + 1)
        else:
            over["metal_working_set"] = int(share * rng.uniform(0.4, 2.0)) + model.gpu_buffer + 1
    if os_tag == "android" and allow_swap and rng.random() < 0.7:
        over["swap_available"] = rng.randrange(0, 2 * GiB)
        over["bytes_can_swap"] = rng.randrange(0, 2 * GiB)
    return make_device(id=f"dev{idx}", os=os_tag, backend=backend, **over)


def random_spec(rng: random.Random, device_count: int, layer_count: int,
                allow_android: bool = True, allow_swap: bool = True) -> ClusterSpec:
    model = random_model(rng, layer_count)
    devices = tuple(random_device(rng, i, model, device_count,
                                  allow_android=allow_android, allow_swap=allow_swap)
                    for i in range(device_count))
    return make_spec(devices, model=model)


@pytest.fixture
def rng() -> random.Random:
    return random.Random(0xC0FFEE)
