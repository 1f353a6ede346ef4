"""Discrete-event simulator of pipelined-ring decode with an OS page cache.

One hidden state travels the ring; each device computes its segment,
forwards it, and then prefetches its next segment while the other devices
work. Weight reads go through a per-device LRU page cache: a layer found
resident computes immediately, anything else stalls on a synchronous
fault read. The disk is a single queue per device, shared by prefetch and
fault I/O, and it only transfers while its device is not computing, so
prefetch latency hides exactly where the ring leaves idle time.

Two scheduling modes are supported. ``prp`` replays the plan's multi-round
ring schedule and prefetches one segment ahead. ``pp`` collapses each
device's assignment into a single contiguous block per token and issues a
whole-assignment prefetch sweep at token start; with a cache smaller than
the assignment this reproduces the prefetch-release pathology where the
sweep evicts its own earlier layers and every layer is read twice per
token.

GPU-assigned layers are pinned (loaded at startup, never faulted). The
simulation is fully deterministic.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict, deque
from dataclasses import dataclass
from fractions import Fraction

from .latency import PartitionPlan, _flops_seconds, b_cio_bytes, layer_counts
from .profiles import ClusterSpec, DeviceProfile, disk_read_speed, memory_budget

EVENT_KINDS = ("recv", "compute_gpu", "compute_cpu", "prefetch", "fault_load",
               "send", "output")


@dataclass(frozen=True)
class Segment:
    device: int                  # ring index
    round: int                   # 1-based
    layers: tuple[int, ...]      # 1-based global layer ids, ring order
    gpu_count: int               # leading layers of the segment run on the GPU


@dataclass(frozen=True)
class RingSchedule:
    segments: tuple[tuple[Segment, ...], ...]   # per device, by round
    rounds: int
    participants: tuple[tuple[int, ...], ...]   # ring order per round


@dataclass(frozen=True)
class SimEvent:
    device: str
    kind: str
    start: float
    duration: float
    token: int                   # 0 = prefill pass
    round: int


@dataclass(frozen=True)
class SimResult:
    ttft: float
    tpot_series: tuple[float, ...]
    mean_tpot: float
    events: tuple[SimEvent, ...]
    disk_bytes_read: dict[str, float]


def build_schedule(plan: PartitionPlan, layer_count: int) -> RingSchedule:
    """Tile the layers over the ring: full rounds of w_m per device, then one
    remainder walk handing each device what is left."""
    if sum(plan.w) > layer_count:
        raise ValueError("window sizes exceed the layer count")
    counts = layer_counts(plan.w, plan.n, layer_count)
    full = layer_count // counts.total_window
    rounds = full + (1 if counts.remainder else 0)
    per_device: list[list[Segment]] = [[] for _ in plan.w]
    participants: list[list[int]] = [[] for _ in range(rounds)]
    cursor = 1
    for r in range(1, rounds + 1):
        left = counts.remainder if r == rounds and counts.remainder else None
        for m, (wm, nm) in enumerate(zip(plan.w, plan.n)):
            if left is None:
                size, gpu = wm, nm
            else:
                if left <= 0:
                    break  # remainder exhausted; the state goes straight home
                size, gpu = min(wm, left), min(nm, left)
                left -= size
            layers = tuple(range(cursor, cursor + size))
            cursor += size
            per_device[m].append(Segment(m, r, layers, gpu))
            participants[r - 1].append(m)
    return RingSchedule(tuple(tuple(s) for s in per_device), rounds,
                        tuple(tuple(p) for p in participants))


def _pp_schedule(plan: PartitionPlan, layer_count: int) -> RingSchedule:
    """Single-round schedule: each device owns one contiguous block."""
    counts = layer_counts(plan.w, plan.n, layer_count)
    segments: list[tuple[Segment, ...]] = []
    participants: list[int] = []
    cursor = 1
    for m, (l_m, lg_m) in enumerate(zip(counts.layers, counts.gpu_layers)):
        layers = tuple(range(cursor, cursor + l_m))
        cursor += l_m
        segments.append((Segment(m, 1, layers, lg_m),))
        participants.append(m)
    return RingSchedule(tuple(segments), 1, (tuple(participants),))


class _Disk:
    """Single-queue disk channel; runs only while its device is not busy."""

    def __init__(self, speed: float):
        self.speed = speed
        self.queue: deque[list] = deque()      # [layer, remaining_bytes]
        self.queued: dict[int, list] = {}
        self.cursor = 0.0                      # channel time already consumed

    def enqueue(self, layer: int) -> None:
        if layer not in self.queued:
            job = [layer, None]                # bytes filled at execution time
            self.queue.append(job)
            self.queued[layer] = job

    def cancel(self, layer: int) -> list | None:
        job = self.queued.pop(layer, None)
        if job is not None:
            self.queue.remove(job)
        return job


class _DevRuntime:
    def __init__(self, device: DeviceProfile, pinned: set[int]):
        self.device = device
        self.cache: OrderedDict[int, int] = OrderedDict()
        self.cache_bytes = 0
        self.pinned = pinned
        self.disk = _Disk(disk_read_speed(device))
        self.disk_bytes = 0.0

    def resident(self, layer: int) -> bool:
        if layer in self.cache:
            self.cache.move_to_end(layer)
            return True
        return False

    def insert(self, layer: int, size: int, capacity: int) -> None:
        while self.cache and self.cache_bytes + size > capacity:
            _, evicted = self.cache.popitem(last=False)
            self.cache_bytes -= evicted
        if self.cache_bytes + size <= capacity:
            self.cache[layer] = size
            self.cache_bytes += size


def simulate(spec: ClusterSpec, plan: PartitionPlan, prompt_tokens: int,
             decode_tokens: int, mode: str = "prp", prefetch: bool = True,
             kv_growth: bool = False, pessimistic_prefetch: bool = False,
             metal_cliff: bool = True) -> SimResult:
    """Replay a plan and report TTFT, per-token latencies, and the timeline.

    The prefill pass scales per-token work (FLOPs, KV writes, hidden-state
    hops, embedding-row reads) by ``prompt_tokens`` while weight traffic is
    paid once. ``pessimistic_prefetch`` suppresses prefetch issue, modeling
    an OS that has not started readahead when compute begins.
    """
    if decode_tokens < 1:
        raise ValueError("decode_tokens must be >= 1")
    if mode not in ("pp", "prp"):
        raise ValueError(f"unknown mode {mode!r}")
    if len(plan.w) != len(spec.devices):
        raise ValueError("plan does not match the cluster")
    model = spec.model
    L = model.layer_count
    schedule = _pp_schedule(plan, L) if mode == "pp" else build_schedule(plan, L)
    do_prefetch = prefetch and not pessimistic_prefetch

    counts = layer_counts(plan.w, plan.n, L)
    runtimes: list[_DevRuntime] = []
    for m, dev in enumerate(spec.devices):
        pinned = {layer for seg in schedule.segments[m] for layer in seg.layers[:seg.gpu_count]}
        runtimes.append(_DevRuntime(dev, pinned))

    events: list[SimEvent] = []
    lookup_bytes = Fraction(model.input_bytes, model.vocab_size)
    head = spec.devices[0]

    def emit(dev: DeviceProfile, kind: str, start: float, dur: float,
             token: int, rnd: int) -> None:
        events.append(SimEvent(dev.id, kind, start, dur, token, rnd))

    def kv_tokens_at(pass_idx: int) -> int:
        if not kv_growth:
            return model.kv_tokens
        generated = max(0, pass_idx - 1)
        return model.kv_tokens + prompt_tokens + generated

    def capacity_of(m: int, n_kv: int) -> int:
        dev = spec.devices[m]
        bprime = model.layer_footprint_bytes(n_kv)
        l_m, lg_m = counts.layers[m], counts.gpu_layers[m]
        kv_cpu = model.kv_bytes_per_token() * n_kv * (l_m - lg_m)
        cap = memory_budget(dev) - math.ceil(b_cio_bytes(model, m == 0)) - kv_cpu
        if dev.backend == "metal":
            cap -= model.gpu_buffer + lg_m * bprime
            over = (l_m * bprime + b_cio_bytes(model, m == 0) + model.gpu_buffer
                    > dev.metal_working_set)
            if metal_cliff and over:
                return 0  # over the working set the OS drops the whole mapping
        return max(0, cap)

    def advance_channel(m: int, until: float, token: int, rnd: int,
                        capacity: int, drain: bool = False) -> float:
        """Run queued loads during the device's idle window; with ``drain``
        keep going past ``until`` until the queue is empty."""
        rt = runtimes[m]
        disk = rt.disk
        if capacity <= 0:
            # readahead is pointless when nothing can be retained
            disk.queue.clear()
            disk.queued.clear()
        while disk.queue and (drain or disk.cursor < until):
            job = disk.queue[0]
            layer = job[0]
            if layer in rt.cache or layer in rt.pinned:
                disk.queue.popleft()            # resident by execution time
                disk.queued.pop(layer, None)
                continue
            if job[1] is None:
                job[1] = float(model.layer_bytes)
            dt = job[1] / disk.speed
            end = disk.cursor + dt
            if drain or end <= until:
                emit(rt.device, "prefetch", disk.cursor, dt, token, rnd)
                rt.disk_bytes += job[1]
                rt.insert(layer, model.layer_bytes, capacity)
                disk.queue.popleft()
                disk.queued.pop(layer, None)
                disk.cursor = end
            else:
                chunk = (until - disk.cursor) * disk.speed
                emit(rt.device, "prefetch", disk.cursor, until - disk.cursor, token, rnd)
                rt.disk_bytes += chunk
                job[1] -= chunk
                disk.cursor = until
        disk.cursor = max(disk.cursor, until)
        return disk.cursor

    def fault_in(m: int, layer: int, at: float, token: int, rnd: int,
                 capacity: int) -> float:
        """Synchronous demand read; completes a partially prefetched layer."""
        rt = runtimes[m]
        job = rt.disk.cancel(layer)
        remaining = float(model.layer_bytes) if job is None or job[1] is None else job[1]
        dt = remaining / rt.disk.speed
        emit(rt.device, "fault_load", at, dt, token, rnd)
        rt.disk_bytes += remaining
        rt.insert(layer, model.layer_bytes, capacity)
        return at + dt

    def issue_prefetch(m: int, segment: Segment | None) -> None:
        if not do_prefetch or segment is None:
            return
        rt = runtimes[m]
        for layer in segment.layers[segment.gpu_count:]:
            if layer not in rt.pinned:
                rt.disk.enqueue(layer)

    def next_segment(m: int, rnd: int) -> Segment | None:
        segs = schedule.segments[m]
        if not segs:
            return None
        for seg in segs:
            if seg.round == rnd + 1:
                return seg
        return segs[0]  # wrap to the next token's first segment

    def run_pass(token: int, start: float, scale: int, last: bool = False) -> float:
        n_kv = kv_tokens_at(token)
        bprime = model.layer_footprint_bytes(n_kv)
        caps = [capacity_of(m, n_kv) for m in range(len(spec.devices))]
        t = start
        # the head reads this token's embedding rows from the input table
        if model.input_bytes:
            dt = float(lookup_bytes) * scale / runtimes[0].disk.speed
            advance_channel(0, t, token, 1, caps[0])
            emit(head, "fault_load", t, dt, token, 1)
            runtimes[0].disk_bytes += float(lookup_bytes) * scale
            t += dt
            runtimes[0].disk.cursor = max(runtimes[0].disk.cursor, t)
        if mode == "pp" and do_prefetch:
            for m in range(len(spec.devices)):
                issue_prefetch(m, schedule.segments[m][0] if schedule.segments[m] else None)

        prev_sender: DeviceProfile | None = None
        prev_send_start = 0.0
        for rnd_idx, members in enumerate(schedule.participants, start=1):
            for m in members:
                dev = spec.devices[m]
                rt = runtimes[m]
                seg = next(s for s in schedule.segments[m] if s.round == rnd_idx)
                if prev_sender is not None and prev_sender.id != dev.id:
                    emit(dev, "recv", prev_send_start, t - prev_send_start, token, rnd_idx)
                cursor = advance_channel(m, t, token, rnd_idx, caps[m])
                if mode == "pp" and do_prefetch and rt.disk.queue:
                    cursor = advance_channel(m, t, token, rnd_idx, caps[m], drain=True)
                cur = max(t, cursor)

                cpu_layer_s = (scale * (_flops_seconds(model.layer_flops, dev.cpu_flops, dev.id, "cpu")
                                        + dev.kv_copy_cpu)
                               + bprime / dev.mem_throughput_cpu)
                if seg.gpu_count:
                    gpu_layer_s = (scale * (_flops_seconds(model.layer_flops, dev.gpu_flops, dev.id, dev.backend)
                                            + dev.kv_copy_gpu)
                                   + bprime / dev.mem_throughput_gpu)
                for pos, layer in enumerate(seg.layers):
                    if pos < seg.gpu_count:
                        emit(dev, "compute_gpu", cur, gpu_layer_s, token, rnd_idx)
                        cur += gpu_layer_s
                    else:
                        if not rt.resident(layer):
                            cur = fault_in(m, layer, cur, token, rnd_idx, caps[m])
                        emit(dev, "compute_cpu", cur, cpu_layer_s, token, rnd_idx)
                        cur += cpu_layer_s
                if seg.layers and dev.backend != "none" and not dev.uma:
                    # host<->GPU staging, once per window; folded into the
                    # segment's last compute event to keep kinds closed
                    overhead = dev.ram_to_vram + dev.vram_to_ram
                    prev = events.pop()
                    events.append(SimEvent(prev.device, prev.kind, prev.start,
                                           prev.duration + overhead, prev.token, prev.round))
                    cur += overhead
                send_s = dev.comm_latency * scale
                emit(dev, "send", cur, send_s, token, rnd_idx)
                prev_sender, prev_send_start = dev, cur
                cur += send_s
                t = cur
                rt.disk.cursor = max(rt.disk.cursor, cur)
                if mode == "prp":
                    target = next_segment(m, rnd_idx)
                    wraps = target is not None and target.round <= rnd_idx
                    if not (last and wraps):  # no readahead past the last token
                        issue_prefetch(m, target)

        # the ring closes at the head, which runs the output layer
        if prev_sender is not None and prev_sender.id != head.id:
            emit(head, "recv", prev_send_start, t - prev_send_start, token, schedule.rounds)
        advance_channel(0, t, token, schedule.rounds, caps[0])
        out_s = (scale * _flops_seconds(model.output_flops, head.cpu_flops, head.id, "cpu")
                 + float(lookup_bytes + model.output_bytes) / head.mem_throughput_cpu)
        emit(head, "output", t, out_s, token, schedule.rounds)
        t += out_s
        runtimes[0].disk.cursor = max(runtimes[0].disk.cursor, t)
        return t

    clock = 0.0
    if do_prefetch and mode == "prp":
        for m in range(len(spec.devices)):
            issue_prefetch(m, schedule.segments[m][0] if schedule.segments[m] else None)
    if prompt_tokens > 0:
        clock = run_pass(0, clock, prompt_tokens)
    tpot: list[float] = []
    ttft = 0.0
    for token in range(1, decode_tokens + 1):
        end = run_pass(token, clock, 1, last=token == decode_tokens)
        tpot.append(end - clock)
        clock = end
        if token == 1:
            ttft = clock
    disk_bytes = {d.id: runtimes[i].disk_bytes for i, d in enumerate(spec.devices)}
    return SimResult(ttft, tuple(tpot), sum(tpot) / len(tpot), tuple(events), disk_bytes)


# --- trace export -----------------------------------------------------------

def export_trace(result: SimResult, fmt: str) -> bytes:
    """Serialize the event timeline: ``csv`` rows or a trace-event JSON array
    with one complete-duration record per event and the device as the
    process lane."""
    if fmt == "csv":
        lines = ["device,kind,token,round,start_s,duration_s"]
        for ev in result.events:
            lines.append(f"{ev.device},{ev.kind},{ev.token},{ev.round},"
                         f"{ev.start:.9f},{ev.duration:.9f}")
        return ("\n".join(lines) + "\n").encode()
    if fmt == "trace-event":
        records = [{
            "name": ev.kind,
            "ph": "X",
            "pid": ev.device,
            "tid": ev.kind,
            "ts": round(ev.start * 1e6, 3),
            "dur": round(ev.duration * 1e6, 3),
            "args": {"token": ev.token, "round": ev.round},
        } for ev in result.events]
        return json.dumps(records, indent=1, sort_keys=True).encode()
    raise ValueError(f"unknown trace format {fmt!r}")
