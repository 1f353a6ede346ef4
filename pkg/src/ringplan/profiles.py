"""Device/model profile data, cluster config loading, and memory budgets.

Profiles are plain measured numbers supplied by the user in a YAML config;
nothing here probes live hardware. Units are bytes, ops, ops/second,
bytes/second, and seconds throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Mapping

import yaml

from .errors import ConfigError

# Closed set of weight quantization tags. Unknown tags are a load-time error.
QUANT_FORMATS = ("q4k", "q5k", "q6k", "q80", "fp16", "fp32")

OS_TAGS = ("macos", "linux", "android")
BACKEND_TAGS = ("none", "cuda", "metal")


@dataclass(frozen=True)
class DeviceProfile:
    """Measured capabilities of one device.

    Fields for inapplicable backends/OSes stay at their zero defaults and are
    rejected by validation if set (e.g. ``vram_available`` on a CPU-only box).
    """

    id: str
    os: str                                # macos | linux | android
    uma: bool                              # CPU/GPU share one memory pool
    backend: str                           # none | cuda | metal
    cpu_flops: Mapping[str, float]         # ops/s per quant tag
    mem_throughput_cpu: float              # bytes/s, RAM -> CPU registers
    kv_copy_cpu: float                     # s per layer, per-token KV write
    comm_latency: float                    # s per hidden-state hop to the next device
    ram_available: int                     # bytes
    gpu_flops: Mapping[str, float] = field(default_factory=dict)
    mem_throughput_gpu: float = 0.0
    kv_copy_gpu: float = 0.0
    ram_to_vram: float = 0.0               # s per transfer (non-UMA GPU only)
    vram_to_ram: float = 0.0
    disk_seq_read: float = 0.0             # bytes/s (linux/android reload path)
    disk_rand_read: float = 0.0            # bytes/s (macos reload path)
    metal_working_set: int = 0             # bytes (macos + metal only)
    vram_available: int = 0                # bytes (cuda only)
    swap_available: int = 0                # bytes (android only)
    bytes_can_swap: int = 0                # bytes (android only)


@dataclass(frozen=True)
class ModelProfile:
    """Static facts about one model checkpoint."""

    name: str
    layer_count: int
    layer_flops: Mapping[str, float]       # ops per layer, per quant tag
    output_flops: Mapping[str, float]      # ops for the output layer
    layer_bytes: int                       # weight bytes per layer
    input_bytes: int                       # input (embedding table) bytes
    output_bytes: int                      # output layer bytes
    kv_heads: int
    v_heads: int
    kv_head_dim: int
    v_head_dim: int
    embed_dim: int
    vocab_size: int
    kv_tokens: int                         # tokens held in the KV cache
    cpu_buffer: int                        # CPU compute buffer bytes
    gpu_buffer: int                        # GPU compute buffer bytes

    def kv_bytes_per_token(self) -> int:
        """Bytes appended to one layer's KV cache per generated token (fp16)."""
        return 2 * (self.kv_heads * self.kv_head_dim + self.v_heads * self.v_head_dim)

    def layer_footprint_bytes(self, kv_tokens: int | None = None) -> int:
        """Weight bytes plus resident KV bytes for one layer."""
        n_kv = self.kv_tokens if kv_tokens is None else kv_tokens
        return self.layer_bytes + self.kv_bytes_per_token() * n_kv


@dataclass(frozen=True)
class ClusterSpec:
    """A ring of devices plus the model they serve. Index 0 is the head."""

    devices: tuple[DeviceProfile, ...]
    model: ModelProfile
    disk_speed_threshold: float            # bytes/s; at or below counts as a slow disk
    topology_relays: frozenset[str] = frozenset()

    @property
    def head(self) -> DeviceProfile:
        return self.devices[0]

    def device_index(self, device_id: str) -> int:
        for i, d in enumerate(self.devices):
            if d.id == device_id:
                return i
        raise KeyError(device_id)


def disk_read_speed(device: DeviceProfile) -> float:
    """OS-appropriate weight-reload throughput: macOS reads randomly, the
    Linux-kernel OSes read sequentially."""
    if device.os == "macos":
        return device.disk_rand_read
    return device.disk_seq_read


def memory_budget(device: DeviceProfile) -> int:
    """Bytes of memory the planner may count on for this device.

    macOS with Metal budgets the recommended working set, Android adds its
    configured swapout capacity, everything else uses available RAM.
    """
    if device.os == "macos" and device.backend == "metal":
        return device.metal_working_set
    if device.os == "android":
        return device.ram_available + device.swap_available
    return device.ram_available


# --- config parsing -------------------------------------------------------

_DEVICE_REQUIRED = (
    "id", "os", "uma", "backend", "cpu_flops", "mem_throughput_cpu",
    "kv_copy_cpu", "comm_latency", "ram_available",
)
_MODEL_REQUIRED = (
    "name", "layer_count", "layer_flops", "output_flops", "layer_bytes",
    "input_bytes", "output_bytes", "kv_heads", "v_heads", "kv_head_dim",
    "v_head_dim", "embed_dim", "vocab_size", "kv_tokens", "cpu_buffer",
    "gpu_buffer",
)

_BYTE_FIELDS_DEVICE = (
    "ram_available", "metal_working_set", "vram_available",
    "swap_available", "bytes_can_swap",
)
_BYTE_FIELDS_MODEL = (
    "layer_count", "layer_bytes", "input_bytes", "output_bytes", "kv_heads",
    "v_heads", "kv_head_dim", "v_head_dim", "embed_dim", "vocab_size",
    "kv_tokens", "cpu_buffer", "gpu_buffer",
)


def _numeric(value):
    """YAML 1.1 reads '1.1e9' (no signed exponent) as a string; accept it."""
    if isinstance(value, bool):
        return None
    if isinstance(value, (int, float)):
        return value
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return None
    return None


def _as_int(value, where: str, problems: list[str]) -> int:
    number = _numeric(value)
    if isinstance(number, int):
        return number
    if isinstance(number, float) and number.is_integer():
        return int(number)
    problems.append(f"{where}: expected an integer byte/count value, got {value!r}")
    return 0


def _as_float(value, where: str, problems: list[str]) -> float:
    number = _numeric(value)
    if number is None:
        problems.append(f"{where}: expected a number, got {value!r}")
        return 0.0
    return float(number)


def _flops_map(value, where: str, problems: list[str]) -> dict[str, float]:
    if not isinstance(value, dict):
        problems.append(f"{where}: expected a quant->ops map")
        return {}
    out = {}
    for tag, ops in value.items():
        if tag not in QUANT_FORMATS:
            problems.append(f"{where}: unknown quant format {tag!r}")
            continue
        out[tag] = _as_float(ops, f"{where}.{tag}", problems)
    return out


def _parse_device(raw: dict, problems: list[str]) -> DeviceProfile | None:
    if not isinstance(raw, dict):
        problems.append("devices: each entry must be a mapping")
        return None
    dev_id = raw.get("id", "<missing id>")
    missing = [k for k in _DEVICE_REQUIRED if k not in raw]
    if missing:
        problems.append(f"device {dev_id}: missing fields {missing}")
        return None
    known = {f.name for f in fields(DeviceProfile)}
    unknown = sorted(set(raw) - known)
    if unknown:
        problems.append(f"device {dev_id}: unknown fields {unknown}")
        return None
    kwargs: dict = {"id": str(raw["id"]), "os": raw["os"], "uma": bool(raw["uma"]),
                    "backend": raw["backend"]}
    kwargs["cpu_flops"] = _flops_map(raw["cpu_flops"], f"device {dev_id}.cpu_flops", problems)
    kwargs["gpu_flops"] = _flops_map(raw.get("gpu_flops", {}), f"device {dev_id}.gpu_flops", problems)
    for name in ("mem_throughput_cpu", "kv_copy_cpu", "comm_latency",
                 "mem_throughput_gpu", "kv_copy_gpu", "ram_to_vram",
                 "vram_to_ram", "disk_seq_read", "disk_rand_read"):
        if name in raw:
            kwargs[name] = _as_float(raw[name], f"device {dev_id}.{name}", problems)
    for name in _BYTE_FIELDS_DEVICE:
        if name in raw:
            kwargs[name] = _as_int(raw[name], f"device {dev_id}.{name}", problems)
    return DeviceProfile(**kwargs)


def _parse_model(raw: dict, problems: list[str]) -> ModelProfile | None:
    if not isinstance(raw, dict):
        problems.append("model: must be a mapping")
        return None
    missing = [k for k in _MODEL_REQUIRED if k not in raw]
    if missing:
        problems.append(f"model: missing fields {missing}")
        return None
    unknown = sorted(set(raw) - set(_MODEL_REQUIRED))
    if unknown:
        problems.append(f"model: unknown fields {unknown}")
        return None
    kwargs: dict = {"name": str(raw["name"])}
    kwargs["layer_flops"] = _flops_map(raw["layer_flops"], "model.layer_flops", problems)
    kwargs["output_flops"] = _flops_map(raw["output_flops"], "model.output_flops", problems)
    for name in _BYTE_FIELDS_MODEL:
        kwargs[name] = _as_int(raw[name], f"model.{name}", problems)
    return ModelProfile(**kwargs)


def validate_device(d: DeviceProfile) -> list[str]:
    """All invariant violations for one device, one message per field."""
    p: list[str] = []
    who = f"device {d.id}"
    if d.os not in OS_TAGS:
        p.append(f"{who}: os must be one of {OS_TAGS}, got {d.os!r}")
        return p
    if d.backend not in BACKEND_TAGS:
        p.append(f"{who}: backend must be one of {BACKEND_TAGS}, got {d.backend!r}")
        return p
    if d.backend == "metal" and d.os != "macos":
        p.append(f"{who}: backend=metal requires os=macos")
    if d.backend == "cuda" and d.os != "linux":
        p.append(f"{who}: backend=cuda requires os=linux")
    if d.uma and d.backend == "cuda":
        p.append(f"{who}: uma=true requires backend in (metal, none)")

    if not d.cpu_flops:
        p.append(f"{who}: cpu_flops must not be empty")
    for tag, ops in d.cpu_flops.items():
        if ops <= 0:
            p.append(f"{who}: cpu_flops.{tag} must be > 0")
    for name in ("mem_throughput_cpu", "kv_copy_cpu", "comm_latency"):
        if getattr(d, name) <= 0:
            p.append(f"{who}: {name} must be > 0")
    if d.ram_available <= 0:
        p.append(f"{who}: ram_available must be > 0")

    disk_field = "disk_rand_read" if d.os == "macos" else "disk_seq_read"
    if getattr(d, disk_field) <= 0:
        p.append(f"{who}: {disk_field} must be > 0 for os={d.os}")
    other_disk = "disk_seq_read" if d.os == "macos" else "disk_rand_read"
    if getattr(d, other_disk) < 0:
        p.append(f"{who}: {other_disk} must be >= 0")

    if d.backend == "none":
        for name in ("gpu_flops", "mem_throughput_gpu", "kv_copy_gpu",
                     "ram_to_vram", "vram_to_ram", "metal_working_set",
                     "vram_available"):
            if getattr(d, name):
                p.append(f"{who}: {name} must be absent when backend=none")
    else:
        if not d.gpu_flops:
            p.append(f"{who}: gpu_flops must not be empty for backend={d.backend}")
        for tag, ops in d.gpu_flops.items():
            if ops <= 0:
                p.append(f"{who}: gpu_flops.{tag} must be > 0")
        for name in ("mem_throughput_gpu", "kv_copy_gpu"):
            if getattr(d, name) <= 0:
                p.append(f"{who}: {name} must be > 0 for backend={d.backend}")
        if d.uma:
            if d.ram_to_vram or d.vram_to_ram:
                p.append(f"{who}: ram_to_vram/vram_to_ram must be absent when uma=true")
        else:
            for name in ("ram_to_vram", "vram_to_ram"):
                if getattr(d, name) <= 0:
                    p.append(f"{who}: {name} must be > 0 for non-UMA backend={d.backend}")
    if d.backend == "cuda" and d.vram_available <= 0:
        p.append(f"{who}: vram_available must be > 0 for backend=cuda")
    if d.backend == "metal" and d.metal_working_set <= 0:
        p.append(f"{who}: metal_working_set must be > 0 for backend=metal")
    if d.backend != "cuda" and d.vram_available:
        p.append(f"{who}: vram_available must be absent unless backend=cuda")
    if d.backend != "metal" and d.metal_working_set:
        p.append(f"{who}: metal_working_set must be absent unless backend=metal")

    if d.os == "android":
        if d.backend != "none":
            p.append(f"{who}: android devices must use backend=none")
        if d.swap_available < 0 or d.bytes_can_swap < 0:
            p.append(f"{who}: swap_available/bytes_can_swap must be >= 0")
    else:
        if d.swap_available or d.bytes_can_swap:
            p.append(f"{who}: swap fields must be absent unless os=android")
    return p


def validate_model(m: ModelProfile) -> list[str]:
    p: list[str] = []
    if m.layer_count < 1:
        p.append("model: layer_count must be >= 1")
    if m.vocab_size < 1:
        p.append("model: vocab_size must be >= 1")
    for name in ("layer_bytes", "input_bytes", "output_bytes", "kv_heads",
                 "v_heads", "kv_head_dim", "v_head_dim", "embed_dim",
                 "kv_tokens", "cpu_buffer", "gpu_buffer"):
        if getattr(m, name) < 0:
            p.append(f"model: {name} must be >= 0")
    for tag, ops in list(m.layer_flops.items()) + list(m.output_flops.items()):
        if ops < 0:
            p.append(f"model: flops for {tag} must be >= 0")
    return p


def validate_cluster(spec: ClusterSpec) -> list[str]:
    p = validate_model(spec.model)
    if not spec.devices:
        p.append("devices: at least one device is required")
        return p
    seen: set[str] = set()
    for d in spec.devices:
        if d.id in seen:
            p.append(f"device {d.id}: duplicate id")
        seen.add(d.id)
        p.extend(validate_device(d))
    if spec.disk_speed_threshold <= 0:
        p.append("disk_speed_threshold must be > 0")
    for rid in sorted(spec.topology_relays):
        if rid not in seen:
            p.append(f"relays: unknown device id {rid!r}")
    return p


def parse_cluster_dict(doc: dict) -> ClusterSpec:
    """Build and validate a ClusterSpec from a parsed config document."""
    problems: list[str] = []
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")
    for key in ("model", "devices", "disk_speed_threshold"):
        if key not in doc:
            problems.append(f"config: missing top-level key {key!r}")
    if problems:
        raise ConfigError(problems)
    unknown = sorted(set(doc) - {"model", "devices", "disk_speed_threshold", "relays"})
    if unknown:
        raise ConfigError([f"config: unknown top-level keys {unknown}"])

    model = _parse_model(doc["model"], problems)
    raw_devices = doc["devices"]
    devices: list[DeviceProfile] = []
    if not isinstance(raw_devices, list) or not raw_devices:
        problems.append("devices: must be a non-empty list")
    else:
        for raw in raw_devices:
            dev = _parse_device(raw, problems)
            if dev is not None:
                devices.append(dev)
    threshold = _as_float(doc["disk_speed_threshold"], "disk_speed_threshold", problems)
    relays = doc.get("relays", [])
    if not isinstance(relays, list):
        problems.append("relays: must be a list of device ids")
        relays = []
    if problems or model is None:
        raise ConfigError(problems or ["config: invalid model"])

    spec = ClusterSpec(
        devices=tuple(devices),
        model=model,
        disk_speed_threshold=threshold,
        topology_relays=frozenset(str(r) for r in relays),
    )
    problems = validate_cluster(spec)
    if problems:
        raise ConfigError(problems)
    return spec


def load_cluster_spec(path) -> ClusterSpec:
    """Load and validate a cluster config file (YAML)."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError([f"cannot read {path}: {exc}"]) from exc
    except yaml.YAMLError as exc:
        raise ConfigError([f"cannot parse {path}: {exc}"]) from exc
    return parse_cluster_dict(doc)


def _device_to_dict(d: DeviceProfile) -> dict:
    out: dict = {
        "id": d.id, "os": d.os, "uma": d.uma, "backend": d.backend,
        "cpu_flops": dict(d.cpu_flops),
        "mem_throughput_cpu": d.mem_throughput_cpu,
        "kv_copy_cpu": d.kv_copy_cpu,
        "comm_latency": d.comm_latency,
        "ram_available": d.ram_available,
    }
    if d.gpu_flops:
        out["gpu_flops"] = dict(d.gpu_flops)
    for name in ("mem_throughput_gpu", "kv_copy_gpu", "ram_to_vram", "vram_to_ram",
                 "disk_seq_read", "disk_rand_read", "metal_working_set",
                 "vram_available", "swap_available", "bytes_can_swap"):
        value = getattr(d, name)
        if value:
            out[name] = value
    return out


def cluster_to_dict(spec: ClusterSpec) -> dict:
    """Inverse of parse_cluster_dict (round-trips structurally)."""
    model = spec.model
    return {
        "model": {
            "name": model.name,
            "layer_count": model.layer_count,
            "layer_flops": dict(model.layer_flops),
            "output_flops": dict(model.output_flops),
            "layer_bytes": model.layer_bytes,
            "input_bytes": model.input_bytes,
            "output_bytes": model.output_bytes,
            "kv_heads": model.kv_heads,
            "v_heads": model.v_heads,
            "kv_head_dim": model.kv_head_dim,
            "v_head_dim": model.v_head_dim,
            "embed_dim": model.embed_dim,
            "vocab_size": model.vocab_size,
            "kv_tokens": model.kv_tokens,
            "cpu_buffer": model.cpu_buffer,
            "gpu_buffer": model.gpu_buffer,
        },
        "devices": [_device_to_dict(d) for d in spec.devices],
        "disk_speed_threshold": spec.disk_speed_threshold,
        "relays": sorted(spec.topology_relays),
    }


def save_cluster_spec(spec: ClusterSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cluster_to_dict(spec), fh, sort_keys=False)
