"""Config loading, validation, budgets, and round-trip serialization."""

import dataclasses

import pytest
import yaml
from hypothesis import given, strategies as st

from conftest import GiB, make_device, make_model, make_spec
from ringplan.errors import ConfigError
from ringplan.profiles import (cluster_to_dict, load_cluster_spec,
                               memory_budget, parse_cluster_dict)


def _write_config(tmp_path, doc):
    path = tmp_path / "cluster.yaml"
    path.write_text(yaml.safe_dump(doc, sort_keys=False))
    return path


def _four_device_doc():
    spec = make_spec([
        make_device("mac", os="macos", backend="metal"),
        make_device("laptop", backend="cuda"),
        make_device("desktop", backend="cuda", ram_available=10 * GiB),
        make_device("phone", os="android", swap_available=GiB, bytes_can_swap=GiB // 2),
    ])
    return cluster_to_dict(spec)


def test_load_well_formed_four_device_cluster(tmp_path):
    path = _write_config(tmp_path, _four_device_doc())
    spec = load_cluster_spec(path)
    assert len(spec.devices) == 4
    assert spec.head.id == "mac"


def test_negative_disk_throughput_is_named(tmp_path):
    doc = _four_device_doc()
    doc["devices"][1]["disk_seq_read"] = -1.0
    path = _write_config(tmp_path, doc)
    with pytest.raises(ConfigError) as err:
        load_cluster_spec(path)
    assert any("laptop" in p and "disk_seq_read" in p for p in err.value.problems)


def test_duplicate_device_ids_rejected(tmp_path):
    doc = _four_device_doc()
    doc["devices"][2]["id"] = "laptop"
    path = _write_config(tmp_path, doc)
    with pytest.raises(ConfigError) as err:
        load_cluster_spec(path)
    assert any("duplicate id" in p for p in err.value.problems)


def test_unknown_quant_tag_rejected():
    doc = _four_device_doc()
    doc["model"]["layer_flops"]["q2k"] = 1e9
    with pytest.raises(ConfigError) as err:
        parse_cluster_dict(doc)
    assert any("q2k" in p for p in err.value.problems)


def test_malformed_yaml_is_a_parse_error(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("model: [unbalanced")
    with pytest.raises(ConfigError):
        load_cluster_spec(path)


def test_backend_os_pairing_enforced():
    with pytest.raises(AssertionError):
        make_spec([make_device("bad", os="macos", backend="cuda",
                               disk_seq_read=1e9, disk_rand_read=1e9)])


def test_validation_collects_multiple_problems():
    doc = _four_device_doc()
    doc["devices"][0]["comm_latency"] = 0.0
    doc["devices"][1]["cpu_flops"] = {}
    with pytest.raises(ConfigError) as err:
        parse_cluster_dict(doc)
    assert len(err.value.problems) >= 2


def test_round_trip_is_structurally_identical(tmp_path):
    path = _write_config(tmp_path, _four_device_doc())
    spec = load_cluster_spec(path)
    again = parse_cluster_dict(cluster_to_dict(spec))
    assert again == spec


def test_memory_budget_per_os():
    linux = make_device("a", ram_available=4 * GiB)
    assert memory_budget(linux) == 4 * GiB
    mac = make_device("b", os="macos", backend="metal", metal_working_set=10 * GiB)
    assert memory_budget(mac) == 10 * GiB
    mac_plain = make_device("c", os="macos", backend="none", ram_available=3 * GiB)
    assert memory_budget(mac_plain) == 3 * GiB
    android = make_device("d", os="android", ram_available=2 * GiB,
                          swap_available=1 * GiB, bytes_can_swap=GiB // 2)
    assert memory_budget(android) == 3 * GiB


@given(ram=st.integers(1, 1 << 40), swap=st.integers(0, 1 << 40),
       bump=st.integers(0, 1 << 38))
def test_memory_budget_monotone_in_memory_fields(ram, swap, bump):
    base = make_device("a", os="android", ram_available=ram,
                       swap_available=swap, bytes_can_swap=swap)
    more_ram = dataclasses.replace(base, ram_available=ram + bump)
    more_swap = dataclasses.replace(base, swap_available=swap + bump)
    assert memory_budget(more_ram) >= memory_budget(base)
    assert memory_budget(more_swap) >= memory_budget(base)


def test_relays_must_reference_known_devices():
    with pytest.raises(AssertionError):
        make_spec([make_device("a")], relays=("ghost",))


def test_kv_and_footprint_helpers():
    model = make_model(kv_heads=8, v_heads=8, kv_head_dim=128, v_head_dim=128,
                       kv_tokens=100, layer_bytes=1000)
    assert model.kv_bytes_per_token() == 2 * (8 * 128 + 8 * 128)
    assert model.layer_footprint_bytes() == 1000 + model.kv_bytes_per_token() * 100
    assert model.layer_footprint_bytes(0) == 1000
