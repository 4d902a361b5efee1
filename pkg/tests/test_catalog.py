from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from disaggsim.catalog import (
    GIB,
    Deployment,
    DeviceKind,
    FailureClass,
    NodeClass,
    ServingUnitConfig,
    build_default_catalog,
    default_nodes,
    make_node,
    node_capex,
    node_peak_power,
    override_devices,
    power_by_kind,
)
from disaggsim.errors import ConfigError

CAT = build_default_catalog()
NODES = default_nodes(CAT)


def test_a100_entry():
    gpu = CAT["a100_80gb"]
    assert gpu.kind is DeviceKind.GPU
    assert gpu.tdp_watts == 400.0
    assert gpu.unit_price_usd == 13_500.0  # midpoint of 12K..15K


def test_ddr_dimm_entry():
    d = CAT["ddr4_64gb"]
    assert (d.unit_price_usd, d.tdp_watts, d.capacity_gib) == (350.0, 24.0, 64.0)


def test_nmp_dimm_is_twice_ddr_price_and_four_times_bandwidth():
    nmp, ddr = CAT["nmp_dimm_64gb"], CAT["ddr4_64gb"]
    assert nmp.unit_price_usd == 700.0 == 2 * ddr.unit_price_usd
    assert nmp.peak_bandwidth_gibps == 4 * ddr.peak_bandwidth_gibps


def test_empty_node_costs_nothing():
    node = make_node("empty", NodeClass.CN, [], CAT)
    assert node_capex(node, CAT) == 0
    assert node_peak_power(node, CAT) == 0


def test_ddr_mn_capex():
    # 1000 ASIC + 16 x 350 + 2500 NIC
    assert node_capex(NODES["ddr_mn"], CAT) == 9_100.0


def test_cn_type2_capex():
    # 2500 CPU + 4 x 80 + 13500 GPU + 2 x 2500 NIC
    assert node_capex(NODES["cn_1gpu"], CAT) == 21_320.0


def test_ddr_mn_peak_power():
    assert node_peak_power(NODES["ddr_mn"], CAT) == pytest.approx(427.9, abs=1e-9)


def test_su2s_peak_power():
    # 2 x 270 + 32 x 24 + 8 x 400 + 2 x 20
    assert node_peak_power(NODES["su2s"], CAT) == 4_548.0


@pytest.mark.parametrize("name,gib", [
    ("su2s", 2048), ("so1s_4gpu", 1024), ("so1s_2gpu", 1024), ("so1s_1gpu", 1024),
    ("so1s_4gpu_nmp", 1024), ("so1s_1gpu_nmp", 1024), ("cn_4gpu", 64), ("cn_1gpu", 64),
    ("ddr_mn", 1024), ("nmp_mn", 1024),
])
def test_preset_memory_capacity(name, gib):
    assert NODES[name].memory_capacity_gib == gib
    assert NODES[name].memory_capacity_bytes == gib * GIB


@pytest.mark.parametrize("name", sorted(NODES))
def test_failure_class_assignment(name):
    node = NODES[name]
    if node.node_class is NodeClass.MN:
        assert node.failure_class is FailureClass.MN
    elif node.n_gpus:
        assert node.failure_class is FailureClass.GPU


def test_bandwidth_defaults():
    assert NODES["ddr_mn"].local_mem_bandwidth_gibps == 145.0
    assert NODES["nmp_mn"].local_mem_bandwidth_gibps == 580.0
    assert NODES["cn_1gpu"].local_mem_bandwidth_gibps == 60.0


@given(name=st.sampled_from(sorted(NODES)), factor=st.integers(1, 16))
def test_capex_and_power_are_linear(name, factor):
    node = NODES[name]
    scaled = node.scaled(factor)
    assert node_capex(scaled, CAT) == pytest.approx(factor * node_capex(node, CAT))
    assert node_peak_power(scaled, CAT) == pytest.approx(factor * node_peak_power(node, CAT))


@given(name=st.sampled_from(sorted(NODES)))
def test_power_by_kind_sums_to_peak(name):
    node = NODES[name]
    assert sum(power_by_kind(node, CAT).values()) == pytest.approx(node_peak_power(node, CAT))


def test_override_changes_only_target():
    cat = override_devices(CAT, {"mn_asic": {"unit_price_usd": 3000.0}})
    assert cat["mn_asic"].unit_price_usd == 3000.0
    assert CAT["mn_asic"].unit_price_usd == 1000.0
    mn = default_nodes(cat)["ddr_mn"]
    assert node_capex(mn, cat) == 11_100.0


def test_override_unknown_field_rejected():
    with pytest.raises(ConfigError):
        override_devices(CAT, {"mn_asic": {"bogus": 1}})


def test_unknown_device_rejected():
    with pytest.raises(ConfigError):
        make_node("x", NodeClass.CN, [("nope", 1)], CAT)


def test_memory_node_rules():
    with pytest.raises(ConfigError):
        make_node("bad", NodeClass.MN, [("mn_asic", 1), ("ddr4_64gb", 4), ("a100_80gb", 1),
                                        ("connectx6_nic", 1)], CAT)
    with pytest.raises(ConfigError):
        make_node("bad", NodeClass.MN, [("mn_asic", 1), ("ddr4_64gb", 4)], CAT)


def test_unit_config_validation():
    with pytest.raises(ConfigError):
        ServingUnitConfig(NODES["cn_1gpu"], 0, NODES["ddr_mn"], 1)
    with pytest.raises(ConfigError):
        ServingUnitConfig(NODES["ddr_mn"], 1, NODES["cn_1gpu"], 1)
    with pytest.raises(ConfigError):
        ServingUnitConfig.monolithic(NODES["su2s"], 2, Deployment.SCALE_UP_NAIVE)


def test_unit_capex_power_and_memory():
    unit = ServingUnitConfig(NODES["cn_1gpu"], 2, NODES["ddr_mn"], 3)
    assert unit.capex(CAT) == 2 * 21_320 + 3 * 9_100
    assert unit.peak_power(CAT) == pytest.approx(2 * 546 + 3 * 427.9)
    assert unit.memory_bytes() == 3 * 1024 * GIB
    assert unit.total_nodes == 5
    mono = ServingUnitConfig.monolithic(NODES["so1s_1gpu"], 3)
    assert mono.capex(CAT) == 3 * node_capex(NODES["so1s_1gpu"], CAT)
    assert mono.total_nodes == 3
