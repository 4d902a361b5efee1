"""Hardware device catalog and node compositions.

Prices are point values (midpoints of the quoted market ranges) so TCO
arithmetic is deterministic. Every entry can be overridden from the
experiment JSON (``hardware.devices`` / ``hardware.nodes``).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping

from disaggsim.errors import ConfigError

GIB = 2**30
TIB = 2**40

# Per-socket local memory bandwidth of an 8-channel DDR4-3200 socket.
DDR_SOCKET_BW_GIBPS = 145.0
NMP_BW_FACTOR = 4.0
COOPERLAKE_BW_GIBPS = 60.0
NETWORK_BW_GIBPS = 25.0
UPI_BW_GIBPS = 55.0
MN_ASIC_PRICE_USD = 1000.0
MN_ASIC_TDP_W = 23.9


class DeviceKind(str, Enum):
    CPU = "cpu"
    GPU = "gpu"
    DIMM = "dimm"
    NMP_DIMM = "nmp_dimm"
    NIC = "nic"
    ASIC = "asic"


MEMORY_KINDS = (DeviceKind.DIMM, DeviceKind.NMP_DIMM)


class NodeClass(str, Enum):
    CN = "cn"
    MN = "mn"
    MONOLITHIC = "monolithic"


class FailureClass(str, Enum):
    GPU = "gpu_class"
    CPU = "cpu_class"
    MN = "mn_class"


class Deployment(str, Enum):
    DISAGGREGATED = "disaggregated"
    MONOLITHIC_SCALE_OUT = "monolithic_scale_out"
    SCALE_UP_NAIVE = "scale_up_naive"
    SCALE_UP_NUMA_AWARE = "scale_up_numa_aware"

    @property
    def is_monolithic(self) -> bool:
        return self is not Deployment.DISAGGREGATED

    @property
    def is_scale_up(self) -> bool:
        return self in (Deployment.SCALE_UP_NAIVE, Deployment.SCALE_UP_NUMA_AWARE)


@dataclass(frozen=True)
class DeviceSpec:
    device_id: str
    kind: DeviceKind
    unit_price_usd: float
    tdp_watts: float
    capacity_gib: float = 0.0
    peak_bandwidth_gibps: float = 0.0
    cores: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", DeviceKind(self.kind))
        if self.unit_price_usd <= 0:
            raise ConfigError(f"{self.device_id}: unit_price_usd must be > 0")
        if self.tdp_watts <= 0:
            raise ConfigError(f"{self.device_id}: tdp_watts must be > 0")
        is_mem = self.kind in MEMORY_KINDS
        if is_mem != (self.capacity_gib > 0):
            raise ConfigError(
                f"{self.device_id}: capacity_gib must be > 0 exactly for memory devices"
            )
        if not is_mem and self.peak_bandwidth_gibps != 0:
            raise ConfigError(f"{self.device_id}: only memory devices carry bandwidth")


Catalog = Mapping[str, DeviceSpec]


def build_default_catalog() -> dict[str, DeviceSpec]:
    """Commodity devices with midpoint prices, plus the memory-node ASIC."""
    ddr64 = DeviceSpec("ddr4_64gb", DeviceKind.DIMM, 350.0, 24.0, 64.0, 25.6)
    devices = [
        DeviceSpec("icelake_8380", DeviceKind.CPU, 4500.0, 270.0, cores=40),
        DeviceSpec("cooperlake_8321hc", DeviceKind.CPU, 2500.0, 86.0, cores=26),
        DeviceSpec("a100_80gb", DeviceKind.GPU, 13500.0, 400.0),
        DeviceSpec("ddr4_16gb", DeviceKind.DIMM, 80.0, 5.0, 16.0, 19.2),
        ddr64,
        DeviceSpec(
            "nmp_dimm_64gb",
            DeviceKind.NMP_DIMM,
            2 * ddr64.unit_price_usd,
            ddr64.tdp_watts,
            ddr64.capacity_gib,
            NMP_BW_FACTOR * ddr64.peak_bandwidth_gibps,
        ),
        DeviceSpec("connectx6_nic", DeviceKind.NIC, 2500.0, 20.0),
        # not a commodity part; price is an assumption, power is the 7nm estimate
        DeviceSpec("mn_asic", DeviceKind.ASIC, MN_ASIC_PRICE_USD, MN_ASIC_TDP_W),
    ]
    return {d.device_id: d for d in devices}


def override_devices(
    catalog: Catalog, overrides: Mapping[str, Mapping[str, object]]
) -> dict[str, DeviceSpec]:
    """Return a copy of ``catalog`` with per-device field overrides applied.

    Unknown device ids create new devices (``kind`` then required).
    """
    out = dict(catalog)
    for device_id, fields in overrides.items():
        fields = dict(fields)
        if device_id in out:
            try:
                out[device_id] = replace(out[device_id], **fields)
            except TypeError as exc:
                raise ConfigError(f"device {device_id}: {exc}") from None
        else:
            try:
                out[device_id] = DeviceSpec(device_id=device_id, **fields)
            except TypeError as exc:
                raise ConfigError(f"new device {device_id}: {exc}") from None
    return out


def _lookup(catalog: Catalog, device_id: str) -> DeviceSpec:
    try:
        return catalog[device_id]
    except KeyError:
        raise ConfigError(f"unknown device_id {device_id!r}") from None


@dataclass(frozen=True)
class NodeConfig:
    """One physical node. Use :func:`make_node` to get the derived fields right.

    ``local_mem_bandwidth_gibps`` is per memory domain (socket); a dual-socket
    server has two such domains.
    """

    node_id: str
    node_class: NodeClass
    devices: tuple[tuple[str, int], ...]
    failure_class: FailureClass
    memory_capacity_gib: float
    local_mem_bandwidth_gibps: float
    n_gpus: int = 0
    n_sockets: int = 1
    preprocess_cores: int = 1

    def count(self, device_id: str) -> int:
        return sum(c for d, c in self.devices if d == device_id)

    def scaled(self, factor: int) -> NodeConfig:
        """Every device count multiplied by ``factor`` (for linearity checks)."""
        return replace(
            self,
            devices=tuple((d, c * factor) for d, c in self.devices),
            memory_capacity_gib=self.memory_capacity_gib * factor,
        )

    @property
    def memory_capacity_bytes(self) -> int:
        return int(round(self.memory_capacity_gib * GIB))


def _kind_count(devices: Iterable[tuple[str, int]], catalog: Catalog, kind: DeviceKind) -> int:
    return sum(c for d, c in devices if _lookup(catalog, d).kind is kind)


def make_node(
    node_id: str,
    node_class: NodeClass | str,
    devices: Iterable[tuple[str, int]],
    catalog: Catalog,
    local_mem_bandwidth_gibps: float | None = None,
    preprocess_cores: int | None = None,
) -> NodeConfig:
    """Build a node, deriving capacity, failure class, GPU and socket counts."""
    node_class = NodeClass(node_class)
    devices = tuple((str(d), int(c)) for d, c in devices)
    for d, c in devices:
        _lookup(catalog, d)
        if c < 0:
            raise ConfigError(f"{node_id}: negative count for {d}")

    n_gpus = _kind_count(devices, catalog, DeviceKind.GPU)
    n_cpus = _kind_count(devices, catalog, DeviceKind.CPU)
    n_nmp = _kind_count(devices, catalog, DeviceKind.NMP_DIMM)
    capacity = sum(
        _lookup(catalog, d).capacity_gib * c
        for d, c in devices
        if _lookup(catalog, d).kind in MEMORY_KINDS
    )

    if node_class is NodeClass.MN:
        if n_gpus:
            raise ConfigError(f"{node_id}: memory nodes carry no GPUs")
        if _kind_count(devices, catalog, DeviceKind.NIC) != 1:
            raise ConfigError(f"{node_id}: memory node needs exactly one back-end NIC")
        if _kind_count(devices, catalog, DeviceKind.ASIC) != 1:
            raise ConfigError(f"{node_id}: memory node needs exactly one ASIC")
        failure_class = FailureClass.MN
    elif n_gpus:
        failure_class = FailureClass.GPU
    else:
        failure_class = FailureClass.CPU

    if local_mem_bandwidth_gibps is None:
        local_mem_bandwidth_gibps = DDR_SOCKET_BW_GIBPS * (NMP_BW_FACTOR if n_nmp else 1.0)
    if preprocess_cores is None:
        cores = sum(_lookup(catalog, d).cores * c for d, c in devices
                    if _lookup(catalog, d).kind is DeviceKind.CPU)
        per_socket = cores // max(n_cpus, 1)
        # monolithic sockets split their cores between preprocessing and SparseNet
        preprocess_cores = per_socket if node_class is NodeClass.CN else max(per_socket // 2, 1)

    return NodeConfig(
        node_id=node_id,
        node_class=node_class,
        devices=devices,
        failure_class=failure_class,
        memory_capacity_gib=capacity,
        local_mem_bandwidth_gibps=float(local_mem_bandwidth_gibps),
        n_gpus=n_gpus,
        n_sockets=max(n_cpus, 1),
        preprocess_cores=max(int(preprocess_cores), 1),
    )


def node_capex(node: NodeConfig, catalog: Catalog) -> float:
    return sum(_lookup(catalog, d).unit_price_usd * c for d, c in node.devices)


def node_peak_power(node: NodeConfig, catalog: Catalog) -> float:
    return sum(_lookup(catalog, d).tdp_watts * c for d, c in node.devices)


def power_by_kind(node: NodeConfig, catalog: Catalog) -> dict[DeviceKind, float]:
    out: dict[DeviceKind, float] = {}
    for d, c in node.devices:
        spec = _lookup(catalog, d)
        out[spec.kind] = out.get(spec.kind, 0.0) + spec.tdp_watts * c
    return out


def _monolithic(node_id, catalog, sockets, gpus, dimm="ddr4_64gb", nics=2):
    bw = DDR_SOCKET_BW_GIBPS * (NMP_BW_FACTOR if dimm == "nmp_dimm_64gb" else 1.0)
    return make_node(
        node_id,
        NodeClass.MONOLITHIC,
        [("icelake_8380", sockets), (dimm, 16 * sockets), ("a100_80gb", gpus),
         ("connectx6_nic", nics)],
        catalog,
        local_mem_bandwidth_gibps=bw,
    )


def default_nodes(catalog: Catalog | None = None, so1s_nics: int = 2) -> dict[str, NodeConfig]:
    """Server and node presets.

    ``so1s_nics`` counts front plus back-end NICs on the single-socket servers
    (one of each by default).
    """
    catalog = catalog if catalog is not None else build_default_catalog()
    nodes = [
        _monolithic("su2s", catalog, sockets=2, gpus=8, nics=2),
        _monolithic("so1s_4gpu", catalog, 1, 4, nics=so1s_nics),
        _monolithic("so1s_2gpu", catalog, 1, 2, nics=so1s_nics),
        _monolithic("so1s_1gpu", catalog, 1, 1, nics=so1s_nics),
        _monolithic("so1s_4gpu_nmp", catalog, 1, 4, dimm="nmp_dimm_64gb", nics=so1s_nics),
        _monolithic("so1s_1gpu_nmp", catalog, 1, 1, dimm="nmp_dimm_64gb", nics=so1s_nics),
        make_node(
            "cn_4gpu", NodeClass.CN,
            [("cooperlake_8321hc", 1), ("ddr4_16gb", 4), ("a100_80gb", 4), ("connectx6_nic", 2)],
            catalog, local_mem_bandwidth_gibps=COOPERLAKE_BW_GIBPS,
        ),
        make_node(
            "cn_1gpu", NodeClass.CN,
            [("cooperlake_8321hc", 1), ("ddr4_16gb", 4), ("a100_80gb", 1), ("connectx6_nic", 2)],
            catalog, local_mem_bandwidth_gibps=COOPERLAKE_BW_GIBPS,
        ),
        make_node(
            "ddr_mn", NodeClass.MN,
            [("mn_asic", 1), ("ddr4_64gb", 16), ("connectx6_nic", 1)],
            catalog, local_mem_bandwidth_gibps=DDR_SOCKET_BW_GIBPS,
        ),
        make_node(
            "nmp_mn", NodeClass.MN,
            [("mn_asic", 1), ("nmp_dimm_64gb", 16), ("connectx6_nic", 1)],
            catalog, local_mem_bandwidth_gibps=NMP_BW_FACTOR * DDR_SOCKET_BW_GIBPS,
        ),
    ]
    return {n.node_id: n for n in nodes}


@dataclass(frozen=True)
class ServingUnitConfig:
    """``n_cns`` compute nodes plus ``m_mns`` memory nodes serving one model.

    For monolithic deployments ``cn`` and ``mn`` are the same server and
    ``m_mns == n_cns``.
    """

    cn: NodeConfig
    n_cns: int
    mn: NodeConfig
    m_mns: int
    deployment: Deployment = Deployment.DISAGGREGATED
    intra_unit_bandwidth_gibps: float = field(default=0.0)

    def __post_init__(self) -> None:
        object.__setattr__(self, "deployment", Deployment(self.deployment))
        if self.n_cns < 1 or self.m_mns < 1:
            raise ConfigError("a serving unit needs at least one CN and one MN")
        if self.deployment.is_monolithic:
            if self.cn != self.mn or self.n_cns != self.m_mns:
                raise ConfigError("monolithic units bundle cn == mn and n == m")
        elif self.cn.node_class is not NodeClass.CN or self.mn.node_class is not NodeClass.MN:
            raise ConfigError("disaggregated units need a CN node and an MN node")
        if self.deployment.is_scale_up and self.n_cns != 1:
            raise ConfigError("scale-up deployments use a single server")
        if self.intra_unit_bandwidth_gibps <= 0:
            bw = UPI_BW_GIBPS if self.deployment.is_scale_up else NETWORK_BW_GIBPS
            object.__setattr__(self, "intra_unit_bandwidth_gibps", bw)

    @classmethod
    def monolithic(cls, server: NodeConfig, k: int, deployment=Deployment.MONOLITHIC_SCALE_OUT):
        return cls(cn=server, n_cns=k, mn=server, m_mns=k, deployment=deployment)

    @property
    def total_nodes(self) -> int:
        return self.n_cns if self.deployment.is_monolithic else self.n_cns + self.m_mns

    def capex(self, catalog: Catalog) -> float:
        if self.deployment.is_monolithic:
            return self.n_cns * node_capex(self.cn, catalog)
        return self.n_cns * node_capex(self.cn, catalog) + self.m_mns * node_capex(self.mn, catalog)

    def peak_power(self, catalog: Catalog) -> float:
        if self.deployment.is_monolithic:
            return self.n_cns * node_peak_power(self.cn, catalog)
        return (self.n_cns * node_peak_power(self.cn, catalog)
                + self.m_mns * node_peak_power(self.mn, catalog))

    def memory_bytes(self) -> int:
        return self.m_mns * self.mn.memory_capacity_bytes
