"""
Cluster topology and GPU allocation state.

Racks are RDMA domains; every server in a rack has the same GPU count. A GPU
is identified by (server_id, gpu_index). The allocation state records who
holds each GPU, including GPUs held by a job that is still acquiring its gang.
"""
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from src.lib.errors import DuplicateId, EmptyTopology, MixedSkuInRack, SimError, SlotBusy

logger = logging.getLogger(__name__)

FREE = None

Slot = Tuple[str, int]


@dataclass(frozen=True)
class Server:
    server_id: str
    gpu_count: int
    cpu_cores: int = 0
    mem_gb: int = 0


@dataclass(frozen=True)
class Rack:
    rack_id: str
    servers: Tuple[Server, ...]

    @property
    def gpus_per_server(self):
        return self.servers[0].gpu_count

    @property
    def total_gpus(self):
        return sum(s.gpu_count for s in self.servers)


class ClusterTopology:
    def __init__(self, racks):
        self.racks = list(racks)
        self.servers = [server for rack in self.racks for server in rack.servers]
        self._server_index = {}
        self._rack_of = {}
        for rack in self.racks:
            for server in rack.servers:
                self._server_index[server.server_id] = server
                self._rack_of[server.server_id] = rack.rack_id
        self._racks = {rack.rack_id: rack for rack in self.racks}
        self.total_gpus = sum(s.gpu_count for s in self.servers)
        self.max_gpus_per_server = max(s.gpu_count for s in self.servers)

    def __str__(self):
        return f"{len(self.racks)} racks, {len(self.servers)} servers, {self.total_gpus} GPUs"

    def server(self, server_id) -> Server:
        return self._server_index[server_id]

    def rack(self, rack_id) -> Rack:
        return self._racks[rack_id]

    def rack_of(self, server_id) -> str:
        return self._rack_of[server_id]

    def slots(self):
        for server in self.servers:
            for index in range(server.gpu_count):
                yield server.server_id, index

    def reference_server(self) -> Server:
        """The largest server SKU; used for submit-time host bookkeeping."""
        return max(self.servers, key=lambda s: (s.gpu_count, s.cpu_cores, s.server_id))


def build_topology(spec) -> ClusterTopology:
    """
    Build a validated topology.

    :param spec: list of racks. A rack is either
        {rack_id?, servers: int, gpus_per_server, cpu_cores?, mem_gb?}
        or {rack_id, servers: [{server_id, gpu_count, cpu_cores?, mem_gb?}, ...]}
    """
    if not spec:
        raise EmptyTopology()

    racks = []
    seen_ids = set()
    for rack_number, rack_spec in enumerate(spec):
        rack_id = str(rack_spec.get('rack_id', f"r{rack_number}"))
        servers_spec = rack_spec.get('servers')
        servers = []
        if isinstance(servers_spec, int):
            for server_number in range(servers_spec):
                servers.append(Server(server_id=f"{rack_id}-s{server_number}",
                                      gpu_count=int(rack_spec['gpus_per_server']),
                                      cpu_cores=int(rack_spec.get('cpu_cores', 0)),
                                      mem_gb=int(rack_spec.get('mem_gb', 0))))
        elif isinstance(servers_spec, list):
            for server_spec in servers_spec:
                servers.append(Server(server_id=str(server_spec['server_id']),
                                      gpu_count=int(server_spec['gpu_count']),
                                      cpu_cores=int(server_spec.get('cpu_cores', 0)),
                                      mem_gb=int(server_spec.get('mem_gb', 0))))
        if not servers:
            raise EmptyTopology(f"rack {rack_id} has no servers")

        gpu_counts = {s.gpu_count for s in servers}
        if len(gpu_counts) > 1:
            raise MixedSkuInRack(rack_id, gpu_counts)
        if min(gpu_counts) < 1:
            raise EmptyTopology(f"rack {rack_id} has servers without GPUs")

        ids = [(f"topology.{rack_id}.rack_id", rack_id)]
        ids += [(f"topology.{rack_id}.servers.server_id", s.server_id) for s in servers]
        for key, item_id in ids:
            if item_id in seen_ids:
                raise DuplicateId(key, item_id)
            seen_ids.add(item_id)
        racks.append(Rack(rack_id=rack_id, servers=tuple(servers)))

    topo = ClusterTopology(racks)
    logger.debug(f"Topology built: {topo}")
    return topo


class AllocationState:
    """Who holds each GPU. Mutated in place by allocate/release, which return self."""

    def __init__(self, topo: ClusterTopology):
        self.topo = topo
        self.holder: Dict[Slot, Optional[str]] = {slot: FREE for slot in topo.slots()}
        self.vc_usage: Counter = Counter()
        self._job_slots: Dict[str, List[Slot]] = {}
        self._job_vc: Dict[str, str] = {}
        self._free: Dict[str, List[int]] = {s.server_id: list(range(s.gpu_count)) for s in topo.servers}
        self._holders_on: Dict[str, Counter] = defaultdict(Counter)

    def copy(self):
        other = AllocationState.__new__(AllocationState)
        other.topo = self.topo
        other.holder = dict(self.holder)
        other.vc_usage = Counter(self.vc_usage)
        other._job_slots = {job: list(slots) for job, slots in self._job_slots.items()}
        other._job_vc = dict(self._job_vc)
        other._free = {server: list(free) for server, free in self._free.items()}
        other._holders_on = defaultdict(Counter, {server: Counter(c) for server, c in self._holders_on.items()})
        return other

    def __eq__(self, other):
        if not isinstance(other, AllocationState):
            return NotImplemented
        return self.holder == other.holder and +self.vc_usage == +other.vc_usage

    def allocate(self, job_id, vc_id, slots):
        """All-or-nothing: on SlotBusy nothing changes."""
        slots = list(slots)
        for slot in slots:
            if slot not in self.holder:
                raise SimError(f"unknown slot {slot}")
            if self.holder[slot] is not FREE:
                raise SlotBusy(slot, self.holder[slot])
        if len(set(slots)) != len(slots):
            raise SlotBusy(slots[0], job_id)
        known_vc = self._job_vc.get(job_id)
        if known_vc is not None and known_vc != vc_id:
            raise SimError(f"job {job_id} already holds GPUs for {known_vc}")

        for server_id, index in slots:
            self.holder[(server_id, index)] = job_id
            self._free[server_id].remove(index)
            self._holders_on[server_id][job_id] += 1
        self._job_slots.setdefault(job_id, []).extend(slots)
        self._job_vc[job_id] = vc_id
        self.vc_usage[vc_id] += len(slots)
        return self

    def release(self, job_id):
        slots = self._job_slots.pop(job_id, [])
        vc_id = self._job_vc.pop(job_id, None)
        for server_id, index in slots:
            self.holder[(server_id, index)] = FREE
            self._free[server_id].append(index)
            self._free[server_id].sort()
            holders = self._holders_on[server_id]
            holders[job_id] -= 1
            if holders[job_id] <= 0:
                del holders[job_id]
        if vc_id is not None:
            self.vc_usage[vc_id] -= len(slots)
        return self

    def slots_of(self, job_id) -> List[Slot]:
        return list(self._job_slots.get(job_id, []))

    def free_slots(self, server_id) -> List[int]:
        return list(self._free[server_id])

    def free_in_server(self, server_id) -> int:
        return len(self._free[server_id])

    def free_in_rack(self, rack_id) -> int:
        return sum(len(self._free[s.server_id]) for s in self.topo.rack(rack_id).servers)

    def holders_on(self, server_id):
        return set(self._holders_on[server_id])

    @property
    def used_gpus(self):
        return self.topo.total_gpus - self.free_gpus

    @property
    def free_gpus(self):
        return sum(len(free) for free in self._free.values())

    def usage_of(self, vc_id) -> int:
        return self.vc_usage.get(vc_id, 0)

    def reconcile(self):
        """Full recount; raises SimError when holder map and counters drift apart."""
        counted = Counter()
        per_job = Counter()
        for slot, job_id in self.holder.items():
            if job_id is FREE:
                continue
            if slot[1] >= self.topo.server(slot[0]).gpu_count:
                raise SimError(f"slot {slot} beyond its server")
            counted[self._job_vc[job_id]] += 1
            per_job[job_id] += 1
        if +counted != +self.vc_usage:
            raise SimError(f"VC counters {dict(self.vc_usage)} disagree with holders {dict(counted)}")
        for job_id, slots in self._job_slots.items():
            if per_job[job_id] != len(slots):
                raise SimError(f"job {job_id} slot list disagrees with holder map")
        if sum(counted.values()) != self.used_gpus:
            raise SimError("free lists disagree with holder map")
        return True


@dataclass(frozen=True)
class Placement:
    """A complete gang: every slot the job runs on."""
    job_id: str
    slots: Tuple[Slot, ...]

    @property
    def servers(self) -> Tuple[str, ...]:
        return tuple(dict.fromkeys(server_id for server_id, _ in self.slots))

    @property
    def servers_used(self):
        return len(self.servers)

    def racks(self, topo: ClusterTopology):
        return tuple(dict.fromkeys(topo.rack_of(server_id) for server_id in self.servers))


@dataclass
class RackCandidate:
    rack_id: str
    free: int
    servers: List[Tuple[str, int]] = field(default_factory=list)


CandidateRanking = List[RackCandidate]


def rank_candidates(state: AllocationState, topo: ClusterTopology) -> CandidateRanking:
    """Racks by decreasing free GPUs, servers inside the same way; ties by ascending id."""
    ranking = []
    for rack in topo.racks:
        servers = [(s.server_id, state.free_in_server(s.server_id)) for s in rack.servers]
        servers.sort(key=lambda item: (-item[1], item[0]))
        ranking.append(RackCandidate(rack_id=rack.rack_id, free=sum(free for _, free in servers), servers=servers))
    ranking.sort(key=lambda candidate: (-candidate.free, candidate.rack_id))
    return ranking


@dataclass
class FragmentationReport:
    empty_server_fraction: float
    empty_servers_per_rack: Dict[str, int]


def fragmentation_report(state: AllocationState, topo: ClusterTopology) -> FragmentationReport:
    per_rack = {}
    empty = 0
    for rack in topo.racks:
        count = sum(1 for s in rack.servers if state.free_in_server(s.server_id) == s.gpu_count)
        per_rack[rack.rack_id] = count
        empty += count
    return FragmentationReport(empty_server_fraction=empty / len(topo.servers), empty_servers_per_rack=per_rack)
