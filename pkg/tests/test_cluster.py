import numpy as np
import pytest

from src.cluster import AllocationState, build_topology, fragmentation_report, rank_candidates
from src.lib.errors import ConfigError, DuplicateId, EmptyTopology, MixedSkuInRack, SimError, SlotBusy
from tests.conftest import uniform_racks


class TestBuildTopology:
    def test_uniform_racks(self):
        topo = build_topology(uniform_racks(4, 8, 8))
        assert len(topo.racks) == 4
        assert len(topo.servers) == 32
        assert topo.total_gpus == 256
        assert topo.rack_of('r2-s5') == 'r2'

    def test_skus_may_differ_across_racks(self):
        topo = build_topology([{'rack_id': 'big', 'servers': 2, 'gpus_per_server': 8},
                               {'rack_id': 'small', 'servers': 3, 'gpus_per_server': 2}])
        assert topo.total_gpus == 22
        assert topo.max_gpus_per_server == 8

    def test_mixed_sku_in_rack(self):
        spec = [{'rack_id': 'r0', 'servers': [{'server_id': 'a', 'gpu_count': 8}, {'server_id': 'b', 'gpu_count': 2}]}]
        with pytest.raises(MixedSkuInRack):
            build_topology(spec)

    def test_empty(self):
        with pytest.raises(EmptyTopology):
            build_topology([])
        with pytest.raises(EmptyTopology):
            build_topology([{'rack_id': 'r0', 'servers': 0, 'gpus_per_server': 8}])

    def test_duplicate_ids(self):
        spec = [{'rack_id': 'r0', 'servers': [{'server_id': 'a', 'gpu_count': 4}]},
                {'rack_id': 'r1', 'servers': [{'server_id': 'a', 'gpu_count': 4}]}]
        with pytest.raises(DuplicateId) as error:
            build_topology(spec)
        assert isinstance(error.value, ConfigError)
        assert error.value.key == 'topology.r1.servers.server_id'
        assert error.value.item_id == 'a'

    def test_rack_id_reused_as_server_id(self):
        spec = [{'rack_id': 'r0', 'servers': [{'server_id': 'r1', 'gpu_count': 4}]},
                {'rack_id': 'r1', 'servers': 1, 'gpus_per_server': 4}]
        with pytest.raises(DuplicateId) as error:
            build_topology(spec)
        assert error.value.key == 'topology.r1.rack_id'


class TestAllocationState:
    def test_allocate_then_release_restores_state(self, small_topology):
        state = AllocationState(small_topology)
        before = state.copy()
        state.allocate('j1', 'vc1', [('r0-s0', 0), ('r0-s0', 1), ('r1-s1', 7)])
        assert state.usage_of('vc1') == 3
        assert state.free_gpus == small_topology.total_gpus - 3
        state.release('j1')
        assert state == before
        assert state.reconcile()

    def test_busy_slot_changes_nothing(self, small_topology):
        state = AllocationState(small_topology)
        state.allocate('j1', 'vc1', [('r0-s0', 0)])
        before = state.copy()
        with pytest.raises(SlotBusy):
            state.allocate('j2', 'vc2', [('r0-s0', 1), ('r0-s0', 0)])
        assert state == before
        assert state.slots_of('j2') == []

    def test_release_unknown_job_is_noop(self, small_topology):
        state = AllocationState(small_topology)
        before = state.copy()
        state.release('nobody')
        assert state == before

    def test_reconcile_detects_drift(self, small_topology):
        state = AllocationState(small_topology)
        state.allocate('j1', 'vc1', [('r0-s0', 0)])
        state.vc_usage['vc1'] += 1
        with pytest.raises(SimError):
            state.reconcile()


class TestRankCandidates:
    def test_all_free_ties_by_id(self, small_topology):
        ranking = rank_candidates(AllocationState(small_topology), small_topology)
        assert [r.rack_id for r in ranking] == ['r0', 'r1']
        assert [s for s, _ in ranking[0].servers] == ['r0-s0', 'r0-s1']
        assert all(r.free == 16 for r in ranking)

    def test_orders_by_free_gpus(self, small_topology):
        state = AllocationState(small_topology)
        state.allocate('j1', 'vc1', [('r0-s0', i) for i in range(6)])
        ranking = rank_candidates(state, small_topology)
        assert [r.rack_id for r in ranking] == ['r1', 'r0']
        assert ranking[1].servers == [('r0-s1', 8), ('r0-s0', 2)]

    def test_ranking_is_a_permutation_of_the_racks(self):
        topo = build_topology(uniform_racks(4, 8, 8))
        state = AllocationState(topo)
        rng = np.random.default_rng(3)
        slots = list(topo.slots())
        for i in rng.choice(len(slots), size=100, replace=False):
            state.allocate(f"j{i}", 'vc1', [slots[i]])
        ranking = rank_candidates(state, topo)
        assert sorted(r.rack_id for r in ranking) == [r.rack_id for r in topo.racks]
        frees = [r.free for r in ranking]
        assert frees == sorted(frees, reverse=True)
        for rack in ranking:
            assert rack.free == state.free_in_rack(rack.rack_id)


class TestFragmentation:
    def test_idle_cluster_is_all_empty(self, small_topology):
        report = fragmentation_report(AllocationState(small_topology), small_topology)
        assert report.empty_server_fraction == 1.0
        assert report.empty_servers_per_rack == {'r0': 2, 'r1': 2}

    def test_every_server_touched(self, small_topology):
        state = AllocationState(small_topology)
        for server in small_topology.servers:
            state.allocate(f"j-{server.server_id}", 'vc1', [(server.server_id, 0)])
        assert fragmentation_report(state, small_topology).empty_server_fraction == 0.0

    def test_matches_brute_force_count(self):
        topo = build_topology(uniform_racks(4, 8, 8))
        state = AllocationState(topo)
        rng = np.random.default_rng(11)
        slots = list(topo.slots())
        used = rng.choice(len(slots), size=len(slots) * 2 // 3, replace=False)
        for i in used:
            state.allocate(f"j{i}", 'vc1', [slots[i]])
        busy_servers = {slots[i][0] for i in used}
        expected = sum(1 for s in topo.servers if s.server_id not in busy_servers) / len(topo.servers)
        assert fragmentation_report(state, topo).empty_server_fraction == expected
