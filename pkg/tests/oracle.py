"""
Brute-force minute-stepped reference for small instances.

Shares no code with src.scheduler or src.cluster: it keeps its own free-GPU
count per server and applies the queueing rules directly. VC queues are FIFO
and served in fair-share order. The head of a queue holds a partial gang until
its acquisition timeout, then releases it and backs off. Timeouts that left
enough free GPUs in the cluster relax the locality constraint, and a relaxed
head takes the least-relaxed complete placement when its next attempt opens.
Everyone else is placed only if it fits completely.

Changes due in the same minute are applied in the order they were scheduled.
Only valid when every time is a whole minute: integer submit times and
durations, integer acquisition timeout and backoff, no failures, no
preemption and a flat calibration.
"""
import itertools
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

QUEUED = 'queued'
ACQUIRING = 'acquiring'
BACKOFF = 'backoff'
RUNNING = 'running'
DONE = 'done'

WAITING = (QUEUED, ACQUIRING, BACKOFF)


class Cluster:
    def __init__(self, topology_spec):
        self.racks = {}
        self.free = {}
        for number, rack in enumerate(topology_spec):
            rack_id = str(rack.get('rack_id', f"r{number}"))
            servers = rack['servers']
            if isinstance(servers, int):
                servers = [{'server_id': f"{rack_id}-s{i}", 'gpu_count': rack['gpus_per_server']}
                           for i in range(servers)]
            self.racks[rack_id] = [str(server['server_id']) for server in servers]
            for server in servers:
                self.free[str(server['server_id'])] = int(server['gpu_count'])
        self.largest = max(self.free.values())
        self.rack_of = {server: rack_id for rack_id, servers in self.racks.items() for server in servers}
        self.usage = Counter()
        self.taken = {}

    @property
    def free_total(self):
        return sum(self.free.values())

    def ranking(self):
        """[(rack_id, [(server, free), ...]), ...], fullest-free first, ties by id."""
        racks = []
        for rack_id, servers in self.racks.items():
            listed = sorted(((server, self.free[server]) for server in servers), key=lambda item: (-item[1], item[0]))
            racks.append((rack_id, listed))
        racks.sort(key=lambda rack: (-sum(free for _, free in rack[1]), rack[0]))
        return racks

    def take(self, job, picks):
        for server, gpus in picks:
            assert 0 < gpus <= self.free[server]
            self.free[server] -= gpus
            self.taken.setdefault(job.job_id, []).append((server, gpus))
            self.usage[job.vc_id] += gpus

    def give_back(self, job):
        for server, gpus in self.taken.pop(job.job_id, []):
            self.free[server] += gpus
            self.usage[job.vc_id] -= gpus


@dataclass
class Entry:
    job: object
    state: Optional[str] = None
    stage: int = 0
    timeouts_with_room: int = 0
    # the open attempt
    attempt: Optional[int] = None
    attempt_started: float = 0.0
    held: List[Tuple[str, int]] = field(default_factory=list)
    first_start: Optional[float] = None
    end: Optional[float] = None

    @property
    def held_gpus(self):
        return sum(gpus for _, gpus in self.held)


class Reference:
    def __init__(self, topology_spec, jobs, quotas, timeout, backoff, relax_after, pack_small_jobs):
        self.cluster = Cluster(topology_spec)
        self.quotas = dict(quotas)
        self.queues = {vc: [] for vc in sorted(quotas)}
        self.entries = {job.job_id: Entry(job) for job in jobs}
        self.timeout = timeout
        self.backoff = backoff
        self.relax_after = relax_after
        self.pack_small_jobs = pack_small_jobs
        self.due = []
        self._seq = itertools.count()
        self._attempts = itertools.count()
        for job in jobs:
            self.schedule(job.submit_time, 'arrival', job.job_id)

    def schedule(self, t, kind, job_id, attempt=None):
        self.due.append((t, next(self._seq), kind, job_id, attempt))

    # -- locality

    def constraint(self, job, stage):
        """(max servers, single rack) after `stage` relaxations."""
        servers = len(self.cluster.free)
        max_servers = max(1, math.ceil(job.gpu_demand / self.cluster.largest))
        single_rack = True
        for step in range(1, stage + 1):
            max_servers = max(min(max_servers * 2, servers), max_servers)
            single_rack = single_rack and step < 2
        return max_servers, single_rack

    def loosest(self, constraint):
        max_servers, single_rack = constraint
        return not single_rack and max_servers >= len(self.cluster.free)

    # -- fairness

    def within_quota(self, entry):
        job = entry.job
        own = entry.held_gpus if entry.state == ACQUIRING else 0
        return self.cluster.usage[job.vc_id] - own + job.gpu_demand <= self.quotas[job.vc_id]

    def needy(self):
        return {vc for vc, queue in self.queues.items()
                if any(entry.state in WAITING and self.within_quota(entry) for entry in queue)}

    def eligible(self, entry):
        return self.within_quota(entry) or not (self.needy() - {entry.job.vc_id})

    def fair_share_order(self):
        def share(vc):
            usage, quota = self.cluster.usage[vc], self.quotas[vc]
            ratio = usage / quota if quota > 0 else (math.inf if usage else 0.0)
            return ratio, vc
        return sorted(self.queues, key=share)

    # -- placement

    def _plan(self, servers, held_servers, need, max_servers):
        picks, total, used = [], 0, len(held_servers)
        for server in held_servers:
            if total >= need:
                break
            gpus = min(self.cluster.free[server], need - total)
            if gpus:
                picks.append((server, gpus))
                total += gpus
        for server, free in servers:
            if total >= need or used >= max_servers:
                break
            if server in held_servers or free == 0:
                continue
            gpus = min(free, need - total)
            picks.append((server, gpus))
            used += 1
            total += gpus
        return picks, total

    def place(self, entry, constraint, hold):
        """'complete', 'partial' or None; only a holding head keeps a partial gang."""
        job = entry.job
        held = entry.held if hold else []
        need = job.gpu_demand - sum(gpus for _, gpus in held)
        free_total = self.cluster.free_total
        if free_total == 0 or (not hold and free_total < need):
            return None
        ranking = self.cluster.ranking()

        if not held and self.pack_small_jobs and job.gpu_demand <= self.cluster.largest:
            fits = [(free, position, server)
                    for position, (server, free) in enumerate(s for _, servers in ranking for s in servers)
                    if free >= job.gpu_demand]
            if fits:
                _, _, server = min(fits)
                self.cluster.take(job, [(server, job.gpu_demand)])
                return 'complete'

        max_servers, single_rack = constraint
        held_servers = list(dict.fromkeys(server for server, _ in held))
        if single_rack:
            if held_servers:
                rack_id = self.cluster.rack_of[held_servers[0]]
                options = [rack for rack in ranking if rack[0] == rack_id]
            else:
                options = ranking
            best = ([], 0)
            for _, servers in options:
                picks, total = self._plan(servers, held_servers, need, max_servers)
                if total == need:
                    best = (picks, total)
                    break
                if total > best[1]:
                    best = (picks, total)
            picks, total = best
        else:
            flat = [(server, free, position) for position, (_, servers) in enumerate(ranking) for server, free in servers]
            flat.sort(key=lambda item: (-item[1], item[2], item[0]))
            picks, total = self._plan([(server, free) for server, free, _ in flat], held_servers, need, max_servers)

        if total == 0 or (total < need and not hold):
            return None
        self.cluster.take(job, picks)
        if total == need:
            return 'complete'
        entry.held.extend(picks)
        return 'partial'

    def escalate(self, entry):
        stage = entry.stage
        while True:
            constraint = self.constraint(entry.job, stage)
            if self.place(entry, constraint, hold=False) == 'complete':
                entry.stage = stage
                return 'complete'
            if self.loosest(constraint):
                return None
            stage += 1

    def start(self, entry, t):
        self.queues[entry.job.vc_id].remove(entry)
        entry.state = RUNNING
        entry.attempt = None
        entry.held = []
        entry.first_start = t
        self.schedule(t + entry.job.work / entry.job.gpu_demand, 'finish', entry.job.job_id)

    def _pass_once(self, t):
        progress = False
        acquiring = [entry for entry in self.entries.values() if entry.state == ACQUIRING]
        for entry in sorted(acquiring, key=lambda e: (e.attempt_started, e.attempt)):
            outcome = self.place(entry, self.constraint(entry.job, entry.stage), hold=True)
            if outcome == 'complete':
                self.start(entry, t)
            progress = progress or outcome is not None

        for vc in self.fair_share_order():
            queue = self.queues[vc]
            if not queue:
                continue
            head = queue[0]
            if head.state == QUEUED and self.eligible(head):
                head.state = ACQUIRING
                head.attempt = next(self._attempts)
                head.attempt_started = t
                head.held = []
                outcome = self.escalate(head) if head.stage > 0 else None
                if outcome is None:
                    outcome = self.place(head, self.constraint(head.job, head.stage), hold=True)
                if outcome == 'complete':
                    self.start(head, t)
                else:
                    self.schedule(t + self.timeout, 'timeout', head.job.job_id, head.attempt)
                progress = progress or outcome is not None
            for entry in list(queue)[1:]:
                free = self.cluster.free_total
                if free == 0:
                    break
                if entry.state != QUEUED or entry.job.gpu_demand > free or not self.eligible(entry):
                    continue
                if self.place(entry, self.constraint(entry.job, entry.stage), hold=False) == 'complete':
                    self.start(entry, t)
                    progress = True
        return progress

    # -- due changes

    def apply(self, kind, entry, attempt, t):
        if kind == 'arrival':
            entry.state = QUEUED
            self.queues[entry.job.vc_id].append(entry)
        elif kind == 'finish':
            self.cluster.give_back(entry.job)
            entry.state = DONE
            entry.end = t
        elif kind == 'timeout':
            if entry.state != ACQUIRING or entry.attempt != attempt:
                return
            self.cluster.give_back(entry.job)
            entry.held = []
            entry.attempt = None
            if self.cluster.free_total >= entry.job.gpu_demand:
                entry.timeouts_with_room += 1
            entry.stage = max(entry.stage, entry.timeouts_with_room // self.relax_after)
            entry.state = BACKOFF
            self.schedule(t + self.backoff, 'backoff', entry.job.job_id)
        elif kind == 'backoff' and entry.state == BACKOFF:
            entry.state = QUEUED

    def run(self, horizon):
        for minute in range(horizon):
            t = float(minute)
            now = sorted(item for item in self.due if item[0] == t)
            self.due = [item for item in self.due if item[0] != t]
            for _, _, kind, job_id, attempt in now:
                self.apply(kind, self.entries[job_id], attempt, t)
            while self._pass_once(t):
                pass
            assert all(free >= 0 for free in self.cluster.free.values())
            if all(entry.state == DONE for entry in self.entries.values()):
                return {job_id: (entry.first_start, entry.end) for job_id, entry in self.entries.items()}
        raise RuntimeError(f"reference did not finish within {horizon} minutes")


def minute_oracle(topology_spec, jobs, quotas, config, horizon=10000):
    """:return: {job_id: (first_start, end_time)}"""
    reference = Reference(topology_spec, jobs, quotas, timeout=config.acquisition_timeout_min,
                          backoff=config.backoff_min, relax_after=config.effective_relax_after,
                          pack_small_jobs=config.pack_small_jobs)
    return reference.run(horizon)
