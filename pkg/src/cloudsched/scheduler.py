"""The cloud scheduler: job poller, VM scheduler and cleanup loops.

Every cycle the scheduler

1. mirrors the job queue into the :class:`~cloudsched.model.JobPool`,
2. polls each VM it started and moves it through Starting/Running/Error,
3. retires errored VMs (booting replacements while their jobs still need
   them), shares the clouds' VM slots evenly between users with queued
   jobs and boots or retires VMs to reach those shares,
4. shuts down VMs nobody needs any more.

Decisions are first computed as an :class:`ActionPlan` from a consistent
view of the state and then applied; cloud calls happen outside the state
lock and are re-validated when their results are merged back.
"""
from __future__ import annotations

import enum
import logging
import threading
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .backends import BootRejected, CloudBackend, CloudError, UnknownVm, VmSpec
from .jobqueue import JobQueue, WrongState, job_sort_key
from .matcher import fits_static, image_locator
from .model import (
    Clock, Cluster, Job, JobPool, QueueState, ResourcePool, SchedState, VmEvent, VmRecord,
    VmState, transition_vm,
)

logger = logging.getLogger(__name__)


class RebalanceMode(str, enum.Enum):
    GRACEFUL = "graceful"
    KILL = "kill"


class ShutdownMode(str, enum.Enum):
    KILL_ALL = "kill-all"
    PERSIST = "persist"


@dataclass
class SchedulerConfig:
    rebalance_mode: RebalanceMode = RebalanceMode.GRACEFUL
    poll_interval: int = 30_000
    schedule_interval: int = 30_000
    cleanup_interval: int = 30_000
    error_threshold: int = 1
    boot_timeout: Optional[int] = 900_000
    drain_timeout: Optional[int] = None
    persist_on_shutdown: bool = False
    persistence_path: str = ""

    def __post_init__(self):
        self.rebalance_mode = RebalanceMode(self.rebalance_mode)
        for name in ("poll_interval", "schedule_interval", "cleanup_interval"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.error_threshold < 1:
            raise ValueError("error_threshold must be >= 1")


@dataclass
class SchedulerState:
    resources: ResourcePool = field(default_factory=ResourcePool)
    jobs: JobPool = field(default_factory=JobPool)
    # vm name -> time the drain mark was set
    draining: Dict[str, int] = field(default_factory=dict)
    # job id -> owner, for jobs held to let over-allocated VMs drain
    held: Dict[str, str] = field(default_factory=dict)
    cycle: int = 0
    vm_counter: int = 0
    now: int = 0


@dataclass
class Allocation:
    owned: Dict[str, List[str]]
    demand: Dict[str, Dict[str, int]]


@dataclass
class BootAction:
    cluster: str
    spec: VmSpec
    owner: str
    job_id: str = ""
    reason: str = "share"


@dataclass
class ActionPlan:
    boots: List[BootAction] = field(default_factory=list)
    graceful_shutdowns: List[str] = field(default_factory=list)
    kills: List[str] = field(default_factory=list)
    holds: List[str] = field(default_factory=list)
    releases: List[str] = field(default_factory=list)
    undrains: List[str] = field(default_factory=list)
    resets: List[str] = field(default_factory=list)
    reasons: Dict[str, str] = field(default_factory=dict)

    def __bool__(self) -> bool:
        return any((self.boots, self.graceful_shutdowns, self.kills, self.holds,
                    self.releases, self.undrains, self.resets))

    def extend(self, other: "ActionPlan") -> "ActionPlan":
        for name in ("boots", "graceful_shutdowns", "kills", "holds", "releases", "undrains", "resets"):
            getattr(self, name).extend(getattr(other, name))
        self.reasons.update(other.reasons)
        return self


@dataclass
class ApplyReport:
    booted: List[Tuple[str, str, str, str]] = field(default_factory=list)  # cluster, vm, owner, job
    boot_failures: List[Tuple[str, str, str]] = field(default_factory=list)  # cluster, owner, error
    shutdowns: List[Tuple[str, str, str]] = field(default_factory=list)  # vm, reason, running job or ""
    shutdown_failures: List[Tuple[str, str]] = field(default_factory=list)
    requeued: List[str] = field(default_factory=list)
    drained: List[str] = field(default_factory=list)
    undrained: List[str] = field(default_factory=list)
    held: List[str] = field(default_factory=list)
    released: List[str] = field(default_factory=list)
    reset: List[str] = field(default_factory=list)

    def merge(self, other: "ApplyReport") -> "ApplyReport":
        for name in self.__dataclass_fields__:
            getattr(self, name).extend(getattr(other, name))
        return self


@dataclass
class CycleReport:
    cycle: int
    time: int
    vm_events: List[Tuple[str, str, str]] = field(default_factory=list)  # vm, from, to
    vanished: List[str] = field(default_factory=list)
    targets: Dict[str, int] = field(default_factory=dict)
    applied: ApplyReport = field(default_factory=ApplyReport)


# ---------------------------------------------------------------------------
# pure decision functions
# ---------------------------------------------------------------------------

def fair_share_targets(users: Sequence[Tuple[str, int]], capacity: int) -> Dict[str, int]:
    """Split ``capacity`` VM slots evenly between users, capped by demand.

    ``users`` is a list of ``(user, outstanding jobs)`` ordered by each
    user's earliest outstanding submit time; slots that do not divide
    evenly go to the earliest users.
    """
    if capacity < 0:
        raise ValueError("capacity must be >= 0")
    users = list(users)
    if sum(d for _, d in users) <= capacity:
        return {u: d for u, d in users}
    # largest level such that everybody capped at it still fits
    lo, hi = 0, max(d for _, d in users)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if sum(min(d, mid) for _, d in users) <= capacity:
            lo = mid
        else:
            hi = mid - 1
    targets = {u: min(d, lo) for u, d in users}
    spare = capacity - sum(targets.values())
    for u, d in users:
        if spare == 0:
            break
        if d > lo:
            targets[u] += 1
            spare -= 1
    return targets


def allocation(state: SchedulerState) -> Allocation:
    owned: Dict[str, List[str]] = {}
    for vm in state.resources.all_vms():
        owned.setdefault(vm.owner, []).append(vm.name)
    demand: Dict[str, Dict[str, int]] = {}
    for job in state.jobs:
        per = demand.setdefault(job.user, {})
        per[job.vmtype] = per.get(job.vmtype, 0) + 1
    return Allocation(owned, demand)


def vm_spec_for(job: Job, cluster: Cluster) -> VmSpec:
    return VmSpec(
        vmtype=job.vmtype, image=image_locator(job, cluster), network=job.vm_network,
        cpuarch=job.vm_cpu_arch, memory=job.vm_mem, cpucores=job.vm_cpu_cores,
        storage=job.vm_storage, owner=job.user,
    )


def _job_order(job: Job):
    return (job.submit_time, job_sort_key(job.global_job_id))


@dataclass
class _UserView:
    demand: int = 0
    earliest: Optional[int] = None
    new: List[Job] = field(default_factory=list)
    queued: List[Job] = field(default_factory=list)
    scheduled: List[Job] = field(default_factory=list)
    by_type: Dict[str, int] = field(default_factory=dict)


class PlacementCache:
    """Remembers whether a job's VM can ever fit somewhere in the pool.

    Also caches the per-user view of the job pool, keyed on the pool's
    revision counter.
    """

    def __init__(self):
        self._pool_key = None
        self._fits: Dict[tuple, bool] = {}
        self._views: Optional[Dict[str, _UserView]] = None
        self._views_key = None

    def _sync(self, pool: ResourcePool) -> None:
        key = tuple((c.name, c.cloud_type, c.memory, c.storage, c.cpu_cores, c.vm_slots,
                     c.cpu_archs, c.networks) for c in pool.clusters)
        if key != self._pool_key:
            self._pool_key = key
            self._fits = {}
            self._views = None

    def _placeable(self, job: Job, pool: ResourcePool) -> bool:
        req = job.requirements
        hit = self._fits.get(req)
        if hit is None:
            hit = self._fits[req] = any(fits_static(job, c) for c in pool.clusters)
        return hit

    def placeable(self, job: Job, pool: ResourcePool) -> bool:
        self._sync(pool)
        return self._placeable(job, pool)

    def user_views(self, jobs: JobPool, pool: ResourcePool) -> Dict[str, _UserView]:
        self._sync(pool)
        key = (id(jobs), jobs.revision)
        if self._views is not None and self._views_key == key:
            return self._views
        views: Dict[str, _UserView] = {}
        for job in jobs:
            v = views.get(job.user)
            if v is None:
                v = views[job.user] = _UserView()
            if v.earliest is None or job.submit_time < v.earliest:
                v.earliest = job.submit_time
            v.by_type[job.vmtype] = v.by_type.get(job.vmtype, 0) + 1
            if self._placeable(job, pool):
                v.demand += 1
                if job.sched_state is SchedState.NEW and job.queue_state is not QueueState.DISPATCHED:
                    v.new.append(job)
            if job.queue_state is QueueState.QUEUED:
                v.queued.append(job)
            if job.sched_state is SchedState.SCHEDULED:
                v.scheduled.append(job)
        for v in views.values():
            v.new.sort(key=_job_order)
            v.queued.sort(key=_job_order)
        self._views, self._views_key = views, key
        return views


def job_poller(state: SchedulerState, snapshot: Iterable[Tuple[Job, QueueState]]) -> JobPool:
    """Mirror a queue snapshot into the job pool.

    Unseen jobs enter as New, finished or removed jobs leave, and the
    queue state of everything else is refreshed.
    """
    pool = state.jobs
    live: Dict[str, Tuple[Job, QueueState]] = {}
    for job, qs in snapshot:
        if qs not in (QueueState.COMPLETED, QueueState.REMOVED):
            live[job.global_job_id] = (job, qs)
    for job in list(pool):
        if job.global_job_id not in live:
            pool.remove(job.global_job_id)
            state.held.pop(job.global_job_id, None)
    for jid, (job, qs) in live.items():
        current = pool.get(jid)
        if current is None:
            pool.add(replace(job, queue_state=qs, sched_state=SchedState.NEW, assigned_vm=""))
        elif current.queue_state is not qs:
            current.queue_state = qs
            pool.revision += 1
    return pool


def assign_vms(state: SchedulerState, running: Mapping[str, Tuple[str, int]]) -> List[str]:
    """Tie Scheduled jobs to VMs.

    A job running on one of our VMs is tied to that VM; otherwise spare
    VMs adopt the oldest New job of the same owner and VM type.  Returns
    the ids of jobs that became Scheduled.
    """
    pool = state.jobs
    vms = {vm.name: vm for vm in state.resources.all_vms()}
    holder: Dict[str, Job] = {}
    for job in pool:
        if job.sched_state is SchedState.SCHEDULED and job.assigned_vm in vms:
            holder[job.assigned_vm] = job
    changed: List[str] = []

    for vm_name, (job_id, _) in running.items():
        vm = vms.get(vm_name)
        job = pool.get(job_id)
        if vm is None or job is None or job.assigned_vm == vm_name:
            continue
        if job.user != vm.owner or job.vmtype != vm.vmtype:
            continue
        previous = job.assigned_vm if job.sched_state is SchedState.SCHEDULED else ""
        other = holder.get(vm_name)
        if other is not None:
            if previous and previous in vms:
                pool.set_state(other, SchedState.SCHEDULED, previous)
                holder[previous] = other
            else:
                pool.set_state(other, SchedState.NEW)
        elif previous in holder:
            del holder[previous]
        if job.sched_state is SchedState.NEW:
            changed.append(job.global_job_id)
        pool.set_state(job, SchedState.SCHEDULED, vm_name)
        holder[vm_name] = job

    spare = [vm for vm in vms.values()
             if vm.name not in holder and vm.vmstate is not VmState.ERROR
             and vm.name not in state.draining]
    if spare:
        waiting: Dict[Tuple[str, str], List[Job]] = {}
        for job in pool:
            if job.sched_state is SchedState.NEW:
                waiting.setdefault((job.user, job.vmtype), []).append(job)
        for jobs in waiting.values():
            jobs.sort(key=_job_order, reverse=True)
        for vm in spare:
            jobs = waiting.get((vm.owner, vm.vmtype))
            if jobs:
                job = jobs.pop()
                pool.set_state(job, SchedState.SCHEDULED, vm.name)
                changed.append(job.global_job_id)
    return changed


def error_sweep(state: SchedulerState, config: SchedulerConfig,
                cache: Optional[PlacementCache] = None) -> ActionPlan:
    """Kill errored VMs and replace the ones whose jobs still need them."""
    plan = ActionPlan()
    pool = state.resources
    bad = [vm for vm in pool.all_vms()
           if vm.vmstate is VmState.ERROR or vm.errorcount >= config.error_threshold]
    if not bad:
        return plan
    cache = cache or PlacementCache()
    free = {c.name: c.free_slots() for c in pool.clusters}
    healthy: Dict[Tuple[str, str], int] = {}
    bad_names = {vm.name for vm in bad}
    for vm in pool.all_vms():
        if vm.name not in bad_names:
            key = (vm.owner, vm.vmtype)
            healthy[key] = healthy.get(key, 0) + 1
    outstanding: Dict[Tuple[str, str], List[Job]] = {}
    for job in state.jobs:
        outstanding.setdefault((job.user, job.vmtype), []).append(job)
    for vm in bad:
        plan.kills.append(vm.name)
        plan.reasons[vm.name] = "error"
        cluster, _ = pool.find_vm(vm.name)
        free[cluster.name] += 1
    for vm in bad:
        key = (vm.owner, vm.vmtype)
        jobs = outstanding.get(key, [])
        if len(jobs) <= healthy.get(key, 0):
            continue
        job = min(jobs, key=_job_order)
        for c in pool.clusters:
            if free[c.name] > 0 and fits_static(job, c):
                plan.boots.append(BootAction(c.name, vm_spec_for(job, c), vm.owner, "", "replace"))
                free[c.name] -= 1
                healthy[key] = healthy.get(key, 0) + 1
                break
    return plan


def plan(state: SchedulerState, config: SchedulerConfig,
         running: Mapping[str, Tuple[str, int]],
         pending: Optional[ActionPlan] = None,
         cache: Optional[PlacementCache] = None) -> Tuple[ActionPlan, Dict[str, int]]:
    """Decide boots and retirements that move every user to their share.

    ``running`` maps busy VM names to ``(job id, dispatch time)``.
    ``pending`` holds actions already decided this cycle (the error sweep);
    its kills free slots and its boots count towards their owner.
    Returns the plan and the per-user targets.
    """
    cache = cache or PlacementCache()
    pending = pending or ActionPlan()
    pool = state.resources
    views = cache.user_views(state.jobs, pool)
    out = ActionPlan()

    gone = set(pending.kills)
    free = {c.name: c.free_slots() for c in pool.clusters}
    owned: Dict[str, List[VmRecord]] = {}
    where: Dict[str, str] = {}
    for c in pool.clusters:
        for vm in c.vms:
            where[vm.name] = c.name
            if vm.name in gone:
                free[c.name] += 1
            else:
                owned.setdefault(vm.owner, []).append(vm)
    extra: Dict[str, int] = {}
    for b in pending.boots:
        free[b.cluster] -= 1
        extra[b.owner] = extra.get(b.owner, 0) + 1

    order = sorted((u for u, v in views.items() if v.demand > 0),
                   key=lambda u: (views[u].earliest, u))
    targets = fair_share_targets([(u, views[u].demand) for u in order], pool.total_slots())

    def count(u):
        return len(owned.get(u, ())) + extra.get(u, 0)

    graceful = config.rebalance_mode is RebalanceMode.GRACEFUL
    for u in sorted(set(owned) | set(targets)):
        mine = owned.get(u, [])
        excess = count(u) - targets.get(u, 0)
        over = False
        if excess > 0:
            idle = [vm for vm in mine if vm.name not in running]
            idle.sort(key=lambda vm: (vm.name not in state.draining,
                                      vm.vmstate is VmState.RUNNING,
                                      -vm.last_state_change, vm.name))
            take = idle[:excess]
            idle_reason = "rebalance" if u in targets else "unneeded"
            for vm in take:
                out.graceful_shutdowns.append(vm.name)
                out.reasons[vm.name] = idle_reason
                free[where[vm.name]] += 1
            rest = excess - len(take)
            busy = [vm for vm in mine if vm.name in running]
            chosen: List[VmRecord] = []
            if rest > 0 and not graceful:
                # least progress lost first
                busy.sort(key=lambda vm: (-running[vm.name][1], -vm.last_state_change, vm.name))
                for vm in busy[:rest]:
                    out.kills.append(vm.name)
                    out.reasons[vm.name] = "rebalance"
                    free[where[vm.name]] += 1
            elif rest > 0:
                # closest to finishing first
                busy.sort(key=lambda vm: (running[vm.name][1], vm.name))
                chosen = busy[:rest]
                for vm in chosen:
                    if vm.name not in state.draining:
                        out.graceful_shutdowns.append(vm.name)
                        out.reasons[vm.name] = "rebalance"
                types = {vm.vmtype for vm in mine}
                view = views.get(u)
                if view is not None:
                    out.holds.extend(j.global_job_id for j in view.queued
                                     if j.vmtype in types and j.global_job_id not in state.held)
                over = True
            keep = {vm.name for vm in chosen} | {vm.name for vm in take}
            out.undrains.extend(vm.name for vm in mine
                                if vm.name in state.draining and vm.name not in keep)
        else:
            out.undrains.extend(vm.name for vm in mine if vm.name in state.draining)
        if not over:
            out.releases.extend(sorted((j for j, owner in state.held.items() if owner == u),
                                       key=job_sort_key))

    # boots, one per under-allocated user per round
    deficits = {u: targets[u] - count(u) for u in order if targets[u] > count(u)}
    queues = {u: list(views[u].new) for u in deficits}
    for q in queues.values():
        q.reverse()
    while deficits and sum(max(0, f) for f in free.values()) > 0:
        progressed = False
        for u in order:
            if deficits.get(u, 0) <= 0:
                continue
            q = queues[u]
            while q:
                job = q.pop()
                cluster = next((c for c in pool.clusters
                                if free[c.name] > 0 and fits_static(job, c)), None)
                if cluster is None:
                    continue
                out.boots.append(BootAction(cluster.name, vm_spec_for(job, cluster), u,
                                            job.global_job_id, "share"))
                free[cluster.name] -= 1
                deficits[u] -= 1
                progressed = True
                break
            if not q:
                deficits[u] = 0
        if not progressed:
            break
    return out, targets


def cleanup(state: SchedulerState, config: SchedulerConfig,
            running: Mapping[str, Tuple[str, int]], now: int,
            cache: Optional[PlacementCache] = None) -> ActionPlan:
    """Retire VMs nobody needs and return orphaned jobs to New."""
    out = ActionPlan()
    cache = cache or PlacementCache()
    views = cache.user_views(state.jobs, state.resources)
    wanted_types = {t for v in views.values() for t in v.by_type}
    leaving = set()
    for vm in state.resources.all_vms():
        if vm.vmstate is VmState.ERROR:
            continue
        if vm.name in running:
            since = state.draining.get(vm.name)
            if (since is not None and config.drain_timeout is not None
                    and now - since >= config.drain_timeout):
                out.kills.append(vm.name)
                out.reasons[vm.name] = "drain-timeout"
                leaving.add(vm.name)
            continue
        if vm.name in state.draining:
            out.graceful_shutdowns.append(vm.name)
            out.reasons[vm.name] = "drained"
            leaving.add(vm.name)
        elif vm.vmtype not in wanted_types:
            out.graceful_shutdowns.append(vm.name)
            out.reasons[vm.name] = "unneeded"
            leaving.add(vm.name)
    alive = {vm.name for vm in state.resources.all_vms()} - leaving
    out.resets = [job.global_job_id for v in views.values() for job in v.scheduled
                  if job.assigned_vm not in alive]
    return out


# ---------------------------------------------------------------------------
# the stateful scheduler
# ---------------------------------------------------------------------------

class CloudScheduler:
    """Owns the scheduler state and is its single point of access."""

    def __init__(self, state: SchedulerState, config: SchedulerConfig, queue: JobQueue,
                 backends: Mapping[str, CloudBackend], clock: Clock):
        self.state = state
        self.config = config
        self.queue = queue
        self.backends = dict(backends)
        self.clock = clock
        self.lock = threading.RLock()
        self.cache = PlacementCache()
        self._queue_version = None
        self._assign_key = None
        self.last_targets: Dict[str, int] = {}

    # -- loops --------------------------------------------------------------

    def poll_jobs(self) -> List[str]:
        """JobPoller: refresh the pool from the queue if it changed."""
        with self.lock:
            if self.queue.version != self._queue_version:
                self._queue_version = self.queue.version
                job_poller(self.state, self.queue.queue_snapshot())
            key = (self.state.jobs.revision, self.queue.version,
                   tuple((vm.name, vm.vmstate) for vm in self.state.resources.all_vms()),
                   frozenset(self.state.draining))
            if key == self._assign_key:
                return []
            changed = assign_vms(self.state, self.queue.running())
            self._assign_key = (self.state.jobs.revision,) + key[1:]
            return changed

    def monitor_vms(self, report: Optional[CycleReport] = None) -> CycleReport:
        """Poll every VM and feed what the clouds say into its record."""
        report = report or CycleReport(self.state.cycle, self.clock.now())
        with self.lock:
            targets = [(c, vm.name, vm.id) for c in self.state.resources.clusters
                       for vm in c.vms if vm.id]
        answers = []
        for cluster, name, vm_id in targets:
            try:
                answers.append((cluster, name, self.backends[cluster.name].poll(cluster, vm_id), None))
            except CloudError as exc:
                answers.append((cluster, name, None, exc))
        with self.lock:
            now = self.clock.now()
            index = {}
            for cluster, name, seen, exc in answers:
                pos = index.get(cluster.name)
                if pos is None:
                    pos = index[cluster.name] = {vm.name: i for i, vm in enumerate(cluster.vms)}
                idx = pos.get(name)
                if idx is None:
                    continue
                vm = cluster.vms[idx]
                if isinstance(exc, UnknownVm):
                    cluster.vms[idx] = None
                    self.state.draining.pop(name, None)
                    report.vanished.append(name)
                    report.applied.requeued.extend(self.queue.vm_died(name))
                    continue
                if exc is not None:
                    vm.errorcount += 1
                    vm.lastpoll = now
                    logger.warning("poll of %s failed: %s", name, exc)
                    continue
                if seen is VmState.RUNNING and vm.vmstate is VmState.STARTING:
                    event = VmEvent.BOOT_COMPLETE
                elif seen is VmState.ERROR and vm.vmstate is not VmState.ERROR:
                    event = VmEvent.FAULT
                elif (vm.vmstate is VmState.STARTING and self.config.boot_timeout is not None
                      and now - vm.last_state_change >= self.config.boot_timeout):
                    logger.warning("%s did not boot within %d ms", name, self.config.boot_timeout)
                    event = VmEvent.FAULT
                else:
                    # nothing changed: only the poll time moves
                    vm.lastpoll = now
                    continue
                new = transition_vm(vm, event, now)
                report.vm_events.append((name, vm.vmstate.value, new.vmstate.value))
                cluster.vms[idx] = new
            for cname in index:
                c = self.state.resources.get(cname)
                if None in c.vms:
                    c.vms[:] = [vm for vm in c.vms if vm is not None]
        return report

    def schedule(self, report: Optional[CycleReport] = None) -> CycleReport:
        """Scheduler: error sweep plus fair-share planning, then apply."""
        report = report or CycleReport(self.state.cycle, self.clock.now())
        with self.lock:
            sweep = error_sweep(self.state, self.config, self.cache)
            main, targets = plan(self.state, self.config, self.queue.running(), sweep, self.cache)
            self.last_targets = targets
            report.targets = targets
        report.applied.merge(self.apply_plan(sweep.extend(main)))
        return report

    def clean(self, report: Optional[CycleReport] = None) -> CycleReport:
        """CleanUp: shut down unneeded VMs and repair orphaned jobs."""
        report = report or CycleReport(self.state.cycle, self.clock.now())
        with self.lock:
            cp = cleanup(self.state, self.config, self.queue.running(), self.clock.now(), self.cache)
        report.applied.merge(self.apply_plan(cp))
        return report

    def run_cycle(self) -> CycleReport:
        """One serialized pass of all three loops (virtual-clock mode)."""
        with self.lock:
            self.state.now = self.clock.now()
            report = CycleReport(self.state.cycle, self.state.now)
            self.poll_jobs()
            self.monitor_vms(report)
            self.schedule(report)
            self.clean(report)
            self.state.cycle += 1
        return report

    # -- applying decisions ---------------------------------------------------

    def apply_plan(self, plan: ActionPlan) -> ApplyReport:
        rep = ApplyReport()
        for name in plan.kills:
            self._shutdown_vm(name, plan.reasons.get(name, "kill"), rep, force=True)
        for name in plan.graceful_shutdowns:
            with self.lock:
                busy = self.queue.is_busy(name)
                if busy and self.state.resources.find_vm(name)[1] is not None:
                    if name not in self.state.draining:
                        self.state.draining[name] = self.clock.now()
                        rep.drained.append(name)
                    continue
            self._shutdown_vm(name, plan.reasons.get(name, "graceful"), rep, force=False)
        with self.lock:
            for name in plan.undrains:
                if self.state.draining.pop(name, None) is not None:
                    rep.undrained.append(name)
        for boot in plan.boots:
            self._boot(boot, rep)
        with self.lock:
            for jid in plan.holds:
                try:
                    self.queue.hold(jid, "rebalance")
                except WrongState:
                    continue
                job = self.state.jobs.get(jid)
                self.state.held[jid] = job.user if job else ""
                rep.held.append(jid)
            for jid in plan.releases:
                self.state.held.pop(jid, None)
                try:
                    self.queue.release(jid)
                except WrongState:
                    continue
                rep.released.append(jid)
            alive = {vm.name for vm in self.state.resources.all_vms()} if plan.resets else set()
            for jid in plan.resets:
                job = self.state.jobs.get(jid)
                if job is not None and job.sched_state is SchedState.SCHEDULED \
                        and job.assigned_vm not in alive:
                    self.state.jobs.set_state(job, SchedState.NEW)
                    rep.reset.append(jid)
        return rep

    def _shutdown_vm(self, name: str, reason: str, rep: ApplyReport, force: bool) -> None:
        with self.lock:
            cluster, vm = self.state.resources.find_vm(name)
            if vm is None:
                return
            running = self.queue.running_job(name) or ""
            if running and not force:
                # picked up work since the plan was made
                self.state.draining.setdefault(name, self.clock.now())
                return
            backend = self.backends[cluster.name]
        try:
            if vm.id:
                backend.shutdown(cluster, vm.id)
        except UnknownVm:
            pass
        except CloudError as exc:
            rep.shutdown_failures.append((name, str(exc)))
            return
        with self.lock:
            cluster.vms[:] = [v for v in cluster.vms if v.name != name]
            self.state.draining.pop(name, None)
            rep.requeued.extend(self.queue.vm_died(name))
            rep.shutdowns.append((name, reason, running))

    def _boot(self, boot: BootAction, rep: ApplyReport) -> None:
        with self.lock:
            try:
                cluster = self.state.resources.get(boot.cluster)
            except KeyError:
                rep.boot_failures.append((boot.cluster, boot.owner, "unknown cluster"))
                return
            job = self.state.jobs.get(boot.job_id) if boot.job_id else None
            if boot.job_id and (job is None or job.sched_state is not SchedState.NEW):
                return
            probe = job or _spec_job(boot.spec)
            if len(cluster.vms) >= cluster.vm_slots or not fits_static(probe, cluster):
                rep.boot_failures.append((boot.cluster, boot.owner, "no longer fits"))
                return
            self.state.vm_counter += 1
            name = f"vm-{self.state.vm_counter:06d}"
            now = self.clock.now()
            s = boot.spec
            record = VmRecord(
                name=name, id="", vmtype=s.vmtype, vmstate=VmState.STARTING,
                clusteraddr=cluster.host, network=s.network, cpuarch=s.cpuarch, image=s.image,
                memory=s.memory, cpucores=s.cpucores, storage=s.storage, owner=s.owner,
                lastpoll=now, last_state_change=now,
            )
            cluster.vms.append(record)  # reserves the slot while the cloud is asked
            backend = self.backends[cluster.name]
        try:
            vm_id = backend.boot(cluster, s, name)
        except (BootRejected, CloudError) as exc:
            with self.lock:
                cluster.vms[:] = [v for v in cluster.vms if v.name != name]
                rep.boot_failures.append((boot.cluster, boot.owner, str(exc)))
            return
        with self.lock:
            record.id = vm_id
            if job is not None and job.sched_state is SchedState.NEW:
                self.state.jobs.set_state(job, SchedState.SCHEDULED, name)
            rep.booted.append((cluster.name, name, boot.owner, boot.job_id))

    # -- administration -------------------------------------------------------

    def shutdown(self, mode: ShutdownMode, path: Optional[str] = None,
                 environment: Optional[dict] = None) -> ApplyReport:
        """Stop managing: kill every VM, or persist the state and leave them.

        ``environment`` is stored alongside the state (see persistence).
        """
        mode = ShutdownMode(mode)
        rep = ApplyReport()
        if mode is ShutdownMode.PERSIST:
            from .persistence import save
            with self.lock:
                self.state.now = self.clock.now()
                save(self.state, path or self.config.persistence_path, environment)
            return rep
        with self.lock:
            names = [vm.name for vm in self.state.resources.all_vms()]
        for name in names:
            self._shutdown_vm(name, "shutdown", rep, force=True)
        return rep

    def reload_resources(self, clusters: Sequence[Cluster],
                         backends: Mapping[str, CloudBackend]) -> None:
        """Swap in a new cloud list, keeping the VMs already running.

        A cluster that still has VMs cannot be removed or shrunk below its
        current VM count.
        """
        with self.lock:
            current = {c.name: c for c in self.state.resources.clusters}
            new_names = {c.name for c in clusters}
            for name, c in current.items():
                if name not in new_names and c.vms:
                    raise ValueError(f"cluster {name} still has {len(c.vms)} VMs")
            merged = []
            for c in clusters:
                old = current.get(c.name)
                fresh = c.static_copy()
                if old is not None:
                    if len(old.vms) > fresh.vm_slots:
                        raise ValueError(f"cluster {c.name}: {len(old.vms)} VMs exceed vm_slots")
                    fresh.vms = old.vms
                merged.append(fresh)
            self.state.resources = ResourcePool(merged)
            for name, backend in backends.items():
                self.backends.setdefault(name, backend)

    def status(self) -> dict:
        with self.lock:
            return status_report(self.state, self.queue.running(), self.clock.now())


def status_report(state: SchedulerState, running: Mapping[str, Tuple[str, int]], now: int) -> dict:
    """Per-VM rows and per-user counts, in a stable order."""
    vms = []
    for c in state.resources.clusters:
        for vm in sorted(c.vms, key=lambda v: v.name):
            vms.append({
                "cluster": c.name, "name": vm.name, "vmtype": vm.vmtype,
                "state": vm.vmstate.value, "owner": vm.owner,
                "age_s": max(0, now - vm.last_state_change) // 1000,
                "job": running.get(vm.name, ("",))[0],
                "draining": vm.name in state.draining,
            })
    users: Dict[str, Dict[str, int]] = {}

    def row(u):
        return users.setdefault(u, {"new": 0, "scheduled": 0, "held": 0, "running": 0, "vms": 0})

    for job in state.jobs:
        u = row(job.user)
        u["new" if job.sched_state is SchedState.NEW else "scheduled"] += 1
        if job.queue_state is QueueState.HELD:
            u["held"] += 1
    for vm in state.resources.all_vms():
        u = row(vm.owner)
        u["vms"] += 1
        if vm.name in running:
            u["running"] += 1
    return {"time": now, "vms": vms, "users": {u: users[u] for u in sorted(users)}}


def _spec_job(spec: VmSpec) -> Job:
    return Job(global_job_id="", user=spec.owner, vmtype=spec.vmtype, vm_loc=spec.image,
               vm_ami=spec.image, vm_network=spec.network, vm_cpu_arch=spec.cpuarch,
               vm_mem=spec.memory, vm_cpu_cores=spec.cpucores, vm_storage=spec.storage)
