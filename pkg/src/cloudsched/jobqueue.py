"""In-process stand-in for the Condor central manager.

Booted VMs advertise themselves with their VMType; each cycle every idle
VM is handed at most one queued job of the same type.  Held jobs are
skipped, and a job whose VM dies goes back to the queue from scratch.
"""
from __future__ import annotations

import re
import threading
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

from .model import Clock, Job, QueueState


class QueueError(Exception):
    pass


class DuplicateJobId(QueueError):
    pass


class WrongState(QueueError):
    pass


class UnknownJob(QueueError):
    pass


@dataclass
class QueueEntry:
    job: Job
    queue_state: QueueState
    duration: int
    remaining_work: int
    submit_time: int
    dispatched_to: str = ""
    started_at: int = -1
    completed_at: int = -1
    hold_reason: str = ""


@dataclass
class WorkerAd:
    vm_name: str
    vmtype: str
    busy: bool = False
    registered_at: int = 0


_ID_RE = re.compile(r"^(\d+)\.(\d+)$")


def job_sort_key(job_id: str):
    """Order ``cluster.proc`` ids numerically, anything else after them."""
    m = _ID_RE.match(job_id)
    if m:
        return (0, int(m.group(1)), int(m.group(2)), "")
    return (1, 0, 0, job_id)


def dispatch_order(entry: QueueEntry):
    return (-entry.job.priority, entry.submit_time, job_sort_key(entry.job.global_job_id))


class JobQueue:
    def __init__(self, clock: Clock):
        self.clock = clock
        self._lock = threading.RLock()
        self._entries: Dict[str, QueueEntry] = {}
        self._workers: Dict[str, WorkerAd] = {}
        self._running: Dict[str, str] = {}  # vm name -> job id
        self._next_cluster = 1
        self.version = 0
        self.wasted_core_ms = 0
        self.executed_core_ms = 0
        self.requeues = 0
        self._running_cache = None

    # -- submission ---------------------------------------------------------

    def next_cluster_id(self) -> int:
        with self._lock:
            cid = self._next_cluster
            self._next_cluster += 1
            return cid

    def submit(self, jobs: Sequence[Job], durations: Sequence[int]) -> List[str]:
        if len(jobs) != len(durations):
            raise ValueError("one duration per job")
        with self._lock:
            seen = set()
            for job in jobs:
                jid = job.global_job_id
                if jid in self._entries or jid in seen:
                    raise DuplicateJobId(jid)
                seen.add(jid)
            now = self.clock.now()
            ids = []
            for job, duration in zip(jobs, durations):
                if duration < 0:
                    raise ValueError("duration must be >= 0")
                job = replace(job, queue_state=QueueState.QUEUED, submit_time=now)
                self._entries[job.global_job_id] = QueueEntry(
                    job=job, queue_state=QueueState.QUEUED, duration=duration,
                    remaining_work=duration, submit_time=now)
                ids.append(job.global_job_id)
            self.version += 1
            return ids

    def remove(self, job_id: str) -> None:
        """condor_rm: drop a job that has not finished."""
        with self._lock:
            entry = self._get(job_id)
            if entry.queue_state in (QueueState.COMPLETED, QueueState.REMOVED):
                raise WrongState(f"{job_id} is {entry.queue_state.value}")
            if entry.queue_state is QueueState.DISPATCHED:
                self._stop(entry)
            self._set(entry, QueueState.REMOVED)

    # -- workers ------------------------------------------------------------

    def advertise(self, ad: WorkerAd) -> bool:
        with self._lock:
            current = self._workers.get(ad.vm_name)
            now = self.clock.now()
            if current is None:
                self._workers[ad.vm_name] = WorkerAd(ad.vm_name, ad.vmtype, False, now)
            else:
                current.registered_at = now
                current.vmtype = ad.vmtype
            self.version += 1
            return True

    def workers(self) -> List[WorkerAd]:
        with self._lock:
            return [replace(w) for w in self._workers.values()]

    def is_busy(self, vm_name: str) -> bool:
        with self._lock:
            return vm_name in self._running

    def running_job(self, vm_name: str) -> Optional[str]:
        with self._lock:
            return self._running.get(vm_name)

    def running(self) -> Dict[str, Tuple[str, int]]:
        """Map of busy VM name to ``(job id, dispatch time)``."""
        with self._lock:
            if self._running_cache is None or self._running_cache[0] != self.version:
                view = {vm: (jid, self._entries[jid].started_at) for vm, jid in self._running.items()}
                self._running_cache = (self.version, view)
            return dict(self._running_cache[1])

    def vm_died(self, vm_name: str) -> List[str]:
        with self._lock:
            if self._workers.pop(vm_name, None) is None:
                return []
            self.version += 1
            job_id = self._running.get(vm_name)
            if job_id is None:
                return []
            entry = self._entries[job_id]
            done = entry.duration - entry.remaining_work
            self.wasted_core_ms += done * entry.job.vm_cpu_cores
            self._stop(entry)
            entry.remaining_work = entry.duration
            self._set(entry, QueueState.QUEUED)
            self.requeues += 1
            return [job_id]

    # -- matchmaking --------------------------------------------------------

    def dispatch_cycle(self) -> List[Tuple[str, str]]:
        with self._lock:
            idle = [w for w in self._workers.values() if w.vm_name not in self._running]
            if not idle:
                return []
            idle.sort(key=lambda w: (w.registered_at, w.vm_name))
            wanted = {w.vmtype for w in idle}
            by_type: Dict[str, List[QueueEntry]] = {}
            for entry in self._entries.values():
                if entry.queue_state is QueueState.QUEUED and entry.job.vmtype in wanted:
                    by_type.setdefault(entry.job.vmtype, []).append(entry)
            for entries in by_type.values():
                entries.sort(key=dispatch_order, reverse=True)
            now = self.clock.now()
            out = []
            for worker in idle:
                candidates = by_type.get(worker.vmtype)
                if not candidates:
                    continue
                entry = candidates.pop()
                entry.dispatched_to = worker.vm_name
                entry.started_at = now
                self._running[worker.vm_name] = entry.job.global_job_id
                self._set(entry, QueueState.DISPATCHED)
                worker.busy = True
                out.append((entry.job.global_job_id, worker.vm_name))
            return out

    def hold(self, job_id: str, reason: str = "") -> None:
        with self._lock:
            entry = self._get(job_id)
            if entry.queue_state is not QueueState.QUEUED:
                raise WrongState(f"cannot hold {job_id}: {entry.queue_state.value}")
            entry.hold_reason = reason
            self._set(entry, QueueState.HELD)

    def release(self, job_id: str) -> None:
        with self._lock:
            entry = self._get(job_id)
            if entry.queue_state is not QueueState.HELD:
                raise WrongState(f"cannot release {job_id}: {entry.queue_state.value}")
            entry.hold_reason = ""
            self._set(entry, QueueState.QUEUED)

    # -- simulated execution ------------------------------------------------

    def advance_work(self, dt: int) -> List[str]:
        """Run every dispatched job for ``dt`` ms of virtual time.

        The interval starts at the clock's current time; callers advance
        the clock afterwards.
        """
        if dt < 0:
            raise ValueError("dt must be >= 0")
        with self._lock:
            start = self.clock.now()
            done = []
            for vm_name, job_id in list(self._running.items()):
                entry = self._entries[job_id]
                step = min(dt, entry.remaining_work)
                entry.remaining_work -= step
                self.executed_core_ms += step * entry.job.vm_cpu_cores
                if entry.remaining_work == 0:
                    entry.completed_at = start + step
                    self._stop(entry)
                    self._set(entry, QueueState.COMPLETED)
                    done.append(job_id)
            return done

    def pending_completion(self) -> Optional[int]:
        """Smallest remaining work among dispatched jobs, or None."""
        with self._lock:
            rem = [self._entries[j].remaining_work for j in self._running.values()]
            return min(rem) if rem else None

    # -- views --------------------------------------------------------------

    def queue_snapshot(self) -> List[Tuple[Job, QueueState]]:
        with self._lock:
            return [(replace(e.job, queue_state=e.queue_state), e.queue_state)
                    for e in self._entries.values()]

    def entry(self, job_id: str) -> QueueEntry:
        with self._lock:
            return replace(self._get(job_id))

    def entries(self) -> List[QueueEntry]:
        with self._lock:
            return [replace(e) for e in self._entries.values()]

    def __len__(self) -> int:
        return len(self._entries)

    # -- internals ----------------------------------------------------------

    def _get(self, job_id: str) -> QueueEntry:
        try:
            return self._entries[job_id]
        except KeyError:
            raise UnknownJob(job_id) from None

    def _set(self, entry: QueueEntry, state: QueueState) -> None:
        entry.queue_state = state
        entry.job.queue_state = state
        self.version += 1

    def _stop(self, entry: QueueEntry) -> None:
        vm_name = entry.dispatched_to
        self._running.pop(vm_name, None)
        worker = self._workers.get(vm_name)
        if worker is not None:
            worker.busy = False
        entry.dispatched_to = ""

    # -- persistence of the stand-in itself --------------------------------

    def to_dict(self) -> dict:
        from .persistence import job_to_dict
        with self._lock:
            return {
                "next_cluster": self._next_cluster,
                "wasted_core_ms": self.wasted_core_ms,
                "executed_core_ms": self.executed_core_ms,
                "requeues": self.requeues,
                "entries": [
                    {
                        "job": job_to_dict(e.job),
                        "queue_state": e.queue_state.value,
                        "duration": e.duration,
                        "remaining_work": e.remaining_work,
                        "submit_time": e.submit_time,
                        "dispatched_to": e.dispatched_to,
                        "started_at": e.started_at,
                        "completed_at": e.completed_at,
                        "hold_reason": e.hold_reason,
                    }
                    for e in self._entries.values()
                ],
                "workers": [
                    {"vm_name": w.vm_name, "vmtype": w.vmtype, "registered_at": w.registered_at}
                    for w in self._workers.values()
                ],
            }

    @classmethod
    def from_dict(cls, data: dict, clock: Clock) -> "JobQueue":
        from .persistence import job_from_dict
        q = cls(clock)
        q._next_cluster = data["next_cluster"]
        q.wasted_core_ms = data["wasted_core_ms"]
        q.executed_core_ms = data["executed_core_ms"]
        q.requeues = data["requeues"]
        for raw in data["entries"]:
            e = QueueEntry(
                job=job_from_dict(raw["job"]),
                queue_state=QueueState(raw["queue_state"]),
                duration=raw["duration"],
                remaining_work=raw["remaining_work"],
                submit_time=raw["submit_time"],
                dispatched_to=raw["dispatched_to"],
                started_at=raw["started_at"],
                completed_at=raw["completed_at"],
                hold_reason=raw["hold_reason"],
            )
            q._entries[e.job.global_job_id] = e
        for raw in data["workers"]:
            q._workers[raw["vm_name"]] = WorkerAd(raw["vm_name"], raw["vmtype"], False, raw["registered_at"])
        for e in q._entries.values():
            if e.queue_state is QueueState.DISPATCHED:
                q._running[e.dispatched_to] = e.job.global_job_id
                q._workers[e.dispatched_to].busy = True
        return q
