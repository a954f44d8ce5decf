"""Resource and job management types shared by every other module.

Timestamps are integer milliseconds on a :class:`Clock`.  A virtual clock
starts at 0 and only moves when :meth:`Clock.advance` is called.
"""
from __future__ import annotations

import enum
import re
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, Iterator, List, Optional

MS_PER_SECOND = 1000
MS_PER_HOUR = 3600 * MS_PER_SECOND

_DURATION_RE = re.compile(r"^\s*([0-9]*\.?[0-9]+)\s*(ms|s|m|h|d)?\s*$")
_UNIT_MS = {"ms": 1, "s": 1000, "m": 60_000, "h": 3_600_000, "d": 86_400_000, None: 1000}


def parse_duration(value) -> int:
    """``"7h"``, ``"120s"``, ``"3.7h"``, ``90`` (seconds) -> milliseconds."""
    if isinstance(value, bool):
        raise ValueError(f"bad duration {value!r}")
    if isinstance(value, (int, float)):
        if value < 0:
            raise ValueError(f"negative duration {value!r}")
        return int(round(value * 1000))
    m = _DURATION_RE.match(str(value))
    if not m:
        raise ValueError(f"bad duration {value!r}")
    return int(round(float(m.group(1)) * _UNIT_MS[m.group(2)]))


class CloudType(str, enum.Enum):
    SIMULATED = "simulated"
    NIMBUS = "nimbus"
    EC2 = "ec2"


class Arch(str, enum.Enum):
    X86 = "x86"
    X86_64 = "x86_64"


class Network(str, enum.Enum):
    PRIVATE = "private"
    PUBLIC = "public"


class VmState(str, enum.Enum):
    STARTING = "Starting"
    RUNNING = "Running"
    ERROR = "Error"


class VmEvent(str, enum.Enum):
    BOOT_COMPLETE = "BootComplete"
    FAULT = "Fault"
    POLL_UPDATE = "PollUpdate"


class SchedState(str, enum.Enum):
    NEW = "New"
    SCHEDULED = "Scheduled"


class QueueState(str, enum.Enum):
    QUEUED = "Queued"
    HELD = "Held"
    DISPATCHED = "Dispatched"
    COMPLETED = "Completed"
    REMOVED = "Removed"


class IllegalTransition(Exception):
    def __init__(self, state: VmState, event: VmEvent):
        super().__init__(f"{event.value} is not valid from {state.value}")
        self.state = state
        self.event = event


@dataclass
class VmRecord:
    name: str
    id: str
    vmtype: str
    vmstate: VmState
    clusteraddr: str
    network: Network
    cpuarch: Arch
    image: str
    memory: int
    cpucores: int
    storage: int
    owner: str
    hostname: str = ""
    errorcount: int = 0
    lastpoll: int = 0
    last_state_change: int = 0


@dataclass
class Cluster:
    name: str
    host: str
    cloud_type: CloudType
    memory: int
    cpu_archs: frozenset
    networks: frozenset
    vm_slots: int
    cpu_cores: int
    storage: int
    vms: List[VmRecord] = field(default_factory=list)

    def __post_init__(self):
        self.cpu_archs = frozenset(Arch(a) for a in self.cpu_archs)
        self.networks = frozenset(Network(n) for n in self.networks)
        if self.vm_slots < 0:
            raise ValueError(f"cluster {self.name}: vm_slots must be >= 0")

    def free_slots(self) -> int:
        return self.vm_slots - len(self.vms)

    def find_vm(self, name: str) -> Optional[VmRecord]:
        for vm in self.vms:
            if vm.name == name:
                return vm
        return None

    def static_copy(self) -> "Cluster":
        return replace(self, vms=[])


@dataclass
class Job:
    global_job_id: str
    user: str
    vmtype: str
    vm_name: str = ""
    vm_loc: str = ""
    vm_ami: str = ""
    vm_network: Network = Network.PRIVATE
    vm_cpu_arch: Arch = Arch.X86
    vm_mem: int = 0
    vm_cpu_cores: int = 1
    vm_storage: int = 0
    priority: int = 1
    sched_state: SchedState = SchedState.NEW
    queue_state: QueueState = QueueState.QUEUED
    # bookkeeping mirrored from the queue and the scheduler
    submit_time: int = 0
    assigned_vm: str = ""

    def __post_init__(self):
        if not (self.vm_loc or self.vm_ami):
            raise ValueError(f"job {self.global_job_id}: needs VMLoc or VMAMI")
        self.vm_network = Network(self.vm_network)
        self.vm_cpu_arch = Arch(self.vm_cpu_arch)

    @property
    def requirements(self) -> tuple:
        """Hashable view of everything placement depends on."""
        return (self.vm_cpu_arch, self.vm_network, self.vm_mem, self.vm_storage,
                self.vm_cpu_cores, bool(self.vm_loc), bool(self.vm_ami))


@dataclass
class ResourcePool:
    clusters: List[Cluster] = field(default_factory=list)

    def __post_init__(self):
        names = [c.name for c in self.clusters]
        if len(set(names)) != len(names):
            raise ValueError("cluster names must be unique")

    def __iter__(self) -> Iterator[Cluster]:
        return iter(self.clusters)

    def get(self, name: str) -> Cluster:
        for c in self.clusters:
            if c.name == name:
                return c
        raise KeyError(name)

    def all_vms(self) -> Iterator[VmRecord]:
        for c in self.clusters:
            yield from c.vms

    def find_vm(self, name: str):
        """Return ``(cluster, vm)`` or ``(None, None)``."""
        for c in self.clusters:
            vm = c.find_vm(name)
            if vm is not None:
                return c, vm
        return None, None

    def total_slots(self) -> int:
        return sum(c.vm_slots for c in self.clusters)


class JobPool:
    """Partition of live jobs into the new and scheduled lists.

    Insertion order is kept so iteration is deterministic.
    """

    def __init__(self, jobs: Iterable[Job] = ()):
        self._jobs: Dict[str, Job] = {}
        self.revision = 0
        for job in jobs:
            self.add(job)

    def __contains__(self, job_id: str) -> bool:
        return job_id in self._jobs

    def __len__(self) -> int:
        return len(self._jobs)

    def __iter__(self) -> Iterator[Job]:
        return iter(self._jobs.values())

    def __eq__(self, other) -> bool:
        if not isinstance(other, JobPool):
            return NotImplemented
        return list(self._jobs.items()) == list(other._jobs.items())

    def __repr__(self) -> str:
        return f"JobPool(new={len(self.new_list)}, scheduled={len(self.scheduled_list)})"

    def get(self, job_id: str) -> Optional[Job]:
        return self._jobs.get(job_id)

    def add(self, job: Job) -> None:
        if job.global_job_id in self._jobs:
            raise KeyError(f"duplicate job {job.global_job_id}")
        self._jobs[job.global_job_id] = job
        self.revision += 1

    def remove(self, job_id: str) -> Job:
        self.revision += 1
        return self._jobs.pop(job_id)

    def set_state(self, job: Job, state: SchedState, vm_name: str = "") -> None:
        job.sched_state = state
        job.assigned_vm = vm_name if state is SchedState.SCHEDULED else ""
        self.revision += 1

    @property
    def new_list(self) -> List[Job]:
        return [j for j in self._jobs.values() if j.sched_state is SchedState.NEW]

    @property
    def scheduled_list(self) -> List[Job]:
        return [j for j in self._jobs.values() if j.sched_state is SchedState.SCHEDULED]


class Clock:
    """Millisecond clock, either wall-clock backed or explicitly advanced."""

    REAL = "real"
    VIRTUAL = "virtual"

    def __init__(self, mode: str = VIRTUAL, start: int = 0):
        if mode not in (self.REAL, self.VIRTUAL):
            raise ValueError(f"unknown clock mode {mode!r}")
        self.mode = mode
        self._now = start
        self._lock = threading.Lock()

    def now(self) -> int:
        if self.mode == self.REAL:
            with self._lock:
                self._now = max(self._now, int(time.time() * MS_PER_SECOND))
        return self._now

    def advance(self, dt: int) -> int:
        if self.mode != self.VIRTUAL:
            raise RuntimeError("only a virtual clock can be advanced")
        if dt < 0:
            raise ValueError("time never goes backwards")
        self._now += dt
        return self._now

    def set(self, t: int) -> None:
        """Restore a virtual clock to a persisted value."""
        if self.mode == self.VIRTUAL:
            if t < self._now:
                raise ValueError("time never goes backwards")
            self._now = t


_TRANSITIONS = {
    (VmState.STARTING, VmEvent.BOOT_COMPLETE): VmState.RUNNING,
    (VmState.STARTING, VmEvent.FAULT): VmState.ERROR,
    (VmState.RUNNING, VmEvent.FAULT): VmState.ERROR,
    (VmState.STARTING, VmEvent.POLL_UPDATE): VmState.STARTING,
    (VmState.RUNNING, VmEvent.POLL_UPDATE): VmState.RUNNING,
    (VmState.ERROR, VmEvent.POLL_UPDATE): VmState.ERROR,
}


def transition_vm(vm: VmRecord, event: VmEvent, now: int) -> VmRecord:
    """Return a copy of ``vm`` after ``event`` observed at ``now``.

    A poll that sees no change only refreshes ``lastpoll``.
    """
    try:
        target = _TRANSITIONS[(vm.vmstate, event)]
    except KeyError:
        raise IllegalTransition(vm.vmstate, event) from None
    out = replace(vm, lastpoll=now)
    if target is not vm.vmstate:
        out.vmstate = target
        out.last_state_change = now
    if event is VmEvent.FAULT:
        out.errorcount += 1
    if target is VmState.RUNNING and not out.hostname:
        out.hostname = f"{vm.name}.{vm.clusteraddr}"
    return out
