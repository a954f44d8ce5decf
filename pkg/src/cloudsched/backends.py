"""Cloud backend interface and the simulated IaaS cloud.

Only the simulated cloud ships.  It keeps its own view of every instance
(the "truth" the scheduler learns about by polling), delivers boot
completions on the clock, and injects faults reproducibly: every random
draw is keyed by ``(rng_seed, vm id, purpose)`` instead of coming from a
shared stream, so draws do not depend on call order.
"""
from __future__ import annotations

import abc
import heapq
import random
import threading
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple, Union

from .jobqueue import WorkerAd
from .model import Arch, Clock, Cluster, Network, VmState


class CloudError(Exception):
    pass


class BootRejected(CloudError):
    pass


class UnknownVm(CloudError):
    pass


class TransientCloudError(CloudError):
    """The cloud answered a request with an error; the VM may be fine."""


@dataclass(frozen=True)
class VmSpec:
    vmtype: str
    image: str
    network: Network
    cpuarch: Arch
    memory: int
    cpucores: int
    storage: int
    owner: str


@dataclass
class SimCloudConfig:
    boot_latency: Union[int, Tuple[int, int]] = 0
    fault_rate: float = 0.0
    boot_failure_rate: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("fault_rate", "boot_failure_rate"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be within [0, 1], got {p}")
        lat = self.boot_latency
        if isinstance(lat, (tuple, list)):
            lo, hi = lat
            if not 0 <= lo <= hi:
                raise ValueError(f"bad boot_latency range {lat}")
            self.boot_latency = (int(lo), int(hi))
        elif lat < 0:
            raise ValueError("boot_latency must be >= 0")


class CloudBackend(abc.ABC):
    @abc.abstractmethod
    def boot(self, cluster: Cluster, spec: VmSpec, name: str) -> str:
        """Request a VM; returns the cloud's id for it."""

    @abc.abstractmethod
    def shutdown(self, cluster: Cluster, vm_id: str) -> None:
        ...

    @abc.abstractmethod
    def poll(self, cluster: Cluster, vm_id: str) -> VmState:
        ...

    def tick(self, now: int, cycle: int) -> None:
        """Let time-driven behaviour catch up to ``now``."""


@dataclass
class _Instance:
    vm_id: str
    name: str
    spec: VmSpec
    state: VmState
    booted_at: int
    ready_at: int


class SimulatedCloud(CloudBackend):
    """A cloud that lives entirely in memory.

    ``on_advertise`` is called with a :class:`WorkerAd` when a VM finishes
    booting, the way a startd announces itself to the central manager.
    """

    def __init__(self, name: str, config: SimCloudConfig, clock: Clock,
                 on_advertise: Optional[Callable[[WorkerAd], object]] = None):
        self.name = name
        self.config = config
        self.clock = clock
        self.on_advertise = on_advertise
        self._lock = threading.RLock()
        self._instances: Dict[str, _Instance] = {}
        self._events: List[Tuple[int, int, str]] = []
        self._seq = 0
        self._boot_requests = 0
        self.log: List[tuple] = []

    def _draw(self, *key) -> random.Random:
        return random.Random(":".join(str(k) for k in (self.config.rng_seed, self.name) + key))

    def _latency(self, vm_id: str) -> int:
        lat = self.config.boot_latency
        if isinstance(lat, tuple):
            return self._draw(vm_id, "latency").randint(*lat)
        return lat

    def boot(self, cluster: Cluster, spec: VmSpec, name: str) -> str:
        with self._lock:
            self._boot_requests += 1
            n = self._boot_requests
            if len(self._instances) >= cluster.vm_slots:
                raise BootRejected(f"{self.name}: no free slot")
            rate = self.config.boot_failure_rate
            if rate and self._draw("boot", n).random() < rate:
                raise BootRejected(f"{self.name}: boot request {n} failed")
            vm_id = f"{self.name}-{n:06d}"
            now = self.clock.now()
            ready = now + self._latency(vm_id)
            self._instances[vm_id] = _Instance(vm_id, name, spec, VmState.STARTING, now, ready)
            self._seq += 1
            heapq.heappush(self._events, (ready, self._seq, vm_id))
            self.log.append((now, "boot", vm_id, name))
            return vm_id

    def shutdown(self, cluster: Cluster, vm_id: str) -> None:
        with self._lock:
            if self._instances.pop(vm_id, None) is None:
                raise UnknownVm(vm_id)
            self.log.append((self.clock.now(), "shutdown", vm_id))

    def poll(self, cluster: Cluster, vm_id: str) -> VmState:
        with self._lock:
            inst = self._instances.get(vm_id)
            if inst is None:
                raise UnknownVm(vm_id)
            return inst.state

    def tick(self, now: int, cycle: int) -> None:
        with self._lock:
            while self._events and self._events[0][0] <= now:
                _, _, vm_id = heapq.heappop(self._events)
                inst = self._instances.get(vm_id)
                if inst is None or inst.state is not VmState.STARTING:
                    continue
                inst.state = VmState.RUNNING
                self.log.append((now, "running", vm_id))
                if self.on_advertise is not None:
                    self.on_advertise(WorkerAd(inst.name, inst.spec.vmtype))
            rate = self.config.fault_rate
            if rate:
                for vm_id in sorted(self._instances):
                    inst = self._instances[vm_id]
                    if inst.state is not VmState.ERROR and self._draw(vm_id, cycle).random() < rate:
                        inst.state = VmState.ERROR
                        self.log.append((now, "fault", vm_id))

    def next_event_time(self) -> Optional[int]:
        with self._lock:
            return self._events[0][0] if self._events else None

    def inject_fault(self, selector: str = "any") -> List[str]:
        """Force VMs into Error.

        ``selector`` is ``any`` (lowest id), ``all``, ``running`` (lowest id
        that is Running), or a VM name/id.
        """
        with self._lock:
            live = sorted(i for i, inst in self._instances.items()
                          if inst.state is not VmState.ERROR)
            if selector == "all":
                hit = live
            elif selector == "any":
                hit = live[:1]
            elif selector == "running":
                hit = [i for i in live if self._instances[i].state is VmState.RUNNING][:1]
            else:
                hit = [i for i in live if i == selector or self._instances[i].name == selector]
            for vm_id in hit:
                self._instances[vm_id].state = VmState.ERROR
                self.log.append((self.clock.now(), "fault", vm_id))
            return hit

    def instance_ids(self) -> List[str]:
        with self._lock:
            return sorted(self._instances)

    def to_dict(self) -> dict:
        with self._lock:
            return {
                "boot_requests": self._boot_requests,
                "seq": self._seq,
                "events": [list(e) for e in sorted(self._events)],
                "instances": [
                    {"vm_id": i.vm_id, "name": i.name, "state": i.state.value,
                     "booted_at": i.booted_at, "ready_at": i.ready_at,
                     "spec": {"vmtype": i.spec.vmtype, "image": i.spec.image,
                              "network": i.spec.network.value, "cpuarch": i.spec.cpuarch.value,
                              "memory": i.spec.memory, "cpucores": i.spec.cpucores,
                              "storage": i.spec.storage, "owner": i.spec.owner}}
                    for i in sorted(self._instances.values(), key=lambda x: x.vm_id)
                ],
            }

    def load_dict(self, data: dict) -> None:
        with self._lock:
            self._boot_requests = data["boot_requests"]
            self._seq = data["seq"]
            self._events = [tuple(e) for e in data["events"]]
            heapq.heapify(self._events)
            self._instances = {}
            for raw in data["instances"]:
                s = raw["spec"]
                spec = VmSpec(s["vmtype"], s["image"], Network(s["network"]), Arch(s["cpuarch"]),
                              s["memory"], s["cpucores"], s["storage"], s["owner"])
                self._instances[raw["vm_id"]] = _Instance(
                    raw["vm_id"], raw["name"], spec, VmState(raw["state"]),
                    raw["booted_at"], raw["ready_at"])
