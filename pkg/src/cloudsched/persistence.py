"""Snapshot and restore of the scheduler state.

The snapshot is a JSON document with sorted keys, so two equal states
always produce byte-identical text.  The field-by-field layout is in
``docs/snapshot-format.md``.
"""
from __future__ import annotations

import json
import os
import tempfile
from typing import Any, Dict, Optional

from .model import Arch, CloudType, Cluster, Job, JobPool, Network, QueueState, ResourcePool, \
    SchedState, VmRecord, VmState

FORMAT = "cloudsched-snapshot"
VERSION = 1


class SnapshotError(Exception):
    pass


class CorruptSnapshot(SnapshotError):
    def __init__(self, position, reason: str):
        super().__init__(f"corrupt snapshot at {position}: {reason}")
        self.position = position
        self.reason = reason


class UnsupportedVersion(SnapshotError):
    pass


class WriteFailure(SnapshotError):
    pass


def job_to_dict(job: Job) -> Dict[str, Any]:
    return {
        "global_job_id": job.global_job_id, "user": job.user, "priority": job.priority,
        "vmtype": job.vmtype, "vm_name": job.vm_name, "vm_loc": job.vm_loc, "vm_ami": job.vm_ami,
        "vm_network": job.vm_network.value, "vm_cpu_arch": job.vm_cpu_arch.value,
        "vm_mem": job.vm_mem, "vm_cpu_cores": job.vm_cpu_cores, "vm_storage": job.vm_storage,
        "sched_state": job.sched_state.value, "queue_state": job.queue_state.value,
        "submit_time": job.submit_time, "assigned_vm": job.assigned_vm,
    }


def job_from_dict(d: Dict[str, Any]) -> Job:
    return Job(
        global_job_id=d["global_job_id"], user=d["user"], priority=d["priority"],
        vmtype=d["vmtype"], vm_name=d["vm_name"], vm_loc=d["vm_loc"], vm_ami=d["vm_ami"],
        vm_network=Network(d["vm_network"]), vm_cpu_arch=Arch(d["vm_cpu_arch"]),
        vm_mem=d["vm_mem"], vm_cpu_cores=d["vm_cpu_cores"], vm_storage=d["vm_storage"],
        sched_state=SchedState(d["sched_state"]), queue_state=QueueState(d["queue_state"]),
        submit_time=d["submit_time"], assigned_vm=d["assigned_vm"],
    )


def vm_to_dict(vm: VmRecord) -> Dict[str, Any]:
    return {
        "name": vm.name, "id": vm.id, "vmtype": vm.vmtype, "vmstate": vm.vmstate.value,
        "hostname": vm.hostname, "clusteraddr": vm.clusteraddr, "network": vm.network.value,
        "cpuarch": vm.cpuarch.value, "image": vm.image, "memory": vm.memory,
        "cpucores": vm.cpucores, "storage": vm.storage, "errorcount": vm.errorcount,
        "lastpoll": vm.lastpoll, "last_state_change": vm.last_state_change, "owner": vm.owner,
    }


def vm_from_dict(d: Dict[str, Any]) -> VmRecord:
    return VmRecord(
        name=d["name"], id=d["id"], vmtype=d["vmtype"], vmstate=VmState(d["vmstate"]),
        hostname=d["hostname"], clusteraddr=d["clusteraddr"], network=Network(d["network"]),
        cpuarch=Arch(d["cpuarch"]), image=d["image"], memory=d["memory"],
        cpucores=d["cpucores"], storage=d["storage"], errorcount=d["errorcount"],
        lastpoll=d["lastpoll"], last_state_change=d["last_state_change"], owner=d["owner"],
    )


def cluster_to_dict(c: Cluster) -> Dict[str, Any]:
    return {
        "name": c.name, "host": c.host, "cloud_type": c.cloud_type.value, "memory": c.memory,
        "cpu_archs": sorted(a.value for a in c.cpu_archs),
        "networks": sorted(n.value for n in c.networks),
        "vm_slots": c.vm_slots, "cpu_cores": c.cpu_cores, "storage": c.storage,
        "vms": [vm_to_dict(vm) for vm in c.vms],
    }


def cluster_from_dict(d: Dict[str, Any]) -> Cluster:
    return Cluster(
        name=d["name"], host=d["host"], cloud_type=CloudType(d["cloud_type"]),
        memory=d["memory"], cpu_archs=frozenset(d["cpu_archs"]), networks=frozenset(d["networks"]),
        vm_slots=d["vm_slots"], cpu_cores=d["cpu_cores"], storage=d["storage"],
        vms=[vm_from_dict(v) for v in d["vms"]],
    )


def state_to_dict(state) -> Dict[str, Any]:
    from .scheduler import allocation
    return {
        "format": FORMAT,
        "version": VERSION,
        "clock": state.now,
        "cycle": state.cycle,
        "vm_counter": state.vm_counter,
        "clusters": [cluster_to_dict(c) for c in state.resources.clusters],
        "jobs": [job_to_dict(j) for j in state.jobs],
        "allocation": {u: sorted(v) for u, v in allocation(state).owned.items()},
        "draining": dict(state.draining),
        "held": dict(state.held),
    }


def snapshot(state, environment: Optional[Dict[str, Any]] = None) -> str:
    """Serialize ``state`` canonically.

    ``environment`` optionally carries the embedded queue and simulated
    clouds so a daemon restart can bring its stand-ins back too.
    """
    doc = state_to_dict(state)
    if environment is not None:
        doc["environment"] = environment
    return json.dumps(doc, sort_keys=True, indent=1, ensure_ascii=True) + "\n"


def _load_document(document: str) -> Dict[str, Any]:
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise CorruptSnapshot(exc.pos, exc.msg) from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise CorruptSnapshot(0, "not a scheduler snapshot")
    if doc.get("version") != VERSION:
        raise UnsupportedVersion(f"snapshot version {doc.get('version')!r} (supported: {VERSION})")
    return doc


def restore(document: str):
    """Rebuild a :class:`~cloudsched.scheduler.SchedulerState` from text."""
    from .scheduler import SchedulerState, allocation
    doc = _load_document(document)
    where = "$"
    try:
        where = "$.clusters"
        clusters = [cluster_from_dict(c) for c in doc["clusters"]]
        where = "$.jobs"
        jobs = JobPool(job_from_dict(j) for j in doc["jobs"])
        where = "$"
        state = SchedulerState(
            resources=ResourcePool(clusters), jobs=jobs,
            draining={str(k): int(v) for k, v in doc["draining"].items()},
            held={str(k): str(v) for k, v in doc["held"].items()},
            cycle=int(doc["cycle"]), vm_counter=int(doc["vm_counter"]), now=int(doc["clock"]),
        )
        claimed = {u: sorted(v) for u, v in doc["allocation"].items()}
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise CorruptSnapshot(where, f"{type(exc).__name__}: {exc}") from None
    actual = {u: sorted(v) for u, v in allocation(state).owned.items()}
    if claimed != actual:
        raise CorruptSnapshot("$.allocation", "does not match the VM owners")
    for c in state.resources.clusters:
        if len(c.vms) > c.vm_slots:
            raise CorruptSnapshot("$.clusters", f"{c.name} has more VMs than vm_slots")
    return state


def environment_of(document: str) -> Optional[Dict[str, Any]]:
    return _load_document(document).get("environment")


def save(state, path: str, environment: Optional[Dict[str, Any]] = None) -> None:
    """Write a snapshot atomically (temp file in the same directory, then rename)."""
    if not path:
        raise WriteFailure("no persistence path configured")
    text = snapshot(state, environment)
    directory = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(prefix=".snapshot-", dir=directory)
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        raise WriteFailure(str(exc)) from exc


def load(path: str):
    with open(path) as fh:
        return restore(fh.read())
