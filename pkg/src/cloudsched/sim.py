"""Deterministic scenario runner on a virtual clock.

A :class:`Simulation` wires the job queue, the scheduler and one simulated
cloud per cluster together.  Each step of ``cycle_period`` virtual time:

1. submits the arrivals that are due and applies scripted faults,
2. lets the clouds deliver boot completions and random faults,
3. runs one scheduler cycle,
4. lets the queue dispatch jobs to idle VMs,
5. runs the dispatched jobs for one period and advances the clock.
"""
from __future__ import annotations

import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import yaml

from .backends import SimCloudConfig, SimulatedCloud
from .jobqueue import JobQueue
from .model import parse_duration as _parse_duration
from .model import MS_PER_HOUR, MS_PER_SECOND, Clock, CloudType, Cluster, QueueState, ResourcePool
from .persistence import restore, snapshot
from .scheduler import CloudScheduler, CycleReport, RebalanceMode, SchedulerConfig, SchedulerState
from .submit import SubmitError, descriptor_to_jobs, parse_submit

logger = logging.getLogger(__name__)

DEFAULT_CYCLE_PERIOD = 60 * MS_PER_SECOND


class ScenarioError(ValueError):
    pass


def parse_duration(value) -> int:
    """``"7h"``, ``"120s"``, ``"3.7h"``, ``90`` (seconds) -> milliseconds."""
    try:
        return _parse_duration(value)
    except ValueError as exc:
        raise ScenarioError(str(exc)) from None


@dataclass
class ClusterSpec:
    cluster: Cluster
    cloud: SimCloudConfig


@dataclass
class Arrival:
    time: int
    user: str
    submit_text: str
    duration: int
    count: int = 1


@dataclass
class FaultEvent:
    time: int
    cluster: str
    vm: str = "any"


@dataclass
class Scenario:
    clusters: List[ClusterSpec]
    arrivals: List[Arrival] = field(default_factory=list)
    faults: List[FaultEvent] = field(default_factory=list)
    horizon: int = 30 * 24 * MS_PER_HOUR
    seed: int = 0
    cycle_period: int = DEFAULT_CYCLE_PERIOD
    config: SchedulerConfig = field(default_factory=SchedulerConfig)
    name: str = "scenario"

    def __post_init__(self):
        if self.horizon <= 0:
            raise ScenarioError("horizon must be > 0")
        if self.cycle_period <= 0:
            raise ScenarioError("cycle_period must be > 0")
        if any(a.time > b.time for a, b in zip(self.arrivals, self.arrivals[1:])):
            raise ScenarioError("arrivals must be sorted by time")
        names = [c.cluster.name for c in self.clusters]
        if len(set(names)) != len(names):
            raise ScenarioError("cluster names must be unique")
        for f in self.faults:
            if f.cluster not in names:
                raise ScenarioError(f"fault names unknown cluster {f.cluster!r}")


@dataclass
class Metrics:
    jobs_submitted: int = 0
    jobs_completed: int = 0
    makespan: int = 0  # ms of virtual time at the last completion
    core_hours: float = 0.0
    submitted_core_hours: float = 0.0
    wasted_core_hours: float = 0.0
    boots: int = 0
    boot_failures: int = 0
    kills: int = 0
    error_kills: int = 0
    graceful_shutdowns: int = 0
    cleanup_shutdowns: int = 0
    requeues: int = 0
    holds: int = 0
    releases: int = 0
    cycles: int = 0
    vm_counts: List[Tuple[int, Dict[str, int]]] = field(default_factory=list)
    fairness: List[Tuple[int, Dict[str, int]]] = field(default_factory=list)

    @property
    def makespan_hours(self) -> float:
        return self.makespan / MS_PER_HOUR

    def summary(self) -> Dict[str, Any]:
        out = {k: v for k, v in asdict(self).items() if k not in ("vm_counts", "fairness")}
        out["makespan_hours"] = self.makespan_hours
        return out


@dataclass
class SimResult:
    metrics: Metrics
    trace: List[tuple]


# ---------------------------------------------------------------------------
# scenario files
# ---------------------------------------------------------------------------

def _cluster_from_yaml(raw: dict, seed: int) -> ClusterSpec:
    try:
        archs = raw.get("cpu_archs", ["x86", "x86_64"])
        nets = raw.get("networks", ["private", "public"])
        if isinstance(archs, str):
            archs = [a.strip() for a in archs.split(",")]
        if isinstance(nets, str):
            nets = [n.strip() for n in nets.split(",")]
        cluster = Cluster(
            name=str(raw["name"]), host=str(raw.get("host", f"{raw['name']}.cloud")),
            cloud_type=CloudType(raw.get("cloud_type", "simulated")),
            memory=int(raw.get("memory", 4096)), cpu_archs=frozenset(archs),
            networks=frozenset(nets), vm_slots=int(raw["vm_slots"]),
            cpu_cores=int(raw.get("cpu_cores", 1)), storage=int(raw.get("storage", 100)),
        )
        lat = raw.get("boot_latency", 0)
        if isinstance(lat, (list, tuple)):
            lat = (parse_duration(lat[0]), parse_duration(lat[1]))
        else:
            lat = parse_duration(lat)
        cloud = SimCloudConfig(
            boot_latency=lat, fault_rate=float(raw.get("fault_rate", 0.0)),
            boot_failure_rate=float(raw.get("boot_failure_rate", 0.0)),
            rng_seed=int(raw.get("rng_seed", seed)),
        )
    except KeyError as exc:
        raise ScenarioError(f"cluster is missing {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"cluster {raw.get('name')!r}: {exc}") from None
    return ClusterSpec(cluster, cloud)


def load_scenario(path: str) -> Scenario:
    with open(path) as fh:
        text = fh.read()
    return parse_scenario(text, base_dir=os.path.dirname(os.path.abspath(path)))


def parse_scenario(text: str, base_dir: str = ".") -> Scenario:
    """Build a :class:`Scenario` from YAML text (grammar in the README)."""
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ScenarioError(f"not valid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ScenarioError("scenario must be a mapping")
    seed = int(raw.get("seed", 0))
    clusters = [_cluster_from_yaml(c, seed) for c in raw.get("clusters") or []]
    arrivals = []
    for a in raw.get("arrivals") or []:
        if "submit" in a:
            with open(os.path.join(base_dir, a["submit"])) as fh:
                text_ = fh.read()
        elif "submit_text" in a:
            text_ = a["submit_text"]
        else:
            raise ScenarioError("arrival needs 'submit' (path) or 'submit_text'")
        try:
            parse_submit(text_)
        except SubmitError as exc:
            raise ScenarioError(f"arrival for {a.get('user')!r}: {exc}") from None
        arrivals.append(Arrival(
            time=parse_duration(a.get("time", 0)), user=str(a["user"]), submit_text=text_,
            duration=parse_duration(a["duration"]), count=int(a.get("count", 1)),
        ))
    faults = [FaultEvent(parse_duration(f["time"]), str(f["cluster"]), str(f.get("vm", "any")))
              for f in raw.get("faults") or []]
    sched = raw.get("scheduler") or {}
    try:
        config = SchedulerConfig(
            rebalance_mode=RebalanceMode(sched.get("rebalance_mode", "graceful")),
            error_threshold=int(sched.get("error_threshold", 1)),
            boot_timeout=(parse_duration(sched["boot_timeout"])
                          if sched.get("boot_timeout") is not None else 900_000),
            drain_timeout=(parse_duration(sched["drain_timeout"])
                           if sched.get("drain_timeout") is not None else None),
        )
    except ValueError as exc:
        raise ScenarioError(str(exc)) from None
    return Scenario(
        clusters=clusters, arrivals=sorted(arrivals, key=lambda a: a.time), faults=faults,
        horizon=parse_duration(raw.get("horizon", "30d")), seed=seed,
        cycle_period=parse_duration(raw.get("cycle_period", 60)),
        config=config, name=str(raw.get("name", "scenario")),
    )


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

class Simulation:
    """One scenario in progress; :meth:`step` runs one scheduler cycle."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.clock = Clock(Clock.VIRTUAL)
        self.queue = JobQueue(self.clock)
        self.clouds: Dict[str, SimulatedCloud] = {
            cs.cluster.name: SimulatedCloud(cs.cluster.name, cs.cloud, self.clock,
                                            on_advertise=self.queue.advertise)
            for cs in scenario.clusters
        }
        state = SchedulerState(resources=ResourcePool([cs.cluster.static_copy()
                                                       for cs in scenario.clusters]))
        self.scheduler = CloudScheduler(state, scenario.config, self.queue, self.clouds, self.clock)
        self.metrics = Metrics()
        self.trace: List[tuple] = []
        self._arrivals = list(scenario.arrivals)
        self._faults = sorted(scenario.faults, key=lambda f: f.time)
        self.submitted_core_ms = 0
        self.completed_core_ms = 0
        self.durations: Dict[str, int] = {}
        self.cycle = 0
        self.finished = False

    # -- bookkeeping -------------------------------------------------------

    def _emit(self, *event) -> None:
        self.trace.append((self.clock.now(),) + event)

    def _submit(self, arrival: Arrival) -> None:
        desc = parse_submit(arrival.submit_text)
        for _ in range(arrival.count):
            jobs = descriptor_to_jobs(desc, arrival.user, self.queue.next_cluster_id())
            ids = self.queue.submit(jobs, [arrival.duration] * len(jobs))
            for job in jobs:
                self.submitted_core_ms += arrival.duration * job.vm_cpu_cores
                self.durations[job.global_job_id] = arrival.duration
            self.metrics.jobs_submitted += len(ids)
            self._emit("submit", arrival.user, ids[0], len(ids))

    def _record_cycle(self, rep: CycleReport) -> None:
        m = self.metrics
        a = rep.applied
        for name, old, new in rep.vm_events:
            self._emit("vm", name, old, new)
        for name in rep.vanished:
            self._emit("vanished", name)
        for cluster, name, owner, job in a.booted:
            self._emit("boot", cluster, name, owner, job)
        for cluster, owner, err in a.boot_failures:
            self._emit("boot_failed", cluster, owner, err)
        for name, reason, job in a.shutdowns:
            self._emit("shutdown", name, reason, job)
            if reason == "error":
                m.error_kills += 1
            elif reason in ("rebalance", "drain-timeout") and job:
                m.kills += 1
            elif reason in ("rebalance", "drained"):
                m.graceful_shutdowns += 1
            else:
                m.cleanup_shutdowns += 1
        for jid in a.requeued:
            self._emit("requeue", jid)
        for name in a.drained:
            self._emit("drain", name)
        for jid in a.held:
            self._emit("hold", jid)
        for jid in a.released:
            self._emit("release", jid)
        for jid in a.reset:
            self._emit("reset", jid)
        m.boots += len(a.booted)
        m.boot_failures += len(a.boot_failures)
        m.requeues += len(a.requeued)
        m.holds += len(a.held)
        m.releases += len(a.released)

    def owned_counts(self) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        for vm in self.scheduler.state.resources.all_vms():
            counts[vm.owner] = counts.get(vm.owner, 0) + 1
        return counts

    def quiescent(self) -> bool:
        if self._arrivals or self._faults:
            return False
        if self.metrics.jobs_completed < self.metrics.jobs_submitted:
            return False
        return not any(True for _ in self.scheduler.state.resources.all_vms())

    # -- persistence round trip ------------------------------------------

    def restart_scheduler(self) -> str:
        """Persist the scheduler, throw it away and restore it from text."""
        old = self.scheduler
        doc = snapshot(old.state)
        state = restore(doc)
        self.scheduler = CloudScheduler(state, old.config, self.queue, self.clouds, self.clock)
        return doc

    # -- stepping -----------------------------------------------------------

    def step(self) -> CycleReport:
        now = self.clock.now()
        while self._arrivals and self._arrivals[0].time <= now:
            self._submit(self._arrivals.pop(0))
        while self._faults and self._faults[0].time <= now:
            f = self._faults.pop(0)
            for vm_id in self.clouds[f.cluster].inject_fault(f.vm):
                self._emit("fault", f.cluster, vm_id)
        for cloud in self.clouds.values():
            cloud.tick(now, self.cycle)
        rep = self.scheduler.run_cycle()
        self._record_cycle(rep)
        for job_id, vm in self.queue.dispatch_cycle():
            self._emit("dispatch", job_id, vm)
        self.metrics.vm_counts.append((now, self.owned_counts()))
        self.metrics.fairness.append((now, dict(rep.targets)))
        self.metrics.cycles += 1
        self.cycle += 1
        if self.quiescent():
            self.finished = True
            return rep
        done = self.queue.advance_work(self.scenario.cycle_period)
        for jid in done:
            entry = self.queue.entry(jid)
            self.trace.append((entry.completed_at, "complete", jid))
            self.metrics.jobs_completed += 1
            self.metrics.makespan = max(self.metrics.makespan, entry.completed_at)
            self.completed_core_ms += entry.duration * entry.job.vm_cpu_cores
        self.clock.advance(self.scenario.cycle_period)
        return rep

    def run(self, interrupt_at: Optional[int] = None,
            observer: Optional[Callable[["Simulation", CycleReport], None]] = None) -> SimResult:
        if self.cycle == 0 and self.quiescent():
            self.finished = True  # nothing will ever happen
        while not self.finished and self.clock.now() <= self.scenario.horizon:
            if interrupt_at is not None and self.cycle == interrupt_at:
                self.restart_scheduler()
            rep = self.step()
            if observer is not None:
                observer(self, rep)
        self._finalize()
        return SimResult(self.metrics, self.trace)

    def _finalize(self) -> None:
        m = self.metrics
        m.core_hours = self.completed_core_ms / MS_PER_HOUR
        m.submitted_core_hours = self.submitted_core_ms / MS_PER_HOUR
        m.wasted_core_hours = self.queue.wasted_core_ms / MS_PER_HOUR

    # -- accounting checks -------------------------------------------------

    def work_balance(self) -> Dict[str, int]:
        """Core-ms ledger of submitted, finished, queued and lost work."""
        remaining = 0
        in_flight_done = 0
        for e in self.queue.entries():
            if e.queue_state in (QueueState.COMPLETED, QueueState.REMOVED):
                continue
            cores = e.job.vm_cpu_cores
            remaining += e.remaining_work * cores
            in_flight_done += (e.duration - e.remaining_work) * cores
        return {
            "submitted": self.submitted_core_ms,
            "completed": self.completed_core_ms,
            "remaining": remaining,
            "in_flight_done": in_flight_done,
            "wasted": self.queue.wasted_core_ms,
            "executed": self.queue.executed_core_ms,
        }


def run_scenario(s: Scenario, interrupt_at: Optional[int] = None,
                 observer: Optional[Callable[[Simulation, CycleReport], None]] = None) -> SimResult:
    """Run ``s`` to quiescence or its horizon and return metrics and trace.

    ``interrupt_at`` persists and restores the scheduler before that cycle,
    as a restart of the daemon would.
    """
    return Simulation(s).run(interrupt_at=interrupt_at, observer=observer)


def compare_runs(a, b) -> Optional[Tuple[int, Any, Any]]:
    """First divergence between two traces (or two :class:`SimResult`).

    Returns ``None`` when equal, else ``(index, event_a, event_b)``; a
    missing event is reported as ``None``.  For results the trace is
    compared first, then the metrics (index -1).
    """
    if isinstance(a, SimResult) and isinstance(b, SimResult):
        diff = compare_runs(a.trace, b.trace)
        if diff is not None:
            return diff
        if a.metrics != b.metrics:
            return (-1, a.metrics.summary(), b.metrics.summary())
        return None
    for i, (x, y) in enumerate(zip(a, b)):
        if x != y:
            return (i, x, y)
    if len(a) != len(b):
        i = min(len(a), len(b))
        return (i, a[i] if i < len(a) else None, b[i] if i < len(b) else None)
    return None


def analytic_makespan(jobs: int, slots: int, duration: int, boot_latency: int,
                      cycle_period: int) -> int:
    """Makespan of identical jobs run in full waves on ``slots`` VMs.

    The first wave starts once VMs are booted and seen on a cycle boundary.
    """
    start = math.ceil(boot_latency / cycle_period) * cycle_period if boot_latency else cycle_period
    per_wave = math.ceil(duration / cycle_period) * cycle_period
    waves = math.ceil(jobs / slots)
    return start + (waves - 1) * per_wave + duration


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def write_report(result: SimResult, outdir: str) -> Dict[str, str]:
    """Write ``metrics.json``, ``vm_counts.csv`` and ``trace.jsonl`` under ``outdir``."""
    import csv
    import json

    os.makedirs(outdir, exist_ok=True)
    paths = {
        "metrics": os.path.join(outdir, "metrics.json"),
        "table": os.path.join(outdir, "vm_counts.csv"),
        "trace": os.path.join(outdir, "trace.jsonl"),
    }
    with open(paths["metrics"], "w") as fh:
        json.dump(result.metrics.summary(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    users = sorted({u for _, counts in result.metrics.vm_counts for u in counts})
    with open(paths["table"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_s"] + users)
        for t, counts in result.metrics.vm_counts:
            w.writerow([t // 1000] + [counts.get(u, 0) for u in users])
    with open(paths["trace"], "w") as fh:
        for event in result.trace:
            fh.write(json.dumps(list(event)) + "\n")
    return paths
