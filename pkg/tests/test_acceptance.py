"""Acceptance criteria, each at its stated tolerance.

Run with ``pytest tests/test_acceptance.py`` (or execute this file); a
PASS/FAIL line per criterion is printed at the end of the session.
"""
import functools
import itertools
import json
import logging
import os
import random
import time

import pytest

from _support import MIN, bundled, corpus_case_ok, random_scenario, run_monitored, spec, sub
from oracles import greedy_fair_share
from cloudsched.model import MS_PER_HOUR
from cloudsched.scheduler import RebalanceMode, fair_share_targets
from cloudsched.sim import (Arrival, Scenario, analytic_makespan, compare_runs, parse_scenario,
                            run_scenario)
from cloudsched.submit import SubmitError, descriptor_to_jobs, format_submit, parse_submit

GRACEFUL, KILL = RebalanceMode.GRACEFUL, RebalanceMode.KILL
N_RANDOM = 200
FAULT_RATES = (0.01, 0.02, 0.05)
N_FAULT = 100
N_PERSIST = 50
FUZZ_ITERATIONS = 1_000_000
DATA = os.path.join(os.path.dirname(__file__), "data")


def criterion(n, title):
    return pytest.mark.criterion(n, title)


# ---------------------------------------------------------------------------
# suites, cached so the capacity criterion can look at every one of them
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def babar_run():
    t0 = time.perf_counter()
    sim, mon, result = run_monitored(parse_scenario(bundled("babar-2000.scenario")), light=True)
    return sim, mon, result, time.perf_counter() - t0


@functools.lru_cache(maxsize=None)
def canfar_run():
    t0 = time.perf_counter()
    sim, mon, result = run_monitored(parse_scenario(bundled("canfar.scenario")), light=True)
    return sim, mon, result, time.perf_counter() - t0


def halving_scenario(mode):
    """Capacity 20; A saturates it, B arrives ten cycles in."""
    return Scenario(
        [spec("c", 20, latency=MIN)],
        [Arrival(0, "A", sub("a", 100), 15 * MIN), Arrival(10 * MIN, "B", sub("b", 100), 15 * MIN)],
        horizon=2 * 24 * MS_PER_HOUR, config=_config(mode), name=f"halving-{mode.value}")


def _config(mode):
    from cloudsched.scheduler import SchedulerConfig
    return SchedulerConfig(rebalance_mode=mode)


@functools.lru_cache(maxsize=None)
def halving_run(mode):
    sim, mon, result = run_monitored(halving_scenario(mode))
    shutdowns = [e for e in result.trace if e[1] == "shutdown"]
    return sim, mon, result, shutdowns


@functools.lru_cache(maxsize=None)
def random_suite(mode):
    return [run_monitored(random_scenario(seed, mode)) for seed in range(N_RANDOM)]


@functools.lru_cache(maxsize=None)
def fault_suite():
    out = []
    for mode, rate in itertools.product((GRACEFUL, KILL), FAULT_RATES):
        for seed in range(N_FAULT):
            base = run_scenario(random_scenario(seed, mode, max_duration=10))
            sim, mon, result = run_monitored(
                random_scenario(seed, mode, fault_rate=rate, max_duration=10))
            out.append((mode, rate, seed, base, sim, mon, result))
    return out


@functools.lru_cache(maxsize=None)
def persist_suite():
    out = []
    for seed in range(N_PERSIST):
        rng = random.Random(1000 + seed)
        mode = rng.choice([GRACEFUL, KILL])
        rate = rng.choice([0.0, 0.0, 0.02])
        _, mon_a, base = run_monitored(random_scenario(seed, mode, fault_rate=rate, max_duration=10))
        cut = rng.randint(0, base.metrics.cycles - 1)
        _, mon_b, other = run_monitored(
            random_scenario(seed, mode, fault_rate=rate, max_duration=10), interrupt_at=cut)
        out.append((seed, mode, rate, cut, base, other, mon_a, mon_b))
    return out


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------

@criterion(1, "throughput: 2000 x 7h jobs on 80 slots in [175h, 185h], under 30s")
def test_c1_throughput():
    sim, mon, result, wall = babar_run()
    m = result.metrics
    print(f"makespan {m.makespan_hours:.3f} h, boots {m.boots}, wall {wall:.1f} s")
    assert m.jobs_submitted == 2000
    assert m.jobs_completed == 2000
    assert 175.0 <= m.makespan_hours <= 185.0
    assert wall < 30.0
    assert sum(c.vm_slots for c in sim.scheduler.state.resources.clusters) == 80


@criterion(2, "fair-share halving: exactly {A:10, B:10} within 22 cycles of B")
@pytest.mark.parametrize("mode", [GRACEFUL, KILL], ids=["graceful", "kill"])
def test_c2_halving(mode):
    sim, mon, result, shutdowns = halving_run(mode)
    counts = [c for _, c in result.metrics.vm_counts]
    arrival = 10
    window = counts[arrival:arrival + 22 + 1]
    hit = next((i for i, c in enumerate(window) if c == {"A": 10, "B": 10}), None)
    print(f"{mode.value}: exact split {hit} cycles after B, kills {result.metrics.kills}")
    assert hit is not None
    # and it stays split while both users still saturate
    assert all(c == {"A": 10, "B": 10} for c in window[hit:])
    assert counts[:arrival] and counts[arrival - 1] == {"A": 20}
    # (time, "shutdown", vm, reason, job)
    killed = [e for e in shutdowns if e[3] == "rebalance" and e[4]]
    if mode is GRACEFUL:
        assert result.metrics.kills == 0
        assert killed == []
        assert mon.busy_shutdowns == []
    else:
        assert result.metrics.kills == 10
        assert len(killed) == 10
        # (time, "boot", cluster, vm, owner, job)
        owners = {e[3]: e[4] for e in result.trace if e[1] == "boot"}
        assert {owners[e[2]] for e in killed} == {"A"}
        requeued = [e[2] for e in result.trace if e[1] == "requeue"]
        assert sorted(requeued) == sorted(e[4] for e in killed)
        assert result.metrics.requeues == 10
    assert result.metrics.jobs_completed == 200
    assert mon.violations == []


@criterion(3, "graceful safety: no busy VM shut down, holds all released (200 runs)")
def test_c3_graceful_safety():
    runs = random_suite(GRACEFUL)
    assert len(runs) >= 200
    busy = [(seed, b) for seed, (_, mon, _) in enumerate(runs) for b in mon.busy_shutdowns]
    bad = [(i, v) for i, (_, mon, _) in enumerate(runs) for v in mon.violations]
    holds = sum(res.metrics.holds for _, _, res in runs)
    releases = sum(res.metrics.releases for _, _, res in runs)
    print(f"holds {holds}, releases {releases}, graceful drains "
          f"{sum(res.metrics.graceful_shutdowns for _, _, res in runs)}")
    assert busy == []
    assert bad == []
    assert holds > 0  # the property is actually exercised
    assert all(res.metrics.jobs_completed == res.metrics.jobs_submitted for _, _, res in runs)
    assert all(res.metrics.kills == 0 for _, _, res in runs)


@criterion(4, "kill requeue: killed jobs requeued in full and finished, work conserved")
def test_c4_kill_requeue():
    runs = random_suite(KILL)
    bad = [(i, v) for i, (_, mon, _) in enumerate(runs) for v in mon.violations]
    kills = sum(res.metrics.kills for _, _, res in runs)
    requeued = sum(len(mon.requeued) for _, mon, _ in runs)
    print(f"kills {kills}, requeued {requeued}")
    assert bad == []
    assert kills > 0 and requeued >= kills
    for sim, mon, res in runs:
        assert res.metrics.jobs_completed == res.metrics.jobs_submitted
        bal = sim.work_balance()
        assert bal["remaining"] == 0 and bal["in_flight_done"] == 0
        assert bal["completed"] == bal["submitted"]
        assert bal["executed"] == bal["completed"] + bal["wasted"]


@criterion(5, "error recovery: Error VMs gone and replaced within 1 cycle, 3x makespan bound")
def test_c5_error_recovery():
    runs = fault_suite()
    bad, misses, slow, errors = [], [], [], 0
    for mode, rate, seed, base, sim, mon, res in runs:
        bad += [(mode.value, rate, seed, v) for v in mon.violations]
        misses += [(mode.value, rate, seed, m) for m in mon.replacement_misses]
        errors += res.metrics.error_kills
        done = res.metrics.jobs_completed == res.metrics.jobs_submitted
        if not done or res.metrics.makespan > 3 * base.metrics.makespan:
            slow.append((mode.value, rate, seed, res.metrics.makespan / base.metrics.makespan))
    worst = max(r[6].metrics.makespan / r[3].metrics.makespan for r in runs)
    print(f"{len(runs)} runs, {errors} Error VMs, worst makespan ratio {worst:.2f}")
    assert errors > 0
    assert bad == []
    assert misses == []
    assert slow == []


@criterion(6, "persistence: restore at a random cycle gives identical results (50 runs)")
def test_c6_persistence():
    runs = persist_suite()
    assert len(runs) == 50
    diffs = [(seed, mode.value, rate, cut, compare_runs(base, other))
             for seed, mode, rate, cut, base, other, _, _ in runs]
    diffs = [d for d in diffs if d[4] is not None]
    assert diffs == []
    assert all(not a.violations and not b.violations for *_, a, b in runs)


@criterion(7, "capacity: vm_slots never exceeded and every boot fits, all suites")
def test_c7_capacity():
    monitors = [babar_run()[1], canfar_run()[1]]
    monitors += [halving_run(m)[1] for m in (GRACEFUL, KILL)]
    monitors += [mon for mode in (GRACEFUL, KILL) for _, mon, _ in random_suite(mode)]
    monitors += [r[5] for r in fault_suite()]
    monitors += [m for r in persist_suite() for m in r[6:]]
    breaches = [v for mon in monitors for v in mon.capacity]
    boots = sum(mon.boots for mon in monitors)
    print(f"{len(monitors)} runs, {boots} boots checked")
    assert boots > 0
    assert breaches == []


@criterion(8, "fair share equals the water-filling oracle, exhaustive to 5 users")
def test_c8_fair_share_oracle():
    checked = 0
    for n_users in range(1, 6):
        names = [f"u{i}" for i in range(n_users)]
        for demands in itertools.product(range(1, 13), repeat=n_users):
            rows = greedy_fair_share(demands, 12)
            users = list(zip(names, demands))
            for capacity in range(13):
                got = fair_share_targets(users, capacity)
                want = rows[capacity]
                if [got[u] for u in names] != want:
                    pytest.fail(f"demands {demands} capacity {capacity}: {got} != {want}")
                checked += 1
    print(f"{checked} cases")
    assert checked == 13 * sum(12 ** k for k in range(1, 6))


_FUZZ_ALPHABET = 'ab+=" #\n\r\t0123456789Queue\x00\x85  é-.:_QV\\'
_FUZZ_TOKENS = [
    "Queue", "queue 3", "Queue 0", "Queue 99999999999999999999", '+VMType = "x"',
    '+VMLoc = "http://i"', "+VMAMI = ami", '+VMMem = "12"', '+VMCPUCores = "0"', "=", '"',
    "#c", "", "Universe = vanilla", "Regular Condor Attributes", '+VMCPUArch = "arm"',
    '+VMNetwork = "PUBLIC"', '+VMStorage = ""', "a b = c", "priority = x", '+VMName = "',
    "+vmtype=x", "QUEUE\t7",
]


def _fuzz_case(rng, sample):
    k = rng.random()
    if k < 0.4:
        s = list(sample)
        for _ in range(rng.randint(1, 4)):
            op, i = rng.randrange(3), rng.randrange(len(s) + 1)
            if op == 0:
                s.insert(i, rng.choice(_FUZZ_ALPHABET))
            elif op == 1 and i < len(s):
                del s[i]
            elif i < len(s):
                s[i] = rng.choice(_FUZZ_ALPHABET)
        return "".join(s)
    if k < 0.8:
        return "\n".join(rng.choice(_FUZZ_TOKENS) for _ in range(rng.randint(0, 6)))
    return "".join(rng.choice(_FUZZ_ALPHABET) for _ in range(rng.randint(0, 30)))


@criterion(9, "parser: verbatim sample, 100-case golden corpus, 10^6 fuzz without crashes")
def test_c9_parser_conformance():
    sample = bundled("sample.sub")
    d = parse_submit(sample)
    assert d.vm_attrs == {
        "VMType": "vm-name", "VMLoc": "http://repository.tld/your.vm.img.gz",
        "VMAMI": "ami-dfasfds", "VMCPUArch": "x86", "VMCPUCores": "1",
        "VMNetwork": "private", "VMMem": "512", "VMStorage": "20",
    }
    assert d.queue_count == 1
    (job,) = descriptor_to_jobs(d, "alice", 0)
    assert (job.user, job.vmtype, job.vm_mem, job.vm_storage, job.vm_cpu_cores,
            job.vm_cpu_arch.value, job.priority) == ("alice", "vm-name", 512, 20, 1, "x86", 1)

    with open(os.path.join(DATA, "submit_corpus.json")) as fh:
        corpus = json.load(fh)
    assert len(corpus) == 100
    failures = [c["name"] for c in corpus if not corpus_case_ok(c)]
    assert failures == []

    logging.disable(logging.CRITICAL)
    try:
        crashes = run_fuzz(FUZZ_ITERATIONS, sample)
    finally:
        logging.disable(logging.NOTSET)
    assert crashes == []


def run_fuzz(iterations, sample, seed=7):
    rng = random.Random(seed)
    crashes = []
    for i in range(iterations):
        text = _fuzz_case(rng, sample)
        try:
            d = parse_submit(text)
            again = parse_submit(format_submit(d))
            if again != d:
                crashes.append((i, text, "round trip"))
            if d.queue_count <= 1000:
                descriptor_to_jobs(d, "u", 1)
        except SubmitError:
            pass
        except Exception as exc:  # anything else is a crash
            crashes.append((i, text, repr(exc)))
            if len(crashes) > 20:
                break
    return crashes


@criterion(10, "CANFAR scale: 9000 x 3.7h on 232 cores, >= 33000 core hours, makespan +-5%")
def test_c10_canfar():
    sim, mon, result, wall = canfar_run()
    m = result.metrics
    cores = sum(c.vm_slots * c.cpu_cores for c in sim.scheduler.state.resources.clusters)
    bound = analytic_makespan(9000, cores, int(3.7 * MS_PER_HOUR), 120_000,
                              sim.scenario.cycle_period)
    print(f"core hours {m.core_hours:.1f}, makespan {m.makespan_hours:.3f} h, "
          f"analytic {bound / MS_PER_HOUR:.3f} h, wall {wall:.1f} s")
    assert cores == 232
    assert m.jobs_completed == 9000
    assert m.core_hours >= 33_000
    assert abs(m.makespan - bound) <= 0.05 * bound
    assert wall < 60.0


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-v"]))
