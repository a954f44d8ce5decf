import json
import re
import subprocess
import sys
import time

import pytest

from cloudsched import cli, daemon as daemon_mod
from cloudsched.config import load_clouds, load_general
from cloudsched.daemon import Daemon, request
from _support import bundled

FIRST_LINE = re.compile(r"^error: [1-3] \w+: \S.*$")


def err_line(capsys):
    lines = capsys.readouterr().err.splitlines()
    assert lines and FIRST_LINE.match(lines[0]), lines
    return lines[0]


def write(path, text):
    path.write_text(text)
    return str(path)


# -- usage and client errors ----------------------------------------------

def test_usage_error(capsys):
    assert cli.main(["frobnicate"]) == cli.EXIT_USAGE
    assert err_line(capsys).startswith("error: 1 UsageError: ")


def test_shutdown_flags_are_exclusive(capsys):
    assert cli.main(["shutdown", "--persist", "--kill-all"]) == cli.EXIT_USAGE
    assert "UsageError" in err_line(capsys)


def test_unreachable_daemon(tmp_path, capsys):
    rc = cli.main(["status", "--socket", str(tmp_path / "none.sock")])
    assert rc == cli.EXIT_RUNTIME
    assert err_line(capsys).startswith("error: 3 Unreachable: no daemon at ")


def test_submit_missing_vmtype(tmp_path, capsys):
    f = write(tmp_path / "j.sub", '+VMLoc = "http://i"\nQueue\n')
    rc = cli.main(["submit", "-f", f, "-u", "u", "--socket", str(tmp_path / "x.sock")])
    assert rc == cli.EXIT_RUNTIME
    assert err_line(capsys) == f"error: 3 MissingAttribute: {f}: missing attribute VMType"


def test_submit_syntax_error_is_one_line(tmp_path, capsys):
    f = write(tmp_path / "j.sub", "Universe = vanilla\n")
    assert cli.main(["submit", "-f", f, "-u", "u", "--socket", "/nonexistent"]) == cli.EXIT_RUNTIME
    line = err_line(capsys)
    assert line.startswith("error: 3 SubmitSyntaxError: ") and f in line


def test_bad_duration(tmp_path, capsys):
    f = write(tmp_path / "j.sub", bundled("sample.sub"))
    rc = cli.main(["submit", "-f", f, "-u", "u", "--duration", "soon", "--socket", "/nonexistent"])
    assert rc == cli.EXIT_USAGE
    assert err_line(capsys).startswith("error: 1 UsageError: --duration: ")


def test_run_bad_config(tmp_path, capsys):
    g = write(tmp_path / "g.conf", "[global]\n")
    c = write(tmp_path / "c.conf", "[c]\nhost = h\nmemory = 1\nvm_slots = -1\ncpu_cores = 1\n")
    assert cli.main(["run", "-c", g, "-r", c]) == cli.EXIT_CONFIG
    assert err_line(capsys) == f"error: 2 ConfigError: {c}:4: vm_slots: must be >= 0, got -1"


def test_submit_missing_file(tmp_path, capsys):
    rc = cli.main(["submit", "-f", str(tmp_path / "none.sub"), "-u", "u"])
    assert rc == cli.EXIT_RUNTIME
    assert "FileError" in err_line(capsys)


# -- simulate ---------------------------------------------------------------

SMALL = """
name: small
clusters:
  - name: c
    vm_slots: 2
    memory: 1024
arrivals:
  - time: 0
    user: alice
    duration: 1h
    submit_text: |
      +VMType = "t"
      +VMLoc = "http://i"
      Queue 3
"""


def test_simulate_small(tmp_path, capsys):
    s = write(tmp_path / "small.scenario", SMALL)
    out = tmp_path / "out"
    assert cli.main(["simulate", "-s", s, "-o", str(out)]) == cli.EXIT_OK
    text = capsys.readouterr().out
    summary = json.loads(text[: text.rindex("}") + 1])
    assert summary["jobs_submitted"] == 3 and summary["jobs_completed"] == 3
    assert summary["boots"] == 2
    for name in ("metrics.json", "vm_counts.csv", "trace.jsonl"):
        assert (out / name).exists()


def test_simulate_empty(tmp_path, capsys):
    s = write(tmp_path / "empty.scenario", "")
    assert cli.main(["simulate", "-s", s, "-o", str(tmp_path / "o")]) == cli.EXIT_OK
    text = capsys.readouterr().out
    summary = json.loads(text[: text.rindex("}") + 1])
    assert all(v == 0 for v in summary.values()), summary


def test_simulate_missing(tmp_path, capsys):
    rc = cli.main(["simulate", "-s", str(tmp_path / "no.scenario"), "-o", str(tmp_path)])
    assert rc == cli.EXIT_CONFIG
    assert err_line(capsys).startswith("error: 2 ScenarioError: ")


def test_simulate_bad_scenario(tmp_path, capsys):
    s = write(tmp_path / "bad.scenario", "clusters: [ {name: c, vm_slots: -3} ]\n")
    assert cli.main(["simulate", "-s", s, "-o", str(tmp_path)]) == cli.EXIT_CONFIG
    assert "ScenarioError" in err_line(capsys)


# -- status formatting --------------------------------------------------------

REPORT = {
    "vms": [
        {"cluster": "c", "name": "vm-000002", "vmtype": "t", "state": "Running", "draining": True,
         "owner": "bob", "age_s": 120, "job": "2.0"},
        {"cluster": "c", "name": "vm-000001", "vmtype": "t", "state": "Starting", "draining": False,
         "owner": "alice", "age_s": 5, "job": None},
    ],
    "users": {"bob": {"new": 0, "scheduled": 1, "held": 0, "running": 1, "vms": 1},
              "alice": {"new": 2, "scheduled": 0, "held": 1, "running": 0, "vms": 1}},
}


def test_format_status():
    text = cli.format_status(REPORT)
    lines = text.splitlines()
    assert lines[0].split() == ["CLUSTER", "VM", "VMTYPE", "STATE", "OWNER", "AGE_S", "JOB"]
    assert lines[1].split() == ["c", "vm-000002", "t", "Running*", "bob", "120", "2.0"]
    assert lines[2].split() == ["c", "vm-000001", "t", "Starting", "alice", "5", "-"]
    users = lines[4:7]
    assert [row.split()[0] for row in users] == ["USER", "alice", "bob"]
    assert users[1].split() == ["alice", "2", "0", "1", "0", "1"]
    assert lines[-1] == "* draining"
    assert cli.format_status(REPORT) == text


def test_format_status_empty():
    text = cli.format_status({"vms": [], "users": {}})
    assert text.splitlines() == ["CLUSTER  VM  VMTYPE  STATE  OWNER  AGE_S  JOB", "",
                                 "USER  NEW  SCHEDULED  HELD  RUNNING  VMS"]


# -- daemon over the socket ---------------------------------------------------

@pytest.fixture
def configs(tmp_path, monkeypatch):
    monkeypatch.setattr(daemon_mod, "QUEUE_TICK", 50)
    sock = tmp_path / "d.sock"
    state = tmp_path / "state.json"
    g = write(tmp_path / "g.conf", f"""[global]
poll_interval = 50ms
schedule_interval = 100ms
cleanup_interval = 100ms
persistence_file = {state}
socket = {sock}
""")
    c = write(tmp_path / "c.conf", """[c]
host = c.cloud
memory = 4096
vm_slots = 3
cpu_cores = 1
storage = 100
""")
    return g, c, str(sock), state


def start(g, c):
    d = Daemon(load_general(g), load_clouds(c), clouds_path=c)
    d.start()
    return d


def wait_for(pred, timeout=10.0):
    end = time.monotonic() + timeout
    while time.monotonic() < end:
        value = pred()
        if value:
            return value
        time.sleep(0.05)
    raise AssertionError("condition not reached")


def vm_rows(sock):
    return request(sock, {"op": "status"})["status"]["vms"]


def test_fresh_daemon_has_empty_tables(configs, capsys):
    g, c, sock, _ = configs
    d = start(g, c)
    try:
        assert cli.main(["status", "--socket", sock]) == cli.EXIT_OK
        out = capsys.readouterr().out.splitlines()
        assert out == ["CLUSTER  VM  VMTYPE  STATE  OWNER  AGE_S  JOB", "",
                       "USER  NEW  SCHEDULED  HELD  RUNNING  VMS"]
    finally:
        d.stop()


def test_daemon_round_trip(configs, tmp_path, capsys):
    g, c, sock, state = configs
    sample = write(tmp_path / "sample.sub", bundled("sample.sub"))
    five = write(tmp_path / "five.sub", '+VMType = "t"\n+VMLoc = "http://i"\nQueue 5\n')
    d = start(g, c)
    try:
        assert cli.main(["submit", "-f", sample, "-u", "alice", "--socket", sock]) == 0
        assert capsys.readouterr().out.split() == ["1.0"]
        assert cli.main(["submit", "-f", five, "-u", "bob", "--duration", "10h",
                         "--socket", sock]) == 0
        assert capsys.readouterr().out.split() == ["2.0", "2.1", "2.2", "2.3", "2.4"]
        rows = wait_for(lambda: (r := vm_rows(sock)) and len(r) == 3 and r)
        assert {r["state"] for r in rows} <= {"Starting", "Running"}
        wait_for(lambda: all(r["state"] == "Running" and r["job"] for r in vm_rows(sock)))
        assert cli.main(["status", "--socket", sock]) == 0
        live = capsys.readouterr().out
        assert cli.main(["shutdown", "--persist", "--socket", sock]) == 0
        out = capsys.readouterr().out
        assert f"state saved to {state}" in out and "shut down" not in out
        assert state.exists()
        assert d.finished.wait(10)
    finally:
        d.stop()

    # the saved file renders the same VMs without a daemon
    assert cli.main(["status", "--snapshot", str(state)]) == 0
    snap = capsys.readouterr().out
    names = sorted(r["name"] for r in rows)
    for name in names:
        assert name in snap and name in live

    d2 = start(g, c)
    try:
        assert sorted(r["name"] for r in vm_rows(sock)) == names
        assert cli.main(["shutdown", "--kill-all", "--socket", sock]) == 0
        out = capsys.readouterr().out.splitlines()
        assert sorted(out) == [f"shut down {n}" for n in names]
        assert d2.finished.wait(10)
    finally:
        d2.stop()


def test_daemon_rejects_bad_requests(configs):
    g, c, sock, _ = configs
    d = Daemon(load_general(g), load_clouds(c), clouds_path=c)
    assert d.handle_line("{nope")["error"] == "BadRequest"
    assert d.handle_line("[1]")["error"] == "BadRequest"
    assert d.handle_line('{"op": "dance"}') == {
        "ok": False, "error": "BadRequest", "message": "unknown op 'dance'"}
    reply = d.handle_line(json.dumps({"op": "submit", "user": "u", "text": "Queue"}))
    assert reply["ok"] is False and reply["error"] == "MissingAttribute"
    assert d.handle_line(json.dumps({"op": "submit", "text": "Queue"}))["error"] == "ValueError"
    assert d.handle_line('{"op": "reload"}') == {"ok": True, "clusters": ["c"]}


def test_second_instance_refused(configs, capsys):
    g, c, sock, _ = configs
    d = start(g, c)
    try:
        assert cli.main(["run", "-c", g, "-r", c]) == cli.EXIT_RUNTIME
        assert "another instance is listening" in err_line(capsys)
    finally:
        d.stop()


def test_run_process_persists_on_term(tmp_path):
    sock = tmp_path / "p.sock"
    state = tmp_path / "state.json"
    g = write(tmp_path / "g.conf", f"""[global]
poll_interval = 100ms
schedule_interval = 100ms
cleanup_interval = 100ms
persist_on_shutdown = true
persistence_file = {state}
socket = {sock}
""")
    c = write(tmp_path / "c.conf", "[c]\nhost = h\nmemory = 1024\nvm_slots = 1\ncpu_cores = 1\n")
    proc = subprocess.Popen([sys.executable, "-m", "cloudsched", "run", "-c", g, "-r", c],
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    try:
        wait_for(lambda: sock.exists())
        reply = request(str(sock), {"op": "status"})
        assert reply["ok"] and reply["status"]["vms"] == []
        proc.terminate()
        out, err = proc.communicate(timeout=20)
    finally:
        if proc.poll() is None:
            proc.kill()
    assert proc.returncode == 0, err
    assert out.startswith(f"cloudsched running, socket {sock}")
    assert state.exists() and not sock.exists()
