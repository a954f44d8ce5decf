"""Command line entry point.

Exit codes: 0 ok, 1 usage, 2 config, 3 runtime.  On failure the first
line on stderr is ``error: <code> <Kind>: <message>``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
from typing import List, Optional

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

DEFAULT_SOCKET = os.environ.get("CLOUDSCHED_SOCKET", "/tmp/cloudsched.sock")


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str, details: Optional[List[str]] = None):
        super().__init__(message)
        self.code = code
        self.kind = kind
        self.message = message
        self.details = details or []


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, "UsageError", message, [self.format_usage().rstrip()])


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cloudsched", description="VM resource manager for batch jobs on IaaS clouds.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    r = sub.add_parser("run", help="start the scheduler daemon")
    r.add_argument("-c", "--config", required=True, help="general configuration file")
    r.add_argument("-r", "--resources", required=True, help="cloud resources configuration file")
    r.add_argument("--fresh", action="store_true", help="ignore an existing persisted state")

    s = sub.add_parser("submit", help="submit jobs to a running daemon")
    s.add_argument("-f", "--file", required=True, help="submit description file")
    s.add_argument("-u", "--user", required=True)
    s.add_argument("--duration", default="1h", help="simulated run time of each job (default 1h)")
    s.add_argument("--socket", default=DEFAULT_SOCKET)

    st = sub.add_parser("status", help="show VMs and per-user counts")
    st.add_argument("--socket", default=DEFAULT_SOCKET)
    st.add_argument("--snapshot", help="read a persisted state file instead of a daemon")
    st.add_argument("--json", action="store_true", help="print the raw report")

    sd = sub.add_parser("shutdown", help="stop a running daemon")
    mode = sd.add_mutually_exclusive_group(required=True)
    mode.add_argument("--persist", action="store_true", help="save state and leave VMs running")
    mode.add_argument("--kill-all", action="store_true", help="shut down every VM")
    sd.add_argument("--socket", default=DEFAULT_SOCKET)

    sim = sub.add_parser("simulate", help="run a scenario on the virtual clock")
    sim.add_argument("-s", "--scenario", required=True)
    sim.add_argument("-o", "--outdir", required=True)
    return p


# -- commands ----------------------------------------------------------------

def cmd_run(args) -> int:
    from .config import ConfigError, load_clouds, load_general
    from .daemon import Daemon, DaemonError

    try:
        general = load_general(args.config)
        clouds = load_clouds(args.resources)
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, "ConfigError", str(exc)) from None
    logging.getLogger().setLevel(general.log_level if not args.verbose else logging.DEBUG)
    try:
        daemon = Daemon(general, clouds, clouds_path=args.resources, restore_state=not args.fresh)
        daemon.start()
    except (DaemonError, OSError, ValueError) as exc:
        raise CliError(EXIT_RUNTIME, type(exc).__name__, str(exc)) from None

    def on_hup(signum, frame):
        try:
            daemon.reload()
        except Exception as exc:
            logging.getLogger(__name__).error("reload failed: %s", exc)

    def on_term(signum, frame):
        mode = "persist" if general.scheduler.persist_on_shutdown else "kill-all"
        daemon.shutdown({"mode": mode})
        daemon.stop()

    signal.signal(signal.SIGHUP, on_hup)
    signal.signal(signal.SIGTERM, on_term)
    signal.signal(signal.SIGINT, on_term)
    print(f"cloudsched running, socket {general.socket}", flush=True)
    daemon.wait()
    daemon.stop()
    rep = daemon.exit_report
    if rep and not rep.get("ok", True):
        raise CliError(EXIT_RUNTIME, rep.get("error", "RuntimeError"), rep.get("message", ""),
                       [f"{f['vm']}: {f['error']}" for f in rep.get("failures", [])])
    return EXIT_OK


def _call(socket_path: str, payload: dict) -> dict:
    from .daemon import DaemonError, request

    try:
        reply = request(socket_path, payload)
    except (OSError, DaemonError) as exc:
        raise CliError(EXIT_RUNTIME, "Unreachable",
                       f"no daemon at {socket_path}: {getattr(exc, 'strerror', None) or exc}") from None
    return reply


def _reply_error(reply: dict) -> CliError:
    kind = reply.get("error", "RuntimeError")
    code = EXIT_CONFIG if kind == "ConfigError" else EXIT_RUNTIME
    return CliError(code, kind, reply.get("message", ""))


def cmd_submit(args) -> int:
    from .model import parse_duration
    from .submit import SubmitError, descriptor_to_jobs, parse_submit

    try:
        with open(args.file) as fh:
            text = fh.read()
    except OSError as exc:
        raise CliError(EXIT_RUNTIME, "FileError", f"{args.file}: {exc.strerror}") from None
    try:
        # fail fast with the parser's own message
        descriptor_to_jobs(parse_submit(text), args.user, 0)
    except SubmitError as exc:
        raise CliError(EXIT_RUNTIME, type(exc).__name__, f"{args.file}: {exc}") from None
    try:
        duration = parse_duration(args.duration)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, "UsageError", f"--duration: {exc}") from None
    reply = _call(args.socket, {"op": "submit", "user": args.user, "text": text,
                                "duration_ms": duration})
    if not reply.get("ok"):
        raise _reply_error(reply)
    for jid in reply["ids"]:
        print(jid)
    return EXIT_OK


def format_status(report: dict) -> str:
    lines = []
    header = ("CLUSTER", "VM", "VMTYPE", "STATE", "OWNER", "AGE_S", "JOB")
    rows = [header] + [
        (v["cluster"], v["name"], v["vmtype"], v["state"] + ("*" if v["draining"] else ""),
         v["owner"], str(v["age_s"]), v["job"] or "-")
        for v in report["vms"]
    ]
    lines.extend(_table(rows))
    lines.append("")
    header = ("USER", "NEW", "SCHEDULED", "HELD", "RUNNING", "VMS")
    rows = [header] + [
        (u, str(c["new"]), str(c["scheduled"]), str(c["held"]), str(c["running"]), str(c["vms"]))
        for u, c in sorted(report["users"].items())
    ]
    lines.extend(_table(rows))
    if any(v["draining"] for v in report["vms"]):
        lines.append("* draining")
    return "\n".join(lines)


def _table(rows) -> List[str]:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]


def cmd_status(args) -> int:
    if args.snapshot:
        from .jobqueue import JobQueue
        from .model import Clock
        from .persistence import SnapshotError, environment_of, restore
        from .scheduler import status_report

        try:
            with open(args.snapshot) as fh:
                text = fh.read()
            state = restore(text)
            env = environment_of(text) or {}
        except OSError as exc:
            raise CliError(EXIT_RUNTIME, "FileError", f"{args.snapshot}: {exc.strerror}") from None
        except SnapshotError as exc:
            raise CliError(EXIT_RUNTIME, type(exc).__name__, str(exc)) from None
        running = {}
        if "queue" in env:
            running = JobQueue.from_dict(env["queue"], Clock(start=state.now)).running()
        report = status_report(state, running, state.now)
    else:
        reply = _call(args.socket, {"op": "status"})
        if not reply.get("ok"):
            raise _reply_error(reply)
        report = reply["status"]
    if args.json:
        print(json.dumps(report, sort_keys=True, indent=1))
    else:
        print(format_status(report))
    return EXIT_OK


def cmd_shutdown(args) -> int:
    mode = "persist" if args.persist else "kill-all"
    reply = _call(args.socket, {"op": "shutdown", "mode": mode})
    for name in reply.get("shutdowns", []):
        print(f"shut down {name}")
    if reply.get("path"):
        print(f"state saved to {reply['path']}")
    if not reply.get("ok"):
        err = _reply_error(reply)
        err.details = [f"{f['vm']}: {f['error']}" for f in reply.get("failures", [])]
        raise err
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .sim import ScenarioError, load_scenario, run_scenario, write_report
    from .submit import SubmitError

    try:
        scenario = load_scenario(args.scenario)
    except FileNotFoundError as exc:
        raise CliError(EXIT_CONFIG, "ScenarioError", f"{args.scenario}: {exc.strerror}") from None
    except (ScenarioError, SubmitError) as exc:
        raise CliError(EXIT_CONFIG, "ScenarioError", f"{args.scenario}: {exc}") from None
    result = run_scenario(scenario)
    paths = write_report(result, args.outdir)
    print(json.dumps(result.metrics.summary(), sort_keys=True, indent=1))
    for kind, path in sorted(paths.items()):
        print(f"{kind}: {path}")
    return EXIT_OK


COMMANDS = {
    "run": cmd_run, "submit": cmd_submit, "status": cmd_status,
    "shutdown": cmd_shutdown, "simulate": cmd_simulate,
}


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(asctime)s %(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc.code} {exc.kind}: {_one_line(exc.message)}", file=sys.stderr)
        for line in exc.details:
            print(line, file=sys.stderr)
        return exc.code
    except SystemExit as exc:  # --help
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
