"""Long-running scheduler process and its local control socket.

The daemon runs the three scheduler loops (job poller plus VM monitor,
scheduler, cleanup) and a queue driver on the wall clock.  Operators talk
to it over a Unix stream socket with one JSON object per line:

    -> {"op": "submit", "user": "alice", "text": "...", "duration_ms": 3600000}
    <- {"ok": true, "ids": ["1.0"]}
    -> {"op": "status"}
    <- {"ok": true, "status": {...}}
    -> {"op": "shutdown", "mode": "persist"}
    <- {"ok": true, "shutdowns": [...], "failures": []}
    -> {"op": "reload"}
    <- {"ok": true, "clusters": ["uvic", "nrc"]}

Failures come back as ``{"ok": false, "error": "<Kind>", "message": "..."}``.
"""
from __future__ import annotations

import json
import logging
import os
import socket
import socketserver
import threading
from typing import Callable, Dict, List, Optional

from .backends import SimulatedCloud
from .config import CloudEntry, ConfigError, GeneralConfig, load_clouds, make_backend
from .jobqueue import JobQueue, QueueError
from .model import Clock, ResourcePool
from .persistence import SnapshotError, environment_of, restore
from .scheduler import CloudScheduler, SchedulerState, ShutdownMode
from .submit import SubmitError, descriptor_to_jobs, parse_submit

logger = logging.getLogger(__name__)

QUEUE_TICK = 1000  # ms between queue driver passes


class DaemonError(Exception):
    pass


class Daemon:
    def __init__(self, general: GeneralConfig, clouds: List[CloudEntry], clouds_path: str = "",
                 restore_state: bool = True, clock: Optional[Clock] = None):
        self.general = general
        self.clouds_path = clouds_path
        self.clock = clock or Clock(Clock.REAL)
        self.queue = JobQueue(self.clock)
        self.backends: Dict[str, SimulatedCloud] = {
            e.cluster.name: make_backend(e, self.clock, self.queue.advertise) for e in clouds
        }
        config = general.scheduler
        state = None
        path = config.persistence_path
        if restore_state and path and os.path.exists(path):
            state = self._restore(path)
        if state is None:
            state = SchedulerState(resources=ResourcePool([e.cluster.static_copy() for e in clouds]))
        self.scheduler = CloudScheduler(state, config, self.queue, self.backends, self.clock)
        if state.resources.clusters and clouds:
            self.scheduler.reload_resources([e.cluster for e in clouds], self.backends)
        self.stopped = threading.Event()  # loops exit
        self.finished = threading.Event()  # stop() completed
        self._threads: List[threading.Thread] = []
        self._server: Optional[socketserver.BaseServer] = None
        self._queue_ticks = 0
        self.exit_report: Optional[dict] = None

    def _restore(self, path: str) -> SchedulerState:
        with open(path) as fh:
            text = fh.read()
        state = restore(text)
        env = environment_of(text) or {}
        if "queue" in env:
            self.queue = JobQueue.from_dict(env["queue"], self.clock)
            for cloud in self.backends.values():
                cloud.on_advertise = self.queue.advertise
        for name, data in (env.get("clouds") or {}).items():
            if name in self.backends:
                self.backends[name].load_dict(data)
        logger.info("restored %d clusters and %d jobs from %s",
                    len(state.resources.clusters), len(state.jobs), path)
        return state

    # -- loops --------------------------------------------------------------

    def _loop(self, name: str, interval_ms: int, body: Callable[[], None]) -> None:
        def run():
            while not self.stopped.is_set():
                try:
                    body()
                except Exception:  # keep the loop alive; the next pass retries
                    logger.exception("%s loop failed", name)
                if self.stopped.wait(interval_ms / 1000):
                    break
        t = threading.Thread(target=run, name=name, daemon=True)
        self._threads.append(t)
        t.start()

    def _poll(self) -> None:
        self.scheduler.poll_jobs()
        rep = self.scheduler.monitor_vms()
        for name, old, new in rep.vm_events:
            logger.info("%s: %s -> %s", name, old, new)

    def _schedule(self) -> None:
        rep = self.scheduler.schedule()
        with self.scheduler.lock:
            self.scheduler.state.cycle += 1
            self.scheduler.state.now = self.clock.now()
        a = rep.applied
        logger.info("cycle %d: targets=%s boots=%d shutdowns=%d held=%d released=%d",
                    rep.cycle, rep.targets, len(a.booted), len(a.shutdowns),
                    len(a.held), len(a.released))

    def _clean(self) -> None:
        rep = self.scheduler.clean()
        for name, reason, _ in rep.applied.shutdowns:
            logger.info("shut down %s (%s)", name, reason)

    def _drive_queue(self) -> None:
        now = self.clock.now()
        for cloud in list(self.backends.values()):
            cloud.tick(now, self._queue_ticks)
        self._queue_ticks += 1
        self.queue.dispatch_cycle()
        last = getattr(self, "_last_drive", now)
        self.queue.advance_work(max(0, now - last))
        self._last_drive = now

    def start(self) -> None:
        cfg = self.general.scheduler
        self._loop("poller", cfg.poll_interval, self._poll)
        self._loop("scheduler", cfg.schedule_interval, self._schedule)
        self._loop("cleanup", cfg.cleanup_interval, self._clean)
        self._loop("queue", QUEUE_TICK, self._drive_queue)
        self._serve()

    def _serve(self) -> None:
        path = self.general.socket
        if os.path.exists(path):
            if _socket_alive(path):
                raise DaemonError(f"another instance is listening on {path}")
            os.unlink(path)
        daemon = self

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                for raw in self.rfile:
                    reply = daemon.handle_line(raw.decode("utf-8", "replace"))
                    self.wfile.write((json.dumps(reply, sort_keys=True) + "\n").encode())
                    self.wfile.flush()
                    if reply.get("stopping"):
                        threading.Thread(target=daemon.stop, daemon=True).start()
                        return

        class Server(socketserver.ThreadingMixIn, socketserver.UnixStreamServer):
            daemon_threads = True

        self._server = Server(path, Handler)
        t = threading.Thread(target=self._server.serve_forever, name="ipc", daemon=True)
        self._threads.append(t)
        t.start()
        logger.info("listening on %s", path)

    def wait(self, poll: float = 0.5) -> None:
        while not self.finished.wait(poll):
            pass

    def stop(self) -> None:
        if self.finished.is_set():
            return
        self.stopped.set()
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            try:
                os.unlink(self.general.socket)
            except OSError:
                pass
            self._server = None
        for t in self._threads:
            if t is not threading.current_thread():
                t.join(timeout=5)
        self.finished.set()

    # -- requests -----------------------------------------------------------

    def handle_line(self, line: str) -> dict:
        try:
            req = json.loads(line)
        except json.JSONDecodeError as exc:
            return _fail("BadRequest", f"not JSON: {exc.msg}")
        if not isinstance(req, dict):
            return _fail("BadRequest", "request must be an object")
        op = req.get("op")
        handler = {"submit": self.submit, "status": self.status,
                   "shutdown": self.shutdown, "reload": self.reload}.get(op)
        if handler is None:
            return _fail("BadRequest", f"unknown op {op!r}")
        try:
            return handler(req)
        except (SubmitError, QueueError, ConfigError, SnapshotError, ValueError, KeyError) as exc:
            return _fail(type(exc).__name__, str(exc))

    def submit(self, req: dict) -> dict:
        user = req.get("user")
        if not user:
            raise ValueError("submit needs a user")
        desc = parse_submit(req.get("text", ""))
        jobs = descriptor_to_jobs(desc, str(user), self.queue.next_cluster_id())
        duration = int(req.get("duration_ms", 3_600_000))
        ids = self.queue.submit(jobs, [duration] * len(jobs))
        logger.info("submitted %s for %s", ", ".join(ids), user)
        return {"ok": True, "ids": ids}

    def status(self, req: dict) -> dict:
        return {"ok": True, "status": self.scheduler.status()}

    def environment(self) -> dict:
        return {"queue": self.queue.to_dict(),
                "clouds": {n: c.to_dict() for n, c in self.backends.items()}}

    def shutdown(self, req: dict) -> dict:
        mode = ShutdownMode(req.get("mode", ShutdownMode.KILL_ALL.value))
        # stop the loops first so nothing boots behind our back
        self.stopped.set()
        for t in self._threads:
            if t.name != "ipc" and t is not threading.current_thread():
                t.join(timeout=5)
        env = self.environment() if mode is ShutdownMode.PERSIST else None
        rep = self.scheduler.shutdown(mode, environment=env)
        out = {
            "ok": not rep.shutdown_failures,
            "mode": mode.value,
            "shutdowns": [name for name, _, _ in rep.shutdowns],
            "failures": [{"vm": n, "error": e} for n, e in rep.shutdown_failures],
            "stopping": True,
        }
        if mode is ShutdownMode.PERSIST:
            out["path"] = self.general.scheduler.persistence_path
        if rep.shutdown_failures:
            out["error"] = "PartialShutdown"
            out["message"] = f"{len(rep.shutdown_failures)} VMs did not shut down"
        self.exit_report = out
        return out

    def reload(self, req: Optional[dict] = None) -> dict:
        if not self.clouds_path:
            raise ValueError("no cloud config file to reload")
        entries = load_clouds(self.clouds_path)
        for e in entries:
            if e.cluster.name not in self.backends:
                self.backends[e.cluster.name] = make_backend(e, self.clock, self.queue.advertise)
        self.scheduler.reload_resources([e.cluster for e in entries], self.backends)
        names = [e.cluster.name for e in entries]
        logger.info("reloaded clusters: %s", ", ".join(names))
        return {"ok": True, "clusters": names}


def _fail(kind: str, message: str) -> dict:
    return {"ok": False, "error": kind, "message": message}


def _socket_alive(path: str) -> bool:
    s = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    try:
        s.connect(path)
        return True
    except OSError:
        return False
    finally:
        s.close()


def request(path: str, payload: dict, timeout: float = 30.0) -> dict:
    """Send one request to a running daemon and return its reply."""
    s = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    s.settimeout(timeout)
    try:
        s.connect(path)
        s.sendall((json.dumps(payload) + "\n").encode())
        buf = b""
        while not buf.endswith(b"\n"):
            chunk = s.recv(65536)
            if not chunk:
                break
            buf += chunk
    finally:
        s.close()
    if not buf:
        raise DaemonError("daemon closed the connection without replying")
    return json.loads(buf)
