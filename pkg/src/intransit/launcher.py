"""Study orchestration: parameter sampling, job submission and failure recovery.

The launcher owns a single control loop.  It talks to simulations through a
:class:`Scheduler` (one in-repo implementation spawning local processes) and
to the statistics server through a :class:`ServerController`; both are
interfaces so the loop can be driven by fakes under a :class:`SimulatedClock`.
"""
from __future__ import annotations

import enum
import json
import logging
import os
import socket
import subprocess
import sys
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .errors import StudyFailedError
from .protocol import Heartbeat, recv_message

log = logging.getLogger(__name__)

CONCENTRATION_BOUNDS = (0.1, 0.9)
WIDTH_BOUNDS = (0.1, 0.9)
DURATION_BOUNDS = (0.002, 0.1)


@dataclass(frozen=True)
class ParameterSet:
    upper_concentration: float
    lower_concentration: float
    upper_width: float
    lower_width: float
    upper_duration: float
    lower_duration: float

    @staticmethod
    def bounds() -> tuple[tuple[float, float], ...]:
        return (CONCENTRATION_BOUNDS,) * 2 + (WIDTH_BOUNDS,) * 2 + (DURATION_BOUNDS,) * 2

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(asdict(self).values())

    def in_bounds(self) -> bool:
        return all(lo <= v <= hi for v, (lo, hi) in zip(self.as_tuple(), self.bounds()))

    def format(self) -> str:
        return ",".join(repr(v) for v in self.as_tuple())

    @classmethod
    def parse(cls, text: str) -> "ParameterSet":
        values = [float(v) for v in text.split(",")]
        if len(values) != 6:
            raise ValueError(f"expected 6 parameter values, got {len(values)}")
        return cls(*values)


def generate_parameter_sets(n: int, seed: int) -> list[ParameterSet]:
    """``n`` independent draws from the uniform priors, reproducible from ``seed``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = np.array(ParameterSet.bounds()).T
    draws = rng.uniform(lo, hi, size=(n, 6))
    return [ParameterSet(*map(float, row)) for row in draws]


# -- clocks -------------------------------------------------------------------------


class Clock(Protocol):
    def now(self) -> float: ...

    def sleep(self, seconds: float) -> None: ...


class MonotonicClock:
    def now(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        time.sleep(seconds)


class SimulatedClock:
    """Virtual time that only moves when someone sleeps or calls :meth:`advance`."""

    def __init__(self, start: float = 0.0) -> None:
        self.t = start

    def now(self) -> float:
        return self.t

    def sleep(self, seconds: float) -> None:
        self.advance(seconds)

    def advance(self, seconds: float) -> None:
        self.t += max(seconds, 0.0)


# -- job backends ----------------------------------------------------------------------


class Scheduler(Protocol):
    """Minimal batch-scheduler surface used by the launcher."""

    def submit(self, sim_id: int, params: ParameterSet, endpoints: Sequence[tuple[str, int]]) -> object: ...

    def poll(self, job: object) -> int | None: ...

    def kill(self, job: object) -> None: ...


class ServerController(Protocol):
    def start(self, restore: bool) -> list[tuple[str, int]]: ...

    def poll(self) -> int | None: ...

    def kill(self) -> None: ...

    def last_heartbeat(self) -> float | None: ...

    def completed_sims(self) -> set[int]: ...


def _python() -> list[str]:
    return [sys.executable]


class LocalProcessScheduler:
    """Runs each simulation as ``python -m intransit.sim_dye`` in its own process."""

    def __init__(self, config_path: str | os.PathLike, log_dir: str | os.PathLike | None = None,
                 extra_args: Callable[[int, int], list[str]] | None = None) -> None:
        self.config_path = str(config_path)
        self.log_dir = Path(log_dir) if log_dir else None
        self.extra_args = extra_args
        self._attempts: dict[int, int] = {}

    def submit(self, sim_id: int, params: ParameterSet, endpoints: Sequence[tuple[str, int]]) -> subprocess.Popen:
        attempt = self._attempts.get(sim_id, 0)
        self._attempts[sim_id] = attempt + 1
        cmd = _python() + [
            "-m", "intransit.sim_dye",
            "--config", self.config_path,
            "--sim-id", str(sim_id),
            "--params", params.format(),
            "--endpoints", ",".join(f"{h}:{p}" for h, p in endpoints),
        ]
        if self.extra_args:
            cmd += self.extra_args(sim_id, attempt)
        out = subprocess.DEVNULL
        if self.log_dir:
            self.log_dir.mkdir(parents=True, exist_ok=True)
            out = open(self.log_dir / f"sim{sim_id}.{attempt}.log", "wb")
        try:
            # own session: killing the launcher must not take running simulations with it
            return subprocess.Popen(cmd, stdout=out, stderr=subprocess.STDOUT, start_new_session=True)
        finally:
            if out is not subprocess.DEVNULL:
                out.close()

    def poll(self, job: subprocess.Popen) -> int | None:
        return job.poll()

    def kill(self, job: subprocess.Popen) -> None:
        if job.poll() is None:
            job.kill()
        job.wait()


class HeartbeatListener:
    """Accepts server connections and records the arrival time of each Heartbeat."""

    def __init__(self, clock: Clock, host: str = "127.0.0.1") -> None:
        self.clock = clock
        self._sock = socket.create_server((host, 0))
        self.endpoint = self._sock.getsockname()[:2]
        self.last: float | None = None
        self.count = 0
        self._closed = False
        threading.Thread(target=self._accept, daemon=True).start()

    def _accept(self) -> None:
        while not self._closed:
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            threading.Thread(target=self._read, args=(conn,), daemon=True).start()

    def _read(self, conn: socket.socket) -> None:
        with conn:
            while True:
                try:
                    msg = recv_message(conn)
                except Exception:
                    return
                if msg is None:
                    return
                if isinstance(msg, Heartbeat):
                    self.last = self.clock.now()
                    self.count += 1

    def close(self) -> None:
        self._closed = True
        self._sock.close()


class LocalServerController:
    """Runs the statistics server as ``python -m intransit.server``."""

    def __init__(self, config_path: str | os.PathLike, output_dir: str | os.PathLike, clock: Clock,
                 start_timeout: float = 30.0) -> None:
        self.config_path = str(config_path)
        self.output_dir = Path(output_dir)
        self.clock = clock
        self.start_timeout = start_timeout
        self.listener = HeartbeatListener(clock)
        self.proc: subprocess.Popen | None = None
        self.generation = 0

    def start(self, restore: bool) -> list[tuple[str, int]]:
        from .server import ENDPOINTS_FILE

        ep_file = self.output_dir / ENDPOINTS_FILE
        ep_file.unlink(missing_ok=True)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        host, port = self.listener.endpoint
        cmd = _python() + ["-m", "intransit.server", "--config", self.config_path, "--launcher", f"{host}:{port}"]
        if restore:
            cmd.append("--restore")
        out = open(self.output_dir / f"server.{self.generation}.log", "wb")
        self.generation += 1
        with out:
            self.proc = subprocess.Popen(cmd, stdout=out, stderr=subprocess.STDOUT, start_new_session=True)
        deadline = time.monotonic() + self.start_timeout
        while not ep_file.exists():
            if self.proc.poll() is not None:
                raise StudyFailedError(f"server exited with code {self.proc.returncode} during startup")
            if time.monotonic() > deadline:
                self.kill()
                raise StudyFailedError("server did not publish its endpoints in time")
            time.sleep(0.02)
        self.listener.last = self.clock.now()
        return [tuple(e) for e in json.loads(ep_file.read_text())["endpoints"]]

    def poll(self) -> int | None:
        return None if self.proc is None else self.proc.poll()

    def kill(self) -> None:
        if self.proc is not None and self.proc.poll() is None:
            self.proc.kill()
            self.proc.wait()

    def wait(self, timeout: float) -> int | None:
        try:
            return self.proc.wait(timeout) if self.proc else None
        except subprocess.TimeoutExpired:
            return None

    def last_heartbeat(self) -> float | None:
        return self.listener.last

    def completed_sims(self) -> set[int]:
        from .config import StudyConfig
        from .server import completed_simulations

        return completed_simulations(StudyConfig.load(self.config_path))

    def close(self) -> None:
        self.listener.close()


# -- study state -----------------------------------------------------------------------


class SimStatus(enum.Enum):
    PENDING = "pending"
    RUNNING = "running"
    DONE = "done"
    FAILED = "failed"


@dataclass
class SimRecord:
    sim_id: int
    params: ParameterSet
    status: SimStatus = SimStatus.PENDING
    failures: int = 0
    started: float | None = None
    job: object = field(default=None, repr=False)


@dataclass(frozen=True)
class Event:
    time: float
    kind: str
    sim_id: int | None = None
    detail: str = ""


@dataclass
class StudyReport:
    n_sims: int
    wall_time: float
    timeline: list[tuple[float, int]]
    retries: dict[int, int]
    server_restarts: int
    max_running: int
    events: list[Event]

    def to_json(self) -> str:
        d = asdict(self)
        d["retries"] = {str(k): v for k, v in self.retries.items()}
        return json.dumps(d, indent=1)


class Launcher:
    """Single control loop keeping at most ``cap`` simulations running."""

    def __init__(
        self,
        params: Sequence[ParameterSet],
        scheduler: Scheduler,
        server: ServerController,
        clock: Clock | None = None,
        *,
        max_concurrent: int = 4,
        retry_budget: int = 3,
        heartbeat_timeout: float = 10.0,
        poll_period: float = 0.05,
        sim_wall_limit: float = 300.0,
        max_server_restarts: int = 3,
        cap_schedule: Sequence[tuple[int, int]] = (),
        completion_grace: float | None = None,
        state_file: str | os.PathLike | None = None,
    ) -> None:
        self.sims = [SimRecord(i, p) for i, p in enumerate(params)]
        self.scheduler = scheduler
        self.server = server
        self.clock = clock or MonotonicClock()
        self.cap = max_concurrent
        self.retry_budget = retry_budget
        self.heartbeat_timeout = heartbeat_timeout
        self.poll_period = poll_period
        self.sim_wall_limit = sim_wall_limit
        self.max_server_restarts = max_server_restarts
        self.cap_schedule = sorted(cap_schedule)
        self.completion_grace = heartbeat_timeout if completion_grace is None else completion_grace
        self.state_file = Path(state_file) if state_file else None
        self.events: list[Event] = []
        self.timeline: list[tuple[float, int]] = []
        self.server_restarts = 0
        self.server_done = False
        self.endpoints: list[tuple[str, int]] = []
        self._suspect = False
        self._t0 = 0.0
        self._all_done_at: float | None = None

    # -- bookkeeping ----------------------------------------------------------------

    def _emit(self, kind: str, sim_id: int | None = None, detail: str = "") -> Event:
        ev = Event(self.clock.now() - self._t0, kind, sim_id, detail)
        self.events.append(ev)
        log.info("%s sim=%s %s", kind, sim_id, detail)
        return ev

    def running(self) -> list[SimRecord]:
        return [s for s in self.sims if s.status is SimStatus.RUNNING]

    def n_done(self) -> int:
        return sum(s.status is SimStatus.DONE for s in self.sims)

    def _record_timeline(self) -> None:
        n = len(self.running())
        if not self.timeline or self.timeline[-1][1] != n:
            self.timeline.append((self.clock.now() - self._t0, n))

    def current_cap(self) -> int:
        cap = self.cap
        done = self.n_done()
        for threshold, c in self.cap_schedule:
            if done >= threshold:
                cap = c
        return cap

    def write_state(self) -> None:
        if self.state_file is None:
            return
        state = {
            "time": self.clock.now() - self._t0,
            "pid": os.getpid(),
            "server_restarts": self.server_restarts,
            "sims": {s.sim_id: {"status": s.status.value, "failures": s.failures} for s in self.sims},
        }
        tmp = self.state_file.with_suffix(".tmp")
        tmp.write_text(json.dumps(state))
        os.replace(tmp, self.state_file)

    # -- loop steps -----------------------------------------------------------------

    def _fail_sim(self, s: SimRecord, reason: str) -> None:
        s.failures += 1
        s.job = None
        self._emit("SimFailed", s.sim_id, reason)
        if s.failures > self.retry_budget:
            s.status = SimStatus.FAILED
            raise StudyFailedError(f"simulation {s.sim_id} failed {s.failures} times; last: {reason}")
        s.status = SimStatus.PENDING

    def _check_sims(self, now: float) -> None:
        for s in self.running():
            code = self.scheduler.poll(s.job)
            if code == 0:
                s.status, s.job = SimStatus.DONE, None
                self._emit("SimDone", s.sim_id)
            elif code is not None:
                self._fail_sim(s, f"exit code {code}")
            elif now - s.started > self.sim_wall_limit:
                self.scheduler.kill(s.job)
                self._fail_sim(s, f"wall limit {self.sim_wall_limit:g}s exceeded")

    def _submit_pending(self, now: float) -> None:
        cap = self.current_cap()
        free = cap - len(self.running())
        for s in self.sims:
            if free <= 0:
                break
            if s.status is SimStatus.PENDING:
                s.job = self.scheduler.submit(s.sim_id, s.params, self.endpoints)
                s.status, s.started = SimStatus.RUNNING, now
                self._emit("SimStarted", s.sim_id)
                free -= 1

    def _server_failure(self) -> str | None:
        """Diagnostic string if the server must be considered dead."""
        code = self.server.poll()
        if code == 0:
            if not self.server_done:
                self.server_done = True
                self._emit("ServerFinished")
            return None
        if code is not None:
            return f"server exited with code {code}"
        now = self.clock.now()
        last = self.server.last_heartbeat()
        silence = now - (last if last is not None else self._server_started)
        if silence > self.heartbeat_timeout:
            return f"no heartbeat for {silence:.2f}s"
        if silence > self.heartbeat_timeout / 2:
            if not self._suspect:
                self._suspect = True
                self._emit("ServerSuspect", detail=f"silent for {silence:.2f}s")
        else:
            self._suspect = False
        if self._all_done_at is not None and now - self._all_done_at > self.completion_grace:
            return "all simulations finished but the server did not complete"
        return None

    def _start_server(self, restore: bool) -> None:
        self.endpoints = list(self.server.start(restore))
        self._server_started = self.clock.now()
        self._suspect = False
        self.server_done = False

    def _restart_server(self, reason: str) -> None:
        self._emit("ServerFailed", detail=reason)
        self.server_restarts += 1
        if self.server_restarts > self.max_server_restarts:
            raise StudyFailedError(f"server failed {self.server_restarts} times; last: {reason}")
        for s in self.running():
            self.scheduler.kill(s.job)
            s.status, s.job = SimStatus.PENDING, None
            self._emit("SimKilled", s.sim_id, "server restart")
        self.server.kill()
        self._start_server(restore=True)
        complete = self.server.completed_sims()
        for s in self.sims:
            if s.sim_id in complete:
                s.status = SimStatus.DONE
            elif s.status is SimStatus.DONE:
                s.status = SimStatus.PENDING
                self._emit("SimResubmit", s.sim_id, "missing from checkpoint")
        self._all_done_at = None
        self._emit("ServerRestarted", detail=f"restart {self.server_restarts}, {len(complete)} sims in checkpoint")

    def step(self) -> bool:
        """One monitor iteration; returns True once the study is complete."""
        now = self.clock.now()
        reason = self._server_failure()
        if reason is not None:
            self._restart_server(reason)
            now = self.clock.now()
        self._check_sims(now)
        if not self.server_done:
            self._submit_pending(now)
        self._record_timeline()
        all_done = all(s.status is SimStatus.DONE for s in self.sims)
        if all_done and self._all_done_at is None:
            self._all_done_at = now
        return all_done and self.server_done

    def run(self) -> StudyReport:
        self._t0 = self.clock.now()
        self._start_server(restore=False)
        self._emit("StudyStarted", detail=f"{len(self.sims)} sims, cap {self.cap}")
        try:
            while not self.step():
                self.write_state()
                self.clock.sleep(self.poll_period)
        except BaseException:
            for s in self.running():
                self.scheduler.kill(s.job)
            self.server.kill()
            self.write_state()
            raise
        self.write_state()
        self._emit("StudyFinished")
        return StudyReport(
            n_sims=len(self.sims),
            wall_time=self.clock.now() - self._t0,
            timeline=self.timeline,
            retries={s.sim_id: s.failures for s in self.sims if s.failures},
            server_restarts=self.server_restarts,
            max_running=max((n for _, n in self.timeline), default=0),
            events=self.events,
        )


def launch_study(config_path: str | os.PathLike, *, scheduler: Scheduler | None = None,
                 overrides: dict | None = None) -> StudyReport:
    """Run a whole study described by a config file with local processes."""
    from .config import StudyConfig

    cfg = StudyConfig.load(config_path, **(overrides or {}))
    out = cfg.output_path
    out.mkdir(parents=True, exist_ok=True)
    # children read the effective config, overrides included
    effective = cfg.save(out / "study.cfg")
    clock = MonotonicClock()
    server = LocalServerController(effective, out, clock)
    launcher = Launcher(
        generate_parameter_sets(cfg.n_sims, cfg.seed),
        scheduler or LocalProcessScheduler(effective, out / "logs"),
        server,
        clock,
        max_concurrent=cfg.max_concurrent,
        retry_budget=cfg.retry_budget,
        heartbeat_timeout=cfg.heartbeat_timeout,
        poll_period=cfg.poll_period,
        sim_wall_limit=cfg.sim_wall_limit,
        max_server_restarts=cfg.max_server_restarts,
        cap_schedule=cfg.cap_schedule,
        completion_grace=cfg.idle_timeout + cfg.heartbeat_timeout,
        state_file=out / "launcher_state.json",
    )
    try:
        report = launcher.run()
        server.wait(cfg.heartbeat_timeout)
    finally:
        server.close()
    (out / "report.json").write_text(report.to_json())
    return report

