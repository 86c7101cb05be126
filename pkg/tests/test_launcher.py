import json

import numpy as np
import pytest

from intransit.errors import StudyFailedError
from intransit.launcher import (
    Launcher,
    ParameterSet,
    SimulatedClock,
    generate_parameter_sets,
)


class FakeJob:
    def __init__(self, sim_id, start, duration, code):
        self.sim_id, self.start, self.duration, self.code = sim_id, start, duration, code
        self.killed = False


class FakeScheduler:
    """Jobs finish after ``duration`` simulated seconds; ``plan[sim]`` lists exit codes per attempt."""

    def __init__(self, clock, duration=1.0, plan=None, durations=None):
        self.clock, self.duration = clock, duration
        self.plan = {k: list(v) for k, v in (plan or {}).items()}
        self.durations = {k: list(v) for k, v in (durations or {}).items()}
        self.jobs = []
        self.server = None

    def submit(self, sim_id, params, endpoints):
        code = self.plan[sim_id].pop(0) if self.plan.get(sim_id) else 0
        dur = self.durations[sim_id].pop(0) if self.durations.get(sim_id) else self.duration
        job = FakeJob(sim_id, self.clock.now(), dur, code)
        self.jobs.append(job)
        return job

    def poll(self, job):
        if job.killed:
            return -9
        if self.clock.now() - job.start >= job.duration:
            if job.code == 0 and self.server is not None:
                self.server.sim_finished(job.sim_id)
            return job.code
        return None

    def kill(self, job):
        job.killed = True

    def running_at(self, t):
        return sum(j.start <= t < j.start + j.duration and not j.killed for j in self.jobs)


class FakeServer:
    """Heartbeats every ``period`` unless silenced; exits 0 once every sim has reported."""

    def __init__(self, clock, n_sims, period=1.0):
        self.clock, self.n_sims, self.period = clock, n_sims, period
        self.starts = []
        self.done = set()
        self.checkpointed = set()
        self.silent_from = None
        self.jitter = None
        self.exit_code = None

    def start(self, restore):
        self.starts.append((self.clock.now(), restore))
        self.silent_from = None
        self.exit_code = None
        if not restore:
            self.done, self.checkpointed = set(), set()
        else:
            self.done = set(self.checkpointed)
        return [("127.0.0.1", 1)]

    def sim_finished(self, sim_id):
        self.done.add(sim_id)

    def checkpoint(self):
        self.checkpointed = set(self.done)

    def poll(self):
        if self.exit_code is None and len(self.done) == self.n_sims and self.silent_from is None:
            self.exit_code = 0
        return self.exit_code

    def kill(self):
        self.exit_code = -9

    def last_heartbeat(self):
        now = self.clock.now()
        if self.silent_from is not None and now >= self.silent_from:
            now = self.silent_from
        last = self.starts[-1][0] + self.period * int((now - self.starts[-1][0]) / self.period)
        if self.jitter is not None:
            last -= self.jitter(last)
        return last

    def completed_sims(self):
        return set(self.checkpointed)


def make(n=10, **kw):
    clock = SimulatedClock()
    sched = FakeScheduler(clock, **{k: kw.pop(k) for k in ("duration", "plan", "durations") if k in kw})
    server = FakeServer(clock, n, **{k: kw.pop(k) for k in ("period",) if k in kw})
    sched.server = server
    kw.setdefault("poll_period", 0.1)
    kw.setdefault("heartbeat_timeout", 5.0)
    launcher = Launcher(generate_parameter_sets(n, 1), sched, server, clock, **kw)
    return launcher, sched, server, clock


def kinds(launcher, kind):
    return [e for e in launcher.events if e.kind == kind]


# -- parameter sets ---------------------------------------------------------------------


def test_parameter_sets_in_bounds_and_deterministic():
    a = generate_parameter_sets(3000, 9)
    assert all(p.in_bounds() for p in a)
    assert a == generate_parameter_sets(3000, 9)
    assert a != generate_parameter_sets(3000, 10)


def test_parameter_means_match_uniform():
    x = np.array([p.as_tuple() for p in generate_parameter_sets(10_000, 3)])
    for j, (lo, hi) in enumerate(ParameterSet.bounds()):
        sigma = (hi - lo) / np.sqrt(12) / np.sqrt(len(x))
        assert abs(x[:, j].mean() - (lo + hi) / 2) <= 3 * sigma


def test_parameter_text_round_trip():
    p = generate_parameter_sets(1, 4)[0]
    assert ParameterSet.parse(p.format()) == p


# -- concurrency and retries ------------------------------------------------------------


def test_cap_never_exceeded():
    launcher, sched, _, _ = make(20, max_concurrent=4, durations={i: [0.5 + 0.1 * i] for i in range(20)})
    report = launcher.run()
    assert max(n for _, n in report.timeline) == 4 == report.max_running
    starts = sorted({j.start for j in sched.jobs})
    assert all(sched.running_at(t) <= 4 for t in starts)
    assert launcher.n_done() == 20


def test_crashing_sim_retried_until_done():
    launcher, sched, _, _ = make(5, plan={2: [70, 70]}, retry_budget=3)
    report = launcher.run()
    assert report.retries == {2: 2}
    assert launcher.n_done() == 5
    assert len(kinds(launcher, "SimFailed")) == 2


def test_retry_budget_exhausted_fails_study():
    launcher, _, _, _ = make(5, plan={2: [70] * 10}, retry_budget=2)
    with pytest.raises(StudyFailedError):
        launcher.run()


def test_failure_seen_within_one_poll_period():
    launcher, sched, _, _ = make(3, plan={1: [70]}, duration=1.0, poll_period=0.1)
    launcher.run()
    fail = kinds(launcher, "SimFailed")[0]
    job = next(j for j in sched.jobs if j.sim_id == 1)
    assert 0 <= fail.time - (job.start + job.duration) <= 0.1 + 1e-9


def test_straggler_killed_and_resubmitted():
    launcher, sched, _, _ = make(3, durations={0: [100.0, 1.0]}, sim_wall_limit=10.0)
    report = launcher.run()
    assert report.retries == {0: 1}
    assert sched.jobs[0].killed
    assert "wall limit" in kinds(launcher, "SimFailed")[0].detail
    assert launcher.n_done() == 3


def test_cap_schedule_respected():
    launcher, sched, _, _ = make(12, max_concurrent=4, cap_schedule=[(4, 2)], duration=1.0)
    report = launcher.run()
    # once four sims are done the cap drops to two
    t_drop = next(e.time for e in launcher.events if e.kind == "SimDone" and
                  sum(x.kind == "SimDone" for x in launcher.events[: launcher.events.index(e) + 1]) == 4)
    later = [n for t, n in report.timeline if t > t_drop]
    assert later and max(later) <= 2
    assert report.max_running == 4


def test_state_file_written(tmp_path):
    path = tmp_path / "state.json"
    launcher, _, _, _ = make(3, state_file=path)
    launcher.run()
    state = json.loads(path.read_text())
    assert {v["status"] for v in state["sims"].values()} == {"done"}


# -- server failure -----------------------------------------------------------------------


def test_heartbeat_silence_restarts_server_and_resubmits():
    launcher, sched, server, clock = make(8, max_concurrent=2, duration=2.0, heartbeat_timeout=4.0)
    launcher._t0 = clock.now()
    launcher._start_server(restore=False)
    while launcher.n_done() < 4:
        launcher.step()
        clock.advance(0.1)
    server.checkpoint()
    checkpointed = set(server.checkpointed)
    # two more finish after the checkpoint, then the server goes silent
    while launcher.n_done() < 6:
        launcher.step()
        clock.advance(0.1)
    silent_at = server.silent_from = clock.now()
    while not kinds(launcher, "ServerFailed"):
        launcher.step()
        clock.advance(0.1)
    suspect = kinds(launcher, "ServerSuspect")
    failed = kinds(launcher, "ServerFailed")[0]
    assert suspect and suspect[0].time < failed.time
    assert failed.time - (silent_at - launcher._t0) <= 4.0 + 0.2
    assert server.starts[-1][1] is True
    resubmitted = {e.sim_id for e in kinds(launcher, "SimResubmit")}
    # every sim done but missing from the checkpoint runs again, including those finished while silent
    assert resubmitted == set(range(8)) - checkpointed - {e.sim_id for e in kinds(launcher, "SimKilled")}
    while not launcher.step():
        clock.advance(0.1)
    assert launcher.n_done() == 8 and server.done == set(range(8))


def test_jittered_heartbeats_are_not_a_failure():
    launcher, _, server, _ = make(10, duration=3.0, period=1.0, heartbeat_timeout=5.0)
    rng = np.random.default_rng(0)
    server.jitter = lambda t: rng.uniform(0, 1.5)
    report = launcher.run()
    assert report.server_restarts == 0
    assert not kinds(launcher, "ServerFailed")


def test_server_exit_triggers_restart():
    launcher, sched, server, clock = make(4, duration=2.0)
    launcher._t0 = clock.now()
    launcher._start_server(restore=False)
    for _ in range(5):
        launcher.step()
        clock.advance(0.1)
    server.exit_code = 1
    launcher.step()
    assert "code 1" in kinds(launcher, "ServerFailed")[0].detail
    assert len(kinds(launcher, "SimKilled")) == 4


def test_max_server_restarts_fails_study():
    launcher, _, server, _ = make(4, duration=2.0, heartbeat_timeout=1.0, max_server_restarts=2)
    server.silent_from = 0.0
    original = server.start

    def start_silent(restore):
        eps = original(restore)
        server.silent_from = server.clock.now()
        return eps

    server.start = start_silent
    with pytest.raises(StudyFailedError):
        launcher.run()
    assert len(server.starts) == 3
