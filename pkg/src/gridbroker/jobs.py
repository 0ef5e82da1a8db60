"""Computing model: job submission, CE pull agents, batch queues, validation."""

from __future__ import annotations

import fnmatch
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .broker import Assignment, Broker, NoMatch
from .catalogue import Catalogue, UnknownLFN, site_of
from .descriptor import (
    TRUE, Descriptor, Expr, conjoin, disjoin, lit, member_of, parse_descriptor,
)
from .store import JOB, USER_PRIORITY, Status, Task, TaskStore

log = logging.getLogger(__name__)

S = Status


class JobError(Exception):
    code = "JOB_ERROR"


class MissingExecutable(JobError):
    code = "MISSING_EXECUTABLE"


class BrokerUnreachable(Exception):
    """The central broker could not be contacted; the agent retries."""


_JOB_KEYS = {"executable", "arguments", "requirements", "inputdata", "outputdata",
             "packages", "validate", "priority"}


@dataclass
class JobSpec:
    executable: str
    arguments: list[str] = field(default_factory=list)
    requirements: Expr = TRUE
    input_data: list[str] = field(default_factory=list)
    output_data: list[str] = field(default_factory=list)
    packages: list[str] = field(default_factory=list)
    validate: bool = False
    extra: list[tuple[str, Expr]] = field(default_factory=list)  # other user attributes, kept verbatim

    def __post_init__(self):
        if not self.executable:
            raise MissingExecutable("job spec needs an executable")

    @classmethod
    def from_descriptor(cls, d: Descriptor | str) -> "JobSpec":
        """Read the user-facing keys of a job descriptor."""
        if isinstance(d, str):
            d = parse_descriptor(d)
        exe = d.value("Executable")
        if type(exe) is not str or not exe:
            raise MissingExecutable("job descriptor lacks Executable")

        def strings(name):
            v = d.value(name, default=())
            if type(v) is str:
                return [v]
            return [x for x in v if type(x) is str] if type(v) is tuple else []

        extra = [(k, d[k]) for k in d if k.lower() not in _JOB_KEYS]
        return cls(exe, strings("Arguments"), d["Requirements"] if "Requirements" in d else TRUE,
                   strings("InputData"), strings("OutputData"), strings("Packages"),
                   d.value("Validate") is True, extra)


def derive_input_requirements(input_lfns: Iterable[str], catalogue: Catalogue) -> Expr:
    """Conjunction over LFNs of "some replica SE is close to the CE"."""
    terms = []
    for lfn in input_lfns:
        entry = catalogue.entry(lfn)
        terms.append(disjoin(member_of("CloseSE", se) for se in entry.ses))
    return conjoin(terms)


def package_requirements(packages: Iterable[str]) -> list[Expr]:
    return [member_of("Packages", p) for p in packages]


def compose_requirements(spec: JobSpec, input_req: Expr) -> Expr:
    parts = [] if spec.requirements == TRUE else [spec.requirements]
    parts += package_requirements(spec.packages)
    if input_req != TRUE:
        parts.append(input_req)
    return conjoin(parts)


def job_descriptor(spec: JobSpec, requirements: Expr) -> Descriptor:
    attrs = [("Executable", lit(spec.executable))]
    if spec.arguments:
        attrs.append(("Arguments", lit(spec.arguments)))
    if spec.input_data:
        attrs.append(("InputData", lit(spec.input_data)))
    if spec.output_data:
        attrs.append(("OutputData", lit(spec.output_data)))
    if spec.packages:
        attrs.append(("Packages", lit(spec.packages)))
    if spec.validate:
        attrs.append(("Validate", lit(True)))
    attrs.extend(spec.extra)
    attrs.append(("Requirements", requirements))
    return Descriptor(attrs)


class JobManager:
    """Fills in submitted jobs and inserts them into the job store."""

    def __init__(self, store: TaskStore, catalogue: Catalogue):
        if store.kind != JOB:
            raise ValueError("JobManager needs a job store")
        self.store = store
        self.catalogue = catalogue

    def submit_job(self, user_spec: JobSpec | Descriptor | str, priority: int | None = None,
                   at: int | None = None) -> Task:
        if not isinstance(user_spec, JobSpec):
            d = parse_descriptor(user_spec) if isinstance(user_spec, str) else user_spec
            user_spec = JobSpec.from_descriptor(d)
            if priority is None:
                p = d.value("Priority")
                priority = p if type(p) is int else None
        spec = user_spec
        for lfn in spec.input_data:
            if lfn not in self.catalogue:
                raise UnknownLFN(lfn)
        input_req = derive_input_requirements(spec.input_data, self.catalogue)
        versions = {lfn: self.catalogue.entry(lfn).version for lfn in spec.input_data}
        desc = job_descriptor(spec, compose_requirements(spec, input_req))
        task = self.store.insert_task(desc, priority=USER_PRIORITY if priority is None else priority,
                                      at=at, spec=spec)
        task.meta["input_req"] = input_req
        task.meta["input_versions"] = versions
        return task


# -- resources ----------------------------------------------------------------

@dataclass
class Workload:
    """What a simulated job does once it runs."""
    duration: int = 1000
    exit_code: int = 0
    produced: list[str] | None = None  # None: every declared output
    partial_output: bytes = b""


@dataclass
class ProcessMonitorHandle:
    job_id: int
    ce_name: str
    status: Status = S.QUEUED
    output: bytearray = field(default_factory=bytearray)
    alive: bool = True

    def partial_output(self) -> bytes:
        if not self.alive:
            raise JobError("process monitor for job %d is gone" % self.job_id)
        return bytes(self.output)


class BatchQueue:
    """FIFO batch queue with a fixed number of execution slots."""

    def __init__(self, slots=1, start_latency=0):
        if slots < 1:
            raise ValueError("a batch queue needs at least one slot")
        self.slots = slots
        self.start_latency = start_latency
        self.pending: deque[int] = deque()
        self.running: set[int] = set()

    def submit(self, job_id):
        self.pending.append(job_id)

    @property
    def load(self):
        return len(self.pending) + len(self.running)

    def has_capacity(self):
        return self.load < self.slots

    def free_slots(self):
        return self.slots - len(self.running)

    def pop_startable(self):
        if self.pending and len(self.running) < self.slots:
            job = self.pending.popleft()
            self.running.add(job)
            return job
        return None

    def finish(self, job_id):
        self.running.discard(job_id)

    def drain(self):
        """Forget everything (queue lost); returns (pending, running) ids."""
        pending, running = list(self.pending), sorted(self.running)
        self.pending.clear()
        self.running.clear()
        return pending, running


RUNNING_STATE, STOPPED, CRASHED = "running", "stopped", "crashed"


@dataclass
class ComputingElement:
    name: str
    site: str
    hostname: str = ""
    partitions: list[str] = field(default_factory=list)
    close_se: list[str] = field(default_factory=list)
    packages: list[str] = field(default_factory=list)
    slots: int = 1
    start_latency: int = 0
    poll_interval: int = 30_000
    requirements: Expr | None = None
    state: str = RUNNING_STATE
    queue: BatchQueue = field(init=False)
    monitors: dict[int, ProcessMonitorHandle] = field(default_factory=dict)

    def __post_init__(self):
        self.hostname = self.hostname or "%s.%s" % (self.name, self.site.lower())
        for se in self.close_se:
            if site_of(se) != self.site:
                raise ValueError("CE %s: close SE %s is not at site %s" % (self.name, se, self.site))
        self.queue = BatchQueue(self.slots, self.start_latency)

    def descriptor(self) -> Descriptor:
        attrs = [("Name", lit(self.name)), ("Host", lit(self.hostname)),
                 ("Partitions", lit(self.partitions)), ("CloseSE", lit(self.close_se)),
                 ("Packages", lit(self.packages)), ("Site", lit(self.site))]
        if self.requirements is not None:
            attrs.append(("Requirements", self.requirements))
        return Descriptor(attrs)

    @property
    def active(self):
        return self.state == RUNNING_STATE


class ClusterMonitor:
    """Per-site proxy: the one connection between a site's CEs and the broker."""

    def __init__(self, site: str, broker: Broker | None = None,
                 catalogue: Catalogue | None = None):
        self.site = site
        self.broker = broker
        self.catalogue = catalogue
        self.ces: dict[str, ComputingElement] = {}
        self.reachable = True
        self.calls = 0

    def add_ce(self, ce: ComputingElement):
        if ce.site != self.site:
            raise ValueError("CE %s belongs to %s, not %s" % (ce.name, ce.site, self.site))
        if self.catalogue is not None:
            for se in ce.close_se:
                self.catalogue.storage_element(se)
        self.ces[ce.name] = ce
        return ce

    def request_task(self, ce: ComputingElement, at=None):
        if not self.reachable or self.broker is None:
            raise BrokerUnreachable(self.site)
        self.calls += 1
        return self.broker.request_task(ce.descriptor(), ce.name, self.site, at=at)

    def signal(self, action: str, names: Iterable[str] | None = None) -> list[str]:
        """Start or stop CEs (all of them when ``names`` is None)."""
        if action not in ("start", "stop"):
            raise ValueError("signal must be 'start' or 'stop'")
        targets = list(self.ces) if names is None else list(names)
        changed = []
        for name in targets:
            ce = self.ces[name]
            if ce.state == CRASHED:
                continue
            new = RUNNING_STATE if action == "start" else STOPPED
            if ce.state != new:
                ce.state = new
                changed.append(name)
        return changed


@dataclass(frozen=True)
class Slept:
    retry_after: int
    reason: str = "no-match"


def ce_poll_cycle(ce: ComputingElement, monitor: ClusterMonitor, store: TaskStore,
                  at: int | None = None) -> Assignment | Slept:
    """One pull: ask for a job and put it on the CE's batch queue."""
    try:
        outcome = monitor.request_task(ce, at=at)
    except BrokerUnreachable:
        return Slept(ce.poll_interval, "broker-unreachable")
    if isinstance(outcome, NoMatch):
        return Slept(outcome.retry_after)
    store.transition(outcome.task_id, S.QUEUED, at)
    ce.queue.submit(outcome.task_id)
    ce.monitors[outcome.task_id] = ProcessMonitorHandle(outcome.task_id, ce.name)
    return outcome


def start_job(ce: ComputingElement, store: TaskStore, job_id: int, workload: Workload,
              at: int | None = None) -> ProcessMonitorHandle:
    """QUEUED -> RUNNING; the job's process monitor starts reporting."""
    store.transition(job_id, S.RUNNING, at)
    handle = ce.monitors[job_id]
    handle.status = S.RUNNING
    handle.output[:] = workload.partial_output
    return handle


def finish_job(ce: ComputingElement, store: TaskStore, job_id: int, workload: Workload,
               at: int | None = None, validators: dict | None = None) -> Status:
    """RUNNING -> DONE / FAILED_RUN, then validation when requested."""
    ce.queue.finish(job_id)
    handle = ce.monitors.pop(job_id, None)
    if handle is not None:
        handle.alive = False
    new = S.DONE if workload.exit_code == 0 else S.FAILED_RUN
    task = store.transition(job_id, new, at)
    if new == S.DONE and task.validate:
        return validate_job(store, task, workload, at, validators)
    return new


def fail_queued(ce: ComputingElement, store: TaskStore, at=None) -> list[int]:
    """Batch system lost: pending jobs FAILED_QUEUE, running ones FAILED_RUN."""
    pending, running = ce.queue.drain()
    for jid in pending:
        store.transition(jid, S.FAILED_QUEUE, at)
    for jid in running:
        store.transition(jid, S.FAILED_RUN, at)
    for h in ce.monitors.values():
        h.alive = False
    ce.monitors.clear()
    return pending + running


def run_job(ce: ComputingElement, store: TaskStore, assignment: Assignment,
            workload: Workload, at: int = 0, validators: dict | None = None) -> Status:
    """Run a queued job start to finish on the calling thread."""
    job_id = assignment.task_id
    if job_id not in ce.queue.pending:
        raise JobError("job %d is not queued on %s" % (job_id, ce.name))
    ce.queue.pending.remove(job_id)
    ce.queue.running.add(job_id)
    start_job(ce, store, job_id, workload, at + ce.start_latency)
    return finish_job(ce, store, job_id, workload, at + ce.start_latency + workload.duration,
                      validators)


# -- validation -----------------------------------------------------------------

Validator = Callable[[Task, Workload], bool]


def default_validator(task: Task, workload: Workload) -> bool:
    """Exit code 0 and every declared output pattern produced at least once."""
    if workload.exit_code != 0:
        return False
    spec = task.spec if isinstance(task.spec, JobSpec) else JobSpec.from_descriptor(task.descriptor)
    produced = spec.output_data if workload.produced is None else workload.produced
    return all(any(fnmatch.fnmatchcase(f, pat) for f in produced) for pat in spec.output_data)


def validate_job(store: TaskStore, task: Task, workload: Workload, at=None,
                 validators: dict[str, Validator] | None = None) -> Status:
    if not task.validate or task.status != S.DONE:
        raise JobError("job %d is not awaiting validation" % task.id)
    exe = task.descriptor.value("Executable")
    check = (validators or {}).get(exe, default_validator)
    new = S.VALIDATED if check(task, workload) else S.FAILED
    store.transition(task.id, new, at)
    return new
