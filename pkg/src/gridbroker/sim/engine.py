"""Discrete-event simulation of a multi-site grid driving the real brokers."""

from __future__ import annotations

import heapq
import json
import logging
import random
from dataclasses import dataclass, field
from typing import Any

from ..broker import Assignment, Broker
from ..catalogue import Catalogue, site_of
from ..descriptor import parse_expression, serialize_descriptor
from ..jobs import (
    ClusterMonitor, ComputingElement, JobManager, JobSpec,
    Slept, Workload, ce_poll_cycle, fail_queued, finish_job, start_job,
)
from ..optimizers import JobOptimizer, TransferOptimizer
from ..store import JOB, TRANSFER, Status, TaskStore
from ..transfers import (
    AlreadyReplicated, FileTransferDaemon, SimFileSystem, TransferContext, TransferManager,
    execute_transfer, physical_name, synthetic_content,
)
from .scenario import FaultConfig, JobSubmission, Scenario, ScenarioError

log = logging.getLogger(__name__)

S = Status

# event kinds; lower rank runs first among events at the same instant
SUBMIT, FAULT, RESUME, JOB_START, JOB_END, STEP, POLL_CE, POLL_FTD, OPTIMIZE = range(9)
FOREGROUND = {SUBMIT, FAULT, RESUME, JOB_START, JOB_END, STEP}

PHASE_FAILURE = {S.ASSIGNED: S.FAILED_LOCAL, S.LOCAL_COPYING: S.FAILED_LOCAL,
                 S.TRANSFERRING: S.FAILED_TRANSFER, S.CLEANING: S.FAILED_CLEAN}
FAULT_PHASE = {"transport-failure": "transfer", "stage-failure": "stage",
               "clean-failure": "clean"}


class InvariantViolation(AssertionError):
    def __init__(self, message, event=None, snapshot=None):
        super().__init__(message)
        self.event = event
        self.snapshot = snapshot


class UnknownTarget(ScenarioError):
    pass


@dataclass
class SimTrace:
    """Everything a run produced; ``export()`` is the byte-stable text form."""
    seed: int
    events: list[dict]
    job_journal: str
    transfer_journal: str
    optimizer_log: str
    catalogue_dump: str
    metrics: dict
    # live objects for inspection; not part of the export
    sim: Any = field(default=None, repr=False, compare=False)

    def export(self) -> str:
        parts = ["# seed %d\n" % self.seed,
                 "# job journal\n", self.job_journal,
                 "# transfer journal\n", self.transfer_journal,
                 "# optimizer\n", self.optimizer_log,
                 "# catalogue\n", self.catalogue_dump,
                 "# events\n"]
        parts += [json.dumps(e, sort_keys=True, separators=(",", ":")) + "\n" for e in self.events]
        parts += ["# metrics\n", json.dumps(self.metrics, sort_keys=True, indent=1), "\n"]
        return "".join(parts)

    def assignments(self):
        return [e for e in self.events if e["ev"] == "assign"]


def _time_bucket(ms):
    """Upper bound of the power-of-ten histogram bucket holding ``ms``."""
    b = 1
    while b < ms:
        b *= 10
    return b


class Simulation:
    def __init__(self, scenario: Scenario, seed: int | None = None,
                 extra_faults: list[FaultConfig] | None = None, strict: bool = False,
                 validators: dict | None = None):
        self.sc = scenario
        self.seed = scenario.seed if seed is None else seed
        self.rng = random.Random(self.seed)
        self.strict = strict
        self.validators = validators
        self.now = 0
        self._heap: list = []
        self._seq = 0
        self._foreground = 0
        self.events: list[dict] = []
        clock = lambda: self.now  # noqa: E731
        self.catalogue = Catalogue(clock)
        self.fs = SimFileSystem()
        site_names = [s.name for s in scenario.sites]
        self.jobs = TaskStore(JOB, clock, lambda: site_names)
        self.transfers = TaskStore(TRANSFER, clock, lambda: site_names)
        self.job_broker = Broker(self.jobs, scenario.retry_hint_ms)
        self.transfer_broker = Broker(self.transfers, scenario.retry_hint_ms)
        self.job_manager = JobManager(self.jobs, self.catalogue)
        self.transfer_manager = TransferManager(self.transfers, self.catalogue)
        self.monitors: dict[str, ClusterMonitor] = {}
        self.ces: dict[str, ComputingElement] = {}
        self.ftds: dict[str, FileTransferDaemon] = {}
        for s in scenario.sites:
            for se in s.ses:
                self.catalogue.add_storage_element(se.name, se.capacity, se.mss, se.bandwidth)
        for s in scenario.sites:
            mon = self.monitors[s.name] = ClusterMonitor(s.name, self.job_broker, self.catalogue)
            for c in s.ces:
                req = parse_expression(c.requirements) if c.requirements else None
                ce = ComputingElement(c.name, s.name, partitions=list(c.partitions),
                                      close_se=list(c.close_se), packages=list(c.packages),
                                      slots=c.slots, start_latency=c.start_latency,
                                      poll_interval=c.poll_interval, requirements=req)
                mon.add_ce(ce)
                self.ces[ce.name] = ce
            for f in s.ftds:
                self.ftds[f.name] = FileTransferDaemon(f.name, s.name, f.close_se, f.cache,
                                                       f.poll_interval, stage_latency=f.stage_latency)
        for f in scenario.files:
            data = synthetic_content(f.lfn, f.size, self.seed)
            self.catalogue.register_file(f.lfn, physical_name(f.se, f.lfn), f.se, f.size, at=0)
            self.fs.put(f.se, physical_name(f.se, f.lfn), data)
            for i, se in enumerate(f.mirrors):
                self.catalogue.add_replica(f.lfn, physical_name(se, f.lfn), se, "mirror", at=0)
                self.fs.put(se, physical_name(se, f.lfn), data)
        self.job_optimizer = JobOptimizer(self.jobs, self.catalogue, self._close_ses,
                                          scenario.auto_replicate, self.transfer_manager,
                                          scenario.tag_jobs)
        self.transfer_optimizer = TransferOptimizer(self.transfers, self.catalogue,
                                                    lambda: site_names, scenario.tag_sites,
                                                    scenario.bulk_threshold)
        self.ctx = TransferContext(self.transfers, self.catalogue, self.fs, self.ftds,
                                   fault=self._transfer_fault, clock=clock)
        self.workloads: dict[int, Workload] = {}
        self.names: dict[str, tuple[str, int]] = {}
        self.armed: dict[str, dict[str, int]] = {}
        self.running_on: dict[int, str] = {}
        self.ftd_busy: dict[str, tuple[int, Any]] = {}
        self.waiting_for_slot: set[str] = set()
        self.rejected: list[dict] = []
        self.touched: set[tuple[str, int]] = set()
        self.assign_edges: dict[tuple[str, int], int] = {}
        # quiescence bookkeeping
        self.progress = 0
        self.idle_mark: dict[str, int] = {}
        self.optimizer_mark = -1
        self._event = None
        self._desc_text: dict[int, str] = {}
        self._wire()
        faults = list(scenario.faults) + list(extra_faults or [])
        for i, sub in enumerate(scenario.workload):
            self._push(sub.at, SUBMIT, i)
        for f in faults:
            self.inject_fault(f.kind, f.at, f.target, f.duration)
        for name in sorted(self.ces):
            self._push(self.rng.randrange(self.ces[name].poll_interval), POLL_CE, name)
        for name in sorted(self.ftds):
            self._push(self.rng.randrange(self.ftds[name].poll_interval), POLL_FTD, name)
        if scenario.optimizer_interval_ms > 0:
            self._push(0, OPTIMIZE, None)

    # -- wiring ---------------------------------------------------------------

    def _wire(self):
        for kind, store, broker in ((JOB, self.jobs, self.job_broker),
                                    (TRANSFER, self.transfers, self.transfer_broker)):
            store.listeners.append(self._on_transition(kind))
            store.rewrite_listeners.append(self._on_rewrite(kind))
            broker.listeners.append(self._on_assign(kind))

    def _on_transition(self, kind):
        def fn(task, old, new, ts):
            self.touched.add((kind, task.id))
            self.progress += 1
            if old == "-":
                self._record("insert", kind=kind, task=task.id, priority=task.priority,
                             descriptor=serialize_descriptor(task.descriptor))
            else:
                self._record("transition", kind=kind, task=task.id, old=old, new=str(new))
            if old == "WAITING" and new == S.ASSIGNED:
                key = (kind, task.id)
                self.assign_edges[key] = self.assign_edges.get(key, 0) + 1
                if self.assign_edges[key] > 1:
                    self._violation("%s %d assigned twice" % (kind, task.id))
        return fn

    def _on_rewrite(self, kind):
        def fn(task):
            self.progress += 1
            self._record("rewrite", kind=kind, task=task.id,
                         descriptor=serialize_descriptor(task.descriptor))
        return fn

    def _on_assign(self, kind):
        def fn(a: Assignment, resource_descriptor):
            text = serialize_descriptor(resource_descriptor) if resource_descriptor is not None else ""
            self._record("assign", kind=kind, task=a.task_id, resource=a.resource_id,
                         site=a.resource_site, resource_descriptor=text)
        return fn

    def _close_ses(self):
        return [se for name in sorted(self.ces) if self.ces[name].active
                for se in self.ces[name].close_se]

    def _transfer_fault(self, task, phase):
        name = task.meta.get("name")
        armed = self.armed.get(name, {})
        return phase in armed and armed[phase] <= self.now

    # -- event queue -------------------------------------------------------------

    def _push(self, at, kind, payload):
        self._seq += 1
        if kind in FOREGROUND:
            self._foreground += 1
        heapq.heappush(self._heap, (at, kind, self._seq, payload))

    def _record(self, ev, **fields):
        fields["ev"] = ev
        fields["t"] = self.now
        self.events.append(fields)

    def _violation(self, message):
        snap = {"time": self.now, "event": self._event,
                "jobs": self.jobs.status_counts(), "transfers": self.transfers.status_counts()}
        raise InvariantViolation("%s (at t=%d, event %r)" % (message, self.now, self._event),
                                 self._event, snap)

    def inject_fault(self, kind, at, target, duration=None):
        """Schedule one fault; raises UnknownTarget when ``target`` does not exist."""
        if kind == "agent-crash":
            ok = target in self.ces or target in self.ftds
        elif kind in ("ce-stop", "ce-start"):
            ok = target in self.ces or target in self.monitors
        elif kind == "broker-pause":
            ok = target in (JOB, TRANSFER, "all")
        elif kind in FAULT_PHASE:
            ok = any(w.name == target for w in self.sc.workload)
        else:
            raise ScenarioError("unknown fault kind %r" % kind)
        if not ok:
            raise UnknownTarget("fault %s: unknown target %r" % (kind, target))
        self._push(at, FAULT, FaultConfig(at, kind, target, duration))
        return FaultConfig(at, kind, target, duration)

    # -- handlers ------------------------------------------------------------------

    def _submit(self, i):
        sub = self.sc.workload[i]
        if isinstance(sub, JobSubmission):
            req = parse_expression(sub.requirements) if sub.requirements else None
            spec = JobSpec(sub.executable, list(sub.arguments),
                           **({"requirements": req} if req is not None else {}),
                           input_data=list(sub.input_data), output_data=list(sub.output_data),
                           packages=list(sub.packages), validate=sub.validate)
            task = self.job_manager.submit_job(spec, sub.priority, at=self.now)
            task.meta["workload"] = i
            self.workloads[task.id] = Workload(sub.duration, sub.exit_code,
                                               sub.produced, sub.partial_output.encode())
            kind = JOB
        else:
            try:
                task = self.transfer_manager.request_transfer(
                    sub.lfn, sub.destination_se, sub.kind, sub.priority, at=self.now,
                    transport=sub.transport)
            except AlreadyReplicated as exc:
                self.rejected.append({"workload": i, "reason": exc.code})
                self._record("reject", workload=i, reason=exc.code)
                return
            task.meta["workload"] = i
            kind = TRANSFER
        if sub.name:
            task.meta["name"] = sub.name
            self.names[sub.name] = (kind, task.id)

    def _fault(self, f: FaultConfig):
        self._record("fault", kind=f.kind, target=f.target)
        self.progress += 1
        if f.kind == "agent-crash":
            if f.target in self.ces:
                ce = self.ces[f.target]
                ce.state = "crashed"
                self.waiting_for_slot.discard(ce.name)
                lost = fail_queued(ce, self.jobs, self.now)
                for jid in lost:
                    self.running_on.pop(jid, None)
            else:
                self._crash_ftd(self.ftds[f.target])
        elif f.kind in ("ce-stop", "ce-start"):
            if f.target in self.monitors:
                mon, names = self.monitors[f.target], None
            else:
                mon, names = self.monitors[self.ces[f.target].site], [f.target]
            changed = mon.signal("stop" if f.kind == "ce-stop" else "start", names)
            if f.kind == "ce-start":
                for name in changed:
                    self._push(self.now, POLL_CE, name)
            elif f.duration:
                for name in changed:
                    self._push(self.now + f.duration, FAULT,
                               FaultConfig(self.now + f.duration, "ce-start", name))
        elif f.kind == "broker-pause":
            for b in self._brokers(f.target):
                b.paused = True
            if f.duration:
                self._push(self.now + f.duration, RESUME, f.target)
        else:
            self.armed.setdefault(f.target, {})[FAULT_PHASE[f.kind]] = self.now

    def _brokers(self, target):
        return [b for k, b in ((JOB, self.job_broker), (TRANSFER, self.transfer_broker))
                if target in (k, "all")]

    def _resume(self, target):
        self._record("resume", target=target)
        self.progress += 1
        for b in self._brokers(target):
            b.paused = False

    def _crash_ftd(self, ftd):
        ftd.alive = False
        busy = self.ftd_busy.pop(ftd.name, None)
        if busy is None:
            return
        tid, gen = busy
        gen.close()
        task = self.transfers.get(tid)
        members = [tid] + list(task.meta.get("bulk_members", ()))
        new = PHASE_FAILURE.get(task.status)
        for mid in members:
            if self.transfers.get(mid).status == task.status and new is not None:
                self.transfers.transition(mid, new, self.now)
        if new != S.FAILED_CLEAN:
            prefix = "%d:" % tid
            for f in self.ftds.values():
                for key in [k for k in f.scratch if k.startswith(prefix)]:
                    f.unstage(key)

    def _kick(self, ce):
        while True:
            jid = ce.queue.pop_startable()
            if jid is None:
                return
            self._push(self.now + ce.start_latency, JOB_START, (ce.name, jid))

    def _poll_ce(self, name):
        ce = self.ces[name]
        if not ce.active:
            return
        if not ce.queue.has_capacity():
            self.waiting_for_slot.add(name)
            return
        out = ce_poll_cycle(ce, self.monitors[ce.site], self.jobs, self.now)
        if isinstance(out, Slept):
            if not self.job_broker.paused:
                self.idle_mark[name] = self.progress
            self._record("sleep", agent=name, retry=out.retry_after)
            self._push(self.now + out.retry_after, POLL_CE, name)
            return
        self.running_on[out.task_id] = name
        self._kick(ce)
        self._push(self.now, POLL_CE, name)

    def _job_start(self, payload):
        name, jid = payload
        ce = self.ces[name]
        if self.jobs.get(jid).status != S.QUEUED or ce.state == "crashed":
            return
        start_job(ce, self.jobs, jid, self.workloads[jid], self.now)
        self._push(self.now + self.workloads[jid].duration, JOB_END, payload)

    def _job_end(self, payload):
        name, jid = payload
        ce = self.ces[name]
        if self.jobs.get(jid).status != S.RUNNING or ce.state == "crashed":
            return
        finish_job(ce, self.jobs, jid, self.workloads[jid], self.now, self.validators)
        self.running_on.pop(jid, None)
        self._kick(ce)
        if name in self.waiting_for_slot:
            self.waiting_for_slot.discard(name)
            self._push(self.now, POLL_CE, name)

    def _poll_ftd(self, name):
        ftd = self.ftds[name]
        if not ftd.alive or name in self.ftd_busy:
            return
        out = self.transfer_broker.request_task(ftd.descriptor(), ftd.name, ftd.site, at=self.now)
        if not isinstance(out, Assignment):
            if not self.transfer_broker.paused:
                self.idle_mark[name] = self.progress
            self._record("sleep", agent=name, retry=out.retry_after)
            self._push(self.now + out.retry_after, POLL_FTD, name)
            return
        gen = execute_transfer(self.ctx, ftd, out)
        self.ftd_busy[name] = (out.task_id, gen)
        self._step(name)

    def _step(self, name):
        busy = self.ftd_busy.get(name)
        if busy is None:
            return
        tid, gen = busy
        try:
            d = next(gen)
        except StopIteration as stop:
            del self.ftd_busy[name]
            self._record("transfer-end", task=tid, agent=name, status=str(stop.value))
            self._push(self.now, POLL_FTD, name)
            return
        self._push(self.now + d, STEP, name)

    def _optimize(self, _):
        before = self.progress
        jr = self.job_optimizer.run_pass(self.now)
        tr = self.transfer_optimizer.run_pass(self.now)
        for r in (jr, tr):
            if r.tasks_rewritten or r.site_tags_set or r.suggestions or r.failed:
                self._record("optimize", kind=r.kind, examined=r.tasks_examined,
                             rewritten=r.tasks_rewritten, tagged=r.site_tags_set,
                             suggested=len(r.suggestions), failed=len(r.failed))
            if r.site_tags_set:
                self.progress += 1
        if self.progress == before:
            self.optimizer_mark = self.progress
        self._push(self.now + self.sc.optimizer_interval_ms, OPTIMIZE, None)

    # -- invariants -------------------------------------------------------------------

    def _check_task(self, store, task):
        if task.state_log[-1][0] != task.status:
            self._violation("task %d status disagrees with its state log" % task.id)
        for (_, a), (_, b) in zip(task.state_log, task.state_log[1:]):
            if b < a:
                self._violation("task %d state log goes back in time" % task.id)

    def _check_touched(self):
        for kind, tid in sorted(self.touched):
            store = self.jobs if kind == JOB else self.transfers
            self._check_task(store, store.get(tid))
        self.touched.clear()

    def check_all(self):
        """Full invariant sweep over stores, brokers and catalogue."""
        for store, broker in ((self.jobs, self.job_broker), (self.transfers, self.transfer_broker)):
            waiting = 0
            for t in store.tasks():
                self._check_task(store, t)
                waiting += t.status == S.WAITING
                if t.status != S.WAITING and t.status not in (S.FAILED_LOCAL,) \
                        and t.id not in broker.assignments and "bulk_leader" not in t.meta:
                    self._violation("%s %d left WAITING without an assignment" % (store.kind, t.id))
            if waiting != store.count_waiting():
                self._violation("%s waiting index out of step" % store.kind)
        for se in self.catalogue.storage.values():
            if se.used > se.capacity:
                self._violation("SE %s over capacity" % se.name)
        for e in self.catalogue.entries():
            keys = [(r.registered_at, r.pfn) for r in e.mirrors]
            if keys != sorted(keys):
                self._violation("mirrors of %s out of order" % e.lfn)

    # -- main loop -----------------------------------------------------------------------

    def _in_flight(self):
        return bool(self.running_on) or bool(self.ftd_busy) or any(
            ce.queue.load for ce in self.ces.values() if ce.state != "crashed")

    def _quiescent(self):
        if self._foreground or self._in_flight():
            return False
        if self.job_broker.paused or self.transfer_broker.paused:
            return False
        if self.optimizer_mark != self.progress and self.sc.optimizer_interval_ms > 0:
            return False
        for name, ce in self.ces.items():
            if ce.active and self.idle_mark.get(name) != self.progress:
                return False
        for name, f in self.ftds.items():
            if f.alive and self.idle_mark.get(name) != self.progress:
                return False
        return True

    HANDLERS = {SUBMIT: "_submit", FAULT: "_fault", RESUME: "_resume", JOB_START: "_job_start",
                JOB_END: "_job_end", STEP: "_step", POLL_CE: "_poll_ce", POLL_FTD: "_poll_ftd",
                OPTIMIZE: "_optimize"}

    def run(self) -> SimTrace:
        horizon = self.sc.horizon
        handlers = {k: getattr(self, v) for k, v in self.HANDLERS.items()}
        stop_reason = "horizon"
        last = 0
        while self._heap:
            at, kind, seq, payload = self._heap[0]
            if at > horizon:
                break
            heapq.heappop(self._heap)
            if kind in FOREGROUND:
                self._foreground -= 1
            if at < last:
                self._violation("event time went backwards")
            self.now = last = at
            self._event = (at, self.HANDLERS[kind].lstrip("_"), payload if kind != FAULT
                           else payload.kind + ":" + payload.target)
            handlers[kind](payload)
            self._check_touched()
            if self.strict:
                self.check_all()
            if kind not in FOREGROUND and self._quiescent():
                stop_reason = "quiescent"
                break
        else:
            stop_reason = "exhausted"
        if stop_reason == "horizon":
            self.now = max(self.now, horizon)
        self.check_all()
        self.stop_reason = stop_reason
        return self.trace()

    # -- results ----------------------------------------------------------------------------

    def metrics(self) -> dict:
        out: dict = {"end_time": self.now, "stop_reason": getattr(self, "stop_reason", None),
                     "synthetic_workload": bool(self.sc.synthetic), "seed": self.seed}
        for kind, store, broker in ((JOB, self.jobs, self.job_broker),
                                    (TRANSFER, self.transfers, self.transfer_broker)):
            tasks = store.tasks()
            terminal = [t for t in tasks if t.is_terminal()]
            per_state: dict[str, dict] = {}
            for t in tasks:
                for status, dur in store.state_timing_report(t.id, self.now)[:-1 if t.is_terminal() else None]:
                    slot = per_state.setdefault(str(status), {"total_ms": 0, "count": 0, "histogram": {}})
                    slot["total_ms"] += dur
                    slot["count"] += 1
                    b = str(_time_bucket(dur))
                    slot["histogram"][b] = slot["histogram"].get(b, 0) + 1
            by_site: dict[str, int] = {}
            for a in broker.assignments.values():
                by_site[a.resource_site] = by_site.get(a.resource_site, 0) + 1
            submitted = sum(1 for w in self.sc.workload if (w.__class__ is JobSubmission) == (kind == JOB))
            rejected = len(self.rejected) if kind == TRANSFER else 0
            hours = max(self.now, 1) / 3_600_000
            out[kind] = {
                "submitted": submitted, "rejected": rejected, "tasks": len(tasks),
                "terminal": len(terminal), "pending": len(tasks) - len(terminal),
                "status_counts": dict(sorted(store.status_counts().items())),
                "throughput_per_hour": round(len(terminal) / hours, 3),
                "state_time": per_state,
                "assignments": len(broker.assignments), "assignments_by_site": by_site,
                "polls": broker.requests, "match_evaluations": broker.match_evaluations,
                "lost_races": broker.lost_races,
                "generated": sum(1 for t in tasks if "workload" not in t.meta),
                "conserved": (submitted - rejected == sum(1 for t in tasks if "workload" in t.meta)
                              and len(tasks) == len(terminal) + sum(1 for t in tasks
                                                                    if not t.is_terminal())),
            }
        return out

    def trace(self) -> SimTrace:
        opt = "".join(r.line() for r in sorted(
            self.job_optimizer.reports + self.transfer_optimizer.reports,
            key=lambda r: (r.at, r.kind, r.pass_id)))
        return SimTrace(self.seed, self.events, self.jobs.journal_text(),
                        self.transfers.journal_text(), opt, self.catalogue.dump(),
                        self.metrics(), sim=self)


def run_simulation(scenario: Scenario, seed: int | None = None,
                   faults: list[FaultConfig] | None = None, strict: bool = False,
                   validators: dict | None = None) -> SimTrace:
    """Run ``scenario`` to its horizon or to quiescence and return the trace."""
    return Simulation(scenario, seed, faults, strict, validators).run()
