"""Task store: every task of one kind, its status, timing and site column."""

from __future__ import annotations

import enum
import heapq
import threading
import time
from bisect import bisect_left, insort
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Iterator

from .descriptor import Descriptor, DescriptorError, lit, parse_descriptor

JOB, TRANSFER = "job", "transfer"
KINDS = (JOB, TRANSFER)

USER_PRIORITY = 100
PRODUCTION_PRIORITY = 0


class Status(str, enum.Enum):
    WAITING = "WAITING"
    ASSIGNED = "ASSIGNED"
    # jobs
    QUEUED = "QUEUED"
    RUNNING = "RUNNING"
    DONE = "DONE"
    VALIDATED = "VALIDATED"
    FAILED_ASSIGN = "FAILED_ASSIGN"
    FAILED_QUEUE = "FAILED_QUEUE"
    FAILED_RUN = "FAILED_RUN"
    FAILED = "FAILED"
    # transfers
    LOCAL_COPYING = "LOCAL_COPYING"
    TRANSFERRING = "TRANSFERRING"
    CLEANING = "CLEANING"
    FAILED_LOCAL = "FAILED_LOCAL"
    FAILED_TRANSFER = "FAILED_TRANSFER"
    FAILED_CLEAN = "FAILED_CLEAN"

    def __str__(self):
        return self.value


S = Status

JOB_EDGES = {
    S.WAITING: {S.ASSIGNED, S.FAILED_ASSIGN},
    S.ASSIGNED: {S.QUEUED, S.FAILED_QUEUE},
    S.QUEUED: {S.RUNNING, S.FAILED_QUEUE},
    S.RUNNING: {S.DONE, S.FAILED_RUN},
    S.DONE: {S.VALIDATED, S.FAILED},  # only for jobs that request validation
}

TRANSFER_EDGES = {
    S.WAITING: {S.ASSIGNED, S.FAILED_LOCAL},
    S.ASSIGNED: {S.LOCAL_COPYING, S.FAILED_LOCAL},
    S.LOCAL_COPYING: {S.TRANSFERRING, S.FAILED_LOCAL},
    S.TRANSFERRING: {S.CLEANING, S.FAILED_TRANSFER},
    S.CLEANING: {S.DONE, S.FAILED_CLEAN},
}

EDGES = {JOB: JOB_EDGES, TRANSFER: TRANSFER_EDGES}


class StoreError(Exception):
    code = "STORE_ERROR"


class UnknownTask(StoreError, KeyError):
    code = "TASK_NOT_FOUND"

    def __str__(self):
        return "unknown task %s" % self.args[0]


class IllegalTransition(StoreError):
    code = "ILLEGAL_TRANSITION"

    def __init__(self, task_id, old, new):
        super().__init__("task %s: illegal transition %s -> %s" % (task_id, old, new))
        self.task_id, self.old, self.new = task_id, old, new


class InvalidTask(StoreError):
    code = "INVALID_TASK"


@dataclass
class Task:
    id: int
    kind: str
    descriptor: Descriptor
    priority: int
    status: Status
    inserted_at: int
    site_affinity: str | None = None
    state_log: list[tuple[Status, int]] = field(default_factory=list)
    spec: Any = None
    meta: dict = field(default_factory=dict)

    @property
    def validate(self) -> bool:
        return self.kind == JOB and self.descriptor.value("Validate") is True

    def is_terminal(self, status: Status | None = None) -> bool:
        status = status or self.status
        out = EDGES[self.kind].get(status)
        if status == S.DONE and self.kind == JOB:
            return not self.validate
        return not out

    @property
    def sort_key(self):
        return (-self.priority, self.inserted_at, self.id)


@dataclass(frozen=True)
class JournalEntry:
    ts: int
    task_id: int
    old: str
    new: str

    def line(self):
        return "%d\t%d\t%s\t%s\n" % (self.ts, self.task_id, self.old, self.new)


def parse_journal(text: str) -> list[JournalEntry]:
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        ts, tid, old, new = line.split("\t")
        out.append(JournalEntry(int(ts), int(tid), old, new))
    return out


class TaskStore:
    """All tasks of one kind.

    Every status change goes through one lock; ``compare_and_transition``
    is the atomic primitive the broker's claim and the optimizers rely on.
    WAITING tasks are indexed per site-affinity bucket so that the broker
    can walk them in priority order without sorting per request.
    """

    def __init__(self, kind: str, clock: Callable[[], int] | None = None,
                 sites: Callable[[], Iterable[str]] | None = None,
                 journal_sink=None):
        if kind not in KINDS:
            raise ValueError("unknown task kind %r" % kind)
        self.kind = kind
        self.edges = EDGES[kind]
        self._clock = clock or (lambda: int(time.time() * 1000))
        self._sites = sites
        self._lock = threading.RLock()
        self._tasks: dict[int, Task] = {}
        self._next_id = 1
        self._buckets: dict[str | None, list[tuple]] = {None: []}
        self.journal: list[JournalEntry] = []
        self._sink = journal_sink
        self.listeners: list[Callable[[Task, str, Status, int], None]] = []
        self.rewrite_listeners: list[Callable[[Task], None]] = []

    @property
    def lock(self):
        return self._lock

    def now(self) -> int:
        return self._clock()

    def _log(self, ts, task, old, new):
        entry = JournalEntry(ts, task.id, old, str(new))
        self.journal.append(entry)
        if self._sink is not None:
            self._sink.write(entry.line())
        for fn in self.listeners:
            fn(task, old, new, ts)

    def _check_site(self, site):
        if site is None or self._sites is None:
            return
        if site not in set(self._sites()):
            raise InvalidTask("site %r is not registered" % site)

    # insertion

    def insert_task(self, descriptor: Descriptor | str, kind: str | None = None,
                    priority: int | None = None, at: int | None = None,
                    spec: Any = None, site_affinity: str | None = None) -> Task:
        if kind is not None and kind != self.kind:
            raise InvalidTask("this store holds %s tasks, not %s" % (self.kind, kind))
        if isinstance(descriptor, str):
            try:
                descriptor = parse_descriptor(descriptor)
            except DescriptorError as exc:
                raise InvalidTask("malformed descriptor: %s" % exc) from exc
        if self.kind == JOB:
            exe = descriptor.value("Executable")
            if type(exe) is not str or not exe:
                raise InvalidTask("job descriptor lacks Executable")
        if priority is None:
            p = descriptor.value("Priority")
            priority = p if type(p) is int else USER_PRIORITY
        descriptor = descriptor.replace(Priority=lit(int(priority)))
        self._check_site(site_affinity)
        with self._lock:
            at = self._clock() if at is None else at
            task = Task(self._next_id, self.kind, descriptor, int(priority), S.WAITING,
                        at, site_affinity, [(S.WAITING, at)], spec)
            self._next_id += 1
            self._tasks[task.id] = task
            insort(self._buckets.setdefault(site_affinity, []), task.sort_key)
            self._log(at, task, "-", S.WAITING)
            return task

    # lookup

    def get(self, task_id) -> Task:
        try:
            return self._tasks[task_id]
        except KeyError:
            raise UnknownTask(task_id) from None

    def __contains__(self, task_id):
        return task_id in self._tasks

    def __len__(self):
        return len(self._tasks)

    def tasks(self) -> list[Task]:
        with self._lock:
            return list(self._tasks.values())

    # transitions

    def _unindex(self, task):
        bucket = self._buckets[task.site_affinity]
        key = task.sort_key
        i = bisect_left(bucket, key)
        if i < len(bucket) and bucket[i] == key:
            del bucket[i]

    def _apply(self, task, new, at):
        old = task.status
        allowed = self.edges.get(old, ())
        if new not in allowed or (old == S.DONE and not task.validate):
            raise IllegalTransition(task.id, old, new)
        if at < task.state_log[-1][1]:
            raise StoreError("task %s: transition at %d precedes %d"
                             % (task.id, at, task.state_log[-1][1]))
        if old == S.WAITING:
            self._unindex(task)
        task.status = new
        task.state_log.append((new, at))
        self._log(at, task, str(old), new)
        return task

    def transition(self, task_id, new_status, at: int | None = None) -> Task:
        new_status = Status(new_status)
        with self._lock:
            task = self.get(task_id)
            return self._apply(task, new_status, self._clock() if at is None else at)

    def compare_and_transition(self, task_id, expected, new_status, at=None) -> bool:
        """Atomically move ``expected`` -> ``new_status``; False if status differs."""
        with self._lock:
            task = self.get(task_id)
            if task.status != expected:
                return False
            self._apply(task, Status(new_status), self._clock() if at is None else at)
            return True

    def update_if_waiting(self, task_id, descriptor: Descriptor | None = None,
                          site_affinity=..., meta: dict | None = None) -> bool:
        """Rewrite a task only while it is still WAITING."""
        with self._lock:
            task = self.get(task_id)
            if task.status != S.WAITING:
                return False
            if descriptor is not None:
                task.descriptor = descriptor.replace(Priority=lit(task.priority))
                for fn in self.rewrite_listeners:
                    fn(task)
            if site_affinity is not ... and site_affinity != task.site_affinity:
                self._check_site(site_affinity)
                self._unindex(task)
                task.site_affinity = site_affinity
                insort(self._buckets.setdefault(site_affinity, []), task.sort_key)
            if meta:
                task.meta.update(meta)
            return True

    def park(self, task_id, tag) -> bool:
        """Hide a WAITING task from every site's scan (bulk-group followers)."""
        with self._lock:
            task = self.get(task_id)
            if task.status != S.WAITING:
                return False
            self._unindex(task)
            task.site_affinity = ("parked", tag)
            insort(self._buckets.setdefault(task.site_affinity, []), task.sort_key)
            return True

    # queries

    def iter_waiting(self, site: str | None = None) -> Iterator[Task]:
        """WAITING tasks visible to ``site`` in broker order, from a snapshot.

        Yielded tasks may have left WAITING since the snapshot was taken.
        """
        with self._lock:
            general = list(self._buckets[None])
            local = list(self._buckets.get(site, ())) if site is not None else []
        tasks = self._tasks
        keys = heapq.merge(general, local) if local else general
        for key in keys:
            yield tasks[key[2]]

    def waiting_tasks(self, kind: str | None = None, site: str | None = None) -> list[Task]:
        """WAITING tasks with no site affinity or affinity ``site``.

        Ordered by priority descending, insertion time, then id.
        """
        if kind is not None and kind != self.kind:
            return []
        return [t for t in self.iter_waiting(site) if t.status == S.WAITING]

    def all_waiting(self) -> list[Task]:
        with self._lock:
            keys = sorted(k for b in self._buckets.values() for k in b)
            return [self._tasks[k[2]] for k in keys]

    def count_waiting(self) -> int:
        with self._lock:
            return sum(len(b) for b in self._buckets.values())

    def state_timing_report(self, task_id, now: int | None = None) -> list[tuple[Status, int]]:
        with self._lock:
            task = self.get(task_id)
            log = list(task.state_log)
        now = self._clock() if now is None else now
        out = []
        for (status, entered), nxt in zip(log, log[1:] + [(None, max(now, log[-1][1]))]):
            out.append((status, nxt[1] - entered))
        return out

    def status_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        with self._lock:
            for t in self._tasks.values():
                counts[str(t.status)] = counts.get(str(t.status), 0) + 1
        return counts

    def journal_text(self) -> str:
        return "".join(e.line() for e in self.journal)

    # persistence

    def snapshot(self) -> dict:
        from .descriptor import serialize_descriptor
        with self._lock:
            return {
                "kind": self.kind,
                "next_id": self._next_id,
                "tasks": [{
                    "id": t.id, "priority": t.priority, "inserted_at": t.inserted_at,
                    "site_affinity": t.site_affinity,
                    "descriptor": serialize_descriptor(t.descriptor),
                    "state_log": [[str(s), ts] for s, ts in t.state_log],
                } for t in self._tasks.values()],
                "journal": self.journal_text(),
            }

    @classmethod
    def from_snapshot(cls, snap: dict, clock=None, sites=None) -> "TaskStore":
        store = cls(snap["kind"], clock=clock, sites=sites)
        store._next_id = snap["next_id"]
        for rec in snap["tasks"]:
            log = [(Status(s), ts) for s, ts in rec["state_log"]]
            task = Task(rec["id"], store.kind, parse_descriptor(rec["descriptor"]),
                        rec["priority"], log[-1][0], rec["inserted_at"],
                        rec["site_affinity"], log)
            store._tasks[task.id] = task
            if task.status == S.WAITING:
                insort(store._buckets.setdefault(task.site_affinity, []), task.sort_key)
        store.journal = parse_journal(snap.get("journal", ""))
        return store
