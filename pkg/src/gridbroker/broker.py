"""The broker shared by the job and transfer models.

A resource presents its descriptor; the broker walks WAITING tasks in
priority order (restricted to the resource's site column) and hands out
the first task that matches in both directions. Matching runs outside
the critical section; only the claim is serialized on the store lock.
"""

from __future__ import annotations

import collections
import logging
import threading
from dataclasses import dataclass

from .descriptor import Descriptor, DescriptorError, parse_descriptor, symmetric_match
from .store import Status, TaskStore, UnknownTask

log = logging.getLogger(__name__)

DEFAULT_WORKERS = 5
DEFAULT_RETRY_MS = 30_000


class BrokerError(Exception):
    code = "BROKER_ERROR"


class MalformedDescriptor(BrokerError):
    code = "MALFORMED_DESCRIPTOR"


@dataclass(frozen=True)
class Assignment:
    task_id: int
    resource_id: str
    resource_site: str | None
    matched_at: int
    task_descriptor: Descriptor


@dataclass(frozen=True)
class NoMatch:
    retry_after: int


class Broker:
    def __init__(self, store: TaskStore, retry_hint_ms: int = DEFAULT_RETRY_MS,
                 workers: int = DEFAULT_WORKERS):
        if workers < 1:
            raise ValueError("broker needs at least one worker")
        self.store = store
        self.kind = store.kind
        self.retry_hint_ms = retry_hint_ms
        self.workers = workers
        self._pool = threading.BoundedSemaphore(workers)
        self._stats = threading.Lock()
        self.assignments: dict[int, Assignment] = {}
        self.match_evaluations = 0
        self.requests = 0
        self.lost_races = 0
        self.paused = False
        self.diagnostics: collections.deque[str] = collections.deque(maxlen=1000)
        self.listeners = []

    def _match(self, task_descriptor, resource_descriptor):
        return symmetric_match(task_descriptor, resource_descriptor, self.diagnostics.append)

    def request_task(self, resource_descriptor: Descriptor | str, resource_id: str,
                     resource_site: str | None, kind: str | None = None,
                     at: int | None = None) -> Assignment | NoMatch:
        """Hand the highest-priority matching WAITING task to the resource."""
        if kind is not None and kind != self.kind:
            raise BrokerError("this broker serves %s tasks, not %s" % (self.kind, kind))
        if isinstance(resource_descriptor, str):
            try:
                resource_descriptor = parse_descriptor(resource_descriptor)
            except DescriptorError as exc:
                raise MalformedDescriptor(str(exc)) from exc
        with self._pool:
            evaluated = 0
            try:
                if self.paused:
                    return NoMatch(self.retry_hint_ms)
                for task in self.store.iter_waiting(resource_site):
                    if task.status is not Status.WAITING:
                        continue
                    evaluated += 1
                    if not self._match(task.descriptor, resource_descriptor):
                        continue
                    got = self.atomic_claim(task.id, resource_id, resource_site,
                                            resource_descriptor, at, task.descriptor)
                    if got is not None:
                        return got
                return NoMatch(self.retry_hint_ms)
            finally:
                with self._stats:
                    self.match_evaluations += evaluated
                    self.requests += 1

    def atomic_claim(self, task_id: int, resource_id: str, resource_site: str | None = None,
                     resource_descriptor: Descriptor | None = None, at: int | None = None,
                     matched_descriptor: Descriptor | None = None) -> Assignment | None:
        """Claim a task found by an unlocked scan.

        Returns the Assignment, or None when the task is no longer WAITING
        (lost race). If the task was rewritten after the scan matched it,
        the match is re-checked under the lock.
        """
        store = self.store
        with store.lock:
            task = store.get(task_id)
            if task.status is not Status.WAITING:
                self.lost_races += 1
                return None
            if (resource_descriptor is not None and matched_descriptor is not None
                    and task.descriptor is not matched_descriptor
                    and not self._match(task.descriptor, resource_descriptor)):
                return None
            if task_id in self.assignments:
                raise BrokerError("task %d assigned twice" % task_id)
            at = store.now() if at is None else at
            store.transition(task_id, Status.ASSIGNED, at)
            a = Assignment(task_id, resource_id, resource_site, at, task.descriptor)
            self.assignments[task_id] = a
            for fn in self.listeners:
                fn(a, resource_descriptor)
            return a

    def claim_outcome(self, task_id, resource_id) -> str:
        """``"claimed"`` or ``"lost-race"``; raises UnknownTask for bad ids."""
        if task_id not in self.store:
            raise UnknownTask(task_id)
        return "claimed" if self.atomic_claim(task_id, resource_id) else "lost-race"
