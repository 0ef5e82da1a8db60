"""Background optimizers that rewrite WAITING tasks.

The job optimizer widens input-data constraints as replicas appear and
suggests replications for jobs no CE can serve. The transfer optimizer
fills in size, sources and requirements of new transfers, tags them with
the only site able to perform them, and can group small transfers.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

from .catalogue import MIRROR, Catalogue, CatalogueError, site_of
from .jobs import JobSpec, compose_requirements, derive_input_requirements, job_descriptor
from .store import JOB, TRANSFER, Status, TaskStore
from .transfers import (
    AlreadyReplicated, TransferManager, TransferSpec, default_transfer_requirements,
)

log = logging.getLogger(__name__)

S = Status


@dataclass(frozen=True)
class ReplicationSuggestion:
    task_id: int
    lfn: str
    candidates: tuple[str, ...]


@dataclass
class OptimizerReport:
    pass_id: int
    kind: str
    at: int
    tasks_examined: int = 0
    tasks_rewritten: int = 0
    site_tags_set: int = 0
    suggestions: list[ReplicationSuggestion] = field(default_factory=list)
    failed: list[int] = field(default_factory=list)

    def line(self):
        return "%d\t%s\t%d\t%d\t%d\t%d\n" % (self.at, self.kind, self.tasks_examined,
                                             self.tasks_rewritten, self.site_tags_set,
                                             len(self.suggestions))


class JobOptimizer:
    def __init__(self, store: TaskStore, catalogue: Catalogue,
                 close_ses: Callable[[], Iterable[str]] = lambda: (),
                 auto_replicate: bool = False,
                 transfers: TransferManager | None = None,
                 tag_sites: bool = False):
        self.store = store
        self.catalogue = catalogue
        self.close_ses = close_ses
        self.auto_replicate = auto_replicate
        self.transfers = transfers
        self.tag_sites = tag_sites
        self._ids = itertools.count(1)
        self.reports: list[OptimizerReport] = []

    def _exclusive_site(self, spec):
        for lfn in spec.input_data:
            sites = {site_of(se) for se in self.catalogue.entry(lfn).ses}
            if len(sites) == 1:
                return sites.pop()
        return None

    def run_pass(self, at: int | None = None) -> OptimizerReport:
        at = self.store.now() if at is None else at
        report = OptimizerReport(next(self._ids), JOB, at)
        near_ce = set(self.close_ses())
        for task in self.store.all_waiting():
            report.tasks_examined += 1
            spec = task.spec
            if not isinstance(spec, JobSpec) or not spec.input_data:
                continue
            versions = {lfn: self.catalogue.entry(lfn).version for lfn in spec.input_data}
            if versions != task.meta.get("input_versions"):
                new_req = derive_input_requirements(spec.input_data, self.catalogue)
                changed = new_req != task.meta.get("input_req")
                desc = job_descriptor(spec, compose_requirements(spec, new_req)) if changed else None
                meta = {"input_versions": versions, "input_req": new_req,
                        "suggested": set()}
                if self.store.update_if_waiting(task.id, descriptor=desc, meta=meta) and changed:
                    report.tasks_rewritten += 1
            if self.tag_sites and task.site_affinity is None:
                site = self._exclusive_site(spec)
                if site is not None and self.store.update_if_waiting(task.id, site_affinity=site):
                    report.site_tags_set += 1
            suggested = task.meta.setdefault("suggested", set())
            for lfn in spec.input_data:
                if lfn in suggested or near_ce.intersection(self.catalogue.entry(lfn).ses):
                    continue
                suggested.add(lfn)
                sugg = ReplicationSuggestion(task.id, lfn, tuple(sorted(near_ce)))
                report.suggestions.append(sugg)
                if self.auto_replicate:
                    self._enact(sugg, at)
        self.reports.append(report)
        return report

    def _enact(self, sugg, at):
        if self.transfers is None or not sugg.candidates:
            return
        try:
            self.transfers.request_transfer(sugg.lfn, sugg.candidates[0], MIRROR, at=at)
        except (AlreadyReplicated, CatalogueError) as exc:
            log.info("suggestion for %s not enacted: %s", sugg.lfn, exc)


class TransferOptimizer:
    def __init__(self, store: TaskStore, catalogue: Catalogue,
                 site_registry: Callable[[], Iterable[str]] | None = None,
                 tag_sites: bool = True, bulk_threshold: int | None = None):
        self.store = store
        self.catalogue = catalogue
        self.site_registry = site_registry or catalogue.sites
        self.tag_sites = tag_sites
        self.bulk_threshold = bulk_threshold
        self._ids = itertools.count(1)
        self.reports: list[OptimizerReport] = []
        self.diagnostics: list[str] = []

    def run_pass(self, at: int | None = None) -> OptimizerReport:
        at = self.store.now() if at is None else at
        report = OptimizerReport(next(self._ids), TRANSFER, at)
        sites = set(self.site_registry())
        for task in self.store.all_waiting():
            report.tasks_examined += 1
            if task.meta.get("optimized"):
                continue
            spec: TransferSpec = task.spec
            if spec.destination_se not in self.catalogue.storage or spec.destination_site not in sites:
                msg = "transfer %d: unknown destination %s" % (task.id, spec.destination_se)
                self.diagnostics.append(msg)
                if self.store.compare_and_transition(task.id, S.WAITING, S.FAILED_LOCAL, at):
                    report.failed.append(task.id)
                continue
            entry = self.catalogue.entry(spec.lfn)
            sources = [(r.se, r.pfn) for r in self.catalogue.lookup(spec.lfn, spec.destination_site)]
            new_spec = replace(spec, size=entry.size, sources=sources,
                               requirements=default_transfer_requirements(spec.destination_se,
                                                                          entry.size))
            affinity = spec.destination_site if self.tag_sites else None
            if self.store.update_if_waiting(task.id, descriptor=new_spec.descriptor(),
                                            site_affinity=affinity, meta={"optimized": True}):
                task.spec = new_spec
                report.tasks_rewritten += 1
                if affinity is not None:
                    report.site_tags_set += 1
        if self.bulk_threshold:
            report.tasks_rewritten += self._group_small(at)
        self.reports.append(report)
        return report

    def _group_small(self, at) -> int:
        groups: dict[tuple, list] = {}
        for task in self.store.all_waiting():
            spec = task.spec
            if (not task.meta.get("optimized") or "bulk_leader" in task.meta
                    or "bulk_members" in task.meta or spec.size is None
                    or spec.size > self.bulk_threshold or not spec.sources):
                continue
            key = (site_of(spec.sources[0][0]), spec.destination_se, spec.kind, spec.transport)
            groups.setdefault(key, []).append(task)
        rewritten = 0
        for members in groups.values():
            if len(members) < 2:
                continue
            leader, rest = members[0], members[1:]
            total = sum(t.spec.size for t in members)
            lspec = replace(leader.spec, manifest=[t.spec.lfn for t in members],
                            requirements=default_transfer_requirements(
                                leader.spec.destination_se, total))
            if not self.store.update_if_waiting(leader.id, descriptor=lspec.descriptor(),
                                                meta={"bulk_members": []}):
                continue
            leader.spec = lspec
            for t in rest:
                if self.store.park(t.id, leader.id):
                    t.meta["bulk_leader"] = leader.id
                    leader.meta["bulk_members"].append(t.id)
            rewritten += 1 + len(leader.meta["bulk_members"])
        return rewritten
