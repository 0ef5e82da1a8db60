"""Transfer model: transfer requests, FTD pull agents, three-phase copies."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Generator, Iterable

from .broker import Assignment, Broker, NoMatch
from .catalogue import (
    CACHE, MIRROR, REPLICATION_KINDS, Catalogue, CatalogueError, DuplicateReplica, site_of,
)
from .descriptor import Descriptor, Expr, Literal, lit, member_of, Binary, AttrRef, parse_descriptor
from .jobs import BrokerUnreachable, Slept
from .store import TRANSFER, USER_PRIORITY, Status, Task, TaskStore

S = Status


class TransferError(Exception):
    code = "TRANSFER_ERROR"


class AlreadyReplicated(TransferError):
    code = "ALREADY_REPLICATED"


@dataclass
class TransferSpec:
    lfn: str
    destination_se: str
    kind: str
    size: int | None = None
    sources: list[tuple[str, str]] = field(default_factory=list)
    requirements: Expr | None = None
    transport: str = "sim-copy"
    manifest: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in REPLICATION_KINDS:
            raise TransferError("unknown transfer type %r" % self.kind)

    @property
    def destination_site(self):
        return site_of(self.destination_se)

    @property
    def files(self) -> list[str]:
        return self.manifest or [self.lfn]

    def descriptor(self) -> Descriptor:
        attrs = [("LFN", lit(self.lfn)), ("DestinationSE", lit(self.destination_se)),
                 ("Type", lit(self.kind)), ("Transport", lit(self.transport))]
        if self.size is not None:
            attrs.append(("Size", lit(self.size)))
        if self.sources:
            attrs.append(("Sources", lit([se for se, _ in self.sources])))
            attrs.append(("SourcePFNs", lit([pfn for _, pfn in self.sources])))
        if self.manifest:
            attrs.append(("Manifest", lit(self.manifest)))
        if self.requirements is not None:
            attrs.append(("Requirements", self.requirements))
        return Descriptor(attrs)


def default_transfer_requirements(destination_se: str, size: int) -> Expr:
    """``member(other.CloseSE, dest) && other.CacheFree >= size``."""
    return Binary("&&", member_of("CloseSE", destination_se),
                  Binary(">=", AttrRef("CacheFree", other=True), Literal(size)))


class TransferManager:
    def __init__(self, store: TaskStore, catalogue: Catalogue, default_transport="sim-copy"):
        if store.kind != TRANSFER:
            raise ValueError("TransferManager needs a transfer store")
        self.store = store
        self.catalogue = catalogue
        self.default_transport = default_transport

    def request_transfer(self, lfn: str, destination_se: str, kind: str,
                         priority: int = USER_PRIORITY, at: int | None = None,
                         transport: str | None = None) -> Task:
        """Insert a WAITING transfer carrying only the user's fields, on hold."""
        entry = self.catalogue.entry(lfn)
        self.catalogue.storage_element(destination_se)
        if kind != CACHE and destination_se in entry.ses:
            raise AlreadyReplicated("%s already has a replica at %s" % (lfn, destination_se))
        # held (Requirements = false) until the transfer optimizer fills it in
        spec = TransferSpec(lfn, destination_se, kind, requirements=Literal(False),
                            transport=transport or self.default_transport)
        return self.store.insert_task(spec.descriptor(), priority=priority, at=at, spec=spec)

    def submit_descriptor(self, d: Descriptor | str, at=None) -> Task:
        """Ingest ``LFN / DestinationSE / Type / Priority`` descriptor text."""
        if isinstance(d, str):
            d = parse_descriptor(d)
        lfn, dest, kind = d.value("LFN"), d.value("DestinationSE"), d.value("Type")
        if not all(type(v) is str for v in (lfn, dest, kind)):
            raise TransferError("transfer needs string LFN, DestinationSE and Type")
        prio = d.value("Priority")
        transport = d.value("Transport")
        return self.request_transfer(lfn, dest, kind, prio if type(prio) is int else USER_PRIORITY,
                                     at=at, transport=transport if type(transport) is str else None)


# -- storage and transports --------------------------------------------------------

class SimFileSystem:
    """In-memory byte store: SE name -> {pfn -> bytes}."""

    def __init__(self):
        self.files: dict[str, dict[str, bytes]] = {}

    def put(self, se, pfn, data: bytes):
        self.files.setdefault(se, {})[pfn] = bytes(data)

    def get(self, se, pfn) -> bytes:
        try:
            return self.files[se][pfn]
        except KeyError:
            raise TransferError("no file %s at %s" % (pfn, se)) from None

    def exists(self, se, pfn):
        return pfn in self.files.get(se, {})


def checksum(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def synthetic_content(lfn: str, size: int, seed: int = 0) -> bytes:
    """Deterministic pseudo-random bytes for a simulated file."""
    out = bytearray()
    counter = 0
    while len(out) < size:
        out += hashlib.sha256(b"%d:%s:%d" % (seed, lfn.encode(), counter)).digest()
        counter += 1
    return bytes(out[:size])


def physical_name(se: str, lfn: str) -> str:
    return "sim://%s%s" % (se, lfn if lfn.startswith("/") else "/" + lfn)


class Transport:
    name = "abstract"

    def duration(self, size: int, src, dst) -> int:
        raise NotImplementedError

    def copy(self, data: bytes) -> bytes:
        return bytes(data)


class SimCopy(Transport):
    """Byte copy at the slower end's bandwidth plus a fixed latency."""

    name = "sim-copy"

    def __init__(self, latency_ms: int = 50):
        self.latency_ms = latency_ms

    def duration(self, size, src, dst):
        bw = min(src.bandwidth, dst.bandwidth)
        return self.latency_ms + math.ceil(size * 1000 / bw)


class Loopback(Transport):
    name = "loopback"

    def duration(self, size, src, dst):
        return 0


def builtin_transports() -> dict[str, Transport]:
    return {t.name: t for t in (SimCopy(), Loopback())}


# -- FTD agent ------------------------------------------------------------------------

@dataclass
class FileTransferDaemon:
    name: str
    site: str
    close_se: str
    cache_size: int = 10**9
    poll_interval: int = 30_000
    transport: str = "sim-copy"
    stage_latency: int = 2000
    cache_free: int = field(init=False)
    scratch: dict[str, bytes] = field(default_factory=dict)
    alive: bool = True

    def __post_init__(self):
        if site_of(self.close_se) != self.site:
            raise ValueError("FTD %s: close SE %s not at site %s" % (self.name, self.close_se, self.site))
        self.cache_free = self.cache_size

    def descriptor(self) -> Descriptor:
        return Descriptor([("Name", lit(self.name)), ("CloseSE", lit([self.close_se])),
                           ("CacheFree", lit(self.cache_free)), ("Site", lit(self.site))])

    def stage(self, key: str, data: bytes):
        if len(data) > self.cache_free:
            raise TransferError("FTD %s: scratch space exhausted" % self.name)
        self.scratch[key] = data
        self.cache_free -= len(data)

    def unstage(self, key: str):
        data = self.scratch.pop(key)
        self.cache_free += len(data)


def ftd_poll_cycle(ftd: FileTransferDaemon, broker: Broker, at=None,
                   reachable: bool = True) -> Assignment | Slept:
    if not reachable:
        return Slept(ftd.poll_interval, "broker-unreachable")
    try:
        outcome = broker.request_task(ftd.descriptor(), ftd.name, ftd.site, at=at)
    except BrokerUnreachable:
        return Slept(ftd.poll_interval, "broker-unreachable")
    if isinstance(outcome, NoMatch):
        return Slept(outcome.retry_after)
    return outcome


# -- execution -------------------------------------------------------------------------

PHASES = ("stage", "transfer", "clean")


@dataclass
class TransferContext:
    store: TaskStore
    catalogue: Catalogue
    fs: SimFileSystem
    ftds: dict[str, FileTransferDaemon]
    transports: dict[str, Transport] = field(default_factory=builtin_transports)
    fault: Callable[[Task, str], bool] = lambda task, phase: False
    clock: Callable[[], int] = lambda: 0
    clean_ms: int = 10

    def ftd_at(self, site) -> FileTransferDaemon | None:
        for f in self.ftds.values():
            if f.site == site and f.alive:
                return f
        return None


def _claim_bulk_members(ctx, task, dest_ftd):
    members = task.meta.get("bulk_members", [])
    claimed = []
    for mid in members:
        if ctx.store.compare_and_transition(mid, S.WAITING, S.ASSIGNED, ctx.clock()):
            claimed.append(mid)
    return claimed


def execute_transfer(ctx: TransferContext, dest_ftd: FileTransferDaemon,
                     assignment: Assignment) -> Generator[int, None, Status]:
    """Drive one transfer through LOCAL_COPYING, TRANSFERRING and CLEANING.

    A generator: every ``yield`` hands back the duration of the phase just
    started; the caller advances its clock by that much and resumes.
    Returns the terminal status.
    """
    store, cat = ctx.store, ctx.catalogue
    task = store.get(assignment.task_id)
    spec: TransferSpec = task.spec
    ids = [task.id] + _claim_bulk_members(ctx, task, dest_ftd)
    tasks = [store.get(i) for i in ids]

    def move(status):
        now = ctx.clock()
        for t in tasks:
            store.transition(t.id, status, now)

    files = [t.spec.lfn for t in tasks]
    dest_se = cat.storage_element(spec.destination_se)
    plan = []
    for lfn in files:
        reps = cat.lookup(lfn, dest_ftd.site)
        src = next((r for r in reps if r.se != spec.destination_se), reps[0])
        plan.append((lfn, src))
    for t, (_, src) in zip(tasks, plan):
        t.meta["source_se"] = src.se
    need = 0 if spec.kind == CACHE else sum(
        cat.entry(lfn).size for lfn in files
        if physical_name(spec.destination_se, lfn) not in {r.pfn for r in cat.entry(lfn).replicas})

    move(S.LOCAL_COPYING)
    if need > dest_se.free:
        move(S.FAILED_LOCAL)
        return S.FAILED_LOCAL
    staged: list[tuple[FileTransferDaemon, str]] = []
    stage_time = 0
    try:
        for lfn, src in plan:
            src_se = cat.storage_element(src.se)
            if not src_se.mss:
                continue
            stager = ctx.ftd_at(src_se.site)
            if stager is None or ctx.fault(task, "stage"):
                raise TransferError("no staging for %s at %s" % (lfn, src_se.site))
            data = ctx.fs.get(src.se, src.pfn)
            key = "%d:%s" % (task.id, lfn)
            stager.stage(key, data)
            staged.append((stager, key))
            stage_time += stager.stage_latency + math.ceil(len(data) * 1000 / src_se.bandwidth)
    except TransferError:
        for stager, key in staged:
            stager.unstage(key)
        move(S.FAILED_LOCAL)
        return S.FAILED_LOCAL
    if stage_time:
        yield stage_time

    move(S.TRANSFERRING)
    transport = ctx.transports[spec.transport]
    payloads = []
    duration = 0
    for lfn, src in plan:
        data = ctx.fs.get(src.se, src.pfn)
        duration += transport.duration(len(data), cat.storage_element(src.se), dest_se)
        payloads.append((lfn, data))
    if duration:
        yield duration
    if ctx.fault(task, "transfer"):
        for stager, key in staged:
            stager.unstage(key)
        move(S.FAILED_TRANSFER)
        return S.FAILED_TRANSFER
    for lfn, data in payloads:
        ctx.fs.put(spec.destination_se, physical_name(spec.destination_se, lfn), transport.copy(data))

    move(S.CLEANING)
    if staged:
        yield ctx.clean_ms
    if ctx.fault(task, "clean"):
        move(S.FAILED_CLEAN)
        return S.FAILED_CLEAN
    for stager, key in staged:
        stager.unstage(key)
    move(S.DONE)
    for t in tasks:
        finalize_catalogue(cat, t, ctx.clock())
    return S.DONE


def run_transfer(ctx: TransferContext, dest_ftd, assignment, advance: Callable[[int], None]):
    """Run ``execute_transfer`` to completion, advancing time via ``advance``."""
    gen = execute_transfer(ctx, dest_ftd, assignment)
    try:
        while True:
            advance(next(gen))
    except StopIteration as stop:
        return stop.value


def finalize_catalogue(catalogue: Catalogue, task: Task, at=None):
    """Register the new copy according to the transfer's replication kind."""
    if task.status != S.DONE:
        raise TransferError("transfer %d is not DONE" % task.id)
    spec: TransferSpec = task.spec
    pfn = physical_name(spec.destination_se, spec.lfn)
    try:
        return catalogue.add_replica(spec.lfn, pfn, spec.destination_se, spec.kind, at=at)
    except DuplicateReplica:
        # an earlier transfer already put this copy there
        if spec.kind == MIRROR:
            return catalogue.entry(spec.lfn)
        return catalogue.promote(spec.lfn, pfn, spec.destination_se, at)
