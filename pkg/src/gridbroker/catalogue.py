"""Replica catalogue: logical file names mapped to physical replicas on SEs."""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

CACHE, MIRROR, MASTER_COPY = "cache", "mirror", "masterCopy"
REPLICATION_KINDS = (CACHE, MIRROR, MASTER_COPY)


class CatalogueError(Exception):
    code = "CATALOGUE_ERROR"


class UnknownLFN(CatalogueError, KeyError):
    code = "LFN_NOT_FOUND"

    def __str__(self):
        return "unknown lfn %s" % self.args[0]


class DuplicateLFN(CatalogueError):
    code = "DUPLICATE_LFN"


class UnknownSE(CatalogueError, KeyError):
    code = "SE_NOT_FOUND"

    def __str__(self):
        return "unknown storage element %s" % self.args[0]


class InsufficientCapacity(CatalogueError):
    code = "INSUFFICIENT_CAPACITY"


class DuplicateReplica(CatalogueError):
    code = "DUPLICATE_REPLICA"


def site_of(se_name: str) -> str:
    """Site part of a ``Site::Name`` storage element name."""
    site, sep, _ = se_name.partition("::")
    if not sep or not site:
        raise ValueError("storage element name %r is not of the form Site::Name" % se_name)
    return site


@dataclass(frozen=True)
class Replica:
    pfn: str
    se: str
    registered_at: int = 0

    @property
    def site(self):
        return site_of(self.se)


@dataclass(frozen=True)
class CatalogueEntry:
    """One LFN. ``mirrors`` is kept in (registration time, PFN) order."""

    lfn: str
    master: Replica
    mirrors: tuple[Replica, ...] = ()
    size: int = 0
    version: int = 0

    @property
    def replicas(self) -> tuple[Replica, ...]:
        return (self.master,) + self.mirrors

    @property
    def ses(self) -> list[str]:
        return [r.se for r in self.replicas]


@dataclass
class StorageElement:
    name: str
    capacity: int
    used: int = 0
    mss: bool = False
    bandwidth: int = 10_000_000  # bytes per simulated second
    site: str = field(init=False)

    def __post_init__(self):
        self.site = site_of(self.name)
        if not 0 <= self.used <= self.capacity:
            raise ValueError("SE %s: used must lie in [0, capacity]" % self.name)

    @property
    def free(self):
        return self.capacity - self.used


class Catalogue:
    """LFN -> replicas map with the cache / mirror / masterCopy semantics.

    Writes are serialized by one lock; entries are immutable, so a reader
    always holds a consistent snapshot of an entry.
    """

    def __init__(self, clock: Callable[[], int] | None = None):
        self._clock = clock or (lambda: int(time.time() * 1000))
        self._lock = threading.RLock()
        self._entries: dict[str, CatalogueEntry] = {}
        self.storage: dict[str, StorageElement] = {}
        self.version = 0

    # storage elements

    def add_storage_element(self, name, capacity, mss=False, bandwidth=None):
        with self._lock:
            if name in self.storage:
                raise CatalogueError("storage element %s already registered" % name)
            se = StorageElement(name, capacity, mss=mss)
            if bandwidth is not None:
                se.bandwidth = bandwidth
            self.storage[name] = se
            return se

    def storage_element(self, name) -> StorageElement:
        try:
            return self.storage[name]
        except KeyError:
            raise UnknownSE(name) from None

    def sites(self) -> set[str]:
        return {se.site for se in self.storage.values()}

    def _reserve(self, se_name, size):
        se = self.storage_element(se_name)
        if se.used + size > se.capacity:
            raise InsufficientCapacity(
                "%s has %d bytes free, %d needed" % (se_name, se.free, size))
        se.used += size

    # entries

    def _bump(self, entry):
        self.version += 1
        entry = replace(entry, version=self.version)
        self._entries[entry.lfn] = entry
        return entry

    def register_file(self, lfn, pfn, se, size, at=None) -> CatalogueEntry:
        with self._lock:
            if lfn in self._entries:
                raise DuplicateLFN("lfn %s already registered" % lfn)
            self._reserve(se, size)
            at = self._clock() if at is None else at
            return self._bump(CatalogueEntry(lfn, Replica(pfn, se, at), (), size))

    def add_replica(self, lfn, pfn, se, kind, at=None) -> CatalogueEntry | None:
        """Register a new copy; returns the updated entry, or None for cache."""
        if kind not in REPLICATION_KINDS:
            raise ValueError("unknown replication kind %r" % kind)
        with self._lock:
            entry = self.entry(lfn)
            self.storage_element(se)
            if kind == CACHE:
                return None
            if any(r.se == se and r.pfn == pfn for r in entry.replicas):
                raise DuplicateReplica("%s already has replica %s at %s" % (lfn, pfn, se))
            self._reserve(se, entry.size)
            at = self._clock() if at is None else at
            new = Replica(pfn, se, at)
            if kind == MIRROR:
                updated = replace(entry, mirrors=_ordered(entry.mirrors + (new,)))
            else:
                updated = replace(entry, master=new,
                                  mirrors=_ordered(entry.mirrors + (entry.master,)))
            return self._bump(updated)

    def promote(self, lfn, pfn, se, at=None) -> CatalogueEntry:
        """Make an existing mirror the master; the old master becomes a mirror."""
        with self._lock:
            entry = self.entry(lfn)
            if entry.master.se == se and entry.master.pfn == pfn:
                return entry
            rep = next((m for m in entry.mirrors if m.se == se and m.pfn == pfn), None)
            if rep is None:
                raise CatalogueError("%s has no replica %s at %s" % (lfn, pfn, se))
            rest = tuple(m for m in entry.mirrors if m is not rep)
            return self._bump(replace(entry, master=rep, mirrors=_ordered(rest + (entry.master,))))

    def entry(self, lfn) -> CatalogueEntry:
        try:
            return self._entries[lfn]
        except KeyError:
            raise UnknownLFN(lfn) from None

    def __contains__(self, lfn):
        return lfn in self._entries

    def __len__(self):
        return len(self._entries)

    def entries(self) -> list[CatalogueEntry]:
        with self._lock:
            return [self._entries[k] for k in sorted(self._entries)]

    def lookup(self, lfn, requesting_site=None) -> list[Replica]:
        """Replicas ordered for a client at ``requesting_site``.

        Local replicas come first; within each group the master precedes
        mirrors, and mirrors follow registration time, then PFN.
        """
        entry = self.entry(lfn)

        def key(rep):
            remote = rep.site != requesting_site
            return (remote, rep is not entry.master, rep.registered_at, rep.pfn)

        return sorted(entry.replicas, key=key)

    # text form

    def dump(self) -> str:
        lines = []
        for e in self.entries():
            cols = [e.lfn, str(e.size), "master=%s,%s" % (e.master.se, e.master.pfn)]
            cols += ["mirror=%s,%s" % (m.se, m.pfn) for m in e.mirrors]
            lines.append("\t".join(cols) + "\n")
        return "".join(lines)

    def load(self, text: str | Iterable[str]):
        """Add the entries of a ``dump`` to this catalogue.

        Registration times are synthesized in line order, so the relative
        order of mirrors survives a dump/load cycle.
        """
        lines = text.splitlines() if isinstance(text, str) else text
        with self._lock:
            for lineno, line in enumerate(lines, 1):
                line = line.rstrip("\n")
                if not line.strip() or line.startswith("#"):
                    continue
                cols = line.split("\t")
                try:
                    lfn, size = cols[0], int(cols[1])
                    reps = [_parse_replica_col(c) for c in cols[2:]]
                except (IndexError, ValueError) as exc:
                    raise CatalogueError("line %d: malformed entry (%s)" % (lineno, exc)) from None
                if not reps or reps[0][0] != "master" or any(k != "mirror" for k, _, _ in reps[1:]):
                    raise CatalogueError("line %d: expected master= then mirror= columns" % lineno)
                _, se, pfn = reps[0]
                self.register_file(lfn, pfn, se, size, at=0)
                for i, (_, se, pfn) in enumerate(reps[1:], 1):
                    self.add_replica(lfn, pfn, se, MIRROR, at=i)


def _ordered(mirrors):
    return tuple(sorted(mirrors, key=lambda r: (r.registered_at, r.pfn)))


def _parse_replica_col(col):
    kind, eq, rest = col.partition("=")
    se, comma, pfn = rest.partition(",")
    if not eq or not comma:
        raise ValueError("bad replica column %r" % col)
    return kind, se, pfn
