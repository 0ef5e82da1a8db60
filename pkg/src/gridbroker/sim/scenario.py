"""Scenario files: sites, files, timed workload and faults.

Schema (YAML or JSON)::

    seed: 7                      # default seed for the run
    horizon: 86400000            # simulated ms
    retry_hint_ms: 30000
    optimizer_interval_ms: 60000
    tag_sites: true              # transfer site tagging
    bulk_threshold: null         # bytes; enables grouping of small transfers
    auto_replicate: false
    tag_jobs: false              # job site tagging (off by default)
    sites:
      - name: SiteA
        ses:  [{name: "SiteA::SE1", capacity: 1.0e12, mss: false,
                bandwidth: 10000000}]
        ces:  [{name: ceA1, slots: 4, start_latency: 1000,
                close_se: ["SiteA::SE1"], packages: [], partitions: [],
                requirements: "other.Priority >= 0"}]
        ftds: [{name: ftdA, close_se: "SiteA::SE1", cache: 1.0e9,
                stage_latency: 2000}]
    files:
      - {lfn: /a/f, size: 4096, se: "SiteA::SE1", mirrors: ["SiteB::SE1"]}
    workload:
      - {type: job, at: 0, executable: sim.sh, priority: 100,
         input_data: [/a/f], duration: 60000, exit_code: 0}
      - {type: transfer, at: 0, name: t1, lfn: /a/f,
         destination_se: "SiteC::SE1", kind: mirror}
    faults:
      - {at: 1000, kind: agent-crash, target: ceA1}
      - {at: 2000, kind: broker-pause, target: job, duration: 60000}

Fault kinds: agent-crash, ce-stop, ce-start, broker-pause,
transport-failure, stage-failure, clean-failure.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Any

import yaml

from ..catalogue import REPLICATION_KINDS, site_of

FAULT_KINDS = ("agent-crash", "ce-stop", "ce-start", "broker-pause",
               "transport-failure", "stage-failure", "clean-failure")


class ScenarioError(ValueError):
    def __init__(self, message, where=None):
        super().__init__(message if where is None else "%s: %s" % (where, message))
        self.where = where


class DanglingReference(ScenarioError):
    pass


@dataclass
class SEConfig:
    name: str
    capacity: int = 10**12
    mss: bool = False
    bandwidth: int = 10_000_000


@dataclass
class CEConfig:
    name: str
    slots: int = 1
    start_latency: int = 0
    close_se: list[str] = field(default_factory=list)
    packages: list[str] = field(default_factory=list)
    partitions: list[str] = field(default_factory=list)
    poll_interval: int = 30_000
    requirements: str | None = None


@dataclass
class FTDConfig:
    name: str
    close_se: str
    cache: int = 10**9
    stage_latency: int = 2000
    poll_interval: int = 30_000


@dataclass
class SiteConfig:
    name: str
    ses: list[SEConfig] = field(default_factory=list)
    ces: list[CEConfig] = field(default_factory=list)
    ftds: list[FTDConfig] = field(default_factory=list)


@dataclass
class FileConfig:
    lfn: str
    size: int
    se: str
    mirrors: list[str] = field(default_factory=list)


@dataclass
class JobSubmission:
    at: int
    executable: str
    priority: int = 100
    arguments: list[str] = field(default_factory=list)
    input_data: list[str] = field(default_factory=list)
    output_data: list[str] = field(default_factory=list)
    packages: list[str] = field(default_factory=list)
    validate: bool = False
    requirements: str | None = None
    duration: int = 60_000
    exit_code: int = 0
    produced: list[str] | None = None
    partial_output: str = ""
    name: str | None = None


@dataclass
class TransferSubmission:
    at: int
    lfn: str
    destination_se: str
    kind: str = "mirror"
    priority: int = 100
    transport: str = "sim-copy"
    name: str | None = None


@dataclass
class FaultConfig:
    at: int
    kind: str
    target: str
    duration: int | None = None


@dataclass
class Scenario:
    sites: list[SiteConfig]
    workload: list[Any] = field(default_factory=list)
    faults: list[FaultConfig] = field(default_factory=list)
    files: list[FileConfig] = field(default_factory=list)
    seed: int = 0
    horizon: int = 7 * 24 * 3600 * 1000
    retry_hint_ms: int = 30_000
    optimizer_interval_ms: int = 60_000
    tag_sites: bool = True
    bulk_threshold: int | None = None
    auto_replicate: bool = False
    tag_jobs: bool = False
    synthetic: bool = True

    @property
    def jobs(self):
        return [w for w in self.workload if isinstance(w, JobSubmission)]

    @property
    def transfers(self):
        return [w for w in self.workload if isinstance(w, TransferSubmission)]

    def ses(self):
        return [se for s in self.sites for se in s.ses]

    def ces(self):
        return [(s.name, ce) for s in self.sites for ce in s.ces]

    def ftds(self):
        return [(s.name, f) for s in self.sites for f in s.ftds]


def _int(v, where):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or v != int(v):
        raise ScenarioError("expected an integer, got %r" % (v,), where)
    return int(v)


def _build(cls, raw, where, ints=()):
    if not isinstance(raw, dict):
        raise ScenarioError("expected a mapping", where)
    names = set(cls.__dataclass_fields__)
    extra = set(raw) - names
    if extra:
        raise ScenarioError("unknown keys %s" % sorted(extra), where)
    kw = dict(raw)
    for k in ints:
        if k in kw and kw[k] is not None:
            kw[k] = _int(kw[k], "%s.%s" % (where, k))
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ScenarioError(str(exc), where) from None


def scenario_from_dict(raw: dict) -> Scenario:
    if not isinstance(raw, dict):
        raise ScenarioError("scenario must be a mapping")
    raw = dict(raw)
    sites = []
    for i, s in enumerate(raw.pop("sites", None) or []):
        w = "sites[%d]" % i
        if not isinstance(s, dict) or "name" not in s:
            raise ScenarioError("site needs a name", w)
        sites.append(SiteConfig(
            s["name"],
            [_build(SEConfig, x, "%s.ses[%d]" % (w, j), ("capacity", "bandwidth"))
             for j, x in enumerate(s.get("ses") or [])],
            [_build(CEConfig, x, "%s.ces[%d]" % (w, j), ("slots", "start_latency", "poll_interval"))
             for j, x in enumerate(s.get("ces") or [])],
            [_build(FTDConfig, x, "%s.ftds[%d]" % (w, j), ("cache", "stage_latency", "poll_interval"))
             for j, x in enumerate(s.get("ftds") or [])],
        ))
        extra = set(s) - {"name", "ses", "ces", "ftds"}
        if extra:
            raise ScenarioError("unknown keys %s" % sorted(extra), w)
    files = [_build(FileConfig, f, "files[%d]" % i, ("size",))
             for i, f in enumerate(raw.pop("files", None) or [])]
    workload = []
    for i, w in enumerate(raw.pop("workload", None) or []):
        where = "workload[%d]" % i
        if not isinstance(w, dict):
            raise ScenarioError("expected a mapping", where)
        w = dict(w)
        kind = w.pop("type", None)
        if kind == "job":
            workload.append(_build(JobSubmission, w, where, ("at", "priority", "duration", "exit_code")))
        elif kind == "transfer":
            workload.append(_build(TransferSubmission, w, where, ("at", "priority")))
        else:
            raise ScenarioError("type must be 'job' or 'transfer'", where)
    faults = [_build(FaultConfig, f, "faults[%d]" % i, ("at", "duration"))
              for i, f in enumerate(raw.pop("faults", None) or [])]
    sc = _build(Scenario, dict(raw, sites=sites, files=files, workload=workload, faults=faults),
                "scenario", ("seed", "horizon", "retry_hint_ms", "optimizer_interval_ms",
                             "bulk_threshold"))
    validate_scenario(sc)
    return sc


def validate_scenario(sc: Scenario):
    if sc.horizon <= 0:
        raise ScenarioError("horizon must be positive")
    if not sc.sites:
        raise ScenarioError("scenario has no sites")
    site_names = set()
    agents = {}
    ses = {}
    for s in sc.sites:
        if s.name in site_names:
            raise ScenarioError("duplicate site %s" % s.name)
        site_names.add(s.name)
        if not s.ces and not s.ftds:
            raise ScenarioError("site %s has neither CEs nor FTDs" % s.name)
        for se in s.ses:
            try:
                if site_of(se.name) != s.name:
                    raise ScenarioError("SE %s listed under site %s" % (se.name, s.name))
            except ValueError as exc:
                raise ScenarioError(str(exc)) from None
            if se.name in ses:
                raise ScenarioError("duplicate SE %s" % se.name)
            ses[se.name] = se
    for s in sc.sites:
        for ce in s.ces:
            if ce.slots < 1:
                raise ScenarioError("CE %s needs at least one slot" % ce.name)
            for se in ce.close_se:
                if se not in ses:
                    raise DanglingReference("CE %s refers to undefined SE %s" % (ce.name, se))
                if site_of(se) != s.name:
                    raise ScenarioError("CE %s close SE %s is at another site" % (ce.name, se))
            if ce.name in agents:
                raise ScenarioError("duplicate agent name %s" % ce.name)
            agents[ce.name] = "ce"
        for f in s.ftds:
            if f.close_se not in ses:
                raise DanglingReference("FTD %s refers to undefined SE %s" % (f.name, f.close_se))
            if site_of(f.close_se) != s.name:
                raise ScenarioError("FTD %s close SE %s is at another site" % (f.name, f.close_se))
            if f.name in agents:
                raise ScenarioError("duplicate agent name %s" % f.name)
            agents[f.name] = "ftd"
    lfns = set()
    for f in sc.files:
        if f.lfn in lfns:
            raise ScenarioError("duplicate file %s" % f.lfn)
        lfns.add(f.lfn)
        for se in [f.se] + list(f.mirrors):
            if se not in ses:
                raise DanglingReference("file %s refers to undefined SE %s" % (f.lfn, se))
    named = set()
    for w in sc.workload:
        if w.name:
            if w.name in named:
                raise ScenarioError("duplicate workload name %s" % w.name)
            named.add(w.name)
        if isinstance(w, JobSubmission):
            for lfn in w.input_data:
                if lfn not in lfns:
                    raise DanglingReference("job %s uses undefined file %s" % (w.executable, lfn))
        else:
            if w.lfn not in lfns:
                raise DanglingReference("transfer of undefined file %s" % w.lfn)
            if w.destination_se not in ses:
                raise DanglingReference("transfer to undefined SE %s" % w.destination_se)
            if w.kind not in REPLICATION_KINDS:
                raise ScenarioError("unknown transfer kind %r" % w.kind)
    for f in sc.faults:
        if f.kind not in FAULT_KINDS:
            raise ScenarioError("unknown fault kind %r" % f.kind)
        if f.kind in ("agent-crash",):
            ok = f.target in agents
        elif f.kind in ("ce-stop", "ce-start"):
            ok = agents.get(f.target) == "ce" or f.target in site_names
        elif f.kind == "broker-pause":
            ok = f.target in ("job", "transfer", "all")
        else:
            ok = f.target in named
        if not ok:
            raise DanglingReference("fault %s targets unknown %r" % (f.kind, f.target))


def load_scenario(source) -> Scenario:
    """Load a scenario from a path, ``"-"`` for stdin, or a file object."""
    if hasattr(source, "read"):
        text, where = source.read(), getattr(source, "name", "<stream>")
    elif source == "-":
        import sys
        text, where = sys.stdin.read(), "<stdin>"
    else:
        if not os.path.exists(source):
            raise ScenarioError("no such scenario file", str(source))
        with open(source, encoding="utf-8") as fh:
            text, where = fh.read(), str(source)
    return parse_scenario_text(text, where)


def parse_scenario_text(text: str, where="<string>") -> Scenario:
    try:
        raw = json.loads(text)
    except ValueError:
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            loc = "%s:%d:%d" % (where, mark.line + 1, mark.column + 1) if mark else where
            raise ScenarioError("parse error: %s" % getattr(exc, "problem", exc), loc) from None
    try:
        return scenario_from_dict(raw)
    except ScenarioError as exc:
        if exc.where is None or not str(exc.where).startswith(where):
            raise type(exc)(str(exc), where) from None
        raise


def scenario_to_dict(sc: Scenario) -> dict:
    from dataclasses import asdict
    out = asdict(sc)
    out["workload"] = [dict(asdict(w), type="job" if isinstance(w, JobSubmission) else "transfer")
                       for w in sc.workload]
    return out
