"""Acceptance campaigns.

Each test prints one ``[Cn] PASS|FAIL ...`` line (collected and repeated
in the terminal summary by conftest).  Heavy campaigns are computed once
and shared between the criteria that read them.

Run just this file with ``pytest tests/test_acceptance.py -v``; set
GRIDBROKER_LONG=1 to include the 100k-job long mode.
"""

import dataclasses
import functools
import os
import random
import threading
import time
from collections import Counter

import pytest

from gridbroker.catalogue import CACHE, MASTER_COPY, MIRROR, Catalogue
from gridbroker.config import ServiceConfig
from gridbroker.descriptor import parse_descriptor, symmetric_match
from gridbroker.service import ApiClient, serve
from gridbroker.sim import FaultConfig, generate_scenario, parse_scenario_text, run_simulation
from gridbroker.sim.audit import duplicate_assignments, priority_violations, timing_violations
from gridbroker.sim.generate import crash_faults
from gridbroker.store import Status as S, parse_journal
from gridbroker.transfers import checksum, physical_name, synthetic_content

from conftest import record_result
from gen_exprs import random_pair
from reference_eval import ref_match, render_ad

A1_SEED = 2024
A1_BUDGET_S = 120.0


def report(cid, ok, detail):
    record_result(cid, ok, detail)
    assert ok, detail


# -- shared campaigns ----------------------------------------------------------

@functools.lru_cache(maxsize=None)
def campaign_a1(jobs=10_000):
    sc = generate_scenario(sites=35, jobs=jobs, seed=A1_SEED)
    t0 = time.perf_counter()
    tr = run_simulation(sc)
    return sc, tr, time.perf_counter() - t0


@functools.lru_cache(maxsize=None)
def campaign_a9():
    sc = generate_scenario(sites=35, jobs=10_000, seed=A1_SEED)
    # crash in the middle of the arrival window, pause the broker shortly after
    faults = crash_faults(sc, 0.2, at=1_800_000, seed=9, pause_at=2_400_000, pause_ms=900_000)
    return sc, faults, run_simulation(sc, faults=faults)


def c5_workload(k):
    rng = random.Random(10_000 + k)
    return generate_scenario(sites=rng.randint(3, 6), jobs=0, transfers=rng.randint(2, 12),
                             seed=k, mss_fraction=rng.choice((0.0, 0.3)))


@functools.lru_cache(maxsize=None)
def campaign_c5(n=1000):
    rows = []
    timing = 0
    for k in range(n):
        sc = c5_workload(k)
        on = run_simulation(sc)
        off = run_simulation(dataclasses.replace(sc, tag_sites=False))
        rows.append((k,
                     Counter((e["task"], e["site"]) for e in on.assignments()),
                     Counter((e["task"], e["site"]) for e in off.assignments()),
                     on.metrics["transfer"]["match_evaluations"],
                     off.metrics["transfer"]["match_evaluations"]))
        for tr in (on, off):
            timing += len(timing_violations(tr.sim.transfers, tr.sim.now))
    return rows, timing


@functools.lru_cache(maxsize=None)
def campaign_c7():
    sc = generate_scenario(sites=10, jobs=0, transfers=500, seed=77, mss_fraction=0.3)
    rng = random.Random(7)
    names = [t.name for t in sc.transfers]
    faulted = set(rng.sample(names, len(names) // 10))
    faults = [FaultConfig(0, "transport-failure", n) for n in sorted(faulted)]
    return sc, faulted, run_simulation(sc, faults=faults)


C10 = """
seed: 10
optimizer_interval_ms: 60000
sites:
  - name: S1
    ses: [{name: "S1::SE"}]
    ftds: [{name: ftd1, close_se: "S1::SE"}]
  - name: S2
    ses: [{name: "S2::SE"}]
    ces: [{name: ce2, slots: 2, close_se: ["S2::SE"]}]
    ftds: [{name: ftd2, close_se: "S2::SE"}]
files:
  - {lfn: /data/run7.raw, size: 50000, se: "S1::SE"}
workload:
  - {type: job, at: 0, name: pinned, executable: reco.sh, input_data: [/data/run7.raw],
     duration: 30000}
  - {type: transfer, at: 600000, name: replicate, lfn: /data/run7.raw,
     destination_se: "S2::SE", kind: mirror}
"""


@functools.lru_cache(maxsize=None)
def campaign_c10():
    return run_simulation(parse_scenario_text(C10, "c10"))


# -- criteria ------------------------------------------------------------------

def test_c01_scale_campaign_a1():
    sc, tr, wall = campaign_a1()
    m = tr.metrics["job"]
    dups = duplicate_assignments(tr.job_journal)
    ok = (wall < A1_BUDGET_S and m["terminal"] == 10_000 == m["submitted"]
          and tr.metrics["stop_reason"] == "quiescent" and not dups)
    n_hi = sum(1 for j in sc.jobs if j.priority == 100)
    n_in = sum(1 for j in sc.jobs if j.input_data)
    report("C1", ok, "35 sites, 10000 jobs (%d prio-100, %d with input): %.1f s wall, "
           "%d terminal, stop=%s, %d duplicate assignments"
           % (n_hi, n_in, wall, m["terminal"], tr.metrics["stop_reason"], len(dups)))


@pytest.mark.slow
@pytest.mark.skipif(not os.environ.get("GRIDBROKER_LONG"), reason="set GRIDBROKER_LONG=1")
def test_c01_long_mode_100k():
    sc, tr, wall = campaign_a1(100_000)
    dups = duplicate_assignments(tr.job_journal)
    ok = tr.metrics["job"]["terminal"] == 100_000 and not dups
    report("C1-long", ok, "100000 jobs: %.1f s wall, %d terminal, %d duplicates"
           % (wall, tr.metrics["job"]["terminal"], len(dups)))


def test_c02_priority_ordering():
    _, tr, _ = campaign_a1()
    viol = priority_violations(tr.events, "job")
    n = len(tr.assignments())
    report("C2", not viol and n == 10_000,
           "%d assignments replayed, %d priority violations" % (n, len(viol)))


def _stress_round(n_tasks=1000, n_agents=50, n_polls=10_000, n_sites=35):
    h = serve(ServiceConfig(port=0, worker_count=5, optimizer_interval_ms=0, retry_hint_ms=0))
    try:
        c = ApiClient(h.url)
        ids = set()
        for i in range(n_tasks):
            st, r = c.call("POST", "/job", {"descriptor": 'Executable = "s%d.sh";' % i,
                                            "priority": 100 if i % 2 else 0})
            ids.add(r["result"]["task_id"])
        c.close()
        got: list[tuple[int, str]] = []
        errors = []
        lock = threading.Lock()
        barrier = threading.Barrier(n_agents)

        def agent(k):
            name = "ce%02d" % k
            text = 'Name = "%s"; Site = "Site%02d";' % (name, k % n_sites)
            mine = []
            cl = ApiClient(h.url)
            try:
                barrier.wait()
                for _ in range(n_polls // n_agents):
                    st, r = cl.call("POST", "/poll/job", {"descriptor": text})
                    if st != 200:
                        errors.append(st)
                    elif r["result"]["match"]:
                        mine.append((r["result"]["task_id"], name))
            except Exception as exc:  # surfaced below
                errors.append(repr(exc))
            finally:
                cl.close()
            with lock:
                got.extend(mine)

        ts = [threading.Thread(target=agent, args=(k,)) for k in range(n_agents)]
        for t in ts:
            t.start()
        for t in ts:
            t.join()
        store = h.service.stores["job"]
        holder = {tid: a.resource_id for tid, a in h.service.brokers["job"].assignments.items()}
        journal = store.journal_text()
    finally:
        h.stop()
    edges = [e for e in parse_journal(journal) if e.old == "WAITING" and e.new == "ASSIGNED"]
    received = set(got)
    lost = [t.id for t in store.tasks()
            if t.status != S.ASSIGNED or (t.id, holder.get(t.id)) not in received]
    return {"assignments": len(edges), "received": len(got), "unique": len({i for i, _ in got}),
            "ids_match": {i for i, _ in got} == ids, "dups": len(duplicate_assignments(journal)),
            "lost": len(lost), "errors": errors}


def test_c03_concurrency_stress():
    rounds = [_stress_round() for _ in range(20)]
    bad = [i for i, r in enumerate(rounds)
           if not (r["assignments"] == r["received"] == r["unique"] == 1000 and r["ids_match"]
                   and r["dups"] == 0 and r["lost"] == 0 and not r["errors"])]
    worst = rounds[bad[0]] if bad else rounds[-1]
    report("C3", not bad, "20 rounds x (5 workers, 50 agents, 10000 polls, 1000 tasks): "
           "%d bad rounds; sample round %s" % (len(bad), {k: v for k, v in worst.items()
                                                         if k != "errors"}))


def test_c04_match_oracle():
    agree = sym = 0
    outcomes = Counter()
    N = 10_000
    for seed in range(N):
        a, b = random_pair(seed)
        da, db = parse_descriptor(render_ad(a)), parse_descriptor(render_ad(b))
        got = symmetric_match(da, db)
        want = ref_match(a, b)
        agree += got == want
        sym += got == symmetric_match(db, da)
        outcomes[want] += 1
    report("C4", agree == N and sym == N,
           "%d pairs: oracle agreement %d/%d, symmetry %d/%d (reference matches: %d true, %d false)"
           % (N, agree, N, sym, N, outcomes[True], outcomes[False]))


def test_c05_prefilter_equivalence():
    rows, _ = campaign_c5()
    differ = [k for k, on, off, _, _ in rows if on != off]
    more = [k for k, _, _, eon, eoff in rows if eon > eoff]
    strict = sum(1 for *_, eon, eoff in rows if eon < eoff)
    tot_on = sum(r[3] for r in rows)
    tot_off = sum(r[4] for r in rows)
    ok = not differ and not more and tot_on < tot_off
    report("C5", ok, "%d workloads: %d with differing assignment multisets; evaluations "
           "tagged %d vs untagged %d; strictly fewer in %d runs, equal in %d, more in %d"
           % (len(rows), len(differ), tot_on, tot_off, strict, len(rows) - strict - len(more),
              len(more)))


def _c6_catalogue():
    ticks = iter(range(1, 1000))
    cat = Catalogue(clock=lambda: next(ticks))
    for se in ("CERN::MSS", "CERN::DISK", "Lyon::SE", "Torino::SE"):
        cat.add_storage_element(se, capacity=10_000)
    return cat


def test_c06_replication_semantics():
    checks = []
    cat = _c6_catalogue()
    cat.register_file("/alice/run1.root", "castor:/r1", "CERN::MSS", 100)
    checks.append(("register", cat.dump(),
                   "/alice/run1.root\t100\tmaster=CERN::MSS,castor:/r1\n"))
    cat.add_replica("/alice/run1.root", "lyon:/r1", "Lyon::SE", MIRROR)
    checks.append(("mirror", cat.dump(),
                   "/alice/run1.root\t100\tmaster=CERN::MSS,castor:/r1\tmirror=Lyon::SE,lyon:/r1\n"))
    cat.add_replica("/alice/run1.root", "to:/r1", "Torino::SE", MASTER_COPY)
    checks.append(("masterCopy", cat.dump(),
                   "/alice/run1.root\t100\tmaster=Torino::SE,to:/r1"
                   "\tmirror=CERN::MSS,castor:/r1\tmirror=Lyon::SE,lyon:/r1\n"))
    before = cat.dump()
    assert cat.add_replica("/alice/run1.root", "scratch:/r1", "CERN::DISK", CACHE) is None
    checks.append(("cache", cat.dump(), before))
    look = lambda site: ",".join(r.pfn for r in cat.lookup("/alice/run1.root", site))  # noqa: E731
    checks.append(("lookup Lyon", look("Lyon"), "lyon:/r1,to:/r1,castor:/r1"))
    checks.append(("lookup CERN", look("CERN"), "castor:/r1,to:/r1,lyon:/r1"))
    checks.append(("lookup elsewhere", look("Nowhere"), "to:/r1,castor:/r1,lyon:/r1"))
    checks.append(("cache used bytes", str(cat.storage["CERN::DISK"].used), "0"))

    # the same three kinds end to end through the simulated transfer path
    tr = run_simulation(parse_scenario_text("""
sites:
  - {name: A, ses: [{name: "A::SE"}], ftds: [{name: ftdA, close_se: "A::SE"}]}
  - {name: B, ses: [{name: "B::SE"}], ftds: [{name: ftdB, close_se: "B::SE"}]}
  - {name: C, ses: [{name: "C::SE"}], ftds: [{name: ftdC, close_se: "C::SE"}]}
files:
  - {lfn: /m, size: 10, se: "A::SE"}
  - {lfn: /p, size: 20, se: "A::SE"}
  - {lfn: /c, size: 30, se: "A::SE"}
workload:
  - {type: transfer, at: 0, lfn: /m, destination_se: "B::SE", kind: mirror}
  - {type: transfer, at: 0, lfn: /p, destination_se: "C::SE", kind: masterCopy}
  - {type: transfer, at: 0, lfn: /c, destination_se: "B::SE", kind: cache}
""", "c6"))
    checks.append(("simulated transfers", tr.catalogue_dump,
                   "/c\t30\tmaster=A::SE,sim://A::SE/c\n"
                   "/m\t10\tmaster=A::SE,sim://A::SE/m\tmirror=B::SE,sim://B::SE/m\n"
                   "/p\t20\tmaster=C::SE,sim://C::SE/p\tmirror=A::SE,sim://A::SE/p\n"))
    bad = [name for name, got, want in checks if got != want]
    report("C6", not bad, "%d bit-exact dump/lookup checks, mismatches: %s"
           % (len(checks), bad or "none"))


PHASES = [S.WAITING, S.ASSIGNED, S.LOCAL_COPYING, S.TRANSFERRING, S.CLEANING, S.DONE]
FAILURE_AT = {S.FAILED_LOCAL: 3, S.FAILED_TRANSFER: 4, S.FAILED_CLEAN: 5}


def _phase_sequence_ok(statuses):
    if statuses == PHASES:
        return True
    end = statuses[-1]
    return end in FAILURE_AT and statuses[:-1] == PHASES[:FAILURE_AT[end]]


def test_c07_transfer_integrity():
    sc, faulted, tr = campaign_c7()
    sim = tr.sim
    files = {f.lfn: f for f in sc.files}
    problems = Counter()
    tasks = sim.transfers.tasks()
    failed_clean = {t.id for t in tasks if t.status == S.FAILED_CLEAN}
    for t in tasks:
        spec = t.spec
        statuses = [s for s, _ in t.state_log]
        if not _phase_sequence_ok(statuses):
            problems["phase sequence"] += 1
        if S.LOCAL_COPYING in statuses:
            i = statuses.index(S.LOCAL_COPYING)
            lc_ms = t.state_log[i + 1][1] - t.state_log[i][1]
            mss = sim.catalogue.storage_element(t.meta["source_se"]).mss
            if (lc_ms == 0) == mss:
                problems["LOCAL_COPYING duration vs MSS"] += 1
        if t.status == S.DONE:
            f = files[spec.lfn]
            want = checksum(synthetic_content(f.lfn, f.size, sc.seed))
            got = checksum(sim.fs.get(spec.destination_se, physical_name(spec.destination_se, f.lfn)))
            if got != want:
                problems["checksum"] += 1
        named_fault = t.meta.get("name") in faulted
        if named_fault != (t.status == S.FAILED_TRANSFER):
            problems["fault outcome"] += 1
    for ftd in sim.ftds.values():
        for key in ftd.scratch:
            if int(key.split(":", 1)[0]) not in failed_clean:
                problems["scratch leftover"] += 1
    counts = Counter(str(t.status) for t in tasks)
    mss_sources = sum(1 for t in tasks if sim.catalogue.storage_element(t.meta["source_se"]).mss)
    report("C7", len(tasks) == 500 and not problems,
           "500 transfers, %d faulted, %d from MSS sources, outcomes %s, problems %s"
           % (len(faulted), mss_sources, dict(counts), dict(problems) or "none"))


def test_c08_timing_accounting():
    results = {}
    _, a1, _ = campaign_a1()
    _, _, a9 = campaign_a9()
    _, _, c7 = campaign_c7()
    c10 = campaign_c10()
    for name, tr in (("A1", a1), ("A9", a9), ("C7", c7), ("C10", c10)):
        for store in (tr.sim.jobs, tr.sim.transfers):
            results["%s/%s" % (name, store.kind)] = (len(store), len(timing_violations(store, tr.sim.now)))
    _, c5_bad = campaign_c5()
    results["C5/transfer(2000 runs)"] = (None, c5_bad)
    bad = {k: v for k, v in results.items() if v[1]}
    report("C8", not bad, "per-state durations sum to lifetime in %s; violations: %s"
           % (", ".join(results), bad or "none"))


def test_c09_fault_tolerance():
    sc, faults, tr = campaign_a9()
    sim = tr.sim
    crashed = {f.target for f in faults if f.kind == "agent-crash"}
    alive = [ce for ce in sim.ces.values() if ce.name not in crashed]
    pending = [t for t in sim.jobs.tasks() if not t.is_terminal()]
    satisfiable_pending = [t.id for t in pending
                           if any(symmetric_match(t.descriptor, ce.descriptor()) for ce in alive)]
    dups = duplicate_assignments(tr.job_journal)
    after = [e for e in tr.assignments() if e["t"] > faults[0].at and e["resource"] in crashed]
    pause = next(f for f in faults if f.kind == "broker-pause")
    in_pause = [e for e in tr.assignments() if pause.at <= e["t"] < pause.at + pause.duration]
    ok = not satisfiable_pending and not dups and not after and not in_pause
    report("C9", ok, "%d of %d CEs crashed, broker paused %d s: %d terminal, %d pending "
           "(%d of them satisfiable), %d duplicates, %d assignments to crashed CEs"
           % (len(crashed), len(sim.ces), pause.duration // 1000,
              tr.metrics["job"]["terminal"], len(pending), len(satisfiable_pending),
              len(dups), len(after)))


def test_c10_optimizer_rewrite():
    tr = campaign_c10()
    kind, jid = tr.sim.names["pinned"]
    _, xid = tr.sim.names["replicate"]
    ev = tr.events
    job = tr.sim.jobs.get(jid)
    ce_text = [e for e in ev if e["ev"] == "assign" and e["kind"] == "job"]
    xfer_done = next(e["t"] for e in ev if e["ev"] == "transfer-end" and e["task"] == xid
                     and e["status"] == "DONE")
    assign = next(e for e in ev if e["ev"] == "assign" and e["kind"] == "job" and e["task"] == jid)
    rewrites = [e for e in ev if e["ev"] == "rewrite" and e["kind"] == "job" and e["task"] == jid]
    inserted = next(e for e in ev if e["ev"] == "insert" and e["kind"] == "job" and e["task"] == jid)
    before = [inserted] + [e for e in rewrites if e["t"] < xfer_done]
    after = [e for e in rewrites if xfer_done <= e["t"] <= assign["t"]]
    ce2 = parse_descriptor(assign["resource_descriptor"])
    sleeps_before = [e for e in ev if e["ev"] == "sleep" and e["agent"] == "ce2" and e["t"] < xfer_done]
    journal = [e for e in parse_journal(tr.job_journal) if e.task_id == jid]
    ok = (assign["resource"] == "ce2" and assign["site"] == "S2"
          and before and not symmetric_match(parse_descriptor(before[-1]["descriptor"]), ce2)
          and after and symmetric_match(parse_descriptor(after[-1]["descriptor"]), ce2)
          and sleeps_before and journal[1].new == "ASSIGNED" and journal[1].ts == assign["t"] > xfer_done
          and job.status == S.DONE and len(ce_text) == 1)
    report("C10", ok, "replica at S2 at t=%d ms; job rewritten at t=%s; ce2 idle-polled %d times "
           "before; job assigned to %s at t=%d ms, final %s"
           % (xfer_done, [e["t"] for e in after], len(sleeps_before), assign["resource"],
              assign["t"], job.status))
