"""Post-run audits over journals and traces."""

from __future__ import annotations

from collections import Counter

from ..descriptor import parse_descriptor, symmetric_match
from ..store import TaskStore, parse_journal


def duplicate_assignments(journal_text: str) -> list[int]:
    """Task ids with more than one WAITING -> ASSIGNED edge."""
    counts = Counter(e.task_id for e in parse_journal(journal_text)
                     if e.old == "WAITING" and e.new == "ASSIGNED")
    return sorted(t for t, n in counts.items() if n > 1)


def priority_violations(events: list[dict], kind: str = "job", limit: int | None = None):
    """Replay the event log and look for priority inversions.

    For each assignment, every task still WAITING at that instant with a
    strictly higher priority is matched against the assigned resource's
    descriptor. Any match is a violation. Results are cached per
    (task descriptor, resource descriptor) pair.
    """
    waiting: dict[int, tuple[int, str]] = {}
    parsed: dict[str, object] = {}
    cache: dict[tuple[str, str], bool] = {}
    out = []
    last_claimed = (None, None)

    def desc(text):
        d = parsed.get(text)
        if d is None:
            d = parsed[text] = parse_descriptor(text)
        return d

    for e in events:
        if e.get("kind") != kind:
            continue
        ev = e["ev"]
        if ev == "insert":
            waiting[e["task"]] = (e["priority"], e["descriptor"])
        elif ev == "rewrite" and e["task"] in waiting:
            waiting[e["task"]] = (waiting[e["task"]][0], e["descriptor"])
        elif ev == "transition" and e["old"] == "WAITING":
            claimed = waiting.pop(e["task"], None)
            if claimed is not None and e["new"] == "ASSIGNED":
                last_claimed = (e["task"], claimed[0])
        elif ev == "assign":
            tid, prio = last_claimed
            if tid != e["task"]:
                raise ValueError("assignment of %d without its claim" % e["task"])
            res = e["resource_descriptor"]
            for other, (p, text) in waiting.items():
                if p <= prio:
                    continue
                key = (text, res)
                hit = cache.get(key)
                if hit is None:
                    hit = cache[key] = symmetric_match(desc(text), desc(res))
                if hit:
                    out.append({"t": e["t"], "assigned": tid, "priority": prio,
                                "skipped": other, "skipped_priority": p,
                                "resource": e["resource"]})
                    if limit and len(out) >= limit:
                        return out
    return out


def timing_violations(store: TaskStore, end: int) -> list[int]:
    """Tasks whose per-state durations do not sum to their lifetime.

    Lifetime comes from the journal (first to last entry, or ``end`` for
    live tasks); durations come from the task's own state log.
    """
    first: dict[int, int] = {}
    last: dict[int, int] = {}
    for e in store.journal:
        first.setdefault(e.task_id, e.ts)
        last[e.task_id] = e.ts
    bad = []
    for t in store.tasks():
        report = store.state_timing_report(t.id, end)
        if t.is_terminal():
            total = sum(d for _, d in report[:-1])
            lifetime = last[t.id] - first[t.id]
        else:
            total = sum(d for _, d in report)
            lifetime = end - first[t.id]
        if total != lifetime or any(d < 0 for _, d in report):
            bad.append(t.id)
    return bad
