#!/usr/bin/env python3
"""Hammer a live service with concurrent job polls and check for double assignment.

Starts its own service on a free port unless --server is given.
"""

import argparse
import sys
import threading
import time
from collections import Counter

from gridbroker.config import ServiceConfig
from gridbroker.service import ApiClient, serve


def one_round(url, tasks, agents, polls):
    c = ApiClient(url)
    for i in range(tasks):
        c.call("POST", "/job", {"descriptor": 'Executable = "stress%d.sh";' % i})
    c.close()
    got = Counter()
    lock = threading.Lock()

    def agent(k):
        cl = ApiClient(url)
        desc = {"descriptor": 'Name = "stress%d"; Site = "Site%02d";' % (k, k % 35)}
        for _ in range(polls // agents):
            st, r = cl.call("POST", "/poll/job", desc)
            if r["ok"] and r["result"]["match"]:
                with lock:
                    got[r["result"]["task_id"]] += 1
        cl.close()

    ts = [threading.Thread(target=agent, args=(k,)) for k in range(agents)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    return got


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--tasks", type=int, default=1000)
    p.add_argument("--agents", type=int, default=50)
    p.add_argument("--polls", type=int, default=10_000)
    p.add_argument("--rounds", type=int, default=1)
    p.add_argument("--workers", type=int, default=5)
    args = p.parse_args()

    bad = 0
    for n in range(args.rounds):
        h = serve(ServiceConfig(port=0, worker_count=args.workers, optimizer_interval_ms=0,
                                retry_hint_ms=0))
        t0 = time.perf_counter()
        try:
            got = one_round(h.url, args.tasks, args.agents, args.polls)
        finally:
            h.stop()
        dup = sum(1 for v in got.values() if v > 1)
        ok = len(got) == args.tasks and not dup
        bad += not ok
        print("round %d: %d assigned, %d duplicated, %.1f s %s"
              % (n + 1, len(got), dup, time.perf_counter() - t0, "ok" if ok else "FAIL"))
    return 1 if bad else 0


if __name__ == "__main__":
    sys.exit(main())
