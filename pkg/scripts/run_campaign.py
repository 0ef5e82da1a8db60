#!/usr/bin/env python3
"""Run a generated scale campaign and print its audits.

    python3 scripts/run_campaign.py --jobs 10000 --sites 35
    python3 scripts/run_campaign.py --jobs 10000 --crash 0.2 --pause 900
"""

import argparse
import json
import time

from gridbroker.sim import generate_scenario, run_simulation
from gridbroker.sim.audit import duplicate_assignments, priority_violations, timing_violations
from gridbroker.sim.generate import crash_faults


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sites", type=int, default=35)
    p.add_argument("--jobs", type=int, default=10_000)
    p.add_argument("--transfers", type=int, default=0)
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--crash", type=float, default=0.0, help="fraction of CEs crashed mid-run")
    p.add_argument("--pause", type=int, default=0, help="job broker pause, seconds")
    p.add_argument("--no-priority-audit", action="store_true", help="skip the replay check")
    p.add_argument("--metrics", help="write the metrics JSON here")
    args = p.parse_args()

    sc = generate_scenario(sites=args.sites, jobs=args.jobs, transfers=args.transfers, seed=args.seed)
    faults = []
    if args.crash or args.pause:
        faults = crash_faults(sc, args.crash, at=1_800_000, seed=args.seed,
                              pause_at=2_400_000 if args.pause else None,
                              pause_ms=args.pause * 1000)
    t0 = time.perf_counter()
    tr = run_simulation(sc, faults=faults)
    wall = time.perf_counter() - t0
    m = tr.metrics
    print("wall clock      %.1f s (simulated %.1f h, stop=%s)"
          % (wall, m["end_time"] / 3.6e6, m["stop_reason"]))
    for kind in ("job", "transfer"):
        k = m[kind]
        if k["tasks"]:
            print("%-15s %d submitted, %d terminal, %d pending, %s"
                  % (kind, k["submitted"], k["terminal"], k["pending"], k["status_counts"]))
    print("duplicates      %d" % (len(duplicate_assignments(tr.job_journal))
                                  + len(duplicate_assignments(tr.transfer_journal))))
    print("timing errors   %d" % (len(timing_violations(tr.sim.jobs, tr.sim.now))
                                  + len(timing_violations(tr.sim.transfers, tr.sim.now))))
    if not args.no_priority_audit:
        print("priority inversions %d" % len(priority_violations(tr.events)))
    if args.metrics:
        with open(args.metrics, "w") as fh:
            json.dump(m, fh, indent=1, sort_keys=True)


if __name__ == "__main__":
    main()
