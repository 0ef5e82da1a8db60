"""Seeded random scenarios for the scale campaigns.

Durations and sizes are uniform draws over fixed ranges; nothing here is
calibrated against a real grid, and generated scenarios say so
(``synthetic: true``).
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .scenario import (
    CEConfig, FaultConfig, FileConfig, FTDConfig, JobSubmission, Scenario, SEConfig,
    SiteConfig, TransferSubmission, validate_scenario,
)


@dataclass
class GeneratorConfig:
    sites: int = 35
    jobs: int = 1000
    transfers: int = 0
    seed: int = 0
    ces_per_site: tuple[int, int] = (1, 3)
    slots: tuple[int, int] = (2, 8)
    user_fraction: float = 0.5          # priority 100; the rest production (0)
    input_fraction: float = 0.3
    validate_fraction: float = 0.05
    duration_ms: tuple[int, int] = (60_000, 600_000)
    arrival_window_ms: int = 3_600_000
    file_size: tuple[int, int] = (1024, 65_536)
    files_per_job: float = 0.05
    replicas: tuple[int, int] = (1, 2)
    mss_fraction: float = 0.0
    horizon_ms: int = 14 * 24 * 3600 * 1000
    optimizer_interval_ms: int = 60_000
    poll_interval_ms: int = 30_000


def site_name(i):
    return "Site%02d" % i


def generate_scenario(cfg: GeneratorConfig | None = None, **kw) -> Scenario:
    cfg = cfg or GeneratorConfig(**kw)
    rng = random.Random(cfg.seed)
    sites = []
    for i in range(cfg.sites):
        name = site_name(i)
        se = "%s::SE" % name
        ces = [CEConfig("ce%02d_%d" % (i, j), slots=rng.randint(*cfg.slots),
                        start_latency=rng.randrange(0, 2000), close_se=[se],
                        poll_interval=cfg.poll_interval_ms)
               for j in range(rng.randint(*cfg.ces_per_site))]
        ftds = [FTDConfig("ftd%02d" % i, se, cache=10**9, poll_interval=cfg.poll_interval_ms)]
        sites.append(SiteConfig(name, [SEConfig(se, 10**13, rng.random() < cfg.mss_fraction)],
                                ces, ftds))
    se_names = [s.ses[0].name for s in sites]
    n_files = max(1, round(cfg.jobs * cfg.files_per_job)) if cfg.jobs else max(1, cfg.transfers // 4)
    files = []
    for k in range(n_files):
        homes = rng.sample(se_names, min(len(se_names), rng.randint(*cfg.replicas)))
        files.append(FileConfig("/grid/data/f%05d" % k, rng.randint(*cfg.file_size),
                                homes[0], homes[1:]))
    workload = []
    for n in range(cfg.jobs):
        inputs = [rng.choice(files).lfn] if rng.random() < cfg.input_fraction else []
        validate = rng.random() < cfg.validate_fraction
        workload.append(JobSubmission(
            at=rng.randrange(cfg.arrival_window_ms), executable="sim%d.sh" % (n % 7),
            priority=100 if rng.random() < cfg.user_fraction else 0,
            input_data=inputs, output_data=["out.root"] if validate else [],
            validate=validate, duration=rng.randint(*cfg.duration_ms),
            name="job%d" % n))
    # replicas already planned per file, so no replication request is redundant
    planned = {f.lfn: {f.se, *f.mirrors} for f in files}
    for n in range(cfg.transfers):
        f = rng.choice(files)
        have = planned[f.lfn]
        dest = rng.choice([s for s in se_names if s not in have] or se_names)
        kind = rng.choice(("mirror", "cache", "masterCopy")) if dest not in have else "cache"
        if kind != "cache":
            have.add(dest)
        workload.append(TransferSubmission(
            at=rng.randrange(cfg.arrival_window_ms), lfn=f.lfn, destination_se=dest, kind=kind,
            priority=100 if rng.random() < cfg.user_fraction else 0, name="xfer%d" % n))
    workload.sort(key=lambda w: w.at)
    sc = Scenario(sites, workload, [], files, seed=cfg.seed, horizon=cfg.horizon_ms,
                  optimizer_interval_ms=cfg.optimizer_interval_ms)
    validate_scenario(sc)
    return sc


def crash_faults(sc: Scenario, fraction: float, at: int, seed: int = 0,
                 pause_at: int | None = None, pause_ms: int = 600_000) -> list[FaultConfig]:
    """Crash ``fraction`` of the CEs at ``at`` and optionally pause the job broker."""
    rng = random.Random(seed)
    names = sorted(ce.name for _, ce in sc.ces())
    k = round(len(names) * fraction)
    faults = [FaultConfig(at, "agent-crash", n) for n in sorted(rng.sample(names, k))]
    if pause_at is not None:
        faults.append(FaultConfig(pause_at, "broker-pause", "job", pause_ms))
    return faults
