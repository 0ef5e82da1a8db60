"""Command-line entry point: ``gridbroker <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

from .config import ConfigError, load_agent_config, load_service_config, read_mapping

DEFAULT_SERVER = "http://127.0.0.1:8080"


class CliError(Exception):
    """Runtime failure reported with exit status 1."""


def _emit(args, data, text):
    if args.json:
        print(json.dumps(data, sort_keys=True, indent=1))
    else:
        print(text)


def _server(args):
    return args.server or os.environ.get("GRIDBROKER_SERVER", DEFAULT_SERVER)


def _client(args):
    from .service import ApiClient
    return ApiClient(_server(args), args.token)


def _call(args, method, path, payload=None):
    try:
        status, reply = _client(args).call(method, path, payload)
    except OSError as exc:
        raise CliError("cannot reach %s: %s" % (_server(args), exc)) from None
    if not reply.get("ok"):
        err = reply.get("error", {})
        raise CliError("%s: %s" % (err.get("code", status), err.get("message", "")))
    return reply["result"]


def _read_text(path):
    if path == "-":
        return sys.stdin.read()
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise CliError("%s: %s" % (path, exc.strerror)) from None


# -- commands ----------------------------------------------------------------

def cmd_serve(args):
    from .service import serve
    cfg = load_service_config(args.config, host=args.host, port=args.port, token=args.token)
    try:
        handle = serve(cfg, background=False)
    except OSError as exc:
        raise CliError("cannot bind %s:%d: %s" % (cfg.host, cfg.port, exc.strerror)) from None
    print("serving on %s" % handle.url, file=sys.stderr, flush=True)
    try:
        handle.server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        handle.server.server_close()
        handle.service.close()
    return 0


def cmd_agent(args):
    from .agents import CEAgent, FTDAgent
    cfg = load_agent_config(args.config, args.type)
    if args.server:
        cfg.server = args.server
    if args.token:
        cfg.token = args.token
    agent = CEAgent(cfg) if args.type == "ce" else FTDAgent(cfg)
    try:
        done = agent.run()
    except KeyboardInterrupt:
        agent.stop()
        done = agent.completed
    _emit(args, {"completed": done}, "\n".join("%d\t%s" % d for d in done) or "no tasks run")
    return 0


def cmd_submit_job(args):
    payload = {"descriptor": _read_text(args.file)}
    if args.priority is not None:
        payload["priority"] = args.priority
    res = _call(args, "POST", "/job", payload)
    _emit(args, res, "job %d %s" % (res["task_id"], res["status"]))
    return 0


def cmd_submit_transfer(args):
    res = _call(args, "POST", "/transfer", {"descriptor": _read_text(args.file)})
    _emit(args, res, "transfer %d %s" % (res["task_id"], res["status"]))
    return 0


def cmd_status(args):
    res = _call(args, "GET", "/task/%s?kind=%s" % (args.id, args.kind))
    lines = ["%s %d %s" % (res["kind"], res["task_id"], res["status"])]
    lines += ["  %-16s %d ms" % (s, d) for s, d in res["timing"]]
    _emit(args, res, "\n".join(lines))
    return 0


def _top_table(res):
    rows = ["%-20s %8s %8s" % ("SITE", "WAITING", "ASSIGNED")]
    for site, c in res["sites"].items():
        rows.append("%-20s %8d %8d" % (site, c["waiting"], c["assigned"]))
    return "\n".join(rows)


def cmd_top(args):
    n = 0
    while True:
        res = _call(args, "GET", "/status")
        if not args.json and n:
            print("\033[H\033[J", end="")
        _emit(args, res, _top_table(res))
        n += 1
        if args.once or (args.count and n >= args.count):
            return 0
        time.sleep(args.interval)


def _load_faults(path):
    from .sim.scenario import FaultConfig, ScenarioError, _build
    raw = read_mapping(path)
    if isinstance(raw, dict):
        raw = raw.get("faults", [])
    if not isinstance(raw, list):
        raise ScenarioError("faults file must hold a list", path)
    return [_build(FaultConfig, f, "%s[%d]" % (path, i), ("at", "duration"))
            for i, f in enumerate(raw)]


def _sim_summary(m):
    lines = ["stop: %s at t=%d ms (seed %d%s)" % (
        m["stop_reason"], m["end_time"], m["seed"],
        ", synthetic workload" if m.get("synthetic_workload") else "")]
    for kind in ("job", "transfer"):
        k = m[kind]
        if not k["tasks"]:
            continue
        counts = " ".join("%s=%d" % kv for kv in k["status_counts"].items())
        lines.append("%-8s submitted=%d terminal=%d pending=%d assignments=%d "
                     "match_evaluations=%d  %s" % (kind, k["submitted"], k["terminal"], k["pending"],
                                                   k["assignments"], k["match_evaluations"], counts))
    return "\n".join(lines)


def cmd_sim_run(args):
    from .sim import load_scenario, run_simulation
    from .sim.audit import duplicate_assignments
    sc = load_scenario(args.scenario)
    faults = _load_faults(args.faults) if args.faults else None
    trace = run_simulation(sc, seed=args.seed, faults=faults, strict=args.strict)
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as fh:
            fh.write(trace.export())
    m = dict(trace.metrics)
    m["duplicate_assignments"] = len(duplicate_assignments(trace.job_journal)) + len(
        duplicate_assignments(trace.transfer_journal))
    _emit(args, m, _sim_summary(m) + "\nduplicate assignments: %d" % m["duplicate_assignments"])
    return 0


def cmd_sim_gen(args):
    from .sim import generate_scenario, scenario_to_dict
    sc = generate_scenario(sites=args.sites, jobs=args.jobs, transfers=args.transfers, seed=args.seed)
    text = json.dumps(scenario_to_dict(sc), sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        sys.stdout.write(text + "\n")
    return 0


# -- parser ------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("--server", default=None,
                        help="service URL (default $GRIDBROKER_SERVER or %s)" % DEFAULT_SERVER)
    common.add_argument("--token", default=os.environ.get("GRIDBROKER_TOKEN"))
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gridbroker",
                                description="Pull-model job and transfer brokers.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("serve", parents=[common], help="run the brokers as an HTTP service")
    s.add_argument("--config")
    s.add_argument("--host")
    s.add_argument("--port", type=int)
    s.set_defaults(fn=cmd_serve)

    s = sub.add_parser("agent", parents=[common], help="run a CE or FTD agent")
    s.add_argument("type", choices=("ce", "ftd"))
    s.add_argument("--config", required=True)
    s.set_defaults(fn=cmd_agent)

    s = sub.add_parser("submit-job", parents=[common], help="submit a job descriptor file")
    s.add_argument("file")
    s.add_argument("--priority", type=int)
    s.set_defaults(fn=cmd_submit_job)

    s = sub.add_parser("submit-transfer", parents=[common], help="submit a transfer descriptor file")
    s.add_argument("file")
    s.set_defaults(fn=cmd_submit_transfer)

    s = sub.add_parser("status", parents=[common], help="show one task")
    s.add_argument("id")
    s.add_argument("--kind", choices=("job", "transfer"), default="job")
    s.set_defaults(fn=cmd_status)

    s = sub.add_parser("top", parents=[common], help="waiting/assigned counts per site")
    s.add_argument("--interval", type=float, default=2.0)
    s.add_argument("--once", action="store_true")
    s.add_argument("--count", type=int, default=0)
    s.set_defaults(fn=cmd_top)

    sim = sub.add_parser("sim", help="simulation commands")
    simsub = sim.add_subparsers(dest="sim_command", required=True)
    r = simsub.add_parser("run", parents=[common], help="run a scenario")
    r.add_argument("scenario", help="scenario file, or - for stdin")
    r.add_argument("--seed", type=int)
    r.add_argument("--faults")
    r.add_argument("--trace", help="write the full trace here")
    r.add_argument("--strict", action="store_true", help="full invariant sweep at every event")
    r.set_defaults(fn=cmd_sim_run)
    g = simsub.add_parser("gen", parents=[common], help="generate a random scenario")
    g.add_argument("--sites", type=int, default=35)
    g.add_argument("--jobs", type=int, default=1000)
    g.add_argument("--transfers", type=int, default=0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(fn=cmd_sim_gen)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .sim.scenario import ScenarioError
    try:
        return args.fn(args)
    except (CliError, ConfigError, ScenarioError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
