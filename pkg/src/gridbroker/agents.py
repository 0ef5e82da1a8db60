"""CE and FTD agents that pull work from a running service over HTTP."""

from __future__ import annotations

import logging
import os
import subprocess
import tempfile
import threading
import time

from .config import CEAgentConfig, FTDAgentConfig
from .descriptor import parse_descriptor, parse_expression, serialize_descriptor
from .jobs import ComputingElement
from .service import ApiClient
from .store import JOB, TRANSFER
from .transfers import FileTransferDaemon

log = logging.getLogger(__name__)


class AgentError(RuntimeError):
    pass


class _Agent:
    kind = ""

    def __init__(self, cfg):
        self.cfg = cfg
        self.stop_event = threading.Event()
        self.completed: list[tuple[int, str]] = []
        self._lock = threading.Lock()

    def _client(self):
        return ApiClient(self.cfg.server, self.cfg.token)

    def _report(self, client, task_id, status, **extra):
        code, reply = client.call("POST", "/task/%d/status" % task_id,
                                  {"kind": self.kind, "status": status,
                                   "resource": self.cfg.name, **extra})
        if not reply.get("ok"):
            raise AgentError("status report for %d refused: %s" % (task_id, reply.get("error")))
        return reply["result"]["status"]

    def _poll(self, client, descriptor_text):
        try:
            code, reply = client.call("POST", "/poll/%s" % self.kind, {"descriptor": descriptor_text})
        except OSError as exc:
            log.warning("%s: broker unreachable (%s)", self.cfg.name, exc)
            return None, self.cfg.poll_interval_ms
        if not reply.get("ok"):
            raise AgentError("poll refused: %s" % reply.get("error"))
        res = reply["result"]
        if not res["match"]:
            return None, res["retry_after"]
        return res, 0

    def _loop(self, work):
        client = self._client()
        idle = 0
        try:
            while not self.stop_event.is_set():
                res, wait = self._poll(client, self.descriptor_text())
                if res is None:
                    idle += 1
                    if self.cfg.max_idle_polls is not None and idle >= self.cfg.max_idle_polls:
                        return
                    self.stop_event.wait(wait / 1000)
                    continue
                idle = 0
                final = work(client, res)
                with self._lock:
                    self.completed.append((res["task_id"], final))
        finally:
            client.close()

    def stop(self):
        self.stop_event.set()


class CEAgent(_Agent):
    """A CE with ``slots`` execution slots, each pulling its own jobs."""

    kind = JOB

    def __init__(self, cfg: CEAgentConfig):
        super().__init__(cfg)
        req = parse_expression(cfg.requirements) if cfg.requirements else None
        self.ce = ComputingElement(cfg.name, cfg.site, close_se=list(cfg.close_se),
                                   packages=list(cfg.packages), partitions=list(cfg.partitions),
                                   slots=cfg.slots, requirements=req)
        self._text = serialize_descriptor(self.ce.descriptor())

    def descriptor_text(self):
        return self._text

    def _execute(self, d):
        """Run (or pretend to run) one job; returns (exit_code, produced files)."""
        outputs = [o for o in d.value("OutputData", default=()) or () if type(o) is str]
        if not self.cfg.run_commands:
            dur = d.value("SimDuration")
            time.sleep((dur if type(dur) is int else self.cfg.default_duration_ms) / 1000)
            code = d.value("SimExitCode")
            return (code if type(code) is int else 0), outputs
        args = [a for a in d.value("Arguments", default=()) or () if type(a) is str]
        with tempfile.TemporaryDirectory(prefix="job-") as wd:
            try:
                proc = subprocess.run([d.value("Executable"), *args], cwd=wd,
                                      capture_output=True, check=False)
                code = proc.returncode
            except OSError as exc:
                log.warning("job could not start: %s", exc)
                code = 127
            produced = sorted(os.listdir(wd))
        return code, produced

    def _work(self, client, res):
        tid = res["task_id"]
        d = parse_descriptor(res["descriptor"])
        self._report(client, tid, "QUEUED")
        self._report(client, tid, "RUNNING")
        code, produced = self._execute(d)
        return self._report(client, tid, "DONE" if code == 0 else "FAILED_RUN",
                            exit_code=code, produced=produced)

    def run(self):
        threads = [threading.Thread(target=self._loop, args=(self._work,), daemon=True,
                                    name="%s-slot%d" % (self.cfg.name, i))
                   for i in range(self.cfg.slots)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        return self.completed


class FTDAgent(_Agent):
    kind = TRANSFER

    def __init__(self, cfg: FTDAgentConfig):
        super().__init__(cfg)
        self.ftd = FileTransferDaemon(cfg.name, cfg.site, cfg.close_se, cfg.cache)

    def descriptor_text(self):
        return serialize_descriptor(self.ftd.descriptor())

    def _work(self, client, res):
        tid = res["task_id"]
        d = parse_descriptor(res["descriptor"])
        size = d.value("Size")
        pause = (size if type(size) is int else 0) * self.cfg.time_scale
        final = None
        for status in ("LOCAL_COPYING", "TRANSFERRING", "CLEANING", "DONE"):
            final = self._report(client, tid, status)
            if status == "TRANSFERRING" and pause:
                time.sleep(pause)
        return final

    def run(self):
        self._loop(self._work)
        return self.completed
