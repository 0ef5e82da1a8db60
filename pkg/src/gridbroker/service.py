"""JSON-over-HTTP service hosting both managers, brokers and optimizers.

Every request body is a JSON object; ``request_id`` (or the
``X-Request-Id`` header) is echoed in the reply. Replies look like::

    {"request_id": "...", "ok": true, "result": {...}}
    {"request_id": "...", "ok": false, "error": {"code": "TASK_NOT_FOUND", "message": "..."}}

Endpoints
    POST /job                  {"descriptor": text, "priority": int?}
    POST /transfer             {"descriptor": text}
    POST /poll/{job|transfer}  {"descriptor": text}   resource Name and Site come from it
    GET  /task/{id}?kind=job   status, state log and timing report
    POST /task/{id}/status     {"kind", "status", "resource", "exit_code"?, "produced"?}
    GET  /catalogue/{lfn}?site=S
    POST /catalogue            {"lfn", "pfn", "se", "size"}
    POST /site/{name}/signal   {"action": "start"|"stop", "ces": [...]?}
    GET  /status               waiting/assigned counts per site
    GET  /health

POST endpoints need ``Authorization: Bearer <token>`` when a token is set.
"""

from __future__ import annotations

import hmac
import http.client
import itertools
import json
import logging
import os
import socket
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, unquote, urlsplit

from .broker import Assignment, Broker, BrokerError
from .catalogue import MIRROR, Catalogue, CatalogueError, UnknownLFN
from .config import ServiceConfig
from .descriptor import DescriptorError, parse_descriptor, serialize_descriptor
from .jobs import JobError, JobManager, Workload, validate_job
from .optimizers import JobOptimizer, TransferOptimizer
from .store import JOB, KINDS, TRANSFER, IllegalTransition, Status, StoreError, TaskStore, UnknownTask
from .transfers import TransferError, TransferManager, finalize_catalogue, physical_name

log = logging.getLogger(__name__)

S = Status


class ApiError(Exception):
    def __init__(self, status, code, message):
        super().__init__(message)
        self.status, self.code = status, code


def _error_status(exc):
    if isinstance(exc, ApiError):
        return exc.status, exc.code
    if isinstance(exc, (UnknownTask, UnknownLFN)):
        return 404, exc.code
    if isinstance(exc, IllegalTransition):
        return 409, exc.code
    if isinstance(exc, DescriptorError):
        return 400, "BAD_DESCRIPTOR"
    if isinstance(exc, (StoreError, CatalogueError, JobError, TransferError, BrokerError)):
        return 400, getattr(exc, "code", "BAD_REQUEST")
    return 500, "INTERNAL"


class Service:
    """Request dispatch, independent of the HTTP transport."""

    def __init__(self, config: ServiceConfig | None = None, clock=None):
        self.config = cfg = (config or ServiceConfig()).validate()
        self._clock = clock or (lambda: int(time.time() * 1000))
        self.catalogue = Catalogue(self._clock)
        for se in cfg.storage_elements:
            self.catalogue.add_storage_element(se["name"], se.get("capacity", 10**12),
                                               se.get("mss", False), se.get("bandwidth"))
        for f in cfg.files:
            self.catalogue.register_file(f["lfn"], physical_name(f["se"], f["lfn"]), f["se"],
                                         f["size"], at=0)
            for m in f.get("mirrors", ()):
                self.catalogue.add_replica(f["lfn"], physical_name(m, f["lfn"]), m, MIRROR, at=0)
        self._sinks = []
        self.stores = {}
        for kind in KINDS:
            sink = None
            if cfg.journal_dir:
                os.makedirs(cfg.journal_dir, exist_ok=True)
                sink = open(os.path.join(cfg.journal_dir, "%s.journal" % kind), "a",
                            encoding="utf-8", buffering=1)
                self._sinks.append(sink)
            self.stores[kind] = TaskStore(kind, self._clock, self.catalogue.sites, sink)
        self.brokers = {k: Broker(s, cfg.retry_hint_ms, cfg.worker_count)
                        for k, s in self.stores.items()}
        self.job_manager = JobManager(self.stores[JOB], self.catalogue)
        self.transfer_manager = TransferManager(self.stores[TRANSFER], self.catalogue)
        self._close_ses: dict[str, tuple] = {}
        self.job_optimizer = JobOptimizer(self.stores[JOB], self.catalogue,
                                          lambda: sorted({se for v in self._close_ses.values() for se in v}),
                                          cfg.auto_replicate, self.transfer_manager)
        self.transfer_optimizer = TransferOptimizer(self.stores[TRANSFER], self.catalogue,
                                                    tag_sites=cfg.tag_sites,
                                                    bulk_threshold=cfg.bulk_threshold)
        self._opt_lock = threading.Lock()
        self._reg_lock = threading.Lock()
        self.stopped: dict[str, set[str] | str] = {}   # site -> CE names, or "*" for all
        self.known_ces: dict[str, set[str]] = {}
        self._request_ids = itertools.count(1)
        self._stop = threading.Event()
        self._opt_thread = None

    # -- lifecycle -------------------------------------------------------------

    def start_background(self):
        if self.config.optimizer_interval_ms > 0 and self._opt_thread is None:
            self._opt_thread = threading.Thread(target=self._optimizer_loop,
                                                name="optimizer", daemon=True)
            self._opt_thread.start()

    def _optimizer_loop(self):
        period = self.config.optimizer_interval_ms / 1000
        while not self._stop.wait(period):
            try:
                self.run_optimizers()
            except Exception:  # keep the loop alive; the pass is retried next period
                log.exception("optimizer pass failed")

    def run_optimizers(self):
        with self._opt_lock:
            now = self._clock()
            return self.job_optimizer.run_pass(now), self.transfer_optimizer.run_pass(now)

    def close(self):
        self._stop.set()
        for s in self._sinks:
            s.close()

    # -- dispatch ---------------------------------------------------------------

    def handle(self, method: str, target: str, body: bytes = b"", headers=None):
        """Return ``(http_status, reply_dict)`` for one request."""
        headers = headers or {}
        url = urlsplit(target)
        query = {k: v[-1] for k, v in parse_qs(url.query).items()}
        parts = [unquote(p) for p in url.path.strip("/").split("/") if p]
        request_id = headers.get("X-Request-Id")
        try:
            payload = {}
            if body:
                try:
                    payload = json.loads(body)
                except ValueError:
                    raise ApiError(400, "BAD_REQUEST", "body is not JSON") from None
                if not isinstance(payload, dict):
                    raise ApiError(400, "BAD_REQUEST", "body must be a JSON object")
            request_id = payload.pop("request_id", request_id)
            if method == "POST":
                self._authorize(headers)
            result = self._route(method, parts, payload, query)
            status, reply = 200, {"ok": True, "result": result}
        except Exception as exc:
            status, code = _error_status(exc)
            if status == 500:
                log.exception("internal error on %s %s", method, target)
            reply = {"ok": False, "error": {"code": code, "message": str(exc)}}
        reply["request_id"] = request_id if request_id is not None else "srv-%d" % next(self._request_ids)
        return status, reply

    def _authorize(self, headers):
        token = self.config.token
        if not token:
            return
        got = headers.get("Authorization", "")
        if not hmac.compare_digest(got, "Bearer " + token):
            raise ApiError(401, "UNAUTHORIZED", "missing or wrong token")

    def _route(self, method, parts, payload, query):
        route = (method, parts[0] if parts else "", len(parts))
        if route == ("POST", "job", 1):
            return self.submit_job(payload)
        if route == ("POST", "transfer", 1):
            return self.submit_transfer(payload)
        if route[:2] == ("POST", "poll") and len(parts) == 2:
            return self.poll(parts[1], payload)
        if route == ("GET", "task", 2):
            return self.task_status(parts[1], query.get("kind", JOB))
        if route[:2] == ("POST", "task") and len(parts) == 3 and parts[2] == "status":
            return self.report_status(parts[1], payload)
        if route[:2] == ("GET", "catalogue") and len(parts) >= 2:
            return self.catalogue_entry("/" + "/".join(parts[1:]), query.get("site"))
        if route == ("POST", "catalogue", 1):
            return self.register_file(payload)
        if route[:2] == ("POST", "site") and len(parts) == 3 and parts[2] == "signal":
            return self.signal(parts[1], payload)
        if route == ("GET", "status", 1):
            return self.overview()
        if route == ("GET", "health", 1):
            return {"status": "up"}
        raise ApiError(404, "NO_SUCH_ENDPOINT", "%s /%s" % (method, "/".join(parts)))

    # -- handlers ------------------------------------------------------------------

    @staticmethod
    def _need(payload, key, typ=str):
        v = payload.get(key)
        if not isinstance(v, typ) or isinstance(v, bool) and typ is not bool:
            raise ApiError(400, "BAD_REQUEST", "field %r missing or not %s" % (key, typ.__name__))
        return v

    @staticmethod
    def _task_reply(task):
        return {"task_id": task.id, "kind": task.kind, "status": str(task.status)}

    def submit_job(self, payload):
        text = self._need(payload, "descriptor")
        prio = payload.get("priority")
        if prio is not None and (type(prio) is not int):
            raise ApiError(400, "BAD_REQUEST", "priority must be an integer")
        return self._task_reply(self.job_manager.submit_job(text, prio))

    def submit_transfer(self, payload):
        return self._task_reply(self.transfer_manager.submit_descriptor(
            self._need(payload, "descriptor")))

    def _kind(self, kind):
        if kind not in KINDS:
            raise ApiError(404, "NO_SUCH_ENDPOINT", "unknown task kind %r" % kind)
        return kind

    def _is_stopped(self, site, name):
        s = self.stopped.get(site)
        return s == "*" or (isinstance(s, set) and name in s)

    def poll(self, kind, payload):
        kind = self._kind(kind)
        d = parse_descriptor(self._need(payload, "descriptor"))
        name, site = d.value("Name"), d.value("Site")
        if type(name) is not str or type(site) is not str:
            raise ApiError(400, "BAD_DESCRIPTOR", "resource descriptor needs string Name and Site")
        broker = self.brokers[kind]
        if kind == JOB:
            with self._reg_lock:
                self.known_ces.setdefault(site, set()).add(name)
                close = d.value("CloseSE", default=())
                self._close_ses[name] = tuple(x for x in close if type(x) is str) \
                    if type(close) is tuple else ()
                stopped = self._is_stopped(site, name)
            if stopped:
                return {"match": False, "retry_after": broker.retry_hint_ms, "signal": "stop"}
        out = broker.request_task(d, name, site)
        if not isinstance(out, Assignment):
            return {"match": False, "retry_after": out.retry_after}
        task = self.stores[kind].get(out.task_id)
        if kind == TRANSFER:
            for mid in task.meta.get("bulk_members", []):
                self.stores[kind].compare_and_transition(mid, S.WAITING, S.ASSIGNED)
        return {"match": True, "task_id": task.id, "kind": kind,
                "descriptor": serialize_descriptor(task.descriptor)}

    def _parse_id(self, raw):
        try:
            return int(raw)
        except ValueError:
            raise UnknownTask(raw) from None

    def task_status(self, raw_id, kind=JOB):
        store = self.stores[self._kind(kind)]
        tid = self._parse_id(raw_id)
        task = store.get(tid)
        a = self.brokers[kind].assignments.get(tid)
        return {**self._task_reply(task), "priority": task.priority,
                "site_affinity": task.site_affinity if isinstance(task.site_affinity, str) else None,
                "assigned_to": a.resource_id if a else None,
                "state_log": [[str(s), ts] for s, ts in task.state_log],
                "timing": [[str(s), d] for s, d in store.state_timing_report(tid)],
                "descriptor": serialize_descriptor(task.descriptor)}

    def report_status(self, raw_id, payload):
        kind = self._kind(payload.get("kind", JOB))
        store = self.stores[kind]
        tid = self._parse_id(raw_id)
        new = Status(self._need(payload, "status")) if payload.get("status") in Status.__members__ \
            else None
        if new is None:
            raise ApiError(400, "BAD_REQUEST", "unknown status %r" % payload.get("status"))
        task = store.get(tid)
        a = self.brokers[kind].assignments.get(tid)
        resource = payload.get("resource")
        if a is None or (resource is not None and resource != a.resource_id):
            raise ApiError(409, "NOT_ASSIGNED_TO_YOU", "task %d is not assigned to %s" % (tid, resource))
        ids = [tid] + (list(task.meta.get("bulk_members", ())) if kind == TRANSFER else [])
        for i in ids:
            if store.get(i).status == task.status:
                store.transition(i, new)
        if kind == JOB and new == S.DONE and task.validate:
            w = Workload(exit_code=int(payload.get("exit_code", 0)), produced=payload.get("produced"))
            validate_job(store, task, w)
        if kind == TRANSFER and new == S.DONE:
            for i in ids:
                finalize_catalogue(self.catalogue, store.get(i))
        return self._task_reply(task)

    def catalogue_entry(self, lfn, site=None):
        e = self.catalogue.entry(lfn)

        def rep(r):
            return {"pfn": r.pfn, "se": r.se, "site": r.site, "registered_at": r.registered_at}
        return {"lfn": e.lfn, "size": e.size, "version": e.version, "master": rep(e.master),
                "mirrors": [rep(r) for r in e.mirrors],
                "lookup": [rep(r) for r in self.catalogue.lookup(lfn, site)]}

    def register_file(self, payload):
        e = self.catalogue.register_file(self._need(payload, "lfn"), self._need(payload, "pfn"),
                                         self._need(payload, "se"), self._need(payload, "size", int))
        return {"lfn": e.lfn, "version": e.version}

    def signal(self, site, payload):
        action = self._need(payload, "action")
        if action not in ("start", "stop"):
            raise ApiError(400, "BAD_REQUEST", "action must be start or stop")
        names = payload.get("ces")
        with self._reg_lock:
            known = self.known_ces.get(site, set())
            if site not in self.catalogue.sites() and not known:
                raise ApiError(404, "SITE_NOT_FOUND", "unknown site %s" % site)
            before = {n for n in known if self._is_stopped(site, n)}
            if names is None:
                self.stopped[site] = "*" if action == "stop" else set()
            else:
                cur = self.stopped.get(site, set())
                cur = set(known) if cur == "*" else set(cur)
                cur = cur | set(names) if action == "stop" else cur - set(names)
                self.stopped[site] = cur
            after = {n for n in known if self._is_stopped(site, n)}
        return {"site": site, "changed": sorted(before ^ after), "stopped": sorted(after)}

    def overview(self):
        sites: dict[str, dict] = {}

        def slot(s):
            return sites.setdefault(s, {"waiting": 0, "assigned": 0})
        counts = {}
        for kind, store in self.stores.items():
            counts[kind] = dict(sorted(store.status_counts().items()))
            assignments = self.brokers[kind].assignments
            for t in store.tasks():
                if t.status == S.WAITING:
                    aff = t.site_affinity
                    slot(aff if isinstance(aff, str) else "*")["waiting"] += 1
                elif not t.is_terminal() and t.id in assignments:
                    slot(assignments[t.id].resource_site)["assigned"] += 1
        return {"sites": dict(sorted(sites.items())), "counts": counts}


# -- HTTP transport --------------------------------------------------------------------

def _make_handler(service: Service):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        disable_nagle_algorithm = True  # replies are small; don't wait on delayed ACKs

        def _do(self, method):
            n = int(self.headers.get("Content-Length") or 0)
            body = self.rfile.read(n) if n else b""
            status, reply = service.handle(method, self.path, body, dict(self.headers))
            data = json.dumps(reply, sort_keys=True).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_GET(self):
            self._do("GET")

        def do_POST(self):
            self._do("POST")

        def log_message(self, fmt, *args):
            log.debug("%s " + fmt, self.address_string(), *args)

    return Handler


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    request_queue_size = 256


class ServiceHandle:
    def __init__(self, service: Service, server: ThreadingHTTPServer):
        self.service = service
        self.server = server
        self.thread = threading.Thread(target=server.serve_forever, name="http", daemon=True)

    @property
    def url(self):
        host, port = self.server.server_address[:2]
        return "http://%s:%d" % (host, port)

    def stop(self):
        self.server.shutdown()
        self.server.server_close()
        self.service.close()


def serve(config: ServiceConfig, background=True) -> ServiceHandle:
    """Bind and start serving; raises OSError on bind failure."""
    service = Service(config)
    server = _Server((config.host, config.port), _make_handler(service))
    handle = ServiceHandle(service, server)
    service.start_background()
    if background:
        handle.thread.start()
    return handle


class ApiClient:
    """Minimal JSON client holding one keep-alive connection."""

    def __init__(self, base_url: str, token: str | None = None, timeout: float = 30):
        u = urlsplit(base_url)
        self.host, self.port = u.hostname or "127.0.0.1", u.port or 80
        self.token = token
        self.timeout = timeout
        self._conn = None
        self._ids = itertools.count(1)

    def _connection(self):
        if self._conn is None:
            self._conn = http.client.HTTPConnection(self.host, self.port, timeout=self.timeout)
            self._conn.connect()
            self._conn.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return self._conn

    def call(self, method, path, payload=None):
        """Return ``(http_status, reply)``; raises OSError if the server is unreachable."""
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = "Bearer " + self.token
        body = None
        if payload is not None:
            payload = dict(payload)
            payload.setdefault("request_id", "c%d" % next(self._ids))
            body = json.dumps(payload).encode()
        for attempt in (0, 1):
            conn = self._connection()
            try:
                conn.request(method, path, body=body, headers=headers)
                resp = conn.getresponse()
                return resp.status, json.loads(resp.read())
            except (http.client.HTTPException, ConnectionError):
                self.close()
                if attempt:
                    raise

    def close(self):
        if self._conn is not None:
            self._conn.close()
            self._conn = None
