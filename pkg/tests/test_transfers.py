import pytest

from gridbroker.broker import Assignment, Broker
from gridbroker.catalogue import Catalogue
from gridbroker.descriptor import symmetric_match, to_text
from gridbroker.jobs import Slept
from gridbroker.optimizers import TransferOptimizer
from gridbroker.store import TRANSFER, Status, TaskStore
from gridbroker.transfers import (
    AlreadyReplicated, FileTransferDaemon, SimCopy, SimFileSystem, TransferContext,
    TransferError, TransferManager, TransferSpec, checksum, ftd_poll_cycle, physical_name,
    run_transfer, synthetic_content,
)

S = Status


class Rig:
    def __init__(self, mss_source=False, fault=None):
        self.now = 0
        clock = lambda: self.now  # noqa: E731
        self.cat = Catalogue(clock)
        self.cat.add_storage_element("A::SE", 10**9, mss=mss_source, bandwidth=1_000_000)
        self.cat.add_storage_element("B::SE", 10**9, bandwidth=2_000_000)
        self.fs = SimFileSystem()
        self.data = synthetic_content("/d/f", 5000, 1)
        self.cat.register_file("/d/f", physical_name("A::SE", "/d/f"), "A::SE", 5000, at=0)
        self.fs.put("A::SE", physical_name("A::SE", "/d/f"), self.data)
        self.store = TaskStore(TRANSFER, clock, lambda: ["A", "B"])
        self.broker = Broker(self.store)
        self.tm = TransferManager(self.store, self.cat)
        self.opt = TransferOptimizer(self.store, self.cat)
        self.ftds = {"ftdA": FileTransferDaemon("ftdA", "A", "A::SE", stage_latency=100),
                     "ftdB": FileTransferDaemon("ftdB", "B", "B::SE")}
        self.ctx = TransferContext(self.store, self.cat, self.fs, self.ftds,
                                   fault=fault or (lambda t, p: False), clock=clock)

    def advance(self, d):
        self.now += d

    def run_one(self, kind="mirror"):
        t = self.tm.request_transfer("/d/f", "B::SE", kind, at=self.now)
        self.opt.run_pass(self.now)
        a = ftd_poll_cycle(self.ftds["ftdB"], self.broker, self.now)
        assert isinstance(a, Assignment)
        status = run_transfer(self.ctx, self.ftds["ftdB"], a, self.advance)
        return self.store.get(t.id), status


def test_request_carries_only_user_fields():
    r = Rig()
    t = r.tm.request_transfer("/d/f", "B::SE", "mirror")
    assert [k for k in t.descriptor] == ["LFN", "DestinationSE", "Type", "Transport",
                                         "Requirements", "Priority"]
    assert t.descriptor.value("Requirements") is False
    assert isinstance(ftd_poll_cycle(r.ftds["ftdB"], r.broker, 0), Slept)
    with pytest.raises(AlreadyReplicated):
        r.tm.request_transfer("/d/f", "A::SE", "mirror")
    with pytest.raises(TransferError):
        TransferSpec("/d/f", "B::SE", "copy")


def test_optimizer_fill_in_and_wrong_site_ftd():
    r2 = Rig()
    t = r2.tm.request_transfer("/d/f", "B::SE", "mirror")
    r2.opt.run_pass(0)
    d = r2.store.get(t.id).descriptor
    assert d.value("Size") == 5000 and d.value("Sources") == ("A::SE",)
    assert to_text(d["Requirements"]) == 'member(other.CloseSE, "B::SE") && other.CacheFree >= 5000'
    assert r2.store.get(t.id).site_affinity == "B"
    assert not symmetric_match(d, r2.ftds["ftdA"].descriptor())
    assert isinstance(ftd_poll_cycle(r2.ftds["ftdA"], r2.broker, 0), Slept)
    assert isinstance(ftd_poll_cycle(r2.ftds["ftdB"], r2.broker, 0), Assignment)


def test_direct_source_has_zero_length_local_copy():
    r = Rig()
    task, status = r.run_one()
    assert status == S.DONE
    log = task.state_log
    assert [s for s, _ in log] == [S.WAITING, S.ASSIGNED, S.LOCAL_COPYING, S.TRANSFERRING,
                                   S.CLEANING, S.DONE]
    report = dict(r.store.state_timing_report(task.id))
    assert report[S.LOCAL_COPYING] == 0
    assert report[S.TRANSFERRING] == SimCopy().duration(5000, r.cat.storage_element("A::SE"),
                                                        r.cat.storage_element("B::SE"))
    assert checksum(r.fs.get("B::SE", physical_name("B::SE", "/d/f"))) == checksum(r.data)
    assert r.cat.entry("/d/f").ses == ["A::SE", "B::SE"]


def test_mss_source_stages_and_cleans():
    r = Rig(mss_source=True)
    task, status = r.run_one("masterCopy")
    assert status == S.DONE
    report = dict(r.store.state_timing_report(task.id))
    assert report[S.LOCAL_COPYING] == 100 + 5  # stage latency + 5000 B at 1 MB/s
    assert report[S.CLEANING] > 0
    assert all(not f.scratch and f.cache_free == f.cache_size for f in r.ftds.values())
    assert r.cat.entry("/d/f").master.se == "B::SE"


def test_cache_kind_leaves_catalogue_alone():
    r = Rig()
    before = r.cat.dump()
    task, status = r.run_one("cache")
    assert status == S.DONE and r.cat.dump() == before
    assert r.fs.exists("B::SE", physical_name("B::SE", "/d/f"))


@pytest.mark.parametrize("phase,expected", [("stage", S.FAILED_LOCAL),
                                            ("transfer", S.FAILED_TRANSFER),
                                            ("clean", S.FAILED_CLEAN)])
def test_phase_failures(phase, expected):
    r = Rig(mss_source=True, fault=lambda t, p: p == phase)
    before = r.cat.dump()
    task, status = r.run_one()
    assert status == expected == task.status
    assert r.cat.dump() == before
    scratch = sum(len(f.scratch) for f in r.ftds.values())
    assert scratch == (1 if expected == S.FAILED_CLEAN else 0)


def test_unknown_destination_fails_in_optimizer():
    r = Rig()
    r.cat.add_storage_element("C::SE", 10)
    t = r.tm.request_transfer("/d/f", "C::SE", "mirror")
    opt = TransferOptimizer(r.store, r.cat, site_registry=lambda: ["A", "B"])
    rep = opt.run_pass(0)
    assert rep.failed == [t.id] and r.store.get(t.id).status == S.FAILED_LOCAL
    assert opt.diagnostics


def test_bulk_grouping_moves_members_together():
    r = Rig()
    for i in range(3):
        lfn = "/d/s%d" % i
        r.cat.register_file(lfn, physical_name("A::SE", lfn), "A::SE", 10, at=0)
        r.fs.put("A::SE", physical_name("A::SE", lfn), b"x" * 10)
    ids = [r.tm.request_transfer("/d/s%d" % i, "B::SE", "mirror").id for i in range(3)]
    r.opt.bulk_threshold = 100
    r.opt.run_pass(0)
    a = ftd_poll_cycle(r.ftds["ftdB"], r.broker, 0)
    assert a.task_id == ids[0]
    assert isinstance(ftd_poll_cycle(r.ftds["ftdB"], r.broker, 0), Slept)
    assert run_transfer(r.ctx, r.ftds["ftdB"], a, r.advance) == S.DONE
    assert all(r.store.get(i).status == S.DONE for i in ids)
    assert all("B::SE" in r.cat.entry("/d/s%d" % i).ses for i in range(3))


def test_ftd_descriptor_and_scratch_accounting():
    f = FileTransferDaemon("f", "A", "A::SE", cache_size=10)
    assert f.descriptor().value("CloseSE") == ("A::SE",)
    f.stage("k", b"12345")
    assert f.descriptor().value("CacheFree") == 5
    with pytest.raises(TransferError):
        f.stage("k2", b"123456")
    f.unstage("k")
    assert f.cache_free == 10
    with pytest.raises(ValueError):
        FileTransferDaemon("g", "A", "B::SE")


def test_two_transfers_to_same_destination_both_finish():
    r = Rig()
    first = r.tm.request_transfer("/d/f", "B::SE", "mirror", at=0)
    second = r.tm.request_transfer("/d/f", "B::SE", "masterCopy", at=0)
    r.opt.run_pass(0)
    for _ in range(2):
        a = ftd_poll_cycle(r.ftds["ftdB"], r.broker, r.now)
        assert run_transfer(r.ctx, r.ftds["ftdB"], a, r.advance) == S.DONE
    e = r.cat.entry("/d/f")
    assert e.master.se == "B::SE" and [m.se for m in e.mirrors] == ["A::SE"]
    assert r.cat.storage["B::SE"].used == 5000
    assert r.store.get(first.id).meta["source_se"] == "A::SE"
    assert r.store.get(second.id).status == S.DONE


def test_full_destination_fails_before_moving_bytes():
    r = Rig()
    r.cat.register_file("/filler", "p", "B::SE", 10**9 - 100)
    task, status = r.run_one()
    assert status == S.FAILED_LOCAL
    assert [s for s, _ in task.state_log][-2:] == [S.LOCAL_COPYING, S.FAILED_LOCAL]
    assert not r.fs.exists("B::SE", physical_name("B::SE", "/d/f"))
    # a cache copy is not registered, so it does not need catalogue space
    task, status = r.run_one("cache")
    assert status == S.DONE
