from gridbroker.broker import Assignment, Broker, NoMatch
from gridbroker.catalogue import Catalogue
from gridbroker.descriptor import to_text
from gridbroker.jobs import ComputingElement, JobManager, JobSpec
from gridbroker.optimizers import JobOptimizer, TransferOptimizer
from gridbroker.store import JOB, TRANSFER, Status, TaskStore
from gridbroker.transfers import TransferManager

S = Status


def setup(**kw):
    cat = Catalogue(lambda: 0)
    for se in ("S1::SE", "S2::SE", "S3::SE"):
        cat.add_storage_element(se, 10**9)
    cat.register_file("/f", "sim://S1::SE/f", "S1::SE", 10, at=0)
    jobs = TaskStore(JOB, lambda: 0, lambda: ["S1", "S2", "S3"])
    xfers = TaskStore(TRANSFER, lambda: 0, lambda: ["S1", "S2", "S3"])
    ces = {s: ComputingElement("ce" + s, s, close_se=[s + "::SE"]) for s in ("S2", "S3")}
    opt = JobOptimizer(jobs, cat, lambda: [se for c in ces.values() for se in c.close_se],
                       transfers=TransferManager(xfers, cat), **kw)
    return cat, jobs, xfers, ces, opt


def test_rewrite_after_new_replica():
    cat, jobs, _, ces, opt = setup()
    t = JobManager(jobs, cat).submit_job(JobSpec("x", input_data=["/f"]))
    b = Broker(jobs)
    assert isinstance(b.request_task(ces["S2"].descriptor(), "ceS2", "S2"), NoMatch)
    rep = opt.run_pass(1)
    assert rep.tasks_rewritten == 0 and rep.tasks_examined == 1
    cat.add_replica("/f", "sim://S2::SE/f", "S2::SE", "mirror", at=2)
    rep = opt.run_pass(3)
    assert rep.tasks_rewritten == 1
    assert "S2::SE" in to_text(jobs.get(t.id).descriptor["Requirements"])
    got = b.request_task(ces["S2"].descriptor(), "ceS2", "S2")
    assert isinstance(got, Assignment) and got.task_id == t.id


def test_pass_skips_unchanged_and_only_touches_waiting():
    cat, jobs, _, ces, opt = setup()
    jm = JobManager(jobs, cat)
    t1 = jm.submit_job(JobSpec("x", input_data=["/f"]))
    t2 = jm.submit_job(JobSpec("x", input_data=["/f"]))
    jobs.transition(t2.id, S.ASSIGNED, 0)
    before = jobs.get(t2.id).descriptor
    cat.add_replica("/f", "sim://S3::SE/f", "S3::SE", "mirror", at=1)
    rep = opt.run_pass(2)
    assert rep.tasks_examined == 1 and rep.tasks_rewritten == 1
    assert jobs.get(t2.id).descriptor is before
    assert opt.run_pass(3).tasks_rewritten == 0
    assert jobs.get(t1.id).priority == jobs.get(t1.id).descriptor.value("Priority")


def test_suggestions_once_and_not_enacted_by_default():
    cat, jobs, xfers, ces, opt = setup()
    t = JobManager(jobs, cat).submit_job(JobSpec("x", input_data=["/f"]))
    rep = opt.run_pass(0)
    assert [(s.task_id, s.lfn, s.candidates) for s in rep.suggestions] == [
        (t.id, "/f", ("S2::SE", "S3::SE"))]
    assert opt.run_pass(1).suggestions == []
    assert len(xfers) == 0


def test_auto_replicate_enacts_mirror():
    cat, jobs, xfers, ces, opt = setup(auto_replicate=True)
    JobManager(jobs, cat).submit_job(JobSpec("x", input_data=["/f"]))
    opt.run_pass(0)
    (req,) = xfers.tasks()
    assert req.spec.destination_se == "S2::SE" and req.spec.kind == "mirror"


def test_job_site_tag_only_when_exclusive():
    cat, jobs, _, ces, opt = setup(tag_sites=True)
    jm = JobManager(jobs, cat)
    t = jm.submit_job(JobSpec("x", input_data=["/f"]))
    free = jm.submit_job(JobSpec("y"))
    rep = opt.run_pass(0)
    assert rep.site_tags_set == 1
    assert jobs.get(t.id).site_affinity == "S1" and jobs.get(free.id).site_affinity is None


def test_transfer_optimizer_is_idempotent():
    cat, _, xfers, _, _ = setup()
    TransferManager(xfers, cat).request_transfer("/f", "S2::SE", "mirror")
    opt = TransferOptimizer(xfers, cat)
    first = opt.run_pass(0)
    second = opt.run_pass(1)
    assert (first.tasks_rewritten, first.site_tags_set) == (1, 1)
    assert (second.tasks_rewritten, second.site_tags_set) == (0, 0)
    assert first.line() == "0\ttransfer\t1\t1\t1\t0\n"
