import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridbroker.catalogue import (
    CACHE, MASTER_COPY, MIRROR, Catalogue, CatalogueError, DuplicateLFN,
    DuplicateReplica, InsufficientCapacity, UnknownLFN, UnknownSE, site_of,
)

SES = ["SiteA::SE1", "SiteB::SE1", "SiteC::SE1", "SiteD::SE1", "SiteA::SE2"]


@pytest.fixture
def cat():
    ticks = iter(range(1, 10_000))
    c = Catalogue(clock=lambda: next(ticks))
    for se in SES:
        c.add_storage_element(se, capacity=1000)
    return c


def test_register(cat):
    e = cat.register_file("/a/f", "srm://s1/f", "SiteA::SE1", 10)
    assert e.master.se == "SiteA::SE1" and e.mirrors == () and e.size == 10
    assert cat.storage["SiteA::SE1"].used == 10
    with pytest.raises(DuplicateLFN):
        cat.register_file("/a/f", "srm://other", "SiteB::SE1", 10)
    with pytest.raises(UnknownSE):
        cat.register_file("/a/g", "x", "Nowhere::SE", 1)
    with pytest.raises(InsufficientCapacity):
        cat.register_file("/a/h", "x", "SiteB::SE1", 5000)


def test_site_of():
    assert site_of("CERN::MSS") == "CERN"
    with pytest.raises(ValueError):
        site_of("noseparator")


def test_mirror_appends(cat):
    cat.register_file("/a/f", "pa", "SiteA::SE1", 10)
    e = cat.add_replica("/a/f", "pb", "SiteB::SE1", MIRROR)
    assert e.master.se == "SiteA::SE1"
    assert [m.se for m in e.mirrors] == ["SiteB::SE1"]


def test_master_copy_demotes(cat):
    cat.register_file("/a/f", "pa", "SiteA::SE1", 10)
    e = cat.add_replica("/a/f", "pc", "SiteC::SE1", MASTER_COPY)
    assert (e.master.se, e.master.pfn) == ("SiteC::SE1", "pc")
    assert [(m.se, m.pfn) for m in e.mirrors] == [("SiteA::SE1", "pa")]


def test_cache_leaves_catalogue_identical(cat):
    cat.register_file("/a/f", "pa", "SiteA::SE1", 10)
    before = cat.dump()
    version = cat.version
    assert cat.add_replica("/a/f", "pd", "SiteD::SE1", CACHE) is None
    assert cat.dump() == before and cat.version == version
    assert cat.storage["SiteD::SE1"].used == 0


def test_add_replica_errors(cat):
    with pytest.raises(UnknownLFN):
        cat.add_replica("/nope", "p", "SiteA::SE1", MIRROR)
    cat.register_file("/a/f", "pa", "SiteA::SE1", 10)
    with pytest.raises(DuplicateReplica):
        cat.add_replica("/a/f", "pa", "SiteA::SE1", MIRROR)
    with pytest.raises(DuplicateReplica):
        cat.add_replica("/a/f", "pa", "SiteA::SE1", MASTER_COPY)


def test_lookup_same_site_first(cat):
    cat.register_file("/a/f", "pa", "SiteA::SE1", 10)
    cat.add_replica("/a/f", "pb", "SiteB::SE1", MIRROR)
    got = cat.lookup("/a/f", "SiteB")
    assert [(r.se, r.pfn) for r in got] == [("SiteB::SE1", "pb"), ("SiteA::SE1", "pa")]


def test_lookup_fallback_master_first(cat):
    cat.register_file("/a/f", "pa", "SiteA::SE1", 10)
    cat.add_replica("/a/f", "pb", "SiteB::SE1", MIRROR)
    assert cat.lookup("/a/f", "SiteC")[0].pfn == "pa"
    with pytest.raises(UnknownLFN):
        cat.lookup("/nope", "SiteA")


def test_lookup_tie_break_by_time_then_pfn(cat):
    cat.register_file("/a/f", "pa", "SiteA::SE1", 10)
    cat.add_replica("/a/f", "zz", "SiteB::SE1", MIRROR, at=50)
    cat.add_replica("/a/f", "aa", "SiteC::SE1", MIRROR, at=50)
    cat.add_replica("/a/f", "mm", "SiteD::SE1", MIRROR, at=40)
    assert [r.pfn for r in cat.lookup("/a/f", "X")] == ["pa", "mm", "aa", "zz"]


def test_dump_format_and_load_round_trip(cat):
    cat.register_file("/a/f", "pa", "SiteA::SE1", 10)
    cat.add_replica("/a/f", "pb", "SiteB::SE1", MIRROR)
    cat.add_replica("/a/f", "pc", "SiteC::SE1", MASTER_COPY)
    cat.register_file("/a/e", "pe", "SiteA::SE2", 3)
    text = cat.dump()
    assert text == ("/a/e\t3\tmaster=SiteA::SE2,pe\n"
                    "/a/f\t10\tmaster=SiteC::SE1,pc\tmirror=SiteA::SE1,pa\tmirror=SiteB::SE1,pb\n")
    other = Catalogue()
    for se in SES:
        other.add_storage_element(se, capacity=1000)
    other.load(text)
    assert other.dump() == text
    assert [r.pfn for r in other.lookup("/a/f", "Z")] == [r.pfn for r in cat.lookup("/a/f", "Z")]


def test_load_rejects_malformed():
    c = Catalogue()
    c.add_storage_element("S::E", 100)
    with pytest.raises(CatalogueError):
        c.load("/x\tnotanumber\tmaster=S::E,p\n")
    with pytest.raises(CatalogueError):
        c.load("/x\t1\tmirror=S::E,p\n")


ops = st.lists(st.tuples(st.sampled_from(SES), st.sampled_from(["p1", "p2"]),
                         st.sampled_from([CACHE, MIRROR, MASTER_COPY])), max_size=25)


@settings(max_examples=200)
@given(ops, st.sampled_from(["SiteA", "SiteB", "SiteC", "SiteD", "SiteZ"]))
def test_replica_invariants_under_random_ops(seq, site):
    ticks = iter(range(1, 10_000))
    c = Catalogue(clock=lambda: next(ticks))
    for se in SES:
        c.add_storage_element(se, capacity=10_000)
    c.register_file("/f", "p0", "SiteA::SE1", 7)
    for se, pfn, kind in seq:
        before = c.dump()
        try:
            c.add_replica("/f", pfn, se, kind)
        except DuplicateReplica:
            assert c.dump() == before
        if kind == CACHE:
            assert c.dump() == before
        e = c.entry("/f")
        pairs = [(r.se, r.pfn) for r in e.replicas]
        assert len(pairs) == len(set(pairs))
        assert e.master not in e.mirrors
    reps = c.lookup("/f", site)
    e = c.entry("/f")
    assert sorted(map(id, reps)) == sorted(map(id, e.replicas))
    local = [r.site == site for r in reps]
    assert local == sorted(local, reverse=True)
    if any(local):
        assert reps[0].site == site
    for group in (True, False):
        g = [r for r in reps if (r.site == site) == group]
        if e.master in g:
            assert g[0] is e.master
        rest = [r for r in g if r is not e.master]
        assert rest == sorted(rest, key=lambda r: (r.registered_at, r.pfn))


def test_promote_existing_mirror(cat):
    cat.register_file("/a/f", "pa", "SiteA::SE1", 10)
    cat.add_replica("/a/f", "pb", "SiteB::SE1", MIRROR)
    e = cat.promote("/a/f", "pb", "SiteB::SE1")
    assert cat.dump() == "/a/f\t10\tmaster=SiteB::SE1,pb\tmirror=SiteA::SE1,pa\n"
    assert cat.promote("/a/f", "pb", "SiteB::SE1") == e
    assert cat.storage["SiteB::SE1"].used == 10
    with pytest.raises(CatalogueError):
        cat.promote("/a/f", "pc", "SiteC::SE1")
