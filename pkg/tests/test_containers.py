import os
import random
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from persistheap import _sys
from persistheap.containers import (
    NULL_OFFSET,
    BankedAdjacencyList,
    OffsetRef,
    PersistentMap,
    PersistentVector,
    TransientHandle,
    TransientHeap,
    fallback_allocator,
    mix64,
    mix64_array,
)
from persistheap.manager import Manager


@pytest.fixture(params=["persistent", "transient"])
def handle(request, heap):
    if request.param == "persistent":
        return heap.get_allocator()
    return TransientHandle(TransientHeap(1 << 30))


def test_mix64_reference_values():
    # splitmix64 outputs for state 0 and 1 after one increment
    assert mix64(0) == 0xE220A8397B1DCDAF
    assert mix64(0x9E3779B97F4A7C15) == 0x6E789E6AA1B965F4
    xs = np.array([0, 1, 2**63, 2**64 - 1], dtype=np.uint64)
    assert mix64_array(xs).tolist() == [mix64(int(x)) for x in xs]


def test_offset_ref():
    assert OffsetRef().is_null and OffsetRef.NULL.offset == NULL_OFFSET
    r = OffsetRef(64)
    assert r == OffsetRef(64) and r != OffsetRef(65)

    class H:
        base = 4096

    assert r.resolve(H) == 4160
    with pytest.raises(ValueError):
        OffsetRef.NULL.resolve(H)


def test_vector_basics(handle):
    v = PersistentVector.create(handle)
    assert len(v) == 0 and v.capacity == 0 and v.data.is_null
    with pytest.raises(IndexError):
        v[0]
    for x in (1, 2, 3):
        v.append(x)
    assert len(v) == 3 and v[1] == 2 and v[-1] == 3 and v.capacity == 4
    with pytest.raises(IndexError):
        v[3]


def test_vector_growth_matches_list(handle):
    v = PersistentVector.create(handle)
    ref = []
    caps = set()
    rng = random.Random(3)
    for _ in range(1000):
        x = rng.getrandbits(64)
        v.append(x)
        ref.append(x)
        caps.add(v.capacity)
    assert list(v) == ref
    assert caps == {4 << i for i in range(9)}
    v.extend(np.arange(5000, dtype=np.uint64))
    assert v.to_numpy().tolist() == ref + list(range(5000))


def test_vector_records(handle):
    dt = np.dtype([("a", "<u4"), ("b", "<f8")])
    v = PersistentVector.create(handle, dt)
    v.append((1, 2.5))
    v.extend(np.array([(3, 4.0), (5, 6.0)], dtype=dt))
    assert v[0] == (1, 2.5) and v[2] == (5, 6.0)
    with pytest.raises(TypeError):
        PersistentVector(handle, v.offset, np.uint64)


def test_vector_old_storage_freed(heap):
    h = heap.get_allocator()
    v = PersistentVector.create(h)
    v.extend(np.arange(4, dtype=np.uint64))
    first = v.data.offset
    v.append(9)
    live = dict(heap.iter_allocations())
    assert v.data.offset in live
    assert first not in live or heap.cached_objects() > 0


def test_map_basics(handle):
    m = PersistentMap.create(handle)
    assert m.get(5) is None and len(m) == 0 and 5 not in m
    assert m.insert(5, 50)
    assert not m.insert(5, 51)
    assert m.get(5) == 51 and len(m) == 1
    with pytest.raises(ValueError):
        m.insert(2**64 - 1, 0)


def test_map_matches_dict(handle):
    rng = random.Random(8)
    m = PersistentMap.create(handle)
    ref = {}
    for _ in range(10_000):
        k = rng.getrandbits(64) % (2**64 - 1)
        v = rng.getrandbits(64)
        m.insert(k, v)
        ref[k] = v
        assert len(m) * 10 <= m.n_buckets * 7
    assert dict(m.items()) == ref
    for k in list(ref)[::3]:
        assert m.delete(k)
        del ref[k]
    assert not m.delete(12345678901234567)
    assert dict(m.items()) == ref
    assert all(m.get(k) == v for k, v in ref.items())


@given(st.lists(st.tuples(st.booleans(), st.integers(0, 40)), max_size=300))
@settings(max_examples=60, deadline=None)
def test_map_insert_delete_sequences(ops):
    h = TransientHandle()
    m = PersistentMap.create(h)
    ref = {}
    for ins, k in ops:
        if ins:
            m.insert(k, k * 7)
            ref[k] = k * 7
        else:
            assert m.delete(k) == (k in ref)
            ref.pop(k, None)
        assert len(m) == len(ref)
    assert dict(m.items()) == ref
    m.destroy()


def test_graph_basics(handle):
    g = BankedAdjacencyList.create(handle, banks=16)
    g.insert_edge(1, 2)
    g.insert_edge(1, 3)
    assert g.neighbors(1) == [2, 3] and g.degree(1) == 2
    assert g.neighbors(99) == [] and g.degree(99) == 0
    g.insert_edges([4, 1, 4], [5, 6, 7])
    assert g.neighbors(1) == [2, 3, 6] and g.neighbors(4) == [5, 7]
    assert sorted(g.vertices()) == [1, 4] and g.num_edges() == 5
    assert g.bank_of(1) == (mix64(1) >> 32) % 16
    with pytest.raises(ValueError):
        g.insert_edges([1, 2], [3])


def test_graph_concurrent_disjoint_sources(heap):
    g = BankedAdjacencyList.construct(heap, "g", banks=64)
    rng = np.random.default_rng(0)
    edges = [(rng.integers(0, 1000, 5000) + 1000 * t, rng.integers(0, 10**9, 5000)) for t in range(4)]

    def work(t):
        s, d = edges[t]
        for i in range(0, 5000, 97):
            g.insert_edges(s[i : i + 97], d[i : i + 97])
        for a, b in zip(s[:200].tolist(), d[:200].tolist()):
            g.insert_edge(a, b)

    threads = [threading.Thread(target=work, args=(t,)) for t in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    got = sorted((v, int(x)) for v, n in g.adjacency().items() for x in n)
    want = sorted(
        [(int(a), int(b)) for s, d in edges for a, b in zip(s, d)]
        + [(int(a), int(b)) for s, d in edges for a, b in zip(s[:200], d[:200])]
    )
    assert got == want


def test_graph_reopen_elsewhere(store, opts):
    rng = np.random.default_rng(1)
    src, dst = rng.integers(0, 300, 20_000), rng.integers(0, 2**40, 20_000)
    with Manager.create(store, opts) as mgr:
        g = BankedAdjacencyList.construct(mgr, "graph", banks=32)
        g.insert_edges(src, dst)
        before = {v: n.tolist() for v, n in g.adjacency().items()}
        old = mgr.base
    blocker = _sys.reserve(opts.reservation, hint=old)
    try:
        with Manager.open(store, read_only=True) as mgr:
            assert mgr.base != old
            g = BankedAdjacencyList.find(mgr, "graph")
            assert {v: n.tolist() for v, n in g.adjacency().items()} == before
            assert BankedAdjacencyList.find(mgr, "nothing") is None
    finally:
        _sys.unreserve(blocker, opts.reservation)


def test_no_absolute_addresses_stored(store, opts):
    with Manager.create(store, opts) as mgr:
        g = BankedAdjacencyList.construct(mgr, "g", banks=8)
        g.insert_edges(np.arange(500) % 50, np.arange(500))
        v = PersistentVector.create(mgr.get_allocator())
        v.extend(np.arange(100, dtype=np.uint64))
        mgr.flush()
        base = mgr.base
        hw = mgr._chunks.high_water * mgr.segment.chunk_size
        words = np.frombuffer(mgr.view(0, hw), dtype="<u8")
        # any pointer into the mapped range would lie in [base, base + hw)
        assert not np.any((words >= base) & (words < base + hw))


def test_wrong_type_tag(heap):
    heap.construct_named("notgraph", 16, 1, "other")
    with pytest.raises(TypeError):
        BankedAdjacencyList.find(heap, "notgraph")


def test_transient_handle_never_touches_segment(heap):
    sizes = [os.path.getsize(p) for p in heap.segment.file_paths()]
    used = heap.info().chunks_used
    h = fallback_allocator()
    assert isinstance(h, TransientHandle) and not h.persistent
    g = BankedAdjacencyList.create(h, banks=4)
    g.insert_edges(np.arange(1000) % 10, np.arange(1000))
    assert g.num_edges() == 1000
    assert [os.path.getsize(p) for p in heap.segment.file_paths()] == sizes
    assert heap.info().chunks_used == used
    assert fallback_allocator(heap).persistent


def test_transient_heap_reuses_freed_blocks():
    th = TransientHeap(1 << 28)
    a = th.allocate(100)
    th.deallocate(a)
    assert th.allocate(100) == a
    big = th.allocate(1 << 20)
    assert big % 4096 == 0
    th.deallocate(big)
    with pytest.raises(ValueError):
        th.deallocate(big)
    assert th.live_bytes() == 112
