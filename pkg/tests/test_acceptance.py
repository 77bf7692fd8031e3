"""Exit criteria for the package, one test each, at their stated tolerances.

Each test records a one-line detail; the terminal summary prints
``criterion N: PASS|FAIL|SKIP`` for every one of them.
"""

import os
import random
import threading
import time

import numpy as np
import pytest

from persistheap import _sys, bs_msync
from persistheap.bench import (
    GRAPH_NAME,
    RmatParams,
    canonical_edges,
    generate_all,
    graph_edges,
    oracle_build,
    run_bulk,
    run_incremental,
)
from persistheap.bitset import MAX_SLOTS, MultiLayerBitset
from persistheap.containers import BankedAdjacencyList
from persistheap.errors import DoubleFreeError
from persistheap.management import ChunkKind
from persistheap.manager import Manager, ManagerOptions
from persistheap.size_classes import SizeClassTable, touched_page_waste

MiB = 1 << 20
GiB = 1 << 30
PAGE = _sys.PAGE_SIZE

pytestmark = pytest.mark.filterwarnings("ignore::pytest.PytestUnraisableExceptionWarning")


@pytest.mark.acceptance(1)
def test_fragmentation_bound(record_property):
    t0 = time.perf_counter()
    table = SizeClassTable()
    class_for = table.class_for
    worst = 0.0
    for r in range(25, table.half_chunk + 1):
        c = class_for(r)
        w = (c - r) / c
        if w > worst:
            worst = w
    exceptions = {r for r in range(1, 25) if (class_for(r) - r) * 4 > class_for(r)}
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max waste {worst:.4f} over 25..{table.half_chunk}, exceptions {sorted(exceptions)}, {elapsed:.2f}s")
    assert worst <= 0.25
    assert exceptions == {1, 2, 3, 4, 5, 9, 10, 11, 17}
    assert elapsed < 5


def _lowest_zero(flat, n):
    free = ~flat & ((1 << n) - 1)
    return None if not free else (free & -free).bit_length() - 1


@pytest.mark.acceptance(2)
def test_bounded_slot_search(record_property):
    rng = random.Random(2024)
    sizes = [1, 63, 64, 65, 4096, 4097, MAX_SLOTS]

    # word reads per search never exceed the layer count
    calls = 0
    worst = 0
    while calls < 10**6:
        n = rng.choice(sizes + [rng.randint(1, MAX_SLOTS)])
        bs = MultiLayerBitset(n)
        held = []
        for _ in range(min(4 * n, 60_000, 10**6 - calls)):
            if held and (bs.is_full() or rng.random() < 0.3):
                i = rng.randrange(len(held))
                held[i], held[-1] = held[-1], held[i]
                bs.clear(held.pop())
                continue
            before = bs.word_reads
            held.append(bs.find_and_set_first_free())
            calls += 1
            worst = max(worst, bs.word_reads - before)
            assert bs.word_reads - before <= bs.depth <= 3

    # equivalence with a flat bit table over many short random op sequences
    mismatches = 0
    for seq in range(10**5):
        n = rng.choice(sizes) if seq % 4 else rng.randint(1, 9000)
        if n == MAX_SLOTS and rng.random() < 0.9:
            n = rng.choice(sizes[:-1])
        if rng.random() < 0.3:
            # start from a dense random state so upper layers matter
            words = [(1 << 64) - 1 if rng.random() < 0.9 else rng.getrandbits(64) for _ in range(-(-n // 64))]
            bs = MultiLayerBitset.from_leaf_words(n, words)
            flat = 0
            for i, w in enumerate(bs.leaf_words()):
                flat |= w << (64 * i)
        else:
            bs, flat = MultiLayerBitset(n), 0
        for _ in range(rng.randint(5, 20)):
            if rng.random() < 0.6:
                want = _lowest_zero(flat, n)
                got = bs.find_and_set_first_free()
                mismatches += got != want
                if want is not None:
                    flat |= 1 << want
            else:
                slot = rng.randrange(n)
                occupied = bool(flat >> slot & 1)
                try:
                    empty = bs.clear(slot)
                    mismatches += not occupied
                    flat &= ~(1 << slot)
                    mismatches += empty != (flat == 0)
                except DoubleFreeError:
                    mismatches += occupied
            mismatches += bs.count != bin(flat).count("1")
    record_property("detail", f"{calls} searches, max {worst} word reads; 100000 sequences, {mismatches} mismatches")
    assert mismatches == 0


@pytest.mark.acceptance(3)
def test_large_rounding(tmp_path, record_property):
    rng = random.Random(3)
    cs = 2 * MiB
    half = cs // 2
    wrong = 0
    with Manager.create(str(tmp_path / "s"), reservation=GiB, file_size=128 * MiB) as mgr:
        chunks = mgr._chunks
        live = []
        for _ in range(10**4):
            size = rng.randint(half + 1, 64 * cs)
            off = mgr.allocate(size)
            c = off // cs
            span = (1 << (size - 1).bit_length()) // cs
            body = bytes([ChunkKind.LARGE_BODY]) * (span - 1)
            ok = (
                off % cs == 0
                and chunks.kinds[c] == ChunkKind.LARGE_HEAD
                and chunks.spans[c] == span
                and chunks.kinds[c + 1 : c + span] == body
                and (c + span == chunks.num_chunks or chunks.kinds[c + span] != ChunkKind.LARGE_BODY)
            )
            wrong += not ok
            live.append(off)
            if len(live) > 3 or rng.random() < 0.5:
                mgr.deallocate(live.pop(rng.randrange(len(live))))

        # touched-page accounting checked on the real page size, then applied to 64 KiB pages
        request = MiB + 1
        off = mgr.allocate(request)
        mgr.write(off, b"\1" * request)
        mgr.flush()
        used = mgr.segment.allocated_bytes()
        mgr.deallocate(off)
        freed = used - mgr.segment.allocated_bytes()
    measured = (freed - request) / request
    model = touched_page_waste(request, PAGE)
    waste64 = touched_page_waste(request, 64 * 1024)
    waste4 = touched_page_waste(request, 4096)
    record_property(
        "detail",
        f"{wrong} span errors in 10000 sizes; 64KiB-page waste {waste64:.4%}; 4KiB-page waste {waste4:.4%} "
        f"(published 1.6% not reproduced); measured on {PAGE}B pages {measured:.4%} vs model {model:.4%}",
    )
    assert wrong == 0
    assert abs(waste64 - 0.0625) <= 0.001
    assert measured == pytest.approx(model, abs=1e-9)


@pytest.mark.acceptance(4)
def test_persistence_round_trip(tmp_path, record_property):
    from persistence_model import run_chain

    t0 = time.perf_counter()
    divergences = []
    chains, per_chain = 20, 50
    for i in range(chains):
        divergences += run_chain(str(tmp_path / f"chain{i}"), seed=1000 + i, sessions=per_chain)
    record_property(
        "detail", f"{chains * per_chain} fresh-process sessions, {len(divergences)} divergences, {time.perf_counter() - t0:.1f}s"
    )
    assert divergences == []


@pytest.mark.acceptance(5)
def test_chunk_space_release(tmp_path, record_property):
    if not _sys.can_punch_holes(str(tmp_path)):
        pytest.skip("capability unsupported: hole punching")
    cs = 2 * MiB
    with Manager.create(str(tmp_path / "s"), reservation=GiB, file_size=64 * MiB, cache_bytes=0) as mgr:
        off = mgr.allocate(4 * cs)
        mgr.write(off, b"\xab" * (4 * cs))
        mgr.flush()
        before = mgr.segment.allocated_bytes()
        mgr.deallocate(off)
        large_drop = before - mgr.segment.allocated_bytes()

        slots = [mgr.allocate(cs // 4) for _ in range(4)]
        assert len({s // cs for s in slots}) == 1
        for s in slots:
            mgr.write(s, b"\xcd" * (cs // 4))
        mgr.flush()
        c = slots[0] // cs
        full = mgr.segment.allocated_bytes()
        mgr.deallocate(slots[0])
        one_slot_kept = mgr._chunks.kinds[c] == ChunkKind.SMALL and mgr.segment.allocated_bytes() == full
        for s in slots[1:]:
            mgr.deallocate(s)
        released = mgr._chunks.kinds[c] == ChunkKind.EMPTY
        small_drop = full - mgr.segment.allocated_bytes()
    record_property(
        "detail",
        f"large free dropped {large_drop / (4 * cs):.1%} of span; one-slot free kept chunk: {one_slot_kept}; "
        f"last-slot free released chunk: {released} ({small_drop} bytes)",
    )
    assert large_drop >= 0.9 * 4 * cs
    assert one_slot_kept
    assert released and small_drop >= 0.9 * cs


@pytest.mark.acceptance(6)
def test_concurrent_small_objects(tmp_path, record_property):
    sizes = [8, 48, 200, 1000, 4096, 30_000, 200_000, 1 * MiB]
    threads, ops = 8, 10**5
    mgr = Manager.create(str(tmp_path / "s"), reservation=4 * GiB, file_size=256 * MiB, lock_stats=True)
    errors = []
    held = [[] for _ in range(threads)]

    def work(t):
        rng = random.Random(t)
        mine = held[t]
        try:
            for i in range(ops):
                if mine and (len(mine) > 300 or rng.random() < 0.45):
                    j = rng.randrange(len(mine))
                    mine[j], mine[-1] = mine[-1], mine[j]
                    off, tag = mine.pop()
                    if mgr.read(off, 8) != tag:
                        raise AssertionError(f"object at {off} overwritten")
                    mgr.deallocate(off)
                else:
                    off = mgr.allocate(rng.choice(sizes))
                    tag = (t << 56 | i).to_bytes(8, "little")
                    mgr.write(off, tag)
                    mine.append((off, tag))
        except BaseException as e:
            errors.append(e)

    t0 = time.perf_counter()
    workers = [threading.Thread(target=work, args=(t,)) for t in range(threads)]
    for w in workers:
        w.start()
    for w in workers:
        w.join()
    elapsed = time.perf_counter() - t0
    mgr.flush()
    report = mgr.audit()
    live = {off for off, _ in report.live}
    expected = {off for h in held for off, _ in h}
    stats = mgr.lock_report()
    mgr.close()
    chunk_reasons = {reason for (lock, reason, _), n in stats.items() if lock == "chunks"}
    other_locks = {lock for (lock, _, _) in stats if lock != "chunks" and not lock.startswith("bin")}
    contended = sum(n for (lock, _, c), n in stats.items() if c)
    record_property(
        "detail",
        f"{threads}x{ops} ops in {elapsed:.1f}s; chunk-lock reasons {sorted(chunk_reasons)}; "
        f"other shared locks {sorted(other_locks)}; {contended} contended acquisitions; audit ok",
    )
    assert not errors, errors[:1]
    assert live == expected
    assert chunk_reasons <= {"refill", "release"}
    assert not other_locks
    assert elapsed < 60


def _touched_runs(touched, n_pages):
    runs = []
    start = None
    for p in range(n_pages + 1):
        if p < n_pages and p in touched:
            if start is None:
                start = p
        elif start is not None:
            runs.append((start, p - start))
            start = None
    return runs


@pytest.mark.acceptance(7)
def test_bs_msync_equivalence(tmp_path, record_property):
    import mmap

    if not bs_msync.pagemap_supported():
        pytest.skip("capability unsupported: page-table export (/proc/self/pagemap)")
    size = 8 * MiB
    n_pages = size // PAGE
    rng = random.Random(7)
    seed = rng.randbytes(size)
    priv, twin = tmp_path / "private", tmp_path / "shared"
    priv.write_bytes(seed)
    twin.write_bytes(seed)
    fp, ft = os.open(priv, os.O_RDWR), os.open(twin, os.O_RDWR)
    m = bs_msync.map_private(fp, 0, size)
    shared = mmap.mmap(ft, size, mmap.MAP_SHARED)
    view = m.view()
    differ = leftover = not_maximal = 0
    try:
        for _ in range(200):
            touched = set()
            for _ in range(rng.randint(1, 60)):
                off = rng.randrange(size)
                n = min(size - off, rng.choice([1, 8, 100, PAGE, 3 * PAGE, 40 * PAGE]))
                data = rng.randbytes(n)
                view[off : off + n] = data
                shared[off : off + n] = data
                touched.update(range(off // PAGE, (off + n - 1) // PAGE + 1))
            runs = bs_msync.scan_dirty(m)
            not_maximal += runs != _touched_runs(touched, n_pages)
            stats = bs_msync.write_back([m])
            not_maximal += stats.pages_dirty != len(touched)
            shared.flush()
            leftover += bool(bs_msync.scan_dirty(m))
            with open(priv, "rb") as a, open(twin, "rb") as b:
                differ += a.read() != b.read()
    finally:
        view.release()
        shared.close()
        bs_msync.unmap(m)
        os.close(fp)
        os.close(ft)
    record_property("detail", f"200 patterns: {differ} file mismatches, {leftover} non-empty rescans, {not_maximal} run mismatches")
    assert differ == 0 and leftover == 0 and not_maximal == 0


@pytest.mark.acceptance(8)
def test_graph_benchmark_correctness(tmp_path, record_property):
    t0 = time.perf_counter()
    params = RmatParams(16, seed=8)
    chunk_edges = 1 << 18
    opts = ManagerOptions(reservation=4 * GiB, file_size=256 * MiB)
    edges = generate_all(params, chunk_edges)
    assert len(edges) == 2**16 * 16 * 2
    want = canonical_edges(graph_edges(oracle_build([edges])))

    def store_edges(path):
        with Manager.open(path, read_only=True) as mgr:
            return canonical_edges(graph_edges(BankedAdjacencyList.find(mgr, GRAPH_NAME)))

    rates = {}
    equal = {}
    for threads in (1, 2, 4, 8):
        path = str(tmp_path / f"bulk{threads}")
        rep = run_bulk(path, params, threads, chunk_edges, options=opts)
        rates[threads] = rep.edges_per_second
        equal[threads] = np.array_equal(store_edges(path), want)
    inc = run_incremental(str(tmp_path / "inc"), np.array_split(edges, 8), options=opts, scale=16)
    equal["incremental"] = np.array_equal(store_edges(str(tmp_path / "inc")), want)
    elapsed = time.perf_counter() - t0
    record_property(
        "detail",
        "edges/s " + ", ".join(f"{t}T {r:,.0f}" for t, r in rates.items())
        + f", incremental {inc.edges_per_second:,.0f}; all equal: {all(equal.values())}; {elapsed:.1f}s",
    )
    assert all(equal.values()), equal
    assert elapsed < 120


@pytest.mark.acceptance(9)
def test_snapshot_isolation(tmp_path, record_property):
    rng = random.Random(9)
    src, dst = str(tmp_path / "src"), str(tmp_path / "dst")
    with Manager.create(src, reservation=GiB, file_size=64 * MiB) as mgr:
        for i in range(50):
            off = mgr.construct_named(f"n{i}", rng.choice([8, 64, 4096]), rng.randint(1, 300))
            mgr.write(off, rng.randbytes(8))
        method = mgr.snapshot(dst)
        at_snapshot = mgr.audit(contents=True)
        live = [mgr.allocate(rng.randint(1, 3 * MiB)) for _ in range(20)]
        for i in range(10**4):
            r = rng.random()
            if r < 0.4 or not live:
                live.append(mgr.allocate(rng.randint(1, 64 * 1024)))
            elif r < 0.7:
                mgr.deallocate(live.pop(rng.randrange(len(live))))
            elif r < 0.95:
                rec = mgr.find_named(f"n{rng.randrange(50)}")
                if rec is not None:
                    mgr.write(rec.offset, rng.randbytes(8))
            else:
                name = f"n{rng.randrange(50)}"
                if not mgr.destroy_named(name):
                    mgr.construct_named(name, 16, 4)
        mutated = mgr.audit(contents=True)
    with Manager.open(dst, read_only=True) as snap:
        reopened = snap.audit(contents=True)

    if _sys.can_clone(str(tmp_path)):
        big = str(tmp_path / "big")
        with Manager.create(big, reservation=4 * GiB, file_size=GiB) as mgr:
            off = mgr.allocate(512 * MiB)
            mgr.write(off + 511 * MiB, b"x" * 4096)
            mgr.flush()
            t0 = time.perf_counter()
            big_method = mgr.snapshot(str(tmp_path / "big-snap"))
            clone_s = time.perf_counter() - t0
        clone_note = f"1 GiB sparse store {big_method} in {clone_s:.3f}s"
    else:
        big_method, clone_s = None, None
        clone_note = "block cloning: capability unsupported on this filesystem, timing clause not exercised"
    record_property(
        "detail",
        f"snapshot {method}; 10000 source mutations; destination identical: {reopened == at_snapshot}; {clone_note}",
    )
    assert mutated != at_snapshot
    assert reopened == at_snapshot
    if big_method is not None:
        assert big_method == "cloned" and clone_s < 1
