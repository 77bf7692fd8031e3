"""Persistent heap manager: datastore lifecycle, allocation and named objects.

Lock layout: one lock for the chunk directory, one for the name directory and
one per bin.  A small allocation or free touches only its bin's lock, except
when the bin has no non-full chunk (a fresh chunk is claimed under the chunk
lock) or when the last slot of a chunk is freed (the chunk is released under
the chunk lock).  Large objects go straight to the chunk lock.  Lock order is
names -> bin -> chunks.

Freed small objects first land in a per-thread LIFO cache and keep their
bitset bit set; the cache is drained into the bitsets when it exceeds its byte
budget, on flush/close, and when the owning thread exits.
"""

import enum
import hashlib
import os
import threading
import weakref
from collections import Counter
from dataclasses import asdict, dataclass, field

from . import _sys
from .constants import DEFAULT_CACHE_BYTES, DEFAULT_CHUNK_SIZE, DEFAULT_FILE_SIZE, default_reservation
from .errors import (
    AlreadyExistsError,
    AuditError,
    ClosedError,
    DatastoreError,
    DoubleFreeError,
    InvalidAllocationError,
    OutOfSpaceError,
    ReadOnlyError,
)
from .management import ChunkKind, ManagementData, NameRecord
from .segment import Manifest, Segment, SegmentMode
from .size_classes import SizeClassTable, _bin_index
from .snapshot import copy_tree

_SMALL = ChunkKind.SMALL
_HEAD = ChunkKind.LARGE_HEAD


class OpenMode(enum.Enum):
    CREATE_ONLY = "create_only"
    OPEN_ONLY = "open_only"
    OPEN_READ_ONLY = "open_read_only"


@dataclass
class ManagerOptions:
    reservation: int = field(default_factory=default_reservation)
    chunk_size: int = DEFAULT_CHUNK_SIZE
    file_size: int = DEFAULT_FILE_SIZE
    private_batch: bool = False
    populate: bool = False
    cache_bytes: int = DEFAULT_CACHE_BYTES
    lock_stats: bool = False


class ObjectCache:
    __slots__ = ("bins", "nbytes")

    def __init__(self, num_bins):
        self.bins = [[] for _ in range(num_bins)]
        self.nbytes = 0

    def __len__(self):
        return sum(len(b) for b in self.bins)


class LockLog:
    """Per-thread counters of lock acquisitions, keyed by (lock, reason)."""

    def __init__(self):
        self._local = threading.local()
        self._all = []
        self._reg = threading.Lock()

    def _counter(self):
        try:
            return self._local.counter
        except AttributeError:
            c = self._local.counter = Counter()
            with self._reg:
                self._all.append(c)
            return c

    def record(self, name, reason, contended):
        self._counter()[(name, reason, contended)] += 1

    def totals(self) -> Counter:
        out = Counter()
        with self._reg:
            for c in self._all:
                out.update(c)
        return out


class _LoggedLock:
    __slots__ = ("lock", "name", "reason", "log")

    def __init__(self, lock, name, reason, log):
        self.lock, self.name, self.reason, self.log = lock, name, reason, log

    def __enter__(self):
        contended = not self.lock.acquire(False)
        if contended:
            self.lock.acquire()
        self.log.record(self.name, self.reason, contended)

    def __exit__(self, *exc):
        self.lock.release()


_CHUNK_REASONS = ("refill", "release", "large")


@dataclass
class HeapInfo:
    path: str
    mode: str
    chunk_size: int
    file_size: int
    reservation: int
    num_files: int
    chunks_used: int
    chunks: dict
    bytes_live: int
    bins_non_full: dict
    named_objects: list
    allocated_bytes: int
    capabilities: dict

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AuditReport:
    chunks: tuple
    names: tuple
    live: tuple
    digest: str | None = None

    @property
    def occupancy(self) -> int:
        return sum(size for _, size in self.live)


class Manager:
    """A persistent heap stored in a datastore directory.

    Use :meth:`create` or :meth:`open`; both return a context manager that
    closes (and therefore flushes) on exit.
    """

    def __init__(self, path, segment: Segment, mgmt: ManagementData, mode: OpenMode, options: ManagerOptions):
        self.path = os.fspath(path)
        self.mode = mode
        self.options = options
        self.segment = segment
        self.table = SizeClassTable(segment.chunk_size)
        self._mgmt = mgmt
        self._chunks = mgmt.chunks
        self._bins = mgmt.bins
        self._names = mgmt.names
        self._cs = segment.chunk_size
        self._half = segment.chunk_size >> 1
        self._classes = self.table.classes
        self._slots = [self.table.slots_per_chunk(b) for b in range(self.table.num_bins)]
        self._writable = mode is not OpenMode.OPEN_READ_ONLY
        self._mutable = self._writable
        self.closed = False

        self._chunk_lock = threading.Lock()
        self._name_lock = threading.Lock()
        self._bin_lock_objs = [threading.Lock() for _ in range(self.table.num_bins)]
        self.lock_log = LockLog() if options.lock_stats else None
        if self.lock_log is None:
            self._chunk_guard = {r: self._chunk_lock for r in _CHUNK_REASONS}
            self._bin_guard = self._bin_lock_objs
            self._name_guard = self._name_lock
        else:
            log = self.lock_log
            self._chunk_guard = {r: _LoggedLock(self._chunk_lock, "chunks", r, log) for r in _CHUNK_REASONS}
            self._bin_guard = [_LoggedLock(lk, f"bin{b}", "bin", log) for b, lk in enumerate(self._bin_lock_objs)]
            self._name_guard = _LoggedLock(self._name_lock, "names", "names", log)

        self._budget = options.cache_bytes
        self._local = threading.local()
        self._caches = []
        self._cache_reg = threading.Lock()
        self._cached = set()
        self._capabilities = None

    # --- lifecycle ---

    @classmethod
    def create(cls, path, options: ManagerOptions = None, **overrides) -> "Manager":
        options = _options(options, overrides)
        path = os.fspath(path)
        if os.path.exists(path):
            if not os.path.isdir(path) or os.listdir(path):
                raise AlreadyExistsError(f"{path} exists and is not an empty directory")
        mode = SegmentMode.PRIVATE_BATCH if options.private_batch else SegmentMode.READ_WRITE
        table = SizeClassTable(options.chunk_size)
        os.makedirs(path, exist_ok=True)
        seg = Segment.create(path, table.chunk_size, options.file_size, options.reservation, mode, options.populate)
        mgmt = ManagementData.empty(options.reservation // table.chunk_size, table)
        mgr = cls(path, seg, mgmt, OpenMode.CREATE_ONLY, options)
        mgmt.serialize(path)
        seg.save_manifest()
        return mgr

    @classmethod
    def open(cls, path, read_only: bool = False, options: ManagerOptions = None, **overrides) -> "Manager":
        options = _options(options, overrides)
        path = os.fspath(path)
        if not os.path.isdir(path):
            raise DatastoreError(f"{path}: no such datastore")
        manifest = Manifest.read(path)
        table = SizeClassTable(manifest.chunk_size)
        mgmt = ManagementData.deserialize(path, manifest.reservation // manifest.chunk_size, table)
        if mgmt.chunks.high_water * manifest.chunk_size > manifest.num_files * manifest.file_size:
            raise DatastoreError(f"{path}: chunk records extend past the backing files")
        if read_only:
            seg_mode = SegmentMode.READ_ONLY
        elif options.private_batch:
            seg_mode = SegmentMode.PRIVATE_BATCH
        else:
            seg_mode = SegmentMode.READ_WRITE
        seg = Segment.open(path, seg_mode, options.populate, manifest)
        options.reservation = manifest.reservation
        options.chunk_size = manifest.chunk_size
        options.file_size = manifest.file_size
        return cls(path, seg, mgmt, OpenMode.OPEN_READ_ONLY if read_only else OpenMode.OPEN_ONLY, options)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        if not self.closed:
            self.close()

    def _immutable(self):
        if self.closed:
            raise ClosedError("manager is closed")
        raise ReadOnlyError("datastore is open read-only")

    def _check_open(self):
        if self.closed:
            raise ClosedError("manager is closed")

    def flush(self):
        """Drain caches, write back data, then persist management data."""
        if not self._mutable:
            self._immutable()
        self._drain_all()
        stats = self.segment.flush()
        self._mgmt.serialize(self.path)
        self.segment.save_manifest()
        return stats

    def close(self):
        self._check_open()
        if self._writable:
            self.flush()
        self._mutable = False
        self.closed = True
        self.segment.close()

    # --- allocation ---

    def allocate(self, n: int) -> int:
        """Allocate ``n`` bytes and return the segment offset."""
        if not self._mutable:
            self._immutable()
        if n <= self._half:
            if n < 1:
                raise ValueError(f"allocation size must be >= 1, got {n}")
            b = _bin_index(n)
            try:
                cache = self._local.cache
            except AttributeError:
                cache = self._new_cache()
            lst = cache.bins[b]
            if lst:
                off = lst.pop()
                cache.nbytes -= self._classes[b]
                self._cached.discard(off)
                return off
            return self._alloc_small(b)
        return self._alloc_large(n)

    def _alloc_small(self, b):
        chunks = self._chunks
        bins = self._bins
        with self._bin_guard[b]:
            c = bins.peek(b)
            if c is None:
                with self._chunk_guard["refill"]:
                    c = chunks.find_empty_chunks(1)
                    if c is None:
                        raise OutOfSpaceError("no empty chunk left in the reservation")
                    self.segment.ensure_mapped((c + 1) * self._cs)
                    self.segment.claim_chunks(c, 1)
                    bs = chunks.claim_small(c, b)
                bins.push(b, c)
            else:
                bs = chunks.bitsets[c]
            slot = bs.find_and_set_first_free()
            if bs.count == bs.num_slots:
                bins.remove(b, c)
        return c * self._cs + slot * self._classes[b]

    def _alloc_large(self, n):
        span = self.table.round_large(n) // self._cs
        with self._chunk_guard["large"]:
            c = self._chunks.find_empty_chunks(span)
            if c is None:
                raise OutOfSpaceError(f"no run of {span} empty chunks left in the reservation")
            self.segment.ensure_mapped((c + span) * self._cs)
            self.segment.claim_chunks(c, span)
            self._chunks.claim_large(c, span)
        return c * self._cs

    def deallocate(self, offset: int):
        if not self._mutable:
            self._immutable()
        chunks = self._chunks
        c = offset // self._cs
        if offset < 0 or c >= chunks.high_water or offset & 7:
            raise InvalidAllocationError(f"offset {offset} is not an allocation")
        kind = chunks.kinds[c]
        rel = offset - c * self._cs
        if kind == _SMALL:
            b = chunks.bins.get(c)
            bs = chunks.bitsets.get(c)
            if b is None or bs is None:
                raise DoubleFreeError(f"offset {offset}: chunk released concurrently")
            slot, rem = divmod(rel, self._classes[b])
            if rem or slot >= self._slots[b]:
                raise InvalidAllocationError(f"offset {offset} is not a slot start")
            if not bs.test(slot) or offset in self._cached:
                raise DoubleFreeError(f"offset {offset} is not allocated")
            if self._budget <= 0:
                with self._bin_guard[b]:
                    self._free_slot(b, c, slot, offset)
                return
            try:
                cache = self._local.cache
            except AttributeError:
                cache = self._new_cache()
            self._cached.add(offset)
            cache.bins[b].append(offset)
            cache.nbytes += self._classes[b]
            if cache.nbytes > self._budget:
                self._drain(cache)
        elif kind == _HEAD and rel == 0:
            with self._chunk_guard["large"]:
                if chunks.kinds[c] != _HEAD:
                    raise DoubleFreeError(f"offset {offset} is not allocated")
                span = chunks.release_large(c)
                self.segment.free_chunk_space(c, span)
        else:
            raise InvalidAllocationError(f"offset {offset} is not an allocation")

    def _free_slot(self, b, c, slot, offset):
        """Clear one slot; caller holds the bin lock."""
        chunks = self._chunks
        bs = chunks.bitsets.get(c)
        if bs is None or chunks.bins.get(c) != b or not bs.test(slot):
            raise DoubleFreeError(f"offset {offset} is not allocated")
        was_full = bs.count == bs.num_slots
        if bs.clear(slot):
            self._bins.remove(b, c)
            with self._chunk_guard["release"]:
                chunks.release_small(c)
                self.segment.free_chunk_space(c, 1)
        elif was_full:
            self._bins.push(b, c)

    # --- per-thread caches ---

    def _new_cache(self):
        cache = ObjectCache(self.table.num_bins)
        self._local.cache = cache
        sentinel = self._local.sentinel = _ThreadSentinel()
        with self._cache_reg:
            self._caches.append(cache)
        weakref.finalize(sentinel, _drain_on_thread_exit, weakref.ref(self), cache)
        return cache

    def _drain(self, cache):
        cs = self._cs
        for b, lst in enumerate(cache.bins):
            if not lst:
                continue
            cls = self._classes[b]
            with self._bin_guard[b]:
                for off in lst:
                    c = off // cs
                    self._cached.discard(off)
                    self._free_slot(b, c, (off - c * cs) // cls, off)
            lst.clear()
        cache.nbytes = 0

    def _drain_all(self):
        with self._cache_reg:
            caches = list(self._caches)
        for cache in caches:
            self._drain(cache)

    def cached_objects(self) -> int:
        return len(self._cached)

    # --- named objects ---

    def construct_named(self, name: str, element_size: int, length: int = 1, type_tag: str = "") -> int:
        """Allocate ``element_size * length`` zeroed bytes and record them under ``name``."""
        if not self._mutable:
            self._immutable()
        if element_size < 1 or length < 1:
            raise ValueError("element_size and length must be >= 1")
        nbytes = element_size * length
        with self._name_guard:
            if name in self._names:
                raise AlreadyExistsError(f"name {name!r} already exists")
            off = self.allocate(nbytes)
            try:
                # fresh large chunks already read as zero unless file space is kept
                if nbytes <= self._half or self.segment.mode is SegmentMode.PRIVATE_BATCH:
                    self.segment.zero(off, nbytes)
                self._names.insert(NameRecord(name, off, length, element_size, type_tag))
            except BaseException:
                self.deallocate(off)
                raise
        return off

    def find_named(self, name: str):
        self._check_open()
        return self._names.find(name)

    def destroy_named(self, name: str) -> bool:
        if not self._mutable:
            self._immutable()
        with self._name_guard:
            rec = self._names.erase(name)
            if rec is None:
                return False
            self.deallocate(rec.offset)
        return True

    def named_objects(self) -> list:
        self._check_open()
        return sorted(self._names, key=lambda r: r.name)

    # --- memory access ---

    @property
    def base(self) -> int:
        return self.segment.base

    def address(self, offset: int) -> int:
        return self.segment.base + offset

    def read(self, offset: int, n: int) -> bytes:
        self._check_open()
        return self.segment.read(offset, n)

    def write(self, offset: int, data):
        if not self._mutable:
            self._immutable()
        self.segment.write(offset, data)

    def view(self, offset: int, n: int) -> memoryview:
        self._check_open()
        self.segment._check_range(offset, n)
        return self.segment.mem[offset : offset + n]

    def array(self, offset: int, count: int, dtype):
        import numpy as np

        dtype = np.dtype(dtype)
        return np.frombuffer(self.view(offset, count * dtype.itemsize), dtype=dtype)

    def get_allocator(self):
        from .containers import PersistentHandle

        self._check_open()
        return PersistentHandle(self)

    # --- snapshot, info, audit ---

    def snapshot(self, dst) -> str:
        """Copy the datastore to ``dst``; returns ``"cloned"`` or ``"copied"``."""
        self._check_open()
        dst = os.fspath(dst)
        if os.path.exists(dst):
            raise AlreadyExistsError(f"{dst} already exists")
        if self._writable:
            self.flush()
        os.makedirs(dst)
        try:
            return copy_tree(self.path, dst)
        except BaseException:
            import shutil

            shutil.rmtree(dst, ignore_errors=True)
            raise

    def capabilities(self) -> dict:
        if self._capabilities is None:
            from .bs_msync import pagemap_supported

            seg_dir = os.path.join(self.path, "segment")
            caps = {}
            for key, probe in (("hole_punch", _sys.can_punch_holes), ("reflink", _sys.can_clone)):
                try:
                    caps[key] = probe(seg_dir)
                except OSError:
                    caps[key] = False
            caps["pagemap"] = pagemap_supported()
            self._capabilities = caps
        return dict(self._capabilities)

    def info(self) -> HeapInfo:
        self._check_open()
        chunks = self._chunks
        live = sum(bs.count * self._classes[chunks.bins[c]] for c, bs in chunks.bitsets.items())
        live += sum(span * self._cs for span in chunks.spans.values())
        seg = self.segment
        return HeapInfo(
            path=self.path,
            mode=self.mode.value,
            chunk_size=self._cs,
            file_size=seg.file_size,
            reservation=seg.reservation,
            num_files=seg.mapped_files,
            chunks_used=chunks.used_chunks(),
            chunks=chunks.count_kinds(),
            bytes_live=live,
            bins_non_full={self._classes[b]: n for b, n in enumerate(self._bins.non_full_counts()) if n},
            named_objects=[r.name for r in self.named_objects()],
            allocated_bytes=seg.allocated_bytes(),
            capabilities=self.capabilities(),
        )

    def iter_allocations(self):
        """Yield ``(offset, size)`` for every live allocation, cached ones included."""
        chunks = self._chunks
        cs = self._cs
        for c in range(chunks.high_water):
            kind = chunks.kinds[c]
            if kind == _SMALL:
                cls = self._classes[chunks.bins[c]]
                base = c * cs
                for i, w in enumerate(chunks.bitsets[c].leaf_words()):
                    while w:
                        low = w & -w
                        yield base + ((i << 6) + low.bit_length() - 1) * cls, cls
                        w ^= low
            elif kind == _HEAD:
                yield c * cs, chunks.spans[c] * cs

    def audit(self, contents: bool = False) -> AuditReport:
        """Check every cross-structure invariant; raise AuditError on the first violation."""
        self._check_open()
        chunks, bins = self._chunks, self._bins
        hw = chunks.high_water
        if any(chunks.kinds[hw:]):
            raise AuditError("non-empty chunk beyond the high-water mark")
        records = []
        c = 0
        while c < hw:
            kind = chunks.kinds[c]
            if kind == _SMALL:
                b = chunks.bins.get(c)
                bs = chunks.bitsets.get(c)
                if b is None or bs is None:
                    raise AuditError(f"small chunk {c} lacks bin or bitset")
                if bs.num_slots != self._slots[b]:
                    raise AuditError(f"chunk {c}: bitset size does not match bin {b}")
                if bs.count < 1:
                    raise AuditError(f"chunk {c}: small chunk with no occupied slot")
                listed = c in bins.bins[b]
                if listed == bs.is_full():
                    raise AuditError(f"chunk {c}: bin membership disagrees with fullness")
                records.append((c, int(kind), b, tuple(bs.leaf_words())))
                c += 1
            elif kind == _HEAD:
                span = chunks.spans.get(c)
                if not span or c + span > chunks.num_chunks:
                    raise AuditError(f"large chunk {c}: bad span {span}")
                if chunks.kinds[c + 1 : c + span] != bytes([ChunkKind.LARGE_BODY]) * (span - 1):
                    raise AuditError(f"large chunk {c}: body run broken")
                records.append((c, int(kind), span))
                c += span
            elif kind == ChunkKind.LARGE_BODY:
                raise AuditError(f"chunk {c}: large body without a head")
            else:
                c += 1
        for b, d in enumerate(bins.bins):
            for c in d:
                if chunks.kinds[c] != _SMALL or chunks.bins.get(c) != b:
                    raise AuditError(f"bin {b} lists chunk {c} which is not a small chunk of that bin")
        if set(chunks.bitsets) != set(chunks.bins) or len(chunks.spans) != chunks.kinds.count(_HEAD):
            raise AuditError("chunk side tables out of sync with kinds")

        live = sorted(self.iter_allocations())
        starts = {off: size for off, size in live}
        for (o1, s1), (o2, _) in zip(live, live[1:]):
            if o1 + s1 > o2:
                raise AuditError(f"allocations at {o1} and {o2} overlap")
        for rec in self._names:
            if starts.get(rec.offset, -1) < rec.nbytes:
                raise AuditError(f"name {rec.name!r} does not refer to a live allocation of {rec.nbytes} bytes")
        for off in list(self._cached):
            if off not in starts:
                raise AuditError(f"cached offset {off} is not marked occupied")

        digest = None
        if contents:
            h = hashlib.sha256()
            for c in range(hw):
                if chunks.kinds[c]:
                    h.update(c.to_bytes(8, "little"))
                    h.update(self.segment.mem[c * self._cs : (c + 1) * self._cs])
            digest = h.hexdigest()
        names = tuple(sorted((r.name, r.offset, r.length, r.element_size, r.type_tag) for r in self._names))
        return AuditReport(tuple(records), names, tuple(live), digest)

    def lock_report(self) -> Counter:
        """Acquisition counts keyed by ``(lock, reason, contended)``; needs ``lock_stats``."""
        if self.lock_log is None:
            raise RuntimeError("lock statistics were not enabled")
        return self.lock_log.totals()


class _ThreadSentinel:
    pass


def _drain_on_thread_exit(mgr_ref, cache):
    mgr = mgr_ref()
    if mgr is None:
        return
    with mgr._cache_reg:
        try:
            mgr._caches.remove(cache)
        except ValueError:
            pass
    if mgr._mutable and len(cache):
        mgr._drain(cache)


def _options(options, overrides) -> ManagerOptions:
    if options is None:
        options = ManagerOptions()
    else:
        options = ManagerOptions(**asdict(options))
    for k, v in overrides.items():
        if not hasattr(options, k):
            raise TypeError(f"unknown option {k!r}")
        setattr(options, k, v)
    return options
