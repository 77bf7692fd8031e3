"""Offset-based containers that live inside a heap.

Every structural reference is stored as a byte offset from the start of the
heap's segment, so a container reads back correctly wherever the segment is
mapped next time.  Containers talk to memory through an allocator handle:
:class:`PersistentHandle` for a :class:`~persistheap.manager.Manager`, or
:class:`TransientHandle` for ordinary process memory.  ``fallback_allocator()``
with no manager gives the transient one.

Layouts (all fields little-endian u64):

* vector header: ``data, len, capacity, elem_size``
* map header: ``buckets, n_buckets, n_items``; bucket = ``key, value``;
  an all-ones key marks an empty bucket
* adjacency list header: ``n_banks, banks``; ``banks`` points at ``n_banks``
  map headers mapping vertex id -> vector header offset
"""

import threading

import numpy as np

from . import _sys
from .constants import DEFAULT_BANKS, DEFAULT_CHUNK_SIZE
from .size_classes import SizeClassTable, next_power_of_two

NULL_OFFSET = (1 << 64) - 1
EMPTY_KEY = NULL_OFFSET
M64 = (1 << 64) - 1

# splitmix64 finalizer constants
_MIX_ADD = 0x9E3779B97F4A7C15
_MIX_MUL1 = 0xBF58476D1CE4E5B9
_MIX_MUL2 = 0x94D049BB133111EB


def mix64(x: int) -> int:
    z = (x + _MIX_ADD) & M64
    z = ((z ^ (z >> 30)) * _MIX_MUL1) & M64
    z = ((z ^ (z >> 27)) * _MIX_MUL2) & M64
    return z ^ (z >> 31)


def mix64_array(x) -> np.ndarray:
    z = np.asarray(x, dtype=np.uint64) + np.uint64(_MIX_ADD)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX_MUL1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX_MUL2)
    return z ^ (z >> np.uint64(31))


class OffsetRef:
    """A segment-relative reference; ``NULL`` is the all-ones offset."""

    __slots__ = ("offset",)

    def __init__(self, offset: int = NULL_OFFSET):
        self.offset = offset

    @property
    def is_null(self) -> bool:
        return self.offset == NULL_OFFSET

    def resolve(self, handle) -> int:
        if self.is_null:
            raise ValueError("cannot resolve a null reference")
        return handle.base + self.offset

    def __eq__(self, other):
        return isinstance(other, OffsetRef) and other.offset == self.offset

    def __hash__(self):
        return hash(self.offset)

    def __repr__(self):
        return "OffsetRef(NULL)" if self.is_null else f"OffsetRef({self.offset})"


OffsetRef.NULL = OffsetRef()


class PersistentHandle:
    persistent = True

    def __init__(self, manager):
        self.manager = manager
        self.allocate = manager.allocate
        self.deallocate = manager.deallocate

    @property
    def base(self):
        return self.manager.segment.base

    @property
    def words(self):
        return self.manager.segment.words

    @property
    def mem(self):
        return self.manager.segment.mem

    def array(self, offset, count, dtype):
        dtype = np.dtype(dtype)
        return np.frombuffer(self.mem[offset : offset + count * dtype.itemsize], dtype=dtype)


class TransientHeap:
    """Volatile size-class allocator over anonymous memory."""

    def __init__(self, reservation=1 << 36):
        self.reservation = reservation
        self.base = _sys.anonymous(reservation)
        self.mem = _sys.byte_view(self.base, reservation)
        self.words = self.mem.cast("Q")
        self.table = SizeClassTable(DEFAULT_CHUNK_SIZE)
        self._free = {}
        self._sizes = {}
        self._top = 0
        self._lock = threading.Lock()

    def allocate(self, n: int) -> int:
        if n < 1:
            raise ValueError(f"allocation size must be >= 1, got {n}")
        size = self.table.class_for(n) if self.table.is_small(n) else next_power_of_two(n)
        with self._lock:
            free = self._free.get(size)
            if free:
                off = free.pop()
            else:
                align = min(size & -size, _sys.PAGE_SIZE)
                off = -(-self._top // align) * align
                if off + size > self.reservation:
                    raise MemoryError("transient heap exhausted")
                self._top = off + size
            self._sizes[off] = size
        return off

    def deallocate(self, offset: int):
        with self._lock:
            size = self._sizes.pop(offset, None)
            if size is None:
                raise ValueError(f"offset {offset} is not allocated")
            if size >= _sys.PAGE_SIZE and offset % _sys.PAGE_SIZE == 0:
                _sys.madvise(self.base + offset, size, _sys.MADV_DONTNEED)
            self._free.setdefault(size, []).append(offset)

    def live_bytes(self) -> int:
        with self._lock:
            return sum(self._sizes.values())


_default_heap = None
_default_heap_lock = threading.Lock()


def default_transient_heap() -> TransientHeap:
    global _default_heap
    with _default_heap_lock:
        if _default_heap is None:
            _default_heap = TransientHeap()
        return _default_heap


class TransientHandle:
    persistent = False

    def __init__(self, heap: TransientHeap = None):
        self.heap = heap or default_transient_heap()
        self.allocate = self.heap.allocate
        self.deallocate = self.heap.deallocate
        self.base = self.heap.base
        self.words = self.heap.words
        self.mem = self.heap.mem

    def array(self, offset, count, dtype):
        dtype = np.dtype(dtype)
        return np.frombuffer(self.mem[offset : offset + count * dtype.itemsize], dtype=dtype)


def fallback_allocator(manager=None):
    """Handle for ``manager``, or for process memory when no manager is given."""
    if manager is None:
        return TransientHandle()
    return manager.get_allocator()


class PersistentVector:
    HEADER_BYTES = 32

    def __init__(self, handle, offset: int, dtype=np.uint64):
        self.handle = handle
        self.offset = offset
        self.dtype = np.dtype(dtype)
        stored = handle.words[(offset >> 3) + 3]
        if stored != self.dtype.itemsize:
            raise TypeError(f"vector stores {stored}-byte elements, not {self.dtype}")
        self._u64 = self.dtype == np.uint64

    @classmethod
    def create(cls, handle, dtype=np.uint64, offset: int = None) -> "PersistentVector":
        """New empty vector; the header goes at ``offset`` or into a fresh allocation."""
        if offset is None:
            offset = handle.allocate(cls.HEADER_BYTES)
        w = offset >> 3
        words = handle.words
        words[w] = NULL_OFFSET
        words[w + 1] = 0
        words[w + 2] = 0
        words[w + 3] = np.dtype(dtype).itemsize
        return cls(handle, offset, dtype)

    def __len__(self):
        return self.handle.words[(self.offset >> 3) + 1]

    @property
    def capacity(self) -> int:
        return self.handle.words[(self.offset >> 3) + 2]

    @property
    def data(self) -> OffsetRef:
        return OffsetRef(self.handle.words[self.offset >> 3])

    def _reserve(self, need):
        words = self.handle.words
        w = self.offset >> 3
        cap = words[w + 2]
        if need <= cap:
            return
        new_cap = cap * 2 if cap else 4
        while new_cap < need:
            new_cap *= 2
        es = self.dtype.itemsize
        new = self.handle.allocate(new_cap * es)
        old = words[w]
        if old != NULL_OFFSET:
            base = self.handle.base
            _sys.memmove(base + new, base + old, words[w + 1] * es)
            self.handle.deallocate(old)
        words[w] = new
        words[w + 2] = new_cap

    def append(self, item):
        n = len(self)
        self._reserve(n + 1)
        w = self.offset >> 3
        words = self.handle.words
        data = words[w]
        if self._u64:
            words[(data >> 3) + n] = int(item)
        else:
            self.handle.array(data + n * self.dtype.itemsize, 1, self.dtype)[0] = item
        words[w + 1] = n + 1

    def extend(self, items):
        arr = np.ascontiguousarray(items, dtype=self.dtype)
        k = len(arr)
        if not k:
            return
        n = len(self)
        self._reserve(n + k)
        w = self.offset >> 3
        words = self.handle.words
        es = self.dtype.itemsize
        _sys.memmove(self.handle.base + words[w] + n * es, arr.ctypes.data, k * es)
        words[w + 1] = n + k

    def __getitem__(self, i: int):
        n = len(self)
        if i < 0:
            i += n
        if not 0 <= i < n:
            raise IndexError(f"index {i} out of range for vector of length {n}")
        data = self.handle.words[self.offset >> 3]
        if self._u64:
            return self.handle.words[(data >> 3) + i]
        return self.handle.array(data + i * self.dtype.itemsize, 1, self.dtype)[0].item()

    def __iter__(self):
        return iter(self.to_numpy().tolist())

    def view(self) -> np.ndarray:
        """Zero-copy view; invalidated by the next growth."""
        n = len(self)
        if not n:
            return np.empty(0, dtype=self.dtype)
        return self.handle.array(self.handle.words[self.offset >> 3], n, self.dtype)

    def to_numpy(self) -> np.ndarray:
        return self.view().copy()

    def clear(self):
        self.handle.words[(self.offset >> 3) + 1] = 0

    def destroy(self, free_header: bool = True):
        words = self.handle.words
        data = words[self.offset >> 3]
        if data != NULL_OFFSET:
            self.handle.deallocate(data)
        if free_header:
            self.handle.deallocate(self.offset)
        else:
            words[self.offset >> 3] = NULL_OFFSET
            words[(self.offset >> 3) + 1] = 0
            words[(self.offset >> 3) + 2] = 0


class PersistentMap:
    """u64 -> u64 hash table, open addressing with linear probing.

    Bucket count is a power of two; the table doubles before the load factor
    would pass 0.7.  The key ``2**64 - 1`` is reserved for empty buckets.
    """

    HEADER_BYTES = 24
    INITIAL_BUCKETS = 8

    def __init__(self, handle, offset: int):
        self.handle = handle
        self.offset = offset

    @classmethod
    def create(cls, handle, offset: int = None) -> "PersistentMap":
        if offset is None:
            offset = handle.allocate(cls.HEADER_BYTES)
        w = offset >> 3
        handle.words[w] = NULL_OFFSET
        handle.words[w + 1] = 0
        handle.words[w + 2] = 0
        return cls(handle, offset)

    def __len__(self):
        return self.handle.words[(self.offset >> 3) + 2]

    @property
    def n_buckets(self) -> int:
        return self.handle.words[(self.offset >> 3) + 1]

    def _find(self, key):
        """Bucket word index holding ``key``, or the empty one where it would go."""
        words = self.handle.words
        w = self.offset >> 3
        nb = words[w + 1]
        if not nb:
            return None, False
        bw = words[w] >> 3
        mask = nb - 1
        i = mix64(key) & mask
        while True:
            k = words[bw + 2 * i]
            if k == key:
                return bw + 2 * i, True
            if k == EMPTY_KEY:
                return bw + 2 * i, False
            i = (i + 1) & mask

    def get(self, key: int, default=None):
        pos, found = self._find(key)
        return self.handle.words[pos + 1] if found else default

    def __contains__(self, key):
        return self._find(key)[1]

    def insert(self, key: int, value: int) -> bool:
        """Insert or overwrite; returns True when the key was new."""
        if key == EMPTY_KEY:
            raise ValueError("the all-ones key is reserved")
        pos, found = self._find(key)
        words = self.handle.words
        if found:
            words[pos + 1] = value
            return False
        w = self.offset >> 3
        n, nb = words[w + 2], words[w + 1]
        if (n + 1) * 10 > nb * 7:
            self._rehash(max(self.INITIAL_BUCKETS, nb * 2))
            pos, _ = self._find(key)
        words[pos] = key
        words[pos + 1] = value
        words[w + 2] = n + 1
        return True

    def _rehash(self, new_nb):
        h = self.handle
        words = h.words
        w = self.offset >> 3
        old, old_nb = words[w], words[w + 1]
        new = h.allocate(new_nb * 16)
        _sys.memset(h.base + new, 0xFF, new_nb * 16)
        mask = new_nb - 1
        nbw = new >> 3
        if old_nb:
            obw = old >> 3
            for j in range(old_nb):
                k = words[obw + 2 * j]
                if k == EMPTY_KEY:
                    continue
                i = mix64(k) & mask
                while words[nbw + 2 * i] != EMPTY_KEY:
                    i = (i + 1) & mask
                words[nbw + 2 * i] = k
                words[nbw + 2 * i + 1] = words[obw + 2 * j + 1]
            h.deallocate(old)
        words[w] = new
        words[w + 1] = new_nb

    def delete(self, key: int) -> bool:
        pos, found = self._find(key)
        if not found:
            return False
        words = self.handle.words
        w = self.offset >> 3
        bw = words[w] >> 3
        mask = words[w + 1] - 1
        i = (pos - bw) >> 1
        # backward-shift deletion keeps probe chains intact without tombstones
        j = i
        while True:
            j = (j + 1) & mask
            k = words[bw + 2 * j]
            if k == EMPTY_KEY:
                break
            home = mix64(k) & mask
            if (j - home) & mask >= (j - i) & mask:
                words[bw + 2 * i] = k
                words[bw + 2 * i + 1] = words[bw + 2 * j + 1]
                i = j
        words[bw + 2 * i] = EMPTY_KEY
        words[w + 2] -= 1
        return True

    def items(self):
        words = self.handle.words
        w = self.offset >> 3
        nb = words[w + 1]
        if not nb:
            return
        bw = words[w] >> 3
        for j in range(nb):
            k = words[bw + 2 * j]
            if k != EMPTY_KEY:
                yield k, words[bw + 2 * j + 1]

    def keys(self):
        return (k for k, _ in self.items())

    def destroy(self, free_header: bool = True):
        words = self.handle.words
        w = self.offset >> 3
        if words[w + 1]:
            self.handle.deallocate(words[w])
        if free_header:
            self.handle.deallocate(self.offset)


GRAPH_TYPE_TAG = "banked_adjacency_list"


class BankedAdjacencyList:
    """Adjacency list split into independently locked banks.

    Vertex ``v`` lives in bank ``(mix64(v) >> 32) % n_banks``; the bank's map
    uses the low hash bits, so the two choices stay independent.  Each vertex
    maps to a vector of 64-bit neighbour ids in insertion order.
    """

    HEADER_BYTES = 16

    def __init__(self, handle, offset: int):
        self.handle = handle
        self.offset = offset
        w = offset >> 3
        self.n_banks = handle.words[w]
        banks = handle.words[w + 1]
        self._maps = [PersistentMap(handle, banks + i * PersistentMap.HEADER_BYTES) for i in range(self.n_banks)]
        self._locks = [threading.Lock() for _ in range(self.n_banks)]

    @classmethod
    def create(cls, handle, banks: int = DEFAULT_BANKS, offset: int = None) -> "BankedAdjacencyList":
        if banks < 1:
            raise ValueError("need at least one bank")
        if offset is None:
            offset = handle.allocate(cls.HEADER_BYTES)
        region = handle.allocate(banks * PersistentMap.HEADER_BYTES)
        for i in range(banks):
            PersistentMap.create(handle, region + i * PersistentMap.HEADER_BYTES)
        handle.words[offset >> 3] = banks
        handle.words[(offset >> 3) + 1] = region
        return cls(handle, offset)

    @classmethod
    def construct(cls, manager, name: str, banks: int = DEFAULT_BANKS) -> "BankedAdjacencyList":
        """Create a graph registered in ``manager`` under ``name``."""
        off = manager.construct_named(name, 8, 2, GRAPH_TYPE_TAG)
        return cls.create(manager.get_allocator(), banks, offset=off)

    @classmethod
    def find(cls, manager, name: str):
        rec = manager.find_named(name)
        if rec is None:
            return None
        if rec.type_tag != GRAPH_TYPE_TAG:
            raise TypeError(f"{name!r} holds a {rec.type_tag!r}, not a graph")
        return cls(manager.get_allocator(), rec.offset)

    def bank_of(self, src: int) -> int:
        return (mix64(src) >> 32) % self.n_banks

    def insert_edge(self, src: int, dst: int):
        bank = self.bank_of(src)
        with self._locks[bank]:
            m = self._maps[bank]
            hdr = m.get(src)
            if hdr is None:
                hdr = PersistentVector.create(self.handle).offset
                m.insert(src, hdr)
            _vec_push_u64(self.handle, hdr, dst)

    def insert_edges(self, srcs, dsts):
        """Insert many edges; per source vertex, insertion order is kept."""
        srcs = np.ascontiguousarray(srcs, dtype=np.uint64)
        dsts = np.ascontiguousarray(dsts, dtype=np.uint64)
        if srcs.shape != dsts.shape:
            raise ValueError("srcs and dsts differ in length")
        if not len(srcs):
            return
        banks = (mix64_array(srcs) >> np.uint64(32)) % np.uint64(self.n_banks)
        order = np.argsort(banks, kind="stable")
        srcs, dsts, banks = srcs[order], dsts[order], banks[order]
        # within a bank, group by source while keeping arrival order per source
        order = np.lexsort((srcs, banks))
        srcs = srcs[order]
        dsts = np.ascontiguousarray(dsts[order])
        banks = banks[order]
        cut = np.flatnonzero((srcs[1:] != srcs[:-1]) | (banks[1:] != banks[:-1])) + 1
        starts = np.concatenate(([0], cut)).tolist()
        ends = np.concatenate((cut, [len(srcs)])).tolist()
        group_src = srcs[starts].tolist()
        group_bank = banks[starts].tolist()
        dst_addr = dsts.ctypes.data
        h = self.handle
        g = 0
        n_groups = len(starts)
        while g < n_groups:
            bank = group_bank[g]
            m = self._maps[bank]
            with self._locks[bank]:
                while g < n_groups and group_bank[g] == bank:
                    v = group_src[g]
                    hdr = m.get(v)
                    if hdr is None:
                        hdr = PersistentVector.create(h).offset
                        m.insert(v, hdr)
                    s = starts[g]
                    _vec_extend_u64(h, hdr, dst_addr + 8 * s, ends[g] - s)
                    g += 1

    def _vector(self, v):
        hdr = self._maps[self.bank_of(v)].get(v)
        return None if hdr is None else PersistentVector(self.handle, hdr)

    def neighbors(self, v: int) -> list:
        vec = self._vector(v)
        return [] if vec is None else vec.to_numpy().tolist()

    def neighbor_array(self, v: int) -> np.ndarray:
        vec = self._vector(v)
        return np.empty(0, dtype=np.uint64) if vec is None else vec.to_numpy()

    def degree(self, v: int) -> int:
        vec = self._vector(v)
        return 0 if vec is None else len(vec)

    def vertices(self):
        for m in self._maps:
            yield from m.keys()

    def num_vertices(self) -> int:
        return sum(len(m) for m in self._maps)

    def num_edges(self) -> int:
        words = self.handle.words
        return sum(words[(hdr >> 3) + 1] for m in self._maps for _, hdr in m.items())

    def adjacency(self) -> dict:
        """Vertex id -> copy of its neighbour array."""
        return {v: PersistentVector(self.handle, hdr).to_numpy() for m in self._maps for v, hdr in m.items()}

    def destroy(self):
        for m in self._maps:
            for _, hdr in m.items():
                PersistentVector(self.handle, hdr).destroy()
            m.destroy(free_header=False)
        self.handle.deallocate(self.handle.words[(self.offset >> 3) + 1])


def _vec_push_u64(h, hdr, value):
    words = h.words
    w = hdr >> 3
    n, cap = words[w + 1], words[w + 2]
    if n == cap:
        PersistentVector(h, hdr)._reserve(n + 1)
    words[(words[w] >> 3) + n] = value
    words[w + 1] = n + 1


def _vec_extend_u64(h, hdr, src_addr, k):
    words = h.words
    w = hdr >> 3
    n, cap = words[w + 1], words[w + 2]
    if n + k > cap:
        PersistentVector(h, hdr)._reserve(n + k)
    _sys.memmove(h.base + words[w] + 8 * n, src_addr, 8 * k)
    words[w + 1] = n + k
