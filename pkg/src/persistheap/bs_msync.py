"""User-space msync for private (copy-on-write) file mappings.

The kernel never writes a ``MAP_PRIVATE`` mapping back to its file.  Pages the
process has written to stop being file pages, and ``/proc/self/pagemap``
shows that: such a page has bit 61 (file page / shared anon) clear while bit
62 (swapped) or bit 63 (present) is set.  :func:`write_back` finds those pages,
merges neighbours into runs, writes each run with one ``pwrite`` and then
re-installs a fresh private mapping so dirty tracking starts over.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import _sys
from .errors import CapabilityError

PAGEMAP_PATH = "/proc/self/pagemap"
PAGEMAP_ENTRY = 8

BIT_FILE_OR_SHARED = 61
BIT_SWAPPED = 62
BIT_PRESENT = 63


class DirtyRun(NamedTuple):
    start_page: int
    n_pages: int


@dataclass
class FlushStats:
    pages_scanned: int = 0
    pages_dirty: int = 0
    runs_written: int = 0
    bytes_written: int = 0
    workers_used: int = 0
    per_file: dict = field(default_factory=dict, repr=False)

    def add(self, other: "FlushStats"):
        self.pages_scanned += other.pages_scanned
        self.pages_dirty += other.pages_dirty
        self.runs_written += other.runs_written
        self.bytes_written += other.bytes_written


@dataclass
class PrivateMapping:
    base: int
    length: int
    fd: int
    file_offset: int = 0
    page_size: int = _sys.PAGE_SIZE
    populate: bool = False

    @property
    def n_pages(self) -> int:
        return -(-self.length // self.page_size)

    def view(self) -> memoryview:
        return _sys.byte_view(self.base, self.length)


class WriteBackError(OSError):
    def __init__(self, failures):
        self.failures = failures
        detail = ", ".join(f"fd {fd}: {exc}" for fd, exc in failures.items())
        super().__init__(f"write-back failed for {len(failures)} file(s): {detail}")


def _fileno(file):
    return file if isinstance(file, int) else file.fileno()


def map_private(file, file_offset: int, length: int, populate: bool = False, *, addr=None) -> PrivateMapping:
    """Map ``length`` bytes of ``file`` copy-on-write.

    With ``addr`` the mapping replaces whatever is at that address (used to
    place files inside a reserved range).
    """
    ps = _sys.PAGE_SIZE
    if length <= 0:
        raise ValueError("length must be positive")
    if file_offset % ps or (addr is not None and addr % ps):
        raise ValueError(f"file offset and address must be multiples of the page size {ps}")
    fd = _fileno(file)
    if addr is None:
        flags = _sys.MAP_PRIVATE | (_sys.MAP_POPULATE if populate else 0)
        base = _sys.mmap_raw(None, length, _sys.PROT_READ | _sys.PROT_WRITE, flags, fd, file_offset)
    else:
        base = _sys.map_file_fixed(addr, length, fd, file_offset, writable=True, shared=False, populate=populate)
    return PrivateMapping(base, length, fd, file_offset, ps, populate)


def unmap(m: PrivateMapping):
    _sys.munmap(m.base, m.length)


def pagemap_supported() -> bool:
    try:
        buf = _sys.anonymous(_sys.PAGE_SIZE)
    except OSError:
        return False
    try:
        _sys.memset(buf, 1, 1)
        entries = read_pagemap(buf, 1)
        return bool(entries[0] >> BIT_PRESENT & 1)
    except CapabilityError:
        return False
    finally:
        _sys.munmap(buf, _sys.PAGE_SIZE)


def read_pagemap(addr: int, n_pages: int, page_size: int = _sys.PAGE_SIZE) -> np.ndarray:
    """Raw 64-bit page-table entries for ``n_pages`` pages starting at ``addr``."""
    want = n_pages * PAGEMAP_ENTRY
    pos = (addr // page_size) * PAGEMAP_ENTRY
    try:
        fd = os.open(PAGEMAP_PATH, os.O_RDONLY)
    except OSError as e:
        raise CapabilityError(e.errno, f"cannot open {PAGEMAP_PATH}: {e.strerror}") from None
    try:
        chunks = []
        got = 0
        while got < want:
            data = os.pread(fd, want - got, pos + got)
            if not data:
                raise CapabilityError(0, f"short read from {PAGEMAP_PATH}")
            chunks.append(data)
            got += len(data)
    except OSError as e:
        if isinstance(e, CapabilityError):
            raise
        raise CapabilityError(e.errno, f"cannot read {PAGEMAP_PATH}: {e.strerror}") from None
    finally:
        os.close(fd)
    return np.frombuffer(b"".join(chunks), dtype="<u8")


def dirty_mask(entries: np.ndarray) -> np.ndarray:
    """Pages that are no longer file-backed but are present or swapped."""
    entries = np.asarray(entries, dtype=np.uint64)
    file_page = (entries >> np.uint64(BIT_FILE_OR_SHARED)) & np.uint64(1)
    resident = (entries >> np.uint64(BIT_SWAPPED)) & np.uint64(3)
    return (file_page == 0) & (resident != 0)


def runs_from_mask(mask: np.ndarray) -> list:
    if not mask.any():
        return []
    edges = np.diff(np.concatenate(([0], mask.astype(np.int8), [0])))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    return [DirtyRun(int(s), int(e - s)) for s, e in zip(starts, stops)]


def scan_dirty(m: PrivateMapping) -> list:
    entries = read_pagemap(m.base, m.n_pages, m.page_size)
    return runs_from_mask(dirty_mask(entries))


def _write_back_one(m: PrivateMapping) -> FlushStats:
    runs = scan_dirty(m)
    stats = FlushStats(pages_scanned=m.n_pages)
    ps = m.page_size
    for run in runs:
        off = run.start_page * ps
        size = min(run.n_pages * ps, m.length - off)
        view = _sys.byte_view(m.base + off, size, readonly=True)
        done = 0
        while done < size:
            done += os.pwrite(m.fd, view[done:], m.file_offset + off + done)
        stats.pages_dirty += run.n_pages
        stats.runs_written += 1
        stats.bytes_written += run.n_pages * ps
    os.fsync(m.fd)
    if runs:
        # a fresh copy-on-write mapping over the same range resets dirty tracking
        _sys.map_file_fixed(m.base, m.length, m.fd, m.file_offset, writable=True, shared=False, populate=m.populate)
    return stats


def write_back(mappings, workers: int = None) -> FlushStats:
    """Write every dirty page of ``mappings`` to its file.

    Work is partitioned by file: at most ``workers`` threads run at once and
    each thread handles all mappings of one file, writing runs in ascending
    order.  Callers must not write to the mappings while this runs.
    """
    by_file = {}
    for m in mappings:
        by_file.setdefault(m.fd, []).append(m)
    total = FlushStats()
    if not by_file:
        return total
    workers = len(by_file) if workers is None else max(1, min(workers, len(by_file)))
    total.workers_used = workers

    def flush_file(ms):
        out = FlushStats()
        for m in sorted(ms, key=lambda m: m.file_offset):
            out.add(_write_back_one(m))
        return out

    failures = {}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {fd: pool.submit(flush_file, ms) for fd, ms in by_file.items()}
        for fd, fut in futures.items():
            try:
                s = fut.result()
            except OSError as e:
                failures[fd] = e
                continue
            total.add(s)
            total.per_file[fd] = s
    if failures:
        raise WriteBackError(failures)
    return total
