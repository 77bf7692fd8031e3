"""Thin ctypes bindings for the Linux memory-mapping and file-space calls."""

import ctypes
import errno
import fcntl
import mmap
import os

libc = ctypes.CDLL(None, use_errno=True)

PAGE_SIZE = mmap.PAGESIZE

PROT_NONE = 0x0
PROT_READ = 0x1
PROT_WRITE = 0x2

MAP_SHARED = 0x01
MAP_PRIVATE = 0x02
MAP_FIXED = 0x10
MAP_ANONYMOUS = 0x20
MAP_NORESERVE = 0x4000
MAP_POPULATE = 0x8000

MS_ASYNC = 1
MS_SYNC = 4

MADV_DONTNEED = 4
MADV_REMOVE = 9

FALLOC_FL_KEEP_SIZE = 0x01
FALLOC_FL_PUNCH_HOLE = 0x02

FICLONE = 0x40049409

MAP_FAILED = ctypes.c_void_p(-1).value

_mmap = libc.mmap
_mmap.restype = ctypes.c_void_p
_mmap.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int, ctypes.c_int, ctypes.c_int, ctypes.c_int64]

_munmap = libc.munmap
_munmap.restype = ctypes.c_int
_munmap.argtypes = [ctypes.c_void_p, ctypes.c_size_t]

_msync = libc.msync
_msync.restype = ctypes.c_int
_msync.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int]

_madvise = libc.madvise
_madvise.restype = ctypes.c_int
_madvise.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int]

_fallocate = libc.fallocate
_fallocate.restype = ctypes.c_int
_fallocate.argtypes = [ctypes.c_int, ctypes.c_int, ctypes.c_int64, ctypes.c_int64]


def _raise(what):
    err = ctypes.get_errno()
    raise OSError(err, f"{what}: {os.strerror(err)}")


def mmap_raw(addr, length, prot, flags, fd=-1, offset=0):
    res = _mmap(addr, length, prot, flags, fd, offset)
    if res is None or res == MAP_FAILED:
        _raise("mmap")
    return res


def reserve(length, hint=None):
    """Reserve ``length`` bytes of inaccessible address space."""
    return mmap_raw(hint, length, PROT_NONE, MAP_PRIVATE | MAP_ANONYMOUS | MAP_NORESERVE)


def anonymous(length, hint=None):
    return mmap_raw(hint, length, PROT_READ | PROT_WRITE, MAP_PRIVATE | MAP_ANONYMOUS | MAP_NORESERVE)


def map_file_fixed(addr, length, fd, offset, *, writable, shared, populate=False):
    prot = PROT_READ | (PROT_WRITE if writable else 0)
    flags = MAP_FIXED | (MAP_SHARED if shared else MAP_PRIVATE)
    if populate:
        flags |= MAP_POPULATE
    res = mmap_raw(addr, length, prot, flags, fd, offset)
    if res != addr:
        raise OSError(errno.EFAULT, "mmap did not honour the fixed address")
    return res


def unreserve(addr, length):
    """Return [addr, addr+length) to the inaccessible reservation state."""
    mmap_raw(addr, length, PROT_NONE, MAP_FIXED | MAP_PRIVATE | MAP_ANONYMOUS | MAP_NORESERVE)


def munmap(addr, length):
    if _munmap(addr, length) != 0:
        _raise("munmap")


def msync(addr, length, sync=True):
    if _msync(addr, length, MS_SYNC if sync else MS_ASYNC) != 0:
        _raise("msync")


def madvise(addr, length, advice):
    if _madvise(addr, length, advice) != 0:
        _raise("madvise")


def punch_hole(fd, offset, length):
    if _fallocate(fd, FALLOC_FL_PUNCH_HOLE | FALLOC_FL_KEEP_SIZE, offset, length) != 0:
        _raise("fallocate")


def clone_file(src_fd, dst_fd):
    fcntl.ioctl(dst_fd, FICLONE, src_fd)


def memset(addr, value, length):
    ctypes.memset(addr, value, length)


def memmove(dst, src, length):
    ctypes.memmove(dst, src, length)


def byte_view(addr, length, readonly=False):
    """A flat ``'B'`` memoryview over raw memory. Touching unmapped bytes faults."""
    view = memoryview((ctypes.c_ubyte * length).from_address(addr)).cast("B")
    return view.toreadonly() if readonly else view


def allocated_bytes(path):
    """Bytes of storage actually backing ``path`` (sparse files count holes as 0)."""
    return os.stat(path).st_blocks * 512


def _probe_file(directory):
    import tempfile

    return tempfile.NamedTemporaryFile(dir=directory, prefix=".probe-")


def can_punch_holes(directory):
    with _probe_file(directory) as f:
        os.ftruncate(f.fileno(), PAGE_SIZE)
        try:
            punch_hole(f.fileno(), 0, PAGE_SIZE)
        except OSError:
            return False
        return True


def can_clone(directory):
    with _probe_file(directory) as a, _probe_file(directory) as b:
        a.write(b"x" * PAGE_SIZE)
        a.flush()
        try:
            clone_file(a.fileno(), b.fileno())
        except OSError:
            return False
        return True
