"""Datastore copies that share blocks when the filesystem allows it."""

import errno
import os

from . import _sys


def copy_sparse(src_fd: int, dst_fd: int, size: int):
    """Copy only the data extents of ``src``; holes stay holes in ``dst``."""
    pos = 0
    while pos < size:
        try:
            start = os.lseek(src_fd, pos, os.SEEK_DATA)
        except OSError as e:
            if e.errno == errno.ENXIO:
                break
            raise
        stop = os.lseek(src_fd, start, os.SEEK_HOLE)
        off = start
        while off < stop:
            try:
                n = os.copy_file_range(src_fd, dst_fd, stop - off, off, off)
            except OSError as e:
                if e.errno not in (errno.EXDEV, errno.ENOSYS, errno.EOPNOTSUPP, errno.EINVAL):
                    raise
                data = os.pread(src_fd, min(stop - off, 1 << 24), off)
                n = os.pwrite(dst_fd, data, off)
            if n == 0:
                break
            off += n
        pos = stop
    os.ftruncate(dst_fd, size)


def clone_or_copy(src: str, dst: str) -> str:
    """Copy one file, returning ``"cloned"`` or ``"copied"``."""
    with open(src, "rb") as fs, open(dst, "xb") as fd:
        try:
            _sys.clone_file(fs.fileno(), fd.fileno())
            method = "cloned"
        except OSError:
            copy_sparse(fs.fileno(), fd.fileno(), os.fstat(fs.fileno()).st_size)
            method = "copied"
        os.fsync(fd.fileno())
    return method


def copy_tree(src_root: str, dst_root: str) -> str:
    """Copy every regular file under ``src_root``.  Returns ``"cloned"`` only
    when every file was block-cloned."""
    methods = set()
    for dirpath, _dirnames, filenames in os.walk(src_root):
        rel = os.path.relpath(dirpath, src_root)
        out = os.path.normpath(os.path.join(dst_root, rel))
        os.makedirs(out, exist_ok=True)
        for name in sorted(filenames):
            if name.endswith(".tmp") or name.startswith(".probe-"):
                continue
            methods.add(clone_or_copy(os.path.join(dirpath, name), os.path.join(out, name)))
    return "cloned" if methods == {"cloned"} else "copied"
