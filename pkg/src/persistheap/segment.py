"""The application data segment: one reserved address range backed by files.

The whole reservation is mapped ``PROT_NONE`` up front.  Backing files
``segment/seg-00000``, ``seg-00001``, ... are created sparse and mapped over
it at ``base + i * file_size`` as allocation reaches them, so byte ``x`` of
the segment is byte ``x % file_size`` of file ``x // file_size``.
"""

import enum
import os
import struct
import threading
import zlib
from dataclasses import dataclass

from . import _sys
from .errors import (
    BadMagicError,
    ChecksumError,
    DatastoreError,
    OutOfSpaceError,
    ReadOnlyError,
    TruncatedFileError,
    VersionMismatchError,
)

MANIFEST_FILE = "manifest"
MANIFEST_MAGIC = b"MTLL"
MANIFEST_VERSION = 1
SEGMENT_DIR = "segment"

_MANIFEST = struct.Struct("<4sIQQQQ")
_CRC = struct.Struct("<I")


class SegmentMode(enum.Enum):
    READ_WRITE = "read_write"
    READ_ONLY = "read_only"
    PRIVATE_BATCH = "private_batch"


def segment_file_name(i: int) -> str:
    return f"seg-{i:05d}"


@dataclass(frozen=True)
class Manifest:
    chunk_size: int
    file_size: int
    reservation: int
    num_files: int

    def to_bytes(self) -> bytes:
        body = _MANIFEST.pack(
            MANIFEST_MAGIC, MANIFEST_VERSION, self.chunk_size, self.file_size, self.reservation, self.num_files
        )
        return body + _CRC.pack(zlib.crc32(body))

    @classmethod
    def from_bytes(cls, data: bytes) -> "Manifest":
        if len(data) < _MANIFEST.size + _CRC.size:
            raise TruncatedFileError("manifest cut short")
        magic, version, chunk, fsize, res, nfiles = _MANIFEST.unpack_from(data, 0)
        if magic != MANIFEST_MAGIC:
            raise BadMagicError(f"manifest: bad magic {magic!r}")
        if version != MANIFEST_VERSION:
            raise VersionMismatchError(f"manifest: version {version}, expected {MANIFEST_VERSION}")
        (crc,) = _CRC.unpack_from(data, _MANIFEST.size)
        if crc != zlib.crc32(data[: _MANIFEST.size]):
            raise ChecksumError("manifest: checksum mismatch")
        return cls(chunk, fsize, res, nfiles)

    def write(self, root):
        path = os.path.join(root, MANIFEST_FILE)
        tmp = path + ".tmp"
        with open(tmp, "wb") as f:
            f.write(self.to_bytes())
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)

    @classmethod
    def read(cls, root) -> "Manifest":
        path = os.path.join(root, MANIFEST_FILE)
        try:
            with open(path, "rb") as f:
                return cls.from_bytes(f.read())
        except FileNotFoundError:
            raise DatastoreError(f"{root}: not a datastore (no manifest)") from None


def validate_geometry(chunk_size, file_size, reservation):
    if file_size <= 0 or file_size % chunk_size:
        raise ValueError(f"file size {file_size} must be a positive multiple of the chunk size {chunk_size}")
    if reservation <= 0 or reservation % file_size:
        raise ValueError(f"reservation {reservation} must be a positive multiple of the file size {file_size}")


class Segment:
    def __init__(self, root, chunk_size, file_size, reservation, mode=SegmentMode.READ_WRITE, populate=False):
        validate_geometry(chunk_size, file_size, reservation)
        self.root = os.fspath(root)
        self.chunk_size = chunk_size
        self.file_size = file_size
        self.reservation = reservation
        self.mode = mode
        self.populate = populate
        self.base = _sys.reserve(reservation)
        self.mem = _sys.byte_view(self.base, reservation, readonly=mode is SegmentMode.READ_ONLY)
        self.words = self.mem.cast("Q")
        self.mapped_files = 0
        self.can_punch = None
        self.last_flush_stats = None
        self.closed = False
        self._fds = []
        self._private = []
        # private-batch mode: chunk ranges released since the last flush
        self._pending_release = {}
        self._lock = threading.Lock()

    @classmethod
    def create(cls, root, chunk_size, file_size, reservation, mode=SegmentMode.READ_WRITE, populate=False):
        if mode is SegmentMode.READ_ONLY:
            raise ReadOnlyError("cannot create a segment read-only")
        validate_geometry(chunk_size, file_size, reservation)
        os.makedirs(os.path.join(root, SEGMENT_DIR), exist_ok=True)
        return cls(root, chunk_size, file_size, reservation, mode, populate)

    @classmethod
    def open(cls, root, mode=SegmentMode.READ_WRITE, populate=False, manifest: Manifest = None):
        """Reopen using the geometry recorded in the manifest."""
        manifest = manifest or Manifest.read(root)
        try:
            validate_geometry(manifest.chunk_size, manifest.file_size, manifest.reservation)
        except ValueError as e:
            raise DatastoreError(f"{root}: manifest geometry invalid: {e}") from None
        if manifest.num_files * manifest.file_size > manifest.reservation:
            raise DatastoreError(f"{root}: manifest lists more files than the reservation holds")
        for i in range(manifest.num_files):
            if not os.path.exists(os.path.join(root, SEGMENT_DIR, segment_file_name(i))):
                raise DatastoreError(f"{root}: missing backing file {segment_file_name(i)}")
        seg = cls(root, manifest.chunk_size, manifest.file_size, manifest.reservation, mode, populate)
        try:
            seg.ensure_mapped(manifest.num_files * manifest.file_size)
        except BaseException:
            seg.close()
            raise
        return seg

    def manifest(self) -> Manifest:
        return Manifest(self.chunk_size, self.file_size, self.reservation, self.mapped_files)

    def save_manifest(self):
        self.manifest().write(self.root)

    @property
    def mapped_size(self) -> int:
        return self.mapped_files * self.file_size

    @property
    def writable(self) -> bool:
        return self.mode is not SegmentMode.READ_ONLY

    def file_path(self, i: int) -> str:
        return os.path.join(self.root, SEGMENT_DIR, segment_file_name(i))

    def file_paths(self) -> list:
        return [self.file_path(i) for i in range(self.mapped_files)]

    def ensure_mapped(self, upto: int):
        """Map backing files until at least ``upto`` bytes are file-backed."""
        if upto > self.reservation:
            raise OutOfSpaceError(f"offset {upto} beyond the {self.reservation}-byte reservation")
        need = -(-upto // self.file_size)
        if need <= self.mapped_files:
            return
        with self._lock:
            while self.mapped_files < need:
                self._map_file(self.mapped_files)

    def _map_file(self, i):
        path = self.file_path(i)
        addr = self.base + i * self.file_size
        if self.writable:
            fd = os.open(path, os.O_RDWR | os.O_CREAT, 0o644)
        else:
            fd = os.open(path, os.O_RDONLY)
        try:
            if self.writable and os.fstat(fd).st_size < self.file_size:
                os.ftruncate(fd, self.file_size)
            if self.mode is SegmentMode.PRIVATE_BATCH:
                from . import bs_msync

                self._private.append(bs_msync.map_private(fd, 0, self.file_size, self.populate, addr=addr))
            else:
                _sys.map_file_fixed(addr, self.file_size, fd, 0, writable=self.writable, shared=True)
        except BaseException:
            os.close(fd)
            raise
        self._fds.append(fd)
        self.mapped_files += 1

    def _check_range(self, offset, length):
        if offset < 0 or length < 0 or offset + length > self.mapped_size:
            raise ValueError(f"range [{offset}, {offset + length}) is not file-backed")

    def read(self, offset: int, length: int) -> bytes:
        self._check_range(offset, length)
        return bytes(self.mem[offset : offset + length])

    def write(self, offset: int, data):
        if not self.writable:
            raise ReadOnlyError("segment is read-only")
        self._check_range(offset, len(data))
        self.mem[offset : offset + len(data)] = data

    def zero(self, offset: int, length: int):
        self._check_range(offset, length)
        _sys.memset(self.base + offset, 0, length)

    def free_chunk_space(self, chunk_index: int, n_chunks: int = 1) -> bool:
        """Release the storage behind whole chunks; the range then reads as zeros.

        Returns True when file blocks were deallocated.  In private-batch mode
        the private copies are dropped now and the file range is punched at
        the next flush, so the file keeps its last flushed state until then.
        """
        if not self.writable:
            raise ReadOnlyError("segment is read-only")
        start = chunk_index * self.chunk_size
        length = n_chunks * self.chunk_size
        self._check_range(start, length)
        if self.mode is SegmentMode.PRIVATE_BATCH:
            _sys.madvise(self.base + start, length, _sys.MADV_DONTNEED)
            with self._lock:
                for c in range(chunk_index, chunk_index + n_chunks):
                    self._pending_release[c] = True
            return False
        return self._punch(start, length)

    def claim_chunks(self, chunk_index: int, n_chunks: int = 1):
        """Note that chunks are in use again.  A chunk released earlier in
        private-batch mode still shows stale file bytes, so it is zeroed."""
        if not self._pending_release:
            return
        with self._lock:
            for c in range(chunk_index, chunk_index + n_chunks):
                if self._pending_release.pop(c, None):
                    _sys.memset(self.base + c * self.chunk_size, 0, self.chunk_size)

    def _punch(self, start, length):
        punched = True
        pos, end = start, start + length
        while pos < end:
            i, in_file = divmod(pos, self.file_size)
            piece = min(end - pos, self.file_size - in_file)
            if self.can_punch is not False:
                try:
                    _sys.punch_hole(self._fds[i], in_file, piece)
                    self.can_punch = True
                except OSError:
                    self.can_punch = False
            if self.can_punch is False:
                _sys.memset(self.base + pos, 0, piece)
                _sys.madvise(self.base + pos, piece, _sys.MADV_DONTNEED)
                punched = False
            pos += piece
        return punched

    def flush(self, sync: bool = True):
        """Make the mapped contents durable in the backing files.

        Returns the write-back statistics in private-batch mode, else None.
        """
        if not self.writable:
            raise ReadOnlyError("cannot flush a read-only segment")
        if self.mode is SegmentMode.PRIVATE_BATCH:
            from . import bs_msync

            stats = bs_msync.write_back(self._private, workers=max(1, len(self._private)))
            with self._lock:
                pending = sorted(self._pending_release)
                self._pending_release.clear()
            touched = {self._punch_private(c * self.chunk_size, self.chunk_size) for c in pending}
            for fd in touched:
                os.fsync(fd)
            self.last_flush_stats = stats
            return stats
        for i, fd in enumerate(self._fds):
            try:
                _sys.msync(self.base + i * self.file_size, self.file_size, sync)
                if sync:
                    os.fsync(fd)
            except OSError as e:
                raise OSError(e.errno, f"flushing {segment_file_name(i)}: {e.strerror}") from e
        return None

    def _punch_private(self, start, length):
        i, in_file = divmod(start, self.file_size)
        fd = self._fds[i]
        if self.can_punch is not False:
            try:
                _sys.punch_hole(fd, in_file, length)
                self.can_punch = True
            except OSError:
                self.can_punch = False
        if self.can_punch is False:
            os.pwrite(fd, bytes(length), in_file)
        _sys.madvise(self.base + start, length, _sys.MADV_DONTNEED)
        return fd

    def allocated_bytes(self) -> int:
        return sum(_sys.allocated_bytes(p) for p in self.file_paths())

    def close(self):
        if self.closed:
            return
        self.closed = True
        for view in (self.words, self.mem):
            try:
                view.release()
            except BufferError:
                pass
        _sys.munmap(self.base, self.reservation)
        for fd in self._fds:
            os.close(fd)
        self._fds = []
        self._private = []
