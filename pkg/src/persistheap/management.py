"""Chunk, bin and name directories, and their serialized form.

All three live in ordinary process memory while a datastore is open and are
written to ``management/`` on flush.  The bin directory is derived data and is
rebuilt from the chunk records on load, so only two files exist:

``chunks.bin``  header + one record per chunk below the high-water mark:
                ``kind u8, bin u8, span u32`` followed, for small chunks, by
                the bitset leaf words (u64 each).
``names.bin``   header + ``count u64`` then per entry
                ``u32 len, name, u64 offset, u64 length, u64 element_size,
                u32 len, type_tag``.

Header: ``magic[4], format_version u32, payload_len u64, crc32 u32``, all
little-endian.
"""

import os
import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum

from .bitset import WORD_BITS, MultiLayerBitset
from .errors import (
    AlreadyExistsError,
    BadMagicError,
    ChecksumError,
    DatastoreFormatError,
    TruncatedFileError,
    VersionMismatchError,
)

FORMAT_VERSION = 1
CHUNKS_MAGIC = b"MTCD"
NAMES_MAGIC = b"MTND"
CHUNKS_FILE = "chunks.bin"
NAMES_FILE = "names.bin"
MANAGEMENT_DIR = "management"

_HEADER = struct.Struct("<4sIQI")
_RECORD = struct.Struct("<BBI")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_NAME_FIELDS = struct.Struct("<QQQ")


class ChunkKind(IntEnum):
    EMPTY = 0
    SMALL = 1
    LARGE_HEAD = 2
    LARGE_BODY = 3


@dataclass(frozen=True)
class ChunkRecord:
    kind: ChunkKind
    bin: int | None = None
    span: int | None = None
    occupied: int | None = None


class ChunkDirectory:
    """Dense per-chunk state.  ``kinds`` is a bytearray so that searching for a
    run of empty chunks is a substring search for zero bytes."""

    def __init__(self, num_chunks: int, table):
        self.table = table
        self.num_chunks = num_chunks
        self.kinds = bytearray(num_chunks)
        self.bins = {}
        self.bitsets = {}
        self.spans = {}
        self.high_water = 0

    def find_empty_chunks(self, n: int):
        if n < 1:
            raise ValueError("n must be >= 1")
        i = self.kinds.find(bytes(n))
        return None if i < 0 else i

    def claim_small(self, c: int, b: int) -> MultiLayerBitset:
        assert self.kinds[c] == ChunkKind.EMPTY
        bs = MultiLayerBitset(self.table.slots_per_chunk(b))
        self.kinds[c] = ChunkKind.SMALL
        self.bins[c] = b
        self.bitsets[c] = bs
        if c >= self.high_water:
            self.high_water = c + 1
        return bs

    def claim_large(self, c: int, span: int):
        assert not any(self.kinds[c : c + span])
        self.kinds[c] = ChunkKind.LARGE_HEAD
        if span > 1:
            self.kinds[c + 1 : c + span] = bytes([ChunkKind.LARGE_BODY]) * (span - 1)
        self.spans[c] = span
        if c + span > self.high_water:
            self.high_water = c + span

    def release_small(self, c: int):
        self.kinds[c] = ChunkKind.EMPTY
        del self.bins[c]
        del self.bitsets[c]

    def release_large(self, c: int) -> int:
        span = self.spans.pop(c)
        self.kinds[c : c + span] = bytes(span)
        return span

    def record(self, c: int) -> ChunkRecord:
        kind = ChunkKind(self.kinds[c])
        if kind == ChunkKind.SMALL:
            return ChunkRecord(kind, bin=self.bins[c], occupied=self.bitsets[c].count)
        if kind == ChunkKind.LARGE_HEAD:
            return ChunkRecord(kind, span=self.spans[c])
        return ChunkRecord(kind)

    def count_kinds(self) -> dict:
        head = self.kinds[: self.high_water]
        counts = {k.name.lower(): head.count(k) for k in ChunkKind if k}
        counts["empty"] = self.num_chunks - sum(counts.values())
        return counts

    def used_chunks(self) -> int:
        return self.high_water - self.kinds[: self.high_water].count(0)

    def __eq__(self, other):
        if not isinstance(other, ChunkDirectory):
            return NotImplemented
        n = max(self.high_water, other.high_water)
        return (
            self.num_chunks == other.num_chunks
            and self.kinds[:n] == other.kinds[:n]
            and self.bins == other.bins
            and self.spans == other.spans
            and self.bitsets == other.bitsets
        )

    # --- serialization ---

    def to_bytes(self) -> bytes:
        parts = []
        for c in range(self.high_water):
            kind = self.kinds[c]
            if kind == ChunkKind.SMALL:
                words = self.bitsets[c].leaf_words()
                parts.append(_RECORD.pack(kind, self.bins[c], 0))
                parts.append(struct.pack(f"<{len(words)}Q", *words))
            elif kind == ChunkKind.LARGE_HEAD:
                parts.append(_RECORD.pack(kind, 0, self.spans[c]))
            else:
                parts.append(_RECORD.pack(kind, 0, 0))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, payload: bytes, num_chunks: int, table) -> "ChunkDirectory":
        cd = cls(num_chunks, table)
        pos = 0
        c = 0
        end = len(payload)
        while pos < end:
            if pos + _RECORD.size > end:
                raise TruncatedFileError("chunk record cut short")
            if c >= num_chunks:
                raise DatastoreFormatError("more chunk records than the reservation holds")
            kind, b, span = _RECORD.unpack_from(payload, pos)
            pos += _RECORD.size
            if kind == ChunkKind.SMALL:
                if b >= table.num_bins:
                    raise DatastoreFormatError(f"chunk {c}: bin {b} out of range")
                slots = table.slots_per_chunk(b)
                nwords = -(-slots // WORD_BITS)
                if pos + 8 * nwords > end:
                    raise TruncatedFileError(f"chunk {c}: bitset cut short")
                words = struct.unpack_from(f"<{nwords}Q", payload, pos)
                pos += 8 * nwords
                cd.kinds[c] = kind
                cd.bins[c] = b
                cd.bitsets[c] = MultiLayerBitset.from_leaf_words(slots, words)
            elif kind == ChunkKind.LARGE_HEAD:
                cd.kinds[c] = kind
                cd.spans[c] = span
            elif kind in (ChunkKind.EMPTY, ChunkKind.LARGE_BODY):
                cd.kinds[c] = kind
            else:
                raise DatastoreFormatError(f"chunk {c}: unknown kind {kind}")
            c += 1
        cd.high_water = c
        return cd


class BinDirectory:
    """One LIFO of non-full chunk ids per size class.

    Each bin is an insertion-ordered dict used as a stack: ``popitem`` removes
    the most recent entry and arbitrary removal is O(1).
    """

    def __init__(self, num_bins: int):
        self.bins = [dict() for _ in range(num_bins)]

    def push(self, b: int, chunk: int):
        d = self.bins[b]
        if chunk in d:
            raise ValueError(f"chunk {chunk} already listed in bin {b}")
        d[chunk] = None

    def pop(self, b: int):
        d = self.bins[b]
        return d.popitem()[0] if d else None

    def peek(self, b: int):
        d = self.bins[b]
        return next(reversed(d)) if d else None

    def remove(self, b: int, chunk: int) -> bool:
        return self.bins[b].pop(chunk, False) is None

    def chunks(self, b: int) -> list:
        """Chunks of bin ``b`` from bottom to top of the stack."""
        return list(self.bins[b])

    def non_full_counts(self) -> list:
        return [len(d) for d in self.bins]

    @classmethod
    def rebuild(cls, chunks: ChunkDirectory) -> "BinDirectory":
        bd = cls(chunks.table.num_bins)
        for c in sorted(chunks.bitsets):
            if not chunks.bitsets[c].is_full():
                bd.push(chunks.bins[c], c)
        return bd


@dataclass(frozen=True)
class NameRecord:
    name: str
    offset: int
    length: int
    element_size: int
    type_tag: str = ""

    @property
    def nbytes(self) -> int:
        return self.length * self.element_size


class NameDirectory:
    def __init__(self):
        self._entries = {}

    def insert(self, rec: NameRecord):
        if rec.name in self._entries:
            raise AlreadyExistsError(f"name {rec.name!r} already exists")
        self._entries[rec.name] = rec

    def find(self, name: str):
        return self._entries.get(name)

    def erase(self, name: str):
        """Remove and return the record, or None when absent."""
        return self._entries.pop(name, None)

    def __contains__(self, name):
        return name in self._entries

    def __iter__(self):
        return iter(self._entries.values())

    def __len__(self):
        return len(self._entries)

    def __eq__(self, other):
        if not isinstance(other, NameDirectory):
            return NotImplemented
        return self._entries == other._entries

    def to_bytes(self) -> bytes:
        parts = [_U64.pack(len(self._entries))]
        for rec in self._entries.values():
            name = rec.name.encode()
            tag = rec.type_tag.encode()
            parts += [
                _U32.pack(len(name)),
                name,
                _NAME_FIELDS.pack(rec.offset, rec.length, rec.element_size),
                _U32.pack(len(tag)),
                tag,
            ]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, payload: bytes) -> "NameDirectory":
        nd = cls()
        try:
            (count,) = _U64.unpack_from(payload, 0)
            pos = _U64.size
            for _ in range(count):
                (n,) = _U32.unpack_from(payload, pos)
                pos += 4
                name = payload[pos : pos + n]
                if len(name) != n:
                    raise TruncatedFileError("name entry cut short")
                pos += n
                offset, length, esize = _NAME_FIELDS.unpack_from(payload, pos)
                pos += _NAME_FIELDS.size
                (n,) = _U32.unpack_from(payload, pos)
                pos += 4
                tag = payload[pos : pos + n]
                if len(tag) != n:
                    raise TruncatedFileError("name entry cut short")
                pos += n
                nd.insert(NameRecord(name.decode(), offset, length, esize, tag.decode()))
        except struct.error as e:
            raise TruncatedFileError(f"name directory cut short: {e}") from None
        if pos != len(payload):
            raise DatastoreFormatError("trailing bytes after name entries")
        return nd


def write_blob(path, magic: bytes, payload: bytes):
    header = _HEADER.pack(magic, FORMAT_VERSION, len(payload), zlib.crc32(payload))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(payload)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def read_blob(path, magic: bytes) -> bytes:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HEADER.size:
        raise TruncatedFileError(f"{path}: header cut short")
    got_magic, version, length, crc = _HEADER.unpack_from(data, 0)
    if got_magic != magic:
        raise BadMagicError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    payload = data[_HEADER.size :]
    if len(payload) < length:
        raise TruncatedFileError(f"{path}: payload has {len(payload)} of {length} bytes")
    if len(payload) > length:
        raise DatastoreFormatError(f"{path}: trailing bytes after payload")
    if zlib.crc32(payload) != crc:
        raise ChecksumError(f"{path}: checksum mismatch")
    return payload


class ManagementData:
    """The three directories of one heap, loaded and saved together."""

    def __init__(self, chunks: ChunkDirectory, names: NameDirectory, bins: BinDirectory = None):
        self.chunks = chunks
        self.names = names
        self.bins = bins if bins is not None else BinDirectory.rebuild(chunks)

    @classmethod
    def empty(cls, num_chunks: int, table) -> "ManagementData":
        return cls(ChunkDirectory(num_chunks, table), NameDirectory())

    def serialize(self, root):
        d = os.path.join(root, MANAGEMENT_DIR)
        os.makedirs(d, exist_ok=True)
        write_blob(os.path.join(d, CHUNKS_FILE), CHUNKS_MAGIC, self.chunks.to_bytes())
        write_blob(os.path.join(d, NAMES_FILE), NAMES_MAGIC, self.names.to_bytes())

    @classmethod
    def deserialize(cls, root, num_chunks: int, table) -> "ManagementData":
        d = os.path.join(root, MANAGEMENT_DIR)
        chunks = ChunkDirectory.from_bytes(read_blob(os.path.join(d, CHUNKS_FILE), CHUNKS_MAGIC), num_chunks, table)
        names = NameDirectory.from_bytes(read_blob(os.path.join(d, NAMES_FILE), NAMES_MAGIC))
        return cls(chunks, names)

    def __eq__(self, other):
        if not isinstance(other, ManagementData):
            return NotImplemented
        return self.chunks == other.chunks and self.names == other.names
