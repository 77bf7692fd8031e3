import os
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from persistheap.errors import (
    AlreadyExistsError,
    BadMagicError,
    ChecksumError,
    TruncatedFileError,
    VersionMismatchError,
)
from persistheap.management import (
    CHUNKS_FILE,
    MANAGEMENT_DIR,
    NAMES_FILE,
    BinDirectory,
    ChunkDirectory,
    ChunkKind,
    ManagementData,
    NameDirectory,
    NameRecord,
)
from persistheap.size_classes import SizeClassTable

TABLE = SizeClassTable()


def test_find_empty_chunks_first_fit():
    cd = ChunkDirectory(16, TABLE)
    assert cd.find_empty_chunks(1) == 0
    cd.claim_small(0, 3)
    cd.claim_large(2, 4)
    assert cd.find_empty_chunks(1) == 1
    assert cd.find_empty_chunks(2) == 6
    assert cd.find_empty_chunks(11) is None
    assert cd.high_water == 6
    assert cd.count_kinds() == {"small": 1, "large_head": 1, "large_body": 3, "empty": 11}
    assert cd.release_large(2) == 4
    assert cd.find_empty_chunks(5) == 1
    assert cd.used_chunks() == 1


def test_chunk_records():
    cd = ChunkDirectory(8, TABLE)
    bs = cd.claim_small(1, 5)
    bs.find_and_set_first_free()
    assert cd.record(1).kind == ChunkKind.SMALL and cd.record(1).bin == 5 and cd.record(1).occupied == 1
    cd.claim_large(3, 2)
    assert cd.record(3).span == 2 and cd.record(4).kind == ChunkKind.LARGE_BODY
    assert cd.record(0).kind == ChunkKind.EMPTY


def test_bin_lifo():
    bd = BinDirectory(4)
    for c in (3, 7, 5):
        bd.push(1, c)
    assert bd.peek(1) == 5
    assert bd.remove(1, 7)
    assert not bd.remove(1, 7)
    assert bd.pop(1) == 5 and bd.pop(1) == 3 and bd.pop(1) is None
    with pytest.raises(ValueError):
        bd.push(2, 9)
        bd.push(2, 9)


def test_bins_rebuilt_from_chunks():
    cd = ChunkDirectory(8, TABLE)
    cd.claim_small(4, 63)
    full = cd.claim_small(1, 63)
    full.find_and_set_first_free()
    full.find_and_set_first_free()
    cd.bitsets[4].find_and_set_first_free()
    assert BinDirectory.rebuild(cd).chunks(63) == [4]


def test_names():
    nd = NameDirectory()
    nd.insert(NameRecord("a", 16, 4, 8, "u64"))
    with pytest.raises(AlreadyExistsError):
        nd.insert(NameRecord("a", 32, 1, 1))
    assert nd.find("a").nbytes == 32
    assert nd.erase("a").offset == 16
    assert nd.find("a") is None and nd.erase("a") is None


names = st.text(min_size=1, max_size=20)


@given(
    st.lists(st.tuples(st.integers(0, 63), st.sets(st.integers(0, 200), max_size=30)), max_size=6),
    st.lists(st.integers(1, 3), max_size=3),
    st.dictionaries(names, st.tuples(st.integers(0, 2**40), st.integers(1, 100), st.integers(1, 64), st.text(max_size=8))),
)
@settings(max_examples=40, deadline=None)
def test_serialize_round_trip(tmp_path_factory, smalls, larges, named):
    root = str(tmp_path_factory.mktemp("mgmt"))
    md = ManagementData.empty(64, TABLE)
    cd = md.chunks
    for b, slots in smalls:
        c = cd.find_empty_chunks(1)
        bs = cd.claim_small(c, b)
        for s in slots:
            if s < bs.num_slots:
                bs.mark(s)
        if not bs.count:
            bs.mark(0)
    for span in larges:
        cd.claim_large(cd.find_empty_chunks(span), span)
    for n, (off, ln, es, tag) in named.items():
        md.names.insert(NameRecord(n, off, ln, es, tag))
    md.serialize(root)
    back = ManagementData.deserialize(root, 64, TABLE)
    assert back == md
    assert back.chunks.high_water == cd.high_water
    assert [back.bins.chunks(b) for b in range(64)] == [BinDirectory.rebuild(cd).chunks(b) for b in range(64)]


def _saved(tmp_path):
    md = ManagementData.empty(8, TABLE)
    md.chunks.claim_small(0, 2).mark(3)
    md.names.insert(NameRecord("x", 0, 1, 8))
    md.serialize(str(tmp_path))
    return os.path.join(str(tmp_path), MANAGEMENT_DIR)


def _patch(path, pos, data):
    with open(path, "r+b") as f:
        f.seek(pos)
        f.write(data)


def test_bad_magic(tmp_path):
    d = _saved(tmp_path)
    _patch(os.path.join(d, CHUNKS_FILE), 0, b"XXXX")
    with pytest.raises(BadMagicError):
        ManagementData.deserialize(str(tmp_path), 8, TABLE)


def test_version_mismatch(tmp_path):
    d = _saved(tmp_path)
    _patch(os.path.join(d, NAMES_FILE), 4, struct.pack("<I", 99))
    with pytest.raises(VersionMismatchError):
        ManagementData.deserialize(str(tmp_path), 8, TABLE)


def test_checksum(tmp_path):
    d = _saved(tmp_path)
    path = os.path.join(d, CHUNKS_FILE)
    size = os.path.getsize(path)
    _patch(path, size - 1, b"\xff")
    with pytest.raises(ChecksumError):
        ManagementData.deserialize(str(tmp_path), 8, TABLE)


def test_truncated(tmp_path):
    d = _saved(tmp_path)
    path = os.path.join(d, NAMES_FILE)
    with open(path, "r+b") as f:
        f.truncate(os.path.getsize(path) - 3)
    with pytest.raises(TruncatedFileError):
        ManagementData.deserialize(str(tmp_path), 8, TABLE)
