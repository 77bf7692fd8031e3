"""R-MAT edge generation and the dynamic graph construction benchmark.

Bulk mode builds one graph in a fresh datastore.  Incremental mode replays a
stream of edge batches; every batch after the first reopens the datastore,
ingests, flushes and closes.  Edge generation is never timed.
"""

import csv
import itertools
import os
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .constants import DEFAULT_BANKS, DEFAULT_CHUNK_EDGES, EDGE_FACTOR, RMAT_PROBABILITIES
from .containers import BankedAdjacencyList, mix64
from .errors import AlreadyExistsError
from .manager import Manager, ManagerOptions

GRAPH_NAME = "graph"
CSV_HEADER = ("iteration", "edges", "ingest_s", "flush_s")
FLUSH_MODES = ("shared", "private_batch")

# edges handed to insert_edges per cursor step
WORK_UNIT = 1 << 15


@dataclass(frozen=True)
class RmatParams:
    scale: int
    edge_factor: int = EDGE_FACTOR
    probabilities: tuple = RMAT_PROBABILITIES
    seed: int = 0
    scramble: bool = True

    def __post_init__(self):
        if not 1 <= self.scale <= 40:
            raise ValueError(f"scale must be in 1..40, got {self.scale}")
        if self.edge_factor < 1:
            raise ValueError("edge_factor must be >= 1")
        p = self.probabilities
        if len(p) != 4 or min(p) < 0 or abs(sum(p) - 1.0) > 1e-9:
            raise ValueError(f"quadrant probabilities must be four non-negative numbers summing to 1, got {p}")

    @property
    def num_vertices(self) -> int:
        return 1 << self.scale

    @property
    def num_edges(self) -> int:
        """Undirected edges; twice as many directed insertions are made."""
        return self.num_vertices * self.edge_factor

    @property
    def num_insertions(self) -> int:
        return 2 * self.num_edges

    def num_chunks(self, chunk_edges: int) -> int:
        return -(-self.num_edges // chunk_edges)


def _scramble_keys(params):
    s = params.scale
    mask = (1 << s) - 1
    k = [mix64(params.seed * 4 + i + 1) for i in range(4)]
    return mask, k[0] & mask | 1, k[1] & mask | 1, k[2] & mask, max(1, (s + 1) // 2)


def scramble(ids, params: RmatParams) -> np.ndarray:
    """Seed-dependent bijection on ``scale``-bit vertex ids."""
    mask, m1, m2, add, shift = _scramble_keys(params)
    x = np.asarray(ids, dtype=np.uint64)
    mask_, shift_ = np.uint64(mask), np.uint64(shift)
    # odd multipliers and right xorshifts are both invertible mod 2**scale
    x = (x * np.uint64(m1)) & mask_
    x = x ^ (x >> shift_)
    x = (x * np.uint64(m2) + np.uint64(add)) & mask_
    return x ^ (x >> shift_)


def generate_chunk(params: RmatParams, chunk_index: int, chunk_edges: int = DEFAULT_CHUNK_EDGES) -> np.ndarray:
    """Directed insertions for one chunk of undirected edges, shape ``(2k, 2)``.

    Row ``2i`` is edge ``i`` as drawn and row ``2i + 1`` its reverse.
    """
    start = chunk_index * chunk_edges
    k = max(0, min(chunk_edges, params.num_edges - start))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([params.seed, chunk_index])))
    a, b, c, _ = params.probabilities
    src = np.zeros(k, dtype=np.uint64)
    dst = np.zeros(k, dtype=np.uint64)
    for level in range(params.scale):
        u = rng.random(k)
        row = u >= a + b
        col = ((u >= a) & ~row) | (u >= a + b + c)
        bit = np.uint64(1 << level)
        src |= row.astype(np.uint64) * bit
        dst |= col.astype(np.uint64) * bit
    if params.scramble:
        src = scramble(src, params)
        dst = scramble(dst, params)
    out = np.empty((2 * k, 2), dtype=np.uint64)
    out[0::2, 0] = src
    out[0::2, 1] = dst
    out[1::2, 0] = dst
    out[1::2, 1] = src
    return out


def generate_all(params: RmatParams, chunk_edges: int = DEFAULT_CHUNK_EDGES) -> np.ndarray:
    chunks = [generate_chunk(params, i, chunk_edges) for i in range(params.num_chunks(chunk_edges))]
    return np.concatenate(chunks) if chunks else np.empty((0, 2), dtype=np.uint64)


def read_edge_csv(path):
    """Read ``src,dst,timestamp`` rows; a non-numeric first row is taken as a header."""
    srcs, dsts, times = [], [], []
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), 1):
            if not row or row[0].startswith("#"):
                continue
            try:
                s, d, t = int(row[0]), int(row[1]), float(row[2])
            except (ValueError, IndexError):
                if lineno == 1:
                    continue
                raise ValueError(f"{path}:{lineno}: expected src,dst,timestamp") from None
            srcs.append(s)
            dsts.append(d)
            times.append(t)
    return np.array(srcs, dtype=np.uint64), np.array(dsts, dtype=np.uint64), np.array(times, dtype=np.float64)


def partition_by_time(srcs, dsts, times, batches: int, symmetric: bool = True) -> list:
    """Split edges into ``batches`` equal-width time windows, keeping file order inside each."""
    if batches < 1:
        raise ValueError("batches must be >= 1")
    times = np.asarray(times, dtype=np.float64)
    if len(times):
        lo, hi = times.min(), times.max()
        width = (hi - lo) / batches
        idx = np.zeros(len(times), dtype=np.int64) if width == 0 else ((times - lo) / width).astype(np.int64)
        idx = np.clip(idx, 0, batches - 1)
    else:
        idx = np.zeros(0, dtype=np.int64)
    out = []
    for i in range(batches):
        sel = idx == i
        s, d = np.asarray(srcs, np.uint64)[sel], np.asarray(dsts, np.uint64)[sel]
        if symmetric:
            e = np.empty((2 * len(s), 2), dtype=np.uint64)
            e[0::2, 0], e[0::2, 1], e[1::2, 0], e[1::2, 1] = s, d, d, s
        else:
            e = np.stack([s, d], axis=1)
        out.append(e)
    return out


def ingest(graph: BankedAdjacencyList, edges: np.ndarray, threads: int = 1, unit: int = WORK_UNIT):
    """Insert ``edges`` with ``threads`` workers pulling ranges from a shared cursor."""
    n = len(edges)
    if not n:
        return
    srcs = np.ascontiguousarray(edges[:, 0])
    dsts = np.ascontiguousarray(edges[:, 1])
    if threads <= 1:
        graph.insert_edges(srcs, dsts)
        return
    cursor = itertools.count()
    errors = []

    def work():
        try:
            while True:
                lo = next(cursor) * unit
                if lo >= n:
                    return
                graph.insert_edges(srcs[lo : lo + unit], dsts[lo : lo + unit])
        except BaseException as e:
            errors.append(e)

    workers = [threading.Thread(target=work) for _ in range(threads)]
    for t in workers:
        t.start()
    for t in workers:
        t.join()
    if errors:
        raise errors[0]


@dataclass
class IterationRecord:
    iteration: int
    edges: int
    ingest_s: float
    flush_s: float
    pages_dirty: int | None = None


@dataclass
class BenchReport:
    mode: str
    scale: int | None
    threads: int
    flush_mode: str = "shared"
    iterations: list = field(default_factory=list)

    @property
    def total_edges(self) -> int:
        return sum(r.edges for r in self.iterations)

    @property
    def ingest_seconds(self) -> float:
        return sum(r.ingest_s for r in self.iterations)

    @property
    def flush_seconds(self) -> float:
        return sum(r.flush_s for r in self.iterations)

    @property
    def edges_per_second(self) -> float:
        t = self.ingest_seconds
        return self.total_edges / t if t > 0 else float("inf")

    def write_csv(self, f):
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.iterations:
            w.writerow((r.iteration, r.edges, f"{r.ingest_s:.6f}", f"{r.flush_s:.6f}"))

    def summary(self) -> str:
        return (
            f"{self.mode} scale={self.scale} threads={self.threads} flush={self.flush_mode}: "
            f"{self.total_edges} edges, ingest {self.ingest_seconds:.3f}s, flush {self.flush_seconds:.3f}s, "
            f"{self.edges_per_second:,.0f} edges/s"
        )


def read_report_csv(f) -> list:
    rows = list(csv.reader(f))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise ValueError(f"report header must be {','.join(CSV_HEADER)}")
    return [IterationRecord(int(r[0]), int(r[1]), float(r[2]), float(r[3])) for r in rows[1:]]


def _bench_options(options, private_batch=False) -> ManagerOptions:
    options = ManagerOptions() if options is None else ManagerOptions(**vars(options))
    options.private_batch = private_batch
    return options


def run_bulk(
    store_path,
    params: RmatParams,
    threads: int = 1,
    chunk_edges: int = DEFAULT_CHUNK_EDGES,
    banks: int = DEFAULT_BANKS,
    options: ManagerOptions = None,
) -> BenchReport:
    """Build the whole R-MAT graph into a new datastore at ``store_path``."""
    if os.path.exists(store_path):
        raise AlreadyExistsError(f"{store_path} already exists")
    mgr = Manager.create(store_path, _bench_options(options))
    try:
        graph = BankedAdjacencyList.construct(mgr, GRAPH_NAME, banks)
        ingest_s = 0.0
        edges = 0
        for i in range(params.num_chunks(chunk_edges)):
            chunk = generate_chunk(params, i, chunk_edges)
            t0 = time.perf_counter()
            ingest(graph, chunk, threads)
            ingest_s += time.perf_counter() - t0
            edges += len(chunk)
        t0 = time.perf_counter()
        mgr.flush()
        mgr.close()
        flush_s = time.perf_counter() - t0
    finally:
        if not mgr.closed:
            mgr.close()
    report = BenchReport("bulk", params.scale, threads)
    report.iterations.append(IterationRecord(0, edges, ingest_s, flush_s))
    return report


def run_incremental(
    store_path,
    edge_batches,
    flush_mode: str = "shared",
    threads: int = 1,
    banks: int = DEFAULT_BANKS,
    options: ManagerOptions = None,
    scale: int = None,
) -> BenchReport:
    """Replay ``edge_batches``: create on the first, then open/ingest/flush/close per batch."""
    if flush_mode not in FLUSH_MODES:
        raise ValueError(f"flush_mode must be one of {FLUSH_MODES}, got {flush_mode!r}")
    if os.path.exists(store_path):
        raise AlreadyExistsError(f"{store_path} already exists")
    opts = _bench_options(options, private_batch=flush_mode == "private_batch")
    report = BenchReport("incremental", scale, threads, flush_mode)
    for it, batch in enumerate(edge_batches):
        batch = np.asarray(batch, dtype=np.uint64).reshape(-1, 2)
        if it == 0:
            mgr = Manager.create(store_path, opts)
        else:
            mgr = Manager.open(store_path, options=opts)
        try:
            graph = BankedAdjacencyList.find(mgr, GRAPH_NAME)
            if graph is None:
                graph = BankedAdjacencyList.construct(mgr, GRAPH_NAME, banks)
            t0 = time.perf_counter()
            ingest(graph, batch, threads)
            t1 = time.perf_counter()
            stats = mgr.flush()
            mgr.close()
            t2 = time.perf_counter()
        finally:
            if not mgr.closed:
                mgr.close()
        dirty = stats.pages_dirty if stats is not None else None
        report.iterations.append(IterationRecord(it, len(batch), t1 - t0, t2 - t1, dirty))
    return report


class VolatileGraph:
    """Plain in-memory adjacency list used as a reference."""

    def __init__(self):
        self.adj = {}

    def insert_edge(self, src, dst):
        self.adj.setdefault(src, []).append(dst)

    def insert_edges(self, srcs, dsts):
        adj = self.adj
        for s, d in zip(np.asarray(srcs).tolist(), np.asarray(dsts).tolist()):
            lst = adj.get(s)
            if lst is None:
                adj[s] = [d]
            else:
                lst.append(d)

    def neighbors(self, v):
        return list(self.adj.get(v, ()))

    def edge_array(self) -> np.ndarray:
        return _adjacency_to_edges({v: np.array(n, dtype=np.uint64) for v, n in self.adj.items()})


def _adjacency_to_edges(adj) -> np.ndarray:
    if not adj:
        return np.empty((0, 2), dtype=np.uint64)
    srcs = np.concatenate([np.full(len(n), v, dtype=np.uint64) for v, n in adj.items()])
    dsts = np.concatenate(list(adj.values())).astype(np.uint64)
    return np.stack([srcs, dsts], axis=1)


def canonical_edges(edges) -> np.ndarray:
    """Rows sorted by (src, dst); equal results mean equal per-vertex neighbour multisets."""
    edges = np.asarray(edges, dtype=np.uint64).reshape(-1, 2)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    return edges[order]


def graph_edges(graph) -> np.ndarray:
    if isinstance(graph, VolatileGraph):
        return graph.edge_array()
    return _adjacency_to_edges(graph.adjacency())


def same_multisets(a, b) -> bool:
    ea, eb = canonical_edges(graph_edges(a)), canonical_edges(graph_edges(b))
    return ea.shape == eb.shape and bool(np.array_equal(ea, eb))


def oracle_build(edge_arrays) -> VolatileGraph:
    g = VolatileGraph()
    for e in edge_arrays:
        e = np.asarray(e, dtype=np.uint64).reshape(-1, 2)
        g.insert_edges(e[:, 0], e[:, 1])
    return g


def verify_store(store_path, oracle: VolatileGraph) -> bool:
    with Manager.open(store_path, read_only=True) as mgr:
        graph = BankedAdjacencyList.find(mgr, GRAPH_NAME)
        if graph is None:
            return False
        return same_multisets(graph, oracle)
