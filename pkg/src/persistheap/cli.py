"""``persistheap`` command-line tool.

Exit codes: 0 success, 2 usage error, 3 bad datastore, 4 I/O error,
5 capability not supported.  ``PERSISTHEAP_RESERVATION`` overrides the
default reservation size.
"""

import argparse
import json
import os
import sys

from . import constants as C
from .errors import CapabilityError, DatastoreError, OutOfDomainError, PersistHeapError
from .size_classes import is_power_of_two

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_IO = 4
EXIT_CAPABILITY = 5


class UsageError(Exception):
    pass


def _size(text: str) -> int:
    """Byte count with an optional K/M/G/T suffix (powers of 1024)."""
    t = text.strip().upper().removesuffix("B").removesuffix("I")
    mult = 1
    if t and t[-1] in "KMGT":
        mult = {"K": C.KiB, "M": C.MiB, "G": C.GiB, "T": C.TiB}[t[-1]]
        t = t[:-1]
    try:
        value = int(t, 0) * mult
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a size: {text!r}") from None
    if value <= 0:
        raise argparse.ArgumentTypeError(f"size must be positive: {text!r}")
    return value


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1: {text!r}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="persistheap", description="Create, inspect and benchmark persistent heaps.")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("create", help="create an empty datastore")
    c.add_argument("path")
    c.add_argument("--chunk-size", type=_size, default=C.DEFAULT_CHUNK_SIZE)
    c.add_argument("--file-size", type=_size, default=C.DEFAULT_FILE_SIZE)
    c.add_argument("--reservation", type=_size, default=None)

    i = sub.add_parser("info", help="describe a datastore")
    i.add_argument("path")
    i.add_argument("--json", action="store_true", help="machine-readable output")

    s = sub.add_parser("snapshot", help="copy a datastore, block-cloning when possible")
    s.add_argument("src")
    s.add_argument("dst")

    b = sub.add_parser("bench", help="dynamic graph construction benchmark")
    b.add_argument("source", choices=("rmat", "file"))
    b.add_argument("--store", required=True, help="datastore path (must not exist)")
    b.add_argument("--scale", type=_positive, default=16)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--no-scramble", action="store_true")
    b.add_argument("--threads", type=_positive, default=1)
    b.add_argument("--mode", choices=("bulk", "incremental"), default="bulk")
    b.add_argument("--flush", choices=("shared", "private-batch"), default="shared")
    b.add_argument("--batches", type=_positive, default=8, help="incremental batches")
    b.add_argument("--chunk-edges", type=_positive, default=C.DEFAULT_CHUNK_EDGES)
    b.add_argument("--banks", type=_positive, default=C.DEFAULT_BANKS)
    b.add_argument("--input", help="src,dst,timestamp CSV for the file source")
    b.add_argument("--reservation", type=_size, default=None)
    b.add_argument("--out", help="report CSV path (default: stdout)")
    b.add_argument("--verify", action="store_true", help="compare against an in-memory reference build")
    return p


def _validate(args):
    if args.command == "create":
        if not is_power_of_two(args.chunk_size) or args.chunk_size < C.MIN_CHUNK_SIZE:
            raise UsageError(f"--chunk-size must be a power of two >= {C.MIN_CHUNK_SIZE}")
        reservation = args.reservation or C.default_reservation()
        if args.file_size % args.chunk_size:
            raise UsageError("--file-size must be a multiple of --chunk-size")
        if reservation % args.file_size:
            raise UsageError("--reservation must be a multiple of --file-size")
        args.reservation = reservation
    elif args.command == "bench":
        if args.source == "file" and not args.input:
            raise UsageError("the file source needs --input")
        if args.source == "rmat" and args.input:
            raise UsageError("--input only applies to the file source")
        if args.mode == "bulk" and args.flush != "shared":
            raise UsageError("--flush private-batch needs --mode incremental")
        if os.path.exists(args.store):
            raise UsageError(f"--store {args.store} already exists")
        if args.scale > 30:
            raise UsageError("--scale above 30 is beyond desk scale")


def cmd_create(args, out):
    from .manager import Manager

    with Manager.create(args.path, chunk_size=args.chunk_size, file_size=args.file_size, reservation=args.reservation):
        pass
    print(f"created {args.path}", file=out)


def format_info(d: dict) -> str:
    lines = [
        f"path: {d['path']}",
        f"chunk size: {d['chunk_size']}",
        f"file size: {d['file_size']}",
        f"reservation: {d['reservation']}",
        f"backing files: {d['num_files']}",
        f"chunks used: {d['chunks_used']}",
    ]
    for kind, n in d["chunks"].items():
        lines.append(f"  {kind}: {n}")
    lines.append(f"bytes live: {d['bytes_live']}")
    lines.append(f"allocated bytes on disk: {d['allocated_bytes']}")
    lines.append("non-full chunks per class:" + ("" if d["bins_non_full"] else " none"))
    for cls, n in d["bins_non_full"].items():
        lines.append(f"  {cls}: {n}")
    lines.append("named objects: " + (", ".join(d["named_objects"]) or "none"))
    caps = d["capabilities"]
    lines.append("capabilities: " + ", ".join(f"{k}={'yes' if v else 'no'}" for k, v in caps.items()))
    return "\n".join(lines)


def info_dict(path) -> dict:
    from .manager import Manager

    with Manager.open(path, read_only=True) as mgr:
        d = mgr.info().to_dict()
    d.pop("mode")
    # JSON object keys are strings; keep them that way in both outputs
    d["bins_non_full"] = {str(k): v for k, v in d["bins_non_full"].items()}
    return d


def cmd_info(args, out):
    d = info_dict(args.path)
    if args.json:
        json.dump(d, out, indent=2, sort_keys=True)
        out.write("\n")
    else:
        print(format_info(d), file=out)


def cmd_snapshot(args, out):
    from .manager import Manager

    if os.path.exists(args.dst):
        raise FileExistsError(f"{args.dst} already exists")
    with Manager.open(args.src, read_only=True) as mgr:
        method = mgr.snapshot(args.dst)
    print(f"snapshot {args.src} -> {args.dst}: {method}", file=out)


def cmd_bench(args, out):
    import numpy as np

    from . import bench
    from .manager import ManagerOptions

    opts = ManagerOptions()
    if args.reservation:
        opts.reservation = args.reservation
    flush_mode = args.flush.replace("-", "_")
    if args.source == "rmat":
        params = bench.RmatParams(args.scale, seed=args.seed, scramble=not args.no_scramble)
        if args.mode == "bulk":
            report = bench.run_bulk(args.store, params, args.threads, args.chunk_edges, args.banks, opts)
            batches = None
        else:
            batches = np.array_split(bench.generate_all(params, args.chunk_edges), args.batches)
    else:
        params = None
        batches = bench.partition_by_time(*bench.read_edge_csv(args.input), args.batches)
        if args.mode == "bulk":
            batches = [np.concatenate(batches)]
    if batches is not None:
        report = bench.run_incremental(
            args.store, batches, flush_mode, args.threads, args.banks, opts, scale=args.scale if params else None
        )
        if args.mode == "bulk":
            report.mode = "bulk"

    if args.out:
        with open(args.out, "w", newline="") as f:
            report.write_csv(f)
    else:
        report.write_csv(out)
    print(report.summary(), file=sys.stderr)
    if args.verify:
        if batches is None:
            batches = [bench.generate_chunk(params, i, args.chunk_edges) for i in range(params.num_chunks(args.chunk_edges))]
        ok = bench.verify_store(args.store, bench.oracle_build(batches))
        print(f"verify: {'ok' if ok else 'MISMATCH'}", file=sys.stderr)
        if not ok:
            return 1
    return 0


COMMANDS = {"create": cmd_create, "info": cmd_info, "snapshot": cmd_snapshot, "bench": cmd_bench}


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    try:
        _validate(args)
        return COMMANDS[args.command](args, out) or EXIT_OK
    except (UsageError, OutOfDomainError) as e:
        print(f"persistheap: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DatastoreError as e:
        print(f"persistheap: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except CapabilityError as e:
        print(f"persistheap: unsupported: {e}", file=sys.stderr)
        return EXIT_CAPABILITY
    except (OSError, PersistHeapError) as e:
        print(f"persistheap: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"persistheap: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
