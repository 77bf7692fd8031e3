"""Compare kernel msync against user-space batch write-back on a random-write workload.

Both files get the same scattered page writes; the script times the flush of each.
"""

import argparse
import mmap
import os
import random
import tempfile
import time

from persistheap import bs_msync
from persistheap._sys import PAGE_SIZE


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size-mib", type=int, default=256)
    ap.add_argument("--rounds", type=int, default=5)
    ap.add_argument("--dirty-fraction", type=float, default=0.1)
    args = ap.parse_args()

    size = args.size_mib << 20
    n_pages = size // PAGE_SIZE
    rng = random.Random(0)
    with tempfile.TemporaryDirectory() as d:
        paths = [os.path.join(d, name) for name in ("shared", "private")]
        for p in paths:
            with open(p, "wb") as f:
                f.truncate(size)
        fs, fp = (os.open(p, os.O_RDWR) for p in paths)
        shared = mmap.mmap(fs, size, mmap.MAP_SHARED)
        priv = bs_msync.map_private(fp, 0, size)
        view = priv.view()
        for r in range(args.rounds):
            pages = rng.sample(range(n_pages), int(n_pages * args.dirty_fraction))
            for p in pages:
                shared[p * PAGE_SIZE] = r + 1
                view[p * PAGE_SIZE] = r + 1
            t0 = time.perf_counter()
            shared.flush()
            os.fsync(fs)
            t1 = time.perf_counter()
            stats = bs_msync.write_back([priv])
            t2 = time.perf_counter()
            print(f"round {r}: {len(pages)} pages, msync {t1 - t0:.3f}s, batch write-back {t2 - t1:.3f}s ({stats.runs_written} runs)")
        view.release()
        shared.close()
        bs_msync.unmap(priv)
        os.close(fs)
        os.close(fp)


if __name__ == "__main__":
    main()
