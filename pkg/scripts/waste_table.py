"""Print the size-class table with its worst-case rounding waste per class,
and the last-page waste of a just-over-half-chunk request for common page sizes."""

import argparse

from persistheap.size_classes import SizeClassTable, touched_page_waste


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--chunk-size", type=lambda s: int(s, 0), default=2 << 20)
    args = ap.parse_args()
    table = SizeClassTable(args.chunk_size)
    prev = 0
    print(f"{'bin':>4} {'class':>9} {'worst request':>14} {'waste':>7}")
    for b, c in enumerate(table.classes):
        worst = prev + 1
        print(f"{b:>4} {c:>9} {worst:>14} {(c - worst) / c:>7.2%}")
        prev = c
    request = table.half_chunk + 1
    for page in (4096, 16384, 65536):
        print(f"request {request} on {page // 1024} KiB pages: last-page waste {touched_page_waste(request, page):.3%}")


if __name__ == "__main__":
    main()
