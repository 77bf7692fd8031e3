"""Default values shared by the library and the command-line tool."""

import os

KiB = 1 << 10
MiB = 1 << 20
GiB = 1 << 30
TiB = 1 << 40

DEFAULT_CHUNK_SIZE = 2 * MiB
MIN_CHUNK_SIZE = 64 * KiB
MIN_ALLOCATION = 8
DEFAULT_FILE_SIZE = 256 * MiB
DEFAULT_RESERVATION = TiB
DEFAULT_CACHE_BYTES = 256 * KiB

DEFAULT_BANKS = 1024
EDGE_FACTOR = 16
RMAT_PROBABILITIES = (0.57, 0.19, 0.19, 0.05)
DEFAULT_CHUNK_EDGES = 1 << 20

RESERVATION_ENV = "PERSISTHEAP_RESERVATION"


def default_reservation() -> int:
    """Reservation size, overridable through ``PERSISTHEAP_RESERVATION``."""
    raw = os.environ.get(RESERVATION_ENV)
    if not raw:
        return DEFAULT_RESERVATION
    return int(raw, 0)
