"""Internal allocation sizes and the request -> bin mapping.

Small requests (8 B up to half a chunk) are rounded to one of a fixed list of
classes: multiples of 8 up to 64, then four evenly spaced classes inside each
power-of-two group ``(2**k, 2**(k+1)]``.  That spacing keeps the rounding
overhead at or below 25% for every request of 18 bytes or more.  Requests
above half a chunk are rounded to the next power of two and occupy whole
chunks.
"""

from dataclasses import dataclass, field

from .constants import DEFAULT_CHUNK_SIZE, MIN_ALLOCATION, MIN_CHUNK_SIZE
from .errors import OutOfDomainError


def is_power_of_two(x: int) -> bool:
    return x > 0 and x & (x - 1) == 0


def next_power_of_two(x: int) -> int:
    return 1 << (x - 1).bit_length() if x > 1 else 1


def _bin_index(request: int) -> int:
    if request <= 64:
        return ((request + 7) >> 3) - 1
    k = (request - 1).bit_length() - 1
    step_shift = k - 2
    j = ((request - (1 << k)) + (1 << step_shift) - 1) >> step_shift
    return 8 + 4 * (k - 6) + (j - 1)


def _class_of_bin(b: int) -> int:
    if b < 8:
        return (b + 1) << 3
    k, j = divmod(b - 8, 4)
    k += 6
    return (1 << k) + (j + 1) * (1 << (k - 2))


@dataclass(frozen=True)
class SizeClassTable:
    chunk_size: int = DEFAULT_CHUNK_SIZE
    classes: tuple = field(init=False, repr=False)

    def __post_init__(self):
        if not is_power_of_two(self.chunk_size) or self.chunk_size < MIN_CHUNK_SIZE:
            raise OutOfDomainError(
                f"chunk size must be a power of two >= {MIN_CHUNK_SIZE}, got {self.chunk_size}"
            )
        n_bins = _bin_index(self.chunk_size // 2) + 1
        object.__setattr__(self, "classes", tuple(_class_of_bin(b) for b in range(n_bins)))

    @property
    def half_chunk(self) -> int:
        return self.chunk_size >> 1

    @property
    def num_bins(self) -> int:
        return len(self.classes)

    def _check_small(self, request):
        if request < 1 or request > self.chunk_size >> 1:
            raise OutOfDomainError(
                f"request {request} outside small-object range [1, {self.chunk_size >> 1}]"
            )

    def bin_for(self, request: int) -> int:
        self._check_small(request)
        return _bin_index(request)

    def class_for(self, request: int) -> int:
        self._check_small(request)
        return self.classes[_bin_index(request)]

    def slots_per_chunk(self, b: int) -> int:
        return self.chunk_size // self.classes[b]

    def round_large(self, request: int) -> int:
        """Round a large request up to a power of two (a whole number of chunks)."""
        if request <= self.chunk_size >> 1:
            raise OutOfDomainError(f"request {request} is not a large object")
        return next_power_of_two(request)

    def chunks_for_large(self, request: int) -> int:
        return self.round_large(request) // self.chunk_size

    def is_small(self, request: int) -> bool:
        return request <= self.chunk_size >> 1


def touched_page_waste(request: int, page_size: int) -> float:
    """Fraction of ``request`` wasted in the last page when every byte is touched.

    Only pages that are touched consume physical memory, so a large object that
    is rounded up to a power of two wastes at most the tail of its final page.
    """
    pages = -(-request // page_size)
    return (pages * page_size - request) / request


__all__ = [
    "MIN_ALLOCATION",
    "SizeClassTable",
    "is_power_of_two",
    "next_power_of_two",
    "touched_page_waste",
]
