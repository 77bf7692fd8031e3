"""Multi-layer bitset tracking occupied slots inside one small-object chunk.

Leaf bits mean "slot occupied".  Each bit of an upper layer summarises one
word of the layer below and is set when that word is full, so the first free
slot is found by following the lowest zero bit down from the top word: one
word read per layer, at most three for 64**3 slots.
"""

from .errors import DoubleFreeError

WORD_BITS = 64
FULL = (1 << WORD_BITS) - 1
MAX_SLOTS = WORD_BITS**3


def _depth(num_slots):
    if num_slots <= WORD_BITS:
        return 1
    if num_slots <= WORD_BITS**2:
        return 2
    return 3


class MultiLayerBitset:
    __slots__ = ("num_slots", "levels", "count", "word_reads")

    def __init__(self, num_slots: int):
        if not 1 <= num_slots <= MAX_SLOTS:
            raise ValueError(f"num_slots must be in [1, {MAX_SLOTS}], got {num_slots}")
        self.num_slots = num_slots
        sizes = [-(-num_slots // WORD_BITS)]
        for _ in range(_depth(num_slots) - 1):
            sizes.append(-(-sizes[-1] // WORD_BITS))
        # levels[0] is the single top word, levels[-1] the leaves
        self.levels = [[0] * s for s in reversed(sizes)]
        self.count = 0
        self.word_reads = 0
        self._preset_tail()
        self._rebuild_summaries(fresh=True)

    @property
    def depth(self) -> int:
        return len(self.levels)

    def _preset_tail(self):
        tail = self.num_slots % WORD_BITS
        if tail:
            self.levels[-1][-1] |= FULL & ~((1 << tail) - 1)

    def _rebuild_summaries(self, fresh=False):
        for lvl in range(len(self.levels) - 2, -1, -1):
            children = self.levels[lvl + 1]
            words = self.levels[lvl]
            for i in range(len(words)):
                seg = children[i * WORD_BITS : (i + 1) * WORD_BITS]
                w = 0
                if not fresh:
                    for j, c in enumerate(seg):
                        if c == FULL:
                            w |= 1 << j
                # summary bits for children that do not exist read as full
                w |= FULL & ~((1 << len(seg)) - 1)
                words[i] = w

    def is_full(self) -> bool:
        return self.count == self.num_slots

    def occupancy(self) -> int:
        return self.count

    def test(self, slot: int) -> bool:
        return bool(self.levels[-1][slot >> 6] >> (slot & 63) & 1)

    def find_and_set_first_free(self):
        """Claim the lowest free slot, or return None when the bitset is full."""
        if self.count == self.num_slots:
            return None
        idx = 0
        for words in self.levels:
            inv = ~words[idx] & FULL
            idx = (idx << 6) | ((inv & -inv).bit_length() - 1)
        self.word_reads += len(self.levels)
        self._set(idx)
        return idx

    def mark(self, slot: int):
        """Set a specific slot, which must currently be free."""
        self._check_range(slot)
        if self.test(slot):
            raise ValueError(f"slot {slot} already occupied")
        self._set(slot)

    def _set(self, slot):
        levels = self.levels
        i = slot >> 6
        leaf = levels[-1]
        w = leaf[i] | (1 << (slot & 63))
        leaf[i] = w
        self.count += 1
        lvl = len(levels) - 2
        while w == FULL and lvl >= 0:
            parent = levels[lvl]
            w = parent[i >> 6] | (1 << (i & 63))
            parent[i >> 6] = w
            i >>= 6
            lvl -= 1

    def clear(self, slot: int) -> bool:
        """Free ``slot``; returns True when the bitset became empty."""
        self._check_range(slot)
        levels = self.levels
        i = slot >> 6
        bit = 1 << (slot & 63)
        leaf = levels[-1]
        w = leaf[i]
        if not w & bit:
            raise DoubleFreeError(f"slot {slot} is not occupied")
        leaf[i] = w & ~bit
        self.count -= 1
        was_full = w == FULL
        lvl = len(levels) - 2
        while was_full and lvl >= 0:
            parent = levels[lvl]
            pw = parent[i >> 6]
            was_full = pw == FULL
            parent[i >> 6] = pw & ~(1 << (i & 63))
            i >>= 6
            lvl -= 1
        return self.count == 0

    def _check_range(self, slot):
        if not 0 <= slot < self.num_slots:
            raise IndexError(f"slot {slot} out of range [0, {self.num_slots})")

    def leaf_words(self) -> list:
        """Leaf words with the out-of-range tail bits cleared."""
        words = list(self.levels[-1])
        tail = self.num_slots % WORD_BITS
        if tail:
            words[-1] &= (1 << tail) - 1
        return words

    @classmethod
    def from_leaf_words(cls, num_slots: int, words) -> "MultiLayerBitset":
        bs = cls(num_slots)
        leaf = bs.levels[-1]
        if len(words) != len(leaf):
            raise ValueError(f"expected {len(leaf)} leaf words, got {len(words)}")
        tail = num_slots % WORD_BITS
        count = 0
        for i, w in enumerate(words):
            if tail and i == len(leaf) - 1:
                w &= (1 << tail) - 1
            count += w.bit_count()
            leaf[i] = w
        bs.count = count
        bs._preset_tail()
        bs._rebuild_summaries()
        return bs

    def __eq__(self, other):
        if not isinstance(other, MultiLayerBitset):
            return NotImplemented
        return self.num_slots == other.num_slots and self.leaf_words() == other.leaf_words()

    def __repr__(self):
        return f"MultiLayerBitset(num_slots={self.num_slots}, occupied={self.count})"
