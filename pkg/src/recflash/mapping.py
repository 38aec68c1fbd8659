"""Logical-to-physical mapping table ordered by access frequency.

The table is a hash map whose entries are threaded into a doubly linked list
kept in descending access-count order. A threshold key marks the hot/cold
boundary (the entry at rank ceil(hot_fraction * n) at build time). The online
update inserts newly observed keys by scanning the hot prefix from the head:

* a new key hotter than some prefix entry is inserted before the first such
  entry, the current threshold key is demoted to the tail, and the threshold
  moves one position up the list;
* otherwise the new key is appended at the tail.

Note the demotion is applied verbatim even though it parks a formerly-hot key
below every cold entry regardless of its count; do not "fix" this, the update
rule is defined that way. When the threshold is already at the head and an
insertion displaces it, the inserted key becomes the new threshold (the hot
region cannot become empty).

Keys already present in the table that reappear in a training window have
their counts refreshed in place without moving; only genuinely new keys go
through the insertion scan. Window counts replace the stored counts, they do
not accumulate.

The linear scan is implemented with a running-minimum prefix array and binary
search, which yields bit-identical results to the literal element-by-element
scan (the first entry with a smaller count is the first position where the
running minimum drops below the new count) while staying fast for
million-entry tables.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .layout import CapacityError, DeviceSpace

__all__ = [
    "VectorKey",
    "MapEntry",
    "FrequencyTable",
    "UpdateSummary",
    "RemapPlan",
    "MissingKeyError",
    "build_from_counts",
    "adaptive_update",
    "reassign_addresses",
    "lookup",
    "order_counts",
    "audit",
    "save_snapshot",
    "load_snapshot",
]

# (table_id, row_id); plain tuples keep hashing and comparison cheap.
VectorKey = tuple


class MissingKeyError(KeyError):
    def __init__(self, key, reason: str):
        super().__init__(f"key {key}: {reason}")
        self.key = key
        self.reason = reason  # "never trained" or "evicted"


@dataclass(slots=True)
class MapEntry:
    key: VectorKey
    access_count: int
    address: int | None = None  # packed slot id; None until a layout assigns
    prev: VectorKey | None = None
    next: VectorKey | None = None


@dataclass
class UpdateSummary:
    keys_inserted_hot: int = 0
    keys_appended_tail: int = 0
    keys_refreshed: int = 0
    hot_region_keys_for_reassignment: list = field(default_factory=list)
    appended_keys: list = field(default_factory=list)


@dataclass
class RemapPlan:
    pages_moved: int = 0
    blocks_erased: int = 0
    # (key, old_slot or None, new_slot) for every address that changed
    moves: list = field(default_factory=list)


class FrequencyTable:
    """Frequency-ordered hash table with hot-region threshold state."""

    def __init__(self, hot_fraction: float):
        if not 0.0 < hot_fraction <= 1.0:
            raise ValueError(f"hot_fraction must be in (0, 1], got {hot_fraction}")
        self.hot_fraction = hot_fraction
        self.entries: dict[VectorKey, MapEntry] = {}
        self.head: VectorKey | None = None
        self.tail: VectorKey | None = None
        self.threshold_key: VectorKey | None = None
        self.threshold_prev: VectorKey | None = None
        self._evicted: set = set()

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key) -> bool:
        return key in self.entries

    # -- linked-list primitives -------------------------------------------

    def _link_after_tail(self, entry: MapEntry) -> None:
        entry.prev = self.tail
        entry.next = None
        if self.tail is not None:
            self.entries[self.tail].next = entry.key
        self.tail = entry.key
        if self.head is None:
            self.head = entry.key

    def _insert_before(self, entry: MapEntry, target: VectorKey) -> None:
        t = self.entries[target]
        entry.prev = t.prev
        entry.next = target
        if t.prev is not None:
            self.entries[t.prev].next = entry.key
        else:
            self.head = entry.key
        t.prev = entry.key

    def _unlink(self, key: VectorKey) -> MapEntry:
        e = self.entries[key]
        if e.prev is not None:
            self.entries[e.prev].next = e.next
        else:
            self.head = e.next
        if e.next is not None:
            self.entries[e.next].prev = e.prev
        else:
            self.tail = e.prev
        e.prev = e.next = None
        return e

    # -- iteration -----------------------------------------------------------

    def keys_in_order(self):
        k = self.head
        while k is not None:
            yield k
            k = self.entries[k].next

    def hot_keys(self) -> list:
        """Keys from the head through the threshold key, inclusive."""
        out = []
        k = self.head
        while k is not None:
            out.append(k)
            if k == self.threshold_key:
                break
            k = self.entries[k].next
        return out


def order_counts(counts) -> list:
    """Canonical frequency order: descending count, ties by key ascending."""
    return sorted(counts, key=lambda kc: (-kc[1], kc[0]))


def _threshold_rank(hot_fraction: float, n: int) -> int:
    """1-based rank of the threshold key: ceil(hot_fraction * n), guarded
    against float noise for exact-integer products (n up to ~1e8)."""
    return max(1, min(n, math.ceil(hot_fraction * n - 1e-9)))


def build_from_counts(counts, hot_fraction: float) -> FrequencyTable:
    """Build the table from (key, count) pairs. Addresses stay unassigned
    until a layout pass runs."""
    items = list(counts)
    if not items:
        raise ValueError("cannot build a frequency table from zero entries")
    seen = set()
    for key, count in items:
        if count < 0:
            raise ValueError(f"negative access count for {key}")
        if key in seen:
            raise ValueError(f"duplicate key {key} in counts")
        seen.add(key)
    table = FrequencyTable(hot_fraction)
    for key, count in order_counts(items):
        entry = MapEntry(key=key, access_count=int(count))
        table.entries[key] = entry
        table._link_after_tail(entry)
    rank = _threshold_rank(hot_fraction, len(items))
    k = table.head
    for _ in range(rank - 1):
        k = table.entries[k].next
    table.threshold_key = k
    table.threshold_prev = table.entries[k].prev
    return table


def _first_below(neg_runmin: np.ndarray, values: np.ndarray) -> np.ndarray:
    """For each value, the first prefix position whose count is strictly
    smaller. neg_runmin is the negated running minimum of the prefix counts
    (non-decreasing), so searchsorted(side='right') lands exactly on the
    first strictly-smaller element."""
    return np.searchsorted(neg_runmin, -values, side="right")


def adaptive_update(table: FrequencyTable, trained) -> UpdateSummary:
    """Apply one training window to the table (refreshes plus insertions).

    trained is an ordered sequence of (key, window_count); insertion order is
    the caller's (the update is sequential, order matters for ties).
    """
    items = list(trained)
    summary = UpdateSummary()
    if not items:
        return summary
    seen = set()
    for key, _ in items:
        if key in seen:
            raise ValueError(f"duplicate key {key} in trained data")
        seen.add(key)

    new_items = []
    for key, count in items:
        e = table.entries.get(key)
        if e is not None:
            e.access_count = int(count)
            summary.keys_refreshed += 1
        else:
            new_items.append((key, int(count)))

    # hot prefix [head..threshold], counts as refreshed above
    prefix_keys = table.hot_keys()
    prefix_counts = np.array(
        [table.entries[k].access_count for k in prefix_keys], dtype=np.int64
    )
    neg_runmin = -np.minimum.accumulate(prefix_counts)

    inserted: list = []
    i = 0
    while i < len(new_items):
        batch_counts = np.array([c for _, c in new_items[i:]], dtype=np.int64)
        pos = _first_below(neg_runmin, batch_counts)
        mutators = np.nonzero(pos < len(prefix_keys))[0]
        if len(mutators) == 0:
            for key, count in new_items[i:]:
                entry = MapEntry(key=key, access_count=count)
                table.entries[key] = entry
                table._link_after_tail(entry)
                summary.appended_keys.append(key)
            break
        j = int(mutators[0])
        for key, count in new_items[i:i + j]:
            entry = MapEntry(key=key, access_count=count)
            table.entries[key] = entry
            table._link_after_tail(entry)
            summary.appended_keys.append(key)

        key, count = new_items[i + j]
        p = int(pos[j])
        entry = MapEntry(key=key, access_count=count)
        table.entries[key] = entry
        table._insert_before(entry, prefix_keys[p])
        inserted.append(key)
        # demote the threshold key to the tail, move the threshold up one
        old_tau = prefix_keys[-1]
        demoted = table._unlink(old_tau)
        table._link_after_tail(demoted)
        L = len(prefix_keys)
        if L == 1:
            # threshold was the head; the inserted key becomes the hot region
            prefix_keys = [key]
        elif p == L - 1:
            # inserted directly before the threshold: it lands just below the
            # new threshold, outside the scan range
            prefix_keys = prefix_keys[:-1]
        else:
            prefix_keys = prefix_keys[:p] + [key] + prefix_keys[p:-1]
        prefix_counts = np.array(
            [table.entries[k].access_count for k in prefix_keys], dtype=np.int64
        )
        neg_runmin = -np.minimum.accumulate(prefix_counts)
        table.threshold_key = prefix_keys[-1]
        table.threshold_prev = prefix_keys[-2] if len(prefix_keys) > 1 else None
        i += j + 1

    summary.keys_inserted_hot = len(inserted)
    summary.keys_appended_tail = len(summary.appended_keys)

    # Hot region for reassignment: when insertions shifted the packing order,
    # it is the contiguous run from the head through the threshold and any
    # inserted keys sitting directly below it. With no insertions the ranks
    # are unchanged and nothing needs to move.
    if inserted:
        pending = set(inserted)
        hot: list = []
        k = table.head
        passed_tau = False
        while k is not None and (not passed_tau or pending):
            hot.append(k)
            pending.discard(k)
            if k == table.threshold_key:
                passed_tau = True
            k = table.entries[k].next
        summary.hot_region_keys_for_reassignment = hot
    return summary


def reassign_addresses(table: FrequencyTable, summary: UpdateSummary,
                       space: DeviceSpace, plane_rotate: bool = True) -> RemapPlan:
    """Give the post-update hot region fresh addresses from the free pool and
    assign pool space to tail-appended keys directly.

    Hot keys are packed into whole pages in list order; with plane_rotate the
    destination pages cycle across planes (the plane-distribution layout).
    Cold appends cost nothing in the remap accounting. Blocks left with no
    valid vector are erased and recycled.
    """
    plan = RemapPlan()
    hot = summary.hot_region_keys_for_reassignment
    appended = summary.appended_keys
    vpp = space.vpp
    hot_pages = -(-len(hot) // vpp) if hot else 0
    cold_pages = -(-len(appended) // vpp) if appended else 0
    available = space.free_pages_available()
    if hot_pages + cold_pages > available:
        raise CapacityError(
            f"free-page pool exhausted: need {hot_pages + cold_pages} pages "
            f"({hot_pages} hot + {cold_pages} direct), {available} available"
        )

    old_slots = []
    if hot:
        pages = space.alloc_pages(hot_pages, round_robin=plane_rotate)
        for rank, key in enumerate(hot):
            entry = table.entries[key]
            new_slot = int(pages[rank // vpp]) * vpp + rank % vpp
            if entry.address is not None:
                old_slots.append(entry.address)
                plan.moves.append((key, entry.address, new_slot))
            else:
                plan.moves.append((key, None, new_slot))
            entry.address = new_slot
        new_hot = np.array([table.entries[k].address for k in hot], dtype=np.int64)
        space.occupy(new_hot)
        plan.pages_moved = hot_pages

    if appended:
        pages = space.alloc_pages(cold_pages, round_robin=False)
        for rank, key in enumerate(appended):
            entry = table.entries[key]
            new_slot = int(pages[rank // vpp]) * vpp + rank % vpp
            plan.moves.append((key, entry.address, new_slot))
            entry.address = new_slot
        new_cold = np.array([table.entries[k].address for k in appended], dtype=np.int64)
        space.occupy(new_cold)

    if old_slots:
        erased = space.release(np.array(old_slots, dtype=np.int64))
        plan.blocks_erased = len(erased)
    return plan


def lookup(table: FrequencyTable, key: VectorKey, profiling: bool = False) -> int:
    """Physical slot of a key. Counting on lookup happens only in profiling
    mode; inference-time counting feeds the separate online window table."""
    entry = table.entries.get(key)
    if entry is None:
        reason = "evicted" if key in table._evicted else "never trained"
        raise MissingKeyError(key, reason)
    if profiling:
        entry.access_count += 1
    return entry.address


def audit(table: FrequencyTable, check_hot_monotone: bool = True) -> None:
    """Structural auditor: one head-to-tail pass covering every entry, with
    mutually consistent prev/next links, and (optionally) non-increasing
    counts inside the hot region."""
    n = len(table.entries)
    if n == 0:
        if table.head is not None or table.tail is not None:
            raise AssertionError("empty table with dangling head/tail")
        return
    seen = set()
    k = table.head
    prev = None
    while k is not None:
        if k in seen:
            raise AssertionError(f"cycle at {k}")
        seen.add(k)
        e = table.entries[k]
        if e.prev != prev:
            raise AssertionError(f"prev link broken at {k}: {e.prev!r} != {prev!r}")
        prev = k
        k = e.next
    if prev != table.tail:
        raise AssertionError(f"tail mismatch: walk ended at {prev}, tail is {table.tail}")
    if len(seen) != n:
        raise AssertionError(f"walk covered {len(seen)} of {n} entries")
    if table.threshold_key is not None:
        if table.threshold_key not in table.entries:
            raise AssertionError("threshold key not in table")
        tp = table.entries[table.threshold_key].prev
        if tp != table.threshold_prev:
            raise AssertionError(
                f"threshold_prev {table.threshold_prev!r} != prev(threshold) {tp!r}"
            )
    if check_hot_monotone:
        last = None
        for k in table.hot_keys():
            c = table.entries[k].access_count
            if last is not None and c > last:
                raise AssertionError(f"hot region counts increase at {k}")
            last = c


# -- binary snapshot -----------------------------------------------------------
# Little-endian, versioned. Record layout per entry (in list order, head first):
#   u32 table_id, u64 row_id, u64 access_count, i64 address (-1 when unset)

_SNAP_MAGIC = b"RFTB"
_SNAP_VERSION = 1
_REC = struct.Struct("<IQQq")


def save_snapshot(table: FrequencyTable, path) -> None:
    order = list(table.keys_in_order())
    tau_pos = order.index(table.threshold_key) if table.threshold_key else 0
    with open(path, "wb") as fh:
        fh.write(_SNAP_MAGIC)
        fh.write(struct.pack("<IQQd", _SNAP_VERSION, len(order), tau_pos,
                             table.hot_fraction))
        for key in order:
            e = table.entries[key]
            addr = -1 if e.address is None else e.address
            fh.write(_REC.pack(key[0], key[1], e.access_count, addr))


def load_snapshot(path) -> FrequencyTable:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _SNAP_MAGIC:
            raise ValueError(f"not a mapping snapshot (magic {magic!r})")
        version, n, tau_pos, hot_fraction = struct.unpack("<IQQd", fh.read(28))
        if version != _SNAP_VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        table = FrequencyTable(hot_fraction)
        order = []
        for _ in range(n):
            t, r, count, addr = _REC.unpack(fh.read(_REC.size))
            key = (t, r)
            entry = MapEntry(key=key, access_count=count,
                             address=None if addr < 0 else addr)
            table.entries[key] = entry
            table._link_after_tail(entry)
            order.append(key)
    if order:
        table.threshold_key = order[min(tau_pos, n - 1)]
        table.threshold_prev = table.entries[table.threshold_key].prev
    return table
