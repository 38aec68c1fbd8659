"""Controller-side caches: the page-wise SRAM LRU cache and the per-table
DRAM vector cache used by sequential-read baseline runs.

Both caches are plain LRU; a hit promotes the entry to most-recent, a miss
inserts it (evicting the least-recent entry when full). Hits cost zero flash
time; an optional per-hit latency exists for sensitivity studies.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

__all__ = ["Hit", "Miss", "PageCache", "VectorCache", "lru_hits"]


@dataclass(frozen=True)
class Hit:
    pass


@dataclass(frozen=True)
class Miss:
    evicted: object | None = None


HIT = Hit()


class PageCache:
    """Page-granular LRU over plane-qualified page ids.

    capacity_bytes defaults to a 128 KB SRAM; the page count it holds follows
    from the device page size (8 pages for 16 KB pages, 32 for 4 KB).
    """

    def __init__(self, capacity_bytes: int = 131072, page_size: int = 16384,
                 hit_latency_us: float = 0.0):
        if capacity_bytes < 0 or page_size <= 0:
            raise ValueError("capacity_bytes must be >= 0 and page_size > 0")
        self.capacity_bytes = capacity_bytes
        self.page_size = page_size
        self.capacity_pages = capacity_bytes // page_size
        self.hit_latency_us = hit_latency_us
        self.hits = 0
        self.misses = 0
        self._slots: OrderedDict = OrderedDict()

    def __len__(self) -> int:
        return len(self._slots)

    def __contains__(self, page) -> bool:
        return page in self._slots

    def access(self, page):
        """Touch one page; returns Hit or Miss(evicted=...)."""
        slots = self._slots
        if page in slots:
            slots.move_to_end(page)
            self.hits += 1
            return HIT
        self.misses += 1
        if self.capacity_pages == 0:
            return Miss()
        evicted = None
        if len(slots) >= self.capacity_pages:
            evicted, _ = slots.popitem(last=False)
        slots[page] = True
        return Miss(evicted=evicted)

    def access_batch(self, pages: np.ndarray) -> np.ndarray:
        """Vector of hit flags for a stream of page ids, updating the cache
        state exactly as sequential access() calls would."""
        hits = lru_hits(pages, self.capacity_pages, self._slots)
        n_hits = int(hits.sum())
        self.hits += n_hits
        self.misses += len(pages) - n_hits
        return hits

    def flush(self) -> None:
        """Drop everything (used on remap epochs; stale physical pages must
        not serve a new layout)."""
        self._slots.clear()

    def contents(self) -> list:
        """Pages from least- to most-recently used."""
        return list(self._slots)


def lru_hits(stream: np.ndarray, capacity: int, slots: OrderedDict) -> np.ndarray:
    """Run an LRU over an integer id stream. Mutates slots; returns a bool
    array marking hits."""
    out = np.empty(len(stream), dtype=bool)
    if capacity == 0:
        out[:] = False
        return out
    move = slots.move_to_end
    pop = slots.popitem
    for i, page in enumerate(stream.tolist()):
        if page in slots:
            move(page)
            out[i] = True
        else:
            out[i] = False
            if len(slots) >= capacity:
                pop(last=False)
            slots[page] = True
    return out


class VectorCache:
    """Per-table LRU of embedding vectors (models a host-side DRAM cache,
    2 K vectors per table by default). Tables are created lazily."""

    def __init__(self, per_table_capacity: int = 2048):
        if per_table_capacity < 0:
            raise ValueError("per_table_capacity must be >= 0")
        self.per_table_capacity = per_table_capacity
        self.hits = 0
        self.misses = 0
        self._tables: dict[int, OrderedDict] = {}

    def access(self, table_id: int, row_id: int):
        slots = self._tables.get(table_id)
        if slots is None:
            slots = self._tables[table_id] = OrderedDict()
        if row_id in slots:
            slots.move_to_end(row_id)
            self.hits += 1
            return HIT
        self.misses += 1
        if self.per_table_capacity == 0:
            return Miss()
        evicted = None
        if len(slots) >= self.per_table_capacity:
            evicted, _ = slots.popitem(last=False)
        slots[row_id] = True
        return Miss(evicted=evicted)

    def access_batch(self, table_id: int, rows: np.ndarray) -> np.ndarray:
        slots = self._tables.get(table_id)
        if slots is None:
            slots = self._tables[table_id] = OrderedDict()
        hits = lru_hits(rows, self.per_table_capacity, slots)
        n_hits = int(hits.sum())
        self.hits += n_hits
        self.misses += len(rows) - n_hits
        return hits

    def occupancy(self, table_id: int) -> int:
        slots = self._tables.get(table_id)
        return 0 if slots is None else len(slots)

    def flush(self) -> None:
        self._tables.clear()
