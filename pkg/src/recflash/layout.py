"""Physical placement policies and free-space accounting.

Three placements are modeled:

* baseline  - keys scattered over all usable pages by a seeded random
              permutation (hot items end up spread across pages and planes);
* af        - keys packed in descending access-frequency order, filling every
              page of the first plane before moving to the next plane;
* af_pd     - same frequency-ordered packing, but consecutive filled pages
              are assigned round-robin across planes so the hottest pages sit
              on distinct planes and their array reads can overlap.

Placement never touches the reserved tail blocks of each plane; those form
the free-page pool used for remap destinations and direct cold assignments.

Addresses are handled in two equivalent forms: `PhysicalAddress` records for
the object API and packed integer "slots" (global_page_id * vectors_per_page
+ offset_index) for the vectorized paths.
"""

from __future__ import annotations

import csv
import enum
import functools
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .flash import FlashConfig, PhysicalAddress

__all__ = [
    "LayoutKind",
    "LayoutPolicy",
    "CapacityError",
    "place_baseline",
    "place_af",
    "place_af_pd",
    "baseline_slots",
    "af_slots",
    "af_pd_slots",
    "slot_to_address",
    "DeviceSpace",
    "dump_assignment_csv",
]


class LayoutKind(enum.Enum):
    BASELINE = "baseline"
    AF = "af"
    AF_PD = "af_pd"


class CapacityError(ValueError):
    """Too many keys for the usable (non-reserved) flash space."""


@dataclass(frozen=True)
class LayoutPolicy:
    """Placement policy plus the vector granularity it packs at.

    Vector sizes of 64..512 B are the practical range; any positive size that
    divides the device page is accepted.
    """

    kind: LayoutKind
    vector_bytes: int
    page_size: int
    vectors_per_page: int = field(init=False)

    def __post_init__(self) -> None:
        if self.vector_bytes < 1:
            raise ValueError(f"vector_bytes must be positive, got {self.vector_bytes}")
        if self.page_size % self.vector_bytes != 0:
            raise ValueError(
                f"page size {self.page_size} is not a multiple of "
                f"vector size {self.vector_bytes}"
            )
        object.__setattr__(self, "vectors_per_page", self.page_size // self.vector_bytes)

    @classmethod
    def for_config(cls, kind: LayoutKind, vector_bytes: int,
                   config: FlashConfig) -> "LayoutPolicy":
        return cls(kind, vector_bytes, config.page_size)


def _usable_pages_per_plane(config: FlashConfig) -> int:
    usable_blocks = config.blocks_per_plane - config.reserved_blocks_per_plane
    return usable_blocks * config.pages_per_block


def _check_capacity(n_keys: int, config: FlashConfig, vpp: int) -> int:
    usable_slots = config.planes_total * _usable_pages_per_plane(config) * vpp
    if n_keys > usable_slots:
        raise CapacityError(
            f"{n_keys} keys exceed the usable capacity of {usable_slots} "
            f"vector slots ({config.planes_total} planes x "
            f"{_usable_pages_per_plane(config)} pages x {vpp} vectors)"
        )
    return usable_slots


def _stream_pages_af(page_stream: np.ndarray, config: FlashConfig) -> np.ndarray:
    """AF page order: exhaust plane 0's usable pages, then plane 1, ..."""
    upp = _usable_pages_per_plane(config)
    plane = page_stream // upp
    within = page_stream % upp
    return plane * config.pages_per_plane + within


def _stream_pages_af_pd(page_stream: np.ndarray, config: FlashConfig) -> np.ndarray:
    """AF+PD page order: the i-th filled page goes to plane i mod planes."""
    planes = config.planes_total
    plane = page_stream % planes
    within = page_stream // planes
    return plane * config.pages_per_plane + within


def af_slots(n_keys: int, config: FlashConfig, vector_bytes: int) -> np.ndarray:
    """Packed slots for ranks 0..n_keys-1 under frequency packing."""
    vpp = config.vectors_per_page(vector_bytes)
    _check_capacity(n_keys, config, vpp)
    ranks = np.arange(n_keys, dtype=np.int64)
    pages = _stream_pages_af(ranks // vpp, config)
    return pages * vpp + ranks % vpp


def af_pd_slots(n_keys: int, config: FlashConfig, vector_bytes: int) -> np.ndarray:
    """Packed slots with filled pages distributed round-robin over planes."""
    vpp = config.vectors_per_page(vector_bytes)
    _check_capacity(n_keys, config, vpp)
    ranks = np.arange(n_keys, dtype=np.int64)
    pages = _stream_pages_af_pd(ranks // vpp, config)
    return pages * vpp + ranks % vpp


@functools.lru_cache(maxsize=2)
def _baseline_slots_cached(n_keys: int, config: FlashConfig, vector_bytes: int,
                           seed: int) -> np.ndarray:
    vpp = config.vectors_per_page(vector_bytes)
    usable_slots = _check_capacity(n_keys, config, vpp)
    rng = np.random.Generator(np.random.PCG64(seed))
    picks = rng.permutation(usable_slots)[:n_keys]
    # usable slot index -> global slot (skipping reserved tail blocks)
    upp = _usable_pages_per_plane(config)
    upage = picks // vpp
    plane = upage // upp
    within = upage % upp
    pages = plane * config.pages_per_plane + within
    out = pages * vpp + picks % vpp
    out.setflags(write=False)
    return out


def baseline_slots(n_keys: int, config: FlashConfig, vector_bytes: int,
                   seed: int) -> np.ndarray:
    """Seeded uniform-random slot assignment over the usable space. The
    permutation is the expensive part, so identical requests are cached;
    callers get a fresh copy they may mutate."""
    return _baseline_slots_cached(n_keys, config, vector_bytes, seed).copy()


def slots_for(kind: LayoutKind, n_keys: int, config: FlashConfig,
              vector_bytes: int, seed: int = 0) -> np.ndarray:
    if kind is LayoutKind.BASELINE:
        return baseline_slots(n_keys, config, vector_bytes, seed)
    if kind is LayoutKind.AF:
        return af_slots(n_keys, config, vector_bytes)
    return af_pd_slots(n_keys, config, vector_bytes)


def slot_to_address(slot: int, config: FlashConfig, vector_bytes: int) -> PhysicalAddress:
    vpp = config.vectors_per_page(vector_bytes)
    page_id, idx = divmod(int(slot), vpp)
    return config.address_of(page_id, idx * vector_bytes)


def _as_assignment(keys, slots: np.ndarray, config: FlashConfig,
                   vector_bytes: int) -> dict:
    return {
        key: slot_to_address(slot, config, vector_bytes)
        for key, slot in zip(keys, slots.tolist())
    }


def place_baseline(keys, config: FlashConfig, vector_bytes: int, seed: int) -> dict:
    """Scatter keys uniformly at random (deterministic per seed)."""
    keys = list(keys)
    return _as_assignment(keys, baseline_slots(len(keys), config, vector_bytes, seed),
                          config, vector_bytes)


def place_af(sorted_keys, config: FlashConfig, vector_bytes: int) -> dict:
    """Pack keys (already sorted hottest-first) plane by plane."""
    keys = list(sorted_keys)
    return _as_assignment(keys, af_slots(len(keys), config, vector_bytes),
                          config, vector_bytes)


def place_af_pd(sorted_keys, config: FlashConfig, vector_bytes: int) -> dict:
    """Pack keys hottest-first with pages rotated across planes."""
    keys = list(sorted_keys)
    return _as_assignment(keys, af_pd_slots(len(keys), config, vector_bytes),
                          config, vector_bytes)


def dump_assignment_csv(assignment: dict, path) -> None:
    """Audit dump: one row per key with the full address decomposition."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "channel", "chip", "die", "plane", "block", "page", "offset"])
        for key, a in assignment.items():
            w.writerow([key, a.channel, a.chip, a.die, a.plane, a.block, a.page, a.offset])


class DeviceSpace:
    """Mutable occupancy state of one device: per-block valid-vector counts
    plus the per-plane free-page pool.

    The pool starts as the reserved tail blocks of each plane; blocks that a
    remap fully invalidates are erased and their pages recycled into the pool.
    """

    def __init__(self, config: FlashConfig, vector_bytes: int):
        self.config = config
        self.vector_bytes = vector_bytes
        self.vpp = config.vectors_per_page(vector_bytes)
        self.block_valid = np.zeros(config.blocks_total, dtype=np.int64)
        self._free: list[deque] = [deque() for _ in range(config.planes_total)]
        reserved = config.reserved_blocks_per_plane
        ppb = config.pages_per_block
        for plane in range(config.planes_total):
            base = plane * config.pages_per_plane
            first_reserved = config.blocks_per_plane - reserved
            for blk in range(first_reserved, config.blocks_per_plane):
                start = base + blk * ppb
                self._free[plane].extend(range(start, start + ppb))

    # -- occupancy ---------------------------------------------------------

    def block_of_slot(self, slots: np.ndarray) -> np.ndarray:
        return slots // (self.vpp * self.config.pages_per_block)

    def occupy(self, slots: np.ndarray) -> None:
        blocks = self.block_of_slot(np.asarray(slots, dtype=np.int64))
        counts = np.bincount(blocks, minlength=len(self.block_valid))
        self.block_valid += counts

    def release(self, slots: np.ndarray) -> list[int]:
        """Drop valid counts for vacated slots; returns ids of blocks that
        became fully invalid (they are erased and recycled immediately)."""
        blocks = np.asarray(self.block_of_slot(np.asarray(slots, dtype=np.int64)))
        counts = np.bincount(blocks, minlength=len(self.block_valid))
        self.block_valid -= counts
        if np.any(self.block_valid < 0):
            raise RuntimeError("block valid count went negative; occupancy is corrupt")
        touched = np.unique(blocks)
        emptied = touched[self.block_valid[touched] == 0]
        for blk in emptied.tolist():
            self._recycle_block(blk)
        return emptied.tolist()

    def _recycle_block(self, block_id: int) -> None:
        ppb = self.config.pages_per_block
        first_page = block_id * ppb
        plane = first_page // self.config.pages_per_plane
        self._free[plane].extend(range(first_page, first_page + ppb))

    # -- allocation ----------------------------------------------------------

    def free_pages_available(self) -> int:
        return sum(len(q) for q in self._free)

    def alloc_pages(self, n_pages: int, round_robin: bool = True) -> np.ndarray:
        """Take n_pages from the pool, cycling planes so consecutive pages sit
        on distinct planes wherever the pool allows."""
        avail = self.free_pages_available()
        if n_pages > avail:
            raise CapacityError(
                f"free-page pool exhausted: need {n_pages} pages, "
                f"{avail} available"
            )
        out = np.empty(n_pages, dtype=np.int64)
        planes = len(self._free)
        plane = 0
        for i in range(n_pages):
            if round_robin:
                for off in range(planes):
                    cand = (plane + off) % planes
                    if self._free[cand]:
                        plane = cand
                        break
                out[i] = self._free[plane].popleft()
                plane = (plane + 1) % planes
            else:
                for cand in range(planes):
                    if self._free[cand]:
                        out[i] = self._free[cand].popleft()
                        break
        return out
