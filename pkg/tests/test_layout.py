import numpy as np
import pytest

from recflash.flash import preset
from recflash.layout import (
    CapacityError,
    DeviceSpace,
    LayoutKind,
    LayoutPolicy,
    af_pd_slots,
    af_slots,
    baseline_slots,
    dump_assignment_csv,
    place_af,
    place_af_pd,
    place_baseline,
    slot_to_address,
)

TLC = preset("tlc", blocks_per_plane=64, pages_per_block=16)


def test_layout_policy_derived_fields():
    p = LayoutPolicy(LayoutKind.AF_PD, 128, 16384)
    assert p.vectors_per_page == 128
    with pytest.raises(ValueError, match="multiple"):
        LayoutPolicy(LayoutKind.AF, 100, 16384)
    assert LayoutPolicy.for_config(LayoutKind.AF, 256, TLC).vectors_per_page == 64


def test_place_af_first_page_shared():
    keys = [("k", i) for i in range(300)]
    got = place_af(keys, TLC, 128)
    first = [got[k] for k in keys[:128]]
    assert all(a.plane == 0 and a.block == 0 and a.page == 0 for a in first)
    assert [a.offset for a in first] == [i * 128 for i in range(128)]
    # rank 128 opens page 1 of plane 0
    a128 = got[keys[128]]
    assert (a128.plane, a128.block, a128.page, a128.offset) == (0, 0, 1, 0)


def test_place_af_single_key():
    got = place_af([("k", 0)], TLC, 128)
    a = got[("k", 0)]
    assert (a.plane, a.block, a.page, a.offset) == (0, 0, 0, 0)


def test_place_af_exhausts_plane_before_next():
    vpp = 16384 // 512
    usable_pages = (64 - 3) * 16  # reserved tail blocks are skipped
    n = usable_pages * vpp + 1
    slots = af_slots(n, TLC, 512)
    pages = slots // vpp
    planes = pages // TLC.pages_per_plane
    assert planes[-2] == 0 and planes[-1] == 1


def test_place_af_pd_round_robin():
    vpp = 128
    n = 4 * vpp  # four full pages
    slots = af_pd_slots(n, TLC, 128)
    planes = (slots // vpp) // TLC.pages_per_plane
    per_page_plane = planes.reshape(4, vpp)[:, 0]
    assert per_page_plane.tolist() == [0, 1, 0, 1]


def test_place_af_pd_single_plane_degenerates_to_af():
    cfg = preset("tlc", planes_per_die=1, blocks_per_plane=64, pages_per_block=16)
    n = 1000
    assert np.array_equal(af_slots(n, cfg, 128), af_pd_slots(n, cfg, 128))


def test_place_af_pd_hottest_pages_on_distinct_planes():
    got = place_af_pd([("k", i) for i in range(256)], TLC, 128)
    planes = {got[("k", i)].plane for i in (0, 128)}
    assert planes == {0, 1}


def test_baseline_deterministic_and_valid():
    keys = [("k", i) for i in range(500)]
    a = place_baseline(keys, TLC, 128, seed=42)
    b = place_baseline(keys, TLC, 128, seed=42)
    assert a == b
    c = place_baseline(keys, TLC, 128, seed=43)
    assert a != c
    for addr in a.values():
        addr.check_fits(128)


def test_baseline_plane_balance():
    slots = baseline_slots(10_000, TLC, 128, seed=7)
    planes = (slots // 128) // TLC.pages_per_plane
    share = np.bincount(planes, minlength=2) / 10_000
    assert abs(share[0] - 0.5) < 0.05


def test_assignments_injective():
    n = 3000
    for slots in (
        af_slots(n, TLC, 128),
        af_pd_slots(n, TLC, 128),
        baseline_slots(n, TLC, 128, seed=1),
    ):
        assert len(np.unique(slots)) == n


def test_hot_prefix_page_minimality():
    vpp = 128
    for maker in (af_slots, af_pd_slots):
        slots = maker(5000, TLC, 128)
        for h in (1, 127, 128, 1000, 5000):
            pages = np.unique(slots[:h] // vpp)
            assert len(pages) == -(-h // vpp)


def test_capacity_errors():
    tiny = preset("tlc", blocks_per_plane=1, pages_per_block=1,
                  free_block_fraction=0.0)
    cap = tiny.planes_total * 1 * 1 * 128
    af_slots(cap, tiny, 128)
    with pytest.raises(CapacityError, match="exceed"):
        af_slots(cap + 1, tiny, 128)
    with pytest.raises(CapacityError):
        baseline_slots(cap + 1, tiny, 128, seed=0)


def test_slots_skip_reserved_blocks():
    usable_blocks = 64 - TLC.reserved_blocks_per_plane
    n = usable_blocks * 16 * 128 * 2  # fill every usable slot
    for slots in (af_slots(n, TLC, 128), baseline_slots(n, TLC, 128, seed=0)):
        blocks_in_plane = (slots // 128 % TLC.pages_per_plane) // TLC.pages_per_block
        assert blocks_in_plane.max() < usable_blocks


def test_dump_assignment_csv(tmp_path):
    keys = [("k", i) for i in range(10)]
    path = tmp_path / "map.csv"
    dump_assignment_csv(place_af(keys, TLC, 128), path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "key,channel,chip,die,plane,block,page,offset"
    assert len(lines) == 11


def test_device_space_alloc_round_robin():
    space = DeviceSpace(TLC, 512)
    pages = space.alloc_pages(6, round_robin=True)
    planes = pages // TLC.pages_per_plane
    assert planes.tolist() == [0, 1, 0, 1, 0, 1]


def test_device_space_exhaustion_message():
    space = DeviceSpace(TLC, 512)
    avail = space.free_pages_available()
    with pytest.raises(CapacityError, match=f"{avail} available"):
        space.alloc_pages(avail + 1)


def test_device_space_release_recycles_blocks():
    cfg = preset("tlc", blocks_per_plane=8, pages_per_block=4,
                 free_block_fraction=0.25)
    space = DeviceSpace(cfg, 512)
    vpp = 32
    # fill block 0 of plane 0 completely
    slots = np.arange(4 * vpp, dtype=np.int64)
    space.occupy(slots)
    before = space.free_pages_available()
    emptied = space.release(slots)
    assert emptied == [0]
    assert space.free_pages_available() == before + cfg.pages_per_block
    # partial release does not erase
    space.occupy(slots)
    emptied = space.release(slots[: 2 * vpp])
    assert emptied == []


def test_slot_to_address_roundtrip():
    vpp = TLC.vectors_per_page(128)
    for slot in (0, 127, 128, 12345):
        a = slot_to_address(slot, TLC, 128)
        assert TLC.page_id(a) * vpp + a.offset // 128 == slot
