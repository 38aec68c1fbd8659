import random

import pytest

from recflash import flash
from recflash.flash import (
    ConfigError,
    FlashConfig,
    PhysicalAddress,
    TimingParams,
    command_address_time,
    config_from_text,
    config_to_text,
    data_out_time,
    preset,
    read_energy,
    remap_cost,
    single_page_read_time,
)

T = TimingParams()  # analysis defaults (SLC timing set)


def test_command_address_time_analysis_value():
    assert command_address_time(T) == pytest.approx(0.115, abs=1e-9)


def test_command_address_time_zero_degenerate():
    z = TimingParams(t_alh=0.0, t_als=0.0, t_ds=0.0, t_wc=0.0)
    assert command_address_time(z) == 0.0


def test_command_address_time_hand_arithmetic():
    t = TimingParams(t_alh=0.01, t_als=0.02, t_ds=0.01, t_wc=0.05)
    assert command_address_time(t) == pytest.approx(0.28, abs=1e-9)


def test_data_out_time_values():
    assert data_out_time(T, 128) == pytest.approx(2.58, abs=1e-9)
    assert data_out_time(T, 0) == pytest.approx(0.02, abs=1e-12)
    assert data_out_time(T, 512) == pytest.approx(10.26, abs=1e-9)
    with pytest.raises(ValueError):
        data_out_time(T, -1)


def test_single_page_read_values():
    assert single_page_read_time(T, 2, 128) == pytest.approx(30.275, abs=1e-9)
    assert 2 * single_page_read_time(T, 1, 128) == pytest.approx(55.39, abs=1e-9)
    assert single_page_read_time(T, 4, 128) == pytest.approx(35.435, abs=1e-9)


def test_single_page_read_rejects_overflow():
    with pytest.raises(ValueError):
        single_page_read_time(T, 3, 2048, page_size=4096)
    with pytest.raises(ValueError):
        single_page_read_time(T, 0, 128)


def test_data_out_additivity():
    rng = random.Random(7)
    for _ in range(200):
        n1, n2 = rng.randrange(0, 4096), rng.randrange(0, 4096)
        lhs = data_out_time(T, n1 + n2)
        rhs = data_out_time(T, n1) + data_out_time(T, n2) - T.t_rr
        assert lhs == pytest.approx(rhs, abs=1e-9)


def test_page_consolidation_always_wins():
    rng = random.Random(11)
    for _ in range(300):
        timing = TimingParams(
            t_alh=rng.uniform(1e-3, 0.1),
            t_als=rng.uniform(0.1, 0.2),
            t_ds=rng.uniform(1e-3, 0.05),
            t_wc=rng.uniform(1e-3, 0.1),
            t_r=rng.uniform(1.0, 200.0),
            t_rr=rng.uniform(1e-3, 0.1),
            t_rc=rng.uniform(1e-3, 0.1),
        )
        timing.validate()
        v = rng.choice([64, 128, 256, 512])
        k = rng.randrange(2, 4096 // v + 1)
        combined = single_page_read_time(timing, k, v, page_size=4096)
        separate = k * single_page_read_time(timing, 1, v, page_size=4096)
        assert combined < separate


def test_read_energy():
    tlc = preset("tlc")
    assert read_energy(tlc, 1) == pytest.approx(69.06)
    assert read_energy(tlc, 0) == 0.0
    assert read_energy(preset("slc"), 10) == pytest.approx(73.9)
    with pytest.raises(ValueError):
        read_energy(tlc, -1)


def test_read_energy_optional_adders():
    tlc = preset("tlc", data_out_energy_per_byte=0.001, cache_hit_energy=0.5)
    assert read_energy(tlc, 2, data_out_bytes=1000, cache_hits=4) == pytest.approx(
        2 * 69.06 + 1.0 + 2.0
    )


def test_remap_cost():
    tlc = preset("tlc")
    assert remap_cost(tlc, 0, 0) == (0.0, 0.0)
    lat, _ = remap_cost(tlc, 100, 2)
    assert lat == pytest.approx(79_000.0)
    lat1, _ = remap_cost(tlc, 1, 0)
    assert lat1 == pytest.approx(720.0)


@pytest.mark.parametrize(
    "name,page_size,planes,t_r,energy",
    [
        ("slc", 4096, 2, 25.0, 7.39),
        ("tlc", 16384, 2, 60.0, 69.06),
        ("qlc", 16384, 2, 140.0, 110.99),
    ],
)
def test_presets_match_device_table(name, page_size, planes, t_r, energy):
    cfg = preset(name)
    assert cfg.page_size == page_size
    assert cfg.planes_per_die == planes
    assert cfg.timing.t_r == t_r
    assert cfg.page_read_energy == energy
    # interface timings are shared across cell types
    assert cfg.timing.t_rr == 0.02 and cfg.timing.t_rc == 0.02


def test_preset_roundtrip_bit_exact(tmp_path):
    for name in flash.PRESET_NAMES:
        cfg = preset(name)
        assert config_from_text(config_to_text(cfg)) == cfg
        p = tmp_path / f"{name}.cfg"
        flash.save_config(cfg, p)
        assert flash.load_config(p) == cfg


def test_config_from_text_errors():
    with pytest.raises(ConfigError, match="unknown config key"):
        config_from_text("nonsense = 1\n")
    with pytest.raises(ConfigError, match="line 1"):
        config_from_text("no equals sign here")
    with pytest.raises(ConfigError, match="timing"):
        config_from_text("timing.t_zz = 1.0")


def test_timing_validation():
    with pytest.raises(ConfigError, match="strictly positive"):
        TimingParams(t_r=0.0).validate()
    with pytest.raises(ConfigError, match="exceed"):
        TimingParams(t_als=0.001, t_alh=0.001, t_ds=0.007).validate()
    T.validate()


def test_config_validation():
    with pytest.raises(ConfigError):
        FlashConfig(cell_type="mlc9")
    with pytest.raises(ConfigError):
        FlashConfig(planes_per_die=0)
    with pytest.raises(ConfigError):
        FlashConfig(timing=TimingParams(t_r=-1.0))


def test_physical_address_bounds():
    cfg = preset("slc", blocks_per_plane=4, pages_per_block=8)
    PhysicalAddress(0, 0, 0, 1, 3, 7, 4095, config=cfg)
    with pytest.raises(ConfigError):
        PhysicalAddress(0, 0, 0, 2, 0, 0, 0, config=cfg)
    with pytest.raises(ConfigError):
        PhysicalAddress(0, 0, 0, 0, 4, 0, 0, config=cfg)
    a = PhysicalAddress(0, 0, 0, 0, 0, 0, 4096 - 64, config=cfg)
    a.check_fits(64)
    with pytest.raises(ConfigError, match="straddles"):
        a.check_fits(128)


def test_vectors_per_page():
    cfg = preset("tlc")
    assert cfg.vectors_per_page(128) == 128
    with pytest.raises(ConfigError, match="multiple"):
        cfg.vectors_per_page(100)


def test_address_codec_roundtrip():
    cfg = preset(
        "tlc", channels=2, chips_per_channel=2, dies_per_chip=2,
        blocks_per_plane=16, pages_per_block=8,
    )
    rng = random.Random(3)
    for _ in range(200):
        page_id = rng.randrange(cfg.pages_total)
        addr = cfg.address_of(page_id, 0)
        assert cfg.page_id(addr) == page_id
        assert cfg.plane_of_page(page_id) == (
            ((addr.channel * cfg.chips_per_channel + addr.chip) * cfg.dies_per_chip
             + addr.die) * cfg.planes_per_die + addr.plane
        )


def test_sized_for_capacity():
    cfg = preset("tlc")
    n = 40_000_000
    grown = cfg.sized_for(n, 256)
    usable_blocks = grown.blocks_per_plane - grown.reserved_blocks_per_plane
    usable = grown.planes_total * usable_blocks * grown.pages_per_block * (16384 // 256)
    assert usable >= n
    small = preset("tlc").sized_for(1000, 256)
    assert small.blocks_per_plane <= cfg.blocks_per_plane
    assert small.page_size == cfg.page_size
