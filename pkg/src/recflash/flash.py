"""NAND flash cost model: geometry, read timing, program/erase and per-op energy.

All latencies are in microseconds, all energies in microjoules, all sizes in
bytes. The read operation is modeled as three stages (command/address, array
to page buffer, data out); the stage formulas are::

    t_ca = (t_alh + t_als - t_ds) + 5 * t_wc + t_ds
    t_do = t_rr + t_rc * n_bytes        # one byte per read cycle

Device presets "slc", "tlc" and "qlc" carry measured page size / plane count /
array-read latency / page-read energy. Program and erase latency/energy are
NOT device-sheet values; they are typical commodity numbers, fully
configurable, and only feed the remapping-overhead accounting.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

__all__ = [
    "TimingParams",
    "FlashConfig",
    "PhysicalAddress",
    "ConfigError",
    "command_address_time",
    "data_out_time",
    "single_page_read_time",
    "read_energy",
    "remap_cost",
    "preset",
    "PRESET_NAMES",
    "load_config",
    "save_config",
    "config_to_text",
    "config_from_text",
]


class ConfigError(ValueError):
    """A flash configuration violates its invariants."""


@dataclass(frozen=True)
class TimingParams:
    """Read-operation timing parameters (microseconds).

    Defaults are the SLC analysis values; multi-level-cell presets override
    only t_r (the array-to-buffer latency differs per cell type, the
    command/address and data-out interface timings are shared).
    """

    t_alh: float = 0.005  # ALE hold time
    t_als: float = 0.01   # ALE setup time
    t_ds: float = 0.007   # data setup time
    t_wc: float = 0.02    # write cycle time
    t_r: float = 25.0     # array -> page buffer
    t_rr: float = 0.02    # ready to RE# falling edge
    t_rc: float = 0.02    # read cycle time (per byte)

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if not v > 0.0:
                raise ConfigError(f"timing.{f.name} must be strictly positive, got {v}")
        if not self.t_als + self.t_alh > self.t_ds:
            raise ConfigError(
                f"t_als + t_alh must exceed t_ds "
                f"({self.t_als} + {self.t_alh} <= {self.t_ds})"
            )


def command_address_time(timing: TimingParams) -> float:
    """Command/address stage latency in microseconds."""
    return (timing.t_alh + timing.t_als - timing.t_ds) + 5.0 * timing.t_wc + timing.t_ds


def data_out_time(timing: TimingParams, n_bytes: int) -> float:
    """Buffer-to-controller transfer latency for n_bytes byte cycles."""
    if n_bytes < 0:
        raise ValueError(f"n_bytes must be >= 0, got {n_bytes}")
    return timing.t_rr + timing.t_rc * n_bytes


def single_page_read_time(
    timing: TimingParams,
    vectors_in_page: int,
    vector_bytes: int,
    page_size: int | None = None,
) -> float:
    """Latency of one selective page read serving several co-located vectors.

    One command/address issue, one array read, then one data-out burst per
    needed vector. page_size, when given, bounds how many vectors fit.
    """
    if vectors_in_page < 1:
        raise ValueError(f"vectors_in_page must be >= 1, got {vectors_in_page}")
    if page_size is not None and vectors_in_page * vector_bytes > page_size:
        raise ValueError(
            f"{vectors_in_page} vectors of {vector_bytes} B exceed the "
            f"{page_size} B page"
        )
    return (
        command_address_time(timing)
        + timing.t_r
        + vectors_in_page * data_out_time(timing, vector_bytes)
    )


_CELL_TYPES = ("slc", "tlc", "qlc")


@dataclass(frozen=True)
class FlashConfig:
    """Device geometry, timing and energy. Immutable; safe to share."""

    cell_type: str = "tlc"
    page_size: int = 16384
    planes_per_die: int = 2
    dies_per_chip: int = 1
    chips_per_channel: int = 1
    channels: int = 1
    blocks_per_plane: int = 2048
    pages_per_block: int = 256
    timing: TimingParams = field(default_factory=lambda: TimingParams(t_r=60.0))
    page_read_energy: float = 69.06         # uJ per page read
    page_program_latency: float = 660.0     # us, non-datasheet default
    block_erase_latency: float = 3500.0     # us, non-datasheet default
    page_program_energy: float = 140.0      # uJ, non-datasheet default
    block_erase_energy: float = 300.0       # uJ, non-datasheet default
    data_out_energy_per_byte: float = 0.0   # opt-in adder
    cache_hit_energy: float = 0.0           # opt-in adder
    free_block_fraction: float = 0.05       # tail blocks per plane kept as free pool

    def __post_init__(self) -> None:
        if self.cell_type not in _CELL_TYPES:
            raise ConfigError(
                f"cell_type must be one of {_CELL_TYPES}, got {self.cell_type!r}"
            )
        for name in (
            "page_size",
            "planes_per_die",
            "dies_per_chip",
            "chips_per_channel",
            "channels",
            "blocks_per_plane",
            "pages_per_block",
        ):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        self.timing.validate()
        for name in (
            "page_read_energy",
            "page_program_latency",
            "block_erase_latency",
            "page_program_energy",
            "block_erase_energy",
        ):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.free_block_fraction < 1.0:
            raise ConfigError("free_block_fraction must be in [0, 1)")

    # -- derived geometry -------------------------------------------------

    @property
    def planes_total(self) -> int:
        return self.channels * self.chips_per_channel * self.dies_per_chip * self.planes_per_die

    @property
    def pages_per_plane(self) -> int:
        return self.blocks_per_plane * self.pages_per_block

    @property
    def blocks_total(self) -> int:
        return self.planes_total * self.blocks_per_plane

    @property
    def pages_total(self) -> int:
        return self.planes_total * self.pages_per_plane

    @property
    def reserved_blocks_per_plane(self) -> int:
        return int(self.blocks_per_plane * self.free_block_fraction)

    def vectors_per_page(self, vector_bytes: int) -> int:
        if vector_bytes < 1:
            raise ConfigError(f"vector size must be positive, got {vector_bytes}")
        if self.page_size % vector_bytes != 0:
            raise ConfigError(
                f"page size {self.page_size} is not a multiple of the "
                f"vector size {vector_bytes}"
            )
        return self.page_size // vector_bytes

    def sized_for(self, n_vectors: int, vector_bytes: int) -> "FlashConfig":
        """Return a copy with blocks_per_plane adjusted so n_vectors fit
        outside the reserved free pool (floor of 32 blocks per plane so the
        pool never vanishes)."""
        vpp = self.vectors_per_page(vector_bytes)
        pages_needed = -(-n_vectors // vpp)
        per_plane = -(-pages_needed // self.planes_total)
        blocks_needed = -(-per_plane // self.pages_per_block)
        blocks = max(32, blocks_needed + 1)
        # grow until the usable (non-reserved) share covers the demand
        while blocks - int(blocks * self.free_block_fraction) < blocks_needed:
            blocks += max(1, blocks // 16)
        return replace(self, blocks_per_plane=blocks)

    # -- address codec -----------------------------------------------------
    # Global page ids enumerate planes in (channel, chip, die, plane) order
    # with pages fastest:  gp = plane_global * pages_per_plane
    #                           + block * pages_per_block + page

    def plane_of_page(self, page_id):
        return page_id // self.pages_per_plane

    def page_id(self, addr: "PhysicalAddress") -> int:
        plane_global = (
            (addr.channel * self.chips_per_channel + addr.chip) * self.dies_per_chip
            + addr.die
        ) * self.planes_per_die + addr.plane
        return (
            plane_global * self.pages_per_plane
            + addr.block * self.pages_per_block
            + addr.page
        )

    def address_of(self, page_id: int, offset: int = 0) -> "PhysicalAddress":
        plane_global, rest = divmod(page_id, self.pages_per_plane)
        block, page = divmod(rest, self.pages_per_block)
        cc, plane = divmod(plane_global, self.planes_per_die)
        cd, die = divmod(cc, self.dies_per_chip)
        channel, chip = divmod(cd, self.chips_per_channel)
        return PhysicalAddress(
            channel=channel, chip=chip, die=die, plane=plane,
            block=block, page=page, offset=offset, config=self,
        )


@dataclass(frozen=True)
class PhysicalAddress:
    """Location of one vector inside the flash hierarchy."""

    channel: int
    chip: int
    die: int
    plane: int
    block: int
    page: int
    offset: int
    config: FlashConfig | None = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        cfg = self.config
        if cfg is None:
            return
        bounds = (
            ("channel", self.channel, cfg.channels),
            ("chip", self.chip, cfg.chips_per_channel),
            ("die", self.die, cfg.dies_per_chip),
            ("plane", self.plane, cfg.planes_per_die),
            ("block", self.block, cfg.blocks_per_plane),
            ("page", self.page, cfg.pages_per_block),
        )
        for name, v, limit in bounds:
            if not 0 <= v < limit:
                raise ConfigError(f"{name}={v} outside [0, {limit})")
        if not 0 <= self.offset < cfg.page_size:
            raise ConfigError(f"offset={self.offset} outside the {cfg.page_size} B page")

    def check_fits(self, vector_bytes: int) -> None:
        if self.config is not None and self.offset + vector_bytes > self.config.page_size:
            raise ConfigError(
                f"vector of {vector_bytes} B at offset {self.offset} straddles "
                f"the {self.config.page_size} B page boundary"
            )


# -- cost functions ---------------------------------------------------------


def read_energy(
    config: FlashConfig,
    page_reads: int,
    data_out_bytes: int = 0,
    cache_hits: int = 0,
) -> float:
    """Read energy in microjoules. Page reads dominate; the data-out and
    cache-hit adders default to zero in the config."""
    if page_reads < 0:
        raise ValueError(f"page_reads must be >= 0, got {page_reads}")
    return (
        page_reads * config.page_read_energy
        + data_out_bytes * config.data_out_energy_per_byte
        + cache_hits * config.cache_hit_energy
    )


def remap_cost(config: FlashConfig, pages_moved: int, blocks_erased: int) -> tuple[float, float]:
    """(latency_us, energy_uj) of moving pages_moved pages and erasing
    blocks_erased blocks. Each moved page is one array read plus one program."""
    if pages_moved < 0 or blocks_erased < 0:
        raise ValueError("pages_moved and blocks_erased must be >= 0")
    latency = (
        pages_moved * (config.timing.t_r + config.page_program_latency)
        + blocks_erased * config.block_erase_latency
    )
    energy = (
        pages_moved * (config.page_read_energy + config.page_program_energy)
        + blocks_erased * config.block_erase_energy
    )
    return latency, energy


# -- presets ------------------------------------------------------------------

_SLC_TIMING = TimingParams()

PRESET_NAMES = ("slc", "tlc", "qlc")

_PRESETS = {
    # page size, planes, t_r, page read energy; program/erase are commodity
    # placeholders, not measured values.
    "slc": dict(
        cell_type="slc",
        page_size=4096,
        planes_per_die=2,
        timing=replace(_SLC_TIMING, t_r=25.0),
        page_read_energy=7.39,
        page_program_latency=200.0,
        block_erase_latency=2000.0,
        page_program_energy=15.0,
        block_erase_energy=40.0,
    ),
    "tlc": dict(
        cell_type="tlc",
        page_size=16384,
        planes_per_die=2,
        timing=replace(_SLC_TIMING, t_r=60.0),
        page_read_energy=69.06,
        page_program_latency=660.0,
        block_erase_latency=3500.0,
        page_program_energy=140.0,
        block_erase_energy=300.0,
    ),
    "qlc": dict(
        cell_type="qlc",
        page_size=16384,
        planes_per_die=2,
        timing=replace(_SLC_TIMING, t_r=140.0),
        page_read_energy=110.99,
        page_program_latency=2000.0,
        block_erase_latency=3500.0,
        page_program_energy=230.0,
        block_erase_energy=450.0,
    ),
}


def preset(name: str, **overrides) -> FlashConfig:
    """Build a named device preset ("slc", "tlc", "qlc"), optionally overriding
    any field."""
    key = name.lower()
    if key not in _PRESETS:
        raise ConfigError(f"unknown preset {name!r}; valid presets: {PRESET_NAMES}")
    kw = dict(_PRESETS[key])
    kw.update(overrides)
    return FlashConfig(**kw)


# -- canonical key/value serialization ---------------------------------------

_TIMING_PREFIX = "timing."


def config_to_text(config: FlashConfig) -> str:
    """Canonical key/value rendering; floats use repr so a round trip is
    bit-exact."""
    lines = ["# recflash NAND configuration v1"]
    for f in fields(FlashConfig):
        v = getattr(config, f.name)
        if f.name == "timing":
            for tf in fields(TimingParams):
                lines.append(f"{_TIMING_PREFIX}{tf.name} = {getattr(v, tf.name)!r}")
        elif isinstance(v, str):
            lines.append(f"{f.name} = {v}")
        else:
            lines.append(f"{f.name} = {v!r}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> FlashConfig:
    kw: dict = {}
    timing_kw: dict = {}
    int_fields = {
        "page_size", "planes_per_die", "dies_per_chip", "chips_per_channel",
        "channels", "blocks_per_plane", "pages_per_block",
    }
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key.startswith(_TIMING_PREFIX):
            tname = key[len(_TIMING_PREFIX):]
            if tname not in {f.name for f in fields(TimingParams)}:
                raise ConfigError(f"line {lineno}: unknown timing field {tname!r}")
            timing_kw[tname] = float(value)
        elif key == "cell_type":
            kw[key] = value
        elif key in int_fields:
            kw[key] = int(value)
        elif key in {f.name for f in fields(FlashConfig)}:
            kw[key] = float(value)
        else:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
    if timing_kw:
        kw["timing"] = TimingParams(**timing_kw)
    return FlashConfig(**kw)


def save_config(config: FlashConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config_to_text(config))


def load_config(path) -> FlashConfig:
    with open(path, encoding="utf-8") as fh:
        return config_from_text(fh.read())
