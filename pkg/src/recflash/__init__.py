"""recflash: a NAND-flash in-storage-computing simulator for recommendation
embedding lookups, with frequency-based data remapping, plane distribution,
a page-wise cache, and online adaptive remapping."""

from .cache import PageCache, VectorCache
from .engine import (
    DEFAULT_MLP,
    POLICIES,
    MlpCostModel,
    PolicyConfig,
    PolicyKind,
    SimReport,
    TriggerPolicy,
    check_trigger,
    end_to_end_latency,
    run_static,
    run_timeline,
    serve_batch,
    serve_query,
)
from .flash import (
    FlashConfig,
    PhysicalAddress,
    TimingParams,
    command_address_time,
    data_out_time,
    preset,
    read_energy,
    remap_cost,
    single_page_read_time,
)
from .layout import LayoutKind, LayoutPolicy, place_af, place_af_pd, place_baseline
from .mapping import (
    FrequencyTable,
    MapEntry,
    adaptive_update,
    build_from_counts,
    lookup,
    reassign_addresses,
)
from .workload import (
    DLRM_PRESETS,
    K_PRESETS,
    DlrmPreset,
    LookupQuery,
    TraceSpec,
    generate_trace,
    load_trace,
    profile_counts,
    save_trace,
)

__version__ = "0.1.0"
