"""Simulation engine: replays query streams against a (layout, cache, policy)
configuration and accumulates latency/energy/bandwidth statistics.

Cost model per query. The query's accesses are resolved to physical slots,
deduplicated, and grouped by page (pages are visited in ascending page-id
order within a query). Each missed page costs one command/address issue and
one data-out burst per needed vector (selective read-out) or one burst up to
the last needed offset (sequential read-out). Array reads on distinct planes
of a die overlap: the controller issues the command/address cycles back to
back, the per-plane array reads run concurrently, and the data-out transfers
then serialize on the shared channel. Pages queued on the same plane proceed
in consecutive rounds. The per-query embedding latency is therefore

    n_missed * t_ca + rounds * t_r + sum(data_out) + hits * hit_latency

with rounds = the maximum number of missed pages on any one plane. Queries
are served in order; inter-query pipelining is not modeled.

The sparse-length-sum over fetched payloads is computed through a reverse
slot-to-key map, so a mapping inconsistency (stale or colliding addresses)
changes the sums; they must be bit-identical across layouts and policies.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from . import flash as fl
from . import mapping as mp
from .cache import PageCache, VectorCache
from .flash import FlashConfig
from .layout import DeviceSpace, LayoutKind, slots_for
from .workload import DlrmPreset, LookupQuery, QueryBatch, generate_trace, profile_count_arrays

__all__ = [
    "PolicyKind",
    "PolicyConfig",
    "POLICIES",
    "TriggerPolicy",
    "MlpCostModel",
    "DEFAULT_MLP_US",
    "DEFAULT_MLP",
    "RemapEvent",
    "SimReport",
    "ServeContext",
    "BatchResult",
    "build_static_context",
    "frequency_order",
    "serve_query",
    "serve_batch",
    "end_to_end_latency",
    "check_trigger",
    "run_static",
    "run_timeline",
    "payload64",
]


class PolicyKind(enum.Enum):
    SEQ_DATA_OUT = "seq"   # sequential page-buffer read-out
    SEL_DATA_OUT = "sel"   # selective page-buffer read-out
    RECFLASH = "recflash"  # selective read-out + packed layout + page cache


@dataclass(frozen=True)
class PolicyConfig:
    """A lookup policy bound to its layout and cache configuration."""

    name: str
    kind: PolicyKind
    layout: LayoutKind
    page_cache_bytes: int = 0
    page_cache_hit_us: float = 0.0
    use_vector_cache: bool = False
    vector_cache_capacity: int = 2048


POLICIES = {
    # sequential read-out over a scattered layout
    "recssd": PolicyConfig("recssd", PolicyKind.SEQ_DATA_OUT, LayoutKind.BASELINE),
    # selective read-out over a scattered layout
    "rmssd": PolicyConfig("rmssd", PolicyKind.SEL_DATA_OUT, LayoutKind.BASELINE),
    # selective read-out + frequency packing with plane distribution + 128 KB
    # page-wise SRAM cache
    "recflash": PolicyConfig(
        "recflash", PolicyKind.RECFLASH, LayoutKind.AF_PD, page_cache_bytes=131072
    ),
}


@dataclass(frozen=True)
class TriggerPolicy:
    """When to run online training + remapping.

    threshold: fire when the number of window keys whose count exceeds the
    reference table's threshold-key count is more than `portion` of the
    window. periodic: fire at every period boundary. hot_fraction is the
    top-x% boundary used both for the check and for the remap itself
    (named presets use 0.05 / 0.10 / 0.15).
    """

    kind: str = "threshold"            # "threshold" | "periodic"
    hot_fraction: float = 0.10
    portion: float = 0.001
    period_days: int = 1

    def __post_init__(self) -> None:
        if self.kind not in ("threshold", "periodic"):
            raise ValueError(f"unknown trigger kind {self.kind!r}")
        if not 0.0 < self.hot_fraction <= 1.0:
            raise ValueError("hot_fraction must be in (0, 1]")
        if self.portion <= 0:
            raise ValueError("portion must be > 0")
        if self.period_days < 1:
            raise ValueError("period_days must be >= 1")


# Per-query MLP time by model, microseconds. Calibration constants for the
# additive end-to-end model, sized so the fully-connected share is modest for
# rmc1/rmc2 and dominant for rmc3 (whose MLP stacks are an order of magnitude
# wider).
DEFAULT_MLP_US = {"rmc1": 60.0, "rmc2": 180.0, "rmc3": 6200.0}


@dataclass(frozen=True)
class MlpCostModel:
    per_query_us: dict

    def cost(self, preset: DlrmPreset) -> float:
        return float(self.per_query_us.get(preset.name, 0.0))


DEFAULT_MLP = MlpCostModel(DEFAULT_MLP_US)


def end_to_end_latency(embedding_us: float, preset: DlrmPreset,
                       mlp_model: MlpCostModel = DEFAULT_MLP,
                       queries: int = 1) -> float:
    """Embedding time plus the per-query fully-connected constant."""
    return embedding_us + mlp_model.cost(preset) * queries


@dataclass
class RemapEvent:
    day: int
    pages_moved: int
    blocks_erased: int
    latency_us: float
    energy_uj: float
    keys_inserted_hot: int = 0
    keys_appended_tail: int = 0


@dataclass
class SimReport:
    policy: str = ""
    nand: str = ""
    preset: str = ""
    seed: int = 0
    queries: int = 0
    embedding_latency_us: float = 0.0
    end_to_end_latency_us: float = 0.0
    read_energy_uj: float = 0.0
    page_reads: int = 0
    cache_hits: int = 0
    cache_misses: int = 0
    vector_cache_hits: int = 0
    bytes_fetched_useful: int = 0
    bytes_fetched_total: int = 0
    data_out_bytes: int = 0
    remap_events: list = field(default_factory=list)
    cumulative_days: int = 0
    daily_latency_us: list = field(default_factory=list)
    flush_events: int = 0
    inference_scale: float = 1.0
    sls_digest: tuple | None = None

    @property
    def page_utilization(self) -> float:
        if self.bytes_fetched_total == 0:
            return 0.0
        return self.bytes_fetched_useful / self.bytes_fetched_total

    def validate(self) -> None:
        if self.bytes_fetched_useful > self.bytes_fetched_total:
            raise AssertionError("useful bytes exceed total fetched bytes")
        if self.end_to_end_latency_us + 1e-9 < self.embedding_latency_us:
            raise AssertionError("end-to-end latency below embedding latency")

    def to_dict(self) -> dict:
        d = {
            "policy": self.policy,
            "nand": self.nand,
            "preset": self.preset,
            "seed": self.seed,
            "queries": self.queries,
            "embedding_latency_us": self.embedding_latency_us,
            "end_to_end_latency_us": self.end_to_end_latency_us,
            "read_energy_uj": self.read_energy_uj,
            "page_reads": self.page_reads,
            "cache_hits": self.cache_hits,
            "cache_misses": self.cache_misses,
            "vector_cache_hits": self.vector_cache_hits,
            "bytes_fetched_useful": self.bytes_fetched_useful,
            "bytes_fetched_total": self.bytes_fetched_total,
            "page_utilization": self.page_utilization,
            "cumulative_days": self.cumulative_days,
            "daily_latency_us": list(self.daily_latency_us),
            "flush_events": self.flush_events,
            "inference_scale": self.inference_scale,
            "remap_events": [
                {
                    "day": e.day,
                    "pages_moved": e.pages_moved,
                    "blocks_erased": e.blocks_erased,
                    "latency_us": e.latency_us,
                    "energy_uj": e.energy_uj,
                    "keys_inserted_hot": e.keys_inserted_hot,
                    "keys_appended_tail": e.keys_appended_tail,
                }
                for e in self.remap_events
            ],
        }
        if self.sls_digest is not None:
            d["sls_digest"] = list(self.sls_digest)
        return d


def payload64(gid: np.ndarray) -> np.ndarray:
    """Deterministic synthetic payload per key id (splitmix64)."""
    z = gid.astype(np.uint64) + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


# -- serving context -----------------------------------------------------------


class ServeContext:
    """Everything one policy needs to serve queries: the address snapshot,
    caches, and the cost constants."""

    def __init__(self, config: FlashConfig, preset: DlrmPreset, rows_per_table: int,
                 policy: PolicyConfig, addr_flat: np.ndarray,
                 reverse: np.ndarray | None = None):
        self.config = config
        self.preset = preset
        self.rows_per_table = rows_per_table
        self.policy = policy
        self.vector_bytes = preset.vector_bytes
        self.vpp = config.vectors_per_page(self.vector_bytes)
        self.addr_flat = addr_flat            # gid -> slot
        self.reverse = reverse                # slot -> gid (for the SLS check)
        self.pages_per_plane = config.pages_per_plane
        self.planes = config.planes_total
        self.slots_total = config.pages_total * self.vpp
        t = config.timing
        self.t_ca = fl.command_address_time(t)
        self.t_r = t.t_r
        self.t_rr = t.t_rr
        self.t_rc = t.t_rc
        self.t_do_vec = fl.data_out_time(t, self.vector_bytes)
        self.page_cache = (
            PageCache(policy.page_cache_bytes, config.page_size,
                      policy.page_cache_hit_us)
            if policy.page_cache_bytes > 0 and policy.kind is PolicyKind.RECFLASH
            else None
        )
        self.vector_cache = (
            VectorCache(policy.vector_cache_capacity)
            if policy.use_vector_cache else None
        )

    def swap_addresses(self) -> None:
        """Mark a remap deployment: flush the page cache (its entries index
        pre-remap physical pages)."""
        if self.page_cache is not None:
            self.page_cache.flush()


@dataclass
class BatchResult:
    latency_us: np.ndarray          # per query
    page_reads: int
    cache_hits: int
    cache_misses: int
    vector_cache_hits: int
    useful_bytes: int
    data_out_bytes: int
    sls: np.ndarray | None          # (n_queries, num_tables) uint64 sums


def _run_bounds(values: np.ndarray) -> np.ndarray:
    """Start indices of equal-value runs in a sorted array."""
    if len(values) == 0:
        return np.empty(0, dtype=np.int64)
    change = np.flatnonzero(values[1:] != values[:-1]) + 1
    return np.concatenate(([0], change))


def serve_batch(ctx: ServeContext, batch: QueryBatch,
                compute_sls: bool = False,
                policy_kind: PolicyKind | None = None,
                use_page_cache: bool = True) -> BatchResult:
    """Serve one batch of queries; returns per-query latencies and counters.

    policy_kind/use_page_cache let the timeline serve a deploy-then-swap
    window at a degraded policy (selective read-out, no cache) without
    building a second context.
    """
    kind = policy_kind or ctx.policy.kind
    nq = batch.n_queries
    L = ctx.preset.lookups_per_query
    T = ctx.preset.num_tables
    rows = ctx.rows_per_table

    # gid layout: query-major, table blocks inside a query
    gid = np.empty((nq, T * L), dtype=np.int64)
    for t, r in enumerate(batch.rows):
        gid[:, t * L:(t + 1) * L] = r + t * rows
    gid = gid.reshape(-1)
    slot = ctx.addr_flat[gid]
    if slot.size and int(slot.min()) < 0:
        bad = int(gid[np.argmin(slot)])
        raise KeyError(f"unmapped key (table {bad // rows}, row {bad % rows})")

    sls = None
    if compute_sls:
        if ctx.reverse is None:
            raise ValueError("SLS check requested but no reverse map was built")
        fetched = ctx.reverse[slot]
        sls = payload64(fetched).reshape(nq, T, L).sum(axis=2, dtype=np.uint64)

    vec_hits = 0
    if ctx.vector_cache is not None:
        keep = np.empty((nq, T * L), dtype=bool)
        for t, r in enumerate(batch.rows):
            hits = ctx.vector_cache.access_batch(t, r.reshape(-1))
            keep[:, t * L:(t + 1) * L] = ~hits.reshape(nq, L)
        keep = keep.reshape(-1)
        vec_hits = int(keep.size - keep.sum())
        qid_all = np.repeat(np.arange(nq, dtype=np.int64), T * L)[keep]
        slot = slot[keep]
    else:
        qid_all = np.repeat(np.arange(nq, dtype=np.int64), T * L)

    # distinct (query, slot) pairs, ascending slot within a query
    comp = qid_all * ctx.slots_total + slot
    comp.sort()
    if len(comp):
        keep_first = np.empty(len(comp), dtype=bool)
        keep_first[0] = True
        np.not_equal(comp[1:], comp[:-1], out=keep_first[1:])
        d_comp = comp[keep_first]
    else:
        d_comp = comp
    dq = d_comp // ctx.slots_total
    ds = d_comp % ctx.slots_total
    d_page = ds // ctx.vpp
    d_off = ds % ctx.vpp

    # group distinct slots into (query, page) runs
    page_comp = dq * ctx.config.pages_total + d_page
    starts = _run_bounds(page_comp)
    n_pages = len(starts)
    if n_pages:
        ends = np.concatenate((starts[1:], [len(page_comp)]))
        k_per_page = ends - starts
        page_q = dq[starts]
        page_id = d_page[starts]
        # offsets ascend within a run, so the run's last element is the
        # farthest vector (the sequential read-out bound)
        last_off = d_off[ends - 1]
    else:
        k_per_page = page_q = page_id = last_off = np.empty(0, dtype=np.int64)

    # page-wise cache: hits cost no flash work
    if ctx.page_cache is not None and use_page_cache and kind is PolicyKind.RECFLASH:
        hit_mask = ctx.page_cache.access_batch(page_id)
    else:
        hit_mask = np.zeros(n_pages, dtype=bool)
    hits_q = np.bincount(page_q[hit_mask], minlength=nq)

    miss = ~hit_mask
    m_q = page_q[miss]
    m_page = page_id[miss]
    m_k = k_per_page[miss]
    m_last = last_off[miss]

    # per-page data-out byte counts (exact integers; the per-query data-out
    # time is a single multiply over their sum, so no float accumulation
    # order can creep in)
    if kind is PolicyKind.SEQ_DATA_OUT:
        do_bytes = (m_last + 1) * ctx.vector_bytes
    else:
        do_bytes = m_k * ctx.vector_bytes

    # m_q is sorted, so per-query aggregation runs on contiguous segments
    n_miss_q = np.zeros(nq, dtype=np.int64)
    do_sum_q = np.zeros(nq, dtype=np.float64)
    rounds_q = np.zeros(nq, dtype=np.int64)
    if len(m_q):
        q_starts = _run_bounds(m_q)
        q_ends = np.concatenate((q_starts[1:], [len(m_q)]))
        q_ids = m_q[q_starts]
        n_miss = q_ends - q_starts
        n_miss_q[q_ids] = n_miss
        if kind is PolicyKind.SEQ_DATA_OUT:
            bytes_sum = np.add.reduceat(do_bytes, q_starts)
            do_sum_q[q_ids] = n_miss * ctx.t_rr + ctx.t_rc * bytes_sum
        else:
            k_sum = np.add.reduceat(m_k, q_starts)
            do_sum_q[q_ids] = k_sum * ctx.t_do_vec

        # rounds: the maximum number of missed pages on one plane, per query
        plane_comp = m_q * ctx.planes + m_page // ctx.pages_per_plane
        p_starts = _run_bounds(plane_comp)
        p_ends = np.concatenate((p_starts[1:], [len(plane_comp)]))
        run_len = p_ends - p_starts
        run_q = m_q[p_starts]
        g_starts = _run_bounds(run_q)
        rounds_q[run_q[g_starts]] = np.maximum.reduceat(run_len, g_starts)

    hit_us = ctx.page_cache.hit_latency_us if ctx.page_cache is not None else 0.0
    lat = (n_miss_q * ctx.t_ca + rounds_q * ctx.t_r) + do_sum_q + hits_q * hit_us

    return BatchResult(
        latency_us=lat,
        page_reads=int(miss.sum()),
        cache_hits=int(hit_mask.sum()),
        cache_misses=int(miss.sum()),
        vector_cache_hits=vec_hits,
        useful_bytes=int(m_k.sum()) * ctx.vector_bytes,
        data_out_bytes=int(do_bytes.sum()) if len(m_q) else 0,
        sls=sls,
    )


def serve_query(ctx: ServeContext, query: LookupQuery,
                compute_sls: bool = False) -> dict:
    """Serve a single query; returns its cost record."""
    rows = [np.array([r], dtype=np.int64) for r in query.rows]
    batch = QueryBatch(day=0, query_start=0, rows=rows)
    res = serve_batch(ctx, batch, compute_sls=compute_sls)
    out = {
        "latency_us": float(res.latency_us[0]),
        "page_reads": res.page_reads,
        "cache_hits": res.cache_hits,
        "useful_bytes": res.useful_bytes,
        "data_out_bytes": res.data_out_bytes,
    }
    if compute_sls:
        out["sls"] = res.sls[0]
    return out


# -- layout snapshot construction ------------------------------------------------


def frequency_order(counts_flat: np.ndarray) -> np.ndarray:
    """Key ids sorted by descending count, ties by key ascending.

    Packs (count_rank << 32 | gid) into one int64 so the sort runs at numpy
    integer-sort speed even for tens of millions of keys.
    """
    n = len(counts_flat)
    if n == 0:
        return np.empty(0, dtype=np.int64)
    cmax = int(counts_flat.max())
    if n >= (1 << 32) or cmax >= (1 << 30):
        order = np.lexsort((np.arange(n), -counts_flat))
        return order.astype(np.int64)
    packed = (cmax - counts_flat.astype(np.int64)) << np.int64(32)
    packed |= np.arange(n, dtype=np.int64)
    packed.sort()
    return packed & np.int64((1 << 32) - 1)


def build_static_context(config: FlashConfig, preset: DlrmPreset,
                         rows_per_table: int, policy: PolicyConfig,
                         counts_flat: np.ndarray, seed: int,
                         build_reverse: bool = False) -> ServeContext:
    """Address snapshot for a fully-placed table under the policy's layout.

    Keys are placed in frequency order (observed count descending, key
    ascending; unobserved keys count as zero) for the packed layouts, or by
    a seeded scatter for the baseline.
    """
    n = preset.num_tables * rows_per_table
    vb = preset.vector_bytes
    if policy.layout is LayoutKind.BASELINE:
        addr_flat = slots_for(LayoutKind.BASELINE, n, config, vb, seed=seed)
    else:
        order = frequency_order(counts_flat)
        slots = slots_for(policy.layout, n, config, vb)
        addr_flat = np.empty(n, dtype=np.int64)
        addr_flat[order] = slots
    reverse = None
    if build_reverse:
        reverse = np.full(config.pages_total * config.vectors_per_page(vb), -1,
                          dtype=np.int64)
        reverse[addr_flat] = np.arange(n, dtype=np.int64)
    return ServeContext(config, preset, rows_per_table, policy, addr_flat, reverse)


# -- trigger ----------------------------------------------------------------------


def check_trigger(window_counts, reference: mp.FrequencyTable,
                  policy: TriggerPolicy, day_index: int = 0) -> bool:
    """Decide whether online training fires at this day boundary.

    window_counts is the online window table: (key, count) pairs or a bare
    array of counts (only the counts matter for the threshold rule).
    """
    if policy.kind == "periodic":
        return (day_index + 1) % policy.period_days == 0
    if isinstance(window_counts, np.ndarray):
        values = window_counts
    else:
        values = np.array([c for _, c in window_counts], dtype=np.int64)
    if len(values) == 0:
        return False
    f_tau = reference.entries[reference.threshold_key].access_count
    above = int((values > f_tau).sum())
    return above > policy.portion * len(values)


# -- static experiment ----------------------------------------------------------------


def run_static(stream, config: FlashConfig, policy: PolicyConfig,
               seed: int = 0, mlp: MlpCostModel = DEFAULT_MLP,
               compute_sls: bool = False, profile_sample_rate: float = 1.0,
               chunk_queries: int = 4096, counts_flat: np.ndarray | None = None,
               nand_name: str = "") -> SimReport:
    """Profile the stream, place all keys under the policy's layout, then
    serve the stream and report totals. Pass counts_flat to reuse one
    profiling pass across several policies on the same trace."""
    preset = stream.preset
    rows = stream.rows_per_table
    if counts_flat is None:
        counts = profile_count_arrays(stream, sample_rate=profile_sample_rate,
                                      seed=seed)
        counts_flat = np.concatenate(counts)
    ctx = build_static_context(config, preset, rows, policy, counts_flat,
                               seed=seed, build_reverse=compute_sls)

    report = SimReport(policy=policy.name, nand=nand_name, preset=preset.name,
                       seed=seed)
    sls_parts: list | None = [] if compute_sls else None
    total_lat = 0.0
    for batch in stream.batches(chunk_queries):
        res = serve_batch(ctx, batch, compute_sls=compute_sls)
        total_lat += float(res.latency_us.sum())
        _accumulate(report, res)
        if compute_sls:
            sls_parts.append(res.sls)
    report.embedding_latency_us = total_lat
    report.bytes_fetched_total = report.page_reads * config.page_size
    report.read_energy_uj = fl.read_energy(
        config, report.page_reads, report.data_out_bytes, report.cache_hits
    )
    report.end_to_end_latency_us = end_to_end_latency(
        total_lat, preset, mlp, queries=report.queries
    )
    if compute_sls:
        all_sls = (np.concatenate(sls_parts) if sls_parts
                   else np.zeros((0, preset.num_tables), np.uint64))
        report.sls_digest = _sls_digest(all_sls)
        report._sls_full = all_sls  # kept for equality checks at small scale
    report.validate()
    return report


def _sls_digest(sls: np.ndarray) -> tuple:
    total = int(sls.sum(dtype=np.uint64))
    folded = int(np.bitwise_xor.reduce(sls.reshape(-1))) if sls.size else 0
    return (total, folded)


# -- online timeline ---------------------------------------------------------------------


def _window_to_trained(window: list[np.ndarray]) -> list:
    """Canonical trained list from per-table window count arrays: descending
    count, ties by (table, row) ascending."""
    parts = []
    rows = len(window[0]) if window else 0
    for t, counts in enumerate(window):
        nz = np.nonzero(counts)[0]
        if len(nz):
            parts.append((np.full(len(nz), t, dtype=np.int64), nz, counts[nz]))
    if not parts:
        return []
    tt = np.concatenate([p[0] for p in parts])
    rr = np.concatenate([p[1] for p in parts])
    cc = np.concatenate([p[2] for p in parts])
    gid = tt * rows + rr
    order = np.lexsort((gid, -cc))
    return [((int(tt[i]), int(rr[i])), int(cc[i])) for i in order.tolist()]


class _TimelineState:
    """Day-boundary bookkeeping for the adaptive run."""

    def __init__(self, report: SimReport, table, space, trigger, policy,
                 config, rows: int, inference_scale: float,
                 count_remap_overhead: bool = True):
        self.report = report
        self.table = table
        self.space = space
        self.trigger = trigger
        self.policy = policy
        self.config = config
        self.rows = rows
        self.scale = inference_scale
        self.count_remap_overhead = count_remap_overhead
        self.day_serving_us = 0.0   # scaled at day close
        self.day_overhead_us = 0.0  # never scaled
        self.degraded_us = 0.0
        self.pending_moves = None

    def close_day(self) -> None:
        total = self.day_serving_us * self.scale + self.day_overhead_us
        self.report.daily_latency_us.append(total)
        self.report.embedding_latency_us += total
        self.day_serving_us = 0.0
        self.day_overhead_us = 0.0

    def boundary(self, day: int, window: list[np.ndarray]) -> None:
        """Evaluate the trigger at the end of `day`; on fire, update the
        mapping, draw fresh addresses, and queue the deploy-then-swap."""
        if self.table is None:
            return
        trained = _window_to_trained(window)
        counts = np.array([c for _, c in trained], dtype=np.int64)
        if not check_trigger(counts, self.table, self.trigger, day_index=day):
            return
        summary = mp.adaptive_update(self.table, trained)
        plan = mp.reassign_addresses(
            self.table, summary, self.space,
            plane_rotate=self.policy.layout is LayoutKind.AF_PD,
        )
        lat, en = fl.remap_cost(self.config, plan.pages_moved, plan.blocks_erased)
        self.report.remap_events.append(RemapEvent(
            day=day, pages_moved=plan.pages_moved,
            blocks_erased=plan.blocks_erased, latency_us=lat, energy_uj=en,
            keys_inserted_hot=summary.keys_inserted_hot,
            keys_appended_tail=summary.keys_appended_tail,
        ))
        # the remap itself is explicit overhead; serving rides the old
        # mapping (degraded) until the remap window elapses. The degraded
        # budget is expressed in simulated time, so it shrinks by the
        # represented-load factor.
        if self.count_remap_overhead:
            self.day_overhead_us += lat
            self.degraded_us += lat / self.scale
        self.pending_moves = plan.moves
        for w in window:
            w[:] = 0

    def apply_swap(self, ctx: ServeContext) -> None:
        if self.pending_moves is None:
            return
        addr = ctx.addr_flat
        rev = ctx.reverse
        abandoned = []
        for key, old, new in self.pending_moves:
            g = key[0] * self.rows + key[1]
            prev_slot = int(addr[g])
            if old is None and 0 <= prev_slot != new:
                # a key new to the table leaves its initial-placement slot
                # behind; reclaim the space (no erase is billed, the blocks
                # drain off the critical path)
                abandoned.append(prev_slot)
            if rev is not None:
                if prev_slot >= 0 and rev[prev_slot] == g:
                    rev[prev_slot] = -1
                rev[new] = g
            addr[g] = new
        if abandoned and self.space is not None:
            self.space.release(np.array(abandoned, dtype=np.int64))
        ctx.swap_addresses()
        self.report.flush_events += 1
        self.pending_moves = None


def run_timeline(stream, config: FlashConfig, policy: PolicyConfig,
                 trigger: TriggerPolicy | None, seed: int = 0,
                 mlp: MlpCostModel = DEFAULT_MLP,
                 offline_queries: int | None = None,
                 inference_scale: float = 1.0,
                 compute_sls: bool = False,
                 chunk_queries: int = 4096,
                 count_remap_overhead: bool = True,
                 nand_name: str = "") -> SimReport:
    """Multi-day run with online-training triggers and adaptive remapping.

    Day boundaries come from the stream. At each boundary the day's access
    window is checked against the trigger; on a trigger the mapping table is
    updated (hot-region insertions plus direct cold appends), fresh addresses
    come from the free pool, and the remap cost lands as overhead at the start
    of the next day while serving degrades to selective read-out on the
    pre-remap mapping (the deploy-then-swap window). Training time itself is
    excluded from the cumulative figures. inference_scale linearly
    extrapolates each day's serving time and energy to a larger represented
    daily inference count; remap overhead is never scaled.
    count_remap_overhead=False is a sensitivity knob: remaps still happen and
    are reported, but cost nothing and deploy instantly.
    """
    preset = stream.preset
    rows = stream.rows_per_table
    adaptive = trigger is not None and policy.layout is not LayoutKind.BASELINE

    # offline profiling pass: a sibling stream models the sampled training set
    if offline_queries is None:
        offline_queries = max(1, stream.num_queries // max(1, stream.days))
    base_spec = getattr(stream, "spec", None)
    if base_spec is not None:
        off_stream = generate_trace(replace(
            base_spec, num_queries=offline_queries, days=1,
            seed=base_spec.seed + 0x0FF1,
        ))
        counts = profile_count_arrays(off_stream)
    else:
        counts = profile_count_arrays(stream)

    counts_flat = np.concatenate(counts)
    ctx = build_static_context(config, preset, rows, policy, counts_flat,
                               seed=seed, build_reverse=compute_sls)

    report = SimReport(policy=policy.name, nand=nand_name, preset=preset.name,
                       seed=seed, inference_scale=inference_scale)

    table = space = None
    if adaptive:
        observed = _window_to_trained(counts)
        if observed:
            table = mp.build_from_counts(observed, trigger.hot_fraction)
            addr = ctx.addr_flat
            for key, _ in observed:
                table.entries[key].address = int(addr[key[0] * rows + key[1]])
            space = DeviceSpace(config, preset.vector_bytes)
            space.occupy(ctx.addr_flat)

    st = _TimelineState(report, table, space, trigger, policy, config, rows,
                        inference_scale, count_remap_overhead)
    window = [np.zeros(rows, dtype=np.int64) for _ in range(preset.num_tables)]
    sls_parts: list | None = [] if compute_sls else None
    current_day = -1

    def serve(b: QueryBatch, degraded: bool) -> BatchResult:
        if degraded:
            res = serve_batch(ctx, b, compute_sls=compute_sls,
                              policy_kind=PolicyKind.SEL_DATA_OUT,
                              use_page_cache=False)
        else:
            res = serve_batch(ctx, b, compute_sls=compute_sls)
        _accumulate(report, res)
        if compute_sls:
            sls_parts.append(res.sls)
        return res

    for batch in stream.batches(chunk_queries):
        if batch.day != current_day:
            if current_day >= 0:
                st.boundary(current_day, window)
                st.close_day()
            current_day = batch.day

        for t, r in enumerate(batch.rows):
            window[t] += np.bincount(r.reshape(-1), minlength=rows)

        if st.degraded_us > 0.0:
            # degraded serving bypasses the cache, so probing is stateless
            probe = serve_batch(ctx, batch, compute_sls=compute_sls,
                                policy_kind=PolicyKind.SEL_DATA_OUT,
                                use_page_cache=False)
            cum = np.cumsum(probe.latency_us)
            if float(cum[-1]) <= st.degraded_us:
                # the whole chunk rides the old mapping
                st.degraded_us -= float(cum[-1])
                _accumulate(report, probe)
                if compute_sls:
                    sls_parts.append(probe.sls)
                st.day_serving_us += float(cum[-1])
                continue
            split = int(np.searchsorted(cum, st.degraded_us, side="left")) + 1
            split = min(split, batch.n_queries)
            head = QueryBatch(batch.day, batch.query_start,
                              [r[:split] for r in batch.rows])
            res = serve(head, degraded=True)
            st.day_serving_us += float(res.latency_us.sum())
            st.degraded_us = 0.0
            st.apply_swap(ctx)
            tail_rows = [r[split:] for r in batch.rows]
            if tail_rows[0].shape[0]:
                tail = QueryBatch(batch.day, batch.query_start + split, tail_rows)
                res = serve(tail, degraded=False)
                st.day_serving_us += float(res.latency_us.sum())
            continue

        st.apply_swap(ctx)  # no-op unless a remap finished exactly at a boundary
        res = serve(batch, degraded=False)
        st.day_serving_us += float(res.latency_us.sum())

    if current_day >= 0:
        st.boundary(current_day, window)
        st.close_day()

    report.cumulative_days = getattr(stream, "days", 0)
    report.bytes_fetched_total = report.page_reads * config.page_size
    serving_energy = fl.read_energy(
        config, report.page_reads, report.data_out_bytes, report.cache_hits
    )
    remap_energy = sum(e.energy_uj for e in report.remap_events)
    report.read_energy_uj = serving_energy * inference_scale + (
        remap_energy if count_remap_overhead else 0.0
    )
    report.end_to_end_latency_us = end_to_end_latency(
        report.embedding_latency_us, preset, mlp,
        queries=int(report.queries * inference_scale),
    )
    if compute_sls:
        all_sls = (np.concatenate(sls_parts) if sls_parts
                   else np.zeros((0, preset.num_tables), np.uint64))
        report.sls_digest = _sls_digest(all_sls)
        report._sls_full = all_sls
    report.validate()
    return report


def _accumulate(report: SimReport, res: BatchResult) -> None:
    report.queries += len(res.latency_us)
    report.page_reads += res.page_reads
    report.cache_hits += res.cache_hits
    report.cache_misses += res.cache_misses
    report.vector_cache_hits += res.vector_cache_hits
    report.bytes_fetched_useful += res.useful_bytes
    report.data_out_bytes += res.data_out_bytes
