"""Lookup-query streams: DLRM benchmark shapes, the locality-controlled
synthetic generator, trace file I/O and access-frequency profiling.

The synthetic generator targets a *unique access rate* (distinct keys divided
by total accesses, per table). Each access is either a draw from a hot pool
of h keys under a Zipf(1.0) rank distribution, or a "cold" access that walks
through the remaining rows so every cold access touches a fresh key until the
pool wraps. The cold rate and h are solved numerically so the expected
realized unique rate matches the target. The hot pool is kept small (it
carries only a few percent of the distinct budget but the bulk of the
accesses, mirroring the extreme per-vector frequency skew of production
recommendation traces); the solver shifts weight back onto the hot pool when
the cold pool cannot supply its share.

Locality presets: K0 (0.08) and K2 (0.66) anchor the range; the interior
presets K0.3/K0.8/K1 are interpolated working values, not measured ones.

Trace file format (one canonical text form)::

    rfql-v1 tables=<n> lookups=<m>
    #day 0
    3,5,...;7,9,...        # per query: tables ';'-separated, rows ','-separated
"""

from __future__ import annotations

import functools
import math
import os
from dataclasses import dataclass

import numpy as np

__all__ = [
    "DlrmPreset",
    "DLRM_PRESETS",
    "K_PRESETS",
    "TraceSpec",
    "LookupQuery",
    "QueryBatch",
    "SyntheticStream",
    "FileStream",
    "MaterializedStream",
    "materialize",
    "generate_trace",
    "save_trace",
    "load_trace",
    "profile_counts",
    "profile_count_arrays",
    "measured_unique_rate",
    "TraceFormatError",
]


@dataclass(frozen=True)
class DlrmPreset:
    """Benchmark shape: embedding-layer geometry plus the MLP stacks kept for
    the end-to-end latency model. Payload vectors are 4 bytes per dimension."""

    name: str
    num_tables: int
    embedding_dim: int
    lookups_per_query: int
    bottom_mlp: tuple
    top_mlp: tuple

    @property
    def vector_bytes(self) -> int:
        return 4 * self.embedding_dim

    @property
    def accesses_per_query(self) -> int:
        return self.num_tables * self.lookups_per_query


DLRM_PRESETS = {
    "rmc1": DlrmPreset("rmc1", 8, 32, 80, (128, 64, 32), (256, 64, 1)),
    "rmc2": DlrmPreset("rmc2", 32, 64, 120, (256, 128, 64), (128, 64, 1)),
    "rmc3": DlrmPreset("rmc3", 10, 32, 20, (2560, 1024, 256, 32), (512, 256, 1)),
}

# K0 and K2 are anchored unique-access rates; the three interior values are
# interpolated choices.
K_PRESETS = {
    "K0": 0.08,
    "K0.3": 0.15,
    "K0.8": 0.35,
    "K1": 0.45,
    "K2": 0.66,
}


class TraceFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TraceSpec:
    preset: DlrmPreset
    unique_rate: float
    num_queries: int
    rows_per_table: int = 1_000_000
    seed: int = 0
    days: int = 1
    # fraction of the hot pool rotated out per day: freshly-trending keys
    # displace old hot ones, which is what online retraining reacts to
    hot_drift_per_day: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 < self.unique_rate <= 1.0:
            raise ValueError(f"unique_rate must be in (0, 1], got {self.unique_rate}")
        if self.num_queries < 1:
            raise ValueError("num_queries must be >= 1")
        if self.days < 1 or self.days > self.num_queries:
            raise ValueError("days must be in [1, num_queries]")
        if not 0.0 <= self.hot_drift_per_day <= 1.0:
            raise ValueError("hot_drift_per_day must be in [0, 1]")
        total = self.num_queries * self.preset.lookups_per_query
        max_rate = min(1.0, self.rows_per_table / total)
        if self.unique_rate > max_rate + 1e-12:
            raise ValueError(
                f"unique_rate {self.unique_rate} infeasible for "
                f"{self.num_queries} queries x {self.preset.lookups_per_query} "
                f"lookups over {self.rows_per_table} rows; feasible range is "
                f"(0, {max_rate:.6g}]"
            )

    @property
    def accesses_per_table(self) -> int:
        return self.num_queries * self.preset.lookups_per_query


@dataclass
class LookupQuery:
    """One inference's accesses: rows[t] lists the row ids looked up in
    table t."""

    rows: list

    def keys(self):
        for t, rr in enumerate(self.rows):
            for r in rr:
                yield (t, int(r))


@dataclass
class QueryBatch:
    """A contiguous run of queries from one day. rows[t] has shape
    (n_queries, lookups_per_query)."""

    day: int
    query_start: int
    rows: list

    @property
    def n_queries(self) -> int:
        return self.rows[0].shape[0]

    def queries(self):
        for i in range(self.n_queries):
            yield LookupQuery([r[i].tolist() for r in self.rows])


# -- hot-pool solver ----------------------------------------------------------


def _expected_zipf_distinct(h: int, n_draws: int) -> float:
    if h < 1 or n_draws <= 0:
        return 0.0
    ranks = np.arange(1, h + 1, dtype=np.float64)
    p = (1.0 / ranks) / np.sum(1.0 / ranks)
    with np.errstate(divide="ignore"):  # p == 1 for a one-key pool
        return float(np.sum(-np.expm1(n_draws * np.log1p(-p))))


# Share of the rows forming the hot pool: production recommendation traces
# concentrate the overwhelming access mass on a few tenths of a percent of
# the vectors, so roughly one row per thousand is "hot".
_HOT_ROWS_FRACTION = 0.001


@functools.lru_cache(maxsize=64)
def _solve_hot_pool(accesses: int, rows: int, target_distinct: float) -> tuple[int, int]:
    """Pick (hot_pool_size, cold_access_count) so expected distinct keys hit
    the target.

    The hot pool is a fixed sliver of the row space and absorbs the bulk of
    the accesses; the cold walker is dialed to supply the remaining distinct
    budget. When the hot pool alone would overshoot the budget it shrinks,
    and when the cold pool cannot hold its share the hot pool grows instead.
    """
    h = max(1, min(int(round(_HOT_ROWS_FRACTION * rows)), rows - 1))
    d_cold = 0
    for _ in range(8):  # fixed point: hot coverage depends on the cold rate
        e_hot = _expected_zipf_distinct(h, accesses - d_cold)
        nxt = max(0, min(int(round(target_distinct - e_hot)), accesses - 1))
        if nxt == d_cold:
            break
        d_cold = nxt

    if d_cold == 0 and _expected_zipf_distinct(h, accesses) > target_distinct:
        # even with no cold injection the pool overshoots: shrink it
        lo, hi = 1, h
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if _expected_zipf_distinct(mid, accesses) <= target_distinct:
                lo = mid
            else:
                hi = mid - 1
        return lo, 0

    if d_cold <= rows - h:
        return h, d_cold

    # near-saturated targets: the cold pool cannot supply its share, so push
    # distinct mass back onto a larger hot pool
    for hot_share in (0.05, 0.12, 0.25, 0.5, 0.75, 0.9):
        d_cold = int(round((1.0 - hot_share) * target_distinct))
        d_cold = min(d_cold, accesses - 1)
        n_hot = accesses - d_cold
        d_hot = target_distinct - d_cold
        h_max = rows - d_cold
        if n_hot <= 0 or h_max < 1 or d_hot < 1:
            continue
        if _expected_zipf_distinct(h_max, n_hot) < d_hot:
            continue
        lo, hi = 1, h_max
        while lo < hi:
            mid = (lo + hi) // 2
            if _expected_zipf_distinct(mid, n_hot) >= d_hot:
                hi = mid
            else:
                lo = mid + 1
        return lo, d_cold
    # cold-only fallback: all uniqueness supplied by the cold walker
    n_cold = min(int(round(target_distinct)), accesses, rows - 1)
    return 1, n_cold


@functools.lru_cache(maxsize=16)
def _zipf_cdf(h: int) -> np.ndarray:
    weights = 1.0 / np.arange(1, h + 1, dtype=np.float64)
    cdf = np.cumsum(weights)
    cdf /= cdf[-1]
    cdf.setflags(write=False)  # shared across tables
    return cdf


# -- synthetic generator -------------------------------------------------------


def _day_lengths(num_queries: int, days: int) -> list[int]:
    base, rem = divmod(num_queries, days)
    return [base + (1 if d < rem else 0) for d in range(days)]


class _TableGen:
    """Per-table key source. Uses separate PCG64 streams for the cold/hot
    decision and for the hot rank draws so the output is independent of how
    the stream is chunked."""

    def __init__(self, spec: TraceSpec, table_id: int):
        rows = spec.rows_per_table
        self.rows = rows
        accesses = spec.accesses_per_table
        if spec.unique_rate >= 1.0:
            self.h, n_cold = 0, accesses
        else:
            self.h, n_cold = _solve_hot_pool(
                accesses, rows, spec.unique_rate * accesses
            )
        self.cold_frac = n_cold / accesses
        self.pool = rows - self.h

        ss = np.random.SeedSequence((spec.seed, table_id))
        mask_seed, hot_seed, param_seed = ss.spawn(3)
        self._mask_rng = np.random.Generator(np.random.PCG64(mask_seed))
        self._hot_rng = np.random.Generator(np.random.PCG64(hot_seed))
        prng = np.random.Generator(np.random.PCG64(param_seed))
        a = int(prng.integers(1, rows)) if rows > 1 else 1
        while math.gcd(a, rows) != 1:
            a = a % rows + 1
        self._a = a
        self._b = int(prng.integers(0, rows))
        self._cold_cursor = 0
        self._drift = int(round(spec.hot_drift_per_day * self.h))

        self._cdf = _zipf_cdf(self.h) if self.h > 0 else None

    def _scramble(self, idx: np.ndarray) -> np.ndarray:
        return (self._a * idx + self._b) % self.rows

    def draw(self, n: int, day: int = 0) -> np.ndarray:
        cold = self._mask_rng.random(n) < self.cold_frac
        n_cold = int(cold.sum())
        out = np.empty(n, dtype=np.int64)
        if n_cold:
            walk = (self._cold_cursor + np.arange(n_cold, dtype=np.int64)) % self.pool
            self._cold_cursor = (self._cold_cursor + n_cold) % self.pool
            out[cold] = self._scramble(self.h + walk)
        n_hot = n - n_cold
        if n_hot:
            u = self._hot_rng.random(n_hot)
            ranks = np.searchsorted(self._cdf, u, side="right")
            # drift slides the hot window backward through the row space day
            # by day (away from the cold walker's path), so genuinely unseen
            # keys keep emerging at hot ranks
            out[~cold] = self._scramble((ranks - day * self._drift) % self.rows)
        return out


class SyntheticStream:
    """Deterministic locality-controlled query stream."""

    def __init__(self, spec: TraceSpec):
        self.spec = spec
        self.preset = spec.preset
        self.rows_per_table = spec.rows_per_table
        self.num_queries = spec.num_queries
        self.days = spec.days

    def batches(self, chunk_queries: int = 4096):
        spec = self.spec
        gens = [_TableGen(spec, t) for t in range(self.preset.num_tables)]
        L = self.preset.lookups_per_query
        qid = 0
        for day, day_len in enumerate(_day_lengths(self.num_queries, self.days)):
            done = 0
            while done < day_len:
                nq = min(chunk_queries, day_len - done)
                rows = [g.draw(nq * L, day=day).reshape(nq, L) for g in gens]
                yield QueryBatch(day=day, query_start=qid, rows=rows)
                done += nq
                qid += nq

    def queries(self):
        for batch in self.batches():
            yield from batch.queries()


def generate_trace(spec: TraceSpec) -> SyntheticStream:
    return SyntheticStream(spec)


class MaterializedStream:
    """A stream captured to on-disk numpy chunks so repeated passes (profile,
    then one serve per policy) pay the generation cost once."""

    def __init__(self, source, directory, chunk_queries: int = 8192):
        self.preset = source.preset
        self.rows_per_table = source.rows_per_table
        self.num_queries = source.num_queries
        self.days = source.days
        self.spec = getattr(source, "spec", None)
        self._dir = os.fspath(directory)
        os.makedirs(self._dir, exist_ok=True)
        self._chunks = []  # (path, day, query_start)
        for i, batch in enumerate(source.batches(chunk_queries)):
            path = os.path.join(self._dir, f"chunk{i:06d}.npy")
            np.save(path, np.stack(batch.rows).astype(np.int32))
            self._chunks.append((path, batch.day, batch.query_start))

    def batches(self, chunk_queries: int = 8192):
        for path, day, q0 in self._chunks:
            data = np.load(path)
            yield QueryBatch(day=day, query_start=q0,
                             rows=[data[t].astype(np.int64) for t in range(len(data))])

    def queries(self):
        for batch in self.batches():
            yield from batch.queries()


def materialize(stream, directory, chunk_queries: int = 8192) -> MaterializedStream:
    return MaterializedStream(stream, directory, chunk_queries)


# -- trace file I/O -------------------------------------------------------------


def save_trace(stream, path) -> None:
    preset = stream.preset
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"rfql-v1 tables={preset.num_tables} lookups={preset.lookups_per_query}\n")
        last_day = None
        for batch in stream.batches():
            if batch.day != last_day:
                fh.write(f"#day {batch.day}\n")
                last_day = batch.day
            for i in range(batch.n_queries):
                fh.write(";".join(",".join(map(str, r[i])) for r in batch.rows))
                fh.write("\n")


class FileStream:
    """Materialized trace loaded from the rfql-v1 text format."""

    def __init__(self, preset: DlrmPreset, rows, day_ids, rows_per_table: int | None):
        self.preset = preset
        self._rows = rows          # list per table of (n_queries, L) arrays
        self._day_ids = day_ids    # (n_queries,) array
        self.rows_per_table = rows_per_table
        self.num_queries = len(day_ids)
        self.days = int(day_ids.max()) + 1 if len(day_ids) else 0

    def batches(self, chunk_queries: int = 4096):
        n = self.num_queries
        start = 0
        while start < n:
            day = int(self._day_ids[start])
            end = start
            while end < n and self._day_ids[end] == day and end - start < chunk_queries:
                end += 1
            yield QueryBatch(
                day=day,
                query_start=start,
                rows=[r[start:end] for r in self._rows],
            )
            start = end

    def queries(self):
        for batch in self.batches():
            yield from batch.queries()


def load_trace(path, preset: DlrmPreset, rows_per_table: int | None = None,
               sample_rate: float = 1.0, seed: int = 0) -> FileStream:
    """Parse a trace file, validating its shape against the preset. The
    optional sample_rate keeps each query with that probability (the
    downsampling hook for large real-world traces)."""
    if not 0.0 < sample_rate <= 1.0:
        raise ValueError("sample_rate must be in (0, 1]")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0xD5))))
    rows: list[list[list[int]]] = [[] for _ in range(preset.num_tables)]
    day_ids: list[int] = []
    day = 0
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header:
            # a zero-length file is an empty stream
            empty = [np.empty((0, preset.lookups_per_query), dtype=np.int64)
                     for _ in range(preset.num_tables)]
            return FileStream(preset, empty, np.empty(0, dtype=np.int64),
                              rows_per_table or 0)
        parts = header.split()
        if (
            len(parts) != 3
            or parts[0] != "rfql-v1"
            or not parts[1].startswith("tables=")
            or not parts[2].startswith("lookups=")
        ):
            raise TraceFormatError(f"line 1: bad header {header!r}")
        tables = int(parts[1].split("=", 1)[1])
        lookups = int(parts[2].split("=", 1)[1])
        if tables != preset.num_tables or lookups != preset.lookups_per_query:
            raise TraceFormatError(
                f"line 1: trace shape {tables}x{lookups} does not match preset "
                f"{preset.name} ({preset.num_tables}x{preset.lookups_per_query})"
            )
        for lineno, raw in enumerate(fh, start=2):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                if line.startswith("#day"):
                    try:
                        day = int(line.split()[1])
                    except (IndexError, ValueError):
                        raise TraceFormatError(f"line {lineno}: bad day directive {line!r}")
                continue
            groups = line.split(";")
            if len(groups) != preset.num_tables:
                raise TraceFormatError(
                    f"line {lineno}: {len(groups)} tables, expected {preset.num_tables}"
                )
            if sample_rate < 1.0 and rng.random() >= sample_rate:
                continue
            for t, group in enumerate(groups):
                try:
                    ids = [int(x) for x in group.split(",")]
                except ValueError:
                    raise TraceFormatError(f"line {lineno}: non-integer row id in {group!r}")
                if len(ids) != preset.lookups_per_query:
                    raise TraceFormatError(
                        f"line {lineno}: table {t} has {len(ids)} lookups, "
                        f"expected {preset.lookups_per_query}"
                    )
                if rows_per_table is not None:
                    for r in ids:
                        if not 0 <= r < rows_per_table:
                            raise TraceFormatError(
                                f"line {lineno}: row id {r} outside "
                                f"[0, {rows_per_table})"
                            )
                rows[t].append(ids)
            day_ids.append(day)
    arr_rows = [
        np.array(r, dtype=np.int64).reshape(len(day_ids), preset.lookups_per_query)
        for r in rows
    ]
    if rows_per_table is None:
        # derive a row bound so downstream profiling has an index space
        rows_per_table = 0
        for r in arr_rows:
            if r.size:
                rows_per_table = max(rows_per_table, int(r.max()) + 1)
    return FileStream(preset, arr_rows, np.array(day_ids, dtype=np.int64), rows_per_table)


# -- profiling -------------------------------------------------------------------


def profile_count_arrays(stream, sample_rate: float = 1.0, seed: int = 0,
                         rows_per_table: int | None = None) -> list[np.ndarray]:
    """Exact access counts as one array per table (index = row id)."""
    if not 0.0 < sample_rate <= 1.0:
        raise ValueError("sample_rate must be in (0, 1]")
    rows = rows_per_table or stream.rows_per_table
    if rows is None:
        raise ValueError("rows_per_table unknown; pass it explicitly")
    counts = [np.zeros(rows, dtype=np.int64) for _ in range(stream.preset.num_tables)]
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0x5A))))
    for batch in stream.batches():
        keep = rng.random(batch.n_queries) < sample_rate if sample_rate < 1.0 else None
        for t, r in enumerate(batch.rows):
            picked = r if keep is None else r[keep]
            if picked.size:
                counts[t] += np.bincount(picked.ravel(), minlength=rows)
    return counts


def profile_counts(stream, sample_rate: float = 1.0, seed: int = 0) -> list:
    """Exact multiset counts as a list of ((table_id, row_id), count), key
    ascending. Sampling keeps whole queries, matching the sampled-training-set
    profiling mode."""
    arrays = profile_count_arrays(stream, sample_rate=sample_rate, seed=seed)
    out = []
    for t, counts in enumerate(arrays):
        for r in np.nonzero(counts)[0].tolist():
            out.append(((t, r), int(counts[r])))
    return out


def measured_unique_rate(stream) -> list[float]:
    """Realized distinct/total per table (the self-validating locality
    metric)."""
    arrays = profile_count_arrays(stream)
    out = []
    for counts in arrays:
        total = int(counts.sum())
        distinct = int(np.count_nonzero(counts))
        out.append(distinct / total if total else 0.0)
    return out
