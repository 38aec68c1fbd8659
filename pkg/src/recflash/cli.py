"""Experiment driver: parses sweep configs, runs policy/device/trace grids,
and writes CSV + JSON reports.

A sweep config is the same key/value text format used everywhere else::

    presets = rmc2            # rmc1 | rmc2 | rmc3
    nands = tlc               # slc | tlc | qlc
    policies = rmssd,recflash # recssd | rmssd | recflash
    gen = K0,K2               # locality presets or raw unique rates
    queries = 10000
    rows_per_table = 1000000
    seeds = 0,1
    mode = static             # static | timeline
    trigger = none            # none | daily | periodic:N | threshold:X[:P]
    days = 1
    out = results

One CSV row is written per (preset, nand, policy, trace, seed) cell, plus
normalized-to-baseline columns (the first listed policy, or recssd when
present, is the reference). Re-running an identical spec rewrites the output
files byte-identically. Exit codes: 0 all cells ok, 2 some cells failed,
1 bad spec.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import hashlib
import json
import os
import sys
from dataclasses import dataclass

from . import flash
from .engine import (
    DEFAULT_MLP,
    POLICIES,
    TriggerPolicy,
    run_static,
    run_timeline,
)
from .workload import DLRM_PRESETS, K_PRESETS, TraceSpec, generate_trace, load_trace

__all__ = ["ExperimentSpec", "SpecError", "parse_spec_file", "validate_config",
           "run_sweep", "main"]


class SpecError(ValueError):
    pass


_SPEC_DEFAULTS = {
    "presets": "rmc2",
    "nands": "tlc",
    "policies": "recssd,rmssd,recflash",
    "gen": "K0",
    "trace": "",
    "queries": "10000",
    "rows_per_table": "1000000",
    "days": "1",
    "hot_drift_per_day": "0.0",
    "seeds": "",
    "mode": "static",
    "trigger": "none",
    "inference_scale": "1.0",
    "offline_queries": "",
    "sls": "false",
    "sample": "1.0",
    "profile_sample_rate": "1.0",
    "chunk_queries": "4096",
    "jobs": "1",
    "out": "results",
}


@dataclass(frozen=True)
class ExperimentSpec:
    presets: tuple
    nands: tuple
    policies: tuple
    traces: tuple          # ("gen", name, unique_rate) or ("file", path, None)
    queries: int
    rows_per_table: int
    days: int
    hot_drift_per_day: float
    seeds: tuple
    mode: str
    trigger: TriggerPolicy | None
    inference_scale: float
    offline_queries: int | None
    sls: bool
    sample: float          # downsampling rate for file-backed traces
    profile_sample_rate: float
    chunk_queries: int
    jobs: int
    out: str

    def cells(self):
        for preset in self.presets:
            for nand in self.nands:
                for trace in self.traces:
                    for seed in self.seeds:
                        for policy in self.policies:
                            yield _Cell(self, preset, nand, policy, trace, seed)


@dataclass(frozen=True)
class _Cell:
    spec: ExperimentSpec
    preset: str
    nand: str
    policy: str
    trace: tuple
    seed: int

    @property
    def trace_name(self) -> str:
        kind, name, rate = self.trace
        if kind == "file":
            return os.path.basename(name)
        return name

    def key(self) -> tuple:
        return (self.preset, self.nand, self.trace_name, self.seed, self.policy)

    def resolved(self) -> dict:
        return {
            "preset": self.preset,
            "nand": self.nand,
            "policy": self.policy,
            "trace": list(self.trace),
            "seed": self.seed,
            "queries": self.spec.queries,
            "rows_per_table": self.spec.rows_per_table,
            "days": self.spec.days,
            "hot_drift_per_day": self.spec.hot_drift_per_day,
            "mode": self.spec.mode,
            "trigger": None if self.spec.trigger is None else [
                self.spec.trigger.kind, self.spec.trigger.hot_fraction,
                self.spec.trigger.portion, self.spec.trigger.period_days,
            ],
            "inference_scale": self.spec.inference_scale,
            "offline_queries": self.spec.offline_queries,
            "sls": self.spec.sls,
            "sample": self.spec.sample,
            "profile_sample_rate": self.spec.profile_sample_rate,
            "chunk_queries": self.spec.chunk_queries,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _parse_trigger(text: str) -> TriggerPolicy | None:
    t = text.strip().lower()
    if t in ("", "none"):
        return None
    if t == "daily":
        return TriggerPolicy(kind="periodic", period_days=1)
    if t.startswith("periodic"):
        parts = t.split(":")
        period = int(parts[1]) if len(parts) > 1 else 1
        return TriggerPolicy(kind="periodic", period_days=period)
    if t.startswith("threshold"):
        parts = t.split(":")
        x = float(parts[1]) if len(parts) > 1 else 0.10
        p = float(parts[2]) if len(parts) > 2 else 0.001
        return TriggerPolicy(kind="threshold", hot_fraction=x, portion=p)
    raise SpecError(f"unknown trigger {text!r} (none | daily | periodic:N | "
                    f"threshold:X[:P])")


def _parse_traces(gen: str, trace: str) -> tuple:
    out = []
    for name in filter(None, (s.strip() for s in gen.split(","))):
        if name in K_PRESETS:
            out.append(("gen", name, K_PRESETS[name]))
        else:
            try:
                rate = float(name)
            except ValueError:
                raise SpecError(
                    f"unknown locality preset {name!r}; presets: "
                    f"{sorted(K_PRESETS)} or a unique rate in (0, 1]"
                )
            out.append(("gen", f"u{rate:g}", rate))
    for path in filter(None, (s.strip() for s in trace.split(","))):
        out.append(("file", path, None))
    if not out:
        raise SpecError("no traces: set gen= or trace=")
    return tuple(out)


def _resolve(kv: dict) -> ExperimentSpec:
    unknown = set(kv) - set(_SPEC_DEFAULTS)
    if unknown:
        raise SpecError(f"unknown config keys: {sorted(unknown)}; valid keys: "
                        f"{sorted(_SPEC_DEFAULTS)}")
    merged = dict(_SPEC_DEFAULTS)
    merged.update(kv)

    presets = tuple(s.strip().lower() for s in merged["presets"].split(",") if s.strip())
    for p in presets:
        if p not in DLRM_PRESETS:
            raise SpecError(f"unknown DLRM preset {p!r}; valid: {sorted(DLRM_PRESETS)}")
    nands = tuple(s.strip().lower() for s in merged["nands"].split(",") if s.strip())
    for n in nands:
        if n not in flash.PRESET_NAMES:
            raise SpecError(f"unknown nand {n!r}; valid: {list(flash.PRESET_NAMES)}")
    policies = tuple(s.strip().lower() for s in merged["policies"].split(",") if s.strip())
    for p in policies:
        if p not in POLICIES:
            raise SpecError(f"unknown policy {p!r}; valid: {sorted(POLICIES)}")
    if not presets or not nands or not policies:
        raise SpecError("presets, nands and policies must each name at least one value")

    seeds_text = merged["seeds"].strip()
    if not seeds_text:
        seeds_text = os.environ.get("RECFLASH_SEED", "0")
    seeds = tuple(int(s) for s in seeds_text.split(",") if s.strip())

    mode = merged["mode"].strip().lower()
    if mode not in ("static", "timeline"):
        raise SpecError(f"mode must be static or timeline, got {mode!r}")

    offline = merged["offline_queries"].strip()
    return ExperimentSpec(
        presets=presets,
        nands=nands,
        policies=policies,
        traces=_parse_traces(merged["gen"], merged["trace"]),
        queries=int(merged["queries"]),
        rows_per_table=int(merged["rows_per_table"]),
        days=int(merged["days"]),
        hot_drift_per_day=float(merged["hot_drift_per_day"]),
        seeds=seeds,
        mode=mode,
        trigger=_parse_trigger(merged["trigger"]),
        inference_scale=float(merged["inference_scale"]),
        offline_queries=int(offline) if offline else None,
        sls=merged["sls"].strip().lower() in ("1", "true", "yes", "on"),
        sample=float(merged["sample"]),
        profile_sample_rate=float(merged["profile_sample_rate"]),
        chunk_queries=int(merged["chunk_queries"]),
        jobs=int(merged["jobs"]),
        out=merged["out"],
    )


def parse_spec_file(path) -> dict:
    kv = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SpecError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in _SPEC_DEFAULTS:
                raise SpecError(f"{path}:{lineno}: unknown key {key!r}; valid keys: "
                                f"{sorted(_SPEC_DEFAULTS)}")
            kv[key] = value.strip()
    return kv


_ECHO_FIELDS = (
    "presets", "nands", "policies", "traces", "queries", "rows_per_table",
    "days", "hot_drift_per_day", "seeds", "mode", "trigger", "inference_scale",
    "offline_queries", "sls", "sample", "profile_sample_rate", "chunk_queries",
    "jobs", "out",
)


def validate_config(path) -> ExperimentSpec:
    """Parse + resolve a sweep config, echoing the resolved values."""
    spec = _resolve(parse_spec_file(path))
    print(f"config {path} ok:")
    for name in _ECHO_FIELDS:
        print(f"  {name} = {getattr(spec, name)!r}")
    print(f"  cells = {sum(1 for _ in spec.cells())}")
    return spec


# -- cell execution -------------------------------------------------------------


def _build_stream(cell: _Cell):
    kind, name, rate = cell.trace
    preset = DLRM_PRESETS[cell.preset]
    if kind == "file":
        return load_trace(name, preset, rows_per_table=cell.spec.rows_per_table,
                          sample_rate=cell.spec.sample, seed=cell.seed)
    spec = TraceSpec(
        preset=preset,
        unique_rate=rate,
        num_queries=cell.spec.queries,
        rows_per_table=cell.spec.rows_per_table,
        seed=cell.seed,
        days=cell.spec.days,
        hot_drift_per_day=cell.spec.hot_drift_per_day,
    )
    return generate_trace(spec)


def _run_cell(cell: _Cell) -> dict:
    spec = cell.spec
    stream = _build_stream(cell)
    preset = DLRM_PRESETS[cell.preset]
    n_vectors = preset.num_tables * spec.rows_per_table
    config = flash.preset(cell.nand).sized_for(n_vectors, preset.vector_bytes)
    policy = POLICIES[cell.policy]
    if spec.mode == "timeline":
        report = run_timeline(
            stream, config, policy, spec.trigger, seed=cell.seed,
            mlp=DEFAULT_MLP, offline_queries=spec.offline_queries,
            inference_scale=spec.inference_scale, compute_sls=spec.sls,
            chunk_queries=spec.chunk_queries, nand_name=cell.nand,
        )
    else:
        report = run_static(
            stream, config, policy, seed=cell.seed, mlp=DEFAULT_MLP,
            compute_sls=spec.sls,
            profile_sample_rate=spec.profile_sample_rate,
            chunk_queries=spec.chunk_queries, nand_name=cell.nand,
        )
    d = report.to_dict()
    d["trace"] = cell.trace_name
    d["config_hash"] = cell.config_hash()
    return d


def _cell_worker(cell: _Cell) -> tuple:
    try:
        return ("ok", _run_cell(cell))
    except Exception as exc:  # cell failures don't kill the sweep
        return ("error", f"{type(exc).__name__}: {exc}")


_CSV_COLUMNS = [
    "preset", "nand", "policy", "trace", "seed", "status", "queries",
    "embedding_latency_us", "end_to_end_latency_us", "read_energy_uj",
    "page_reads", "cache_hits", "cache_misses", "vector_cache_hits",
    "bytes_fetched_useful", "bytes_fetched_total", "page_utilization",
    "remap_event_count", "remap_overhead_us", "cumulative_days",
    "norm_embedding_latency", "norm_end_to_end_latency", "norm_read_energy",
    "config_hash", "error",
]


def run_sweep(spec: ExperimentSpec) -> int:
    """Run every cell, write results.csv and reports.json under spec.out.
    Returns the process exit code."""
    os.makedirs(spec.out, exist_ok=True)
    cells = list(spec.cells())
    if spec.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=spec.jobs) as pool:
            outcomes = list(pool.map(_cell_worker, cells))
    else:
        outcomes = [_cell_worker(c) for c in cells]

    rows = []
    reports = {}
    failures = 0
    for cell, (status, payload) in zip(cells, outcomes):
        row = {
            "preset": cell.preset, "nand": cell.nand, "policy": cell.policy,
            "trace": cell.trace_name, "seed": cell.seed, "status": status,
            "config_hash": cell.config_hash(), "error": "",
        }
        if status == "ok":
            row.update({
                "queries": payload["queries"],
                "embedding_latency_us": payload["embedding_latency_us"],
                "end_to_end_latency_us": payload["end_to_end_latency_us"],
                "read_energy_uj": payload["read_energy_uj"],
                "page_reads": payload["page_reads"],
                "cache_hits": payload["cache_hits"],
                "cache_misses": payload["cache_misses"],
                "vector_cache_hits": payload["vector_cache_hits"],
                "bytes_fetched_useful": payload["bytes_fetched_useful"],
                "bytes_fetched_total": payload["bytes_fetched_total"],
                "page_utilization": payload["page_utilization"],
                "remap_event_count": len(payload["remap_events"]),
                "remap_overhead_us": sum(e["latency_us"]
                                         for e in payload["remap_events"]),
                "cumulative_days": payload["cumulative_days"],
            })
            reports["|".join(map(str, cell.key()))] = payload
        else:
            failures += 1
            row["error"] = payload
        rows.append(row)

    # normalize against the reference policy within each
    # (preset, nand, trace, seed) group
    ref_policy = "recssd" if "recssd" in spec.policies else spec.policies[0]
    ref_values = {}
    for cell, row in zip(cells, rows):
        if cell.policy == ref_policy and row["status"] == "ok":
            g = (cell.preset, cell.nand, cell.trace_name, cell.seed)
            ref_values[g] = row
    for cell, row in zip(cells, rows):
        g = (cell.preset, cell.nand, cell.trace_name, cell.seed)
        ref = ref_values.get(g)
        if row["status"] == "ok" and ref is not None:
            for norm, col in (
                ("norm_embedding_latency", "embedding_latency_us"),
                ("norm_end_to_end_latency", "end_to_end_latency_us"),
                ("norm_read_energy", "read_energy_uj"),
            ):
                row[norm] = row[col] / ref[col] if ref[col] else ""

    csv_path = os.path.join(spec.out, "results.csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=_CSV_COLUMNS, restval="")
        w.writeheader()
        for row in rows:
            w.writerow(row)
    json_path = os.path.join(spec.out, "reports.json")
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(reports, fh, sort_keys=True, indent=1)
        fh.write("\n")

    print(f"wrote {len(rows)} rows -> {csv_path}")
    if failures:
        print(f"{failures} of {len(rows)} cells failed", file=sys.stderr)
        return 2
    return 0


# -- argparse ----------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="recflash",
        description="NAND in-storage embedding-lookup simulator; runs "
                    "policy/device/trace sweeps and writes CSV/JSON reports.",
    )
    sub = ap.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="run a sweep")
    run.add_argument("--config", help="sweep config file (key = value lines)")
    run.add_argument("--out", help="output directory")
    run.add_argument("--seeds", help="comma-separated seeds (falls back to "
                                     "RECFLASH_SEED, then 0)")
    run.add_argument("--jobs", type=int, help="worker processes")
    run.add_argument("--policy", help="comma list: recssd,rmssd,recflash")
    run.add_argument("--nand", help="comma list: slc,tlc,qlc")
    run.add_argument("--preset", help="comma list: rmc1,rmc2,rmc3")
    run.add_argument("--gen", help="synthetic locality presets (K0..K2) or rates")
    run.add_argument("--trace", help="comma list of trace file paths")
    run.add_argument("--trigger", help="none | daily | periodic:N | threshold:X[:P]")
    run.add_argument("--queries", type=int, help="queries per generated trace")
    run.add_argument("--rows-per-table", type=int, dest="rows_per_table")
    run.add_argument("--days", type=int, help="day segments in generated traces")
    run.add_argument("--mode", choices=["static", "timeline"])
    run.add_argument("--sample", type=float,
                     help="keep each file-trace query with this probability")
    run.add_argument("--sls", action="store_true", default=None,
                     help="track sparse-length-sum digests")

    val = sub.add_parser("validate", help="check a sweep config and echo the "
                                          "resolved values")
    val.add_argument("--config", required=True)
    return ap


_FLAG_TO_KEY = {
    "out": "out", "seeds": "seeds", "jobs": "jobs", "policy": "policies",
    "nand": "nands", "preset": "presets", "gen": "gen", "trace": "trace",
    "trigger": "trigger", "queries": "queries", "rows_per_table": "rows_per_table",
    "days": "days", "mode": "mode", "sample": "sample", "sls": "sls",
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.cmd == "validate":
            validate_config(args.config)
            return 0
        kv = parse_spec_file(args.config) if args.config else {}
        for flag, key in _FLAG_TO_KEY.items():
            v = getattr(args, flag, None)
            if v is not None:
                kv[key] = str(v).lower() if isinstance(v, bool) else str(v)
        spec = _resolve(kv)
        return run_sweep(spec)
    except (SpecError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
