"""Batch experiments behind the ``direct-store`` command.

Each runner returns an :class:`ExperimentResult`: CSV rows plus the internal
consistency checks that decide the command's exit status.  Rows never hold
wall-clock values, so a fixed spec and seed reproduce the CSV exactly.

CSV layout::

    # direct-store-csv schema_version=1 experiment=<name>
    # <param>=<value>            (one line per spec field)
    <columns>
    <rows>
    # summary <key>=<value>      (aggregates)
    # check <name>=pass|fail <detail>
"""

import csv
import math
import random
import statistics
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .blockfs import PIECE, BlockCluster
from .error_model import (ErrorModelParams, monte_carlo_error, p_block_error, p_chunk_error, p_majority_error,
                          parse_size)
from .errors import CorruptionError, NoQuorum, ShardFailed
from .fault_injection import InjectorConfig, corrupt_at_rest
from .replication import ShardGroup, random_batch
from .replication.checks import ScheduleResult, _Checker, _drain, replay

SCHEMA_VERSION = 1

MODEL_COLUMNS = ["uber", "mode", "exact", "approx", "mc_estimate", "mc_stderr"]
KV_COLUMNS = ["time", "compaction_errors", "recoveries", "recovery_latency_ms", "patch_bytes", "client_errors"]
BLOCKFS_COLUMNS = ["read_id", "outcome", "repairs", "remote_chunks", "voted_chunks", "latency_ms"]


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""


@dataclass
class ExperimentResult:
    experiment: str
    columns: list
    rows: list = field(default_factory=list)
    checks: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    @property
    def ok(self):
        return all(c.ok for c in self.checks)

    def check(self, name, ok, detail=""):
        self.checks.append(Check(name, bool(ok), detail))


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_csv(result, fh):
    fh.write(f"# direct-store-csv schema_version={SCHEMA_VERSION} experiment={result.experiment}\n")
    for k, v in result.params.items():
        fh.write(f"# {k}={_fmt(v)}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(result.columns)
    for row in result.rows:
        w.writerow([_fmt(row[c]) for c in result.columns])
    for k, v in result.summary.items():
        fh.write(f"# summary {k}={_fmt(v)}\n")
    for c in result.checks:
        fh.write(f"# check {c.name}={'pass' if c.ok else 'fail'} {c.detail}\n".rstrip() + "\n")


def read_csv(fh):
    """Parse a file written by :func:`write_csv` into ``(header, rows)``."""
    lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("# direct-store-csv schema_version="):
        raise ValueError("not a direct-store CSV")
    header = dict(kv.split("=", 1) for kv in lines[0][2:].split()[1:])
    body = [ln for ln in lines if not ln.startswith("#")]
    return header, list(csv.DictReader(body))


def within_sigmas(failures, trials, p, sigmas=3.0):
    """Binomial agreement test with the standard error taken under ``p``."""
    sd = math.sqrt(max(p * (1.0 - p), 0.0) / trials)
    return abs(failures / trials - p) <= sigmas * sd


# -- analytical model --------------------------------------------------------

TABLE_UBERS = (1e-10, 1e-15)


@dataclass
class ModelSpec:
    ubers: tuple = TABLE_UBERS
    block_size: str = "128MB"
    chunk_size: str = "64KiB"
    replicas: int = 3
    modes: tuple = ("block", "chunk", "chunk_one")
    trials: int = 100_000
    min_expected_failures: float = 10.0
    seed: int = 0


def _chunk_one(params):
    """All replicas bad at one given chunk position (no factor for the chunk count)."""
    e, c, r = params.uber, params.chunk_bits, params.replication
    exact = (-math.expm1(c * math.log1p(-e))) ** r if e > 0 else 0.0
    return exact, (e * c) ** r


def run_model_table(spec=None):
    """Table rows for each UBER and mode, with a Monte Carlo column where it is measurable.

    ``chunk`` is the full chunk-recovery formula (every chunk position counts);
    ``chunk_one`` drops the chunk-count factor, which is the only reading under
    which the 1e-15 table entry comes out as printed.
    """
    spec = spec or ModelSpec()
    res = ExperimentResult("model", MODEL_COLUMNS, params=asdict(spec))
    block, chunk = parse_size(spec.block_size), parse_size(spec.chunk_size)
    for uber in spec.ubers:
        params = ErrorModelParams(uber, block, chunk, spec.replicas)
        for mode in spec.modes:
            mc = se = None
            if mode == "chunk_one":
                exact, approx = _chunk_one(params)
            else:
                fn = {"block": p_block_error, "chunk": p_chunk_error, "majority": p_majority_error}[mode]
                p = fn(params)
                exact, approx = p.exact, p.approx
                if mode != "majority" and spec.trials and exact * spec.trials >= spec.min_expected_failures:
                    est = monte_carlo_error(params, mode, spec.trials, spec.seed)
                    mc, se = est.estimate, est.stderr
                    res.check(f"mc_{mode}_{uber:g}", est.agrees_with(exact),
                              f"mc={mc:.4g} exact={exact:.4g} trials={spec.trials}")
            # relative error of the approximation is about (R*x + approx)/2 to first order
            x = uber * (block if mode == "block" else chunk)
            if exact > 0 and spec.replicas * x + approx <= 0.15:
                res.check(f"approx_{mode}_{uber:g}", abs(approx - exact) <= 0.1 * exact,
                          f"approx={approx:.4g} exact={exact:.4g}")
            res.check(f"range_{mode}_{uber:g}", 0.0 <= exact <= 1.0)
            res.rows.append(dict(uber=uber, mode=mode, exact=exact, approx=approx, mc_estimate=mc, mc_stderr=se))
    return res


def run_model_curves(block_size="8MiB", chunk_size="512B", replicas=3, ubers=None):
    """Analytical read-failure curves over an UBER grid (block, chunk and majority recovery)."""
    ubers = list(np.logspace(-12, -3, 28)) if ubers is None else list(ubers)
    spec = ModelSpec(tuple(float(u) for u in ubers), block_size, chunk_size, replicas,
                     ("block", "chunk", "majority"), trials=0)
    res = run_model_table(spec)
    res.experiment = "model-curves"
    return res


# -- replicated key-value cluster --------------------------------------------

WORKLOADS = {
    # name: (fraction of reads, fraction of deletes among writes)
    "write": (0.0, 0.1),
    "mixed": (0.5, 0.1),
    "read-heavy": (0.9, 0.1),
    "churn": (0.2, 0.4),
}


@dataclass
class KvSpec:
    replicas: int = 3
    uber: float = 0.0
    mode: str = "on_read"
    scope: str = "*.sst"
    workload: str = "mixed"
    ops: int = 2000
    keys: int = 500
    value_size: int = 100
    seed: int = 0
    block_capacity: int = 1024
    target_file_size: int = 16 * 1024
    flush_bytes: int = 16 * 1024
    think_ms: float = 0.5


def run_kv_experiment(spec=None, injector=None):
    """Drive a shard group under bit-flip injection and record every recovery.

    One row per completed recovery, with cumulative counters at that moment.
    Checks: every recovery passes the safety, no-resurrection and snapshot
    checks against a log-replay oracle, and the replicas converge at the end.
    """
    spec = spec or KvSpec()
    if spec.workload not in WORKLOADS:
        raise ValueError(f"unknown workload {spec.workload!r}; choose from {sorted(WORKLOADS)}")
    injector = injector or InjectorConfig(spec.uber, spec.mode, spec.seed, spec.scope)
    res = ExperimentResult("kv-cluster", KV_COLUMNS, params=asdict(spec))
    opts = dict(block_capacity=spec.block_capacity, target_file_size=spec.target_file_size)
    group = ShardGroup(spec.replicas, seed=spec.seed, injector=injector, store_options=opts,
                       flush_bytes=spec.flush_bytes, serialize=False)
    sched = ScheduleResult(spec.seed)
    checker = _Checker(group, sched)
    failed_recoveries = []

    def on_recovered(replica, t, req, event):
        c = group.counters
        res.rows.append(dict(time=round(group.sim.now, 6), compaction_errors=c["compaction_errors"],
                             recoveries=c["recoveries"], recovery_latency_ms=round(event.latency_ms, 6),
                             patch_bytes=event.patch_bytes, client_errors=c["client_errors"]))

    group.on("recovered", on_recovered)
    group.on("failed", lambda replica, rid: failed_recoveries.append(rid))
    rng = random.Random(spec.seed)
    read_frac, delete_frac = WORKLOADS[spec.workload]
    no_quorum = client_failures = 0
    for _ in range(spec.ops):
        if rng.random() < read_frac:
            key = b"key%08d" % rng.randrange(spec.keys)
            try:
                group.client_get(key, first=rng.randrange(spec.replicas))
            except (CorruptionError, ShardFailed):
                client_failures += 1
        else:
            batch = random_batch(rng, spec.keys, spec.value_size, rng.randint(1, 4), delete_frac)
            try:
                group.propose_write(batch)
            except NoQuorum:
                no_quorum += 1
        if rng.random() < 0.02:
            checker.take_snapshot(rng.randrange(spec.replicas), rng)
        group.sim.run(until=group.sim.now + spec.think_ms)
    with group.env.suspended():
        _drain(group, sched)
    c = group.counters
    lat = [r["recovery_latency_ms"] for r in res.rows]
    sizes = [r["patch_bytes"] for r in res.rows]
    mb = c["compaction_bytes"] / 1e6
    res.summary.update(
        compaction_errors=c["compaction_errors"], compaction_mb=round(mb, 6),
        errors_per_mb_compacted=round(c["compaction_errors"] / mb, 6) if mb else 0.0,
        recoveries=c["recoveries"], failed_recoveries=len(failed_recoveries), abstentions=c["abstentions"],
        client_errors=c["client_errors"], client_failures=client_failures, no_quorum=no_quorum,
        rereplications=c["rereplications"], shard_lost=sched.lost, median_latency_ms=statistics.median(lat) if lat else None,
        median_patch_bytes=statistics.median(sizes) if sizes else None,
        store_bytes=group.primary.store.total_bytes(), range_checks=sched.range_checks,
        deleted_checks=sched.deleted_checks, snapshot_checks=sched.snapshot_checks,
        bits_flipped=group.env.bits_flipped)
    res.check("recovery_safety", sched.ok, f"violations={sched.violations[:3]}")
    with group.env.suspended():
        want = replay(group.primary.log, group.primary.applied + 1).items()
        maps = [r.store.items() for r in group.replicas if r.applied == group.primary.applied]
    res.check("convergence", all(m == want for m in maps), f"replicas_compared={len(maps)}")
    if injector.uber == 0.0:
        res.check("clean_run", c["recoveries"] == 0 and c["client_errors"] == 0,
                  f"recoveries={c['recoveries']} client_errors={c['client_errors']}")
    return res


# -- block store ----------------------------------------------------------


@dataclass
class BlockfsSpec:
    files: int = 100
    block_size: int = 8 << 20
    uber: float = 0.0
    mode: str = "direct"
    reads: int = 100
    seed: int = 0
    injection: str = "at_rest"
    batch: int = 16
    payloads: int = 4
    resume_from_offset: bool = False


MAX_BATCH_FLIPS = 2e7


def run_blockfs_experiment(spec=None, injector=None):
    """Load one-block files, corrupt them, read them back; one row per read.

    Files are processed in batches of ``batch`` (load, corrupt, read, delete)
    so memory stays bounded; read ``i`` targets file ``i % files``.  Checks:
    every successful read returned the written bytes, and the failure rate of
    first reads agrees with the matching closed form within 3 standard errors.
    """
    spec = spec or BlockfsSpec()
    if spec.mode not in ("direct", "legacy"):
        raise ValueError(f"mode must be direct or legacy, not {spec.mode!r}")
    injector = injector or InjectorConfig(spec.uber, spec.injection, spec.seed)
    res = ExperimentResult("blockfs", BLOCKFS_COLUMNS, params=asdict(spec))
    cluster = BlockCluster(mode=spec.mode, block_size=spec.block_size, seed=spec.seed, injector=injector,
                           resume_from_offset=spec.resume_from_offset)
    rng = random.Random(spec.seed)
    payloads = [rng.randbytes(spec.block_size) for _ in range(max(1, min(spec.payloads, spec.files)))]
    checksums = [kernels.crc32_pieces(p, PIECE) for p in payloads]
    reads_for = [[] for _ in range(spec.files)]
    for i in range(spec.reads):
        reads_for[i % spec.files].append(i)
    # flip positions are held as int64 per bit, so bound how many one batch may carry
    per_block = injector.uber * spec.block_size * 8 * 3
    if per_block > MAX_BATCH_FLIPS:
        raise ValueError(f"uber {injector.uber:g} flips ~{per_block:.3g} bits per block; "
                         f"use a smaller block size or uber (limit {MAX_BATCH_FLIPS:.0e})")
    step = max(1, min(spec.batch, int(MAX_BATCH_FLIPS // per_block) if per_block else spec.batch))
    rows = {}
    first_fail = first_total = wrong_bytes = 0
    for start in range(0, spec.files, step):
        batch = range(start, min(start + step, spec.files))
        blocks = {}
        for f in batch:
            if reads_for[f]:
                blocks[f] = cluster.write_block(f"/data/f{f:06d}", payloads[f % len(payloads)],
                                                checksums=checksums[f % len(payloads)])
        cluster.namenode.sync()
        if injector.mode == "at_rest" and injector.uber > 0 and blocks:
            names = [n for b in blocks.values() for n in cluster.replica_files(b)]
            corrupt_at_rest(cluster.env, names)
        for f, bid in blocks.items():
            for k, read_id in enumerate(reads_for[f]):
                r = cluster.read_block_result(bid)
                if r.ok and r.data != payloads[f % len(payloads)]:
                    wrong_bytes += 1
                if k == 0:
                    first_total += 1
                    first_fail += not r.ok
                rows[read_id] = dict(read_id=read_id, outcome=r.outcome, repairs=r.repairs,
                                     remote_chunks=r.remote_chunks, voted_chunks=r.voted_chunks,
                                     latency_ms=round(r.latency_ms, 6))
        for f in blocks:
            cluster.delete_file(f"/data/f{f:06d}")
    res.rows = [rows[i] for i in sorted(rows)]
    lat = [r["latency_ms"] for r in res.rows]
    failed = sum(r["outcome"] != "ok" for r in res.rows)
    bits = spec.block_size * 8
    params = ErrorModelParams(injector.uber, bits, min(PIECE * 8, bits), 3)
    model = p_block_error(params) if spec.mode == "legacy" else p_majority_error(params)
    res.summary.update(
        reads=len(res.rows), failed_reads=failed, first_reads=first_total, first_read_failures=first_fail,
        first_read_failure_rate=first_fail / first_total if first_total else 0.0, model_failure_rate=model.exact,
        repairs=sum(r["repairs"] for r in res.rows), remote_chunks=sum(r["remote_chunks"] for r in res.rows),
        voted_chunks=sum(r["voted_chunks"] for r in res.rows),
        median_latency_ms=statistics.median(lat) if lat else None,
        p99_latency_ms=float(np.percentile(lat, 99)) if lat else None)
    res.check("never_bad_bytes", wrong_bytes == 0, f"mismatched_reads={wrong_bytes}")
    if injector.mode == "at_rest" and not spec.resume_from_offset and first_total:
        res.check("failure_rate_vs_model", within_sigmas(first_fail, first_total, model.exact),
                  f"measured={first_fail}/{first_total} model={model.exact:.4g}")
    return res
