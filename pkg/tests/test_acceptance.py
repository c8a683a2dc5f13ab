"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s``; the verdicts are
also repeated in the terminal summary.  The blockfs tolerance test reads 2e4
blocks of 8 MiB and takes roughly twelve minutes on one core.
"""

import math
import random
import statistics
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from direct_store import kernels, metafile
from direct_store.blockfs import CHUNK, BlockCluster, data_name
from direct_store.blockfs.namenode import NameNode
from direct_store.error_model import (ErrorModelParams, monte_carlo_error, p_block_error, p_chunk_error,
                                      p_majority_error)
from direct_store.errors import MetadataFatal, SnapshotInvalidated
from direct_store.experiments import BlockfsSpec, run_blockfs_experiment, run_model_table
from direct_store.fault_injection import StorageEnv, flip_bit
from direct_store.lsm import CorruptKeyRange, LsmStore, SstReader
from direct_store.lsm.format import FOOTER_SIZE, _decode_footer
from direct_store.replication import ShardGroup, WriteBatch
from direct_store.replication.checks import run_schedule
from direct_store.wire import ChunkReply, FetchChunk, PatchTransfer

pytestmark = pytest.mark.acceptance


def rel(a, b):
    return abs(a - b) / abs(b)


# 1 -------------------------------------------------------------------------


def test_c01_table(criterion):
    t0 = time.perf_counter()
    res = run_model_table()
    took = time.perf_counter() - t0
    rows = {(r["uber"], r["mode"]): r for r in res.rows}
    checks = {
        "block@1e-10": rel(rows[(1e-10, "block")]["exact"], 1e-3),
        "block@1e-15": rel(rows[(1e-15, "block")]["exact"], 1e-18),
        "chunk@1e-10": rel(rows[(1e-10, "chunk")]["exact"], 3e-10),
    }
    both = (1e-15, "chunk") in rows and (1e-15, "chunk_one") in rows
    ok = all(v <= 0.10 for v in checks.values()) and both and took < 1.0
    detail = ", ".join(f"{k} off {v:.1%}" for k, v in checks.items())
    detail += (f"; 1e-15 chunk: {rows[(1e-15, 'chunk')]['exact']:.3g} (all chunks) vs "
               f"{rows[(1e-15, 'chunk_one')]['exact']:.3g} (one chunk); {took:.3f}s")
    criterion(1, ok, detail)
    assert ok


# 2 -------------------------------------------------------------------------


def oracle_grid(n=24, seed=7):
    grid = []
    for b in (256, 1024, 4096):
        for c in (64, 128, 512):
            for r in (1, 2, 3):
                for e in (1e-2, 1e-3, 1e-4):
                    if c > b:
                        continue
                    p = ErrorModelParams(e, b, c, r)
                    lo = min(p_block_error(p).exact, p_chunk_error(p).exact)
                    hi = max(p_block_error(p).exact, p_chunk_error(p).exact)
                    # at 1e7 trials, both forms must be measurable and not saturated
                    if lo * 1e7 >= 100 and hi <= 0.999:
                        grid.append(p)
    return random.Random(seed).sample(grid, n)


def test_c02_monte_carlo_oracle(criterion):
    t0 = time.perf_counter()
    trials = 10_000_000
    worst, bad = 0.0, []
    grid = oracle_grid()
    for i, p in enumerate(grid):
        for mode, fn in (("block", p_block_error), ("chunk", p_chunk_error)):
            exact = fn(p).exact
            est = monte_carlo_error(p, mode, trials, seed=1000 + i)
            z = abs(est.estimate - exact) / est.stderr if est.stderr else 0.0
            worst = max(worst, z)
            if not est.agrees_with(exact):
                bad.append((mode, p, z))
    took = time.perf_counter() - t0
    ok = len(grid) >= 20 and not bad and took < 300
    criterion(2, ok, f"{len(grid)} instances x 2 forms at {trials:.0e} trials, worst |z|={worst:.2f}, "
                     f"{len(bad)} disagreements, {took:.0f}s")
    assert ok, bad


# 3, 4 ----------------------------------------------------------------------

SCHEDULES = 500


@pytest.fixture(scope="module")
def schedule_suite():
    t0 = time.perf_counter()
    results = [run_schedule(seed) for seed in range(SCHEDULES)]
    return results, time.perf_counter() - t0


def test_c03_recovery_safety(schedule_suite, criterion):
    results, took = schedule_suite
    safety = [v for r in results for v in r.violations if v[0] == "safety"]
    recoveries = sum(r.recoveries for r in results)
    checks = sum(r.range_checks for r in results)
    ok = not safety and recoveries > 0 and took < 600
    criterion(3, ok, f"{len(results)} schedules, {recoveries} recoveries, {checks} range checks, "
                     f"{len(safety)} violations, {took:.0f}s")
    assert ok, safety[:5]


def test_c04_no_resurrection(schedule_suite, criterion):
    results, _ = schedule_suite
    bad = [v for r in results for v in r.violations if v[0] == "resurrection"]
    checks = sum(r.deleted_checks for r in results)
    ok = not bad and checks > 0
    criterion(4, ok, f"{checks} deleted-key checks over {len(results)} schedules, {len(bad)} resurrections")
    assert ok, bad[:5]


# 5 -------------------------------------------------------------------------

SNAP_LOG = {"cases": 0, "invalidated": 0, "kept": 0, "violations": []}


def key(i):
    return b"key%08d" % i


def small_group(seed, name, n=120):
    g = ShardGroup(3, seed=seed, store_options=dict(block_capacity=256, l0_trigger=100), flush_bytes=1_500,
                   name=name)
    for i in range(n):
        g.put(key(i), b"v%d" % i)
    g.settle()
    return g


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(seed=st.integers(0, 10_000), bad=st.integers(0, 2), lo=st.integers(0, 100), width=st.integers(1, 20),
       probes=st.lists(st.integers(0, 119), min_size=1, max_size=5),
       snap_on=st.lists(st.tuples(st.integers(0, 1), st.integers(0, 2)), min_size=1, max_size=6))
def snapshot_property(seed, bad, lo, width, probes, snap_on):
    groups = [small_group(seed, "a"), small_group(seed + 1, "b")]
    snaps = []
    for shard, rid in snap_on:
        snap = groups[shard].take_snapshot(rid)
        snaps.append((shard, rid, snap, {k: snap.get(key(k)) for k in probes}))
    # writes after the snapshots must stay invisible to them
    for k in probes:
        groups[0].put(key(k), b"later")
    groups[0].settle()
    groups[0].report_corruption(bad, [_range(lo, lo + width)])
    groups[0].wait_recoveries()
    SNAP_LOG["cases"] += 1
    for shard, rid, snap, seen in snaps:
        hit = shard == 0 and rid == bad
        try:
            now = {k: snap.get(key(k)) for k in probes}
            if hit:
                SNAP_LOG["violations"].append(("survived", seed, shard, rid))
            elif now != seen:
                SNAP_LOG["violations"].append(("changed", seed, shard, rid))
            else:
                SNAP_LOG["kept"] += 1
        except SnapshotInvalidated:
            if hit:
                SNAP_LOG["invalidated"] += 1
            else:
                SNAP_LOG["violations"].append(("foreign-invalidated", seed, shard, rid))
    assert not SNAP_LOG["violations"]


def _range(a, b):
    return CorruptKeyRange(key(a), key(b))


def test_c05_snapshot_invalidation(criterion, schedule_suite):
    try:
        snapshot_property()
        raised = None
    except AssertionError as exc:  # the verdict line is printed either way
        raised = exc
    results, _ = schedule_suite
    sched = [v for r in results for v in r.violations if v[0].startswith("snapshot")]
    sched_checks = sum(r.snapshot_checks for r in results)
    ok = raised is None and not SNAP_LOG["violations"] and not sched and SNAP_LOG["invalidated"] > 0
    criterion(5, ok, f"property: {SNAP_LOG['cases']} cases, {SNAP_LOG['invalidated']} invalidated, "
                     f"{SNAP_LOG['kept']} untouched, {len(SNAP_LOG['violations'])} violations; "
                     f"schedules: {sched_checks} checks, {len(sched)} violations")
    assert ok, (raised, SNAP_LOG["violations"][:5], sched[:5])


# 6 -------------------------------------------------------------------------


def kv_amplification(trials=60, seed=3):
    """Corrupt 1-3 blocks on one replica, recover, and inspect the patch on the wire."""
    rng = random.Random(seed)
    out = {"recoveries": 0, "outside": 0, "interval_mismatch": 0, "max_fraction": 0.0}
    g = ShardGroup(3, seed=seed, store_options=dict(block_capacity=512, l0_trigger=100), flush_bytes=4_000)
    for i in range(3000):
        g.put(key(i), rng.randbytes(60))
    g.settle()
    patches = {}
    send = g.net.send

    def sniff(src, dst, msg, extra_delay=0.0):
        if isinstance(msg, PatchTransfer):
            patches.setdefault(msg.request_id, msg)
        return send(src, dst, msg, extra_delay)

    g.net.send = sniff
    store_bytes = g.primary.store.total_bytes()
    for _ in range(trials):
        rid = rng.randrange(3)
        store = g.replicas[rid].store
        fid = rng.choice(store.file_ids())
        reader = store._find(fid)[1]
        picked = rng.sample(range(len(reader)), rng.randint(1, min(3, len(reader))))
        want = sorted((reader.key_range(i) for i in picked), key=lambda r: r.low)
        for i in picked:
            e = reader.index[i]
            flip_bit(g.env, reader.name, e.offset * 8 + rng.randrange(e.length * 8))
        result = store.compact_file(fid)
        got = sorted(result.ranges, key=lambda r: r.low)
        rid_req = g.report_corruption(rid, result.ranges, result.id)
        g.wait_recoveries()
        g.settle()
        ev = g.events[rid_req]
        assert ev.outcome == "recovered"
        out["recoveries"] += 1
        # one inter-index interval per corrupted block, bracketed by the neighbours' separators
        if [(r.low, r.high) for r in got] != [(r.low, r.high) for r in want]:
            out["interval_mismatch"] += 1
        msg = patches[rid_req]
        out["outside"] += sum(not any(r.contains(rec.key) for r in got) for rec in msg.records)
        out["max_fraction"] = max(out["max_fraction"], ev.patch_bytes / store_bytes)
    return out


def blockfs_amplification(reads=150, seed=5):
    """Flip bits in the replica that serves each read and count the chunks fetched for it."""
    rng = random.Random(seed)
    cluster = BlockCluster(block_size=1 << 20, seed=seed)
    fetched = []
    send = cluster.net.send

    def sniff(src, dst, msg, extra_delay=0.0):
        if isinstance(msg, ChunkReply):
            fetched.append(len(msg.data))
        if isinstance(msg, FetchChunk):
            fetched.append(("ask", msg.length))
        return send(src, dst, msg, extra_delay)

    cluster.net.send = sniff
    out = {"reads": 0, "corrupt_chunks": 0, "chunks_fetched": 0, "bad_sizes": 0, "mismatch": 0}
    payload = rng.randbytes(1 << 20)
    for n in range(reads):
        (bid,) = cluster.write_file(f"/f{n}", payload)
        first = cluster.namenode.blocks[bid].datanodes[0]
        chunks = rng.sample(range((1 << 20) // CHUNK), rng.randint(1, 4))
        for c in chunks:
            for _ in range(rng.randint(1, 3)):
                flip_bit(cluster.env, data_name(first, bid), (c * CHUNK + rng.randrange(CHUNK)) * 8 + rng.randrange(8))
        fetched.clear()
        res = cluster.read_block_result(bid)
        assert res.ok and res.data == payload
        replies = [x for x in fetched if not isinstance(x, tuple)]
        asks = [x[1] for x in fetched if isinstance(x, tuple)]
        out["reads"] += 1
        out["corrupt_chunks"] += len(chunks)
        out["chunks_fetched"] += len(replies)
        out["bad_sizes"] += sum(x != CHUNK for x in replies + asks)
        out["mismatch"] += len(replies) != len(chunks) or res.remote_chunks != len(chunks)
        cluster.delete_file(f"/f{n}")
    return out


def test_c06_error_amplification(criterion):
    kv = kv_amplification()
    bf = blockfs_amplification()
    ok = (kv["outside"] == 0 and kv["interval_mismatch"] == 0 and kv["max_fraction"] < 0.05
          and bf["mismatch"] == 0 and bf["bad_sizes"] == 0 and bf["chunks_fetched"] == bf["corrupt_chunks"])
    criterion(6, ok, f"kv: {kv['recoveries']} recoveries, {kv['outside']} records outside ranges, "
                     f"{kv['interval_mismatch']} interval mismatches, largest patch {kv['max_fraction']:.2%} of store; "
                     f"blockfs: {bf['corrupt_chunks']} corrupt chunks -> {bf['chunks_fetched']} x 64 KiB fetched "
                     f"over {bf['reads']} reads")
    assert ok, (kv, bf)


# 7 -------------------------------------------------------------------------

BLOCK_8M = 8 << 20
READS_7 = 10_000


def test_c07_blockfs_uber_tolerance(criterion):
    t0 = time.perf_counter()
    bits = BLOCK_8M * 8
    # per-replica failure 0.01**(1/3), so the legacy block-read failure rate is exactly 1%
    u = -math.expm1(math.log1p(-0.01 ** (1 / 3)) / bits)
    legacy = run_blockfs_experiment(BlockfsSpec(files=READS_7, reads=READS_7, block_size=BLOCK_8M, uber=u,
                                                mode="legacy", seed=11))
    direct = run_blockfs_experiment(BlockfsSpec(files=READS_7, reads=READS_7, block_size=BLOCK_8M, uber=1e4 * u,
                                                mode="direct", seed=12))
    took = time.perf_counter() - t0
    p_legacy = p_block_error(ErrorModelParams(u, bits, 4096, 3)).exact
    p_direct = p_majority_error(ErrorModelParams(1e4 * u, bits, 4096, 3)).exact
    n, fails = legacy.summary["first_reads"], legacy.summary["first_read_failures"]
    z = (fails / n - p_legacy) / math.sqrt(p_legacy * (1 - p_legacy) / n)
    legacy_ok = abs(z) <= 3 and p_legacy >= 0.01 * (1 - 1e-9)
    direct_fails = direct.summary["failed_reads"]
    never_bad = all(c.ok for r in (legacy, direct) for c in r.checks if c.name == "never_bad_bytes")
    ok = legacy_ok and direct_fails == 0 and never_bad and took < 900
    criterion(7, ok, f"u_legacy={u:.3g} (E*B={u * bits:.3f}): legacy {fails}/{n} failed "
                     f"(model {p_legacy:.4f}, z={z:+.2f}); direct at 1e4*u: {direct_fails}/"
                     f"{direct.summary['reads']} failed (model {p_direct:.4f}), "
                     f"{direct.summary['voted_chunks']} voted pieces, {took:.0f}s")
    assert ok


# 8 -------------------------------------------------------------------------


def voting_cluster(flips_by_node):
    cluster = BlockCluster(block_size=256 << 10, seed=0)
    payload = random.Random(1).randbytes(256 << 10)
    (bid,) = cluster.write_file("/v", payload)
    for node, bits in flips_by_node.items():
        for b in bits:
            flip_bit(cluster.env, data_name(node, bid), b)
    return cluster, bid, payload


def test_c08_majority_voting(criterion):
    piece = 3 * 512  # the fourth 512 B checksum piece of the first chunk
    outcomes = {}
    # disjoint flips on every replica inside one piece
    cluster, bid, payload = voting_cluster({0: [piece * 8 + 5], 1: [piece * 8 + 900], 2: [piece * 8 + 3001]})
    res = cluster.read_block_result(bid)
    outcomes["disjoint"] = res.ok and res.data == payload and res.voted_chunks == 1
    # several disjoint flips per replica, still no bit wrong on two copies
    cluster, bid, payload = voting_cluster({0: [piece * 8 + 1, piece * 8 + 2], 1: [piece * 8 + 3],
                                            2: [piece * 8 + 4, piece * 8 + 4095]})
    res = cluster.read_block_result(bid)
    outcomes["disjoint-multi"] = res.ok and res.data == payload
    # colliding flips on two replicas, third replica bad elsewhere in the piece
    cluster, bid, _ = voting_cluster({0: [piece * 8 + 77], 1: [piece * 8 + 77], 2: [piece * 8 + 1000]})
    res = cluster.read_block_result(bid)
    outcomes["colliding"] = res.outcome == "failed" and res.data is None
    # kernel level, both backends
    rng = np.random.default_rng(0)
    good = rng.integers(0, 256, 512, dtype=np.uint8).tobytes()
    copies = [bytearray(good) for _ in range(3)]
    for i, bit in enumerate((10, 2000, 4000)):
        copies[i][bit // 8] ^= 1 << (bit % 8)
    outcomes["kernels"] = all(bytes(m.majority3(*map(bytes, copies))) == good for m in kernels.backends().values())
    ok = all(outcomes.values())
    criterion(8, ok, ", ".join(f"{k}={'ok' if v else 'WRONG'}" for k, v in outcomes.items()))
    assert ok, outcomes


# 9 -------------------------------------------------------------------------

LAT_OPTS = dict(block_capacity=1024, target_file_size=64 * 1024, l0_trigger=4, l1_max_bytes=256 * 1024)


def loaded_group(n, seed=0):
    g = ShardGroup(3, seed=seed, store_options=LAT_OPTS, flush_bytes=32 * 1024, serialize=False)
    rng = random.Random(seed)
    for start in range(0, n, 20):
        batch = WriteBatch()
        for j in range(start, min(n, start + 20)):
            batch.put(key(j), rng.randbytes(100))
        g.propose_write(batch)
        g.sim.run(until=g.sim.now + 0.5)
    g.settle()
    return g


def recovery_latencies(g, count, seed):
    rng = random.Random(seed)
    done = []
    while len(done) < count:
        rep = g.replicas[rng.randrange(3)]
        reader = rep.store._find(rng.choice(rep.store.file_ids()))[1]
        i = rng.randrange(len(reader))
        e = reader.index[i]
        flip_bit(g.env, reader.name, e.offset * 8 + rng.randrange(e.length * 8))
        rep.targeted_compaction([reader.key_range(i)])
        g.wait_recoveries()
        g.settle()
        done = [ev for ev in g.events.values() if ev.outcome == "recovered"]
    return done


def test_c09_latency_trend(criterion):
    n = 20_000
    stats = {}
    for size in (n, 2 * n):
        g = loaded_group(size)
        events = recovery_latencies(g, 100, seed=1)
        stats[size] = dict(store=g.primary.store.total_bytes(), median=statistics.median(e.latency_ms for e in events),
                           recoveries=len(events), patch=statistics.median(e.patch_bytes for e in events),
                           legacy=g.rereplicate(1))
    a, b = stats[n], stats[2 * n]
    change = abs(b["median"] - a["median"]) / a["median"]
    legacy_ratio = b["legacy"].latency_ms / a["legacy"].latency_ms
    store_ratio = b["store"] / a["store"]
    ok = (a["recoveries"] >= 100 and b["recoveries"] >= 100 and change < 0.20
          and abs(legacy_ratio - store_ratio) / store_ratio < 0.15)
    criterion(9, ok, f"median recovery {a['median']:.2f} -> {b['median']:.2f} ms ({change:.1%}) as store grows "
                     f"{store_ratio:.2f}x; median patch {a['patch']:.0f} -> {b['patch']:.0f} B; full re-replication "
                     f"{a['legacy'].latency_ms:.0f} -> {b['legacy'].latency_ms:.0f} ms ({legacy_ratio:.2f}x)")
    assert ok


# 10 ------------------------------------------------------------------------


def sweep(env, name, check, start=0, length=None):
    """Flip each bit of ``name[start:start+length]`` in turn; count the flips that broke ``check``."""
    length = env.size(name) - start if length is None else length
    broken = 0
    for bit in range(start * 8, (start + length) * 8):
        flip_bit(env, name, bit)
        try:
            if not check():
                broken += 1
        except MetadataFatal:
            broken += 1
        flip_bit(env, name, bit)
    return broken


def all_copies_fatal(env, names_offsets, load):
    for name, bit in names_offsets:
        flip_bit(env, name, bit)
    try:
        load()
        fatal = False
    except MetadataFatal:
        fatal = True
    for name, bit in names_offsets:
        flip_bit(env, name, bit)
    return fatal


def test_c10_metadata_duplication(criterion):
    t0 = time.perf_counter()
    env = StorageEnv()
    db = LsmStore.open(env, "db", block_capacity=256)
    for i in range(40):
        db.put(key(i), b"value-%d" % i)
    fid = db.flush()
    db.close()
    truth = LsmStore.open(env, "db").items()
    sst = db._name(fid)

    def lsm_ok():
        return LsmStore.open(env, "db").items() == truth

    def sst_ok():
        reader = SstReader(env, sst)
        got = {}
        for _, blk in reader.iter_blocks():
            got.update({r.key: r.value for r in blk})
        return got == truth

    size = env.size(sst)
    copies = _decode_footer(env.read(sst, size - FOOTER_SIZE, FOOTER_SIZE))
    (idx_a, props_a) = copies[0]
    (idx_b, props_b) = copies[1]
    results = {}
    bits = 0
    for label, (off, ln) in (("sst index copy A", idx_a), ("sst props copy A", props_a),
                             ("sst footer", (size - FOOTER_SIZE, FOOTER_SIZE))):
        results[label] = sweep(env, sst, sst_ok, off, ln)
        bits += ln * 8
    fatal = {
        "sst index": all_copies_fatal(env, [(sst, idx_a[0] * 8 + 3), (sst, idx_b[0] * 8 + 3)],
                                      lambda: SstReader(env, sst)),
        "sst footers": all_copies_fatal(env, [(sst, (size - FOOTER_SIZE) * 8 + 70),
                                              (sst, (size - FOOTER_SIZE - 4096) * 8 + 70)],
                                        lambda: SstReader(env, sst)),
    }
    for role in ("MANIFEST", "OPTIONS", "CURRENT"):
        name = f"db/{role}"
        results[name] = sweep(env, name, lsm_ok)
        bits += env.size(name) * 8
        fatal[name] = all_copies_fatal(env, [(n, 40) for n in metafile.copy_names(name)],
                                       lambda: LsmStore.open(env, "db"))

    cluster = BlockCluster(block_size=64 << 10, seed=2)
    for f in range(3):
        cluster.write_file(f"/role/{f}", bytes(100_000))
    nenv, nodes = cluster.env, [dn.id for dn in cluster.datanodes]
    want = (cluster.namenode.files, {b: (m.length, m.datanodes) for b, m in cluster.namenode.blocks.items()})

    def nn_ok():
        nn = NameNode.load(nenv, nodes)
        return (nn.files, {b: (m.length, m.datanodes) for b, m in nn.blocks.items()}) == want

    for name in (cluster.namenode.version_file, cluster.namenode.seen_txid_file):
        results[name] = sweep(nenv, name, nn_ok)
        bits += nenv.size(name) * 8
        fatal[name] = all_copies_fatal(nenv, [(n, 40) for n in metafile.copy_names(name)],
                                       lambda: NameNode.load(nenv, nodes))
    took = time.perf_counter() - t0
    ok = not any(results.values()) and all(fatal.values()) and took < 300
    criterion(10, ok, f"{bits} single-bit flips over {len(results)} metadata copies, "
                      f"{sum(results.values())} broke a load; all-copies flips fatal for "
                      f"{sum(fatal.values())}/{len(fatal)}; {took:.0f}s")
    assert ok, (results, fatal)
