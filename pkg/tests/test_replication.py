import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from direct_store import wire
from direct_store.errors import CorruptionError, LogCorruption, NoQuorum, SnapshotInvalidated
from direct_store.fault_injection import StorageEnv, flip_bit
from direct_store.lsm import PUT, CorruptKeyRange, LsmStore, Record
from direct_store.replication import PatchRequest, ShardGroup, WriteBatch, decode_entry, encode_entry
from direct_store.replication.checks import replay, run_schedule
from direct_store.replication.shard import FAILED, NORMAL, patch_crc

OPTS = dict(block_capacity=256, l0_trigger=100)


def key(i):
    return b"key%08d" % i


def loaded(n=200, replicas=3, seed=0, **kw):
    g = ShardGroup(replicas, seed=seed, store_options=OPTS, flush_bytes=2_000, **kw)
    for i in range(n):
        g.put(key(i), b"value-%d" % i)
    g.settle()
    return g


def corrupt_block(g, rid, block=1, fid=None):
    store = g.replicas[rid].store
    fid = fid if fid is not None else store.file_ids()[0]
    reader = store._find(fid)[1]
    flip_bit(g.env, reader.name, reader.index[block].offset * 8 + 30)
    return fid, reader.key_range(block)


class TestWire:
    MESSAGES = [
        wire.AppendEntry(0, 5, 4, b"entry"),
        wire.Ack(2, 9),
        wire.PatchTransfer(7, 1, 12, [Record(b"k", 3, PUT, b"v")], 99),
        wire.PatchAck(7, 2),
        wire.CorruptionReport(1, 7, [CorruptKeyRange(b"a", b"b\x00", 3, 4096)]),
        wire.GetBlockLocations("/f/1"),
        wire.BlockLocations("/f/1", [(4, 8 << 20, [0, 1, 2])]),
        wire.ReadBlock(4, 0, 1 << 20, [0, 1, 2]),
        wire.FetchChunk(4, 65536, 65536),
        wire.ChunkReply(4, 65536, wire.CHUNK_OK, b"\x01" * 10),
    ]

    @pytest.mark.parametrize("msg", MESSAGES, ids=lambda m: type(m).__name__)
    def test_round_trip(self, msg):
        assert wire.decode(wire.encode(msg)) == msg

    def test_transfer_chunk_checksums(self):
        msg = wire.TransferChunk(1, 0, wire.CHUNK_OK, b"x" * 600, np.array([1, 2], dtype=np.uint32))
        back = wire.decode(wire.encode(msg))
        assert back.data == msg.data and list(back.checksums) == [1, 2]

    def test_frame_errors(self):
        frame = bytearray(wire.encode(wire.Ack(1, 2)))
        with pytest.raises(wire.WireError):
            wire.decode(frame[:-1])
        frame[4] = 9
        with pytest.raises(wire.WireError, match="version"):
            wire.decode(bytes(frame))

    @settings(max_examples=50, deadline=None)
    @given(st.binary(max_size=50), st.integers(0, 2**64 - 1), st.integers(0, 2**32 - 1))
    def test_append_entry_property(self, entry, index, leader):
        msg = wire.AppendEntry(leader, index, index // 2, entry)
        assert wire.decode(wire.encode(msg)) == msg


class TestLog:
    def test_entry_round_trip(self):
        batch = WriteBatch().put(b"a", b"1").delete(b"b")
        idx, back = decode_entry(encode_entry(3, batch))
        assert idx == 3 and [(k, bytes(x), bytes(y)) for k, x, y in back.ops] == batch.ops
        req = PatchRequest(1, 77, [CorruptKeyRange(b"a", b"c", 2, 0)])
        assert decode_entry(encode_entry(4, req)) == (4, req)

    def test_bad_crc_fatal(self):
        g = loaded(5)
        raw = bytearray(g.replicas[2].log[6 - 1])
        raw[10] ^= 1
        g.replicas[2].log[5] = bytes(raw)
        g.replicas[2].applied = 4
        fatal = []
        g.on("fatal", lambda rep, exc: fatal.append(exc))
        g.replicas[2]._apply()
        assert g.replicas[2].state == FAILED and isinstance(fatal[0], LogCorruption)

    def test_patch_request_needs_ranges(self):
        with pytest.raises(ValueError):
            PatchRequest(0, 1, [])


class TestQuorum:
    def test_one_down_still_commits(self):
        g = loaded(3)
        g.net.down.add(2)
        idx = g.put(b"x", b"y")
        assert g.primary.commit >= idx
        assert g.read(b"x") == b"y"

    def test_two_down_no_quorum(self):
        g = loaded(3)
        g.net.down.update({1, 2})
        with pytest.raises(NoQuorum):
            g.put(b"x", b"y")

    def test_batch_order(self):
        g = loaded(0)
        g.propose_write(WriteBatch().put(b"k", b"1").put(b"k", b"2"))
        g.settle()
        assert {r.store.get(b"k") for r in g.replicas} == {b"2"}

    def test_drops_are_retransmitted(self):
        g = ShardGroup(3, seed=4, drop=0.3, store_options=OPTS)
        for i in range(50):
            try:
                g.put(key(i), b"v")
            except NoQuorum:
                pass
        g.settle()
        maps = g.visible_maps()
        assert maps[0] == maps[1] == maps[2]


class TestRecovery:
    def check_against_oracle(self, g, rid):
        ev = next(e for e in g.events.values() if e.replica == rid)
        assert ev.outcome == "recovered"
        oracle = replay(g.primary.log, ev.index)
        for rng in ev.ranges:
            assert g.replicas[rid].store.scan(rng.low, rng.high) == oracle.scan(rng.low, rng.high)
        return ev

    def test_secondary_recovers(self):
        g = loaded()
        fid, _ = corrupt_block(g, 1)
        res = g.replicas[1].store.compact_file(fid)
        g.report_corruption(1, res.ranges, res.id)
        g.wait_recoveries()
        ev = self.check_against_oracle(g, 1)
        assert ev.source in (0, 2) and ev.patch_keys > 0
        maps = g.visible_maps()
        assert maps[0] == maps[1] == maps[2]

    def test_primary_recovers_from_secondary(self):
        g = loaded()
        fid, _ = corrupt_block(g, 0)
        g.replicas[0].targeted_compaction([g.replicas[0].store._find(fid)[1].key_range(1)])
        g.wait_recoveries()
        ev = self.check_against_oracle(g, 0)
        assert ev.source in (1, 2)

    def test_two_errors_one_request(self):
        g = loaded(300)
        store = g.replicas[2].store
        f1, f2 = store.file_ids()[:2]
        corrupt_block(g, 2, 1, f1)
        corrupt_block(g, 2, 2, f2)
        res = store.compact(store.file_ids(0))
        assert len(res.ranges) == 2
        g.report_corruption(2, res.ranges, res.id)
        g.wait_recoveries()
        reqs = [decode_entry(raw)[1] for raw in g.primary.log.values()]
        patch_reqs = [p for p in reqs if isinstance(p, PatchRequest)]
        assert len(patch_reqs) == 1 and len(patch_reqs[0].ranges) == 2
        self.check_against_oracle(g, 2)

    def test_both_abstain_times_out(self):
        g = loaded(recovery_timeout_ms=500)
        fid, rng = corrupt_block(g, 1)
        for rid in (0, 2):
            store = g.replicas[rid].store
            for f in store.file_ids():
                reader = store._find(f)[1]
                for i in reader.blocks_overlapping(rng.low, rng.high):
                    flip_bit(g.env, reader.name, reader.index[i].offset * 8 + 40)
        res = g.replicas[1].store.compact_file(fid)
        g.report_corruption(1, res.ranges, res.id)
        g.settle(2_000)
        assert g.replicas[1].state == FAILED
        # both peers abstain on the first request (and then report their own bad blocks)
        assert g.counters["abstentions"] >= 2 and g.counters["failed_recoveries"] >= 1
        first = min(g.events.values(), key=lambda e: e.reported_at)
        assert first.replica == 1 and first.outcome == "failed" and first.abstentions == 2

    def test_empty_range_patch_is_pure_delete(self):
        g = loaded(50)
        rid = 1
        rng = CorruptKeyRange(key(10), key(20))
        for i in range(10, 20):
            g.delete(key(i))
        g.report_corruption(rid, [rng])
        g.wait_recoveries()
        ev = next(iter(g.events.values()))
        assert ev.patch_keys == 0
        assert all(g.replicas[rid].store.get(key(i)) is None for i in range(10, 20))

    def test_read_after_waits(self):
        g = loaded(10)
        g.net.latency_ms = (5.0, 5.0)
        idx = g.primary.propose(WriteBatch().put(b"late", b"1"))
        assert g.replicas[2].applied < idx
        assert g.read(b"late", "read_after", index=idx, replica=2) == b"1"

    def test_eventual_read_error_then_retry(self):
        g = loaded()
        fid, rng = corrupt_block(g, 1)
        k = next(key(i) for i in range(200) if rng.contains(key(i)))
        with pytest.raises(CorruptionError):
            g.read(k, "eventual", replica=1)
        value, attempts = g.client_get(k, first=1)
        assert attempts == 2 and value is not None
        g.wait_recoveries()
        assert g.read(k, "eventual", replica=1) == value
        assert g.counters["targeted_compactions"] >= 1

    def test_strong_read_after_recovery(self):
        g = loaded()
        fid, rng = corrupt_block(g, 0)
        k = next(key(i) for i in range(200) if rng.contains(key(i)))
        g.put(k, b"fresh")
        g.replicas[0].targeted_compaction([rng])
        g.wait_recoveries()
        assert g.read(k, "strong") == b"fresh"

    def test_patch_redelivery_and_early_arrival(self):
        g = loaded()
        rep = g.replicas[1]
        rng = CorruptKeyRange(key(5), key(9))
        rid = g.report_corruption(1, [rng])
        records = g.replicas[2].store.scan(rng.low, rng.high)
        crc, _ = patch_crc(records)
        early = wire.PatchTransfer(rid, 2, g.primary.last_index + 1, records, crc)
        rep._on_patch(early)
        assert rid in rep.early
        g.wait_recoveries()
        assert g.events[rid].outcome == "recovered"
        before = rep.store.items()
        rep._on_patch(early)
        g.settle()
        assert rep.store.items() == before and rep.state == NORMAL

    def test_bad_patch_ignored(self):
        g = loaded()
        rep = g.replicas[1]
        rep._on_patch(wire.PatchTransfer(1, 2, 5, [Record(b"k", 1, PUT, b"v")], 0))
        assert g.counters["bad_patches"] == 1 and not rep.early


class TestSnapshots:
    def test_only_corrupted_store_invalidated(self):
        g = loaded()
        other_shard = loaded(seed=1, name="other")
        s_bad = g.take_snapshot(1)
        s_good = g.take_snapshot(2)
        s_other = other_shard.take_snapshot(1)
        g.report_corruption(1, [CorruptKeyRange(key(3), key(4))])
        g.wait_recoveries()
        with pytest.raises(SnapshotInvalidated):
            s_bad.get(key(3))
        assert s_good.get(key(3)) == b"value-3"
        assert s_other.get(key(3)) == b"value-3"


def test_patch_application_is_atomic_for_readers():
    env = StorageEnv()
    db = LsmStore.open(env, "db", block_capacity=256)
    for i in range(300):
        db.put(key(i), b"old")
    db.flush()
    rng = CorruptKeyRange(key(0), key(300))
    patch = [Record(key(i), 10_000 + i, PUT, b"new") for i in range(300)]
    seen, stop = set(), threading.Event()

    def reader():
        while not stop.is_set():
            vals = {r.value for r in db.scan(rng.low, rng.high)}
            seen.add(frozenset(vals))

    t = threading.Thread(target=reader)
    t.start()
    db.apply_patch([rng], patch, delete_seq=1 << 30)
    stop.set()
    t.join()
    assert seen <= {frozenset({b"old"}), frozenset({b"new"})}


@pytest.mark.parametrize("seed", range(12))
def test_random_schedules(seed):
    result = run_schedule(seed)
    assert result.ok, result.violations
