import math
import os
import random
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from direct_store import metafile
from direct_store.blockfs import (CHUNK, PIECE, BlockCluster, NameNode, crc_name, data_name, decode_sidecar,
                                  encode_sidecar)
from direct_store.error_model import ErrorModelParams, p_block_error, p_majority_error
from direct_store.errors import BlockDeleted, InsufficientReplicas, MetadataFatal, ReadFailed
from direct_store.fault_injection import InjectorConfig, corrupt_at_rest, flip_bit

BLOCK = 256 * 1024


def payload(n, seed=0):
    return random.Random(seed).randbytes(n)


def cluster(mode="direct", **kw):
    kw.setdefault("block_size", BLOCK)
    return BlockCluster(mode=mode, **kw)


def one_block(mode="direct", n=BLOCK, **kw):
    c = cluster(mode, **kw)
    data = payload(n)
    (bid,) = c.write_file("/f", data)
    return c, bid, data, c.namenode.blocks[bid].datanodes


class TestWriteRead:
    def test_round_trip(self):
        c = cluster()
        data = payload(3 * BLOCK + 1000)
        ids = c.write_file("/f", data)
        assert len(ids) == 4
        assert c.read_file("/f") == data

    def test_one_byte_block_has_one_checksum(self):
        c, bid, data, nodes = one_block(n=1)
        raw = c.env.read_file(crc_name(nodes[0], bid))
        assert len(raw) == 4 and decode_sidecar(raw)[0] == zlib.crc32(data)
        assert c.read_block(bid) == data

    def test_not_enough_datanodes(self):
        c = cluster()
        c.net.down.add(2)
        with pytest.raises(InsufficientReplicas):
            c.write_file("/f", b"x")
        with pytest.raises(InsufficientReplicas):
            BlockCluster(datanodes=2, replication=3)

    def test_sidecar_layout(self):
        c, bid, data, nodes = one_block(n=1300)
        raw = bytes(c.env.read_file(crc_name(nodes[1], bid)))
        want = b"".join(struct.pack("<I", zlib.crc32(data[i:i + PIECE])) for i in range(0, 1300, PIECE))
        assert raw == want and len(raw) == 12
        assert encode_sidecar(decode_sidecar(raw)) == raw

    def test_locations_over_the_wire(self):
        c = cluster(serialize=True)
        data = payload(BLOCK + 5)
        ids = c.write_file("/f", data)
        blocks = c.locate("/f")
        assert [b[0] for b in blocks] == ids and blocks[1][1] == 5
        assert c.read_file("/f") == data
        assert c.net.sent > 0


class TestDirectRepair:
    def test_single_flip_one_remote_chunk(self):
        c, bid, data, nodes = one_block()
        flip_bit(c.env, data_name(nodes[0], bid), 8 * 70_000 + 3)
        res = c.read_block_result(bid)
        assert res.ok and res.data == data
        assert (res.repairs, res.remote_chunks, res.voted_chunks) == (1, 1, 0)

    def test_repair_persists(self):
        c, bid, data, nodes = one_block()
        flip_bit(c.env, data_name(nodes[0], bid), 8 * 70_000 + 3)
        c.read_block_result(bid)
        again = c.read_block_result(bid)
        assert again.ok and again.repairs == 0 and again.remote_chunks == 0
        assert bytes(c.env.read_file(data_name(nodes[0], bid))) == data

    def test_each_bad_chunk_costs_one_transfer(self):
        c, bid, data, nodes = one_block()
        bad_chunks = [0, 1, 3]
        for ch in bad_chunks:
            flip_bit(c.env, data_name(nodes[0], bid), 8 * (ch * CHUNK + 100))
            flip_bit(c.env, data_name(nodes[0], bid), 8 * (ch * CHUNK + 9000))
        res = c.read_block_result(bid)
        assert res.ok and res.repairs == len(bad_chunks) and res.remote_chunks == len(bad_chunks)

    def test_b_bad_too_falls_through_to_c(self):
        c, bid, data, nodes = one_block()
        flip_bit(c.env, data_name(nodes[0], bid), 8 * 10)
        flip_bit(c.env, data_name(nodes[1], bid), 8 * 20)
        res = c.read_block_result(bid)
        assert res.ok and res.data == data and res.remote_chunks == 2 and res.voted_chunks == 0

    def test_b_bad_elsewhere_in_chunk_still_enough(self):
        c, bid, data, nodes = one_block()
        flip_bit(c.env, data_name(nodes[0], bid), 8 * 10)
        flip_bit(c.env, data_name(nodes[1], bid), 8 * 5000)  # other piece, same chunk
        res = c.read_block_result(bid)
        assert res.ok and res.remote_chunks == 1

    def test_disjoint_flips_on_all_three_are_voted(self):
        c, bid, data, nodes = one_block()
        for k, n in enumerate(nodes):
            flip_bit(c.env, data_name(n, bid), 8 * 1024 + 7 * k + 1)
        res = c.read_block_result(bid)
        assert res.ok and res.data == data
        assert res.voted_chunks == 1 and res.remote_chunks == 2

    def test_colliding_flips_fail(self):
        c, bid, data, nodes = one_block()
        flip_bit(c.env, data_name(nodes[0], bid), 8 * 1024 + 5)
        flip_bit(c.env, data_name(nodes[1], bid), 8 * 1024 + 5)
        flip_bit(c.env, data_name(nodes[2], bid), 8 * 1024 + 100)
        res = c.read_block_result(bid)
        assert res.outcome == "failed" and res.data is None
        with pytest.raises(ReadFailed):
            c.read_block(bid)

    def test_concurrent_delete_returns_original_error(self):
        c, bid, data, nodes = one_block()
        flip_bit(c.env, data_name(nodes[0], bid), 8 * 2 * CHUNK)
        c.sim.schedule(0.0, lambda: [c.datanodes[n].delete_block(bid) for n in nodes[1:]])
        with pytest.raises(BlockDeleted, match=f"checksum error in block {bid} at offset {2 * CHUNK}"):
            c.read_block(bid)

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, BLOCK * 8 - 1)), max_size=12))
    def test_never_serves_bad_bytes(self, flips):
        c, bid, data, nodes = one_block()
        for rep, bit in flips:
            flip_bit(c.env, data_name(nodes[rep], bid), bit)
        res = c.read_block_result(bid)
        if res.ok:
            assert res.data == data
        else:
            # only a piece bad everywhere with a shared bit position can defeat the vote
            assert len(flips) >= 3

    @settings(max_examples=50, deadline=None)
    @given(st.data())
    def test_vote_is_exact_with_strict_majority(self, draw):
        c, bid, data, nodes = one_block(n=PIECE * 4)
        piece = draw.draw(st.integers(0, 3))
        bits = draw.draw(st.lists(st.integers(0, PIECE * 8 - 1), min_size=3, max_size=3, unique=True))
        extra = draw.draw(st.lists(st.integers(0, PIECE * 8 - 1), max_size=6))
        owners = {}
        for i, b in enumerate(bits):
            owners[b] = {i}
        for b in extra:
            if b not in owners:
                owners[b] = {draw.draw(st.integers(0, 2))}
        for b, reps in owners.items():
            for r in reps:
                flip_bit(c.env, data_name(nodes[r], bid), piece * PIECE * 8 + b)
        res = c.read_block_result(bid)
        assert res.ok and res.data == data and res.voted_chunks == 1


class TestLegacy:
    def test_clean_replica_found(self):
        c, bid, data, nodes = one_block("legacy")
        flip_bit(c.env, data_name(nodes[0], bid), 8 * 100)
        flip_bit(c.env, data_name(nodes[1], bid), 8 * 200_000)
        res = c.read_block_result(bid)
        assert res.ok and res.data == data and res.nodes_tried == 3 and res.remote_chunks == 0

    def test_all_replicas_bad_fails(self):
        c, bid, data, nodes = one_block("legacy")
        for k, n in enumerate(nodes):
            flip_bit(c.env, data_name(n, bid), 8 * (1000 + 70_000 * k))
        res = c.read_block_result(bid)
        assert res.outcome == "failed" and res.nodes_tried == 3

    def test_resume_from_offset(self):
        c, bid, data, nodes = one_block("legacy", resume_from_offset=True)
        flip_bit(c.env, data_name(nodes[0], bid), 8 * (3 * CHUNK + 1))  # late on A
        flip_bit(c.env, data_name(nodes[1], bid), 8 * 10)  # early on B: never read
        flip_bit(c.env, data_name(nodes[2], bid), 8 * 20)
        res = c.read_block_result(bid)
        assert res.ok and res.data == data and res.nodes_tried == 2
        whole = one_block("legacy")
        c2, bid2, _, nodes2 = whole
        flip_bit(c2.env, data_name(nodes2[0], bid2), 8 * (3 * CHUNK + 1))
        flip_bit(c2.env, data_name(nodes2[1], bid2), 8 * 10)
        flip_bit(c2.env, data_name(nodes2[2], bid2), 8 * 20)
        assert c2.read_block_result(bid2).outcome == "failed"

    def test_no_repair_in_legacy(self):
        c, bid, data, nodes = one_block("legacy")
        flip_bit(c.env, data_name(nodes[0], bid), 8 * 100)
        c.read_block_result(bid)
        assert bytes(c.env.read_file(data_name(nodes[0], bid))) != data


class TestScrub:
    def test_clean_report(self):
        c, bid, data, nodes = one_block()
        rep = c.scrub(nodes[0])
        assert rep.repairs == [] and rep.failures == [] and rep.chunks == BLOCK // CHUNK

    def test_one_flip_one_repair_then_clean_reads(self):
        c, bid, data, nodes = one_block()
        flip_bit(c.env, data_name(nodes[1], bid), 8 * 3 * CHUNK + 77)
        rep = c.scrub(nodes[1])
        assert rep.repairs == [(bid, 3 * CHUNK, [0])] and rep.remote_chunks == 1
        res = c.read_block_result(bid, nodes=[nodes[1], nodes[0], nodes[2]])
        assert res.ok and res.repairs == 0 and res.data == data

    def test_periodic_scanner(self):
        c, bid, data, nodes = one_block()
        flip_bit(c.env, data_name(nodes[2], bid), 8 * 100)
        reports = c.start_scanner(1_000.0)
        c.sim.run(until=1_500.0)
        assert sum(len(r.repairs) for r in reports) == 1


class TestRoleMetadata:
    def test_round_trip_and_reload(self):
        c = cluster()
        data = payload(BLOCK * 2)
        c.write_file("/a", data)
        c.write_file("/b", b"hello")
        c.delete_file("/b")
        nn = NameNode.load(c.env, [0, 1, 2])
        assert nn.files == c.namenode.files and set(nn.blocks) == set(c.namenode.blocks)
        assert nn.identity["namespace"] == "1"

    def test_one_bad_copy_falls_back(self):
        c = cluster()
        c.write_file("/a", b"abc")
        for name in ("nn/VERSION", "nn/seen_txid"):
            flip_bit(c.env, name, 40)
        nn = NameNode.load(c.env, [0, 1, 2])
        assert nn.files == c.namenode.files
        assert metafile.repair_meta(c.env, "nn/VERSION") == 1

    def test_all_copies_bad_is_fatal(self):
        c = cluster()
        for path in metafile.copy_names("nn/seen_txid"):
            flip_bit(c.env, path, 3)
        with pytest.raises(MetadataFatal):
            NameNode.load(c.env, [0, 1, 2])

    def test_journal_rolls_segments(self):
        c = cluster(block_size=16)
        c.write_file("/big", payload(16 * 1500))
        assert len(c.env.list("nn/edits_")) == 2
        nn = NameNode.load(c.env, [0, 1, 2])
        assert len(nn.files["/big"]) == 1500


def _rate_check(mode, uber, reads, block, model, seed):
    inj = InjectorConfig(uber, mode="at_rest", seed=seed)
    c = BlockCluster(mode=mode, block_size=block, injector=inj, seed=seed)
    data = payload(block, seed)
    ids = [c.write_file(f"/f{i}", data)[0] for i in range(reads)]
    corrupt_at_rest(c.env)
    fails = sum(not c.read_block_result(b).ok for b in ids)
    p = model(ErrorModelParams(uber, block * 8, PIECE * 8, 3)).exact
    sd = math.sqrt(p * (1 - p) / reads)
    return fails / reads, p, sd


def test_legacy_rate_matches_block_model():
    got, p, sd = _rate_check("legacy", 0.6 / (64 * 1024 * 8), 1500, 64 * 1024, p_block_error, 3)
    assert abs(got - p) <= 3 * sd, (got, p)


def test_direct_rate_matches_majority_model():
    got, p, sd = _rate_check("direct", 3e-4, 1500, 64 * 1024, p_majority_error, 4)
    assert abs(got - p) <= 3 * sd, (got, p)


def test_direct_beats_legacy_on_at_rest_corruption():
    block = 64 * 1024
    uber = 2.0 / (block * 8)
    legacy, _, _ = _rate_check("legacy", uber, 300, block, p_block_error, 5)
    direct, p, _ = _rate_check("direct", uber, 300, block, p_majority_error, 5)
    assert legacy > 0.4 and direct == 0.0 and p < 1e-4


def test_on_read_injection_with_direct_reads():
    inj = InjectorConfig(1e-6, seed=2)
    c = BlockCluster(block_size=BLOCK, injector=inj, seed=2)
    data = payload(BLOCK)
    ids = [c.write_file(f"/f{i}", data)[0] for i in range(20)]
    results = [c.read_block_result(b) for b in ids]
    assert all(r.ok and r.data == data for r in results)
    assert c.env.bits_flipped > 0 and sum(r.repairs for r in results) > 0
    assert inj.scope == "*.data"


def test_latency_grows_with_repairs():
    c, bid, data, nodes = one_block()
    clean = c.read_block_result(bid).latency_ms
    for ch in range(BLOCK // CHUNK):
        flip_bit(c.env, data_name(nodes[0], bid), 8 * ch * CHUNK)
    repaired = c.read_block_result(bid)
    assert repaired.ok and repaired.latency_ms > clean


def test_reads_are_deterministic():
    def run():
        inj = InjectorConfig(2e-6, mode="at_rest", seed=9)
        c = BlockCluster(block_size=BLOCK, injector=inj, seed=9)
        ids = [c.write_file(f"/f{i}", payload(BLOCK, i))[0] for i in range(6)]
        corrupt_at_rest(c.env)
        return [(r.outcome, r.repairs, r.remote_chunks, r.voted_chunks, r.latency_ms)
                for r in map(c.read_block_result, ids)]

    assert run() == run()


def test_sidecar_not_corrupted_by_default_scope():
    inj = InjectorConfig(1e-3, mode="at_rest", seed=1)
    c = BlockCluster(block_size=BLOCK, injector=inj)
    c.write_file("/f", payload(BLOCK))
    rep = corrupt_at_rest(c.env)
    assert rep.files and all(f.endswith(".data") for f in rep.files)
    assert np.all([not f.startswith("nn/") for f in rep.files])
    assert os.path.basename(rep.files[0]).startswith("blk_")
