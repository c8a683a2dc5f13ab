"""An in-process block cluster: one namenode, datanodes and a reading client.

All reads go over the simulated network as wire messages: the client asks
the namenode for block locations, sends ``ReadBlock`` (with the full replica
set) to the first datanode and collects the ``TransferChunk`` stream, checking
every 512 B piece again on receipt.  Writes are placed directly on the chosen
datanodes; the write pipeline is not part of what is modelled.

Legacy clients never revisit a datanode that returned a checksum error.  By
default a retry reads the whole block from the next datanode; with
``resume_from_offset`` it restarts at the failing chunk instead.
"""

import random
from dataclasses import dataclass

from .. import kernels
from ..errors import BlockDeleted, InsufficientReplicas, ReadFailed
from ..fault_injection import InjectorConfig, StorageEnv
from ..sim import Network, Simulator
from ..wire import (CHUNK_CORRUPT, CHUNK_FAILED, CHUNK_MISSING, CHUNK_OK, BlockLocations, GetBlockLocations,
                    ReadBlock, TransferChunk)
from .datanode import CHUNK, PIECE, DataNode, DiskCost, ScrubReport, data_name
from .namenode import NameNode

CLIENT = "client"
DEFAULT_SCOPE = "*.data"


@dataclass
class ReadResult:
    block_id: int
    outcome: str  # ok | failed | deleted
    data: bytearray = None
    repairs: int = 0
    remote_chunks: int = 0
    voted_chunks: int = 0
    corrupt_chunks: int = 0
    latency_ms: float = 0.0
    nodes_tried: int = 0
    error: str = ""

    @property
    def ok(self):
        return self.outcome == "ok"


class _BlockRead:
    def __init__(self, block_id, length, nodes, started):
        self.block_id = block_id
        self.length = length
        self.nodes = list(nodes)
        self.tried = []
        self.current = None
        self.offset = 0
        self.buf = bytearray(length)
        self.have = set()
        self.outcome = None
        self.error = ""
        self.started = started
        self.requests = []  # (datanode, start offset)
        self.nchunks = (length + CHUNK - 1) // CHUNK


class BlockCluster:
    """Namenode, ``datanodes`` datanodes and one client over a shared simulator."""

    def __init__(self, datanodes=3, replication=3, block_size=8 << 20, mode="direct", seed=0, env=None,
                 injector=None, cost=None, latency_ms=(0.1, 0.5), bandwidth_bytes_per_ms=100_000.0,
                 serialize=False, resume_from_offset=False, verify_on_receipt=True, read_timeout_ms=60_000.0):
        if mode not in ("direct", "legacy"):
            raise ValueError(f"mode must be direct or legacy, not {mode!r}")
        if datanodes < replication:
            raise InsufficientReplicas(f"{datanodes} datanodes cannot hold {replication} replicas")
        if isinstance(injector, InjectorConfig) and injector.scope == "*":
            injector.scope = DEFAULT_SCOPE
        self.env = env or StorageEnv(injector=injector)
        if injector is not None and env is not None:
            self.env.injector = injector
        self.mode = mode
        self.block_size = block_size
        self.resume_from_offset = resume_from_offset
        self.verify_on_receipt = verify_on_receipt
        self.read_timeout_ms = read_timeout_ms
        self.sim = Simulator()
        self.net = Network(self.sim, seed=seed, latency_ms=latency_ms, bandwidth_bytes_per_ms=bandwidth_bytes_per_ms,
                           serialize=serialize, links=True)
        self.rng = random.Random(seed)
        self.cost = cost or DiskCost()
        self.datanodes = [DataNode(i, self.env, self.sim, self.net, direct=(mode == "direct"), cost=self.cost)
                          for i in range(datanodes)]
        for dn in self.datanodes:
            self.net.register(dn.id, dn.on_message)
        self.namenode = NameNode(self.env, [dn.id for dn in self.datanodes], replication, seed).format()
        self.namenode.net = self.net
        self.net.register(NameNode.node_id, self.namenode.on_message)
        self.net.register(CLIENT, self._on_client_message)
        self._reads = {}
        self._locations = {}
        self.counters = {"reads": 0, "failed_reads": 0, "repairs": 0, "remote_chunks": 0, "voted_chunks": 0}

    # writes ------------------------------------------------------------------

    def write_file(self, path, data):
        """Split ``data`` into blocks and store every block on ``replication`` datanodes."""
        data = bytes(data)
        ids = []
        live = [dn.id for dn in self.datanodes if dn.id not in self.net.down]
        for start in range(0, max(len(data), 1), self.block_size):
            ids.append(self.write_block(path, data[start:start + self.block_size], live))
        self.namenode.sync()
        return ids

    def write_block(self, path, data, live=None, checksums=None):
        """Store one block; ``checksums`` may be passed in when the caller already has them."""
        meta = self.namenode.add_block(path, len(data), live)
        cks = kernels.crc32_pieces(data, PIECE) if checksums is None else checksums
        for node in meta.datanodes:
            self.datanodes[node].store_block(meta.block_id, data, cks)
        return meta.block_id

    def delete_file(self, path):
        for meta in self.namenode.delete(path):
            for node in meta.datanodes:
                self.datanodes[node].delete_block(meta.block_id)
        self.namenode.sync()

    def replica_files(self, block_id):
        return [data_name(n, block_id) for n in self.namenode.blocks[block_id].datanodes]

    # reads -------------------------------------------------------------------

    def locate(self, path):
        """Ask the namenode (over the network) for ``path``'s block list."""
        self._locations.pop(path, None)
        self.net.send(CLIENT, NameNode.node_id, GetBlockLocations(path))
        self.sim.run_until(lambda: path in self._locations, self.read_timeout_ms)
        if path not in self._locations:
            raise ReadFailed(f"no answer from the namenode for {path}")
        return self._locations.pop(path)

    def read_file(self, path):
        out = bytearray()
        for bid, _, _ in self.locate(path):
            out += self.read_block(bid)
        return bytes(out)

    def read_block(self, block_id):
        res = self.read_block_result(block_id)
        if res.outcome == "deleted":
            raise BlockDeleted(res.error)
        if not res.ok:
            raise ReadFailed(res.error or f"block {block_id} could not be read")
        return res.data

    def read_block_result(self, block_id, nodes=None):
        meta = self.namenode.blocks.get(block_id)
        if meta is None:
            raise ReadFailed(f"unknown block {block_id}")
        nodes = list(meta.datanodes if nodes is None else nodes)
        rd = _BlockRead(block_id, meta.length, nodes, self.sim.now)
        self._reads[block_id] = rd
        self._next_node(rd)
        self.sim.run_until(lambda: rd.outcome is not None, self.read_timeout_ms)
        if rd.outcome is None:
            rd.outcome, rd.error = "failed", f"read of block {block_id} timed out"
        del self._reads[block_id]
        self.sim.run(until=self.sim.now)
        return self._finish(rd)

    def _finish(self, rd):
        res = ReadResult(rd.block_id, rd.outcome, rd.buf if rd.outcome == "ok" else None,
                         latency_ms=self.sim.now - rd.started, nodes_tried=len(rd.tried), error=rd.error)
        for node, start in rd.requests:
            st = self.datanodes[node].read_stats.pop((CLIENT, rd.block_id, start), None)
            if st is None:
                continue
            res.repairs += st.repairs
            res.remote_chunks += st.remote_chunks
            res.voted_chunks += st.voted_chunks
            res.corrupt_chunks += st.corrupt_chunks
            if st.error and not res.error:
                res.error = st.error
        self.counters["reads"] += 1
        self.counters["failed_reads"] += not res.ok
        for k in ("repairs", "remote_chunks", "voted_chunks"):
            self.counters[k] += getattr(res, k)
        return res

    def _next_node(self, rd):
        untried = [n for n in rd.nodes if n not in rd.tried and n not in self.net.down]
        if not untried:
            rd.outcome = "failed"
            rd.error = rd.error or f"block {rd.block_id}: no datanode left to try"
            return
        node = untried[0]
        rd.tried.append(node)
        rd.current = node
        if not self.resume_from_offset:
            rd.offset = 0
            rd.have.clear()
        start = rd.offset
        rd.requests.append((node, start))
        self.net.send(CLIENT, node, ReadBlock(rd.block_id, start, rd.length - start, rd.nodes))

    def _on_client_message(self, src, msg):
        if isinstance(msg, BlockLocations):
            self._locations[msg.path] = msg.blocks
            return
        if not isinstance(msg, TransferChunk):
            return
        rd = self._reads.get(msg.block_id)
        if rd is None or src != rd.current or rd.outcome is not None:
            return
        if msg.status == CHUNK_OK:
            if self.verify_on_receipt and kernels.bad_pieces(msg.data, msg.checksums, PIECE).size:
                self._failover(rd, msg.offset, f"transfer of block {rd.block_id} at {msg.offset} failed verification")
                return
            rd.buf[msg.offset:msg.offset + len(msg.data)] = msg.data
            rd.have.add(msg.offset)
            if len(rd.have) == rd.nchunks or rd.length == 0:
                rd.outcome = "ok"
        elif msg.status == CHUNK_CORRUPT:
            self._failover(rd, msg.offset, f"checksum error in block {rd.block_id} at offset {msg.offset} "
                                           f"on datanode {src}")
        elif msg.status == CHUNK_MISSING:
            rd.outcome = "deleted"
            st = self.datanodes[src].read_stats.get((CLIENT, rd.block_id, rd.requests[-1][1]))
            rd.error = (st and st.error) or f"block {rd.block_id} missing on datanode {src}"
        elif msg.status == CHUNK_FAILED:
            rd.outcome = "failed"
            rd.error = f"block {rd.block_id} at offset {msg.offset}: repair and majority vote failed"

    def _failover(self, rd, offset, error):
        rd.error = error
        rd.offset = offset
        self._next_node(rd)

    # background scanning -----------------------------------------------------

    def scrub(self, node):
        """Scan one datanode now; returns its :class:`ScrubReport`."""
        dn = self.datanodes[node]
        report = ScrubReport(node)
        done = []
        dn.spawn(dn.scrub_task(self._peers, report), done.append)
        self.sim.run_until(lambda: bool(done))
        return report

    def start_scanner(self, interval_ms, reports=None):
        """Scrub every datanode each ``interval_ms`` of simulated time."""
        reports = reports if reports is not None else []

        def tick():
            for dn in self.datanodes:
                report = ScrubReport(dn.id)
                dn.spawn(dn.scrub_task(self._peers, report), reports.append)
            self.sim.schedule(interval_ms, tick)

        self.sim.schedule(interval_ms, tick)
        return reports

    def _peers(self, block_id):
        meta = self.namenode.blocks.get(block_id)
        return list(meta.datanodes) if meta else []

