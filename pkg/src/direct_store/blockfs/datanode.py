"""Datanodes: immutable block replicas with a per-512 B checksum sidecar.

On disk a replica is two files, ``dn<id>/blk_<block>.data`` holding the payload
and ``dn<id>/blk_<block>.crc`` holding one little-endian CRC32 per 512-byte
checksum piece (the last piece may be short).

Reads stream 64 KiB transfer chunks.  A chunk whose pieces fail verification
is handled according to the node's mode:

``direct``
    fetch the same 64 KiB chunk from the next replica, take every failing
    piece that verifies there, then the next replica for whatever is left;
    if a piece is bad on the first three versions, vote bit by bit, re-verify
    and give up if the vote does not check out.  The repaired chunk replaces
    the local one (a single chunk-sized write), so the repair persists.
``legacy``
    abort the stream with ``CHUNK_CORRUPT``; the client moves on to another
    datanode.

Node logic runs as generators inside the discrete-event simulator: a task
yields a float to spend simulated time, or ``(peer, FetchChunk)`` to wait for
the peer's :class:`~direct_store.wire.ChunkReply` (``None`` on timeout).
"""

import itertools
import zlib
from collections import defaultdict, deque
from dataclasses import dataclass, field

import numpy as np

from .. import kernels
from ..errors import BlockDeleted
from ..wire import (CHUNK_CORRUPT, CHUNK_FAILED, CHUNK_MISSING, CHUNK_OK, ChunkReply, FetchChunk, ReadBlock,
                    TransferChunk)

PIECE = 512
CHUNK = 64 * 1024
_NO_CHECKSUMS = np.empty(0, dtype=np.uint32)


def data_name(node, block_id):
    return f"dn{node}/blk_{block_id}.data"


def crc_name(node, block_id):
    return f"dn{node}/blk_{block_id}.crc"


def encode_sidecar(checksums):
    return np.asarray(checksums, dtype="<u4").tobytes()


def decode_sidecar(raw):
    return np.frombuffer(raw, dtype="<u4")


def checksum_count(length):
    return (length + PIECE - 1) // PIECE


@dataclass
class DiskCost:
    """Simulated device and CPU time (milliseconds)."""

    seek_ms: float = 0.05
    read_byte_ms: float = 2e-6
    write_byte_ms: float = 4e-6
    crc_byte_ms: float = 5e-7
    vote_byte_ms: float = 2e-6

    def read(self, nbytes):
        return self.seek_ms + nbytes * (self.read_byte_ms + self.crc_byte_ms)

    def write(self, nbytes):
        return self.seek_ms + nbytes * self.write_byte_ms


@dataclass
class ReadStats:
    """What the serving datanode did for one read request."""

    corrupt_chunks: int = 0
    repairs: int = 0
    remote_chunks: int = 0
    peer_pieces: int = 0
    voted_chunks: int = 0
    error: str = ""
    repaired: list = field(default_factory=list)  # (block, offset, bad piece indices)


class DataNode:
    def __init__(self, node_id, env, sim, net=None, direct=True, cost=None, fetch_timeout_ms=100.0):
        self.id = node_id
        self.env = env
        self.sim = sim
        self.net = net
        self.direct = direct
        self.cost = cost or DiskCost()
        self.fetch_timeout_ms = fetch_timeout_ms
        self.read_stats = {}
        self._waiting = defaultdict(deque)
        self._tags = itertools.count()

    # storage -----------------------------------------------------------------

    def store_block(self, block_id, data, checksums=None):
        if checksums is None:
            checksums = kernels.crc32_pieces(data, PIECE)
        if len(checksums) != checksum_count(len(data)):
            raise ValueError("checksum array does not cover the payload")
        self.env.write_file(data_name(self.id, block_id), data)
        self.env.write_file(crc_name(self.id, block_id), encode_sidecar(checksums))

    def has_block(self, block_id):
        return self.env.exists(data_name(self.id, block_id))

    def delete_block(self, block_id):
        self.env.delete(data_name(self.id, block_id))
        self.env.delete(crc_name(self.id, block_id))

    def block_ids(self):
        prefix = f"dn{self.id}/blk_"
        return sorted(int(n[len(prefix):-5]) for n in self.env.list(prefix) if n.endswith(".data"))

    def block_length(self, block_id):
        return self.env.size(data_name(self.id, block_id))

    def checksums(self, block_id):
        """The block's whole checksum array, read from its sidecar."""
        name = crc_name(self.id, block_id)
        return decode_sidecar(self.env.read(name, 0, self.env.size(name)))

    def read_chunk(self, block_id, offset, length, checksums=None):
        """Local chunk plus its checksums and the indices of failing pieces.

        ``checksums`` is the block's sidecar if the caller already loaded it.
        """
        data = self.env.read(data_name(self.id, block_id), offset, length)
        first = offset // PIECE
        count = checksum_count(length)
        if checksums is None:
            cks = decode_sidecar(self.env.read(crc_name(self.id, block_id), first * 4, count * 4))
        else:
            cks = checksums[first:first + count]
        return data, cks, kernels.bad_pieces(data, cks, PIECE)

    # task plumbing ---------------------------------------------------------

    def spawn(self, gen, on_done=None):
        self._step(gen, None, on_done)

    def _step(self, gen, value, on_done):
        try:
            req = gen.send(value)
        except StopIteration as stop:
            if on_done is not None:
                on_done(stop.value)
            return
        if isinstance(req, float):
            self.sim.schedule(req, self._step, gen, None, on_done)
            return
        peer, msg = req
        tag = next(self._tags)
        self._waiting[(peer, msg.block_id, msg.offset)].append((tag, gen, on_done))
        self.net.send(self.id, peer, msg)
        self.sim.schedule(self.fetch_timeout_ms, self._fetch_timeout, (peer, msg.block_id, msg.offset), tag)

    def _fetch_timeout(self, key, tag):
        queue = self._waiting.get(key)
        if not queue:
            return
        for i, (t, gen, on_done) in enumerate(queue):
            if t == tag:
                del queue[i]
                self._step(gen, None, on_done)
                return

    def on_message(self, src, msg):
        if isinstance(msg, ReadBlock):
            stats = self.read_stats[(src, msg.block_id, msg.offset)] = ReadStats()
            self.spawn(self._serve(src, msg, stats))
        elif isinstance(msg, FetchChunk):
            self.spawn(self._serve_fetch(src, msg))
        elif isinstance(msg, ChunkReply):
            queue = self._waiting.get((src, msg.block_id, msg.offset))
            if queue:
                _, gen, on_done = queue.popleft()
                self._step(gen, msg, on_done)

    # serving ---------------------------------------------------------------

    def _send_chunk(self, dst, block_id, offset, status, data=b"", checksums=_NO_CHECKSUMS):
        self.net.send(self.id, dst, TransferChunk(block_id, offset, status, data, checksums))

    def _serve(self, client, req, stats):
        bid = req.block_id
        off = req.offset - req.offset % CHUNK
        end = req.offset + req.length
        try:
            sidecar = self.checksums(bid)
        except (FileNotFoundError, OSError):
            self._send_chunk(client, bid, off, CHUNK_MISSING)
            return
        while off < end:
            n = min(CHUNK, end - off)
            yield self.cost.read(n)
            try:
                data, cks, bad = self.read_chunk(bid, off, n, sidecar)
            except (FileNotFoundError, OSError):
                self._send_chunk(client, bid, off, CHUNK_MISSING)
                return
            if bad.size:
                stats.corrupt_chunks += 1
                if not self.direct:
                    stats.error = f"checksum error in block {bid} at offset {off} on datanode {self.id}"
                    self._send_chunk(client, bid, off, CHUNK_CORRUPT)
                    return
                try:
                    data = yield from self.repair_chunk(bid, off, data, cks, bad, req.peers, stats)
                except BlockDeleted as exc:
                    stats.error = str(exc)
                    self._send_chunk(client, bid, off, CHUNK_MISSING)
                    return
                if data is None:
                    self._send_chunk(client, bid, off, CHUNK_FAILED)
                    return
            self._send_chunk(client, bid, off, CHUNK_OK, bytes(data), cks)
            off += n

    def _serve_fetch(self, src, req):
        yield self.cost.read(req.length)
        try:
            data, _, bad = self.read_chunk(req.block_id, req.offset, req.length)
        except (FileNotFoundError, OSError):
            self.net.send(self.id, src, ChunkReply(req.block_id, req.offset, CHUNK_MISSING, b""))
            return
        status = CHUNK_CORRUPT if bad.size else CHUNK_OK
        self.net.send(self.id, src, ChunkReply(req.block_id, req.offset, status, bytes(data)))

    def repair_chunk(self, block_id, offset, data, cks, bad, peers, stats):
        """Generator: repaired chunk bytes, or ``None`` when every strategy fails.

        Raises :class:`BlockDeleted` carrying the original checksum error if a
        peer no longer has the block.
        """
        original = (f"checksum error in block {block_id} at offset {offset + int(bad[0]) * PIECE} "
                    f"on datanode {self.id}")
        n = len(data)
        buf = bytearray(data)
        versions = [bytes(data)]
        remaining = np.asarray(bad, dtype=np.int64)
        for peer in peers:
            if peer == self.id:
                continue
            if not remaining.size:
                break
            reply = yield (peer, FetchChunk(block_id, offset, n))
            if reply is None or reply.status == CHUNK_FAILED:
                continue
            if reply.status == CHUNK_MISSING:
                raise BlockDeleted(original)
            stats.remote_chunks += 1
            other = reply.data
            if len(other) != n:
                continue
            versions.append(other)
            yield self.cost.crc_byte_ms * len(remaining) * PIECE
            theirs = kernels.crc32_pieces(other, PIECE)
            good = theirs[remaining] == cks[remaining]
            _copy_pieces(buf, other, remaining[good])
            stats.peer_pieces += int(good.sum())
            remaining = remaining[~good]
        if remaining.size:
            if len(versions) < 3:
                return None
            a, b, c = versions[:3]
            yield self.cost.vote_byte_ms * len(remaining) * PIECE
            for i in remaining.tolist():
                s = slice(i * PIECE, (i + 1) * PIECE)
                voted = kernels.majority3(a[s], b[s], c[s])
                if zlib.crc32(voted) != int(cks[i]):
                    return None
                buf[s] = voted
                stats.voted_chunks += 1
        self.env.write_at(data_name(self.id, block_id), offset, bytes(buf))
        yield self.cost.write(n)
        stats.repairs += 1
        stats.repaired.append((block_id, offset, [int(i) for i in bad]))
        return buf

    # background scanner ------------------------------------------------------

    def scrub_task(self, locations, report):
        """Generator: verify every local chunk and repair failures through the read path."""
        for bid in self.block_ids():
            try:
                length = self.block_length(bid)
                sidecar = self.checksums(bid)
            except FileNotFoundError:
                continue
            report.blocks += 1
            for off in range(0, length, CHUNK):
                n = min(CHUNK, length - off)
                yield self.cost.read(n)
                try:
                    data, cks, bad = self.read_chunk(bid, off, n, sidecar)
                except (FileNotFoundError, OSError):
                    break
                report.chunks += 1
                if not bad.size:
                    continue
                stats = ReadStats()
                try:
                    fixed = yield from self.repair_chunk(bid, off, data, cks, bad, locations(bid), stats)
                except BlockDeleted:
                    break
                if fixed is None:
                    report.failures.append((bid, off))
                else:
                    report.repairs.append((bid, off, [int(i) for i in bad]))
                    report.remote_chunks += stats.remote_chunks
        return report


def _copy_pieces(buf, src, idx):
    """Copy 512 B pieces ``idx`` of ``src`` into ``buf`` (same length)."""
    if not idx.size:
        return
    n = len(buf)
    full = n // PIECE
    dst = np.frombuffer(buf, dtype=np.uint8)
    srcv = np.frombuffer(src, dtype=np.uint8)
    whole = idx[idx < full]
    if whole.size:
        dst[:full * PIECE].reshape(full, PIECE)[whole] = srcv[:full * PIECE].reshape(full, PIECE)[whole]
    if idx[-1] >= full:
        dst[full * PIECE:] = srcv[full * PIECE:]


@dataclass
class ScrubReport:
    datanode: int
    blocks: int = 0
    chunks: int = 0
    remote_chunks: int = 0
    repairs: list = field(default_factory=list)
    failures: list = field(default_factory=list)
