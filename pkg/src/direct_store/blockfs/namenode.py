"""Namespace server: file -> blocks, block -> datanodes, plus its role files.

The namespace is rebuilt at start-up from the edit journal.  Two small role
files guard it: ``VERSION`` (layout and namespace identity) and
``seen_txid`` (the last transaction the journal is known to hold).  Both are
kept as three checksummed copies through :mod:`direct_store.metafile`.

The journal is a local stand-in for a replicated journal quorum: segment files
``edits_<n>.log`` of CRC-framed records, rolled every ``SEGMENT_TXNS``
transactions.  Log files are outside the injector's default scope.
"""

import json
import random
import struct
import zlib
from dataclasses import dataclass, field

from .. import metafile
from ..errors import InsufficientReplicas, MetadataFatal
from ..wire import BlockLocations, GetBlockLocations

LAYOUT_VERSION = 1
SEGMENT_TXNS = 1024
_REC = struct.Struct("<QI")  # txid, length; payload; u32 crc over header + payload


@dataclass
class BlockMeta:
    block_id: int
    length: int
    datanodes: list = field(default_factory=list)


def encode_version(namespace_id, cluster_id):
    return f"layout={LAYOUT_VERSION}\nnamespace={namespace_id}\ncluster={cluster_id}\n".encode()


def decode_version(payload):
    out = {}
    for line in payload.decode().splitlines():
        k, _, v = line.partition("=")
        out[k] = v
    if int(out.get("layout", -1)) != LAYOUT_VERSION:
        raise MetadataFatal(f"unsupported layout {out.get('layout')}")
    return out


class Journal:
    """Append-only edit log split into fixed-size segments."""

    def __init__(self, env, prefix):
        self.env = env
        self.prefix = prefix
        self.txid = 0
        self._pending = bytearray()
        self._segment = 0

    def _name(self, seg):
        return f"{self.prefix}/edits_{seg:06d}.log"

    def append(self, op):
        self.txid += 1
        seg = (self.txid - 1) // SEGMENT_TXNS
        if seg != self._segment:
            self.sync()
            self._segment, self._pending = seg, bytearray()
        body = json.dumps(op, separators=(",", ":")).encode()
        head = _REC.pack(self.txid, len(body))
        self._pending += head + body + struct.pack("<I", zlib.crc32(head + body))
        return self.txid

    def sync(self):
        if self._pending:
            self.env.write_file(self._name(self._segment), bytes(self._pending))

    def replay(self, upto):
        """Yield ``(txid, op)`` for every journaled transaction up to ``upto``."""
        txid, seg = 0, 0
        while txid < upto:
            name = self._name(seg)
            if not self.env.exists(name):
                raise MetadataFatal(f"journal segment {name} missing before txid {upto}")
            raw = bytes(self.env.read_file(name))
            pos = 0
            while pos < len(raw) and txid < upto:
                tx, n = _REC.unpack_from(raw, pos)
                end = pos + _REC.size + n
                (crc,) = struct.unpack_from("<I", raw, end)
                if zlib.crc32(raw[pos:end]) != crc or tx != txid + 1:
                    raise MetadataFatal(f"journal record {txid + 1} failed verification")
                txid = tx
                yield tx, json.loads(raw[pos + _REC.size:end])
                pos = end + 4
            self._pending = bytearray(raw[:pos])
            self._segment = seg
            seg += 1
        self.txid = txid


class NameNode:
    """Block allocation and lookup; answers :class:`GetBlockLocations` on the network."""

    node_id = "nn"

    def __init__(self, env, datanodes, replication=3, seed=0, prefix="nn"):
        self.env = env
        self.prefix = prefix
        self.datanodes = list(datanodes)
        self.replication = replication
        self.rng = random.Random(seed)
        self.files = {}
        self.blocks = {}
        self.next_block = 1
        self.journal = Journal(env, prefix)
        self.net = None

    # role files -------------------------------------------------------------

    @property
    def version_file(self):
        return f"{self.prefix}/VERSION"

    @property
    def seen_txid_file(self):
        return f"{self.prefix}/seen_txid"

    def format(self, namespace_id=1, cluster_id="desk"):
        metafile.write_meta(self.env, self.version_file, encode_version(namespace_id, cluster_id))
        metafile.write_meta(self.env, self.seen_txid_file, struct.pack("<Q", 0))
        return self

    @classmethod
    def load(cls, env, datanodes, replication=3, seed=0, prefix="nn"):
        """Rebuild the namespace from the role files and the journal."""
        nn = cls(env, datanodes, replication, seed, prefix)
        nn.identity = decode_version(metafile.read_meta(env, nn.version_file))
        (seen,) = struct.unpack("<Q", metafile.read_meta(env, nn.seen_txid_file))
        for _, op in nn.journal.replay(seen):
            nn._apply(op)
        return nn

    def sync(self):
        self.journal.sync()
        metafile.write_meta(self.env, self.seen_txid_file, struct.pack("<Q", self.journal.txid))

    # namespace --------------------------------------------------------------

    def _apply(self, op):
        kind = op["op"]
        if kind == "add_block":
            self.blocks[op["block"]] = BlockMeta(op["block"], op["length"], list(op["nodes"]))
            self.files.setdefault(op["path"], []).append(op["block"])
            self.next_block = max(self.next_block, op["block"] + 1)
        elif kind == "delete":
            for bid in self.files.pop(op["path"], []):
                self.blocks.pop(bid, None)
        else:
            raise MetadataFatal(f"unknown journal op {kind!r}")

    def _log(self, op):
        self.journal.append(op)
        self._apply(op)

    def add_block(self, path, length, live=None):
        live = [d for d in self.datanodes if live is None or d in live]
        if len(live) < self.replication:
            raise InsufficientReplicas(f"{len(live)} datanodes available, {self.replication} needed")
        nodes = self.rng.sample(live, self.replication)
        bid = self.next_block
        self._log({"op": "add_block", "path": path, "block": bid, "length": length, "nodes": nodes})
        return self.blocks[bid]

    def delete(self, path):
        blocks = [self.blocks[b] for b in self.files.get(path, [])]
        self._log({"op": "delete", "path": path})
        return blocks

    def locations(self, path):
        return [(b, self.blocks[b].length, list(self.blocks[b].datanodes)) for b in self.files.get(path, [])]

    def on_message(self, src, msg):
        if isinstance(msg, GetBlockLocations):
            self.net.send(self.node_id, src, BlockLocations(msg.path, self.locations(msg.path)))
