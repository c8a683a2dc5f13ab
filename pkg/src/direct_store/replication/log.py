"""Replicated-log entries: write batches and patch requests, each CRC-protected.

Entry layout: ``u64 index, u8 type, payload, u32 crc32`` where the CRC covers
everything before it.  A write batch is ``varint n`` followed by ``n`` times
``u8 op, varint key_len, key, varint value_len, value``.  A patch request is
``u32 corrupt replica, u64 request id`` followed by the wire ``ranges``
encoding; it always occupies an entry of its own.
"""

import struct
import zlib
from dataclasses import dataclass, field

from ..errors import LogCorruption
from ..lsm.format import DELETE, PUT, get_varint, put_varint
from ..wire import _dec, _enc

WRITE_BATCH = 0
PATCH_REQUEST = 1

SEQ_SHIFT = 16
MAX_BATCH = 1 << SEQ_SHIFT


def seq_of(index, op=0):
    """Sequence number of op ``op`` of log entry ``index``."""
    return (index << SEQ_SHIFT) | op


def index_of(seq):
    return seq >> SEQ_SHIFT


@dataclass
class WriteBatch:
    ops: list = field(default_factory=list)  # (kind, key, value)

    def put(self, key, value):
        self.ops.append((PUT, bytes(key), bytes(value)))
        return self

    def delete(self, key):
        self.ops.append((DELETE, bytes(key), b""))
        return self


@dataclass
class PatchRequest:
    corrupt_replica: int
    request_id: int
    ranges: list

    def __post_init__(self):
        if not self.ranges:
            raise ValueError("a patch request needs at least one range")


def encode_entry(index, payload):
    out = bytearray(struct.pack("<Q", index))
    if isinstance(payload, WriteBatch):
        if len(payload.ops) > MAX_BATCH:
            raise ValueError("write batch too large")
        out.append(WRITE_BATCH)
        put_varint(out, len(payload.ops))
        for kind, key, value in payload.ops:
            out.append(kind)
            put_varint(out, len(key))
            out += key
            put_varint(out, len(value))
            out += value
    else:
        out.append(PATCH_REQUEST)
        out += struct.pack("<IQ", payload.corrupt_replica, payload.request_id)
        _enc(out, "ranges", payload.ranges)
    return bytes(out) + struct.pack("<I", zlib.crc32(out))


def decode_entry(raw):
    """Return ``(index, payload)``; :class:`LogCorruption` if the CRC fails."""
    raw = bytes(raw)
    if len(raw) < 13 or zlib.crc32(raw[:-4]) != struct.unpack_from("<I", raw, len(raw) - 4)[0]:
        raise LogCorruption("log entry failed its checksum")
    (index,) = struct.unpack_from("<Q", raw, 0)
    kind = raw[8]
    body = raw[:-4]
    if kind == WRITE_BATCH:
        n, pos = get_varint(body, 9)
        ops = []
        for _ in range(n):
            op = body[pos]
            klen, pos = get_varint(body, pos + 1)
            key = body[pos:pos + klen]
            vlen, pos = get_varint(body, pos + klen)
            ops.append((op, key, body[pos:pos + vlen]))
            pos += vlen
        return index, WriteBatch(ops)
    replica, req = struct.unpack_from("<IQ", body, 9)
    ranges, _ = _dec(body, 21, "ranges")
    return index, PatchRequest(replica, req, ranges)
