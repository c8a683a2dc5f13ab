"""Length-prefixed, versioned wire messages for both clusters.

Frame: ``u32 length`` (of everything after it), ``u8 version``, ``u8 kind``,
then the message fields in declaration order.  Field encodings:

=========  ====================================================
u8/u32/u64 fixed-width little-endian integers
f64        IEEE double
bytes      varint length + raw bytes (``str`` is UTF-8 bytes)
ids        varint count + u32 each
u32s       varint count + u32 each (checksum arrays)
ranges     varint count + (bytes low, bytes high, u64 file, u64 offset)
records    varint count + one SST record encoding each
blocks     varint count + (u64 block id, u64 length, ids datanodes)
=========  ====================================================
"""

import struct
from dataclasses import dataclass, field, fields

import numpy as np

from .lsm.format import CorruptKeyRange, Record, encode_record, get_varint, put_varint

VERSION = 1
_LEN = struct.Struct("<I")
_SCALARS = {"u8": struct.Struct("<B"), "u32": struct.Struct("<I"), "u64": struct.Struct("<Q"),
            "f64": struct.Struct("<d")}


class WireError(ValueError):
    pass


def _put_bytes(out, b):
    put_varint(out, len(b))
    out += b


def _get_bytes(buf, pos):
    n, pos = get_varint(buf, pos)
    if pos + n > len(buf):
        raise WireError("truncated field")
    return bytes(buf[pos:pos + n]), pos + n


def _enc(out, typ, v):
    if typ in _SCALARS:
        out += _SCALARS[typ].pack(v)
    elif typ == "bytes":
        _put_bytes(out, bytes(v))
    elif typ == "str":
        _put_bytes(out, v.encode())
    elif typ in ("ids", "u32s"):
        arr = np.asarray(v, dtype="<u4")
        put_varint(out, arr.size)
        out += arr.tobytes()
    elif typ == "ranges":
        put_varint(out, len(v))
        for r in v:
            _put_bytes(out, r.low)
            _put_bytes(out, r.high)
            out += struct.pack("<QQ", r.file_id, r.block_offset)
    elif typ == "records":
        put_varint(out, len(v))
        for rec in v:
            encode_record(out, rec)
    elif typ == "blocks":
        put_varint(out, len(v))
        for bid, length, nodes in v:
            out += struct.pack("<QQ", bid, length)
            _enc(out, "ids", nodes)
    else:
        raise WireError(f"unknown field type {typ}")


def _dec(buf, pos, typ):
    if typ in _SCALARS:
        s = _SCALARS[typ]
        return s.unpack_from(buf, pos)[0], pos + s.size
    if typ == "bytes":
        return _get_bytes(buf, pos)
    if typ == "str":
        b, pos = _get_bytes(buf, pos)
        return b.decode(), pos
    if typ in ("ids", "u32s"):
        n, pos = get_varint(buf, pos)
        arr = np.frombuffer(bytes(buf[pos:pos + 4 * n]), dtype="<u4").astype(np.uint32)
        if arr.size != n:
            raise WireError("truncated array")
        return (arr.tolist() if typ == "ids" else arr), pos + 4 * n
    if typ == "ranges":
        n, pos = get_varint(buf, pos)
        out = []
        for _ in range(n):
            low, pos = _get_bytes(buf, pos)
            high, pos = _get_bytes(buf, pos)
            fid, off = struct.unpack_from("<QQ", buf, pos)
            pos += 16
            out.append(CorruptKeyRange(low, high, fid, off))
        return out, pos
    if typ == "records":
        n, pos = get_varint(buf, pos)
        out = []
        for _ in range(n):
            key, pos = _get_bytes(buf, pos)
            seq = struct.unpack_from("<Q", buf, pos)[0]
            kind = buf[pos + 8]
            value, pos = _get_bytes(buf, pos + 9)
            out.append(Record(key, seq, kind, value))
        return out, pos
    if typ == "blocks":
        n, pos = get_varint(buf, pos)
        out = []
        for _ in range(n):
            bid, length = struct.unpack_from("<QQ", buf, pos)
            nodes, pos = _dec(buf, pos + 16, "ids")
            out.append((bid, length, nodes))
        return out, pos
    raise WireError(f"unknown field type {typ}")


_REGISTRY = {}


def message(kind):
    """Class decorator: a dataclass whose fields carry ``metadata={'wire': type}``."""

    def wrap(cls):
        cls = dataclass(cls)
        cls.KIND = kind
        cls._wire = [(f.name, f.metadata["wire"]) for f in fields(cls)]
        _REGISTRY[kind] = cls
        return cls

    return wrap


def w(typ, **kw):
    return field(metadata={"wire": typ}, **kw)


def encode(msg):
    out = bytearray(struct.pack("<BB", VERSION, msg.KIND))
    for name, typ in msg._wire:
        _enc(out, typ, getattr(msg, name))
    return _LEN.pack(len(out)) + bytes(out)


def decode(frame):
    """Decode one frame; raises :class:`WireError` on a bad length, version or kind."""
    buf = memoryview(frame)
    if len(buf) < 6:
        raise WireError("short frame")
    (n,) = _LEN.unpack_from(buf, 0)
    if n != len(buf) - 4:
        raise WireError("length prefix does not match frame")
    version, kind = buf[4], buf[5]
    if version != VERSION:
        raise WireError(f"unsupported wire version {version}")
    cls = _REGISTRY.get(kind)
    if cls is None:
        raise WireError(f"unknown message kind {kind}")
    pos, vals = 6, {}
    try:
        for name, typ in cls._wire:
            vals[name], pos = _dec(buf, pos, typ)
    except (IndexError, struct.error) as exc:
        raise WireError("truncated message") from exc
    if pos != len(buf):
        raise WireError("trailing bytes in message")
    return cls(**vals)


# -- replicated shard ----------------------------------------------------------


@message(1)
class AppendEntry:
    """One log entry (empty ``entry`` = commit-index heartbeat)."""

    leader: int = w("u32")
    index: int = w("u64")
    commit: int = w("u64")
    entry: bytes = w("bytes")


@message(2)
class Ack:
    replica: int = w("u32")
    index: int = w("u64")


@message(3)
class PatchTransfer:
    request_id: int = w("u64")
    sender: int = w("u32")
    index: int = w("u64")
    records: list = w("records")
    crc: int = w("u32")


@message(4)
class PatchAck:
    request_id: int = w("u64")
    replica: int = w("u32")


@message(5)
class CorruptionReport:
    replica: int = w("u32")
    request_id: int = w("u64")
    ranges: list = w("ranges")


# -- block store -------------------------------------------------------------

CHUNK_OK = 0
CHUNK_CORRUPT = 1
CHUNK_MISSING = 2
CHUNK_FAILED = 3


@message(10)
class GetBlockLocations:
    path: str = w("str")


@message(11)
class BlockLocations:
    path: str = w("str")
    blocks: list = w("blocks")


@message(12)
class ReadBlock:
    """Client request to the serving datanode; ``peers`` is the full replica set."""

    block_id: int = w("u64")
    offset: int = w("u64")
    length: int = w("u64")
    peers: list = w("ids")


@message(13)
class TransferChunk:
    block_id: int = w("u64")
    offset: int = w("u64")
    status: int = w("u8")
    data: bytes = w("bytes")
    checksums: object = w("u32s")


@message(14)
class FetchChunk:
    block_id: int = w("u64")
    offset: int = w("u64")
    length: int = w("u64")


@message(15)
class ChunkReply:
    block_id: int = w("u64")
    offset: int = w("u64")
    status: int = w("u8")
    data: bytes = w("bytes")
