"""SST file encoding.

Layout (little-endian throughout; see ``docs/sst_format.md``)::

    [data block 0] ... [data block n-1]      each: varint count, records, crc32
    [zero pad to 4 KiB]
    [meta copy A: index block, props block]  each block ends with its own crc32
    [zero pad to 4 KiB]
    [meta copy B: identical bytes]
    [footer A][zero pad][footer B]           footers sit exactly one page apart

A record is ``varint key_len, key, u64 sequence, u8 kind, varint value_len,
value``.  An index entry is ``varint sep_len, sep, u64 offset, u32 length``
where ``sep`` is the last user key of the block.  All versions of one user key
stay inside one data block, so the separators of blocks ``i-1`` and ``i``
bracket every key block ``i`` can hold.
"""

import bisect
import struct
import zlib
from dataclasses import dataclass
from typing import NamedTuple

from ..errors import CorruptionError, MetadataFatal

MAGIC = b"DSSTv001"
PAGE = 4096
DEFAULT_BLOCK_CAPACITY = 8192

DELETE = 0
PUT = 1

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_FOOTER_BODY = struct.Struct("<8sQIQIQIQI")
FOOTER_SIZE = _FOOTER_BODY.size + 4
TAIL_SIZE = PAGE + FOOTER_SIZE


class Record(NamedTuple):
    key: bytes
    seq: int
    kind: int
    value: bytes = b""

    @property
    def is_delete(self):
        return self.kind == DELETE


def sort_key(rec):
    return (rec.key, -rec.seq)


# -- varints -----------------------------------------------------------------


def put_varint(out, n):
    while n >= 0x80:
        out.append((n & 0x7F) | 0x80)
        n >>= 7
    out.append(n)


def get_varint(buf, pos):
    shift = result = 0
    while True:
        b = buf[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if b < 0x80:
            return result, pos
        shift += 7
        if shift > 63:
            raise ValueError("varint too long")


def encode_record(out, rec):
    put_varint(out, len(rec.key))
    out += rec.key
    out += _U64.pack(rec.seq)
    out.append(rec.kind)
    put_varint(out, len(rec.value))
    out += rec.value


def decode_records(body):
    count, pos = get_varint(body, 0)
    recs = []
    for _ in range(count):
        klen, pos = get_varint(body, pos)
        key = bytes(body[pos:pos + klen])
        pos += klen
        (seq,) = _U64.unpack_from(body, pos)
        kind = body[pos + 8]
        vlen, pos = get_varint(body, pos + 9)
        recs.append(Record(key, seq, kind, bytes(body[pos:pos + vlen])))
        pos += vlen
    if pos != len(body):
        raise ValueError("trailing bytes in block")
    return recs


def seal(body):
    """Append the CRC32 of ``body``."""
    return bytes(body) + _U32.pack(zlib.crc32(body))


def unseal(raw):
    """Return the body if the trailing CRC32 verifies, else ``None``."""
    if len(raw) < 4:
        return None
    raw = memoryview(raw)
    body = raw[:-4]
    if zlib.crc32(body) != _U32.unpack_from(raw, len(raw) - 4)[0]:
        return None
    return body


# -- blocks ------------------------------------------------------------------


@dataclass(frozen=True)
class IndexEntry:
    sep: bytes
    offset: int
    length: int


@dataclass(frozen=True)
class Props:
    file_id: int
    level: int
    num_records: int
    smallest: bytes
    largest: bytes
    min_seq: int
    max_seq: int


def encode_index(entries):
    out = bytearray()
    put_varint(out, len(entries))
    for e in entries:
        put_varint(out, len(e.sep))
        out += e.sep
        out += struct.pack("<QI", e.offset, e.length)
    return seal(out)


def decode_index(body):
    n, pos = get_varint(body, 0)
    entries = []
    for _ in range(n):
        slen, pos = get_varint(body, pos)
        sep = bytes(body[pos:pos + slen])
        off, ln = struct.unpack_from("<QI", body, pos + slen)
        pos += slen + 12
        entries.append(IndexEntry(sep, off, ln))
    if pos != len(body):
        raise ValueError("trailing bytes in index")
    return entries


def encode_props(p):
    out = bytearray(struct.pack("<QBQ", p.file_id, p.level, p.num_records))
    for k in (p.smallest, p.largest):
        put_varint(out, len(k))
        out += k
    out += struct.pack("<QQ", p.min_seq, p.max_seq)
    return seal(out)


def decode_props(body):
    file_id, level, num = struct.unpack_from("<QBQ", body, 0)
    pos = 17
    keys = []
    for _ in range(2):
        n, pos = get_varint(body, pos)
        keys.append(bytes(body[pos:pos + n]))
        pos += n
    lo, hi = struct.unpack_from("<QQ", body, pos)
    if pos + 16 != len(body):
        raise ValueError("trailing bytes in props")
    return Props(file_id, level, num, keys[0], keys[1], lo, hi)


def _pad_to_page(out):
    out += bytes(-len(out) % PAGE)


@dataclass(frozen=True)
class BlockInfo:
    """Ground truth about one written data block (kept for tests and oracles)."""

    offset: int
    length: int
    first_key: bytes
    last_key: bytes
    keys: tuple


def build_sst(records, file_id, level, block_capacity=DEFAULT_BLOCK_CAPACITY):
    """Encode sorted records into SST bytes; returns ``(bytes, index, props, blocks)``.

    ``records`` must be sorted by key ascending, sequence descending.  A new
    block starts before a user key whose versions would overflow
    ``block_capacity``; one key's versions are never split.
    """
    if not records:
        raise ValueError("an SST needs at least one record")
    out = bytearray()
    entries, blocks = [], []
    groups = []
    for rec in records:
        if groups and groups[-1][0].key == rec.key:
            groups[-1].append(rec)
        else:
            groups.append([rec])

    body, count, keys = bytearray(), 0, []

    def cut():
        nonlocal body, count, keys
        head = bytearray()
        put_varint(head, count)
        raw = seal(head + body)
        entries.append(IndexEntry(keys[-1], len(out), len(raw)))
        blocks.append(BlockInfo(len(out), len(raw), keys[0], keys[-1], tuple(keys)))
        out.extend(raw)
        body, count, keys = bytearray(), 0, []

    for group in groups:
        enc = bytearray()
        for rec in group:
            encode_record(enc, rec)
        if count and len(body) + len(enc) + 9 > block_capacity:
            cut()
        body += enc
        count += len(group)
        keys.append(group[0].key)
    cut()

    seqs = [r.seq for r in records]
    props = Props(file_id, level, len(records), records[0].key, records[-1].key, min(seqs), max(seqs))
    index_raw, props_raw = encode_index(entries), encode_props(props)
    locs = []
    for _ in range(2):
        _pad_to_page(out)
        locs += [(len(out), len(index_raw))]
        out += index_raw
        locs += [(len(out), len(props_raw))]
        out += props_raw
    flat = [v for loc in locs for v in loc]
    footer = seal(_FOOTER_BODY.pack(MAGIC, *flat))
    out += footer
    out += bytes(PAGE - FOOTER_SIZE)
    out += footer
    return bytes(out), entries, props, blocks


# -- reading -----------------------------------------------------------------


@dataclass(frozen=True)
class CorruptKeyRange:
    """Half-open key interval ``[low, high)`` that may hold keys of a failed block."""

    low: bytes
    high: bytes
    file_id: int = 0
    block_offset: int = 0

    def contains(self, key):
        return self.low <= key < self.high

    def overlaps(self, low, high):
        return self.low < high and low < self.high


def successor(key):
    """Smallest key strictly greater than ``key``."""
    return key + b"\x00"


def _decode_footer(raw):
    body = unseal(raw)
    if body is None:
        return None
    fields = _FOOTER_BODY.unpack(body)
    if fields[0] != MAGIC:
        return None
    f = fields[1:]
    return [(f[0], f[1]), (f[2], f[3])], [(f[4], f[5]), (f[6], f[7])]


class SstReader:
    """Opens an SST through a storage env, falling back to the second metadata copy."""

    def __init__(self, env, name):
        self.env = env
        self.name = name
        self.size = env.size(name)
        if self.size < TAIL_SIZE:
            raise MetadataFatal(f"{name}: file too short for an SST")
        copies = None
        for off in (self.size - FOOTER_SIZE, self.size - TAIL_SIZE):
            copies = _decode_footer(env.read(name, off, FOOTER_SIZE))
            if copies is not None:
                break
        if copies is None:
            raise MetadataFatal(f"{name}: both footers failed verification")
        self.index = self._load(copies, 0, decode_index, "index")
        self.props = self._load(copies, 1, decode_props, "properties")
        self.file_id = self.props.file_id
        self.level = self.props.level
        self.seps = [e.sep for e in self.index]

    def _load(self, copies, which, decoder, label):
        for copy in copies:
            off, ln = copy[which]
            if off + ln > self.size:
                continue
            body = unseal(self.env.read(self.name, off, ln))
            if body is not None:
                try:
                    return decoder(body)
                except (ValueError, IndexError, struct.error):
                    continue
        raise MetadataFatal(f"{self.name}: both {label} block copies failed verification")

    @property
    def smallest(self):
        return self.props.smallest

    @property
    def largest(self):
        return self.props.largest

    def __len__(self):
        return len(self.index)

    def key_range(self, i):
        low = self.props.smallest if i == 0 else successor(self.seps[i - 1])
        return CorruptKeyRange(low, successor(self.seps[i]), self.file_id, self.index[i].offset)

    def read_block(self, i):
        """Records of block ``i``; :class:`CorruptionError` if its checksum fails."""
        e = self.index[i]
        body = unseal(self.env.read(self.name, e.offset, e.length))
        if body is None:
            raise CorruptionError([self.key_range(i)])
        return decode_records(body)

    def find_block(self, key):
        """Index of the only block that may hold ``key``, or ``None``."""
        if key < self.props.smallest or key > self.props.largest:
            return None
        lo, hi = 0, len(self.seps)
        while lo < hi:
            mid = (lo + hi) // 2
            if self.seps[mid] < key:
                lo = mid + 1
            else:
                hi = mid
        return lo if lo < len(self.seps) else None

    def blocks_overlapping(self, low, high):
        """Block indices whose key interval meets ``[low, high)``; ``high=None`` is unbounded."""
        out = []
        for i in range(bisect.bisect_left(self.seps, low), len(self.seps)):
            if high is not None and self.key_range(i).low >= high:
                break
            out.append(i)
        return out

    def get(self, key, snapshot_seq=None):
        """Newest version of ``key`` with ``seq < snapshot_seq`` (or ``None``)."""
        i = self.find_block(key)
        if i is None:
            return None
        for rec in self.read_block(i):
            if rec.key == key and (snapshot_seq is None or rec.seq < snapshot_seq):
                return rec
        return None

    def iter_blocks(self, indices=None):
        """Yield ``(i, records)`` or ``(i, CorruptKeyRange)`` per block."""
        for i in range(len(self.index)) if indices is None else indices:
            try:
                yield i, self.read_block(i)
            except CorruptionError as exc:
                yield i, exc.ranges[0]
