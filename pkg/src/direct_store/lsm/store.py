"""Leveled LSM key-value store whose compactions report corrupted key ranges.

Versions are ordered by sequence number; a snapshot taken at sequence ``s``
sees the newest version with ``seq < s``.  Three levels are kept: L0 (flushed
memtables, possibly overlapping), L1 and L2 (bottommost).  A compaction that
hits a data block failing its checksum skips the block, records the block's
key range and holds its outputs back until :meth:`LsmStore.apply_patch`
installs them together with the recovered records.
"""

import itertools
import json
import math
import threading
from collections import Counter
from dataclasses import dataclass, field

from .. import metafile
from ..errors import CorruptionError, SnapshotInvalidated, StoreClosed
from .format import (
    DEFAULT_BLOCK_CAPACITY,
    DELETE,
    PUT,
    CorruptKeyRange,
    Record,
    SstReader,
    build_sst,
    sort_key,
)

MAX_LEVEL = 2


class _CountingReader(SstReader):
    def __init__(self, env, name, stats):
        self.stats = stats
        super().__init__(env, name)

    def read_block(self, i):
        self.stats["blocks_read"] += 1
        self.stats["bytes_read"] += self.index[i].length
        return super().read_block(i)


class Snapshot:
    def __init__(self, store, seq):
        self.store = store
        self.seq = seq
        self.valid = True

    def get(self, key):
        return self.store.get(key, snapshot=self)

    def release(self):
        self.store._release(self)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.release()


@dataclass
class CompactionResult:
    id: int
    inputs: list
    outputs: list
    output_level: int
    ranges: list = field(default_factory=list)
    installed: bool = False
    records_in: int = 0
    records_out: int = 0

    @property
    def corrupted(self):
        return bool(self.ranges)


class LsmStore:
    """Single-writer LSM store on a :class:`~direct_store.fault_injection.StorageEnv`.

    Call :meth:`open` to create or reopen a store under ``prefix``.  There is
    no write-ahead log: durability is the replication log's job, and
    ``persisted_seq`` says up to which sequence the SST files are complete.
    """

    def __init__(self, env, prefix="db", block_capacity=DEFAULT_BLOCK_CAPACITY,
                 target_file_size=256 * 1024, l0_trigger=4, l1_max_bytes=1 << 20):
        self.env = env
        self.prefix = prefix
        self.block_capacity = block_capacity
        self.target_file_size = target_file_size
        self.l0_trigger = l0_trigger
        self.l1_max_bytes = l1_max_bytes
        self.stats = Counter()
        self.levels = [[] for _ in range(MAX_LEVEL + 1)]
        self.mem = {}
        self.mem_bytes = 0
        self.last_seq = 0
        self.persisted_seq = 0
        self.next_file = 1
        self.held = {}
        self.unresolved = []  # ranges a patch could not fully read; reads abstain until re-patched
        self._busy = set()
        self._snapshots = set()
        self._compaction_ids = itertools.count(1)
        self._l1_cursor = b""
        self._lock = threading.RLock()
        self.closed = False

    # -- lifecycle ---------------------------------------------------------

    @classmethod
    def open(cls, env, prefix="db", **options):
        manifest = f"{prefix}/MANIFEST"
        if not metafile.exists(env, manifest):
            store = cls(env, prefix, **options)
            metafile.write_meta(env, f"{prefix}/OPTIONS", json.dumps(store._options()).encode())
            metafile.write_meta(env, f"{prefix}/CURRENT", b"MANIFEST")
            store._write_manifest()
            return store
        opts = json.loads(metafile.read_meta(env, f"{prefix}/OPTIONS"))
        opts.update(options)
        store = cls(env, prefix, **opts)
        current = metafile.read_meta(env, f"{prefix}/CURRENT").decode()
        state = json.loads(metafile.read_meta(env, f"{prefix}/{current}"))
        store.next_file = state["next_file"]
        store.last_seq = store.persisted_seq = state["persisted_seq"]
        for level, ids in enumerate(state["levels"]):
            store.levels[level] = [store._reader(fid) for fid in ids]
        live = {store._name(fid) for ids in state["levels"] for fid in ids}
        for name in env.list(f"{prefix}/"):
            if name.endswith(".sst") and name not in live:
                env.delete(name)
        return store

    def _options(self):
        return {
            "block_capacity": self.block_capacity,
            "target_file_size": self.target_file_size,
            "l0_trigger": self.l0_trigger,
            "l1_max_bytes": self.l1_max_bytes,
        }

    def _write_manifest(self):
        state = {
            "next_file": self.next_file,
            "persisted_seq": self.persisted_seq,
            "levels": [[r.file_id for r in lvl] for lvl in self.levels],
        }
        metafile.write_meta(self.env, f"{self.prefix}/MANIFEST", json.dumps(state).encode())

    def close(self):
        with self._lock:
            self.closed = True
            self._invalidate_snapshots()

    def _check_open(self):
        if self.closed:
            raise StoreClosed(self.prefix)

    def _name(self, fid):
        return f"{self.prefix}/{fid:06d}.sst"

    def _reader(self, fid):
        return _CountingReader(self.env, self._name(fid), self.stats)

    # -- writes ------------------------------------------------------------

    def _mem_insert(self, rec):
        versions = self.mem.setdefault(rec.key, [])
        for i, v in enumerate(versions):
            if v.seq == rec.seq:
                versions[i] = rec
                return
        versions.append(rec)
        versions.sort(key=lambda r: -r.seq)
        self.mem_bytes += len(rec.key) + len(rec.value) + 16
        self.last_seq = max(self.last_seq, rec.seq)

    def write(self, rec):
        with self._lock:
            self._check_open()
            self._mem_insert(rec)
            return rec.seq

    def put(self, key, value, seq=None):
        with self._lock:
            seq = self.last_seq + 1 if seq is None else seq
            return self.write(Record(bytes(key), seq, PUT, bytes(value)))

    def delete(self, key, seq=None):
        with self._lock:
            seq = self.last_seq + 1 if seq is None else seq
            return self.write(Record(bytes(key), seq, DELETE, b""))

    def flush(self):
        """Seal the memtable into a new L0 file and return its id."""
        with self._lock:
            self._check_open()
            if not self.mem:
                raise ValueError("memtable is empty")
            recs = [r for k in sorted(self.mem) for r in self.mem[k]]
            fid = self._new_file(recs, 0)
            self.levels[0].insert(0, self._reader(fid))
            self.mem = {}
            self.mem_bytes = 0
            self.persisted_seq = self.last_seq
            self._write_manifest()
            return fid

    def _new_file(self, recs, level):
        fid = self.next_file
        self.next_file += 1
        raw, _, _, _ = build_sst(recs, fid, level, self.block_capacity)
        self.env.write_file(self._name(fid), raw)
        self.stats["bytes_written"] += len(raw)
        return fid

    # -- reads -------------------------------------------------------------

    def snapshot(self):
        with self._lock:
            self._check_open()
            snap = Snapshot(self, self.last_seq + 1)
            self._snapshots.add(snap)
            return snap

    def _release(self, snap):
        with self._lock:
            self._snapshots.discard(snap)

    def _invalidate_snapshots(self):
        for snap in self._snapshots:
            snap.valid = False
        self._snapshots.clear()

    def _snap_seq(self, snapshot):
        if snapshot is None:
            return None
        if not snapshot.valid or snapshot.store is not self:
            raise SnapshotInvalidated(f"snapshot at {snapshot.seq} on {self.prefix}")
        return snapshot.seq

    def get_record(self, key, snapshot=None):
        """Newest visible record for ``key`` (tombstones included) or ``None``."""
        with self._lock:
            self._check_open()
            snap = self._snap_seq(snapshot)
            hit = [u for u in self.unresolved if u.contains(key)]
            if hit:
                raise CorruptionError(hit)
            for rec in self.mem.get(key, ()):
                if snap is None or rec.seq < snap:
                    return rec
            for reader in self.levels[0]:
                rec = reader.get(key, snap)
                if rec is not None:
                    return rec
            for level in self.levels[1:]:
                best = None
                for reader in level:
                    rec = reader.get(key, snap)
                    if rec is not None and (best is None or rec.seq > best.seq):
                        best = rec
                if best is not None:
                    return best
            return None

    def get(self, key, snapshot=None):
        """Value of ``key`` or ``None``; raises :class:`CorruptionError` on a bad block."""
        rec = self.get_record(bytes(key), snapshot)
        if rec is None or rec.is_delete:
            return None
        return rec.value

    def _readers(self):
        return [r for level in self.levels for r in level]

    def _collect(self, low, high, snap=None):
        """Newest visible record per key in ``[low, high)`` and the corrupt ranges met."""
        best, bad = {}, []

        def offer(rec):
            if snap is not None and rec.seq >= snap:
                return
            if rec.key < low or (high is not None and rec.key >= high):
                return
            cur = best.get(rec.key)
            if cur is None or rec.seq > cur.seq:
                best[rec.key] = rec

        for versions in self.mem.values():
            for rec in versions:
                offer(rec)
        for reader in self._readers():
            if reader.largest < low or (high is not None and reader.smallest >= high):
                continue
            for _, blk in reader.iter_blocks(reader.blocks_overlapping(low, high)):
                if isinstance(blk, CorruptKeyRange):
                    bad.append(blk)
                else:
                    for rec in blk:
                        offer(rec)
        bad += [u for u in self.unresolved if u.high > low and (high is None or u.low < high) and u not in bad]
        return best, bad

    def scan(self, low=b"", high=None, snapshot=None):
        """Live records in ``[low, high)`` sorted by key; any bad block raises."""
        with self._lock:
            self._check_open()
            best, bad = self._collect(low, high, self._snap_seq(snapshot))
            if bad:
                raise CorruptionError(bad)
            return [best[k] for k in sorted(best) if not best[k].is_delete]

    def scan_range(self, low, high):
        """Patch for ``[low, high)``: the newest live record per key at the applied position."""
        return self.scan(low, high)

    def items(self):
        return {r.key: r.value for r in self.scan()}

    # -- compaction --------------------------------------------------------

    def _find(self, fid):
        for level, readers in enumerate(self.levels):
            for r in readers:
                if r.file_id == fid:
                    return level, r
        raise KeyError(f"no live file {fid}")

    def level_of(self, fid):
        return self._find(fid)[0]

    def file_ids(self, level=None):
        levels = self.levels if level is None else [self.levels[level]]
        return [r.file_id for lvl in levels for r in lvl]

    def total_bytes(self):
        with self._lock:
            return sum(r.size for r in self._readers())

    def _overlapping(self, level, low, high):
        return [r for r in self.levels[level] if not (r.largest < low or r.smallest > high)]

    def _picture(self, readers):
        """Extend a seed set of files into a valid leveled compaction input."""
        level = min(self._find(r.file_id)[0] for r in readers)
        if level == 0:
            inputs = list(self.levels[0])
            out = 1
        elif level == MAX_LEVEL:
            return list(readers), MAX_LEVEL
        else:
            inputs = list(readers)
            out = level + 1
        low = min(r.smallest for r in inputs)
        high = max(r.largest for r in inputs)
        inputs += [r for r in self._overlapping(out, low, high) if r not in inputs]
        return inputs, out

    def pick_compaction(self):
        """File ids for the next size-triggered compaction, or ``None``."""
        with self._lock:
            if len(self.levels[0]) >= self.l0_trigger:
                inputs, _ = self._picture(self.levels[0][:1])
            elif sum(r.size for r in self.levels[1]) > self.l1_max_bytes:
                cands = [r for r in self.levels[1] if r.file_id not in self._busy]
                if not cands:
                    return None
                after = [r for r in cands if r.smallest > self._l1_cursor]
                seed = min(after or cands, key=lambda r: r.smallest)
                self._l1_cursor = seed.largest
                inputs, _ = self._picture([seed])
            else:
                return None
            ids = [r.file_id for r in inputs]
            return None if self._busy.intersection(ids) else ids

    def maybe_compact(self):
        ids = self.pick_compaction()
        return None if ids is None else self.compact(ids)

    def compact_file(self, fid):
        """Targeted compaction around one file (used when a read finds a bad block)."""
        with self._lock:
            _, reader = self._find(fid)
            inputs, _ = self._picture([reader])
            ids = [r.file_id for r in inputs]
            if self._busy.intersection(ids):
                return None
            return self.compact(ids)

    def files_containing(self, key):
        with self._lock:
            return [r.file_id for r in self._readers() if r.smallest <= key <= r.largest]

    def compact(self, file_ids):
        """Merge ``file_ids`` into the next level.

        Bad blocks are skipped and their ranges recorded; if any were found
        the outputs are held (not visible to reads) until :meth:`apply_patch`
        or :meth:`install`.  :class:`~direct_store.errors.MetadataFatal`
        propagates if a file's metadata cannot be read.
        """
        with self._lock:
            self._check_open()
            readers = [self._find(fid)[1] for fid in file_ids]
            if self._busy.intersection(file_ids):
                raise ValueError("input file already part of a pending compaction")
            _, out_level = self._picture(readers)
            recs, ranges = [], []
            for reader in readers:
                for _, blk in reader.iter_blocks():
                    if isinstance(blk, CorruptKeyRange):
                        ranges.append(blk)
                    else:
                        recs.extend(blk)
            recs.sort(key=sort_key)
            snaps = sorted(s.seq for s in self._snapshots)
            kept = _gc(recs, snaps, bottommost=out_level == MAX_LEVEL)
            outputs = [self._new_file(chunk, out_level) for chunk in self._split(kept)]
            self.stats["compactions"] += 1
            result = CompactionResult(next(self._compaction_ids), list(file_ids), outputs, out_level,
                                      ranges, records_in=len(recs), records_out=len(kept))
            if ranges:
                self.held[result.id] = result
                self._busy.update(file_ids)
            else:
                self._install(result)
            return result

    def _split(self, recs):
        chunk, size = [], 0
        for i, rec in enumerate(recs):
            chunk.append(rec)
            size += len(rec.key) + len(rec.value) + 12
            nxt = recs[i + 1] if i + 1 < len(recs) else None
            if size >= self.target_file_size and (nxt is None or nxt.key != rec.key):
                yield chunk
                chunk, size = [], 0
        if chunk:
            yield chunk

    def _install(self, result):
        drop = set(result.inputs)
        for level in range(MAX_LEVEL + 1):
            self.levels[level] = [r for r in self.levels[level] if r.file_id not in drop]
        self.levels[result.output_level].extend(self._reader(fid) for fid in result.outputs)
        self.levels[result.output_level].sort(key=lambda r: r.smallest)
        self._write_manifest()
        for fid in result.inputs:
            self.env.delete(self._name(fid))
        self._busy.difference_update(result.inputs)
        self.held.pop(result.id, None)
        result.installed = True

    def install(self, compaction_id):
        with self._lock:
            self._install(self.held[compaction_id])

    def abandon(self, compaction_id):
        """Drop a held compaction's outputs and free its inputs."""
        with self._lock:
            result = self.held.pop(compaction_id)
            for fid in result.outputs:
                self.env.delete(self._name(fid))
            self._busy.difference_update(result.inputs)

    # -- recovery ----------------------------------------------------------

    def apply_patch(self, ranges, records, delete_seq, compaction_id=None):
        """Install recovered records for ``ranges`` in one atomic step.

        The held compaction(s) named by ``compaction_id`` (an id or a list of
        ids) are installed first.  Patch records keep
        their original sequences; every key still visible in a range but
        missing from the patch gets a tombstone at ``delete_seq``, which must
        exceed every sequence applied so far.  All live snapshots are
        invalidated.  Returns ranges of further bad blocks met while looking
        for visible keys; they stay in :attr:`unresolved`, where reads and
        scans treat them as corrupt, until a later patch covers them.
        """
        with self._lock:
            self._check_open()
            held = compaction_id if isinstance(compaction_id, (list, tuple, set)) else [compaction_id]
            for cid in held:
                if cid is not None and cid in self.held:
                    self._install(self.held[cid])
            self.unresolved = [u for u in self.unresolved
                               if not any(r.low <= u.low and u.high <= r.high for r in ranges)]
            patched = set()
            for rec in records:
                self._mem_insert(rec)
                patched.add(rec.key)
            extra = []
            for rng in ranges:
                best, bad = self._collect(rng.low, rng.high)
                extra += [b for b in bad if b not in ranges and b not in extra]
                for key, rec in best.items():
                    if key not in patched and not rec.is_delete:
                        self._mem_insert(Record(key, delete_seq, DELETE, b""))
            self.unresolved += [b for b in extra if b not in self.unresolved]
            self.last_seq = max(self.last_seq, delete_seq)
            self.stats["patches"] += 1
            self._invalidate_snapshots()
            return extra


def _gc(recs, snaps, bottommost):
    """Drop versions no reader can see.

    Per user key, keep the newest version below each live snapshot and the
    newest overall.  At the bottommost level a tombstone that is the oldest
    surviving version hides nothing and is dropped.
    """
    out = []
    bounds = snaps + [math.inf]
    i = 0
    while i < len(recs):
        j = i
        while j < len(recs) and recs[j].key == recs[i].key:
            j += 1
        kept = {}
        for s in bounds:
            for rec in recs[i:j]:
                if rec.seq < s:
                    kept[rec.seq] = rec
                    break
        dedup = sorted(kept.values(), key=lambda r: -r.seq)
        if bottommost:
            while dedup and dedup[-1].is_delete:
                dedup.pop()
        out.extend(dedup)
        i = j
    return out
