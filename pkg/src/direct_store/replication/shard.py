"""A replicated shard: static primary, quorum-acknowledged log, patch-based recovery.

Every replica applies committed log entries in index order to its own
:class:`~direct_store.lsm.LsmStore`; op ``j`` of entry ``i`` gets sequence
``(i << 16) | j`` on every replica, so healthy replicas hold identical
versions.  When a compaction (or a client read) finds a bad block, the
replica reports the key ranges; the primary appends a dedicated
:class:`PatchRequest` entry at index ``t``.  Healthy replicas answer entry
``t`` with a patch assembled from their state after the prefix ``< t``; the
corrupted replica stops applying at ``t``, applies the first verifying patch
as the effect of ``t`` and then resumes.

All activity runs on a :class:`~direct_store.sim.Simulator` clock.  Patch
assembly and application are charged simulated time from the measured work
(blocks read, records handled) through a :class:`CostModel`.
"""

import itertools
import random
import time
import zlib
from collections import Counter
from dataclasses import dataclass, field

from ..errors import CorruptionError, LogCorruption, NoQuorum, ShardFailed
from ..fault_injection import StorageEnv
from ..lsm import LsmStore
from ..lsm.format import DELETE, PUT, Record
from ..sim import Network, Simulator
from ..wire import Ack, AppendEntry, CorruptionReport, PatchAck, PatchTransfer, _enc
from .log import PatchRequest, WriteBatch, decode_entry, encode_entry, seq_of

NORMAL = "normal"
RECOVERING = "recovering"
FAILED = "failed"


@dataclass
class CostModel:
    """Simulated milliseconds charged for local work."""

    block_read_ms: float = 0.05
    record_ms: float = 0.002
    byte_ms: float = 1e-5

    def scan(self, blocks, records):
        return blocks * self.block_read_ms + records * self.record_ms

    def write(self, records, nbytes):
        return records * self.record_ms + nbytes * self.byte_ms


@dataclass
class RecoveryEvent:
    request_id: int
    replica: int
    ranges: list
    reported_at: float
    index: int = 0
    applied_at: float = None
    patch_keys: int = 0
    patch_bytes: int = 0
    source: int = None
    abstentions: int = 0
    outcome: str = "pending"
    wall_ms: float = 0.0

    @property
    def latency_ms(self):
        return None if self.applied_at is None else self.applied_at - self.reported_at


@dataclass
class LegacyRecovery:
    latency_ms: float
    bytes_moved: int
    records: int
    wall_ms: float


def patch_crc(records):
    out = bytearray()
    _enc(out, "records", records)
    return zlib.crc32(out), len(out)


class Replica:
    def __init__(self, group, rid, store):
        self.group = group
        self.id = rid
        self.store = store
        self.log = {}
        self.last_index = 0
        self.commit = 0
        self.applied = 0
        self.state = NORMAL
        self.error = None
        self.waiting = None  # (t, PatchRequest) while recovering
        self._patching = False
        self.early = {}
        self.done = set()
        self.reports = {}  # request id -> [compaction ids]
        self.match = {}
        self.inflight = set()
        self._retransmit_armed = False
        self._req_ids = itertools.count(1)

    @property
    def is_primary(self):
        return self.group.primary is self

    @property
    def sim(self):
        return self.group.sim

    @property
    def net(self):
        return self.group.net

    def __repr__(self):
        return f"Replica({self.id}, {self.state}, applied={self.applied})"

    # -- messages ----------------------------------------------------------

    def on_message(self, src, msg):
        if self.state == FAILED and not isinstance(msg, AppendEntry):
            return
        if isinstance(msg, AppendEntry):
            self._on_append(msg)
        elif isinstance(msg, Ack):
            self.match[msg.replica] = max(self.match.get(msg.replica, 0), msg.index)
            self._advance_commit()
        elif isinstance(msg, CorruptionReport):
            self._on_report(msg)
        elif isinstance(msg, PatchTransfer):
            self._on_patch(msg)
        elif isinstance(msg, PatchAck):
            self.group.counters["patch_acks"] += 1

    # -- primary side ------------------------------------------------------

    def propose(self, payload):
        if not self.is_primary:
            raise RuntimeError("only the primary proposes")
        idx = self.last_index + 1
        raw = encode_entry(idx, payload)
        self.log[idx] = raw
        self.last_index = idx
        self.match[self.id] = idx
        for other in self.group.replicas:
            if other is not self:
                self.net.send(self.id, other.id, AppendEntry(self.id, idx, self.commit, raw))
        self._advance_commit()
        self._arm_retransmit()
        return idx

    def _advance_commit(self):
        if not self.is_primary:
            return
        acked = sorted((self.match.get(r.id, 0) for r in self.group.replicas), reverse=True)
        new = acked[self.group.quorum - 1]
        if new > self.commit:
            self.commit = new
            for other in self.group.replicas:
                if other is not self:
                    self.net.send(self.id, other.id, AppendEntry(self.id, 0, self.commit, b""))
            self._apply()

    def _arm_retransmit(self):
        if self._retransmit_armed:
            return
        self._retransmit_armed = True
        self.sim.schedule(self.group.retransmit_ms, self._retransmit)

    def _retransmit(self):
        self._retransmit_armed = False
        behind = [r for r in self.group.replicas
                  if r is not self and r.id not in self.net.down and self.match.get(r.id, 0) < self.last_index]
        for r in behind:
            start = self.match.get(r.id, 0) + 1
            for idx in range(start, min(self.last_index, start + 64) + 1):
                self.net.send(self.id, r.id, AppendEntry(self.id, idx, self.commit, self.log[idx]))
        if behind:
            self._arm_retransmit()

    def _on_report(self, msg):
        key = (msg.replica, msg.request_id)
        if key in self.inflight:
            return
        self.inflight.add(key)
        self.propose(PatchRequest(msg.replica, msg.request_id, list(msg.ranges)))

    # -- follower side -----------------------------------------------------

    def _on_append(self, msg):
        if msg.entry:
            if msg.index > self.last_index:
                self.log.setdefault(msg.index, msg.entry)
                while self.last_index + 1 in self.log:
                    self.last_index += 1
            self.net.send(self.id, msg.leader, Ack(self.id, self.last_index))
        self.commit = max(self.commit, min(msg.commit, self.last_index))
        self._apply()

    # -- state machine -----------------------------------------------------

    def _apply(self):
        while self.state == NORMAL and self.applied < self.commit:
            idx = self.applied + 1
            try:
                _, payload = decode_entry(self.log[idx])
            except LogCorruption as exc:
                self.state = FAILED
                self.error = exc
                self.group._fire("fatal", self, exc)
                return
            if isinstance(payload, WriteBatch):
                for j, (kind, key, value) in enumerate(payload.ops):
                    self.store.write(Record(bytes(key), seq_of(idx, j), kind, bytes(value)))
                self.applied = idx
                self._after_writes()
            else:
                self._on_patch_request(idx, payload)

    def _after_writes(self):
        if self.store.mem_bytes < self.group.flush_bytes:
            return
        self.store.flush()
        for _ in range(8):
            result = self.store.maybe_compact()
            if result is None:
                break
            self.group.counters["compactions"] += 1
            self.group.counters["compaction_bytes"] += sum(
                self.store.env.size(self.store._name(f)) for f in result.outputs)
            if result.corrupted:
                self.group.counters["compaction_errors"] += 1
                self.report(result.ranges, result.id)

    def report(self, ranges, compaction_id=None):
        """Send corrupted ranges to the primary; returns the request id."""
        for rid, cids in self.reports.items():
            ev = self.group.events.get(rid)
            if ev is not None and ev.outcome == "pending" and ev.ranges == list(ranges):
                if compaction_id is not None:
                    cids.append(compaction_id)
                return rid
        rid = (self.id << 40) | next(self._req_ids)
        self.reports[rid] = [] if compaction_id is None else [compaction_id]
        self.group.events[rid] = RecoveryEvent(rid, self.id, list(ranges), self.sim.now)
        msg = CorruptionReport(self.id, rid, list(ranges))
        if self.is_primary:
            self._on_report(msg)
        else:
            self.net.send(self.id, self.group.primary.id, msg)
        return rid

    def targeted_compaction(self, ranges):
        """Compact the files holding bad blocks; report anything the compaction cannot read."""
        for fid in sorted({r.file_id for r in ranges}):
            try:
                self.store.level_of(fid)
            except KeyError:
                continue
            result = self.store.compact_file(fid)
            if result is None:
                continue
            self.group.counters["targeted_compactions"] += 1
            if result.corrupted:
                self.report(result.ranges, result.id)
        # a block that read back clean this time still hides keys the last patch never saw
        events = [self.group.events.get(rid) for rid in self.reports]
        pending = [r for ev in events if ev is not None and ev.outcome == "pending" for r in ev.ranges]
        left = [u for u in self.store.unresolved
                if not any(r.low <= u.low and u.high <= r.high for r in pending)]
        if left:
            self.report(left)

    def _on_patch_request(self, t, req):
        if self.is_primary:
            self.inflight.discard((req.corrupt_replica, req.request_id))
        if req.corrupt_replica == self.id:
            if req.request_id in self.done:
                self.applied = t
                return
            self.state = RECOVERING
            self.waiting = (t, req)
            ev = self.group.events.get(req.request_id)
            if ev is not None:
                ev.index = t
            self.sim.schedule(self.group.recovery_timeout_ms, self._timeout, req.request_id)
            early = self.early.pop(req.request_id, None)
            if early is not None:
                self._on_patch(early)
            return
        self.applied = t
        self._assemble(t, req)

    def _assemble(self, t, req):
        blocks_before = self.store.stats["blocks_read"]
        wall = time.perf_counter()
        try:
            records = []
            for rng in req.ranges:
                records.extend(self.store.scan_range(rng.low, rng.high))
        except CorruptionError as exc:
            self.group.counters["abstentions"] += 1
            ev = self.group.events.get(req.request_id)
            if ev is not None:
                ev.abstentions += 1
            self.group._fire("abstain", self, req, exc)
            self.sim.schedule(0.0, self.targeted_compaction, exc.ranges)
            return
        wall = (time.perf_counter() - wall) * 1e3
        cost = self.group.cost.scan(self.store.stats["blocks_read"] - blocks_before, len(records))
        crc, _ = patch_crc(records)
        msg = PatchTransfer(req.request_id, self.id, t, records, crc)
        self.group._wall[req.request_id] = self.group._wall.get(req.request_id, 0.0) + wall
        self.net.send(self.id, req.corrupt_replica, msg, extra_delay=cost)

    def _on_patch(self, msg):
        crc, _ = patch_crc(msg.records)
        if crc != msg.crc:
            self.group.counters["bad_patches"] += 1
            return
        self.net.send(self.id, msg.sender, PatchAck(msg.request_id, self.id))
        if msg.request_id in self.done:
            return
        if self.waiting is None or self.waiting[1].request_id != msg.request_id:
            self.early.setdefault(msg.request_id, msg)
            return
        if self.waiting[0] != msg.index or self._patching:
            return
        self._patching = True
        cost = self.group.cost.write(len(msg.records), 0)
        self.sim.schedule(cost, self._apply_patch, msg)

    def _apply_patch(self, msg):
        t, req = self.waiting
        wall = time.perf_counter()
        cids = self.reports.pop(req.request_id, [])
        extra = self.store.apply_patch(req.ranges, msg.records, seq_of(t), compaction_id=cids)
        wall = (time.perf_counter() - wall) * 1e3
        self.applied = t
        self.state = NORMAL
        self.waiting = None
        self._patching = False
        self.done.add(req.request_id)
        self.early.pop(req.request_id, None)
        _, size = patch_crc(msg.records)
        ev = self.group.events.get(req.request_id)
        if ev is None:
            ev = self.group.events[req.request_id] = RecoveryEvent(
                req.request_id, self.id, req.ranges, self.sim.now)
        ev.index, ev.applied_at, ev.source = t, self.sim.now, msg.sender
        ev.patch_keys, ev.patch_bytes, ev.outcome = len(msg.records), size, "recovered"
        ev.wall_ms = self.group._wall.pop(req.request_id, 0.0) + wall
        self.group.counters["recoveries"] += 1
        self.group._fire("recovered", self, t, req, ev)
        if extra:
            self.sim.schedule(0.0, self.targeted_compaction, extra)
        self._apply()

    def _timeout(self, request_id):
        if self.waiting is None or self.waiting[1].request_id != request_id:
            return
        self.state = FAILED
        self.error = ShardFailed(f"replica {self.id}: no patch for request {request_id}")
        ev = self.group.events.get(request_id)
        if ev is not None:
            ev.outcome = "failed"
        self.group.counters["failed_recoveries"] += 1
        self.group._fire("failed", self, request_id)

    # -- client reads ------------------------------------------------------

    def read_local(self, key, snapshot=None):
        if self.state == FAILED:
            raise ShardFailed(f"replica {self.id} failed")
        try:
            return self.store.get(key, snapshot)
        except CorruptionError as exc:
            self.group.counters["client_errors"] += 1
            self.sim.schedule(0.0, self.targeted_compaction, exc.ranges)
            raise


class ShardGroup:
    """R replicas of one shard on a shared simulator and storage environment."""

    def __init__(self, replicas=3, seed=0, env=None, injector=None, store_options=None, cost=None,
                 latency_ms=(0.1, 1.0), drop=0.0, recovery_timeout_ms=5000.0, flush_bytes=32 * 1024,
                 retransmit_ms=20.0, name="shard", sim=None, serialize=True):
        if replicas < 1:
            raise ValueError("need at least one replica")
        self.name = name
        self.sim = sim or Simulator()
        self.env = env or StorageEnv(injector=injector)
        self.net = Network(self.sim, seed, latency_ms, drop=drop, serialize=serialize)
        self.rng = random.Random(seed ^ 0x5EED)
        self.cost = cost or CostModel()
        self.recovery_timeout_ms = recovery_timeout_ms
        self.flush_bytes = flush_bytes
        self.retransmit_ms = retransmit_ms
        self.store_options = dict(store_options or {})
        self.counters = Counter()
        self.events = {}
        self.hooks = {"recovered": [], "failed": [], "abstain": [], "fatal": []}
        self._wall = {}
        self._generation = Counter()
        self.replicas = []
        for i in range(replicas):
            store = LsmStore.open(self.env, f"{name}/r{i}", **self.store_options)
            rep = Replica(self, i, store)
            self.replicas.append(rep)
            self.net.register(i, rep.on_message)
        self.primary = self.replicas[0]

    @property
    def quorum(self):
        return len(self.replicas) // 2 + 1

    def on(self, event, fn):
        self.hooks[event].append(fn)

    def _fire(self, event, *args):
        for fn in self.hooks[event]:
            fn(*args)

    # -- writes ------------------------------------------------------------

    def propose_write(self, batch, timeout_ms=1000.0):
        """Commit ``batch``; returns its log index or raises :class:`NoQuorum`."""
        idx = self.primary.propose(batch)
        if not self.sim.run_until(lambda: self.primary.commit >= idx, timeout_ms):
            raise NoQuorum(f"entry {idx} not acknowledged by {self.quorum} replicas")
        return idx

    def put(self, key, value):
        return self.propose_write(WriteBatch().put(key, value))

    def delete(self, key):
        return self.propose_write(WriteBatch().delete(key))

    def report_corruption(self, replica_id, ranges, compaction_id=None):
        return self.replicas[replica_id].report(ranges, compaction_id)

    # -- reads -------------------------------------------------------------

    def read(self, key, consistency="strong", index=None, replica=None, snapshot=None,
             timeout_ms=None):
        timeout_ms = self.recovery_timeout_ms * 2 if timeout_ms is None else timeout_ms
        if consistency == "strong":
            rep = self.primary
            self.sim.run_until(lambda: rep.applied >= rep.commit or rep.state == FAILED, timeout_ms)
        elif consistency == "read_after":
            if index is None:
                raise ValueError("read_after needs an index")
            pool = [self.replicas[replica]] if replica is not None else self.replicas

            def ready():
                return any(r.applied >= index for r in pool)

            if not self.sim.run_until(ready, timeout_ms):
                raise TimeoutError(f"no replica applied index {index}")
            rep = next(r for r in pool if r.applied >= index)
        elif consistency == "eventual":
            rep = self.replicas[replica] if replica is not None else self.rng.choice(self.replicas)
        else:
            raise ValueError(f"unknown consistency {consistency!r}")
        return rep.read_local(bytes(key), snapshot)

    def client_get(self, key, consistency="eventual", first=0):
        """Read with retries on the other replicas; returns ``(value, attempts)``."""
        last = None
        n = len(self.replicas)
        for attempt in range(n):
            rid = (first + attempt) % n
            try:
                if consistency == "strong" and attempt == 0:
                    return self.read(key, "strong"), attempt + 1
                return self.read(key, "eventual", replica=rid), attempt + 1
            except (CorruptionError, ShardFailed) as exc:
                last = exc
        raise last

    def take_snapshot(self, replica_id):
        return self.replicas[replica_id].store.snapshot()

    # -- driving -----------------------------------------------------------

    def settle(self, max_ms=None):
        """Run until no events remain (or ``max_ms`` of simulated time passes)."""
        if max_ms is None:
            self.sim.run()
        else:
            self.sim.run(until=self.sim.now + max_ms)

    def pending_recoveries(self):
        return [e for e in self.events.values() if e.outcome == "pending"]

    def wait_recoveries(self, timeout_ms=None):
        timeout_ms = self.recovery_timeout_ms * 2 if timeout_ms is None else timeout_ms
        # zero-delay work (targeted compactions after a read error) may not have reported yet
        self.sim.run(until=self.sim.now)
        return self.sim.run_until(lambda: not self.pending_recoveries(), timeout_ms)

    def visible_maps(self):
        with self.env.suspended():
            return [r.store.items() for r in self.replicas]

    # -- legacy path ---------------------------------------------------------

    def rereplicate(self, target_id, source_id=None):
        """Rebuild a replica from a full copy of a healthy one (the slow fallback).

        Charged simulated time for scanning every block of the source, moving
        every byte and rewriting the whole store.
        """
        target = self.replicas[target_id]
        if source_id is None:
            source_id = next(r.id for r in self.replicas if r.id != target_id and r.state == NORMAL)
        source = self.replicas[source_id]
        wall = time.perf_counter()
        blocks_before = source.store.stats["blocks_read"]
        store = source.store
        with store._lock:
            best, bad = store._collect(b"", None)
        if bad:
            raise CorruptionError(bad)
        records = [best[k] for k in sorted(best)]
        nbytes = sum(len(r.key) + len(r.value) + 16 for r in records)
        cost = self.cost.scan(source.store.stats["blocks_read"] - blocks_before, len(records))
        cost += self.net.delay_for(nbytes)
        self._generation[target_id] += 1
        fresh = LsmStore.open(self.env, f"{self.name}/r{target_id}.g{self._generation[target_id]}",
                              **self.store_options)
        for rec in records:
            fresh.write(rec)
        written_before = fresh.stats["bytes_written"]
        if records:
            fresh.flush()
        cost += self.cost.write(len(records), fresh.stats["bytes_written"] - written_before)
        old = target.store
        old.close()
        for name in self.env.list(old.prefix + "/"):
            self.env.delete(name)
        target.store = fresh
        target.log = dict(source.log)
        target.last_index, target.commit, target.applied = source.last_index, source.commit, source.applied
        target.state, target.waiting, target.error = NORMAL, None, None
        target.reports.clear()
        self.counters["rereplications"] += 1
        return LegacyRecovery(cost, nbytes, len(records), (time.perf_counter() - wall) * 1e3)


def random_batch(rng, keys, value_size, ops=1, delete_frac=0.1):
    batch = WriteBatch()
    for _ in range(ops):
        key = b"key%08d" % rng.randrange(keys)
        if rng.random() < delete_frac:
            batch.delete(key)
        else:
            batch.put(key, rng.randbytes(value_size))
    return batch


__all__ = [
    "CostModel",
    "DELETE",
    "PUT",
    "LegacyRecovery",
    "RecoveryEvent",
    "Replica",
    "ShardGroup",
    "PatchRequest",
    "WriteBatch",
    "random_batch",
]
