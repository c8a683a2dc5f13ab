"""Randomized recovery schedules checked against a log-replay oracle.

A schedule drives a shard group with a random workload, flips bits in random
data blocks of random replicas (so compactions and client reads find them),
and checks every recovery the moment it completes:

* safety: the recovered ranges hold exactly what a fresh store holds after
  replaying the log entries before the patch request;
* no resurrection: no key whose newest op before the request is a delete is
  visible afterwards;
* snapshot invalidation: snapshots open on the recovered store fail, and
  snapshots open on other replicas still read what they read before.
"""

import random
from dataclasses import dataclass, field

from ..errors import CorruptionError, SnapshotInvalidated
from ..fault_injection import StorageEnv, flip_bit
from ..lsm import LsmStore
from ..lsm.format import DELETE, Record
from .log import WriteBatch, decode_entry, seq_of
from .shard import FAILED, ShardGroup


def replay(log, upto, prefix="oracle"):
    """Fresh in-memory store after applying committed entries ``1 .. upto-1``."""
    store = LsmStore.open(StorageEnv(), prefix)
    for idx in range(1, upto):
        _, payload = decode_entry(log[idx])
        if isinstance(payload, WriteBatch):
            for j, (kind, key, value) in enumerate(payload.ops):
                store.write(Record(bytes(key), seq_of(idx, j), kind, bytes(value)))
    return store


def newest_ops(log, upto):
    state = {}
    for idx in range(1, upto):
        _, payload = decode_entry(log[idx])
        if isinstance(payload, WriteBatch):
            for kind, key, _ in payload.ops:
                state[bytes(key)] = kind
    return state


@dataclass
class ScheduleResult:
    seed: int
    recoveries: int = 0
    range_checks: int = 0
    deleted_checks: int = 0
    snapshot_checks: int = 0
    injected: int = 0
    abstentions: int = 0
    failed: int = 0
    skipped: int = 0
    violations: list = field(default_factory=list)
    patch_bytes: list = field(default_factory=list)
    store_bytes: int = 0
    lost: bool = False  # every replica failed; nothing left to re-replicate from

    @property
    def ok(self):
        return not self.violations


class _Checker:
    def __init__(self, group, result):
        self.group = group
        self.result = result
        self.snaps = []  # (replica id, snapshot, probe key, value seen)
        group.on("recovered", self.on_recovered)
        group.on("failed", self.on_failed)
        group.on("abstain", self.on_abstain)

    def take_snapshot(self, rid, rng):
        rep = self.group.replicas[rid]
        if rep.state == FAILED:
            return
        snap = rep.store.snapshot()
        probe = b"key%08d" % rng.randrange(64)
        try:
            seen = snap.get(probe)
        except CorruptionError:
            snap.release()
            return
        self.snaps.append((rid, snap, probe, seen))

    def on_failed(self, replica, request_id):
        self.result.failed += 1

    def on_abstain(self, replica, req, exc):
        self.result.abstentions += 1

    def on_recovered(self, replica, t, req, event):
        # probe reads must see stored bytes, not fresh injected flips
        with self.group.env.suspended():
            self._check_recovery(replica, t, req, event)

    def _check_recovery(self, replica, t, req, event):
        res = self.result
        res.recoveries += 1
        res.patch_bytes.append(event.patch_bytes)
        log = self.group.primary.log
        oracle = replay(log, t)
        store = replica.store
        for rng in req.ranges:
            try:
                got = store.scan(rng.low, rng.high)
            except CorruptionError:
                res.skipped += 1
                continue
            want = oracle.scan(rng.low, rng.high)
            res.range_checks += 1
            if got != want:
                res.violations.append(("safety", res.seed, t, rng, len(got), len(want)))
        for key, kind in newest_ops(log, t).items():
            if kind != DELETE:
                continue
            # a later write (index > t) may not be applied yet: the replica stopped at t
            try:
                rec = store.get_record(key)
            except CorruptionError:
                res.skipped += 1
                continue
            res.deleted_checks += 1
            if rec is not None and not rec.is_delete:
                res.violations.append(("resurrection", res.seed, t, key))
        keep = []
        for rid, snap, probe, seen in self.snaps:
            if rid == replica.id:
                res.snapshot_checks += 1
                try:
                    snap.get(probe)
                    survived = True
                except SnapshotInvalidated:
                    survived = False
                except CorruptionError:
                    survived = True
                if survived:
                    res.violations.append(("snapshot-survived", res.seed, t, rid))
                continue
            if snap.valid:
                res.snapshot_checks += 1
                try:
                    if snap.get(probe) != seen:
                        res.violations.append(("snapshot-changed", res.seed, t, rid))
                except CorruptionError:
                    res.skipped += 1
                except SnapshotInvalidated:
                    res.violations.append(("snapshot-foreign-invalidated", res.seed, t, rid))
                keep.append((rid, snap, probe, seen))
        self.snaps = keep


def _flip_random_block(group, rid, rng):
    store = group.replicas[rid].store
    fids = store.file_ids()
    if not fids:
        return None
    fid = rng.choice(fids)
    reader = store._find(fid)[1]
    i = rng.randrange(len(reader))
    e = reader.index[i]
    flip_bit(group.env, reader.name, e.offset * 8 + rng.randrange(e.length * 8))
    return fid, reader.key_range(i)


def run_schedule(seed, ops=None, replicas=3):
    """One randomized schedule; returns a :class:`ScheduleResult`."""
    rng = random.Random(seed)
    result = ScheduleResult(seed)
    keys = rng.choice([40, 100, 300])
    opts = dict(block_capacity=rng.choice([256, 512, 1024]), l0_trigger=rng.choice([2, 3, 4]),
                l1_max_bytes=rng.choice([8_000, 32_000]), target_file_size=rng.choice([4_000, 16_000]))
    lo = rng.uniform(0.05, 0.5)
    group = ShardGroup(replicas, seed=seed, store_options=opts, latency_ms=(lo, lo + rng.uniform(0.1, 3.0)),
                       flush_bytes=rng.choice([1_000, 3_000]), name=f"s{seed}")
    checker = _Checker(group, result)
    ops = ops or rng.randint(150, 400)
    corrupt_p = rng.uniform(0.005, 0.03)
    delete_frac = rng.uniform(0.05, 0.4)
    for n in range(ops):
        batch = WriteBatch()
        for _ in range(rng.randint(1, 4)):
            key = b"key%08d" % rng.randrange(keys)
            if rng.random() < delete_frac:
                batch.delete(key)
            else:
                batch.put(key, rng.randbytes(rng.randint(0, 60)))
        group.propose_write(batch)
        if rng.random() < 0.03:
            checker.take_snapshot(rng.randrange(replicas), rng)
        if rng.random() < corrupt_p:
            _inject(group, rng, result)
        if rng.random() < 0.05:
            _client_read(group, rng, keys)
        group.sim.run(until=group.sim.now + rng.uniform(0, 2.0))
    _drain(group, result)
    result.store_bytes = group.primary.store.total_bytes()
    return result


def _inject(group, rng, result):
    rid = rng.randrange(len(group.replicas))
    if group.replicas[rid].state != "normal":
        return
    hits = [_flip_random_block(group, rid, rng) for _ in range(rng.choice([1, 1, 1, 2]))]
    hits = [h for h in hits if h is not None]
    if not hits:
        return
    result.injected += len(hits)
    if rng.random() < 0.15:
        # same range also bad on another replica: that replica must abstain
        other = (rid + 1) % len(group.replicas)
        if group.replicas[other].state == "normal":
            _flip_random_block(group, other, rng)
            result.injected += 1
    how = rng.random()
    rep = group.replicas[rid]
    if how < 0.5:
        rep.targeted_compaction([h[1] for h in hits])
    elif how < 0.8:
        low = hits[0][1].low
        try:
            rep.read_local(low)
        except CorruptionError:
            pass
    # otherwise a size-triggered compaction finds it later


def _client_read(group, rng, keys):
    key = b"key%08d" % rng.randrange(keys)
    try:
        group.client_get(key, first=rng.randrange(len(group.replicas)))
    except Exception:  # noqa: BLE001 - retries exhausted are fine here
        pass


def _drain(group, result, rounds=6):
    """Finish outstanding recoveries and flush out undetected corruption."""
    for _ in range(rounds):
        group.wait_recoveries()
        group.settle()
        dirty = False
        for rep in group.replicas:
            if rep.state == FAILED:
                continue
            try:
                with group.env.suspended():
                    rep.store.scan()
            except CorruptionError as exc:
                dirty = True
                rep.targeted_compaction(exc.ranges)
        if not dirty:
            break
    healthy = [r for r in group.replicas if r.state != FAILED]
    for rep in group.replicas:
        if rep.state == FAILED:
            if not healthy:
                result.lost = True
                return
            group.rereplicate(rep.id, healthy[0].id)
    group.settle()
    want = replay(group.primary.log, group.primary.applied + 1).items()
    for rep in group.replicas:
        try:
            got = rep.store.items()
        except CorruptionError:
            result.skipped += 1
            continue
        if rep.applied == group.primary.applied and got != want:
            result.violations.append(("convergence", result.seed, rep.id))
