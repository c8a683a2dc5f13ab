"""Deterministic bit-flip injection over a simulated storage device.

Two backing stores are provided: :class:`MemoryStore` keeps files in memory
(clean files share their payload object, at-rest flips are an XOR overlay) and
:class:`DirStore` keeps them in a directory.  :class:`StorageEnv` wraps a store
and, when given an :class:`InjectorConfig`, flips bits either as they are read
(``on_read``) or in place between phases (``at_rest``, see
:func:`corrupt_at_rest`).

Flip positions come from a counter-based stream: the file is cut into 4 KiB
segments and each ``(seed, file, segment, epoch)`` seeds its own stream of
geometric gaps between independent Bernoulli(uber) bits.  Positions therefore
depend only on where a bit lives and on the read epoch, never on read order.
"""

import configparser
import contextlib
import fnmatch
import hashlib
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

SEGMENT_BYTES = 4096
SEGMENT_BITS = SEGMENT_BYTES * 8

_SALT_READ = 0x6A09E667F3BCC908
_SALT_REST = 0xBB67AE8584CAA73B
LOG_GLOB = "*.log"


def file_hash(name):
    return int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "little")


def segment_keys(seed, name, epoch, first, count, salt=_SALT_READ):
    base = kernels.mix64(kernels.mix64(seed ^ salt) ^ file_hash(name)) ^ kernels.mix64(epoch + 1)
    segs = np.arange(first, first + count, dtype=np.uint64)
    return kernels.mix64_array(np.uint64(base) ^ (segs * np.uint64(kernels.GOLDEN)))


def flip_positions(seed, name, epoch, uber, bit_lo, bit_hi, total_bits, salt=_SALT_READ):
    """Absolute bit positions in ``[bit_lo, bit_hi)`` flipped for this epoch."""
    if uber <= 0.0 or bit_hi <= bit_lo:
        return np.empty(0, dtype=np.int64)
    first = bit_lo // SEGMENT_BITS
    last = (bit_hi - 1) // SEGMENT_BITS
    keys = segment_keys(seed, name, epoch, first, last - first + 1, salt)
    pos = kernels.geometric_flips(keys, first, SEGMENT_BITS, total_bits, kernels.log1m(uber))
    if pos.size and (pos[0] < bit_lo or pos[-1] >= bit_hi):
        pos = pos[(pos >= bit_lo) & (pos < bit_hi)]
    return pos


# -- backing stores ----------------------------------------------------------


class _MemFile:
    __slots__ = ("data", "flips")

    def __init__(self, data):
        self.data = data
        self.flips = None  # sorted unique bit positions XOR-ed over an immutable payload

    def size(self):
        return len(self.data)

    def materialize(self):
        if isinstance(self.data, bytearray):
            return self.data
        buf = bytearray(self.data)
        if self.flips is not None and self.flips.size:
            kernels.apply_flips(buf, self.flips)
        self.data, self.flips = buf, None
        return buf


class MemoryStore:
    """In-memory file store.

    Writing a ``bytes`` object stores it without copying, so many replicas of
    one payload cost one buffer.  Corruption on such a file is kept as a
    sorted XOR overlay, and so is a partial write (as its bit difference from
    the shared payload).
    """

    def __init__(self):
        self._files = {}
        self._lock = threading.Lock()

    def write(self, name, data):
        if not isinstance(data, bytes):
            data = bytes(data)
        with self._lock:
            self._files[name] = _MemFile(data)

    def write_at(self, name, offset, data):
        with self._lock:
            f = self._get(name)
            if offset < 0 or offset + len(data) > f.size():
                raise OSError(f"write past end of {name}")
            if isinstance(f.data, bytearray):
                f.data[offset:offset + len(data)] = data
                return
            # keep the shared payload: the written range becomes its XOR difference from it
            base = np.frombuffer(f.data, dtype=np.uint8, count=len(data), offset=offset)
            xor = base ^ np.frombuffer(data, dtype=np.uint8)
            where = np.flatnonzero(xor)
            bits = np.unpackbits(xor[where, None], axis=1, bitorder="little")
            rows, cols = np.nonzero(bits)
            diff = (where[rows] + offset) * 8 + cols
            lo, hi = offset * 8, (offset + len(data)) * 8
            flips = f.flips if f.flips is not None else np.empty(0, dtype=np.int64)
            a, b = np.searchsorted(flips, [lo, hi])
            f.flips = np.concatenate([flips[:a], diff.astype(np.int64), flips[b:]])

    def read(self, name, offset, length):
        with self._lock:
            f = self._get(name)
        end = offset + length
        if offset < 0 or end > f.size():
            raise OSError(f"read past end of {name}: {offset}+{length} > {f.size()}")
        data, flips = f.data, f.flips
        if isinstance(data, bytearray):
            return bytes(data[offset:end])
        mv = memoryview(data)[offset:end]
        if flips is None or not flips.size:
            return mv
        lo, hi = np.searchsorted(flips, [offset * 8, end * 8])
        if lo == hi:
            return mv
        buf = bytearray(mv)
        kernels.apply_flips(buf, flips[lo:hi] - offset * 8)
        return bytes(buf)

    def flip_bits(self, name, positions):
        if not len(positions):
            return
        with self._lock:
            f = self._get(name)
            if isinstance(f.data, bytearray):
                kernels.apply_flips(f.data, positions)
            elif f.flips is None:
                f.flips = np.unique(np.asarray(positions, dtype=np.int64))
            else:
                f.flips = np.setxor1d(f.flips, positions)

    def size(self, name):
        with self._lock:
            return self._get(name).size()

    def exists(self, name):
        return name in self._files

    def delete(self, name):
        with self._lock:
            self._files.pop(name, None)

    def list(self, prefix=""):
        with self._lock:
            return sorted(n for n in self._files if n.startswith(prefix))

    def _get(self, name):
        try:
            return self._files[name]
        except KeyError:
            raise FileNotFoundError(name) from None


class DirStore:
    """Files under a directory; names may contain ``/``."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, name):
        return self.root / name

    def write(self, name, data):
        path = self._path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)

    def write_at(self, name, offset, data):
        with open(self._path(name), "r+b") as f:
            f.seek(offset)
            f.write(data)
            f.flush()
            os.fsync(f.fileno())

    def read(self, name, offset, length):
        with open(self._path(name), "rb") as f:
            f.seek(offset)
            data = f.read(length)
        if len(data) != length:
            raise OSError(f"short read on {name}")
        return data

    def flip_bits(self, name, positions):
        if not len(positions):
            return
        buf = bytearray(self._path(name).read_bytes())
        kernels.apply_flips(buf, positions)
        self.write(name, buf)

    def size(self, name):
        return self._path(name).stat().st_size

    def exists(self, name):
        return self._path(name).is_file()

    def delete(self, name):
        with contextlib.suppress(FileNotFoundError):
            self._path(name).unlink()

    def list(self, prefix=""):
        out = []
        for p in self.root.rglob("*"):
            if p.is_file() and not p.name.endswith(".tmp"):
                rel = p.relative_to(self.root).as_posix()
                if rel.startswith(prefix):
                    out.append(rel)
        return sorted(out)


# -- injector ----------------------------------------------------------------


@dataclass
class InjectorConfig:
    """Bit-flip injection settings.

    ``scope`` is a glob (or a predicate on the file name) selecting files that
    may be corrupted; replicated-log files (``*.log``) are excluded unless
    ``include_logs`` is set.  ``freeze_epoch`` makes repeated on-read flips of
    a page identical (sticky corruption) instead of fresh per read.
    """

    uber: float
    mode: str = "on_read"
    seed: int = 0
    scope: object = "*"
    freeze_epoch: bool = False
    include_logs: bool = False

    def __post_init__(self):
        if not (0.0 <= self.uber <= 1.0):
            raise ValueError(f"uber must lie in [0, 1], got {self.uber}")
        if self.mode not in ("on_read", "at_rest"):
            raise ValueError(f"mode must be on_read or at_rest, not {self.mode!r}")

    def in_scope(self, name):
        if not self.include_logs and fnmatch.fnmatch(name, LOG_GLOB):
            return False
        if callable(self.scope):
            return bool(self.scope(name))
        return fnmatch.fnmatch(name, self.scope)


def load_injector_config(source, uber=None):
    """Read an ``[injector]`` section (path or INI text); ``uber`` overrides the file."""
    parser = configparser.ConfigParser()
    if isinstance(source, (str, os.PathLike)) and Path(source).is_file():
        parser.read(source)
    else:
        parser.read_string(str(source))
    sec = parser["injector"]
    return InjectorConfig(
        uber=float(uber if uber is not None else sec.get("uber", "0")),
        mode=sec.get("mode", "on_read"),
        seed=int(sec.get("seed", "0"), 0),
        scope=sec.get("scope-glob", "*"),
        freeze_epoch=sec.getboolean("freeze-epoch", False),
        include_logs=sec.getboolean("include-logs", False),
    )


@dataclass
class CorruptionReport:
    """Bit offsets flipped per file by one :func:`corrupt_at_rest` pass."""

    flips: dict = field(default_factory=dict)

    def __len__(self):
        return sum(int(v.size) for v in self.flips.values())

    def __iter__(self):
        for name, pos in self.flips.items():
            for p in pos:
                yield name, int(p)

    @property
    def files(self):
        return [n for n, v in self.flips.items() if v.size]


class InjectionIOError(OSError):
    def __init__(self, report, cause):
        self.report = report
        super().__init__(f"at-rest corruption aborted: {cause}")


class StorageEnv:
    """A backing store plus an optional injector and read/flip counters."""

    def __init__(self, store=None, injector=None):
        self.store = store if store is not None else MemoryStore()
        self.injector = injector
        self.bits_read = 0
        self.bits_flipped = 0
        self._epochs = {}
        self._rest_passes = 0
        self._suspended = 0
        self._lock = threading.Lock()

    # plain file operations
    def write_file(self, name, data):
        self.store.write(name, data)

    def write_at(self, name, offset, data):
        self.store.write_at(name, offset, data)

    def size(self, name):
        return self.store.size(name)

    def exists(self, name):
        return self.store.exists(name)

    def delete(self, name):
        self.store.delete(name)

    def list(self, prefix=""):
        return self.store.list(prefix)

    def read_file(self, name):
        return self.read(name, 0, self.size(name))

    @contextlib.contextmanager
    def suspended(self):
        """Temporarily bypass on-read injection (oracle and harness reads)."""
        with self._lock:
            self._suspended += 1
        try:
            yield self
        finally:
            with self._lock:
                self._suspended -= 1

    def read(self, name, offset, length):
        return read_through(self, name, offset, length)

    def _next_epoch(self, name):
        with self._lock:
            epoch = self._epochs.get(name, 0)
            self._epochs[name] = epoch + 1
        return epoch

    def _count(self, read_bits, flipped):
        with self._lock:
            self.bits_read += read_bits
            self.bits_flipped += flipped


def read_through(env, name, offset, length):
    """Read ``length`` bytes at ``offset``, flipping bits if on-read injection is active."""
    data = env.store.read(name, offset, length)
    inj = env.injector
    if inj is None or inj.mode != "on_read" or env._suspended or not inj.in_scope(name):
        env._count(length * 8, 0)
        return data
    epoch = 0 if inj.freeze_epoch else env._next_epoch(name)
    total_bits = env.store.size(name) * 8
    pos = flip_positions(inj.seed, name, epoch, inj.uber, offset * 8, (offset + length) * 8, total_bits)
    env._count(length * 8, int(pos.size))
    if not pos.size:
        return data
    buf = bytearray(data)
    kernels.apply_flips(buf, pos - offset * 8)
    return bytes(buf)


def corrupt_at_rest(env, names=None, uber=None):
    """Flip every in-scope stored bit with probability ``uber`` and persist the result.

    Each call is a new pass with fresh flip positions.  Returns a
    :class:`CorruptionReport`; an I/O failure raises :class:`InjectionIOError`
    carrying the partial report.
    """
    inj = env.injector
    if inj is None:
        raise ValueError("environment has no injector configured")
    rate = inj.uber if uber is None else uber
    report = CorruptionReport()
    with env._lock:
        epoch = env._rest_passes
        env._rest_passes += 1
    candidates = env.list() if names is None else list(names)
    for name in candidates:
        if not inj.in_scope(name):
            continue
        try:
            total_bits = env.store.size(name) * 8
            pos = flip_positions(inj.seed, name, epoch, rate, 0, total_bits, total_bits, salt=_SALT_REST)
            env.store.flip_bits(name, pos)
        except OSError as exc:
            raise InjectionIOError(report, exc) from exc
        report.flips[name] = pos
        env._count(0, int(pos.size))
    return report


def flip_bit(env, name, bit):
    """Flip one stored bit (targeted corruption for tests and schedules)."""
    env.store.flip_bits(name, np.array([bit], dtype=np.int64))
