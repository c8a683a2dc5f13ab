"""Small metadata files kept as several locally replicated, checksummed copies.

Each copy is ``[crc32 u32 LE][generation u64 LE][payload]`` with the CRC over
everything after it.  Copies live at ``name``, ``name.copy1``, ``name.copy2``
(and so on).  A write bumps the generation and rewrites every copy in order,
so a torn write leaves at least one verifying copy of either the old or the
new generation; a read returns the highest verifying generation.
"""

import struct
import zlib

from .errors import MetadataFatal

HEADER = struct.Struct("<IQ")
DEFAULT_COPIES = 3


def copy_names(name, copies=DEFAULT_COPIES):
    return [name] + [f"{name}.copy{i}" for i in range(1, copies)]


def encode(payload, generation):
    body = struct.pack("<Q", generation) + bytes(payload)
    return struct.pack("<I", zlib.crc32(body)) + body


def decode(raw):
    """Return ``(generation, payload)`` or ``None`` if the copy does not verify."""
    raw = bytes(raw)
    if len(raw) < HEADER.size:
        return None
    crc, gen = HEADER.unpack_from(raw)
    if zlib.crc32(raw[4:]) != crc:
        return None
    return gen, raw[HEADER.size:]


def _read_copy(env, path):
    try:
        return decode(env.read(path, 0, env.size(path)))
    except (OSError, FileNotFoundError):
        return None


def read_meta(env, name, copies=DEFAULT_COPIES):
    """Payload of the newest verifying copy; :class:`MetadataFatal` if none verifies."""
    best = None
    for path in copy_names(name, copies):
        got = _read_copy(env, path)
        if got is not None and (best is None or got[0] > best[0]):
            best = got
    if best is None:
        raise MetadataFatal(f"all {copies} copies of {name} failed verification")
    return best[1]


def read_meta_generation(env, name, copies=DEFAULT_COPIES):
    best = None
    for path in copy_names(name, copies):
        got = _read_copy(env, path)
        if got is not None and (best is None or got[0] > best[0]):
            best = got
    return None if best is None else best[0]


def write_meta(env, name, payload, copies=DEFAULT_COPIES):
    """Write ``payload`` to every copy with the next generation number."""
    gen = read_meta_generation(env, name, copies)
    gen = 0 if gen is None else gen + 1
    raw = encode(payload, gen)
    for path in copy_names(name, copies):
        env.write_file(path, raw)
    return gen


def repair_meta(env, name, copies=DEFAULT_COPIES):
    """Rewrite copies that fail verification or lag behind; returns the number fixed."""
    found = [(path, _read_copy(env, path)) for path in copy_names(name, copies)]
    good = [g for _, g in found if g is not None]
    if not good:
        raise MetadataFatal(f"all {copies} copies of {name} failed verification")
    gen, payload = max(good, key=lambda g: g[0])
    raw = encode(payload, gen)
    fixed = 0
    for path, got in found:
        if got is None or got[0] != gen:
            env.write_file(path, raw)
            fixed += 1
    return fixed


def exists(env, name, copies=DEFAULT_COPIES):
    return any(env.exists(p) for p in copy_names(name, copies))


def delete_meta(env, name, copies=DEFAULT_COPIES):
    for path in copy_names(name, copies):
        env.delete(path)
