"""Hot-loop kernels, compiled when available.

The Cython extension ``direct_store._ckernels`` is preferred; if it is missing
(or ``DIRECT_STORE_PURE_PYTHON=1`` is set) the numpy/zlib twins in
``direct_store._pykernels`` are used instead.  Both produce identical output.
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if not os.environ.get("DIRECT_STORE_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

crc32_pieces = _impl.crc32_pieces
bad_pieces = _impl.bad_pieces
majority3 = _impl.majority3
apply_flips = _impl.apply_flips
geometric_flips = _impl.geometric_flips
mc_block_failures = _impl.mc_block_failures
mc_chunk_failures = _impl.mc_chunk_failures

mix64 = _pykernels.mix64
mix64_array = _pykernels.mix64_array
log1m = _pykernels.log1m
GOLDEN = _pykernels.GOLDEN
MASK64 = _pykernels.MASK64


def backends():
    """Every importable kernel module, keyed by name (used by tests and benchmarks)."""
    found = {"python": _pykernels}
    try:
        from . import _ckernels

        found["cython"] = _ckernels
    except ImportError:
        pass
    return found
