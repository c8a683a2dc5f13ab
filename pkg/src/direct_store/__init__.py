"""Live recovery of bit corruptions in replicated storage.

Subpackages:

``lsm``
    Local LSM key-value store with checksummed data blocks and duplicated
    metadata; compaction reports corrupted key ranges instead of failing.
``replication``
    Single-leader quorum log over LSM replicas with log-serialized patch
    recovery.
``blockfs``
    Immutable-block replicated file store with 512 B checksums, 64 KB chunk
    repair and bit-wise majority voting.

Top-level modules hold the error model, the fault injector and the experiment
harness.
"""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
