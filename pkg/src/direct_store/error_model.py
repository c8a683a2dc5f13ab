"""Probability of an application-visible read error under replica recovery.

A block of ``B`` bits is stored on ``R`` replicas, each bit independently
corrupted with probability ``E`` (the device UBER).  Recovery granularity
decides when a read fails:

* block recovery fails when every replica has at least one bad bit;
* chunk recovery fails when some chunk position is bad on every replica;
* majority recovery (bit-wise vote over the replica versions of a failing
  chunk) fails when all versions of a chunk are bad and some bit position is
  wrong on a majority of them.

Closed forms are evaluated through ``log1p``/``expm1`` so that ``E = 1e-15``
keeps full precision.  :func:`monte_carlo_error` simulates the per-bit
corruption directly and is the independent cross-check for the formulas.
"""

import decimal
import math
import re
from dataclasses import dataclass

from . import kernels

__all__ = [
    "DomainError",
    "ErrorModelParams",
    "ErrorProbability",
    "MonteCarloEstimate",
    "APPROX_THRESHOLD",
    "parse_size",
    "p_block_error",
    "p_chunk_error",
    "p_majority_error",
    "p_error",
    "monte_carlo_error",
    "max_tolerable_uber",
]

APPROX_THRESHOLD = 0.1
# (E*C)^R must sit this far below C/B for the chunk approximation to count as valid
CHUNK_APPROX_MARGIN = 0.01

_UNITS = {
    "bit": 1,
    "bits": 1,
    "b": 1,
    "byte": 8,
    "bytes": 8,
    "B": 8,
    "KB": 8 * 10**3,
    "MB": 8 * 10**6,
    "GB": 8 * 10**9,
    "KiB": 8 * 2**10,
    "MiB": 8 * 2**20,
    "GiB": 8 * 2**30,
}
_SIZE_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([A-Za-z]*)\s*$")


class DomainError(ValueError):
    """Raised when model parameters violate their invariants."""


def parse_size(text, default_unit="bytes"):
    """Return a size in bits from ``"128MB"``, ``"64 KiB"``, ``"4096 bits"`` or a bare number.

    ``KB``/``MB``/``GB`` are decimal, ``KiB``/``MiB``/``GiB`` binary.
    """
    if isinstance(text, (int, float)):
        value, unit = float(text), default_unit
    else:
        m = _SIZE_RE.match(str(text))
        if not m:
            raise DomainError(f"cannot parse size {text!r}")
        value, unit = float(m.group(1)), m.group(2) or default_unit
    if unit not in _UNITS:
        raise DomainError(f"unknown size unit {unit!r}")
    bits = value * _UNITS[unit]
    if bits != int(bits):
        raise DomainError(f"size {text!r} is not a whole number of bits")
    return int(bits)


@dataclass(frozen=True)
class ErrorModelParams:
    """UBER, block size, chunk size and replication factor.

    ``block_size`` and ``chunk_size`` are interpreted in ``unit`` (``"bits"``
    or ``"bytes"``); use :meth:`from_sizes` for strings such as ``"128MB"``.
    ``chunk_size`` defaults to the block size (chunk recovery degenerates to
    block recovery).
    """

    uber: float
    block_size: int
    chunk_size: int = 0
    replication: int = 3
    unit: str = "bits"

    def __post_init__(self):
        if self.unit not in ("bits", "bytes"):
            raise DomainError(f"unit must be 'bits' or 'bytes', not {self.unit!r}")
        if not (0.0 <= self.uber <= 1.0) or math.isnan(self.uber):
            raise DomainError(f"uber must lie in [0, 1], got {self.uber}")
        if self.block_size <= 0:
            raise DomainError("block size must be positive")
        if self.chunk_size < 0:
            raise DomainError("chunk size must be positive")
        if self.chunk_size > self.block_size:
            raise DomainError("chunk size cannot exceed block size")
        if self.replication < 1:
            raise DomainError("replication must be at least 1")

    @classmethod
    def from_sizes(cls, uber, block, chunk=None, replication=3):
        """Build params from size strings; results are stored in bits."""
        block_bits = parse_size(block)
        chunk_bits = parse_size(chunk) if chunk is not None else block_bits
        return cls(uber, block_bits, chunk_bits, replication, "bits")

    @property
    def block_bits(self):
        return self.block_size * (8 if self.unit == "bytes" else 1)

    @property
    def chunk_bits(self):
        size = self.chunk_size or self.block_size
        return size * (8 if self.unit == "bytes" else 1)

    def with_uber(self, uber):
        return ErrorModelParams(uber, self.block_size, self.chunk_size, self.replication, self.unit)


@dataclass(frozen=True)
class ErrorProbability:
    exact: float
    approx: float
    approx_valid: bool


@dataclass(frozen=True)
class MonteCarloEstimate:
    estimate: float
    stderr: float
    failures: int
    trials: int

    def agrees_with(self, p, sigmas=3.0):
        """True if ``p`` is within ``sigmas`` standard errors of the estimate.

        The standard error is taken under the hypothesis ``p`` (binomial
        ``sqrt(p(1-p)/n)``), which stays meaningful when the estimate is 0 or 1.
        """
        sd = math.sqrt(max(p * (1.0 - p), 0.0) / self.trials)
        return abs(self.estimate - p) <= sigmas * sd


def _p_bad(uber, nbits):
    """P(at least one of ``nbits`` independent bits is flipped)."""
    if nbits <= 0 or uber == 0.0:
        return 0.0
    if uber == 1.0:
        return 1.0
    return 0.0 - math.expm1(nbits * math.log1p(-uber))


def _pow(x, n):
    if x == 0.0:
        return 0.0
    return math.exp(n * math.log(x))


def _chunk_layout(params):
    b, c = params.block_bits, params.chunk_bits
    return b // c, c, b % c


def p_block_error(params):
    """All replicas of the block hold at least one flipped bit."""
    e, b, r = params.uber, params.block_bits, params.replication
    exact = _pow(_p_bad(e, b), r)
    eb = e * b
    approx = _pow(eb, r) if eb > 0 else 0.0
    return ErrorProbability(exact, approx, eb < APPROX_THRESHOLD)


def _from_chunk_failures(per_chunk_full, per_chunk_tail, nfull):
    """1 - prod over chunks of (1 - p_fail), in log space."""
    log_ok = 0.0
    if per_chunk_full >= 1.0 or per_chunk_tail >= 1.0:
        return 1.0
    if nfull:
        log_ok += nfull * math.log1p(-per_chunk_full)
    if per_chunk_tail:
        log_ok += math.log1p(-per_chunk_tail)
    return 0.0 - math.expm1(log_ok)


def p_chunk_error(params):
    """Some chunk position holds at least one flipped bit on every replica.

    A trailing partial chunk is treated as a chunk of its true length.
    """
    e, r = params.uber, params.replication
    nfull, c, tail = _chunk_layout(params)
    full = _pow(_p_bad(e, c), r)
    partial = _pow(_p_bad(e, tail), r) if tail else 0.0
    exact = _from_chunk_failures(full, partial, nfull)
    ec = e * c
    nchunks = params.block_bits / c
    approx = _pow(ec, r) * nchunks if ec > 0 else 0.0
    valid = ec < APPROX_THRESHOLD and _pow(ec, r) < CHUNK_APPROX_MARGIN / nchunks
    return ErrorProbability(exact, approx, valid)


def _majority_chunk_failure(e, nbits, r):
    """P(every replica of an ``nbits`` chunk is bad and the bit-wise vote is wrong somewhere).

    A bit votes wrong when a strict majority of replicas flipped it.  With W_j
    the event "some bit is wrong among j replicas", inclusion-exclusion over
    the replicas that are entirely clean gives
    ``sum_s (-1)^s C(r, s) (1-e)^(n s) P(W_{r-s})``.  The terms cancel down
    to roughly ``(e n)^(r - majority)`` of the largest one, so the sum is
    carried in decimal arithmetic with enough digits to absorb that.
    """
    if nbits == 0 or e == 0.0:
        return 0.0
    wrong_at = r // 2 + 1
    with decimal.localcontext() as ctx:
        ctx.prec = 40 + int(max(0.0, -math.log10(e)) * r)
        one, d = decimal.Decimal(1), decimal.Decimal(e)
        clean = (one - d) ** nbits
        total = decimal.Decimal(0)
        for s in range(r - wrong_at + 1):
            j = r - s
            tail = sum(math.comb(j, i) * d**i * (one - d) ** (j - i) for i in range(wrong_at, j + 1))
            wrong = one - (one - tail) ** nbits
            total += (-1) ** s * math.comb(r, s) * clean**s * wrong
    return min(1.0, max(0.0, float(total)))


def p_majority_error(params):
    """Chunk recovery with a bit-wise majority vote when every chunk copy is bad."""
    e, r = params.uber, params.replication
    nfull, c, tail = _chunk_layout(params)
    full = _majority_chunk_failure(e, c, r)
    partial = _majority_chunk_failure(e, tail, r) if tail else 0.0
    exact = _from_chunk_failures(full, partial, nfull)
    # leading term: a majority of replicas share a flipped bit, the rest are bad somewhere
    wrong_at = r // 2 + 1
    nchunks = params.block_bits / c
    lead = math.comb(r, wrong_at) * _pow(e, wrong_at) * c * _pow(e * c, r - wrong_at)
    approx = lead * nchunks
    return ErrorProbability(exact, approx, e * c < APPROX_THRESHOLD)


_MODES = {
    "block": p_block_error,
    "chunk": p_chunk_error,
    "majority": p_majority_error,
}


def p_error(params, mode):
    try:
        return _MODES[mode](params)
    except KeyError:
        raise DomainError(f"unknown recovery mode {mode!r}") from None


def monte_carlo_error(params, mode, trials, seed=0):
    """Estimate the block/chunk failure probability by simulating every bit.

    Each replica's flips are drawn as geometric gaps between independent
    Bernoulli(``uber``) bits, so no closed form is consulted.  Deterministic
    for a given ``seed`` and ``trials``.
    """
    if trials < 1:
        raise DomainError("trials must be positive")
    if mode not in ("block", "chunk"):
        raise DomainError(f"monte carlo supports 'block' and 'chunk', not {mode!r}")
    lm = kernels.log1m(params.uber)
    b, r = params.block_bits, params.replication
    if params.uber == 0.0:
        failures = 0
    elif mode == "block":
        failures = kernels.mc_block_failures(b, r, lm, trials, seed)
    else:
        failures = kernels.mc_chunk_failures(b, params.chunk_bits, r, lm, trials, seed)
    p = failures / trials
    return MonteCarloEstimate(p, math.sqrt(p * (1.0 - p) / trials), failures, trials)


def max_tolerable_uber(target_error, block_bits, chunk_bits=None, replication=3, mode="block",
                       rel_tol=1e-6):
    """Largest UBER whose exact failure probability does not exceed ``target_error``.

    Bisection in log space; the exact formulas are non-decreasing in the UBER.
    """
    if not (0.0 < target_error < 1.0):
        raise DomainError("target_error must lie in (0, 1)")
    chunk_bits = chunk_bits or block_bits

    def prob(e):
        return p_error(ErrorModelParams(e, block_bits, chunk_bits, replication), mode).exact

    if prob(1.0) <= target_error:
        return 1.0
    lo, hi = 1e-300, 1.0
    if prob(lo) > target_error:
        return 0.0
    while hi / lo - 1.0 > rel_tol:
        mid = math.sqrt(lo * hi)
        if prob(mid) <= target_error:
            lo = mid
        else:
            hi = mid
    return lo
