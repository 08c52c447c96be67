"""K-mer encoding, extraction and placement.

A k-mer is stored as a 2-bit-per-base integer (A=00, C=01, G=10, T=11,
first base in the most significant position), so numeric order on the
packed value equals lexicographic order on the bases.  With k capped at
32 every k-mer fits one 64-bit word, which keeps the bulk paths as flat
numpy uint64 arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# One 64-bit word per k-mer.  Raising this requires multi-word packing
# everywhere a uint64 array is used, so it is a hard module constant.
MAX_K = 32

_BASE_BITS = {"A": 0, "C": 1, "G": 2, "T": 3}
_BITS_BASE = "ACGT"

# byte -> 2-bit code, 255 for anything outside ACGT (case-insensitive)
_CODE_LUT = np.full(256, 255, dtype=np.uint8)
for _b, _c in _BASE_BITS.items():
    _CODE_LUT[ord(_b)] = _c
    _CODE_LUT[ord(_b.lower())] = _c

_INVALID = np.uint8(255)

# splitmix64 finalizer constants
_SM_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SM_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_SM_MUL2 = np.uint64(0x94D049BB133111EB)

# Distinct seeds keep the owner hash and the two membership-filter hash
# streams independent even though all three start from the same word.
OWNER_SEED = np.uint64(0x1B873593C2B2AE35)
FILTER_SEED_A = np.uint64(0x5BD1E9955BD1E995)
FILTER_SEED_B = np.uint64(0x27D4EB2F165667C5)


class AlphabetError(ValueError):
    """A base outside ACGT reached a context that requires a packed k-mer."""


@dataclass(frozen=True)
class Kmer:
    """A packed k-mer: `code` holds the 2-bit encoding of `k` bases."""

    code: int
    k: int

    def __post_init__(self) -> None:
        if not 1 <= self.k <= MAX_K:
            raise ValueError(f"k={self.k} outside [1, {MAX_K}]")
        if not 0 <= self.code < (1 << (2 * self.k)):
            raise ValueError(f"code {self.code} out of range for k={self.k}")

    @property
    def bases(self) -> str:
        out = []
        for shift in range(2 * (self.k - 1), -1, -2):
            out.append(_BITS_BASE[(self.code >> shift) & 3])
        return "".join(out)

    def packed(self) -> bytes:
        """Big-endian bytes, padded to a whole 64-bit word."""
        return self.code.to_bytes(8, "big")

    def reverse_complement(self) -> "Kmer":
        return Kmer(rc_code(self.code, self.k), self.k)

    def canonical(self) -> "Kmer":
        rc = rc_code(self.code, self.k)
        return self if self.code <= rc else Kmer(rc, self.k)

    def __str__(self) -> str:
        return self.bases

    def __lt__(self, other: "Kmer") -> bool:
        if self.k != other.k:
            raise TypeError("cannot order k-mers of different k")
        return self.code < other.code


def pack(bases: str) -> Kmer:
    """Pack a base string into a Kmer; raises AlphabetError on non-ACGT."""
    k = len(bases)
    if not 1 <= k <= MAX_K:
        raise ValueError(f"length {k} outside [1, {MAX_K}]")
    code = 0
    for ch in bases.upper():
        bits = _BASE_BITS.get(ch)
        if bits is None:
            raise AlphabetError(f"base {ch!r} is not in ACGT")
        code = (code << 2) | bits
    return Kmer(code, k)


def rc_code(code: int, k: int) -> int:
    """Reverse complement of a packed code (complement = bitwise NOT per base)."""
    out = 0
    for _ in range(k):
        out = (out << 2) | (3 - (code & 3))
        code >>= 2
    return out


@dataclass(frozen=True)
class KmerParams:
    """Extraction and retention settings shared by every stage.

    `max_count` is the reliability ceiling: k-mers seen more often are
    treated as repeat-induced and dropped, like singletons, at table
    finalization.  There is no sensible universal default, so it is
    required.
    """

    k: int
    max_count: int
    canonical: bool = False
    min_count: int = 2

    def __post_init__(self) -> None:
        if not 2 <= self.k <= MAX_K:
            raise ValueError(f"k={self.k} outside [2, {MAX_K}]")
        if self.max_count < self.min_count:
            raise ValueError(
                f"max_count={self.max_count} below min_count={self.min_count}"
            )
        if self.min_count != 2:
            raise ValueError("retention floor is fixed at 2 occurrences")


@dataclass(frozen=True)
class DatasetModel:
    """Coarse dataset shape used only for sizing estimates."""

    genome_size: int
    depth: float
    read_length: float

    def __post_init__(self) -> None:
        if min(self.genome_size, self.depth, self.read_length) <= 0:
            raise ValueError("all dataset model fields must be positive")

    @property
    def total_bases(self) -> float:
        return self.genome_size * self.depth

    @classmethod
    def from_reads(
        cls, read_lengths: "list[int] | np.ndarray", genome_size: int | None = None
    ) -> "DatasetModel":
        lengths = np.asarray(read_lengths, dtype=np.float64)
        if lengths.size == 0:
            raise ValueError("no reads")
        total = float(lengths.sum())
        mean = total / lengths.size
        if genome_size is None:
            # Without an external genome estimate assume depth 1; callers
            # that know better pass genome_size explicitly.
            genome_size = int(total)
        return cls(genome_size=genome_size, depth=total / genome_size,
                   read_length=mean)


def estimate_cardinality(
    model: DatasetModel, k: int, simplified: bool = False
) -> float:
    """Expected number of k-mer instances in the dataset.

    The exact form is total_bases * (L-k+1) / L; with `simplified` the
    k-independent total_bases shortcut is returned instead.  The two
    differ by exactly the factor (L-k+1)/L, i.e. a relative gap of
    (k-1)/L, negligible for long reads.
    """
    if not 1 <= k < model.read_length:
        raise ValueError(f"k={k} must be in [1, read_length)")
    if simplified:
        return model.total_bases
    return model.total_bases * (model.read_length - k + 1) / model.read_length


def estimate_distinct_kmers(
    model: DatasetModel, k: int, distinct_fraction: float = 0.9
) -> int:
    """Sizing prior for the distinct k-mer population.

    The instance estimate bounds the distinct count from above;
    `distinct_fraction` scales it down for coverage-induced repetition.
    Only used to size the membership filter, so a loose value is fine.
    """
    if not 0 < distinct_fraction <= 1:
        raise ValueError("distinct_fraction must be in (0, 1]")
    est = distinct_fraction * estimate_cardinality(model, k)
    return max(1, int(est))


def splitmix64(x: np.ndarray | np.uint64) -> np.ndarray | np.uint64:
    """Vectorized splitmix64 finalizer over uint64 (wrapping arithmetic)."""
    z = (np.asarray(x, dtype=np.uint64) + _SM_GAMMA)
    z = (z ^ (z >> np.uint64(30))) * _SM_MUL1
    z = (z ^ (z >> np.uint64(27))) * _SM_MUL2
    return z ^ (z >> np.uint64(31))


_M64 = (1 << 64) - 1


def splitmix64_int(x: int) -> int:
    """Scalar splitmix64 on plain ints; bit-identical to the array path."""
    z = (x + 0x9E3779B97F4A7C15) & _M64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return z ^ (z >> 31)


def hash_codes(codes: np.ndarray, seed: np.uint64) -> np.ndarray:
    """Seeded 64-bit hash stream for an array of packed codes."""
    return splitmix64(np.asarray(codes, dtype=np.uint64) ^ seed)


def owner_of_codes(codes: np.ndarray, nranks: int) -> np.ndarray:
    """Destination rank for each packed code; pure function of (code, P)."""
    if nranks < 1:
        raise ValueError("nranks must be >= 1")
    h = hash_codes(codes, OWNER_SEED)
    return (h % np.uint64(nranks)).astype(np.int64)


def owner_of(kmer: Kmer | int, nranks: int) -> int:
    code = kmer.code if isinstance(kmer, Kmer) else int(kmer)
    return int(owner_of_codes(np.array([code], dtype=np.uint64), nranks)[0])


def encode_bases(bases: str) -> np.ndarray:
    """Base string -> uint8 code array (255 marks non-ACGT)."""
    raw = np.frombuffer(bases.encode("ascii"), dtype=np.uint8)
    return _CODE_LUT[raw]


def extract_kmer_codes(
    bases: str, params: KmerParams
) -> tuple[np.ndarray, np.ndarray]:
    """All valid k-mer windows of a read as packed codes plus offsets.

    Windows containing any non-ACGT character are dropped.  Positions are
    0-based offsets of the window start and come back strictly increasing.
    Returns (codes uint64, positions uint32).
    """
    k = params.k
    codes8 = encode_bases(bases)
    n = codes8.shape[0] - k + 1
    if n <= 0:
        return (np.empty(0, dtype=np.uint64), np.empty(0, dtype=np.uint32))

    bad = (codes8 == _INVALID)
    # window is clean iff no invalid base in [i, i+k): prefix-sum trick
    csum = np.zeros(codes8.shape[0] + 1, dtype=np.int64)
    np.cumsum(bad, out=csum[1:])
    clean = (csum[k:] - csum[:-k]) == 0

    work = np.where(bad, 0, codes8).astype(np.uint64)
    packed = _fold_pack(work, k, n)

    if params.canonical:
        # Pack the complemented, reversed read and flip the window order:
        # window i of the original maps to window n-1-i of the reversed
        # read, and its packed value there is the reverse complement.
        comp = np.where(bad, 0, 3 - codes8).astype(np.uint64)[::-1]
        rc = _fold_pack(comp, k, n)[::-1]
        packed = np.minimum(packed, rc)

    positions = np.nonzero(clean)[0].astype(np.uint32)
    return packed[clean], positions


def _fold_pack(codes: np.ndarray, k: int, n: int) -> np.ndarray:
    out = np.zeros(n, dtype=np.uint64)
    two = np.uint64(2)
    for j in range(k):
        out = (out << two) | codes[j : j + n]
    return out


def extract_kmers(bases: str, params: KmerParams) -> list[tuple[Kmer, int]]:
    """Convenience wrapper yielding (Kmer, position) pairs."""
    codes, positions = extract_kmer_codes(bases, params)
    return [
        (Kmer(int(c), params.k), int(p)) for c, p in zip(codes, positions)
    ]
