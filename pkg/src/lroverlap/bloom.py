"""First pass over the k-mer stream: a distributed membership filter.

The overwhelming majority of error-containing k-mers occur exactly once
and can never seed an overlap, so the first pass routes every k-mer
instance to its owner rank and runs it through a per-rank bit filter.
Only k-mers seen at least twice on their owner (plus a small,
false-positive-rate-bounded sliver of singletons) graduate to the exact
counting pass, which shrinks the hash table by up to an order of
magnitude.  The filter can overstate membership but never understates
it: a k-mer truly seen twice is always promoted.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .exchange import RankWorld, staged_stream
from .kmers import (
    FILTER_SEED_A,
    FILTER_SEED_B,
    KmerParams,
    extract_kmer_codes,
    owner_of_codes,
    splitmix64_int,
)
from .seqio import Read

_REC = struct.Struct("<Q")  # one packed k-mer per item

_SEED_A = int(FILTER_SEED_A)
_SEED_B = int(FILTER_SEED_B)

MAX_HASHES = 16


def size_filter(expected_n: int, target_fp: float) -> tuple[int, int]:
    """Bit count and hash count for an expected population and FP target.

    Standard sizing: bits = -n ln(p) / ln(2)^2, hashes = (bits/n) ln 2,
    rounded and clamped to [1, 16] hash functions.
    """
    if expected_n < 1:
        raise ValueError("expected_n must be >= 1")
    if not 0 < target_fp < 1:
        raise ValueError("target_fp must be in (0, 1)")
    bits = math.ceil(-expected_n * math.log(target_fp) / (math.log(2) ** 2))
    hashes = round(bits / expected_n * math.log(2))
    return bits, min(MAX_HASHES, max(1, hashes))


class BloomPartition:
    """One rank's slice of the membership filter.

    Probe positions come from double hashing: two seeded 64-bit hashes
    h1, h2 of the packed k-mer give probe i at (h1 + i*h2) mod bits.
    h2 is forced odd so the probe sequence never collapses onto a
    single bit.
    """

    def __init__(self, nbits: int, nhashes: int):
        if nbits < 1 or nhashes < 1:
            raise ValueError("nbits and nhashes must be positive")
        self.nbits = nbits
        self.nhashes = nhashes
        self.bits = np.zeros((nbits + 7) // 8, dtype=np.uint8)
        self.inserts = 0
        self.new_marks = 0

    @classmethod
    def sized_for(cls, expected_n: int, target_fp: float) -> "BloomPartition":
        return cls(*size_filter(expected_n, target_fp))

    def insert_and_test(self, code: int) -> bool:
        """Insert one k-mer; True iff every probe bit was already set.

        All probe bits are set regardless of the outcome, so a second
        insert of the same code always returns True.
        """
        h1 = splitmix64_int(code ^ _SEED_A)
        h2 = splitmix64_int(code ^ _SEED_B) | 1
        bits = self.bits
        seen = True
        pos = h1
        for _ in range(self.nhashes):
            idx = pos % self.nbits
            byte, bit = idx >> 3, 1 << (idx & 7)
            if not bits[byte] & bit:
                seen = False
                bits[byte] = bits[byte] | bit
            pos += h2
        self.inserts += 1
        if not seen:
            self.new_marks += 1
        return seen

    def occupancy(self) -> float:
        ones = int(
            np.unpackbits(self.bits, bitorder="little")[: self.nbits].sum()
        )
        return ones / self.nbits

    def expected_fp_rate(self) -> float:
        """Current false positive probability given the set bit fraction."""
        return self.occupancy() ** self.nhashes


@dataclass
class BloomStats:
    nbits: int
    nhashes: int
    instances_in: int
    instances_owned: int
    first_occurrences: int
    candidates: int
    occupancy: float
    fp_rate: float
    rounds: int


def kmer_instance_stream(
    reads: Iterable[Read], params: KmerParams, nranks: int
) -> Iterator[tuple[int, int]]:
    """Yield (owner rank, packed code) for every k-mer instance of `reads`."""
    for read in reads:
        codes, _ = extract_kmer_codes(read.bases, params)
        if codes.size == 0:
            continue
        owners = owner_of_codes(codes, nranks)
        yield from zip(owners.tolist(), codes.tolist())


def run_bloom_stage(
    local_reads: Iterable[Read],
    params: KmerParams,
    world: RankWorld,
    bytes_per_round: int,
    expected_distinct_global: int,
    target_fp: float = 0.05,
) -> tuple[set[int], BloomStats]:
    """Stream k-mer instances to their owners; return this rank's candidates.

    Candidates are packed codes whose filter lookup reported "already
    present", i.e. repeated k-mers plus false positives.  Every rank
    sizes its partition for an even 1/P share of the global distinct
    estimate.
    """
    per_rank = max(1, math.ceil(expected_distinct_global / world.nranks))
    part = BloomPartition.sized_for(per_rank, target_fp)
    candidates: set[int] = set()
    sent = 0

    def stream() -> Iterator[tuple[int, bytes]]:
        nonlocal sent
        for owner, code in kmer_instance_stream(local_reads, params, world.nranks):
            sent += 1
            yield owner, _REC.pack(code)

    def deliver(_src: int, item: bytes) -> None:
        (code,) = _REC.unpack(item)
        if part.insert_and_test(code):
            candidates.add(code)

    rounds = staged_stream(world, stream(), bytes_per_round, deliver)
    stats = BloomStats(
        nbits=part.nbits,
        nhashes=part.nhashes,
        instances_in=sent,
        instances_owned=part.inserts,
        first_occurrences=part.new_marks,
        candidates=len(candidates),
        occupancy=part.occupancy(),
        fp_rate=part.expected_fp_rate(),
        rounds=rounds,
    )
    return candidates, stats
