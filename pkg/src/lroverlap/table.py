"""Second pass: exact counting and location lists for candidate k-mers.

The same k-mer instance stream is replayed, but now each owner rank
keeps an exact table keyed by the candidate codes that survived the
membership filter.  Every hit appends the (read id, offset) of the
instance, capped just past the reliability ceiling so runaway repeats
cannot blow up memory.  Finalization then drops everything outside the
[2, max_count] reliability band; what remains is exactly the seed
evidence the overlap stage works from, with a complete location list
per k-mer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Iterator

from .bloom import kmer_instance_stream
from .exchange import RankWorld, staged_stream
from .kmers import KmerParams, extract_kmer_codes, owner_of_codes
from .seqio import Read

_REC = struct.Struct("<QQI")  # packed k-mer, read id, offset in read


class KmerEntry:
    """Occurrence count plus (rid, pos) locations, capped at max_count+1."""

    __slots__ = ("count", "locations")

    def __init__(self) -> None:
        self.count = 0
        self.locations: list[tuple[int, int]] = []

    def __repr__(self) -> str:
        return f"KmerEntry(count={self.count}, locations={self.locations})"


class TablePartition:
    """One rank's exact k-mer table over its candidate key set."""

    def __init__(self, candidates: Iterable[int], max_count: int):
        if max_count < 2:
            raise ValueError("max_count must be >= 2")
        self.max_count = max_count
        self.entries: dict[int, KmerEntry] = {c: KmerEntry() for c in candidates}
        self.finalized = False

    def insert_location(self, code: int, rid: int, pos: int) -> bool:
        """Count an instance; False when the code is not a candidate key.

        The location list stops growing at max_count+1 entries: one past
        the ceiling proves the k-mer is over the limit without storing
        every occurrence of a high-frequency repeat.
        """
        if self.finalized:
            raise RuntimeError("table already finalized")
        entry = self.entries.get(code)
        if entry is None:
            return False
        entry.count += 1
        if len(entry.locations) <= self.max_count:
            entry.locations.append((rid, pos))
        return True

    def finalize(self) -> "TableStats":
        """Drop keys outside the [2, max_count] band; keep the rest.

        Surviving entries always satisfy len(locations) == count because
        the cap only truncates lists of k-mers that are dropped here.
        """
        dropped_rare = 0
        dropped_frequent = 0
        for code in list(self.entries):
            entry = self.entries[code]
            if entry.count < 2:
                dropped_rare += 1
                del self.entries[code]
            elif entry.count > self.max_count:
                dropped_frequent += 1
                del self.entries[code]
            else:
                assert len(entry.locations) == entry.count
                # canonical order: instance arrival order depends on how
                # the exchange chunked its rounds, and nothing downstream
                # may depend on that
                entry.locations.sort()
        self.finalized = True
        return TableStats(
            retained=len(self.entries),
            dropped_rare=dropped_rare,
            dropped_frequent=dropped_frequent,
        )


@dataclass
class TableStats:
    retained: int
    dropped_rare: int
    dropped_frequent: int
    instances_owned: int = 0
    non_candidate_instances: int = 0
    rounds: int = 0


def run_table_stage(
    local_reads: Iterable[Read],
    candidates: set[int],
    params: KmerParams,
    world: RankWorld,
    bytes_per_round: int,
) -> tuple[TablePartition, TableStats]:
    """Replay the instance stream with locations; return the finalized table."""
    table = TablePartition(candidates, params.max_count)
    owned = 0
    misses = 0

    def stream() -> Iterator[tuple[int, bytes]]:
        for read in local_reads:
            codes, positions = extract_kmer_codes(read.bases, params)
            if codes.size == 0:
                continue
            owners = owner_of_codes(codes, world.nranks)
            rid = read.rid
            for owner, code, pos in zip(
                owners.tolist(), codes.tolist(), positions.tolist()
            ):
                yield owner, _REC.pack(code, rid, pos)

    def deliver(_src: int, item: bytes) -> None:
        nonlocal owned, misses
        code, rid, pos = _REC.unpack(item)
        owned += 1
        if not table.insert_location(code, rid, pos):
            misses += 1

    rounds = staged_stream(world, stream(), bytes_per_round, deliver)
    stats = table.finalize()
    stats.instances_owned = owned
    stats.non_candidate_instances = misses
    stats.rounds = rounds
    return table, stats
