"""FASTQ reading/writing and the static read-to-rank partition."""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Iterator, Sequence

import numpy as np


@dataclass(frozen=True)
class Read:
    """One sequencing read. `rid` is its global 0-based position in input order."""

    rid: int
    bases: str
    name: str = ""

    def __len__(self) -> int:
        return len(self.bases)


class FastqParseError(ValueError):
    def __init__(self, record_index: int, message: str):
        self.record_index = record_index
        super().__init__(f"record {record_index}: {message}")


def parse_fastq(source: IO[str] | str, start_rid: int = 0) -> Iterator[Read]:
    """Parse 4-line FASTQ records from a text stream or string.

    Read ids are assigned sequentially from `start_rid` in file order.
    Bases are uppercased; any letters are accepted here and non-ACGT
    characters simply never produce k-mers downstream.  Malformed
    records raise FastqParseError with the failing record index.
    """
    if isinstance(source, str):
        source = io.StringIO(source)
    rid = start_rid
    index = 0
    while True:
        header = source.readline()
        if header == "":
            return
        header = header.rstrip("\n")
        if header == "" :
            # tolerate trailing blank lines only
            rest = source.read()
            if rest.strip() == "":
                return
            raise FastqParseError(index, "blank line inside file")
        if not header.startswith("@"):
            raise FastqParseError(index, f"header does not start with '@': {header[:30]!r}")
        seq = source.readline().rstrip("\n")
        plus = source.readline().rstrip("\n")
        qual = source.readline().rstrip("\n")
        if not plus.startswith("+"):
            raise FastqParseError(index, "separator line does not start with '+'")
        if len(qual) != len(seq):
            raise FastqParseError(
                index, f"quality length {len(qual)} != sequence length {len(seq)}"
            )
        yield Read(rid=rid, bases=seq.upper(), name=header[1:].split()[0] if len(header) > 1 else "")
        rid += 1
        index += 1


def read_fastq_paths(paths: Sequence[str | Path]) -> list[Read]:
    """Concatenate several FASTQ files; rids number records across all files."""
    reads: list[Read] = []
    for path in paths:
        with open(path, "r", encoding="ascii") as fh:
            for read in parse_fastq(fh, start_rid=len(reads)):
                reads.append(read)
    return reads


def write_fastq(reads: Iterable[Read], sink: IO[str] | str | Path) -> None:
    """Write reads as FASTQ with a constant placeholder quality line."""
    own = isinstance(sink, (str, Path))
    fh = open(sink, "w", encoding="ascii") if own else sink
    try:
        for read in reads:
            name = read.name or f"read{read.rid}"
            fh.write(f"@{name}\n{read.bases}\n+\n{'I' * len(read.bases)}\n")
    finally:
        if own:
            fh.close()


@dataclass(frozen=True)
class ReadPartition:
    """Contiguous assignment of rid ranges to ranks.

    `bounds` has P+1 entries; rank r owns rids [bounds[r], bounds[r+1]).
    The mapping is a pure function of the read lengths and P, so every
    rank can rebuild it identically.
    """

    bounds: tuple[int, ...]

    @property
    def nranks(self) -> int:
        return len(self.bounds) - 1

    @property
    def nreads(self) -> int:
        return self.bounds[-1]

    def owner_of_read(self, rid: int) -> int:
        if not 0 <= rid < self.nreads:
            raise IndexError(f"rid {rid} outside [0, {self.nreads})")
        # bounds is sorted; rightmost interval whose start is <= rid
        return int(np.searchsorted(self.bounds, rid, side="right")) - 1

    def range_of(self, rank: int) -> tuple[int, int]:
        return self.bounds[rank], self.bounds[rank + 1]

    def slice_of(self, rank: int) -> slice:
        lo, hi = self.range_of(rank)
        return slice(lo, hi)


def partition_reads(reads: Sequence[Read | int], nranks: int) -> ReadPartition:
    """Split reads into P contiguous runs balanced by base count.

    Accepts Read objects or plain lengths.  Greedy scan: each rank takes
    reads until its base count reaches the remaining average, so every
    rank gets a contiguous rid range and ranks with fewer bases per read
    get more reads.  Empty ranges are possible when P exceeds the read
    count.
    """
    if nranks < 1:
        raise ValueError("nranks must be >= 1")
    lengths = [r if isinstance(r, int) else len(r) for r in reads]
    total = sum(lengths)
    bounds = [0]
    i = 0
    for rank in range(nranks, 1, -1):
        # target for this rank: even share of what is left
        target = total / rank
        taken = 0
        while i < len(lengths) and len(lengths) - i > rank - 1:
            nxt = lengths[i]
            # stop when adding the next read overshoots more than it helps
            if taken > 0 and taken + nxt - target > target - taken:
                break
            taken += nxt
            i += 1
            if taken >= target:
                break
        bounds.append(i)
        total -= taken
    bounds.append(len(lengths))
    return ReadPartition(bounds=tuple(bounds))
