"""Synthetic long-read datasets with known overlap ground truth.

Reads are windows of a random genome with independent per-base errors
(substitution, insertion, deletion in equal parts), sampled at uniform
positions so file order carries no positional signal.  Because every
read remembers its
genome interval, the true overlapping pairs and their overlap lengths
are known exactly, which is what the end-to-end recall checks compare
against.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import IO

import numpy as np

from .seqio import Read

_BASES = np.frombuffer(b"ACGT", dtype=np.uint8)


@dataclass(frozen=True)
class TruePair:
    rid_a: int
    rid_b: int
    overlap: int


@dataclass
class SimulatedDataset:
    genome: str
    reads: list[Read]
    intervals: list[tuple[int, int]]

    def true_pairs(self, min_overlap: int) -> list[TruePair]:
        """All read pairs whose genome intervals overlap by >= min_overlap."""
        order = sorted(range(len(self.intervals)), key=lambda r: self.intervals[r])
        out = []
        for idx, r in enumerate(order):
            lo_r, hi_r = self.intervals[r]
            for q in order[idx + 1 :]:
                lo_q, hi_q = self.intervals[q]
                if lo_q > hi_r - min_overlap:
                    break
                ovl = min(hi_r, hi_q) - lo_q
                if ovl >= min_overlap:
                    a, b = (r, q) if r < q else (q, r)
                    out.append(TruePair(a, b, ovl))
        return sorted(out, key=lambda p: (p.rid_a, p.rid_b))


def random_genome(length: int, rng: np.random.Generator) -> str:
    return _BASES[rng.integers(0, 4, size=length)].tobytes().decode("ascii")


def _mutate(window: str, error_rate: float, rng: np.random.Generator) -> str:
    """Apply per-base errors; genomic span is preserved, length may drift."""
    if error_rate <= 0:
        return window
    out = []
    rolls = rng.random(len(window))
    kinds = rng.integers(0, 3, size=len(window))
    subs = rng.integers(1, 4, size=len(window))
    ins = rng.integers(0, 4, size=len(window))
    for i, base in enumerate(window):
        if rolls[i] >= error_rate:
            out.append(base)
            continue
        kind = kinds[i]
        if kind == 0:
            # substitute with one of the three other bases
            code = (("ACGT".index(base)) + subs[i]) % 4
            out.append("ACGT"[code])
        elif kind == 1:
            out.append("ACGT"[ins[i]])
            out.append(base)
        # kind == 2: deletion, emit nothing
    return "".join(out)


def simulate_reads(
    genome_length: int,
    depth: float,
    read_length: int,
    error_rate: float = 0.0,
    seed: int = 0,
) -> SimulatedDataset:
    """Sample ~genome_length*depth/read_length reads of fixed genomic span.

    Deterministic for a given seed.  error_rate is the per-base
    probability of an error; errors split evenly between substitutions,
    insertions and deletions, so the emitted read length stays close to
    read_length while its genomic span is exactly read_length.
    """
    if read_length > genome_length:
        raise ValueError("read_length cannot exceed genome_length")
    if not 0 <= error_rate < 1:
        raise ValueError("error_rate must be in [0, 1)")
    rng = np.random.default_rng(seed)
    genome = random_genome(genome_length, rng)
    nreads = max(1, round(genome_length * depth / read_length))
    starts = rng.integers(0, genome_length - read_length + 1, size=nreads)
    reads = []
    intervals = []
    for rid, start in enumerate(starts.tolist()):
        window = genome[start : start + read_length]
        bases = _mutate(window, error_rate, rng)
        reads.append(Read(rid=rid, bases=bases, name=f"sim{rid}"))
        intervals.append((start, start + read_length))
    return SimulatedDataset(genome=genome, reads=reads, intervals=intervals)


def write_truth(dataset: SimulatedDataset, min_overlap: int, sink: IO[str] | str | Path) -> None:
    """Tab-separated ground truth: rid_a, rid_b, overlap length."""
    own = isinstance(sink, (str, Path))
    fh = open(sink, "w", encoding="ascii") if own else sink
    try:
        for pair in dataset.true_pairs(min_overlap):
            fh.write(f"{pair.rid_a}\t{pair.rid_b}\t{pair.overlap}\n")
    finally:
        if own:
            fh.close()
