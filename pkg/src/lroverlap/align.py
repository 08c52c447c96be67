"""Seed-and-extend alignment with an x-drop cutoff.

Every overlap task carries seed offsets where the two reads share a
k-mer.  The aligner anchors on a seed and extends outward in both
directions with banded dynamic programming over antidiagonals: linear
gap costs make cells on antidiagonal d depend only on d-1 (gaps) and
d-2 (substitutions), and any cell scoring more than `xdrop` below the
best score of earlier antidiagonals is abandoned.  The live band
typically stays a few cells wide, so the cost is near-linear in the
overlap length instead of quadratic.

The hot loop is compiled with numba.  It records the scores of every
live window so a transcript can be recovered by walking predecessors
backwards; transcript recovery is optional and off by default.
"""

from __future__ import annotations

import logging
import struct
import time
from dataclasses import dataclass, replace
from typing import Iterator, Mapping, Sequence

import numpy as np
from numba import njit

from .exchange import RankWorld, gather_counts, staged_stream
from .overlap import OverlapTask
from .seqio import Read, ReadPartition

NEG = -(1 << 40)

_RID = struct.Struct("<Q")


@dataclass(frozen=True)
class ScoringScheme:
    """Linear-gap scoring; defaults favor identity runs on noisy reads."""

    match: int = 1
    mismatch: int = -1
    gap: int = -1
    xdrop: int = 7

    def __post_init__(self) -> None:
        if self.match <= 0:
            raise ValueError("match reward must be positive")
        if self.mismatch > 0 or self.gap > 0:
            raise ValueError("mismatch and gap penalties must not be positive")
        if self.xdrop < 0:
            raise ValueError("xdrop must be non-negative")


@dataclass(frozen=True)
class Alignment:
    """One scored extension around one seed.

    Half-open coordinates on the original reads: read a is aligned over
    [begin_a, end_a), read b over [begin_b, end_b), and the seed k-mer
    started at (seed_a, seed_b).  `transcript` spells the pairwise
    columns left to right (M match, X substitution, I base only in b,
    D base only in a) when recovery was requested, else None.
    """

    rid_a: int
    rid_b: int
    score: int
    begin_a: int
    end_a: int
    begin_b: int
    end_b: int
    seed_a: int
    seed_b: int
    transcript: str | None = None


@njit(cache=True, nogil=True)
def _extend_kernel(s, t, match, mismatch, gap, xdrop):  # pragma: no cover
    """Extend from the implicit anchor before s[0]/t[0]; returns recording.

    Cell (i, j) is the best score of an extension consuming i chars of
    s and j chars of t; (0, 0) = 0 is the anchor.  The prune threshold
    for antidiagonal d is fixed from the best score of antidiagonals
    < d, so the result cannot depend on scan order within a diagonal.
    """
    ns = s.shape[0]
    nt = t.shape[0]
    maxd = ns + nt
    width_cap = (ns if ns < nt else nt) + 2

    prev = np.empty(width_cap, np.int64)
    prev2 = np.empty(width_cap, np.int64)
    cur = np.empty(width_cap, np.int64)

    # recorded windows for traceback: scores is flat, diagonal d occupies
    # scores[offs[d]:offs[d+1]] covering absolute cells [wlos[d], ...]
    wlos = np.zeros(maxd + 2, np.int64)
    offs = np.zeros(maxd + 2, np.int64)
    cap = 8 * (maxd + 2) + 64
    scores = np.empty(cap, np.int64)

    scores[0] = 0
    wlos[0] = 0
    offs[1] = 1
    ndiag = 1

    best = np.int64(0)
    best_i = 0
    best_j = 0

    prev[0] = 0
    lo1 = 0
    hi1 = 0
    lo2 = 0
    hi2 = -1
    llo = 0
    lhi = 0

    for d in range(1, maxd + 1):
        lod = 0 if d <= nt else d - nt
        hid = d if d < ns else ns
        wlo = llo if llo > lod else lod
        whi = (lhi + 1) if (lhi + 1) < hid else hid
        if wlo > whi:
            break
        thresh = best - xdrop

        any_live = False
        nlo = 0
        nhi = -1
        for i in range(wlo, whi + 1):
            j = d - i
            sc = NEG
            if i > 0 and lo1 <= i - 1 <= hi1:
                v = prev[i - 1 - lo1]
                if v > NEG and v + gap > sc:
                    sc = v + gap
            if j > 0 and lo1 <= i <= hi1:
                v = prev[i - lo1]
                if v > NEG and v + gap > sc:
                    sc = v + gap
            if i > 0 and j > 0 and lo2 <= i - 1 <= hi2:
                v = prev2[i - 1 - lo2]
                if v > NEG:
                    vv = v + (match if s[i - 1] == t[j - 1] else mismatch)
                    if vv > sc:
                        sc = vv
            if sc < thresh:
                sc = NEG
            cur[i - wlo] = sc
            if sc > NEG:
                if not any_live:
                    nlo = i
                    any_live = True
                nhi = i
                if sc > best or (
                    sc == best and (j > best_j or (j == best_j and i > best_i))
                ):
                    best = sc
                    best_i = i
                    best_j = j

        # record the scanned window
        width = whi - wlo + 1
        need = offs[d] + width
        if need > cap:
            newcap = cap * 2
            while newcap < need:
                newcap *= 2
            grown = np.empty(newcap, np.int64)
            grown[: offs[d]] = scores[: offs[d]]
            scores = grown
            cap = newcap
        for x in range(width):
            scores[offs[d] + x] = cur[x]
        wlos[d] = wlo
        offs[d + 1] = need
        ndiag = d + 1

        if not any_live:
            break

        tmp = prev2
        prev2 = prev
        lo2 = lo1
        hi2 = hi1
        prev = cur
        lo1 = wlo
        hi1 = whi
        cur = tmp
        llo = nlo
        lhi = nhi

    return best, best_i, best_j, scores, wlos, offs, ndiag


def _as_bytes(bases: str) -> np.ndarray:
    return np.frombuffer(bases.encode("ascii"), dtype=np.uint8)


class _Recording:
    """Read access into the kernel's recorded score windows."""

    def __init__(self, scores, wlos, offs, ndiag):
        self.scores = scores
        self.wlos = wlos
        self.offs = offs
        self.ndiag = ndiag

    def get(self, d: int, i: int) -> int:
        if d < 0 or d >= self.ndiag:
            return NEG
        wlo = self.wlos[d]
        width = self.offs[d + 1] - self.offs[d]
        if i < wlo or i >= wlo + width:
            return NEG
        return int(self.scores[self.offs[d] + i - wlo])


def _traceback(
    rec: _Recording, s: np.ndarray, t: np.ndarray,
    end_i: int, end_j: int, scoring: ScoringScheme,
) -> str:
    """Walk recorded scores from (end_i, end_j) back to the anchor."""
    ops: list[str] = []
    i, j = end_i, end_j
    d = i + j
    while i > 0 or j > 0:
        here = rec.get(d, i)
        if here <= NEG:
            raise AssertionError("traceback fell onto a pruned cell")
        if i > 0 and j > 0:
            sub = scoring.match if s[i - 1] == t[j - 1] else scoring.mismatch
            v = rec.get(d - 2, i - 1)
            if v > NEG and v + sub == here:
                ops.append("M" if sub == scoring.match else "X")
                i -= 1
                j -= 1
                d -= 2
                continue
        if i > 0:
            v = rec.get(d - 1, i - 1)
            if v > NEG and v + scoring.gap == here:
                ops.append("D")
                i -= 1
                d -= 1
                continue
        if j > 0:
            v = rec.get(d - 1, i)
            if v > NEG and v + scoring.gap == here:
                ops.append("I")
                j -= 1
                d -= 1
                continue
        raise AssertionError(f"no predecessor explains cell ({i}, {j})")
    ops.reverse()
    return "".join(ops)


def _extend_one_side(
    s: np.ndarray, t: np.ndarray, scoring: ScoringScheme, want_ops: bool
) -> tuple[int, int, int, str]:
    best, bi, bj, scores, wlos, offs, ndiag = _extend_kernel(
        s, t, scoring.match, scoring.mismatch, scoring.gap, scoring.xdrop
    )
    ops = ""
    if want_ops and (bi or bj):
        rec = _Recording(scores, wlos, offs, ndiag)
        ops = _traceback(rec, s, t, bi, bj, scoring)
    return int(best), int(bi), int(bj), ops


def xdrop_extend(
    s: str,
    t: str,
    pos_s: int,
    pos_t: int,
    k: int,
    scoring: ScoringScheme,
    transcript: bool = False,
) -> Alignment | None:
    """Extend the seed at (pos_s, pos_t) in both directions.

    Returns None when the k bases at the seed positions differ, which
    happens for seeds found through canonical k-mers that actually match
    on opposite strands; callers count and skip those.
    """
    if not 0 <= pos_s <= len(s) - k:
        raise ValueError(f"seed at {pos_s} does not fit read of length {len(s)}")
    if not 0 <= pos_t <= len(t) - k:
        raise ValueError(f"seed at {pos_t} does not fit read of length {len(t)}")
    if s[pos_s : pos_s + k] != t[pos_t : pos_t + k]:
        return None

    sb = _as_bytes(s)
    tb = _as_bytes(t)
    right_s = sb[pos_s + k :]
    right_t = tb[pos_t + k :]
    left_s = sb[:pos_s][::-1].copy()
    left_t = tb[:pos_t][::-1].copy()

    r_best, r_i, r_j, r_ops = _extend_one_side(right_s, right_t, scoring, transcript)
    l_best, l_i, l_j, l_ops = _extend_one_side(left_s, left_t, scoring, transcript)

    ops: str | None = None
    if transcript:
        ops = l_ops[::-1] + "M" * k + r_ops

    return Alignment(
        rid_a=-1,
        rid_b=-1,
        score=k * scoring.match + l_best + r_best,
        begin_a=pos_s - l_i,
        end_a=pos_s + k + r_i,
        begin_b=pos_t - l_j,
        end_b=pos_t + k + r_j,
        seed_a=pos_s,
        seed_b=pos_t,
        transcript=ops,
    )


def validate_alignment(
    aln: Alignment, s: str, t: str, scoring: ScoringScheme
) -> tuple[bool, str]:
    """Check an alignment against the two read strings.

    Verifies coordinate sanity and, when a transcript is present, that
    it consumes exactly the aligned substrings, labels every column
    consistently with the bases, and re-derives the reported score.
    Returns (ok, diagnosis); diagnosis is empty when ok.
    """
    if not (0 <= aln.begin_a <= aln.seed_a <= aln.end_a <= len(s)):
        return False, f"read a coordinates out of order: {aln}"
    if not (0 <= aln.begin_b <= aln.seed_b <= aln.end_b <= len(t)):
        return False, f"read b coordinates out of order: {aln}"
    if aln.transcript is None:
        return True, ""
    i, j = aln.begin_a, aln.begin_b
    score = 0
    for col, op in enumerate(aln.transcript):
        if op in "MX":
            if i >= aln.end_a or j >= aln.end_b:
                return False, f"column {col} runs past the aligned region"
            same = s[i] == t[j]
            if op == "M" and not same:
                return False, f"column {col} says match but {s[i]}!={t[j]}"
            if op == "X" and same:
                return False, f"column {col} says mismatch but bases agree"
            score += scoring.match if same else scoring.mismatch
            i += 1
            j += 1
        elif op == "D":
            score += scoring.gap
            i += 1
        elif op == "I":
            score += scoring.gap
            j += 1
        else:
            return False, f"unknown transcript op {op!r} at column {col}"
    if (i, j) != (aln.end_a, aln.end_b):
        return False, (
            f"transcript consumed up to ({i}, {j}), "
            f"expected ({aln.end_a}, {aln.end_b})"
        )
    if score != aln.score:
        return False, f"transcript score {score} != reported {aln.score}"
    return True, ""


# ---------------------------------------------------------------------
# stage 4: fetch read text, then align every task
# ---------------------------------------------------------------------


def run_fetch_stage(
    tasks: Sequence[OverlapTask],
    local_reads: Mapping[int, Read],
    partition: ReadPartition,
    world: RankWorld,
    bytes_per_round: int,
) -> tuple[dict[int, str], dict[str, int]]:
    """Collect the base strings of every read this rank's tasks mention.

    Two bounded exchanges: read ids travel to their owning ranks, then
    the owners answer with (rid, bases) records.  Local reads are served
    from memory without travelling.
    """
    needed: set[int] = set()
    for task in tasks:
        needed.add(task.rid_a)
        needed.add(task.rid_b)

    cache: dict[int, str] = {}
    remote: list[int] = []
    for rid in sorted(needed):
        read = local_reads.get(rid)
        if read is not None:
            cache[rid] = read.bases
        else:
            remote.append(rid)

    requests: list[list[int]] = [[] for _ in range(world.nranks)]

    def request_stream() -> Iterator[tuple[int, bytes]]:
        for rid in remote:
            yield partition.owner_of_read(rid), _RID.pack(rid)

    def take_request(src: int, item: bytes) -> None:
        (rid,) = _RID.unpack(item)
        requests[src].append(rid)

    rounds = staged_stream(world, request_stream(), bytes_per_round, take_request)

    def response_stream() -> Iterator[tuple[int, bytes]]:
        for src in range(world.nranks):
            for rid in requests[src]:
                read = local_reads.get(rid)
                if read is None:
                    raise KeyError(f"rank asked for rid {rid} this rank does not own")
                body = read.bases.encode("ascii")
                yield src, _RID.pack(rid) + body

    def take_response(_src: int, item: bytes) -> None:
        (rid,) = _RID.unpack(item[:8])
        cache[rid] = item[8:].decode("ascii")

    rounds += staged_stream(world, response_stream(), bytes_per_round, take_response)

    info = {
        "requested": len(remote),
        "served": sum(len(r) for r in requests),
        "rounds": rounds,
    }
    return cache, info


@dataclass
class AlignStats:
    tasks: int = 0
    seeds_tried: int = 0
    alignments: int = 0
    strand_skips: int = 0
    seconds: float = 0.0
    fetch_requested: int = 0
    fetch_served: int = 0
    fetch_rounds: int = 0
    count_imbalance: float = 1.0
    time_imbalance: float = 1.0


def run_alignment_stage(
    tasks: Sequence[OverlapTask],
    bases_by_rid: Mapping[int, str],
    k: int,
    scoring: ScoringScheme,
    world: RankWorld | None = None,
    transcripts: bool = False,
    best_per_pair: bool = False,
) -> tuple[list[Alignment], AlignStats]:
    """Align every seed of every task; embarrassingly parallel per rank.

    With best_per_pair, only the highest-scoring seed extension of each
    task is kept (earliest seed wins ties).  Output order follows task
    order, so results are deterministic for a given task list.
    """
    stats = AlignStats(tasks=len(tasks))
    out: list[Alignment] = []
    t0 = time.perf_counter()
    for task in tasks:
        sa = bases_by_rid[task.rid_a]
        sb = bases_by_rid[task.rid_b]
        kept: Alignment | None = None
        for seed_a, seed_b in task.seeds:
            stats.seeds_tried += 1
            aln = xdrop_extend(
                sa, sb, seed_a, seed_b, k, scoring, transcript=transcripts
            )
            if aln is None:
                stats.strand_skips += 1
                continue
            aln = replace(aln, rid_a=task.rid_a, rid_b=task.rid_b)
            if best_per_pair:
                if kept is None or aln.score > kept.score:
                    kept = aln
            else:
                out.append(aln)
        if best_per_pair and kept is not None:
            out.append(kept)
    stats.seconds = time.perf_counter() - t0
    stats.alignments = len(out)
    if world is not None:
        stats.count_imbalance = load_imbalance(gather_counts(world, stats.alignments))
        micros = gather_counts(world, int(stats.seconds * 1e6))
        stats.time_imbalance = load_imbalance(micros)
    return out, stats


def load_imbalance(values: Sequence[float]) -> float:
    """max/mean of per-rank loads; 1.0 is perfect, defined as 1.0 when idle."""
    if not values:
        return 1.0
    total = sum(values)
    if total == 0:
        logging.getLogger(__name__).warning(
            "load_imbalance of all-zero loads is undefined; reporting 1.0"
        )
        return 1.0
    return max(values) / (total / len(values))
