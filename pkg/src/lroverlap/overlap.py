"""Turning shared k-mers into per-read-pair overlap candidates.

Each retained k-mer with occurrence count f contributes f*(f-1)/2 read
pairs, one per unordered pair of its locations.  Those raw tasks are
scattered to the rank that will align the pair, picked by a cheap
parity rule on the two read ids that splits each read's pair load
between the owners of both ends instead of piling it onto one rank.
The receiving rank merges duplicate pairs (reads sharing many k-mers
arrive once per k-mer), canonicalizes orientation so the smaller rid
is always first, and thins the merged seed list so downstream
alignment starts from a bounded, well-spaced set of anchors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

from .exchange import RankWorld, allreduce_max, allreduce_sum, staged_stream
from .seqio import ReadPartition
from .table import TablePartition

_REC = struct.Struct("<QQII")  # rid_a, rid_b, pos_a, pos_b


@dataclass(frozen=True)
class OverlapTask:
    """A read pair plus the k-mer seed offsets shared between the two.

    rid_a < rid_b always holds; each seed is (offset in read a, offset
    in read b), sorted ascending.
    """

    rid_a: int
    rid_b: int
    seeds: tuple[tuple[int, int], ...]


@dataclass
class OverlapBounds:
    """Raw pair-task count bracketed from the retained table alone.

    Every retained k-mer (count in [2, m]) yields at least 1 and at most
    m*(m-1)/2 raw pairs, so lower = retained and upper = retained *
    m*(m-1)/2; exact is the actual sum of f*(f-1)/2.
    """

    lower: int
    exact: int
    upper: int


def pair_count(f: int) -> int:
    return f * (f - 1) // 2


def compute_bounds(counts: Iterable[int], max_count: int) -> OverlapBounds:
    lower = 0
    exact = 0
    for f in counts:
        lower += 1
        exact += pair_count(f)
    return OverlapBounds(lower=lower, exact=exact, upper=lower * pair_count(max_count))


def enumerate_pairs(
    entries: Mapping[int, "object"],
) -> Iterator[tuple[int, int, int, int]]:
    """All location pairs of every table entry, self-pairs included.

    Yields (rid_a, pos_a, rid_b, pos_b) in location-list order, exactly
    f*(f-1)/2 tuples for an entry with f locations.  Pairs whose two
    locations fall in the same read come out too; the stage drops them.
    """
    for entry in entries.values():
        locs = entry.locations
        f = len(locs)
        for i in range(f - 1):
            rid_a, pos_a = locs[i]
            for j in range(i + 1, f):
                rid_b, pos_b = locs[j]
                yield rid_a, pos_a, rid_b, pos_b


def assign_owner(rid_a: int, rid_b: int) -> int:
    """Pick which read's owner rank aligns the pair.

    Parity rule: an even rid_a claims pairs with much-smaller partners,
    an odd rid_a claims pairs with larger partners, everything else goes
    to rid_b's owner.  Deterministic, needs no coordination, and spreads
    each read's pair workload over both sides of its pairings.
    """
    if rid_a % 2 == 0 and rid_a > rid_b + 1:
        return rid_a
    if rid_a % 2 == 1 and rid_a < rid_b + 1:
        return rid_a
    return rid_b


def consolidate(
    raw: Iterable[tuple[int, int, int, int]],
) -> list[OverlapTask]:
    """Merge raw pair tasks into one task per unordered read pair.

    Orientation is canonicalized to rid_a < rid_b with seed offsets
    swapped to match; duplicate seeds collapse; seeds sort ascending.
    Output is sorted by (rid_a, rid_b) so the result is reproducible
    whatever order the raw tasks arrived in.
    """
    merged: dict[tuple[int, int], set[tuple[int, int]]] = {}
    for rid_a, pos_a, rid_b, pos_b in raw:
        if rid_a == rid_b:
            raise ValueError(f"self-pair for rid {rid_a} reached consolidation")
        if rid_a < rid_b:
            key, seed = (rid_a, rid_b), (pos_a, pos_b)
        else:
            key, seed = (rid_b, rid_a), (pos_b, pos_a)
        merged.setdefault(key, set()).add(seed)
    return [
        OverlapTask(rid_a=a, rid_b=b, seeds=tuple(sorted(merged[a, b])))
        for a, b in sorted(merged)
    ]


def filter_seeds(
    seeds: Sequence[tuple[int, int]],
    min_distance: int,
    max_seeds: int | None,
) -> tuple[tuple[int, int], ...]:
    """Thin sorted seeds: enforce spacing along read a, then cap the count.

    Greedy left-to-right: the first seed always survives, each later
    seed survives only if its read-a offset is at least min_distance
    past the last survivor.  min_distance 0 keeps everything;
    max_seeds None means unlimited.
    """
    if min_distance < 0:
        raise ValueError("min_distance must be >= 0")
    if max_seeds is not None and max_seeds < 1:
        raise ValueError("max_seeds must be >= 1")
    kept: list[tuple[int, int]] = []
    last = None
    for seed in seeds:
        if last is None or seed[0] - last >= min_distance:
            kept.append(seed)
            last = seed[0]
            if max_seeds is not None and len(kept) == max_seeds:
                break
    return tuple(kept)


@dataclass
class OverlapStats:
    raw_tasks: int = 0
    self_pairs_dropped: int = 0
    tasks: int = 0
    seeds_before_filter: int = 0
    seeds_after_filter: int = 0
    bounds: OverlapBounds = field(
        default_factory=lambda: OverlapBounds(0, 0, 0)
    )
    rounds: int = 0
    global_raw_tasks: int = 0
    global_tasks: int = 0
    global_bounds: OverlapBounds = field(
        default_factory=lambda: OverlapBounds(0, 0, 0)
    )
    task_imbalance: float = 1.0


def run_overlap_stage(
    table: TablePartition,
    partition: ReadPartition,
    world: RankWorld,
    bytes_per_round: int,
    min_seed_distance: int = 0,
    max_seeds: int | None = None,
) -> tuple[list[OverlapTask], OverlapStats]:
    """Scatter raw pair tasks to their aligning ranks and merge there."""
    if not table.finalized:
        raise RuntimeError("overlap stage needs a finalized table")
    stats = OverlapStats()
    stats.bounds = compute_bounds(
        (e.count for e in table.entries.values()), table.max_count
    )

    def stream() -> Iterator[tuple[int, bytes]]:
        for rid_a, pos_a, rid_b, pos_b in enumerate_pairs(table.entries):
            stats.raw_tasks += 1
            if rid_a == rid_b:
                stats.self_pairs_dropped += 1
                continue
            if rid_a > rid_b:
                # the owner rule is asymmetric, so both orientations of a
                # pair must collapse to one before it picks a rank; without
                # this a pair's seeds could land on two ranks
                rid_a, pos_a, rid_b, pos_b = rid_b, pos_b, rid_a, pos_a
            owner_rid = assign_owner(rid_a, rid_b)
            dst = partition.owner_of_read(owner_rid)
            yield dst, _REC.pack(rid_a, rid_b, pos_a, pos_b)

    raw_received: list[tuple[int, int, int, int]] = []

    def deliver(_src: int, item: bytes) -> None:
        rid_a, rid_b, pos_a, pos_b = _REC.unpack(item)
        raw_received.append((rid_a, pos_a, rid_b, pos_b))

    stats.rounds = staged_stream(world, stream(), bytes_per_round, deliver)

    tasks = consolidate(raw_received)
    stats.seeds_before_filter = sum(len(t.seeds) for t in tasks)
    if min_seed_distance > 0 or max_seeds is not None:
        tasks = [
            OverlapTask(
                t.rid_a,
                t.rid_b,
                filter_seeds(t.seeds, min_seed_distance, max_seeds),
            )
            for t in tasks
        ]
    stats.tasks = len(tasks)
    stats.seeds_after_filter = sum(len(t.seeds) for t in tasks)

    stats.global_raw_tasks = allreduce_sum(world, stats.raw_tasks)
    stats.global_tasks = allreduce_sum(world, stats.tasks)
    stats.global_bounds = OverlapBounds(
        lower=allreduce_sum(world, stats.bounds.lower),
        exact=allreduce_sum(world, stats.bounds.exact),
        upper=allreduce_sum(world, stats.bounds.upper),
    )
    peak = allreduce_max(world, stats.tasks)
    mean = stats.global_tasks / world.nranks
    stats.task_imbalance = (peak / mean) if mean > 0 else 1.0
    return tasks, stats
