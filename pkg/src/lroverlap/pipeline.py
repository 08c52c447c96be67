"""End-to-end driver: four exchange-coupled stages per rank.

Per rank the flow is: parse and claim a read range, stream k-mers
through the membership filter, replay them into the exact table,
scatter pair tasks to their aligning ranks, fetch the read text those
tasks need, and align.  All inter-rank movement goes through the one
exchange layer, so the same driver runs single-process (ranks as
threads) or multi-process (ranks over sockets) and produces identical
output either way.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, IO, Sequence

from . import align, bloom, exchange, kmers, overlap, seqio, table

DEFAULT_ROUND_BYTES = 64 * 1024 * 1024


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    """Everything a run needs; validated up front so ranks cannot diverge."""

    inputs: Sequence[str] = ()
    k: int = 17
    max_kmer_freq: int = 8
    min_seed_distance: int = 1000
    max_seeds: int | None = None
    canonical: bool = False
    match: int = 1
    mismatch: int = -1
    gap: int = -1
    xdrop: int = 7
    ranks: int = 1
    backend: str = "inproc"
    hostfile: str | None = None
    round_bytes: int = DEFAULT_ROUND_BYTES
    bloom_fp: float = 0.05
    distinct_fraction: float = 0.9
    genome_size: int | None = None
    best_per_pair: bool = False
    transcripts: bool = False
    seed: int = 0
    out_overlaps: str | None = None
    out_alignments: str | None = None
    out_metrics: str | None = None
    histogram: str | None = None

    def validated(self) -> "PipelineConfig":
        try:
            self.kmer_params()
            align.ScoringScheme(self.match, self.mismatch, self.gap, self.xdrop)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.ranks < 1:
            raise ConfigError("ranks must be >= 1")
        if self.backend not in ("inproc", "socket"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.backend == "socket" and not self.hostfile:
            raise ConfigError("socket backend needs a hostfile")
        if self.round_bytes < 1024:
            raise ConfigError("round_bytes must be at least 1024")
        if not 0 < self.bloom_fp < 1:
            raise ConfigError("bloom_fp must be in (0, 1)")
        if self.min_seed_distance < 0:
            raise ConfigError("min_seed_distance must be >= 0")
        if self.max_seeds is not None and self.max_seeds < 1:
            raise ConfigError("max_seeds must be >= 1 when set")
        return self

    def kmer_params(self) -> kmers.KmerParams:
        return kmers.KmerParams(
            k=self.k, max_count=self.max_kmer_freq, canonical=self.canonical
        )

    def scoring(self) -> align.ScoringScheme:
        return align.ScoringScheme(self.match, self.mismatch, self.gap, self.xdrop)

    def echo(self) -> dict[str, object]:
        keys = (
            "k", "max_kmer_freq", "min_seed_distance", "max_seeds", "canonical",
            "match", "mismatch", "gap", "xdrop", "ranks", "backend",
            "round_bytes", "bloom_fp", "distinct_fraction", "best_per_pair",
            "seed",
        )
        return {f"config.{key}": getattr(self, key) for key in keys}


@dataclass
class RankResult:
    """What one rank produced, plus its metrics rows."""

    rank: int
    tasks: list[overlap.OverlapTask]
    alignments: list[align.Alignment]
    metrics: dict[str, object] = field(default_factory=dict)


def _suffix(path: str, rank: int, nranks: int) -> str:
    return path if nranks == 1 else f"{path}.rank{rank}"


def write_overlaps(tasks: Sequence[overlap.OverlapTask], fh: IO[str]) -> None:
    """One line per pair: rid_a, rid_b, seed count, then pos_a:pos_b seeds."""
    for t in tasks:
        seeds = " ".join(f"{a}:{b}" for a, b in t.seeds)
        fh.write(f"{t.rid_a}\t{t.rid_b}\t{len(t.seeds)}\t{seeds}\n")


def write_alignments(
    alignments: Sequence[align.Alignment], lengths: dict[int, int], fh: IO[str]
) -> None:
    """One line per alignment: pair, score, aligned spans, lengths, seed."""
    for a in alignments:
        fh.write(
            f"{a.rid_a}\t{a.rid_b}\t{a.score}"
            f"\t{a.begin_a}\t{a.end_a}\t{a.begin_b}\t{a.end_b}"
            f"\t{lengths[a.rid_a]}\t{lengths[a.rid_b]}"
            f"\t{a.seed_a}\t{a.seed_b}\n"
        )


def write_metrics(metrics: dict[str, object], fh: IO[str]) -> None:
    for key, value in metrics.items():
        fh.write(f"{key}\t{value}\n")


def write_histogram(counts: dict[int, int], fh: IO[str]) -> None:
    for freq in sorted(counts):
        fh.write(f"{freq}\t{counts[freq]}\n")


def rank_main(
    world: exchange.RankWorld,
    config: PipelineConfig,
    all_reads: Sequence[seqio.Read] | None = None,
) -> RankResult:
    """Run the four stages as one rank of `world`.

    Every rank parses the inputs (or takes the preparsed list) and
    claims the contiguous slice a shared partition assigns it, so no
    coordination is needed to agree on read ownership.
    """
    cfg = config.validated()
    params = cfg.kmer_params()
    metrics: dict[str, object] = dict(cfg.echo())
    metrics["config.rank"] = world.rank

    t0 = time.perf_counter()
    if all_reads is None:
        all_reads = seqio.read_fastq_paths(list(cfg.inputs))
    partition = seqio.partition_reads(all_reads, world.nranks)
    mine = all_reads[partition.slice_of(world.rank)]
    local_by_rid = {r.rid: r for r in mine}
    metrics["input.reads"] = len(all_reads)
    metrics["input.local_reads"] = len(mine)
    metrics["input.local_bases"] = sum(len(r) for r in mine)

    model = kmers.DatasetModel.from_reads(
        [len(r) for r in all_reads], genome_size=cfg.genome_size
    )
    expected = kmers.estimate_distinct_kmers(model, cfg.k, cfg.distinct_fraction)
    metrics["input.expected_distinct_kmers"] = expected
    t_parse = time.perf_counter() - t0

    t0 = time.perf_counter()
    candidates, bstats = bloom.run_bloom_stage(
        mine, params, world, cfg.round_bytes, expected, cfg.bloom_fp
    )
    t_bloom = time.perf_counter() - t0
    metrics["bloom.bits"] = bstats.nbits
    metrics["bloom.hashes"] = bstats.nhashes
    metrics["bloom.instances_sent"] = bstats.instances_in
    metrics["bloom.instances_owned"] = bstats.instances_owned
    metrics["bloom.first_occurrences"] = bstats.first_occurrences
    metrics["bloom.candidates"] = bstats.candidates
    metrics["bloom.occupancy"] = round(bstats.occupancy, 6)
    metrics["bloom.fp_rate"] = round(bstats.fp_rate, 6)
    metrics["bloom.rounds"] = bstats.rounds

    t0 = time.perf_counter()
    kmer_table, tstats = table.run_table_stage(
        mine, candidates, params, world, cfg.round_bytes
    )
    t_table = time.perf_counter() - t0
    metrics["table.retained"] = tstats.retained
    metrics["table.dropped_rare"] = tstats.dropped_rare
    metrics["table.dropped_frequent"] = tstats.dropped_frequent
    metrics["table.instances_owned"] = tstats.instances_owned
    metrics["table.rounds"] = tstats.rounds

    # reliable-fraction bookkeeping: retained k-mers over the instance
    # stream and over the (filter-estimated) distinct population
    instances_global = exchange.allreduce_sum(world, tstats.instances_owned)
    retained_global = exchange.allreduce_sum(world, tstats.retained)
    distinct_global = exchange.allreduce_sum(world, bstats.first_occurrences)
    metrics["table.instances_global"] = instances_global
    metrics["table.retained_global"] = retained_global
    metrics["table.distinct_estimate_global"] = distinct_global
    metrics["table.iota_input"] = (
        round(retained_global / instances_global, 6) if instances_global else 0.0
    )
    metrics["table.iota_set"] = (
        round(retained_global / distinct_global, 6) if distinct_global else 0.0
    )

    histogram: dict[int, int] | None = None
    if cfg.histogram is not None:
        histogram = {}
        for entry in kmer_table.entries.values():
            histogram[entry.count] = histogram.get(entry.count, 0) + 1

    t0 = time.perf_counter()
    tasks, ostats = overlap.run_overlap_stage(
        kmer_table,
        partition,
        world,
        cfg.round_bytes,
        min_seed_distance=cfg.min_seed_distance,
        max_seeds=cfg.max_seeds,
    )
    t_overlap = time.perf_counter() - t0
    metrics["overlap.raw_tasks"] = ostats.raw_tasks
    metrics["overlap.self_pairs_dropped"] = ostats.self_pairs_dropped
    metrics["overlap.tasks"] = ostats.tasks
    metrics["overlap.seeds_before_filter"] = ostats.seeds_before_filter
    metrics["overlap.seeds_after_filter"] = ostats.seeds_after_filter
    metrics["overlap.rounds"] = ostats.rounds
    metrics["overlap.raw_tasks_global"] = ostats.global_raw_tasks
    metrics["overlap.tasks_global"] = ostats.global_tasks
    metrics["overlap.bound_lower"] = ostats.global_bounds.lower
    metrics["overlap.bound_exact"] = ostats.global_bounds.exact
    metrics["overlap.bound_upper"] = ostats.global_bounds.upper
    metrics["overlap.task_imbalance"] = round(ostats.task_imbalance, 4)

    t0 = time.perf_counter()
    bases_by_rid, fetch_info = align.run_fetch_stage(
        tasks, local_by_rid, partition, world, cfg.round_bytes
    )
    alignments, astats = align.run_alignment_stage(
        tasks,
        bases_by_rid,
        cfg.k,
        cfg.scoring(),
        world=world,
        transcripts=cfg.transcripts,
        best_per_pair=cfg.best_per_pair,
    )
    t_align = time.perf_counter() - t0
    metrics["align.fetch_requested"] = fetch_info["requested"]
    metrics["align.fetch_served"] = fetch_info["served"]
    metrics["align.fetch_rounds"] = fetch_info["rounds"]
    metrics["align.seeds_tried"] = astats.seeds_tried
    metrics["align.alignments"] = astats.alignments
    metrics["align.strand_skips"] = astats.strand_skips
    metrics["align.count_imbalance"] = round(astats.count_imbalance, 4)
    metrics["align.load_imbalance"] = round(astats.time_imbalance, 4)

    metrics["exchange.bytes_sent"] = world.bytes_sent
    metrics["exchange.bytes_received"] = world.bytes_received
    metrics["exchange.collectives"] = world.collectives
    metrics["exchange.peak_round_sent"] = world.peak_round_sent
    metrics["exchange.peak_round_received"] = world.peak_round_received

    # times unrounded so rate keys stay an exact items/time identity for
    # anyone re-deriving them from this report
    metrics["time.parse"] = t_parse
    metrics["time.bloom"] = t_bloom
    metrics["time.table"] = t_table
    metrics["time.overlap"] = t_overlap
    metrics["time.align"] = t_align
    metrics["bloom.kmers_per_sec"] = (
        bstats.instances_owned / t_bloom if t_bloom > 0 else 0.0
    )
    metrics["table.kmers_per_sec"] = (
        tstats.instances_owned / t_table if t_table > 0 else 0.0
    )
    metrics["overlap.pairs_per_sec"] = (
        ostats.raw_tasks / t_overlap if t_overlap > 0 else 0.0
    )
    metrics["align.alignments_per_sec"] = (
        astats.alignments / t_align if t_align > 0 else 0.0
    )

    lengths = {rid: len(bases) for rid, bases in bases_by_rid.items()}
    if cfg.out_overlaps:
        with open(_suffix(cfg.out_overlaps, world.rank, world.nranks), "w") as fh:
            write_overlaps(tasks, fh)
    if cfg.out_alignments:
        with open(_suffix(cfg.out_alignments, world.rank, world.nranks), "w") as fh:
            write_alignments(alignments, lengths, fh)
    if cfg.out_metrics:
        with open(_suffix(cfg.out_metrics, world.rank, world.nranks), "w") as fh:
            write_metrics(metrics, fh)
    if cfg.histogram is not None and histogram is not None:
        with open(_suffix(cfg.histogram, world.rank, world.nranks), "w") as fh:
            write_histogram(histogram, fh)

    return RankResult(
        rank=world.rank, tasks=tasks, alignments=alignments, metrics=metrics
    )


def run_pipeline(
    config: PipelineConfig,
    all_reads: Sequence[seqio.Read] | None = None,
) -> list[RankResult]:
    """Run all ranks in this process over the thread-backed exchange."""
    cfg = config.validated()
    if cfg.backend != "inproc":
        raise ConfigError("run_pipeline drives the in-process backend; "
                          "use run_socket_rank for sockets")
    return exchange.run_spmd(
        cfg.ranks, lambda world: rank_main(world, cfg, all_reads)
    )


def run_socket_rank(config: PipelineConfig, rank: int) -> RankResult:
    """Run one rank of a socket-backed world; call once per process."""
    cfg = config.validated()
    hosts = exchange.load_hostfile(cfg.hostfile)
    if len(hosts) != cfg.ranks:
        raise ConfigError(
            f"hostfile lists {len(hosts)} ranks but config says {cfg.ranks}"
        )
    world = exchange.SocketWorld(rank, hosts)
    try:
        return rank_main(world, cfg)
    finally:
        world.close()


def merged_tasks(results: Sequence[RankResult]) -> list[overlap.OverlapTask]:
    out: list[overlap.OverlapTask] = []
    for res in results:
        out.extend(res.tasks)
    return sorted(out, key=lambda t: (t.rid_a, t.rid_b))


def merged_alignments(results: Sequence[RankResult]) -> list[align.Alignment]:
    out: list[align.Alignment] = []
    for res in results:
        out.extend(res.alignments)
    return sorted(out, key=lambda a: (a.rid_a, a.rid_b, a.seed_a, a.seed_b))
