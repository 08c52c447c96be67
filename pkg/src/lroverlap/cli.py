"""Command line front end: `run` for the pipeline, `simulate` for test data."""

from __future__ import annotations

import argparse
import sys
from typing import Sequence

from . import pipeline, simulate
from .seqio import write_fastq


def _add_run(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("run", help="overlap and align a set of long reads")
    p.add_argument("--input", action="append", required=True, metavar="FASTQ",
                   help="input reads; repeat for multiple files")
    p.add_argument("-k", type=int, default=17, help="k-mer length (default 17)")
    p.add_argument("--max-kmer-freq", type=int, required=True, metavar="M",
                   help="drop k-mers seen more than M times")
    p.add_argument("--min-seed-distance", type=int, default=1000,
                   help="minimum spacing between seeds of one pair (default 1000)")
    p.add_argument("--max-seeds", type=int, default=None,
                   help="cap on seeds per pair after spacing (default unlimited)")
    p.add_argument("--canonical", action="store_true",
                   help="unify a k-mer with its reverse complement")
    p.add_argument("--match", type=int, default=1)
    p.add_argument("--mismatch", type=int, default=-1)
    p.add_argument("--gap", type=int, default=-1)
    p.add_argument("--xdrop", type=int, default=7)
    p.add_argument("--ranks", type=int, default=1, help="number of ranks")
    p.add_argument("--backend", choices=("inproc", "socket"), default="inproc")
    p.add_argument("--rank", type=int, default=None,
                   help="this process's rank (socket backend only)")
    p.add_argument("--hostfile", default=None,
                   help="host:port per line, one per rank (socket backend)")
    p.add_argument("--round-cap", type=int, default=pipeline.DEFAULT_ROUND_BYTES,
                   metavar="BYTES",
                   help="outgoing bytes a rank may stage per exchange round")
    p.add_argument("--bloom-fp", type=float, default=0.05,
                   help="membership filter false positive target (default 0.05)")
    p.add_argument("--best-per-pair", action="store_true",
                   help="keep only the best-scoring alignment of each pair")
    p.add_argument("--seed", type=int, default=0, help="seed echoed into metrics")
    p.add_argument("--out-overlaps", default=None, metavar="PATH")
    p.add_argument("--out-alignments", default=None, metavar="PATH")
    p.add_argument("--out-metrics", default=None, metavar="PATH")
    p.add_argument("--histogram", default=None, metavar="PATH",
                   help="write the retained k-mer frequency histogram here")


def _add_simulate(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("simulate", help="write a synthetic dataset with truth")
    p.add_argument("--genome-len", type=int, required=True)
    p.add_argument("--depth", type=float, required=True)
    p.add_argument("--read-len", type=int, required=True)
    p.add_argument("--error-rate", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, metavar="FASTQ")
    p.add_argument("--truth", default=None, metavar="TSV",
                   help="write true overlapping pairs here")
    p.add_argument("--min-overlap", type=int, default=500,
                   help="overlap length for a pair to count as true (default 500)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lroverlap",
        description="long-read overlap detection and alignment",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run(sub)
    _add_simulate(sub)
    return parser


def _cmd_run(args: argparse.Namespace) -> int:
    config = pipeline.PipelineConfig(
        inputs=args.input,
        k=args.k,
        max_kmer_freq=args.max_kmer_freq,
        min_seed_distance=args.min_seed_distance,
        max_seeds=args.max_seeds,
        canonical=args.canonical,
        match=args.match,
        mismatch=args.mismatch,
        gap=args.gap,
        xdrop=args.xdrop,
        ranks=args.ranks,
        backend=args.backend,
        hostfile=args.hostfile,
        round_bytes=args.round_cap,
        bloom_fp=args.bloom_fp,
        best_per_pair=args.best_per_pair,
        seed=args.seed,
        out_overlaps=args.out_overlaps,
        out_alignments=args.out_alignments,
        out_metrics=args.out_metrics,
        histogram=args.histogram,
    )
    if args.backend == "socket":
        if args.rank is None:
            print("error: socket backend needs --rank", file=sys.stderr)
            return 2
        result = pipeline.run_socket_rank(config, args.rank)
        print(f"rank {result.rank}: {len(result.tasks)} pairs, "
              f"{len(result.alignments)} alignments")
        return 0
    results = pipeline.run_pipeline(config)
    pairs = sum(len(r.tasks) for r in results)
    alns = sum(len(r.alignments) for r in results)
    print(f"{len(results)} ranks: {pairs} pairs, {alns} alignments")
    return 0


def _cmd_simulate(args: argparse.Namespace) -> int:
    dataset = simulate.simulate_reads(
        genome_length=args.genome_len,
        depth=args.depth,
        read_length=args.read_len,
        error_rate=args.error_rate,
        seed=args.seed,
    )
    write_fastq(dataset.reads, args.out)
    if args.truth:
        simulate.write_truth(dataset, args.min_overlap, args.truth)
    print(f"wrote {len(dataset.reads)} reads to {args.out}")
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "simulate":
            return _cmd_simulate(args)
    except (pipeline.ConfigError, ValueError, OSError) as exc:
        print(f"lroverlap: error: {exc}", file=sys.stderr)
        return 2
    raise AssertionError(f"unhandled command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
