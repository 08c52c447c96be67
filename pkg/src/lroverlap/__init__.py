"""Distributed-memory long-read overlap detection and alignment.

The package finds all read pairs that share repeated k-mers and aligns
each pair around its shared seeds, scaling over P ranks that talk only
through a bulk-synchronous all-to-all exchange.  See `pipeline` for the
whole flow, `exchange` for the transport backends, and the per-stage
modules (`bloom`, `table`, `overlap`, `align`) for the moving parts.
"""

from .align import Alignment, ScoringScheme, validate_alignment, xdrop_extend
from .kmers import Kmer, KmerParams
from .overlap import OverlapTask
from .pipeline import PipelineConfig, run_pipeline
from .seqio import Read, parse_fastq, partition_reads
from .simulate import simulate_reads

__version__ = "0.1.0"

__all__ = [
    "Alignment",
    "Kmer",
    "KmerParams",
    "OverlapTask",
    "PipelineConfig",
    "Read",
    "ScoringScheme",
    "__version__",
    "parse_fastq",
    "partition_reads",
    "run_pipeline",
    "simulate_reads",
    "validate_alignment",
    "xdrop_extend",
]
