"""
Running ranks as separate processes over sockets
================================================

The thread-backed ranks of the other demos are convenient, but the same
pipeline also runs as genuinely separate processes connected by TCP,
which is how it spreads across machines.  Each process gets the same
command line plus its own --rank; a hostfile tells everyone where to
listen.  This script stages such a run on localhost and shows the
per-process outputs agree with a single-rank run.
"""

import socket
import subprocess
import sys
import tempfile
from pathlib import Path

from lroverlap import simulate_reads
from lroverlap.seqio import write_fastq

workdir = Path(tempfile.mkdtemp(prefix="socket_demo_"))
fastq = workdir / "reads.fastq"
write_fastq(simulate_reads(8_000, 8, 500, error_rate=0.08, seed=3).reads, fastq)

# One line per rank, host:port.  On a real cluster these would be
# different machines; here every rank listens on localhost.
nranks = 3
ports = []
for _ in range(nranks):
    with socket.socket() as probe:  # let the OS pick free ports
        probe.bind(("127.0.0.1", 0))
        ports.append(probe.getsockname()[1])
hostfile = workdir / "hosts.txt"
hostfile.write_text("".join(f"127.0.0.1:{p}\n" for p in ports))
print(f"hostfile:\n{hostfile.read_text()}")

common = [
    sys.executable, "-m", "lroverlap", "run",
    "--input", str(fastq),
    "-k", "17", "--max-kmer-freq", "8", "--min-seed-distance", "500",
]

# Launch one process per rank.  They find each other through the
# hostfile, run the four stages in lockstep, and each writes its own
# .rankN output files.
procs = [
    subprocess.Popen(common + [
        "--backend", "socket", "--hostfile", str(hostfile),
        "--ranks", str(nranks), "--rank", str(rank),
        "--out-alignments", str(workdir / "socket.aln"),
    ])
    for rank in range(nranks)
]
for proc in procs:
    assert proc.wait(timeout=120) == 0, "a rank failed"

# A single in-process rank over the same input is the reference.
subprocess.run(common + [
    "--out-alignments", str(workdir / "serial.aln"),
], check=True)

merged = []
for rank in range(nranks):
    merged.extend((workdir / f"socket.aln.rank{rank}").read_text().splitlines())
serial = (workdir / "serial.aln").read_text().splitlines()
print(f"{len(merged)} alignments from {nranks} socket ranks, "
      f"{len(serial)} from one rank")
print(f"identical after sorting: {sorted(merged) == sorted(serial)}")
