"""
k-mers as integers: packing, ordering, ownership
================================================

Everything downstream of the parser works on k-mers packed two bits per
base into one integer.  This walk-through shows the encoding, why its
ordering is useful, and how a k-mer picks the rank that owns it.
"""

import numpy as np

from lroverlap import Kmer, KmerParams
from lroverlap.kmers import extract_kmers, owner_of_codes, pack

# Packing: A=00, C=01, G=10, T=11, first base in the highest bits.
kmer = pack("ACGT")
print(f"ACGT packs to {kmer.code} = {kmer.code:08b}")
print(f"unpacking gives back {kmer.bases!r}")

# The encoding preserves lexicographic order, so sorting packed codes
# sorts the underlying strings for free.
words = ["TTG", "ACG", "GCA", "AAA"]
codes = sorted(pack(w).code for w in words)
print(f"\nsorted as integers: {[Kmer(code=c, k=3).bases for c in codes]}")
print(f"sorted as strings:  {sorted(words)}")

# Reverse complement and the canonical form (the smaller of a k-mer and
# its reverse complement), which folds the two strands together when
# the input contains reads from both.
fwd = pack("AACGT")
print(f"\n{fwd.bases} reverse-complements to {fwd.reverse_complement().bases}")
print(f"canonical form: {fwd.canonical().bases}")

# Extraction walks a read and yields every window; anything containing
# an ambiguous base is skipped rather than guessed at.
params = KmerParams(k=5, max_count=8)
read = "ACGTGNACGTG"
found = [(k.bases, pos) for k, pos in extract_kmers(read, params)]
print(f"\nwindows of {read!r}: {found}")

# Ownership: a k-mer's hash picks the one rank that counts it, so every
# occurrence of the same k-mer meets at the same place.  The split is
# even enough that no rank gets swamped.
rng = np.random.default_rng(0)
sample = rng.integers(0, 4**15, size=100_000, dtype=np.uint64)
owners = owner_of_codes(sample, nranks=8)
share = np.bincount(owners, minlength=8) / sample.size
print(f"\nper-rank share of 100k random k-mers: {np.round(share, 4)}")
