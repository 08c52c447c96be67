"""
Anatomy of one seed-and-extend alignment
========================================

Two reads share a 17-base seed; the aligner grows the match outward in
both directions, giving up in any direction where the score falls more
than X below the best seen so far.  This script builds such a pair by
hand so every number can be checked against what we planted.
"""

import numpy as np

from lroverlap import ScoringScheme, validate_alignment, xdrop_extend

rng = np.random.default_rng(7)
BASES = np.frombuffer(b"ACGT", dtype=np.uint8)


def random_seq(n):
    return BASES[rng.integers(0, 4, size=n)].tobytes().decode()


def corrupt(seq, rate):
    # substitutions only, to keep coordinates easy to reason about
    out = []
    for ch in seq:
        if rng.random() < rate:
            out.append("ACGT"[("ACGT".index(ch) + 1) % 4])
        else:
            out.append(ch)
    return "".join(out)


# Read a: 150 unrelated bases, then a 400-base region shared with read b.
# Read b: the same region with 8% of its bases substituted, except the
# 17-base window both reads keep intact, then 100 unrelated bases.  The
# final 120 bases of the shared region get 35% error instead, a rough
# patch the X sweep below will run into.
shared = random_seq(400)
seed_at = 200
a = random_seq(150) + shared
b = (corrupt(shared[:seed_at], 0.08)
     + shared[seed_at:seed_at + 17]
     + corrupt(shared[seed_at + 17:280], 0.08)
     + corrupt(shared[280:], 0.35)
     + random_seq(100))

scheme = ScoringScheme()  # match +1, mismatch -1, gap -1, X=7
aln = xdrop_extend(a, b, 150 + seed_at, seed_at, 17, scheme, transcript=True)

print(f"seed at a[{150 + seed_at}], b[{seed_at}]")
print(f"score {aln.score}")
print(f"read a aligned over [{aln.begin_a}, {aln.end_a})")
print(f"read b aligned over [{aln.begin_b}, {aln.end_b})")

# The planted overlap spans a[150:550] and b[0:400]; the extension
# should recover most of it, trimmed where trailing errors cost more
# than they pay.
print("planted region: a[150, 550) / b[0, 400)")

# The transcript spells the alignment column by column: M match,
# X substitution, D a-only base, I b-only base.
ops = aln.transcript
print(f"\ntranscript: {len(ops)} columns, "
      f"{ops.count('M')} M / {ops.count('X')} X / "
      f"{ops.count('D')} D / {ops.count('I')} I")

# validate_alignment replays the transcript against the raw reads and
# recomputes the score; the aligner's answer must survive that audit.
ok, why = validate_alignment(aln, a, b, scheme)
print(f"independent validation: {'ok' if ok else why}")

# A larger X tolerates deeper score dips before giving up, so the
# alignment can only get longer and score higher.  Small X bails at the
# first dip inside the rough patch; large X pays through it and reaches
# the end of the planted region.
print("\nX sweep on the same pair:")
for x in (2, 7, 20, 50):
    got = xdrop_extend(a, b, 150 + seed_at, seed_at, 17, ScoringScheme(xdrop=x))
    span = got.end_a - got.begin_a
    print(f"  X={x:>2}: score {got.score:>3}, a-span {span}")
