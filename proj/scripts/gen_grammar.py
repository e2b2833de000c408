#!/usr/bin/env python3
"""Generates the three-rule route grammar used by the planner tests.

Every target is R-C(=O)NH-CH2CH2-O-CH2-Ar and is exactly three steps from
purchasable material:

  amide coupling     R-C(=O)Cl + H2N-linker-Ar
  Boc deprotection   Boc-NH-linker-Ar
  O-alkylation       Ar-CH2Br + Boc-NH-CH2CH2-OH

data/grammar_corpus.csv  the 60 mapped steps (3 per target)
data/grammar_targets.smi the 20 targets
data/grammar_blocks.smi  acyl chlorides, benzyl bromides, Boc-aminoethanol"""

import itertools
import re
import sys

from gen_reactions import mapify

ACYL = ["C", "CC", "C1CC1", "CC(C)C"]
ARYL = ["c1ccccc1", "c1ccc(F)cc1", "c1ccc(C)cc1", "c1ccc(OC)cc1", "c1ccncc1"]

BOC = "[C:10](=[O:11])[O:12][C:13]([CH3:14])([CH3:15])[CH3:16]"
LINKER = "[CH2:5][CH2:6][O:7][CH2:8]{R}"
RULES = [
    (2, "[C:1]({A})(=[O:2])[Cl:3].[NH2:4]" + LINKER, "[C:1]({A})(=[O:2])[NH:4]" + LINKER),
    (6, "[NH:4](" + LINKER + ")" + BOC, "[NH2:4]" + LINKER),
    (1, "[CH2:8]({R})[Br:9].[OH:7][CH2:6][CH2:5][NH:4]" + BOC,
     "[CH2:8]({R})[O:7][CH2:6][CH2:5][NH:4]" + BOC),
]
START = 40


def unmapped(smiles):
    # Every atom here is neutral at default valence, so brackets can go.
    return re.sub(r"\[([A-Z][a-z]?|[a-z])(?:H\d?)?:\d+\]", r"\1", smiles)


def main():
    outdir = sys.argv[1] if len(sys.argv) > 1 else "data"
    rows, targets, blocks = [], [], set()
    for a, r in itertools.product(ACYL, ARYL):
        acyl, n = mapify(a, START)
        aryl, _ = mapify(r, n)
        for cls, lhs, rhs in RULES:
            left = lhs.replace("{A}", acyl).replace("{R}", aryl)
            right = rhs.replace("{A}", acyl).replace("{R}", aryl)
            rows.append((cls, left + ">>" + right))
        targets.append(unmapped(rows[-3][1].split(">>")[1]))
        blocks.add(unmapped(rows[-3][1].split(">>")[0].split(".")[0]))
        for part in rows[-1][1].split(">>")[0].split("."):
            blocks.add(unmapped(part))
    with open(outdir + "/grammar_corpus.csv", "w") as f:
        f.write("id,class,reaction\n")
        for i, (cls, rxn) in enumerate(rows):
            f.write("gram-%02d,%d,%s\n" % (i + 1, cls, rxn))
    with open(outdir + "/grammar_targets.smi", "w") as f:
        f.write("".join(t + "\n" for t in targets))
    with open(outdir + "/grammar_blocks.smi", "w") as f:
        f.write("# purchasable inputs of the route grammar\n")
        f.write("".join(b + "\n" for b in sorted(blocks)))


if __name__ == "__main__":
    main()
