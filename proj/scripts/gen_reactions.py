#!/usr/bin/env python3
"""Generates the bundled atom-mapped reaction sets from reaction templates.

data/mini_corpus.csv   40 reactions over 8 reaction classes
data/perturbation.csv  10 held-out reactions (same templates, unseen substituents)
data/building_blocks.smi  purchasable reactants for the planner demo

Template cores are written with explicit maps; substituents are plain SMILES
whose atoms are mapped here, identically on both sides of the arrow."""

import random
import re
import sys

VALENCE = {"C": 4, "N": 3, "O": 2, "S": 2, "F": 1, "Cl": 1, "Br": 1, "I": 1}
AROMATIC_H = {"c": 1, "n": 0, "o": 0, "s": 0}
TOKEN = re.compile(r"Cl|Br|[CNOSFIcnos]|[=#]|\(|\)|\d")


def mapify(smiles, start):
    """Returns (mapped smiles, next map). The first atom carries one extra
    bond to the template core."""
    tokens = TOKEN.findall(smiles)
    if "".join(tokens) != smiles:
        raise ValueError("unsupported substituent " + smiles)
    atoms = []  # [symbol, bond valence]
    prev, stack, rings, pending = None, [], {}, 1
    for t in tokens:
        if t in "=#":
            pending = 2 if t == "=" else 3
        elif t == "(":
            stack.append(prev)
        elif t == ")":
            prev = stack.pop()
        elif t.isdigit():
            if t in rings:
                other, order = rings.pop(t)
                o = max(order, pending)
                atoms[prev][1] += o
                atoms[other][1] += o
            else:
                rings[t] = (prev, pending)
            pending = 1
        else:
            atoms.append([t, 1 if prev is None else 0])
            idx = len(atoms) - 1
            if prev is not None:
                atoms[prev][1] += pending
                atoms[idx][1] += pending
            prev, pending = idx, 1
    out, k, n = [], 0, start
    for t in tokens:
        if t in "=#()" or t.isdigit():
            out.append(t)
            continue
        sym, used = atoms[k]
        k += 1
        if sym in AROMATIC_H:
            h = AROMATIC_H[sym] if used <= 2 else 0
        else:
            h = VALENCE[sym] - used
        hs = "" if h == 0 else ("H" if h == 1 else "H%d" % h)
        out.append("[%s%s:%d]" % (sym, hs, n))
        n += 1
    return "".join(out), n


ALKYL = ["C", "CC", "CCC", "C(C)C", "CCCC", "C1CC1", "C1CCCCC1", "CCOC", "CC(C)C", "CCCl",
         "c1ccccc1", "c1ccc(C)cc1", "c1ccc(F)cc1", "c1ccncc1", "CC#N", "C(F)(F)F", "CCC(C)C",
         "COC", "c1ccc(OC)cc1", "C1CCOC1"]
PARA = ["C", "F", "Cl", "OC", "CC", "C(F)(F)F", "C#N", "N(C)C", "SC", "CCC"]

# Each template: (class, reactants, product, slots). Slots name the
# substituent pool per placeholder.
TEMPLATES = [
    ("amide", 2, "[C:1]({A})(=[O:2])[Cl:3].[NH2:4]{B}", "[C:1]({A})(=[O:2])[NH:4]{B}", "AB"),
    ("ester", 2, "[C:1]({A})(=[O:2])[OH:3].[OH:4]{B}", "[C:1]({A})(=[O:2])[O:4]{B}", "AB"),
    ("n_alkyl", 1, "[CH2:1]({A})[Br:2].[NH2:3]{B}", "[CH2:1]({A})[NH:3]{B}", "AB"),
    ("ether", 1, "[CH2:1]({A})[Br:2].[OH:3][c:4]1[cH:5][cH:6][c:7]({P})[cH:8][cH:9]1",
     "[CH2:1]({A})[O:3][c:4]1[cH:5][cH:6][c:7]({P})[cH:8][cH:9]1", "AP"),
    ("boc_on", 5,
     "[NH2:1]{A}.[CH3:2][C:3]([CH3:4])([CH3:5])[O:6][C:7](=[O:8])[O:9][C:10](=[O:11])[O:12][C:13]([CH3:14])([CH3:15])[CH3:16]",
     "[NH:1]({A})[C:7](=[O:8])[O:6][C:3]([CH3:2])([CH3:4])[CH3:5]", "A"),
    ("boc_off", 6, "[NH:1]({A})[C:2](=[O:3])[O:4][C:5]([CH3:6])([CH3:7])[CH3:8]", "[NH2:1]{A}", "A"),
    ("suzuki", 3,
     "[Br:20][c:1]1[n:2][cH:3][c:4]({P})[cH:5][cH:6]1.[OH:30][B:31]([OH:32])[c:10]1[cH:11][cH:12][c:13]({Q})[cH:14][cH:15]1",
     "[c:1]1([c:10]2[cH:11][cH:12][c:13]({Q})[cH:14][cH:15]2)[n:2][cH:3][c:4]({P})[cH:5][cH:6]1", "PQ"),
    ("ketone_red", 7, "[C:1]({A})(=[O:2])[CH3:3]", "[CH:1]({A})([OH:2])[CH3:3]", "A"),
    ("alcohol_ox", 8, "[CH2:1]({A})[OH:2]", "[CH:1]({A})=[O:2]", "A"),
    ("red_amination", 1, "[CH:1]({A})=[O:2].[NH2:3]{B}", "[CH2:1]({A})[NH:3]{B}", "AB"),
]

SUBSTITUENT_START = 40


def instantiate(template, rng, used):
    name, cls, lhs, rhs, slots = template
    for _ in range(1000):
        picks = {}
        for s in slots:
            pool = PARA if s in "PQ" else ALKYL
            picks[s] = rng.choice(pool)
        if slots == "AB" and picks["A"] == picks["B"]:
            continue
        key = (name, tuple(sorted(picks.items())))
        if key in used:
            continue
        used.add(key)
        break
    else:
        raise RuntimeError("exhausted substituents for " + name)
    n = SUBSTITUENT_START
    left, right = lhs, rhs
    for s in slots:
        mapped, n = mapify(picks[s], n)
        left = left.replace("{%s}" % s, mapped)
        right = right.replace("{%s}" % s, mapped)
    return cls, left + ">>" + right


def main():
    outdir = sys.argv[1] if len(sys.argv) > 1 else "data"
    rng = random.Random(17)
    used = set()
    corpus = []
    # 4 reactions per template, 40 in total.
    for t in TEMPLATES:
        for _ in range(4):
            corpus.append(instantiate(t, rng, used))
    held_out = [instantiate(t, rng, used) for t in TEMPLATES]
    with open(outdir + "/mini_corpus.csv", "w") as f:
        f.write("id,class,reaction\n")
        for i, (cls, rxn) in enumerate(corpus):
            f.write("mini-%02d,%d,%s\n" % (i + 1, cls, rxn))
    blocks = set()
    for _, rxn in corpus + held_out:
        for part in rxn.split(">>")[0].split("."):
            blocks.add(re.sub(r"\[([A-Z][a-z]?|[a-z])(?:H\d?)?:\d+\]", r"\1", part))
    with open(outdir + "/building_blocks.smi", "w") as f:
        f.write("# reactants of the bundled reaction sets\n")
        f.write("".join(b + "\n" for b in sorted(blocks)))
    with open(outdir + "/perturbation.csv", "w") as f:
        f.write("id,class,reaction\n")
        for i, (cls, rxn) in enumerate(held_out):
            f.write("held-%02d,%d,%s\n" % (i + 1, cls, rxn))


if __name__ == "__main__":
    main()
