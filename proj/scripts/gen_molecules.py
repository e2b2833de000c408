#!/usr/bin/env python3
"""Generates data/molecules.smi: real drug-like SMILES plus random molecules
written in randomized (non-canonical) atom orders, for parser round-trip tests."""

import random
import sys

REAL = [
    "CC(=O)Oc1ccccc1C(=O)O",
    "Cn1cnc2c1c(=O)n(C)c(=O)n2C",
    "CC(C)Cc1ccc(cc1)C(C)C(=O)O",
    "CC(=O)Nc1ccc(O)cc1",
    "CN1CCC[C@H]1c1cccnc1",
    "O=C(O)c1ccccc1O",
    "CCN(CC)CC",
    "C1CCOC1",
    "ClC(Cl)Cl",
    "OC(=O)CCC(=O)O",
    "CC(C)(C)OC(=O)N1CCNCC1",
    "COc1ccc(cc1)S(=O)(=O)Cl",
    "Brc1ccc(cc1)B(O)O",
    "N#Cc1ccccc1",
    "C=CC(=O)OC",
    "CCOC(=O)C#C",
    "O=[N+]([O-])c1ccccc1",
    "[Na+].[O-]C(=O)C",
    "CC(C)(C)[Si](C)(C)OC",
    "FC(F)(F)c1ccc(cc1)N",
    "c1ccc2ccccc2c1",
    "c1ccc2[nH]ccc2c1",
    "c1ccoc1",
    "c1ccsc1",
    "Cc1ncc[nH]1",
    "OCC(O)CO",
    "NCCCC[C@H](N)C(=O)O",
    "CC(=O)C",
    "O=C1CCCCC1",
    "C1CC2CCC1C2",
    "CC12CCC(CC1)CC2",
    "CS(C)=O",
    "CC(=O)[O-].[K+]",
    "[2H]C([2H])([2H])O",
    "OB(O)c1cccs1",
    "CCCCCCCCCCCCCCCC(=O)O",
    "Oc1ccc(cc1)C(=O)c1ccccc1",
    "CN(C)C=O",
    "CC(C)N=C=NC(C)C",
    "O=C(Cl)c1ccc(cc1)[N+](=O)[O-]",
    "COC(=O)[C@@H](N)Cc1ccccc1",
    "CC1(C)OB(OC1(C)C)c1ccccc1",
    "Clc1ncccc1",
    "Ic1ccccc1",
    "OC1CCN(CC1)C(=O)OC(C)(C)C",
    "C[N+](C)(C)C.[Br-]",
    "c1ccc(cc1)P(c1ccccc1)c1ccccc1",
    "O=S(=O)(O)O",
    "OP(=O)(O)O",
    "CC#N",
]

ELEMENTS = [("C", 4, 0.6), ("N", 3, 0.15), ("O", 2, 0.15), ("S", 2, 0.03),
            ("F", 1, 0.03), ("Cl", 1, 0.02), ("Br", 1, 0.02)]


class Mol:
    def __init__(self):
        self.atoms = []  # dicts: sym, arom, hfix (None=implicit), charge, map, cap
        self.bonds = {}  # (i,j) -> order string: '1','2','3','a'

    def add(self, **kw):
        a = dict(sym="C", arom=False, hfix=None, charge=0, map=0, cap=4, iso=0)
        a.update(kw)
        self.atoms.append(a)
        return len(self.atoms) - 1

    def bond(self, i, j, order):
        self.bonds[(min(i, j), max(i, j))] = order

    def used(self, i):
        total = 0
        for (a, b), o in self.bonds.items():
            if i in (a, b):
                total += {"1": 1, "2": 2, "3": 3, "a": 1}[o]
        return total

    def neighbors(self, i):
        out = []
        for (a, b) in self.bonds:
            if a == i:
                out.append(b)
            elif b == i:
                out.append(a)
        return out


def add_ring(m, rng):
    kind = rng.choice(["benzene", "benzene", "pyridine", "thiophene", "furan", "pyrrole",
                       "cyclohexane", "cyclopentane"])
    if kind in ("cyclohexane", "cyclopentane"):
        n = 6 if kind == "cyclohexane" else 5
        idx = [m.add(sym="C", cap=4) for _ in range(n)]
        for k in range(n):
            m.bond(idx[k], idx[(k + 1) % n], "1")
        return idx
    if kind in ("benzene", "pyridine"):
        idx = []
        for k in range(6):
            if kind == "pyridine" and k == 2:
                idx.append(m.add(sym="N", arom=True, cap=0))
            else:
                idx.append(m.add(sym="C", arom=True, cap=1))
        for k in range(6):
            m.bond(idx[k], idx[(k + 1) % 6], "a")
        return idx
    hetero = {"thiophene": ("S", None), "furan": ("O", None), "pyrrole": ("N", 1)}[kind]
    idx = []
    for k in range(5):
        if k == 0:
            idx.append(m.add(sym=hetero[0], arom=True, cap=0, hfix=hetero[1]))
        else:
            idx.append(m.add(sym="C", arom=True, cap=1))
    for k in range(5):
        m.bond(idx[k], idx[(k + 1) % 5], "a")
    return idx


def free_valence(m, i):
    a = m.atoms[i]
    if a["arom"]:
        return a["cap"] - sum(1 for n in m.neighbors(i) if m.bonds[(min(i, n), max(i, n))] != "a")
    return a["cap"] - m.used(i)


def random_molecule(rng, map_offset=0):
    m = Mol()
    target = rng.randint(2, 24)
    if rng.random() < 0.4:
        add_ring(m, rng)
    else:
        sym, cap, _ = rng.choice(ELEMENTS[:3])
        m.add(sym=sym, cap=cap)
    while len(m.atoms) < target:
        anchors = [i for i in range(len(m.atoms)) if free_valence(m, i) > 0]
        if not anchors:
            break
        anchor = rng.choice(anchors)
        if rng.random() < 0.12:
            ring = add_ring(m, rng)
            attach = [i for i in ring if free_valence(m, i) > 0]
            m.bond(anchor, rng.choice(attach), "1")
            continue
        r = rng.random()
        acc = 0
        for sym, cap, w in ELEMENTS:
            acc += w
            if r <= acc:
                break
        new = m.add(sym=sym, cap=cap)
        order = "1"
        room = min(free_valence(m, anchor), cap)
        if not m.atoms[anchor]["arom"] and room >= 2 and rng.random() < 0.2:
            order = "2"
        if not m.atoms[anchor]["arom"] and room >= 3 and sym in ("C", "N") and rng.random() < 0.05:
            order = "3"
        m.bond(anchor, new, order)
    # occasional extra ring closure between non-aromatic atoms
    if rng.random() < 0.3:
        cand = [i for i in range(len(m.atoms)) if not m.atoms[i]["arom"] and free_valence(m, i) > 0]
        rng.shuffle(cand)
        for i in cand:
            for j in cand:
                if i < j and (i, j) not in m.bonds and free_valence(m, i) > 0 and free_valence(m, j) > 0:
                    m.bond(i, j, "1")
                    break
            else:
                continue
            break
    # decorations: charges, maps, isotopes
    for i, a in enumerate(m.atoms):
        if a["arom"]:
            continue
        if a["sym"] == "N" and m.used(i) == 3 and rng.random() < 0.3:
            a["charge"] = 1
            a["hfix"] = 1
        elif a["sym"] == "O" and m.used(i) == 1 and rng.random() < 0.1:
            a["charge"] = -1
            a["hfix"] = 0
        if rng.random() < 0.1:
            a["map"] = map_offset + i + 1
        if a["sym"] == "C" and rng.random() < 0.02:
            a["iso"] = 13
    return m


def hcount(m, i):
    a = m.atoms[i]
    if a["hfix"] is not None:
        return a["hfix"]
    if a["arom"]:
        return 1 if (a["sym"] == "C" and len(m.neighbors(i)) == 2) else 0
    base = {"C": 4, "N": 3, "O": 2, "S": 2, "F": 1, "Cl": 1, "Br": 1}[a["sym"]]
    return max(0, base - m.used(i))


def atom_text(m, i, rng):
    a = m.atoms[i]
    sym = a["sym"].lower() if a["arom"] else a["sym"]
    h = hcount(m, i)
    need_bracket = a["charge"] or a["map"] or a["iso"] or a["hfix"] is not None
    if not need_bracket and rng.random() < 0.05:
        need_bracket = True
    if not need_bracket:
        return sym
    out = "[" + (str(a["iso"]) if a["iso"] else "") + sym
    if h == 1:
        out += "H"
    elif h > 1:
        out += "H%d" % h
    if a["charge"] > 0:
        out += "+"
    elif a["charge"] < 0:
        out += "-"
    if a["map"]:
        out += ":%d" % a["map"]
    return out + "]"


def bond_text(m, i, j, rng):
    o = m.bonds[(min(i, j), max(i, j))]
    if o == "2":
        return "="
    if o == "3":
        return "#"
    if o == "a":
        return ":" if rng.random() < 0.1 else ""
    both_arom = m.atoms[i]["arom"] and m.atoms[j]["arom"]
    if both_arom:
        return "-" if rng.random() < 0.5 else ""
    return "-" if rng.random() < 0.1 else ""


def write(m, rng):
    n = len(m.atoms)
    seen = [False] * n
    out_parts = []
    labels = iter(rng.sample(range(1, 60), 59))
    for start in rng.sample(range(n), n):
        if seen[start]:
            continue
        # first pass: dfs tree + closures
        order, children, closures = [], {i: [] for i in range(n)}, []
        parent = {}

        def dfs(v, p):
            seen[v] = True
            parent[v] = p
            order.append(v)
            nb = m.neighbors(v)
            rng.shuffle(nb)
            for w in nb:
                if w == p:
                    continue
                if seen[w]:
                    if (v, w) not in closures:
                        closures.append((w, v))
                    continue
                children[v].append(w)
                dfs(w, v)

        dfs(start, None)
        digit = {}

        def emit(v):
            s = atom_text(m, v, rng)
            for (a, b) in closures:
                if b == v:
                    d = digit[(a, b)]
                    s += ("%%%02d" % d) if d > 9 else str(d)
            for (a, b) in closures:
                if a == v:
                    d = next(labels)
                    digit[(a, b)] = d
                    s += bond_text(m, a, b, rng) + (("%%%02d" % d) if d > 9 else str(d))
            kids = children[v]
            for k, c in enumerate(kids):
                frag = bond_text(m, v, c, rng) + emit(c)
                s += "(" + frag + ")" if k + 1 < len(kids) else frag
            return s

        out_parts.append(emit(start))
    return ".".join(out_parts)


def main():
    rng = random.Random(2024)
    lines = list(REAL)
    while len(lines) < 520:
        m = random_molecule(rng)
        lines.append(write(m, rng))
        if rng.random() < 0.05:
            lines[-1] += "." + write(random_molecule(rng, 100), rng)
    out = sys.argv[1] if len(sys.argv) > 1 else "data/molecules.smi"
    with open(out, "w") as f:
        f.write("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
