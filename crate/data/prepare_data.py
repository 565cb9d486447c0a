"""Build the desk-scale CSV inputs from openly redistributed molecule sets.

Source corpus: a seeded random sample of the MOSES training split (a ZINC
drug-like subset shipped inside the `molsets` wheel).
Solubility target: the RDKit/Huuskonen aqueous solubility set shipped inside
the `datamol` wheel (train + test SDF files merged).

Descriptors are computed with RDKit. Run with the wheels' members unpacked
into --raw (see README).
"""
import argparse
import csv
import gzip
import os
import random

from rdkit import Chem, RDLogger
from rdkit.Chem import Descriptors

RDLogger.DisableLog("rdApp.*")

SOURCE_DESCRIPTORS = [
    "MolLogP",
    "PEOE_VSA6",
    "MolWt",
    "TPSA",
    "NumHAcceptors",
    "NumHeteroatoms",
    "NumAromaticRings",
    "RingCount",
]


def fmt(v):
    return repr(round(float(v), 6))


def source_rows(raw, n, seed, split):
    path = os.path.join(raw, "moses/dataset/data", split + ".csv.gz")
    with gzip.open(path, "rt") as fh:
        smiles = [line.strip() for line in fh][1:]
    rng = random.Random(seed)
    rng.shuffle(smiles)
    out = []
    fns = dict(Descriptors.descList)
    for s in smiles:
        mol = Chem.MolFromSmiles(s)
        if mol is None:
            continue
        out.append([s] + [fmt(fns[name](mol)) for name in SOURCE_DESCRIPTORS])
        if len(out) == n:
            break
    return out


def write(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def solubility_rows(raw):
    rows = []
    seen = set()
    for part in ("train", "test"):
        path = os.path.join(raw, "datamol/data", "solubility.%s.sdf" % part)
        for mol in Chem.SDMolSupplier(path):
            if mol is None:
                continue
            smi = Chem.MolToSmiles(mol)
            if smi in seen or "." in smi:
                continue
            seen.add(smi)
            vals = []
            ok = True
            for _, fn in Descriptors.descList:
                try:
                    v = float(fn(mol))
                except Exception:
                    ok = False
                    break
                if v != v or v in (float("inf"), float("-inf")):
                    ok = False
                    break
                vals.append(fmt(v))
            if ok:
                rows.append([smi, fmt(mol.GetProp("SOL"))] + vals)
    return rows


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--raw", required=True)
    ap.add_argument("--out", default=os.path.dirname(os.path.abspath(__file__)))
    ap.add_argument("--source-size", type=int, default=25000)
    ap.add_argument("--holdout-size", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=20220101)
    args = ap.parse_args()

    header = ["smiles"] + SOURCE_DESCRIPTORS
    write(os.path.join(args.out, "zinc_desk_25k.csv"), header,
          source_rows(args.raw, args.source_size, args.seed, "train"))
    write(os.path.join(args.out, "zinc_desk_holdout.csv"), header,
          source_rows(args.raw, args.holdout_size, args.seed, "test"))

    names = [name for name, _ in Descriptors.descList]
    write(os.path.join(args.out, "logs.csv"), ["smiles", "target"] + names,
          solubility_rows(args.raw))


if __name__ == "__main__":
    main()
