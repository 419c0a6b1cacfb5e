"""On-disk layout of a preprocessed dataset bundle.

A bundle directory holds::

    msa.fasta          processed alignment (query first), aligned to column_map
    weights.csv        id,weight
    column_map.txt     one 1-based wild-type residue number per line
    contact_mask.txt   optional; L rows of L characters '1'/'0'
    dms.csv            optional; mutant,DMS_score,label,sequence
    bundle.json        metadata (counts, threshold, score direction, theta)
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from matvae.seqdata import DataError, DmsDataset, DmsRecord, MsaDataset, decode_indices, encode

BUNDLE_FILES = ("msa.fasta", "weights.csv", "column_map.txt", "contact_mask.txt", "dms.csv", "bundle.json")


@dataclass
class Bundle:
    msa: MsaDataset
    meta: dict
    mask: np.ndarray | None = None
    dms: DmsDataset | None = None


def write_bundle(out: Path, msa: MsaDataset, meta: dict, mask: np.ndarray | None = None,
                 dms: DmsDataset | None = None) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    p = out / "msa.fasta"
    with p.open("w") as fh:
        for name, seq in zip(msa.ids, msa.sequences()):
            fh.write(f">{name}\n{seq}\n")
    written.append(p)
    p = out / "weights.csv"
    with p.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "weight"])
        for name, wt in zip(msa.ids, msa.weights):
            w.writerow([name, repr(float(wt))])
    written.append(p)
    p = out / "column_map.txt"
    p.write_text("".join(f"{c}\n" for c in msa.column_map))
    written.append(p)
    if mask is not None:
        p = out / "contact_mask.txt"
        p.write_text("".join("".join("1" if v else "0" for v in row) + "\n" for row in mask))
        written.append(p)
    if dms is not None:
        p = out / "dms.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["mutant", "DMS_score", "label", "sequence"])
            for r in dms.records:
                w.writerow([r.mutant, repr(r.score), int(r.label), decode_indices(r.encoded, msa.alphabet)])
        written.append(p)
    p = out / "bundle.json"
    p.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    written.append(p)
    return written


def read_bundle(path) -> Bundle:
    path = Path(path)
    if not (path / "bundle.json").is_file():
        raise DataError(f"{path}: not a bundle directory (bundle.json missing)")
    meta = json.loads((path / "bundle.json").read_text())
    ids, seqs = [], []
    for line in (path / "msa.fasta").read_text().splitlines():
        if line.startswith(">"):
            ids.append(line[1:])
        elif line:
            seqs.append(line)
    encoded = np.stack([encode(s) for s in seqs])
    with (path / "weights.csv").open(newline="") as fh:
        weights = np.array([float(r["weight"]) for r in csv.DictReader(fh)])
    column_map = [int(x) for x in (path / "column_map.txt").read_text().split()]
    msa = MsaDataset(ids, encoded, weights, column_map)
    mask = None
    if (path / "contact_mask.txt").is_file():
        rows = (path / "contact_mask.txt").read_text().split()
        mask = np.array([[c == "1" for c in row] for row in rows], dtype=bool)
    dms = None
    if (path / "dms.csv").is_file():
        with (path / "dms.csv").open(newline="") as fh:
            recs = [DmsRecord(r["mutant"], encode(r["sequence"]), float(r["DMS_score"]), bool(int(r["label"])))
                    for r in csv.DictReader(fh)]
        dms = DmsDataset(recs, float(meta["dms_threshold"]), bool(meta["higher_is_fit"]), int(meta.get("dms_dropped", 0)))
    return Bundle(msa, meta, mask, dms)
